//! Procedural grid environments, the octagonal traversal graph and the
//! breadth-first oracle used for optimal-action supervision.
//!
//! Coordinates are `(x, y)` with `x` growing east and `y` growing south, so
//! `N` is `(0, -1)`. Every edge costs one step, diagonals included.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Marker for unreachable nodes in a [`DistanceMap`].
pub const UNREACHABLE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Chair,
    Table,
    Bed,
    Door,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 4] = [
        ObjectClass::Chair,
        ObjectClass::Table,
        ObjectClass::Bed,
        ObjectClass::Door,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Chair => "chair",
            ObjectClass::Table => "table",
            ObjectClass::Bed => "bed",
            ObjectClass::Door => "door",
        }
    }

    fn glyph(self) -> char {
        match self {
            ObjectClass::Chair => 'c',
            ObjectClass::Table => 't',
            ObjectClass::Bed => 'b',
            ObjectClass::Door => 'd',
        }
    }

    fn from_glyph(c: char) -> Option<Self> {
        ObjectClass::ALL.into_iter().find(|k| k.glyph() == c)
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectClass::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParams(format!("unknown object class `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
}

impl Direction {
    /// Fixed order, also used as the oracle's tie-break order.
    pub const ALL: [Direction; 8] = [
        Direction::N,
        Direction::NE,
        Direction::E,
        Direction::SE,
        Direction::S,
        Direction::SW,
        Direction::W,
        Direction::NW,
    ];

    pub const AXES: [Direction; 4] = [Direction::N, Direction::E, Direction::S, Direction::W];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn offset(self) -> (i32, i32) {
        match self {
            Direction::N => (0, -1),
            Direction::NE => (1, -1),
            Direction::E => (1, 0),
            Direction::SE => (1, 1),
            Direction::S => (0, 1),
            Direction::SW => (-1, 1),
            Direction::W => (-1, 0),
            Direction::NW => (-1, -1),
        }
    }

    pub fn opposite(self) -> Direction {
        Direction::ALL[(self.index() + 4) % 8]
    }

    pub fn is_diagonal(self) -> bool {
        self.index() % 2 == 1
    }
}

/// The nine high-level commands: eight unit moves and `Stop`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Move(Direction),
    Stop,
}

impl Action {
    pub const COUNT: usize = 9;

    /// Moves in direction order, then `Stop`.
    pub const ALL: [Action; 9] = [
        Action::Move(Direction::N),
        Action::Move(Direction::NE),
        Action::Move(Direction::E),
        Action::Move(Direction::SE),
        Action::Move(Direction::S),
        Action::Move(Direction::SW),
        Action::Move(Direction::W),
        Action::Move(Direction::NW),
        Action::Stop,
    ];

    pub fn index(self) -> usize {
        match self {
            Action::Move(d) => d.index(),
            Action::Stop => 8,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Move(d) => write!(f, "{d:?}"),
            Action::Stop => f.write_str("Stop"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub x: i32,
    pub y: i32,
}

impl Coord {
    pub fn new(x: i32, y: i32) -> Self {
        Coord { x, y }
    }

    pub fn step(self, d: Direction) -> Coord {
        let (dx, dy) = d.offset();
        Coord::new(self.x + dx, self.y + dy)
    }

    pub fn chebyshev(self, other: Coord) -> i32 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Terrain {
    Wall,
    Floor,
}

/// Axis-aligned rectangular room, inclusive of `x..x+w` and `y..y+h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Room {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

impl Room {
    pub fn contains(&self, c: Coord) -> bool {
        c.x >= self.x && c.x < self.x + self.w && c.y >= self.y && c.y < self.y + self.h
    }

    pub fn center(&self) -> Coord {
        Coord::new(self.x + self.w / 2, self.y + self.h / 2)
    }

    fn overlaps_with_margin(&self, other: &Room, margin: i32) -> bool {
        self.x - margin < other.x + other.w
            && other.x - margin < self.x + self.w
            && self.y - margin < other.y + other.h
            && other.y - margin < self.y + self.h
    }

    fn cells(&self) -> impl Iterator<Item = Coord> + '_ {
        (self.y..self.y + self.h).flat_map(move |y| (self.x..self.x + self.w).map(move |x| Coord::new(x, y)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub class: ObjectClass,
    pub position: Coord,
}

/// Generation parameters for [`generate_environment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub width: i32,
    pub height: i32,
    pub rooms: usize,
    pub objects_per_class: usize,
    pub room_min: i32,
    pub room_max: i32,
    /// Fraction of room cells turned into single-cell obstacles.
    pub clutter: f64,
    pub max_retries: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            width: 24,
            height: 24,
            rooms: 4,
            objects_per_class: 1,
            room_min: 4,
            room_max: 8,
            clutter: 0.0,
            max_retries: 50,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.width < 16 || self.height < 16 {
            return bad(format!(
                "grid must be at least 16x16, got {}x{}",
                self.width, self.height
            ));
        }
        if self.rooms < 2 {
            return bad(format!("need at least 2 rooms, got {}", self.rooms));
        }
        if self.objects_per_class < 1 {
            return bad("need at least 1 object per class".into());
        }
        if self.room_min < 3 || self.room_max < self.room_min {
            return bad(format!("invalid room size range {}..={}", self.room_min, self.room_max));
        }
        if self.room_max + 2 > self.width.min(self.height) {
            return bad(format!("room_max {} does not fit the grid", self.room_max));
        }
        if !(0.0..=0.3).contains(&self.clutter) {
            return bad(format!("clutter must lie in [0, 0.3], got {}", self.clutter));
        }
        if self.max_retries == 0 {
            return bad("max_retries must be positive".into());
        }
        Ok(())
    }
}

/// An indoor-like grid environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MapDocument", try_from = "MapDocument")]
pub struct GridMap {
    pub width: i32,
    pub height: i32,
    pub cells: Vec<Terrain>,
    pub objects: Vec<ObjectInstance>,
    pub rooms: Vec<Room>,
    pub seed: u64,
    pub params: GenParams,
}

impl GridMap {
    /// Builds a map from ASCII rows: `#` wall, `.` floor, and `c`/`t`/`b`/`d`
    /// for a chair/table/bed/door standing on a floor cell.
    pub fn from_ascii(rows: &[&str]) -> Result<GridMap> {
        let height = rows.len() as i32;
        let width = rows.first().map_or(0, |r| r.chars().count()) as i32;
        let mut cells = Vec::with_capacity((width * height) as usize);
        let mut objects = Vec::new();
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() as i32 != width {
                return Err(Error::InvalidMap(format!("row {y} has ragged width")));
            }
            for (x, ch) in row.chars().enumerate() {
                let terrain = match ch {
                    '#' => Terrain::Wall,
                    '.' => Terrain::Floor,
                    c => match ObjectClass::from_glyph(c) {
                        Some(class) => {
                            objects.push(ObjectInstance {
                                class,
                                position: Coord::new(x as i32, y as i32),
                            });
                            Terrain::Floor
                        }
                        None => return Err(Error::InvalidMap(format!("unknown glyph `{c}`"))),
                    },
                };
                cells.push(terrain);
            }
        }
        Ok(GridMap {
            width,
            height,
            cells,
            objects,
            rooms: Vec::new(),
            seed: 0,
            params: GenParams::default(),
        })
    }

    pub fn with_rooms(mut self, rooms: Vec<Room>) -> Self {
        self.rooms = rooms;
        self
    }

    pub fn in_bounds(&self, c: Coord) -> bool {
        c.x >= 0 && c.y >= 0 && c.x < self.width && c.y < self.height
    }

    fn idx(&self, c: Coord) -> usize {
        (c.y * self.width + c.x) as usize
    }

    /// Terrain at `c`; out-of-bounds reads as wall.
    pub fn terrain(&self, c: Coord) -> Terrain {
        if self.in_bounds(c) {
            self.cells[self.idx(c)]
        } else {
            Terrain::Wall
        }
    }

    pub fn is_floor(&self, c: Coord) -> bool {
        self.terrain(c) == Terrain::Floor
    }

    fn set(&mut self, c: Coord, t: Terrain) {
        let i = self.idx(c);
        self.cells[i] = t;
    }

    pub fn floor_count(&self) -> usize {
        self.cells.iter().filter(|&&t| t == Terrain::Floor).count()
    }

    pub fn room_index(&self, c: Coord) -> Option<usize> {
        self.rooms.iter().position(|r| r.contains(c))
    }

    pub fn objects_at(&self, c: Coord) -> impl Iterator<Item = ObjectClass> + '_ {
        self.objects.iter().filter(move |o| o.position == c).map(|o| o.class)
    }

    pub fn has_class(&self, class: ObjectClass) -> bool {
        self.objects.iter().any(|o| o.class == class)
    }

    pub fn rows(&self) -> Vec<String> {
        (0..self.height)
            .map(|y| {
                (0..self.width)
                    .map(|x| match self.terrain(Coord::new(x, y)) {
                        Terrain::Wall => '#',
                        Terrain::Floor => '.',
                    })
                    .collect()
            })
            .collect()
    }

    /// Checks every map invariant: objects on floor, a single connected floor
    /// component, and at least one object per room.
    pub fn validate(&self) -> Result<()> {
        if self.cells.len() != (self.width * self.height) as usize {
            return Err(Error::InvalidMap("cell count does not match dimensions".into()));
        }
        if let Some(o) = self.objects.iter().find(|o| !self.is_floor(o.position)) {
            return Err(Error::InvalidMap(format!(
                "{} at ({}, {}) is not on a floor cell",
                o.class, o.position.x, o.position.y
            )));
        }
        if !floor_connected(self) {
            return Err(Error::InvalidMap("floor is not connected".into()));
        }
        for (i, room) in self.rooms.iter().enumerate() {
            if !self.objects.iter().any(|o| room.contains(o.position)) {
                return Err(Error::InvalidMap(format!("room {i} holds no object")));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ObjectRecord {
    class: ObjectClass,
    x: i32,
    y: i32,
}

/// On-disk form of a [`GridMap`].
#[derive(Serialize, Deserialize)]
struct MapDocument {
    seed: u64,
    params: GenParams,
    width: i32,
    height: i32,
    cells: Vec<String>,
    objects: Vec<ObjectRecord>,
    rooms: Vec<Room>,
}

impl From<GridMap> for MapDocument {
    fn from(map: GridMap) -> Self {
        MapDocument {
            seed: map.seed,
            width: map.width,
            height: map.height,
            cells: map.rows(),
            objects: map
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    class: o.class,
                    x: o.position.x,
                    y: o.position.y,
                })
                .collect(),
            rooms: map.rooms,
            params: map.params,
        }
    }
}

impl TryFrom<MapDocument> for GridMap {
    type Error = Error;

    fn try_from(doc: MapDocument) -> Result<Self> {
        let rows: Vec<&str> = doc.cells.iter().map(String::as_str).collect();
        let mut map = GridMap::from_ascii(&rows)?;
        if map.width != doc.width || map.height != doc.height {
            return Err(Error::InvalidMap("declared size differs from cell rows".into()));
        }
        map.objects = doc
            .objects
            .into_iter()
            .map(|o| ObjectInstance {
                class: o.class,
                position: Coord::new(o.x, o.y),
            })
            .collect();
        map.rooms = doc.rooms;
        map.seed = doc.seed;
        map.params = doc.params;
        map.validate()?;
        Ok(map)
    }
}

/// Generates an environment: non-overlapping rectangular rooms joined in
/// sequence by one-cell L-shaped corridors, optional single-cell clutter,
/// and objects scattered uniformly inside rooms.
pub fn generate_environment(seed: u64, params: &GenParams) -> Result<GridMap> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reason = String::new();
    for _ in 0..params.max_retries {
        match try_generate(&mut rng, seed, params) {
            Ok(map) => return Ok(map),
            Err(r) => reason = r,
        }
    }
    Err(Error::GenerationFailed {
        attempts: params.max_retries,
        reason,
    })
}

fn try_generate(rng: &mut ChaCha8Rng, seed: u64, params: &GenParams) -> std::result::Result<GridMap, String> {
    let mut map = GridMap {
        width: params.width,
        height: params.height,
        cells: vec![Terrain::Wall; (params.width * params.height) as usize],
        objects: Vec::new(),
        rooms: Vec::new(),
        seed,
        params: params.clone(),
    };

    let mut rooms: Vec<Room> = Vec::new();
    for _ in 0..64 * params.rooms {
        if rooms.len() == params.rooms {
            break;
        }
        let w = rng.random_range(params.room_min..=params.room_max);
        let h = rng.random_range(params.room_min..=params.room_max);
        let x = rng.random_range(1..=params.width - w - 1);
        let y = rng.random_range(1..=params.height - h - 1);
        let room = Room { x, y, w, h };
        if rooms.iter().all(|r| !r.overlaps_with_margin(&room, 1)) {
            rooms.push(room);
        }
    }
    if rooms.len() < params.rooms {
        return Err(format!("placed only {} of {} rooms", rooms.len(), params.rooms));
    }

    for room in &rooms {
        for c in room.cells() {
            map.set(c, Terrain::Floor);
        }
    }
    for pair in rooms.windows(2) {
        let (a, b) = (pair[0].center(), pair[1].center());
        let corner = if rng.random_bool(0.5) {
            Coord::new(b.x, a.y)
        } else {
            Coord::new(a.x, b.y)
        };
        carve_line(&mut map, a, corner);
        carve_line(&mut map, corner, b);
    }
    map.rooms = rooms;

    if params.clutter > 0.0 {
        let rooms = map.rooms.clone();
        for room in &rooms {
            let blocks = (params.clutter * (room.w * room.h) as f64).round() as usize;
            for _ in 0..blocks {
                let c = Coord::new(
                    rng.random_range(room.x..room.x + room.w),
                    rng.random_range(room.y..room.y + room.h),
                );
                if !map.is_floor(c) || room.center() == c {
                    continue;
                }
                map.set(c, Terrain::Wall);
                if !floor_connected(&map) {
                    map.set(c, Terrain::Floor);
                }
            }
        }
    }

    let mut classes: Vec<ObjectClass> = ObjectClass::ALL
        .iter()
        .flat_map(|&k| std::iter::repeat_n(k, params.objects_per_class))
        .collect();
    while classes.len() < map.rooms.len() {
        classes.push(ObjectClass::ALL[rng.random_range(0..4)]);
    }
    classes.shuffle(rng);
    let mut room_order: Vec<usize> = (0..map.rooms.len()).collect();
    room_order.shuffle(rng);
    for (j, class) in classes.into_iter().enumerate() {
        let room = if j < room_order.len() {
            map.rooms[room_order[j]]
        } else {
            map.rooms[rng.random_range(0..map.rooms.len())]
        };
        let free: Vec<Coord> = room
            .cells()
            .filter(|&c| map.is_floor(c) && !map.objects.iter().any(|o| o.position == c))
            .collect();
        let Some(&position) = free.get(rng.random_range(0..free.len().max(1))) else {
            return Err("room has no free floor cell for an object".into());
        };
        map.objects.push(ObjectInstance { class, position });
    }

    map.validate().map_err(|e| e.to_string())?;
    Ok(map)
}

fn carve_line(map: &mut GridMap, from: Coord, to: Coord) {
    let (dx, dy) = ((to.x - from.x).signum(), (to.y - from.y).signum());
    let mut c = from;
    map.set(c, Terrain::Floor);
    while c != to {
        c = Coord::new(c.x + dx, c.y + dy);
        map.set(c, Terrain::Floor);
    }
}

/// Whether a unit move from `c` in direction `d` is legal on `map`.
/// Diagonal moves need both axis-aligned neighbours to be floor.
pub fn can_move(map: &GridMap, c: Coord, d: Direction) -> bool {
    let (dx, dy) = d.offset();
    let target = Coord::new(c.x + dx, c.y + dy);
    if !map.is_floor(target) {
        return false;
    }
    if d.is_diagonal() {
        map.is_floor(Coord::new(c.x + dx, c.y)) && map.is_floor(Coord::new(c.x, c.y + dy))
    } else {
        true
    }
}

fn floor_connected(map: &GridMap) -> bool {
    let total = map.floor_count();
    let Some(start) = (0..map.cells.len()).find(|&i| map.cells[i] == Terrain::Floor) else {
        return true;
    };
    let w = map.width;
    let mut seen = vec![false; map.cells.len()];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    let mut count = 0;
    while let Some(i) = queue.pop_front() {
        count += 1;
        let c = Coord::new(i as i32 % w, i as i32 / w);
        for d in Direction::ALL {
            if can_move(map, c, d) {
                let n = c.step(d);
                let j = map.idx(n);
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    count == total
}

/// Directed octagonal traversal graph over floor cells.
#[derive(Debug, Clone)]
pub struct NavGraph {
    pub width: i32,
    pub height: i32,
    node_at: Vec<Option<NodeId>>,
    coords: Vec<Coord>,
    neighbors: Vec<[Option<NodeId>; 8]>,
    labels: Vec<u8>,
}

pub fn build_graph(map: &GridMap) -> NavGraph {
    let mut node_at = vec![None; map.cells.len()];
    let mut coords = Vec::new();
    for y in 0..map.height {
        for x in 0..map.width {
            let c = Coord::new(x, y);
            if map.is_floor(c) {
                node_at[map.idx(c)] = Some(coords.len());
                coords.push(c);
            }
        }
    }
    let neighbors = coords
        .iter()
        .map(|&c| {
            let mut out = [None; 8];
            for d in Direction::ALL {
                if can_move(map, c, d) {
                    out[d.index()] = node_at[map.idx(c.step(d))];
                }
            }
            out
        })
        .collect();
    let mut labels = vec![0u8; coords.len()];
    for o in &map.objects {
        if let Some(n) = node_at[map.idx(o.position)] {
            labels[n] |= 1 << o.class.index();
        }
    }
    NavGraph {
        width: map.width,
        height: map.height,
        node_at,
        coords,
        neighbors,
        labels,
    }
}

impl NavGraph {
    pub fn node_count(&self) -> usize {
        self.coords.len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(|n| n.iter().flatten().count()).sum()
    }

    pub fn node_at(&self, c: Coord) -> Option<NodeId> {
        if c.x < 0 || c.y < 0 || c.x >= self.width || c.y >= self.height {
            return None;
        }
        self.node_at[(c.y * self.width + c.x) as usize]
    }

    pub fn coord(&self, node: NodeId) -> Coord {
        self.coords[node]
    }

    pub fn neighbor(&self, node: NodeId, d: Direction) -> Option<NodeId> {
        self.neighbors[node][d.index()]
    }

    pub fn out_edges(&self, node: NodeId) -> impl Iterator<Item = (Direction, NodeId)> + '_ {
        Direction::ALL
            .into_iter()
            .filter_map(move |d| self.neighbor(node, d).map(|n| (d, n)))
    }

    pub fn has_label(&self, node: NodeId, class: ObjectClass) -> bool {
        self.labels[node] & (1 << class.index()) != 0
    }

    pub fn instances(&self, class: ObjectClass) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.node_count()).filter(move |&n| self.has_label(n, class))
    }
}

/// Per-node step counts; [`UNREACHABLE`] for nodes with no path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMap {
    dist: Vec<u32>,
}

impl DistanceMap {
    pub fn get(&self, node: NodeId) -> Option<u32> {
        match self.dist[node] {
            UNREACHABLE => None,
            d => Some(d),
        }
    }

    pub fn raw(&self) -> &[u32] {
        &self.dist
    }
}

/// Multi-source breadth-first distance to the nearest instance of `class`.
pub fn instance_distances(graph: &NavGraph, class: ObjectClass) -> Result<DistanceMap> {
    let mut dist = vec![UNREACHABLE; graph.node_count()];
    let mut queue = VecDeque::new();
    for n in graph.instances(class) {
        dist[n] = 0;
        queue.push_back(n);
    }
    if queue.is_empty() {
        return Err(Error::MissingClass(class));
    }
    while let Some(u) = queue.pop_front() {
        // The graph is symmetric, so forward edges serve the reverse search.
        for (_, v) in graph.out_edges(u) {
            if dist[v] == UNREACHABLE {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    Ok(DistanceMap { dist })
}

/// Steps from each node to the nearest node lying within `goal_radius`
/// steps of an instance of `class`. Zero means the goal predicate holds.
pub fn shortest_distances(graph: &NavGraph, class: ObjectClass, goal_radius: u32) -> Result<DistanceMap> {
    let mut map = instance_distances(graph, class)?;
    for d in &mut map.dist {
        if *d != UNREACHABLE {
            *d = d.saturating_sub(goal_radius);
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentState {
    pub position: NodeId,
    pub steps_taken: u32,
    pub target: ObjectClass,
    pub stopped: bool,
}

impl AgentState {
    pub fn new(position: NodeId, target: ObjectClass) -> Self {
        AgentState {
            position,
            steps_taken: 0,
            target,
            stopped: false,
        }
    }
}

/// Oracle action: `Stop` inside the goal region, otherwise the first move in
/// direction order that decreases the goal distance by one.
pub fn optimal_action(graph: &NavGraph, goal: &DistanceMap, state: &AgentState) -> Result<Action> {
    let here = goal.get(state.position).ok_or(Error::Unreachable(state.position))?;
    if here == 0 {
        return Ok(Action::Stop);
    }
    graph
        .out_edges(state.position)
        .find(|&(_, n)| goal.get(n) == Some(here - 1))
        .map(|(d, _)| Action::Move(d))
        .ok_or(Error::Unreachable(state.position))
}

/// Applies one action. Moves without an edge are collisions: the position is
/// kept but the step is still consumed. `Stop` marks the state terminal.
pub fn step(graph: &NavGraph, state: &AgentState, action: Action) -> AgentState {
    let mut next = *state;
    if state.stopped {
        return next;
    }
    match action {
        Action::Stop => next.stopped = true,
        Action::Move(d) => {
            if let Some(n) = graph.neighbor(state.position, d) {
                next.position = n;
            }
            next.steps_taken += 1;
        }
    }
    next
}

/// Inclusive band on the start's step distance to the nearest instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartBand {
    pub min: u32,
    pub max: u32,
}

impl Default for StartBand {
    fn default() -> Self {
        StartBand { min: 6, max: 32 }
    }
}

/// Samples a start node inside a room that holds an instance of `class`,
/// at a distance to the nearest instance within `band`.
pub fn sample_start<R: Rng + ?Sized>(
    graph: &NavGraph,
    map: &GridMap,
    class: ObjectClass,
    band: StartBand,
    rng: &mut R,
) -> Result<NodeId> {
    let dist = instance_distances(graph, class)?;
    sample_start_from(graph, map, &dist, class, band, rng)
}

fn sample_start_from<R: Rng + ?Sized>(
    graph: &NavGraph,
    map: &GridMap,
    dist: &DistanceMap,
    class: ObjectClass,
    band: StartBand,
    rng: &mut R,
) -> Result<NodeId> {
    let candidates = start_candidates(graph, map, dist, class, band);
    if candidates.is_empty() {
        return Err(Error::NoValidStart(class));
    }
    Ok(candidates[rng.random_range(0..candidates.len())])
}

fn start_candidates(
    graph: &NavGraph,
    map: &GridMap,
    dist: &DistanceMap,
    class: ObjectClass,
    band: StartBand,
) -> Vec<NodeId> {
    let target_rooms: Vec<&Room> = map
        .rooms
        .iter()
        .filter(|r| map.objects.iter().any(|o| o.class == class && r.contains(o.position)))
        .collect();
    (0..graph.node_count())
        .filter(|&n| {
            let c = graph.coord(n);
            target_rooms.iter().any(|r| r.contains(c)) && dist.get(n).is_some_and(|d| d >= band.min && d <= band.max)
        })
        .collect()
}

/// A map with its graph and cached oracle distances.
#[derive(Debug, Clone)]
pub struct World {
    pub id: String,
    pub map: GridMap,
    pub graph: NavGraph,
    pub goal_radius: u32,
    instance: [Option<DistanceMap>; 4],
    goal: [Option<DistanceMap>; 4],
}

impl World {
    pub fn new(id: impl Into<String>, map: GridMap, goal_radius: u32) -> World {
        let graph = build_graph(&map);
        let instance = ObjectClass::ALL.map(|k| instance_distances(&graph, k).ok());
        let goal = ObjectClass::ALL.map(|k| shortest_distances(&graph, k, goal_radius).ok());
        World {
            id: id.into(),
            map,
            graph,
            goal_radius,
            instance,
            goal,
        }
    }

    pub fn has_all_classes(&self) -> bool {
        self.instance.iter().all(Option::is_some)
    }

    pub fn missing_classes(&self) -> Vec<ObjectClass> {
        ObjectClass::ALL
            .into_iter()
            .filter(|k| self.instance[k.index()].is_none())
            .collect()
    }

    pub fn instance_distances(&self, class: ObjectClass) -> Result<&DistanceMap> {
        self.instance[class.index()].as_ref().ok_or(Error::MissingClass(class))
    }

    pub fn goal_distances(&self, class: ObjectClass) -> Result<&DistanceMap> {
        self.goal[class.index()].as_ref().ok_or(Error::MissingClass(class))
    }

    pub fn optimal_action(&self, state: &AgentState) -> Result<Action> {
        optimal_action(&self.graph, self.goal_distances(state.target)?, state)
    }

    pub fn at_goal(&self, node: NodeId, class: ObjectClass) -> bool {
        self.goal[class.index()]
            .as_ref()
            .is_some_and(|g| g.get(node) == Some(0))
    }

    pub fn sample_start<R: Rng + ?Sized>(&self, class: ObjectClass, band: StartBand, rng: &mut R) -> Result<NodeId> {
        sample_start_from(
            &self.graph,
            &self.map,
            self.instance_distances(class)?,
            class,
            band,
            rng,
        )
    }

    pub fn start_candidates(&self, class: ObjectClass, band: StartBand) -> Result<Vec<NodeId>> {
        Ok(start_candidates(
            &self.graph,
            &self.map,
            self.instance_distances(class)?,
            class,
            band,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> GenParams {
        GenParams {
            width: 24,
            height: 24,
            rooms: 4,
            ..GenParams::default()
        }
    }

    fn flood_fill_count(map: &GridMap) -> usize {
        // Independent 8-neighbour flood fill with the corner rule written out.
        let mut seen = vec![vec![false; map.width as usize]; map.height as usize];
        let start = (0..map.height)
            .flat_map(|y| (0..map.width).map(move |x| (x, y)))
            .find(|&(x, y)| map.is_floor(Coord::new(x, y)))
            .unwrap();
        let mut stack = vec![start];
        seen[start.1 as usize][start.0 as usize] = true;
        let mut n = 0;
        while let Some((x, y)) = stack.pop() {
            n += 1;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if !map.is_floor(Coord::new(nx, ny)) {
                        continue;
                    }
                    if dx != 0 && dy != 0 && !(map.is_floor(Coord::new(nx, y)) && map.is_floor(Coord::new(x, ny))) {
                        continue;
                    }
                    if !seen[ny as usize][nx as usize] {
                        seen[ny as usize][nx as usize] = true;
                        stack.push((nx, ny));
                    }
                }
            }
        }
        n
    }

    #[test]
    fn generated_map_satisfies_invariants() {
        let map = generate_environment(7, &params()).unwrap();
        assert!(map.rooms.len() >= 4);
        assert_eq!(flood_fill_count(&map), map.floor_count());
        for class in ObjectClass::ALL {
            assert!(map.has_class(class), "missing {class}");
        }
        for o in &map.objects {
            assert!(map.is_floor(o.position));
        }
        for room in &map.rooms {
            assert!(map.objects.iter().any(|o| room.contains(o.position)));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_environment(11, &params()).unwrap();
        let b = generate_environment(11, &params()).unwrap();
        assert_eq!(a.cells, b.cells);
        assert_eq!(a, b);
        let c = generate_environment(12, &params()).unwrap();
        assert_ne!(a.cells, c.cells);
    }

    #[test]
    fn zero_rooms_is_rejected() {
        let p = GenParams { rooms: 0, ..params() };
        assert!(matches!(generate_environment(1, &p), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn impossible_layout_fails_explicitly() {
        let p = GenParams {
            width: 16,
            height: 16,
            rooms: 12,
            room_min: 6,
            room_max: 6,
            max_retries: 3,
            ..params()
        };
        assert!(matches!(
            generate_environment(1, &p),
            Err(Error::GenerationFailed { .. })
        ));
    }

    #[test]
    fn cluttered_maps_stay_connected() {
        let p = GenParams {
            clutter: 0.15,
            ..params()
        };
        for seed in 0..10 {
            let map = generate_environment(seed, &p).unwrap();
            assert_eq!(flood_fill_count(&map), map.floor_count());
        }
    }

    #[test]
    fn open_three_by_three() {
        let map = GridMap::from_ascii(&["...", "...", "..."]).unwrap();
        let g = build_graph(&map);
        assert_eq!(g.node_count(), 9);
        let center = g.node_at(Coord::new(1, 1)).unwrap();
        assert_eq!(g.out_edges(center).count(), 8);
    }

    #[test]
    fn corner_cutting_is_blocked() {
        // NE cell is a wall. The only diagonal between floor cells,
        // (0,0)<->(1,1), would cut the wall's corner.
        let map = GridMap::from_ascii(&[".#", ".."]).unwrap();
        let g = build_graph(&map);
        assert_eq!(g.node_count(), 3);
        let nw = g.node_at(Coord::new(0, 0)).unwrap();
        let sw = g.node_at(Coord::new(0, 1)).unwrap();
        let se = g.node_at(Coord::new(1, 1)).unwrap();
        assert_eq!(g.neighbor(nw, Direction::SE), None);
        assert_eq!(g.neighbor(se, Direction::NW), None);
        assert_eq!(g.neighbor(sw, Direction::NE), None);
        assert_eq!(g.neighbor(nw, Direction::S), Some(sw));
        assert_eq!(g.neighbor(sw, Direction::E), Some(se));
        assert_eq!(g.edge_count(), 4);
    }

    #[test]
    fn single_cell_graph() {
        let map = GridMap::from_ascii(&["###", "#.#", "###"]).unwrap();
        let g = build_graph(&map);
        assert_eq!(g.node_count(), 1);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn corridor_distance_folds_goal_radius() {
        let map = GridMap::from_ascii(&["c...."]).unwrap();
        let g = build_graph(&map);
        let d = shortest_distances(&g, ObjectClass::Chair, 3).unwrap();
        let far = g.node_at(Coord::new(4, 0)).unwrap();
        let obj = g.node_at(Coord::new(0, 0)).unwrap();
        let adj = g.node_at(Coord::new(1, 0)).unwrap();
        assert_eq!(d.get(far), Some(1));
        assert_eq!(d.get(obj), Some(0));
        assert_eq!(d.get(adj), Some(0));
    }

    #[test]
    fn missing_class_is_an_error() {
        let map = GridMap::from_ascii(&["c...."]).unwrap();
        let g = build_graph(&map);
        assert!(matches!(
            shortest_distances(&g, ObjectClass::Bed, 3),
            Err(Error::MissingClass(ObjectClass::Bed))
        ));
    }

    #[test]
    fn unreachable_nodes_are_marked() {
        let map = GridMap::from_ascii(&["c.#.."]).unwrap();
        let g = build_graph(&map);
        let d = instance_distances(&g, ObjectClass::Chair).unwrap();
        assert_eq!(d.get(g.node_at(Coord::new(4, 0)).unwrap()), None);
        let state = AgentState::new(g.node_at(Coord::new(4, 0)).unwrap(), ObjectClass::Chair);
        assert!(matches!(optimal_action(&g, &d, &state), Err(Error::Unreachable(_))));
    }

    #[test]
    fn oracle_actions() {
        let map = GridMap::from_ascii(&["......t"]).unwrap();
        let g = build_graph(&map);
        let d = shortest_distances(&g, ObjectClass::Table, 1).unwrap();
        let s = AgentState::new(0, ObjectClass::Table);
        assert_eq!(optimal_action(&g, &d, &s).unwrap(), Action::Move(Direction::E));
        let s = AgentState::new(5, ObjectClass::Table);
        assert_eq!(optimal_action(&g, &d, &s).unwrap(), Action::Stop);
    }

    #[test]
    fn oracle_tie_breaks_by_direction_order() {
        // The centre wall blocks every diagonal shortcut, so from the SW
        // corner both N and E lie on shortest paths of equal length.
        let map = GridMap::from_ascii(&["..c", ".#.", "..."]).unwrap();
        let g = build_graph(&map);
        let d = instance_distances(&g, ObjectClass::Chair).unwrap();
        let s = AgentState::new(g.node_at(Coord::new(0, 2)).unwrap(), ObjectClass::Chair);
        let up = g.node_at(Coord::new(0, 1)).unwrap();
        let right = g.node_at(Coord::new(1, 2)).unwrap();
        assert_eq!(d.get(up), d.get(right));
        assert_eq!(optimal_action(&g, &d, &s).unwrap(), Action::Move(Direction::N));
    }

    #[test]
    fn step_semantics() {
        let map = GridMap::from_ascii(&["#####", "#...#", "#####"]).unwrap();
        let g = build_graph(&map);
        let s = AgentState::new(g.node_at(Coord::new(1, 1)).unwrap(), ObjectClass::Chair);
        let e = step(&g, &s, Action::Move(Direction::E));
        assert_eq!(g.coord(e.position), Coord::new(2, 1));
        assert_eq!(e.steps_taken, 1);
        let n = step(&g, &e, Action::Move(Direction::N));
        assert_eq!(n.position, e.position);
        assert_eq!(n.steps_taken, 2);
        let stop = step(&g, &n, Action::Stop);
        assert!(stop.stopped);
        assert_eq!(step(&g, &stop, Action::Move(Direction::W)), stop);
    }

    #[test]
    fn start_respects_band_and_room() {
        let p = GenParams {
            width: 32,
            height: 32,
            rooms: 4,
            room_min: 7,
            room_max: 11,
            ..GenParams::default()
        };
        let map = generate_environment(3, &p).unwrap();
        let world = World::new("w", map, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let band = StartBand { min: 3, max: 12 };
        let mut found = 0;
        for class in ObjectClass::ALL {
            for _ in 0..20 {
                let Ok(n) = world.sample_start(class, band, &mut rng) else {
                    continue;
                };
                found += 1;
                let d = world.instance_distances(class).unwrap().get(n).unwrap();
                assert!((band.min..=band.max).contains(&d));
                let room = world.map.room_index(world.graph.coord(n)).unwrap();
                let r = world.map.rooms[room];
                assert!(world
                    .map
                    .objects
                    .iter()
                    .any(|o| o.class == class && r.contains(o.position)));
            }
        }
        assert!(found > 0);
    }

    #[test]
    fn start_without_class_fails() {
        let map = GridMap::from_ascii(&["c...."]).unwrap();
        let g = build_graph(&map);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_start(&g, &map, ObjectClass::Door, StartBand::default(), &mut rng).is_err());
        assert!(matches!(
            sample_start(&g, &map, ObjectClass::Chair, StartBand::default(), &mut rng),
            Err(Error::NoValidStart(_))
        ));
    }

    #[test]
    fn map_json_roundtrip() {
        let map = generate_environment(5, &params()).unwrap();
        let text = serde_json::to_string(&map).unwrap();
        let back: GridMap = serde_json::from_str(&text).unwrap();
        assert_eq!(map, back);
        let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(doc["cells"][0].is_string());
        assert!(doc["objects"][0]["class"].is_string());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn generated_graphs_are_symmetric_and_follow_the_edge_rule(seed in 0u64..10_000, clutter in 0.0f64..0.2) {
            let map = generate_environment(seed, &GenParams { clutter, ..params() }).unwrap();
            let g = build_graph(&map);
            for u in 0..g.node_count() {
                let c = g.coord(u);
                for d in Direction::ALL {
                    let expected = can_move(&map, c, d);
                    let edge = g.neighbor(u, d);
                    proptest::prop_assert_eq!(edge.is_some(), expected);
                    if let Some(v) = edge {
                        proptest::prop_assert_eq!(g.coord(v), c.step(d));
                        proptest::prop_assert_eq!(g.neighbor(v, d.opposite()), Some(u));
                    }
                }
            }
            let world = World::new("p", map, 1);
            for class in ObjectClass::ALL {
                let goal = world.goal_distances(class).unwrap();
                for u in 0..g.node_count() {
                    let d = goal.get(u).unwrap();
                    if d > 0 {
                        let next = step(&g, &AgentState::new(u, class), world.optimal_action(&AgentState::new(u, class)).unwrap());
                        proptest::prop_assert_eq!(goal.get(next.position), Some(d - 1));
                    }
                }
            }
        }
    }
}
