//! Synthetic representation bank.
//!
//! Each extractor turns simulator ground truth around the agent into a small
//! feature vector tagged with a perception domain. Observation noise is
//! Gaussian and drawn from a caller-owned stream, so extraction is a pure
//! function of the context and the stream position.

use std::collections::HashSet;
use std::f64::consts::FRAC_PI_4;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{Coord, Direction, NavGraph, NodeId, ObjectClass};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "semantic")]
    Semantic,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::TwoD, Domain::ThreeD, Domain::Semantic];

    pub fn name(self) -> &'static str {
        match self {
            Domain::TwoD => "2d",
            Domain::ThreeD => "3d",
            Domain::Semantic => "semantic",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Steps available along each of the 8 directions before a collision.
    DepthRays,
    /// Chebyshev distance to the nearest wall for each cell of the local patch.
    ObstaclePatch,
    /// Scalar lateral openness.
    Openness,
    /// Per-class object counts in a square window.
    ClassCounts,
    /// Proximity-weighted bearing histogram of visible target instances.
    TargetBearing,
    /// Flattened local wall occupancy.
    OccupancyPatch,
    /// Occupancy boundaries within the local patch.
    EdgeMap,
    /// Fixed Gaussian projection of the occupancy patch.
    RandomProjection,
}

impl ExtractorKind {
    pub fn dim(self, p: &PerceptParams) -> usize {
        match self {
            ExtractorKind::DepthRays | ExtractorKind::TargetBearing => 8,
            ExtractorKind::ObstaclePatch | ExtractorKind::OccupancyPatch | ExtractorKind::EdgeMap => p.patch * p.patch,
            ExtractorKind::Openness => 1,
            ExtractorKind::ClassCounts => 4,
            ExtractorKind::RandomProjection => p.projection_dim,
        }
    }
}

/// Geometry shared by all extractors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptParams {
    /// Side of the local square patch (odd).
    pub patch: usize,
    pub ray_cap: u32,
    pub obstacle_cap: u32,
    pub openness_cap: u32,
    /// Side of the class-count window (odd).
    pub count_window: usize,
    /// Chebyshev radius within which target instances can be seen.
    pub vis_radius: i32,
    pub projection_dim: usize,
    pub projection_seed: u64,
    /// Side of the raw observation window (odd).
    pub raw_window: usize,
}

impl Default for PerceptParams {
    fn default() -> Self {
        PerceptParams {
            patch: 5,
            ray_cap: 4,
            obstacle_cap: 3,
            openness_cap: 4,
            count_window: 7,
            vis_radius: 10,
            projection_dim: 8,
            projection_seed: 17,
            raw_window: 7,
        }
    }
}

impl PerceptParams {
    pub fn raw_dim(&self) -> usize {
        self.raw_window * self.raw_window * 5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub name: String,
    pub domain: Domain,
    pub kind: ExtractorKind,
    pub dim: usize,
    pub noise_sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clone_of: Option<String>,
}

impl ExtractorSpec {
    pub fn new(name: &str, domain: Domain, kind: ExtractorKind, params: &PerceptParams, noise_sigma: f64) -> Self {
        ExtractorSpec {
            name: name.to_string(),
            domain,
            kind,
            dim: kind.dim(params),
            noise_sigma,
            clone_of: None,
        }
    }

    /// A redundant duplicate of `parent` with its own noise stream.
    pub fn clone_from(name: &str, parent: &ExtractorSpec) -> Self {
        ExtractorSpec {
            name: name.to_string(),
            clone_of: Some(parent.name.clone()),
            ..parent.clone()
        }
    }
}

/// Bank declaration as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    #[serde(default)]
    pub params: PerceptParams,
    pub extractors: Vec<ExtractorSpec>,
}

impl Default for BankConfig {
    fn default() -> Self {
        let params = PerceptParams::default();
        let extractors = shipped_specs(&params);
        BankConfig { params, extractors }
    }
}

/// Per-domain noise of the shipped bank. The 2D extractors are the least
/// reliable and the geometric ones the most.
pub fn default_noise(domain: Domain) -> f64 {
    match domain {
        Domain::TwoD => 0.3,
        Domain::ThreeD => 0.05,
        Domain::Semantic => 0.1,
    }
}

/// The shipped ten-extractor bank: four 3D-like, three semantic and three
/// 2D-like extractors, including one clone each of the depth rays and the
/// target bearing histogram.
pub fn default_specs(params: &PerceptParams, noise_sigma: f64) -> Vec<ExtractorSpec> {
    use Domain::*;
    use ExtractorKind::*;
    let s = |name, domain, kind| ExtractorSpec::new(name, domain, kind, params, noise_sigma);
    let depth = s("depth_rays", ThreeD, DepthRays);
    let bearing = s("target_bearing", Semantic, TargetBearing);
    vec![
        depth.clone(),
        s("obstacle_distance", ThreeD, ObstaclePatch),
        s("openness", ThreeD, Openness),
        ExtractorSpec::clone_from("depth_rays_b", &depth),
        s("class_counts", Semantic, ClassCounts),
        bearing.clone(),
        ExtractorSpec::clone_from("target_bearing_b", &bearing),
        s("occupancy", TwoD, OccupancyPatch),
        s("edges", TwoD, EdgeMap),
        s("projection", TwoD, RandomProjection),
    ]
}

/// [`default_specs`] with [`default_noise`] per domain.
pub fn shipped_specs(params: &PerceptParams) -> Vec<ExtractorSpec> {
    default_specs(params, 0.0)
        .into_iter()
        .map(|mut s| {
            s.noise_sigma = default_noise(s.domain);
            s
        })
        .collect()
}

pub fn register_default_bank(params: &PerceptParams) -> Result<Bank> {
    Bank::new(params.clone(), shipped_specs(params))
}

/// A validated, ordered extractor registry.
#[derive(Debug, Clone)]
pub struct Bank {
    pub params: PerceptParams,
    pub specs: Vec<ExtractorSpec>,
    /// Index of the extractor whose clean signal each entry reuses.
    source: Vec<usize>,
    projection: Vec<f64>,
}

impl Bank {
    pub const MIN_EXTRACTORS: usize = 6;

    pub fn new(params: PerceptParams, specs: Vec<ExtractorSpec>) -> Result<Bank> {
        if params.patch.is_multiple_of(2)
            || params.count_window.is_multiple_of(2)
            || params.raw_window.is_multiple_of(2)
        {
            return Err(Error::Bank("window sizes must be odd".into()));
        }
        if params.ray_cap == 0 || params.obstacle_cap == 0 || params.openness_cap == 0 || params.projection_dim == 0 {
            return Err(Error::Bank("caps and projection_dim must be positive".into()));
        }
        if specs.len() < Self::MIN_EXTRACTORS {
            return Err(Error::Bank(format!(
                "need at least {} extractors, got {}",
                Self::MIN_EXTRACTORS,
                specs.len()
            )));
        }
        let mut names = HashSet::new();
        for s in &specs {
            if !names.insert(s.name.as_str()) {
                return Err(Error::Bank(format!("duplicate extractor name `{}`", s.name)));
            }
            if s.dim == 0 || s.dim != s.kind.dim(&params) {
                return Err(Error::Bank(format!(
                    "`{}` declares dim {} but {:?} produces {}",
                    s.name,
                    s.dim,
                    s.kind,
                    s.kind.dim(&params)
                )));
            }
            if !(s.noise_sigma >= 0.0 && s.noise_sigma.is_finite()) {
                return Err(Error::Bank(format!("`{}` has invalid noise_sigma", s.name)));
            }
        }
        let mut source = Vec::with_capacity(specs.len());
        for (i, s) in specs.iter().enumerate() {
            match &s.clone_of {
                None => source.push(i),
                Some(parent) => {
                    let p = specs
                        .iter()
                        .position(|q| &q.name == parent)
                        .ok_or_else(|| Error::Bank(format!("`{}` clones unknown `{parent}`", s.name)))?;
                    if p == i || specs[p].clone_of.is_some() || specs[p].kind != s.kind {
                        return Err(Error::Bank(format!("`{}` is not a valid clone of `{parent}`", s.name)));
                    }
                    source.push(p);
                }
            }
        }
        let cols = params.patch * params.patch;
        let mut rng = seed::rng(params.projection_seed, seed::streams::PROJECTION, 0);
        let scale = 1.0 / (cols as f64).sqrt();
        let projection = (0..params.projection_dim * cols)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Bank {
            params,
            specs,
            source,
            projection,
        })
    }

    pub fn from_config(cfg: &BankConfig) -> Result<Bank> {
        Bank::new(cfg.params.clone(), cfg.extractors.clone())
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.specs.iter().map(|s| s.dim).collect()
    }

    pub fn domains(&self) -> Vec<Domain> {
        self.specs.iter().map(|s| s.domain).collect()
    }

    pub fn raw_dim(&self) -> usize {
        self.params.raw_dim()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Pairs `(parent, clone)` of declared clones.
    pub fn clone_pairs(&self) -> Vec<(usize, usize)> {
        self.source
            .iter()
            .enumerate()
            .filter(|&(i, &p)| p != i)
            .map(|(i, &p)| (p, i))
            .collect()
    }

    /// Extracts every representation without noise.
    pub fn extract_clean(&self, ctx: &ObservationContext<'_>) -> RepresentationSet {
        let mut features: Vec<Vec<f64>> = Vec::with_capacity(self.len());
        for (i, spec) in self.specs.iter().enumerate() {
            let v = if self.source[i] == i {
                self.compute(spec.kind, ctx)
            } else {
                features[self.source[i]].clone()
            };
            features.push(v);
        }
        RepresentationSet {
            features,
            raw_obs: raw_observation(ctx, self.params.raw_window),
            target: ctx.target,
        }
    }

    /// Extracts every representation, adding per-extractor Gaussian noise
    /// drawn in registry order from `rng`.
    pub fn extract<R: Rng + ?Sized>(&self, ctx: &ObservationContext<'_>, rng: &mut R) -> RepresentationSet {
        let mut set = self.extract_clean(ctx);
        for (spec, v) in self.specs.iter().zip(&mut set.features) {
            if spec.noise_sigma > 0.0 {
                for x in v.iter_mut() {
                    *x += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        set
    }

    fn compute(&self, kind: ExtractorKind, ctx: &ObservationContext<'_>) -> Vec<f64> {
        let p = &self.params;
        let g = ctx.graph;
        let here = g.coord(ctx.position);
        match kind {
            ExtractorKind::DepthRays => ray_cast(g, ctx.position, p.ray_cap)
                .iter()
                .map(|&r| r as f64 / p.ray_cap as f64)
                .collect(),
            ExtractorKind::ObstaclePatch => window(here, p.patch)
                .map(|c| wall_distance(g, c, p.obstacle_cap) as f64 / p.obstacle_cap as f64)
                .collect(),
            ExtractorKind::Openness => {
                vec![openness(g, ctx.position).min(p.openness_cap) as f64 / p.openness_cap as f64]
            }
            ExtractorKind::ClassCounts => {
                let r = (p.count_window / 2) as i32;
                let mut counts = vec![0.0; 4];
                for o in ctx.objects {
                    if o.position.chebyshev(here) <= r {
                        counts[o.class.index()] += 1.0;
                    }
                }
                counts
            }
            ExtractorKind::TargetBearing => bearing_histogram(ctx, p.vis_radius),
            ExtractorKind::OccupancyPatch => occupancy(g, here, p.patch),
            ExtractorKind::EdgeMap => window(here, p.patch)
                .map(|c| {
                    let wall = !is_floor(g, c);
                    let boundary = Direction::AXES.iter().any(|&d| !is_floor(g, c.step(d)) != wall);
                    if boundary {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
            ExtractorKind::RandomProjection => {
                let occ = occupancy(g, here, p.patch);
                self.projection
                    .chunks(occ.len())
                    .map(|row| row.iter().zip(&occ).map(|(w, x)| w * x).sum())
                    .collect()
            }
        }
    }
}

/// Everything extractors may read about the agent's situation.
#[derive(Debug, Clone, Copy)]
pub struct ObservationContext<'a> {
    pub graph: &'a NavGraph,
    pub objects: &'a [crate::gridworld::ObjectInstance],
    pub position: NodeId,
    pub target: ObjectClass,
}

impl<'a> ObservationContext<'a> {
    pub fn new(world: &'a crate::gridworld::World, position: NodeId, target: ObjectClass) -> Self {
        ObservationContext {
            graph: &world.graph,
            objects: &world.map.objects,
            position,
            target,
        }
    }
}

/// Per-step representations, in bank order, plus the raw local observation.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationSet {
    pub features: Vec<Vec<f64>>,
    pub raw_obs: Vec<f64>,
    pub target: ObjectClass,
}

impl RepresentationSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// One-hot encoding of the commanded object class.
    pub fn task(&self) -> [f64; 4] {
        let mut t = [0.0; 4];
        t[self.target.index()] = 1.0;
        t
    }

    pub fn is_finite(&self) -> bool {
        self.features
            .iter()
            .flatten()
            .chain(&self.raw_obs)
            .all(|x| x.is_finite())
    }

    /// Replaces the listed representations with zero vectors.
    pub fn zero_fill(&mut self, indices: &[usize]) {
        for &i in indices {
            self.features[i].iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

fn is_floor(g: &NavGraph, c: Coord) -> bool {
    g.node_at(c).is_some()
}

fn window(center: Coord, side: usize) -> impl Iterator<Item = Coord> {
    let r = (side / 2) as i32;
    (-r..=r).flat_map(move |dy| (-r..=r).map(move |dx| Coord::new(center.x + dx, center.y + dy)))
}

fn occupancy(g: &NavGraph, here: Coord, side: usize) -> Vec<f64> {
    window(here, side)
        .map(|c| if is_floor(g, c) { 0.0 } else { 1.0 })
        .collect()
}

/// Number of consecutive legal moves along each direction, capped at `cap`.
pub fn ray_cast(g: &NavGraph, node: NodeId, cap: u32) -> [u32; 8] {
    let mut out = [0; 8];
    for d in Direction::ALL {
        let mut at = node;
        let mut n = 0;
        while n < cap {
            match g.neighbor(at, d) {
                Some(next) => {
                    at = next;
                    n += 1;
                }
                None => break,
            }
        }
        out[d.index()] = n;
    }
    out
}

fn wall_distance(g: &NavGraph, c: Coord, cap: u32) -> u32 {
    if !is_floor(g, c) {
        return 0;
    }
    for r in 1..cap as i32 {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx.abs().max(dy.abs()) == r && !is_floor(g, Coord::new(c.x + dx, c.y + dy)) {
                    return r as u32;
                }
            }
        }
    }
    cap
}

/// Openness of a position: the smallest number of cells from the agent to
/// the first wall along the four axis directions. A wall-adjacent cell
/// scores 1.
pub fn openness(g: &NavGraph, node: NodeId) -> u32 {
    let here = g.coord(node);
    Direction::AXES
        .iter()
        .map(|&d| {
            let mut c = here;
            let mut k = 0;
            loop {
                c = c.step(d);
                k += 1;
                if !is_floor(g, c) {
                    break k;
                }
            }
        })
        .min()
        .unwrap_or(1)
}

/// Line of sight over floor cells between two cell centres (Bresenham).
pub fn line_of_sight(g: &NavGraph, a: Coord, b: Coord) -> bool {
    let (dx, dy) = ((b.x - a.x).abs(), -(b.y - a.y).abs());
    let (sx, sy) = ((b.x - a.x).signum(), (b.y - a.y).signum());
    let mut err = dx + dy;
    let mut c = a;
    loop {
        if !is_floor(g, c) {
            return false;
        }
        if c == b {
            return true;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            c.x += sx;
        }
        if e2 <= dx {
            err += dx;
            c.y += sy;
        }
    }
}

/// Direction bin of the vector `(dx, dy)` (y grows south).
pub fn bearing_bin(dx: i32, dy: i32) -> Direction {
    let angle = (dy as f64).atan2(dx as f64);
    let k = (angle / FRAC_PI_4).round() as i32;
    // k = 0 is east, increasing clockwise on screen.
    const FROM_EAST: [Direction; 8] = [
        Direction::E,
        Direction::SE,
        Direction::S,
        Direction::SW,
        Direction::W,
        Direction::NW,
        Direction::N,
        Direction::NE,
    ];
    FROM_EAST[k.rem_euclid(8) as usize]
}

fn bearing_histogram(ctx: &ObservationContext<'_>, vis_radius: i32) -> Vec<f64> {
    let here = ctx.graph.coord(ctx.position);
    let mut hist = vec![0.0; 8];
    for o in ctx.objects.iter().filter(|o| o.class == ctx.target) {
        let dist = o.position.chebyshev(here);
        if dist > vis_radius || !line_of_sight(ctx.graph, here, o.position) {
            continue;
        }
        let w = 1.0 - dist as f64 / (vis_radius + 1) as f64;
        if dist == 0 {
            hist.iter_mut().for_each(|h| *h += w);
        } else {
            hist[bearing_bin(o.position.x - here.x, o.position.y - here.y).index()] += w;
        }
    }
    hist
}

/// Channel-major window: walls, then one presence channel per object class.
fn raw_observation(ctx: &ObservationContext<'_>, side: usize) -> Vec<f64> {
    let here = ctx.graph.coord(ctx.position);
    let r = (side / 2) as i32;
    let area = side * side;
    let mut out = occupancy(ctx.graph, here, side);
    out.resize(area * 5, 0.0);
    for o in ctx.objects {
        let (dx, dy) = (o.position.x - here.x, o.position.y - here.y);
        if dx.abs() <= r && dy.abs() <= r {
            let cell = ((dy + r) as usize) * side + (dx + r) as usize;
            out[area * (1 + o.class.index()) + cell] = 1.0;
        }
    }
    out
}
