//! Rollouts, success-rate evaluation, representation-dropout robustness and
//! gate analytics.

use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{majority_vote, top_k_vote, uniform_mix, FusionPolicy, GateOutput, Scheme};
use crate::gridworld::{step, Action, AgentState, Coord, NodeId, ObjectClass, StartBand, World};
use crate::losses::{load_balance_loss, LblVariant};
use crate::percept::{openness, Bank, Domain, ObservationContext, RepresentationSet};
use crate::seed::{self, streams};

/// What a controller sees at one step.
pub struct Observation<'a> {
    pub world: &'a World,
    pub state: AgentState,
    pub reps: &'a RepresentationSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: Action,
    /// Gate weights actually used, for gated policies.
    pub gate: Option<Vec<f64>>,
}

impl Decision {
    fn plain(action: Action) -> Self {
        Decision { action, gate: None }
    }
}

/// Anything that can pick an action each step. `rng` is the episode's
/// private policy stream.
pub trait Controller: Sync {
    fn decide(&self, obs: &Observation<'_>, rng: &mut ChaCha8Rng) -> Result<Decision>;
}

/// Greedy execution of a trained policy.
pub struct PolicyController<'a>(pub &'a FusionPolicy);

impl Controller for PolicyController<'_> {
    fn decide(&self, obs: &Observation<'_>, _rng: &mut ChaCha8Rng) -> Result<Decision> {
        let p = self.0;
        if p.scheme().uses_gate() {
            let gate = p.gate(obs.reps)?;
            let dist = p.distribution_with_gate(Some(&gate), obs.reps)?;
            Ok(Decision {
                action: dist.argmax(),
                gate: Some(gate.g),
            })
        } else {
            Ok(Decision::plain(p.act(obs.reps)?))
        }
    }
}

/// The shortest-path oracle.
pub struct OracleController;

impl Controller for OracleController {
    fn decide(&self, obs: &Observation<'_>, _rng: &mut ChaCha8Rng) -> Result<Decision> {
        Ok(Decision::plain(obs.world.optimal_action(&obs.state)?))
    }
}

/// Uniform over the nine actions.
pub struct RandomController;

impl Controller for RandomController {
    fn decide(&self, _obs: &Observation<'_>, rng: &mut ChaCha8Rng) -> Result<Decision> {
        Ok(Decision::plain(Action::ALL[rng.random_range(0..Action::COUNT)]))
    }
}

/// One action-fusion branch executed alone.
pub struct BranchController<'a> {
    policy: &'a FusionPolicy,
    index: usize,
}

impl<'a> BranchController<'a> {
    pub fn new(policy: &'a FusionPolicy, index: usize) -> Result<Self> {
        if policy.scheme() != Scheme::ActionFusion {
            return Err(Error::Scheme {
                op: "branch",
                scheme: policy.scheme().to_string(),
            });
        }
        if index >= policy.n() {
            return Err(Error::BranchIndex { index, len: policy.n() });
        }
        Ok(BranchController { policy, index })
    }
}

impl Controller for BranchController<'_> {
    fn decide(&self, obs: &Observation<'_>, _rng: &mut ChaCha8Rng) -> Result<Decision> {
        Ok(Decision::plain(
            self.policy.branch_predict(self.index, obs.reps)?.argmax(),
        ))
    }
}

/// Voting over the action candidates of an action-fusion policy.
pub enum VoteRule {
    Majority,
    /// Argmax of the unweighted candidate mixture.
    UniformMix,
    /// Vote among the `k` best branches of `rank` (best first).
    TopK {
        rank: Vec<usize>,
        k: usize,
    },
}

pub struct VoteController<'a> {
    policy: &'a FusionPolicy,
    rule: VoteRule,
}

impl<'a> VoteController<'a> {
    pub fn new(policy: &'a FusionPolicy, rule: VoteRule) -> Result<Self> {
        if policy.scheme() != Scheme::ActionFusion {
            return Err(Error::Scheme {
                op: "vote",
                scheme: policy.scheme().to_string(),
            });
        }
        if let VoteRule::TopK { rank, k } = &rule {
            if rank.len() != policy.n() || *k == 0 || *k > policy.n() {
                return Err(Error::InvalidParams(format!(
                    "top-k needs a full ranking and 1 <= k <= {}",
                    policy.n()
                )));
            }
        }
        Ok(VoteController { policy, rule })
    }
}

impl Controller for VoteController<'_> {
    fn decide(&self, obs: &Observation<'_>, _rng: &mut ChaCha8Rng) -> Result<Decision> {
        let cands = self.policy.candidates(obs.reps)?;
        let action = match &self.rule {
            VoteRule::Majority => majority_vote(&cands),
            VoteRule::UniformMix => uniform_mix(&cands).argmax(),
            VoteRule::TopK { rank, k } => top_k_vote(&cands, rank, *k)?,
        };
        Ok(Decision::plain(action))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropMode {
    /// Zero the dropped gate weights and renormalise the rest.
    Renormalize,
    /// Replace the dropped representations with zero vectors.
    ZeroNoise,
}

impl DropMode {
    pub fn name(self) -> &'static str {
        match self {
            DropMode::Renormalize => "renormalize",
            DropMode::ZeroNoise => "zero_noise",
        }
    }
}

impl std::str::FromStr for DropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "renormalize" => Ok(DropMode::Renormalize),
            "zero_noise" => Ok(DropMode::ZeroNoise),
            _ => Err(Error::InvalidParams(format!("unknown drop mode `{s}`"))),
        }
    }
}

/// A policy that loses `k` random representations at every step.
pub struct DropController<'a> {
    policy: &'a FusionPolicy,
    k: usize,
    mode: DropMode,
}

impl<'a> DropController<'a> {
    pub fn new(policy: &'a FusionPolicy, k: usize, mode: DropMode) -> Result<Self> {
        let scheme = policy.scheme();
        if !scheme.uses_representations() {
            return Err(Error::Scheme {
                op: "representation dropout",
                scheme: scheme.to_string(),
            });
        }
        if mode == DropMode::Renormalize && !scheme.uses_gate() {
            return Err(Error::Scheme {
                op: "renormalize dropout",
                scheme: scheme.to_string(),
            });
        }
        if k >= policy.n() {
            return Err(Error::InvalidParams(format!("k = {k} must be below {}", policy.n())));
        }
        Ok(DropController { policy, k, mode })
    }
}

impl Controller for DropController<'_> {
    fn decide(&self, obs: &Observation<'_>, rng: &mut ChaCha8Rng) -> Result<Decision> {
        if self.k == 0 {
            return PolicyController(self.policy).decide(obs, rng);
        }
        let mut dropped = index::sample(rng, self.policy.n(), self.k).into_vec();
        dropped.sort_unstable();
        let p = self.policy;
        match self.mode {
            DropMode::Renormalize => {
                let gate = p.gate(obs.reps)?.drop_and_renormalize(&dropped);
                let dist = p.distribution_with_gate(Some(&gate), obs.reps)?;
                Ok(Decision {
                    action: dist.argmax(),
                    gate: Some(gate.g),
                })
            }
            DropMode::ZeroNoise => {
                let mut reps = obs.reps.clone();
                reps.zero_fill(&dropped);
                PolicyController(p).decide(
                    &Observation {
                        world: obs.world,
                        state: obs.state,
                        reps: &reps,
                    },
                    rng,
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub max_steps: u32,
    pub episodes_per_task: usize,
    pub band: StartBand,
    /// Seed for start sets and per-episode streams.
    pub seed: u64,
    /// Record per-step gate vectors in episode results.
    pub record_gates: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_steps: 39,
            episodes_per_task: 64,
            band: StartBand::default(),
            seed: 0,
            record_gates: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub env: usize,
    pub start: NodeId,
    pub target: ObjectClass,
}

/// A frozen list of episodes shared by every compared policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartSet {
    pub seed: u64,
    pub episodes: Vec<EpisodeSpec>,
}

impl StartSet {
    /// Draws `cfg.episodes_per_task` starts for each class, cycling over the
    /// environments. Environments without a valid start for a class are
    /// skipped for that episode.
    pub fn sample(worlds: &[World], cfg: &EvalConfig) -> Result<StartSet> {
        if worlds.is_empty() {
            return Err(Error::InvalidParams("evaluation needs at least one environment".into()));
        }
        let mut episodes = Vec::with_capacity(4 * cfg.episodes_per_task);
        for class in ObjectClass::ALL {
            let candidates: Vec<Vec<NodeId>> = worlds
                .iter()
                .map(|w| w.start_candidates(class, cfg.band).unwrap_or_default())
                .collect();
            if candidates.iter().all(Vec::is_empty) {
                return Err(Error::NoValidStart(class));
            }
            let mut rng = seed::rng(cfg.seed, streams::STARTS, class.index() as u64);
            let mut env = 0;
            for _ in 0..cfg.episodes_per_task {
                while candidates[env % worlds.len()].is_empty() {
                    env += 1;
                }
                let pool = &candidates[env % worlds.len()];
                episodes.push(EpisodeSpec {
                    env: env % worlds.len(),
                    start: pool[rng.random_range(0..pool.len())],
                    target: class,
                });
                env += 1;
            }
        }
        Ok(StartSet {
            seed: cfg.seed,
            episodes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub env_id: String,
    pub start: NodeId,
    pub target: ObjectClass,
    pub steps: u32,
    pub stopped: bool,
    pub success: bool,
    pub trajectory: Vec<NodeId>,
    pub gates: Vec<Vec<f64>>,
}

/// Runs one episode until `Stop` or the step budget. Success is decided by
/// the terminal position alone.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    controller: &dyn Controller,
    world: &World,
    bank: &Bank,
    start: NodeId,
    target: ObjectClass,
    max_steps: u32,
    noise: &mut ChaCha8Rng,
    policy_rng: &mut ChaCha8Rng,
    record_gates: bool,
) -> Result<EpisodeResult> {
    let mut state = AgentState::new(start, target);
    let mut trajectory = vec![start];
    let mut gates = Vec::new();
    while !state.stopped && state.steps_taken < max_steps {
        let reps = bank.extract(&ObservationContext::new(world, state.position, target), noise);
        let d = controller.decide(
            &Observation {
                world,
                state,
                reps: &reps,
            },
            policy_rng,
        )?;
        if record_gates {
            if let Some(g) = d.gate {
                gates.push(g);
            }
        }
        state = step(&world.graph, &state, d.action);
        if !state.stopped {
            trajectory.push(state.position);
        }
    }
    Ok(EpisodeResult {
        env_id: world.id.clone(),
        start,
        target,
        steps: state.steps_taken,
        stopped: state.stopped,
        success: world.at_goal(state.position, target),
        trajectory,
        gates,
    })
}

/// Runs every episode of `starts`, in parallel, in a fixed order.
pub fn run_episodes(
    controller: &dyn Controller,
    worlds: &[World],
    bank: &Bank,
    starts: &StartSet,
    cfg: &EvalConfig,
) -> Result<Vec<EpisodeResult>> {
    starts
        .episodes
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let world = worlds
                .get(e.env)
                .ok_or_else(|| Error::Config(format!("start set refers to missing environment {}", e.env)))?;
            let mut noise = seed::rng(cfg.seed, streams::EPISODE_NOISE, i as u64);
            let mut policy_rng = seed::rng(cfg.seed, streams::EPISODE_POLICY, i as u64);
            rollout(
                controller,
                world,
                bank,
                e.start,
                e.target,
                cfg.max_steps,
                &mut noise,
                &mut policy_rng,
                cfg.record_gates,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRate {
    pub task: ObjectClass,
    pub successes: usize,
    pub episodes: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub tasks: Vec<TaskRate>,
    /// Mean of the per-task rates.
    pub average: f64,
    pub episodes: usize,
    pub seed: u64,
    pub config_digest: String,
}

impl EvalReport {
    pub fn from_episodes(model: &str, episodes: &[EpisodeResult], seed: u64) -> EvalReport {
        let tasks: Vec<TaskRate> = ObjectClass::ALL
            .into_iter()
            .map(|task| {
                let mine: Vec<_> = episodes.iter().filter(|e| e.target == task).collect();
                let successes = mine.iter().filter(|e| e.success).count();
                TaskRate {
                    task,
                    successes,
                    episodes: mine.len(),
                    rate: if mine.is_empty() {
                        0.0
                    } else {
                        successes as f64 / mine.len() as f64
                    },
                }
            })
            .collect();
        let average = tasks.iter().map(|t| t.rate).sum::<f64>() / tasks.len() as f64;
        EvalReport {
            model: model.to_string(),
            tasks,
            average,
            episodes: episodes.len(),
            seed,
            config_digest: String::new(),
        }
    }

    pub fn rate(&self, task: ObjectClass) -> Option<f64> {
        self.tasks.iter().find(|t| t.task == task).map(|t| t.rate)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,task,successes,episodes,rate,seed,config_digest\n");
        for t in &self.tasks {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.model, t.task, t.successes, t.episodes, t.rate, self.seed, self.config_digest
            );
        }
        let total: usize = self.tasks.iter().map(|t| t.successes).sum();
        let _ = writeln!(
            out,
            "{},average,{},{},{},{},{}",
            self.model, total, self.episodes, self.average, self.seed, self.config_digest
        );
        out
    }
}

pub fn evaluate(
    controller: &dyn Controller,
    worlds: &[World],
    bank: &Bank,
    starts: &StartSet,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let episodes = run_episodes(controller, worlds, bank, starts, cfg)?;
    Ok(EvalReport::from_episodes("", &episodes, cfg.seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub k: usize,
    pub mode: DropMode,
    pub rate: f64,
}

/// Success rate with `k` representations dropped per step.
pub fn robustness_drop(
    policy: &FusionPolicy,
    k: usize,
    mode: DropMode,
    worlds: &[World],
    bank: &Bank,
    starts: &StartSet,
    cfg: &EvalConfig,
) -> Result<RobustnessPoint> {
    let ctl = DropController::new(policy, k, mode)?;
    let report = evaluate(&ctl, worlds, bank, starts, cfg)?;
    Ok(RobustnessPoint {
        k,
        mode,
        rate: report.average,
    })
}

pub fn robustness_curve(
    policy: &FusionPolicy,
    ks: &[usize],
    mode: DropMode,
    worlds: &[World],
    bank: &Bank,
    starts: &StartSet,
    cfg: &EvalConfig,
) -> Result<Vec<RobustnessPoint>> {
    ks.iter()
        .map(|&k| robustness_drop(policy, k, mode, worlds, bank, starts, cfg))
        .collect()
}

pub fn robustness_csv(points: &[RobustnessPoint]) -> String {
    let mut out = String::from("k,mode,rate\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.k, p.mode.name(), p.rate);
    }
    out
}

/// Openness bands: 1, 2, 3 and 4 or more cells.
pub const OPENNESS_BANDS: [&str; 4] = ["1", "2", "3", "4+"];

pub fn openness_band(openness: u32) -> usize {
    (openness.clamp(1, 4) - 1) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub env_id: String,
    pub node: NodeId,
    pub position: Coord,
    pub target: ObjectClass,
    pub openness: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchExtremes {
    pub branch: String,
    pub top: Vec<StateRecord>,
    pub bottom: Vec<StateRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateAnalytics {
    /// Sampled positions per openness band.
    pub band_counts: [usize; 4],
    /// `shares[band][domain]`: fraction of the band's positions whose
    /// dominant domain is `domain` (indexed as [`Domain::ALL`]).
    pub shares: [[f64; 3]; 4],
    /// `domain_mass[band][domain]`: mean gate mass on each domain.
    pub domain_mass: [[f64; 3]; 4],
    pub mean_gate: Vec<f64>,
    /// Coefficient of variation of the mean gate vector.
    pub batch_cv: f64,
    pub extremes: Vec<BranchExtremes>,
}

impl GateAnalytics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("band,domain,share,positions\n");
        for (b, name) in OPENNESS_BANDS.iter().enumerate() {
            for d in Domain::ALL {
                let _ = writeln!(
                    out,
                    "{name},{},{},{}",
                    d.name(),
                    self.shares[b][d.index()],
                    self.band_counts[b]
                );
            }
        }
        out
    }

    pub fn domain_share(&self, band: usize, domain: Domain) -> f64 {
        self.shares[band][domain.index()]
    }

    /// The widest band with at least one sampled position.
    pub fn widest_populated_band(&self) -> Option<usize> {
        (0..4).rev().find(|&b| self.band_counts[b] > 0)
    }

    pub fn narrowest_populated_band(&self) -> Option<usize> {
        (0..4).find(|&b| self.band_counts[b] > 0)
    }
}

/// Total gate mass per domain, indexed as [`Domain::ALL`].
pub fn domain_mass(g: &[f64], domains: &[Domain]) -> [f64; 3] {
    let mut mass = [0.0; 3];
    for (w, d) in g.iter().zip(domains) {
        mass[d.index()] += w;
    }
    mass
}

/// Domain holding the most gate mass; ties go to the earlier domain in
/// [`Domain::ALL`].
pub fn dominant_domain(g: &[f64], domains: &[Domain]) -> Domain {
    let mass = domain_mass(g, domains);
    let mut best = 0;
    for d in 1..3 {
        if mass[d] > mass[best] {
            best = d;
        }
    }
    Domain::ALL[best]
}

/// Gate statistics over `samples` positions drawn uniformly over
/// environments, reachable nodes and classes.
pub fn gate_analytics(
    policy: &FusionPolicy,
    worlds: &[World],
    bank: &Bank,
    samples: usize,
    seed: u64,
) -> Result<GateAnalytics> {
    if !policy.scheme().uses_gate() {
        return Err(Error::Scheme {
            op: "gate_analytics",
            scheme: policy.scheme().to_string(),
        });
    }
    let usable: Vec<&World> = worlds.iter().filter(|w| w.has_all_classes()).collect();
    if usable.is_empty() || samples == 0 {
        return Err(Error::InvalidParams(
            "gate analytics needs environments and samples".into(),
        ));
    }
    let domains = &policy.layout.domains;
    let mut rng = seed::rng(seed, streams::ANALYTICS, 0);
    let mut records: Vec<(StateRecord, Vec<f64>)> = Vec::with_capacity(samples);
    while records.len() < samples {
        let world = usable[rng.random_range(0..usable.len())];
        let node = rng.random_range(0..world.graph.node_count());
        let target = ObjectClass::ALL[rng.random_range(0..4)];
        if world.goal_distances(target)?.get(node).is_none() {
            continue;
        }
        let reps = bank.extract(&ObservationContext::new(world, node, target), &mut rng);
        let g: GateOutput = policy.gate(&reps)?;
        records.push((
            StateRecord {
                env_id: world.id.clone(),
                node,
                position: world.graph.coord(node),
                target,
                openness: openness(&world.graph, node),
                weight: 0.0,
            },
            g.g,
        ));
    }
    let mut band_counts = [0usize; 4];
    let mut hits = [[0usize; 3]; 4];
    let mut mass_sum = [[0.0; 3]; 4];
    for (rec, g) in &records {
        let b = openness_band(rec.openness);
        band_counts[b] += 1;
        hits[b][dominant_domain(g, domains).index()] += 1;
        for (acc, m) in mass_sum[b].iter_mut().zip(domain_mass(g, domains)) {
            *acc += m;
        }
    }
    let mut shares = [[0.0; 3]; 4];
    let mut domain_mass = [[0.0; 3]; 4];
    for b in 0..4 {
        if band_counts[b] > 0 {
            for d in 0..3 {
                shares[b][d] = hits[b][d] as f64 / band_counts[b] as f64;
                domain_mass[b][d] = mass_sum[b][d] / band_counts[b] as f64;
            }
        }
    }
    let gates: Vec<Vec<f64>> = records.iter().map(|(_, g)| g.clone()).collect();
    let n = policy.n();
    let mean_gate: Vec<f64> = (0..n)
        .map(|i| gates.iter().map(|g| g[i]).sum::<f64>() / gates.len() as f64)
        .collect();
    let (batch_cv, _) = load_balance_loss(&gates, LblVariant::BatchMean)?;
    let extremes = (0..n)
        .map(|i| {
            let mut order: Vec<usize> = (0..records.len()).collect();
            order.sort_by(|&a, &b| records[b].1[i].total_cmp(&records[a].1[i]).then(a.cmp(&b)));
            let pick = |j: &usize| StateRecord {
                weight: records[*j].1[i],
                ..records[*j].0.clone()
            };
            let k = order.len().min(4);
            BranchExtremes {
                branch: policy.layout.names[i].clone(),
                top: order[..k].iter().map(pick).collect(),
                bottom: order[order.len() - k..].iter().rev().map(pick).collect(),
            }
        })
        .collect();
    Ok(GateAnalytics {
        band_counts,
        shares,
        domain_mass,
        mean_gate,
        batch_cv,
        extremes,
    })
}

/// Mean combined gate weight on the listed branches over `samples` positions.
pub fn mean_gate_mass(analytics: &GateAnalytics, branches: &[usize]) -> f64 {
    branches.iter().map(|&i| analytics.mean_gate[i]).sum()
}
