//! Imitation learning: oracle-labelled datasets and the minibatch loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, BranchController, EvalConfig, StartSet};
use crate::fusion::{Architecture, CheckpointMeta, FusionPolicy, GateInput, PolicyLayout, Scheme};
use crate::gridworld::{Action, AgentState, NodeId, ObjectClass, World};
use crate::losses::{total_loss, AffinityEstimate, AffinityMatrix, LblVariant, LossBreakdown, LossConfig, Sample};
use crate::numcore::{AdamConfig, AdamState, LrSchedule};
use crate::percept::{Bank, ObservationContext, RepresentationSet};
use crate::seed::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    pub env_id: String,
    pub node: NodeId,
    pub target: ObjectClass,
    pub reps: RepresentationSet,
    pub label: Action,
}

/// An environment left out of a dataset, with the classes it lacks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub env_id: String,
    pub missing: Vec<ObjectClass>,
}

#[derive(Debug, Clone)]
pub struct ImitationDataset {
    pub split: Split,
    pub rows: Vec<DatasetRow>,
    pub rejected: Vec<Rejection>,
}

impl ImitationDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn env_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.rows.iter().map(|r| r.env_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn samples(&self) -> Vec<Sample<'_>> {
        self.rows.iter().map(|r| (&r.reps, r.label)).collect()
    }

    /// Recomputes every label with the oracle and counts disagreements.
    pub fn verify_labels(&self, worlds: &[World]) -> Result<usize> {
        let mut wrong = 0;
        for row in &self.rows {
            let world = worlds
                .iter()
                .find(|w| w.id == row.env_id)
                .ok_or_else(|| Error::Config(format!("environment `{}` not supplied", row.env_id)))?;
            if world.optimal_action(&AgentState::new(row.node, row.target))? != row.label {
                wrong += 1;
            }
        }
        Ok(wrong)
    }
}

/// Samples `per_env` states per environment uniformly over `(node, class)`
/// pairs with a finite goal distance and labels them with the oracle.
///
/// Environments lacking a class are skipped and listed in `rejected`.
pub fn build_dataset(
    worlds: &[World],
    bank: &Bank,
    per_env: usize,
    split: Split,
    seed: u64,
) -> Result<ImitationDataset> {
    if per_env == 0 {
        return Err(Error::InvalidParams(
            "per-environment sample count must be positive".into(),
        ));
    }
    let mut rejected = Vec::new();
    let mut accepted = Vec::new();
    for (i, w) in worlds.iter().enumerate() {
        if w.has_all_classes() {
            accepted.push((i, w));
        } else {
            let missing = w.missing_classes();
            log::warn!("rejecting environment {}: missing {:?}", w.id, missing);
            rejected.push(Rejection {
                env_id: w.id.clone(),
                missing,
            });
        }
    }
    if accepted.is_empty() {
        return Err(Error::Config("no environment contains every object class".into()));
    }
    let per_world: Vec<Vec<DatasetRow>> = accepted
        .par_iter()
        .map(|&(i, w)| sample_rows(w, bank, per_env, seed::rng(seed, streams::DATASET, i as u64)))
        .collect::<Result<_>>()?;
    Ok(ImitationDataset {
        split,
        rows: per_world.into_iter().flatten().collect(),
        rejected,
    })
}

fn sample_rows<R: Rng>(world: &World, bank: &Bank, count: usize, mut rng: R) -> Result<Vec<DatasetRow>> {
    let mut pairs = Vec::new();
    for class in ObjectClass::ALL {
        let goal = world.goal_distances(class)?;
        pairs.extend(
            (0..world.graph.node_count())
                .filter(|&n| goal.get(n).is_some())
                .map(|n| (n, class)),
        );
    }
    if pairs.is_empty() {
        return Err(Error::InvalidMap(format!(
            "{} has no state with a reachable goal",
            world.id
        )));
    }
    (0..count)
        .map(|_| {
            let (node, target) = pairs[rng.random_range(0..pairs.len())];
            let reps = bank.extract(&ObservationContext::new(world, node, target), &mut rng);
            let label = world.optimal_action(&AgentState::new(node, target))?;
            Ok(DatasetRow {
                env_id: world.id.clone(),
                node,
                target,
                reps,
                label,
            })
        })
        .collect()
}

/// Estimates representation affinity from `count` states spread over the
/// given environments.
pub fn estimate_bank_affinity(
    worlds: &[World],
    bank: &Bank,
    count: usize,
    ridge: f64,
    seed: u64,
) -> Result<AffinityEstimate> {
    if worlds.is_empty() || count == 0 {
        return Err(Error::InvalidParams(
            "affinity estimation needs environments and samples".into(),
        ));
    }
    let per_env = count.div_ceil(worlds.len());
    let data = build_dataset(
        worlds,
        bank,
        per_env,
        Split::Train,
        seed::derive(seed, streams::AFFINITY, 0),
    )?;
    let samples: Vec<&RepresentationSet> = data.rows.iter().take(count).map(|r| &r.reps).collect();
    crate::losses::estimate_affinity(&bank.names(), &samples, ridge)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub lambda_lbl: f64,
    pub lambda_aff: f64,
    pub lbl_variant: LblVariant,
    pub detach_branches: bool,
    pub gate_input: GateInput,
    pub arch: Architecture,
    pub seed: u64,
    /// Loss curve sampling period in iterations.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: Scheme::ActionFusion,
            iterations: 2000,
            batch_size: 128,
            base_lr: 1e-3,
            milestones: vec![1000, 1600],
            decay_factor: 0.1,
            lambda_lbl: 0.0,
            lambda_aff: 0.0,
            lbl_variant: LblVariant::BatchMean,
            detach_branches: true,
            gate_input: GateInput::Concat,
            arch: Architecture::default(),
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_lbl: self.lambda_lbl,
            lambda_aff: self.lambda_aff,
            lbl_variant: self.lbl_variant,
            detach_branches: self.detach_branches,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.base_lr,
            milestones: self.milestones.clone(),
            factor: self.decay_factor,
        }
    }

    pub fn validate(&self, dataset_len: usize, affinity: Option<&AffinityMatrix>) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch_size == 0 || self.batch_size > dataset_len {
            return Err(Error::Config(format!(
                "batch size {} must be in 1..={dataset_len}",
                self.batch_size
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || self.decay_factor.is_nan() || self.decay_factor <= 0.0 {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        self.loss_config().validate(self.scheme, affinity)
    }
}

/// One sampled point of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: FusionPolicy,
    pub curve: Vec<CurvePoint>,
}

impl TrainOutcome {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("iteration,ce_fused,ce_branch_mean,lbl,affinity,total,lr\n");
        for p in &self.curve {
            let l = &p.loss;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                p.iteration,
                l.ce_fused,
                l.mean_ce_branch(),
                l.lbl,
                l.affinity,
                l.total,
                p.lr
            );
        }
        out
    }

    /// Writes the checkpoint and `loss_curve.csv` into `dir`.
    pub fn save(&self, dir: &Path, meta: CheckpointMeta) -> Result<()> {
        self.policy.save(dir, meta)?;
        let path = dir.join("loss_curve.csv");
        fs::write(&path, self.curve_csv()).map_err(|e| Error::io(&path, e))
    }
}

/// Trains a freshly initialised policy of `cfg.scheme` on `dataset`.
pub fn train_policy(
    dataset: &ImitationDataset,
    bank: &Bank,
    cfg: &TrainConfig,
    affinity: Option<&AffinityMatrix>,
) -> Result<TrainOutcome> {
    let layout = PolicyLayout::new(cfg.scheme, bank, cfg.gate_input, cfg.arch.clone());
    let policy = FusionPolicy::new(layout, &mut seed::rng(cfg.seed, streams::INIT, 0));
    train_from(policy, dataset, cfg, affinity)
}

/// Continues optimisation of an existing policy.
pub fn train_from(
    mut policy: FusionPolicy,
    dataset: &ImitationDataset,
    cfg: &TrainConfig,
    affinity: Option<&AffinityMatrix>,
) -> Result<TrainOutcome> {
    cfg.validate(dataset.len(), affinity)?;
    if policy.scheme() != cfg.scheme {
        return Err(Error::Config(format!(
            "policy scheme {} differs from configured {}",
            policy.scheme(),
            cfg.scheme
        )));
    }
    if let Some(f) = affinity {
        if f.names() != policy.layout.names.as_slice() {
            return Err(Error::Config("affinity matrix names do not match the bank".into()));
        }
    }
    let loss_cfg = cfg.loss_config();
    let schedule = cfg.schedule();
    let samples = dataset.samples();
    let mut adam: Vec<AdamState> = policy
        .nets()
        .iter()
        .map(|n| AdamState::new(n.param_count(), AdamConfig::default()))
        .collect();
    let mut shuffle = seed::rng(cfg.seed, streams::SHUFFLE, 0);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut shuffle);
    let mut cursor = 0;
    let mut batch: Vec<Sample<'_>> = Vec::with_capacity(cfg.batch_size);
    let mut curve = Vec::new();
    for it in 0..cfg.iterations {
        batch.clear();
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut shuffle);
                cursor = 0;
            }
            batch.push(samples[order[cursor]]);
            cursor += 1;
        }
        let loss = total_loss(&mut policy, &batch, affinity, &loss_cfg)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("{loss:?}"),
            });
        }
        let lr = schedule.lr_at(it);
        for (net, state) in policy.nets_mut().into_iter().zip(&mut adam) {
            state.update(&mut net.params, &net.grads, lr);
        }
        if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
            log::debug!("iter {it} lr {lr:e} total {:.5}", loss.total);
            curve.push(CurvePoint {
                iteration: it,
                lr,
                loss,
            });
        }
    }
    if policy.flat_params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Diverged {
            iteration: cfg.iterations,
            detail: "non-finite parameters".into(),
        });
    }
    Ok(TrainOutcome { policy, curve })
}

/// Individual success rate of each branch executed alone, sorted descending
/// with ties broken by branch index.
pub fn rank_branches(
    policy: &FusionPolicy,
    worlds: &[World],
    bank: &Bank,
    starts: &StartSet,
    cfg: &EvalConfig,
) -> Result<Vec<(usize, f64)>> {
    if policy.scheme() != Scheme::ActionFusion {
        return Err(Error::Scheme {
            op: "rank_branches",
            scheme: policy.scheme().to_string(),
        });
    }
    let mut rates = (0..policy.n())
        .map(|i| {
            let ctl = BranchController::new(policy, i)?;
            Ok((i, evaluate(&ctl, worlds, bank, starts, cfg)?.average))
        })
        .collect::<Result<Vec<_>>>()?;
    rates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(rates)
}
