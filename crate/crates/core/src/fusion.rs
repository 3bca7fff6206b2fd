//! Policy family: black-box, concat, feature-level fusion and action-level
//! fusion, plus the voting rules used as ensemble baselines.
//!
//! Every network also receives a one-hot encoding of the commanded object
//! class, since one policy serves all four navigation tasks.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::Action;
use crate::numcore::{read_param_blob, softmax, write_param_blob, DenseNet};
use crate::percept::{Bank, Domain, RepresentationSet};

/// Length of the task one-hot appended to every network input.
pub const TASK_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Blackbox,
    Concat,
    FeatureFusion,
    ActionFusion,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::Blackbox,
        Scheme::Concat,
        Scheme::FeatureFusion,
        Scheme::ActionFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Blackbox => "blackbox",
            Scheme::Concat => "concat",
            Scheme::FeatureFusion => "feature_fusion",
            Scheme::ActionFusion => "action_fusion",
        }
    }

    pub fn uses_gate(self) -> bool {
        matches!(self, Scheme::FeatureFusion | Scheme::ActionFusion)
    }

    pub fn uses_representations(self) -> bool {
        self != Scheme::Blackbox
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}`")))
    }
}

/// What the gating network sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateInput {
    /// All representation vectors plus the raw observation.
    #[default]
    Concat,
    /// The raw observation only.
    RawOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub branch_hidden: Vec<usize>,
    pub gate_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub blackbox_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            branch_hidden: vec![32],
            gate_hidden: vec![64],
            head_hidden: vec![64],
            blackbox_hidden: vec![128, 64],
        }
    }
}

/// Everything needed to rebuild a policy's networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyLayout {
    pub scheme: Scheme,
    pub names: Vec<String>,
    pub domains: Vec<Domain>,
    pub dims: Vec<usize>,
    pub raw_dim: usize,
    pub gate_input: GateInput,
    pub arch: Architecture,
}

impl PolicyLayout {
    pub fn new(scheme: Scheme, bank: &Bank, gate_input: GateInput, arch: Architecture) -> Self {
        PolicyLayout {
            scheme,
            names: bank.names(),
            domains: bank.domains(),
            dims: bank.dims(),
            raw_dim: bank.raw_dim(),
            gate_input,
            arch,
        }
    }

    pub fn n(&self) -> usize {
        self.dims.len()
    }

    fn rep_total(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn gate_input_dim(&self) -> usize {
        match self.gate_input {
            GateInput::Concat => self.rep_total() + self.raw_dim + TASK_DIM,
            GateInput::RawOnly => self.raw_dim + TASK_DIM,
        }
    }
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

/// Probabilities over the nine actions, indexed as [`Action::ALL`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionDistribution(pub [f64; Action::COUNT]);

impl ActionDistribution {
    pub fn uniform() -> Self {
        ActionDistribution([1.0 / Action::COUNT as f64; Action::COUNT])
    }

    pub fn from_probs(p: &[f64]) -> Self {
        let mut a = [0.0; Action::COUNT];
        a.copy_from_slice(p);
        ActionDistribution(a)
    }

    pub fn from_logits(z: &[f64]) -> Self {
        Self::from_probs(&softmax(z))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    /// Most probable action; ties go to the earlier action in fixed order.
    pub fn argmax(&self) -> Action {
        let mut best = 0;
        for i in 1..Action::COUNT {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        Action::ALL[best]
    }

    pub fn is_simplex(&self, tol: f64) -> bool {
        self.0.iter().all(|&p| p >= -tol) && (self.0.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

/// Gate scores `h` and their softmax `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    pub h: Vec<f64>,
    pub g: Vec<f64>,
}

impl GateOutput {
    pub fn from_scores(h: Vec<f64>) -> Self {
        let g = softmax(&h);
        GateOutput { h, g }
    }

    /// A gate with explicit weights (no scores), e.g. after masking.
    pub fn from_weights(g: Vec<f64>) -> Self {
        GateOutput {
            h: g.iter().map(|w| w.ln()).collect(),
            g,
        }
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut g = vec![0.0; n];
        g[k] = 1.0;
        Self::from_weights(g)
    }

    /// Zeroes the listed entries and renormalises the survivors.
    pub fn drop_and_renormalize(&self, dropped: &[usize]) -> GateOutput {
        let mut g = self.g.clone();
        for &i in dropped {
            g[i] = 0.0;
        }
        let sum: f64 = g.iter().sum();
        if sum > 0.0 {
            g.iter_mut().for_each(|w| *w /= sum);
        } else {
            let survivors = g.len() - dropped.len();
            for (i, w) in g.iter_mut().enumerate() {
                *w = if dropped.contains(&i) {
                    0.0
                } else {
                    1.0 / survivors as f64
                };
            }
        }
        GateOutput::from_weights(g)
    }
}

/// Gate-weighted mixture of candidate distributions.
pub fn fuse_actions(gate: &GateOutput, candidates: &[ActionDistribution]) -> Result<ActionDistribution> {
    if gate.g.len() != candidates.len() {
        return Err(Error::Dimension {
            expected: gate.g.len(),
            got: candidates.len(),
        });
    }
    let mut out = [0.0; Action::COUNT];
    for (w, c) in gate.g.iter().zip(candidates) {
        for (o, p) in out.iter_mut().zip(&c.0) {
            *o += w * p;
        }
    }
    Ok(ActionDistribution(out))
}

/// Concatenation of the gate-scaled representation blocks.
pub fn fuse_features(gate: &GateOutput, reps: &RepresentationSet) -> Result<Vec<f64>> {
    if gate.g.len() != reps.len() {
        return Err(Error::Dimension {
            expected: gate.g.len(),
            got: reps.len(),
        });
    }
    Ok(gate
        .g
        .iter()
        .zip(&reps.features)
        .flat_map(|(w, r)| r.iter().map(move |x| w * x))
        .collect())
}

/// Unweighted average of the candidates.
pub fn uniform_mix(candidates: &[ActionDistribution]) -> ActionDistribution {
    let n = candidates.len().max(1) as f64;
    let mut out = [0.0; Action::COUNT];
    for c in candidates {
        for (o, p) in out.iter_mut().zip(&c.0) {
            *o += p / n;
        }
    }
    ActionDistribution(out)
}

/// Plurality over per-branch argmax actions. Ties are broken by the larger
/// summed probability, then by fixed action order.
pub fn majority_vote(candidates: &[ActionDistribution]) -> Action {
    let mut votes = [0usize; Action::COUNT];
    let mut mass = [0.0f64; Action::COUNT];
    for c in candidates {
        votes[c.argmax().index()] += 1;
        for (m, p) in mass.iter_mut().zip(&c.0) {
            *m += p;
        }
    }
    let mut best = 0;
    for i in 1..Action::COUNT {
        if votes[i] > votes[best] || (votes[i] == votes[best] && mass[i] > mass[best]) {
            best = i;
        }
    }
    Action::ALL[best]
}

/// Majority vote restricted to the `k` best-ranked branches.
pub fn top_k_vote(candidates: &[ActionDistribution], rank: &[usize], k: usize) -> Result<Action> {
    if rank.len() != candidates.len() {
        return Err(Error::InvalidParams(format!(
            "branch ranking covers {} of {} branches",
            rank.len(),
            candidates.len()
        )));
    }
    if k == 0 || k > candidates.len() {
        return Err(Error::InvalidParams(format!(
            "k = {k} outside 1..={}",
            candidates.len()
        )));
    }
    let chosen: Vec<ActionDistribution> = rank[..k]
        .iter()
        .map(|&i| {
            candidates.get(i).copied().ok_or(Error::BranchIndex {
                index: i,
                len: candidates.len(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(majority_vote(&chosen))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionPolicy {
    pub layout: PolicyLayout,
    /// One action predictor per representation (action fusion only).
    pub branches: Vec<DenseNet>,
    pub gate: Option<DenseNet>,
    /// Shared action head (feature fusion, concat) or the black-box network.
    pub head: Option<DenseNet>,
}

impl FusionPolicy {
    /// Builds the scheme's networks with all parameters zero.
    pub fn zeroed(layout: PolicyLayout) -> Self {
        let n = layout.n();
        let arch = &layout.arch;
        let a = Action::COUNT;
        let (branches, gate, head) = match layout.scheme {
            Scheme::Blackbox => (
                Vec::new(),
                None,
                Some(DenseNet::mlp(&sizes(
                    layout.raw_dim + TASK_DIM,
                    &arch.blackbox_hidden,
                    a,
                ))),
            ),
            Scheme::Concat => (
                Vec::new(),
                None,
                Some(DenseNet::mlp(&sizes(
                    layout.rep_total() + TASK_DIM,
                    &arch.head_hidden,
                    a,
                ))),
            ),
            Scheme::FeatureFusion => (
                Vec::new(),
                Some(DenseNet::mlp(&sizes(layout.gate_input_dim(), &arch.gate_hidden, n))),
                Some(DenseNet::mlp(&sizes(
                    layout.rep_total() + TASK_DIM,
                    &arch.head_hidden,
                    a,
                ))),
            ),
            Scheme::ActionFusion => (
                layout
                    .dims
                    .iter()
                    .map(|&d| DenseNet::mlp(&sizes(d + TASK_DIM, &arch.branch_hidden, a)))
                    .collect(),
                Some(DenseNet::mlp(&sizes(layout.gate_input_dim(), &arch.gate_hidden, n))),
                None,
            ),
        };
        FusionPolicy {
            layout,
            branches,
            gate,
            head,
        }
    }

    pub fn new<R: Rng + ?Sized>(layout: PolicyLayout, rng: &mut R) -> Self {
        let mut p = Self::zeroed(layout);
        for net in p.nets_mut() {
            net.init_glorot(rng);
        }
        p
    }

    pub fn scheme(&self) -> Scheme {
        self.layout.scheme
    }

    pub fn n(&self) -> usize {
        self.layout.n()
    }

    /// Networks in a fixed order: branches, gate, head.
    pub fn nets(&self) -> Vec<&DenseNet> {
        self.branches.iter().chain(&self.gate).chain(&self.head).collect()
    }

    pub fn nets_mut(&mut self) -> Vec<&mut DenseNet> {
        self.branches
            .iter_mut()
            .chain(self.gate.as_mut())
            .chain(self.head.as_mut())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.nets().iter().map(|n| n.param_count()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.nets().iter().flat_map(|n| n.params.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.nets().iter().flat_map(|n| n.grads.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut at = 0;
        for net in self.nets_mut() {
            let len = net.param_count();
            net.params.copy_from_slice(&flat[at..at + len]);
            at += len;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for net in self.nets_mut() {
            net.zero_grad();
        }
    }

    fn check_reps(&self, reps: &RepresentationSet) -> Result<()> {
        if reps.len() != self.n() {
            return Err(Error::Dimension {
                expected: self.n(),
                got: reps.len(),
            });
        }
        Ok(())
    }

    pub fn branch_input(&self, i: usize, reps: &RepresentationSet) -> Vec<f64> {
        let mut x = reps.features[i].clone();
        x.extend_from_slice(&reps.task());
        x
    }

    pub fn gate_input(&self, reps: &RepresentationSet) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.layout.gate_input_dim());
        if self.layout.gate_input == GateInput::Concat {
            for r in &reps.features {
                x.extend_from_slice(r);
            }
        }
        x.extend_from_slice(&reps.raw_obs);
        x.extend_from_slice(&reps.task());
        x
    }

    pub fn concat_input(&self, reps: &RepresentationSet) -> Vec<f64> {
        let mut x: Vec<f64> = reps.features.iter().flatten().copied().collect();
        x.extend_from_slice(&reps.task());
        x
    }

    pub fn blackbox_input(&self, reps: &RepresentationSet) -> Vec<f64> {
        let mut x = reps.raw_obs.clone();
        x.extend_from_slice(&reps.task());
        x
    }

    pub fn gate(&self, reps: &RepresentationSet) -> Result<GateOutput> {
        let net = self.gate.as_ref().ok_or(Error::Scheme {
            op: "gate",
            scheme: self.scheme().to_string(),
        })?;
        self.check_reps(reps)?;
        Ok(GateOutput::from_scores(net.predict(&self.gate_input(reps))?))
    }

    pub fn branch_predict(&self, i: usize, reps: &RepresentationSet) -> Result<ActionDistribution> {
        if self.scheme() != Scheme::ActionFusion {
            return Err(Error::Scheme {
                op: "branch_predict",
                scheme: self.scheme().to_string(),
            });
        }
        let net = self.branches.get(i).ok_or(Error::BranchIndex {
            index: i,
            len: self.n(),
        })?;
        Ok(ActionDistribution::from_logits(
            &net.predict(&self.branch_input(i, reps))?,
        ))
    }

    /// Every branch's candidate distribution.
    pub fn candidates(&self, reps: &RepresentationSet) -> Result<Vec<ActionDistribution>> {
        self.check_reps(reps)?;
        (0..self.n()).map(|i| self.branch_predict(i, reps)).collect()
    }

    /// Feature-fusion head applied to gate-scaled blocks.
    pub fn feature_predict_with(&self, gate: &GateOutput, reps: &RepresentationSet) -> Result<ActionDistribution> {
        if self.scheme() != Scheme::FeatureFusion {
            return Err(Error::Scheme {
                op: "fuse_features",
                scheme: self.scheme().to_string(),
            });
        }
        let mut x = fuse_features(gate, reps)?;
        x.extend_from_slice(&reps.task());
        let head = self.head.as_ref().expect("feature fusion has a head");
        Ok(ActionDistribution::from_logits(&head.predict(&x)?))
    }

    pub fn concat_predict(&self, reps: &RepresentationSet) -> Result<ActionDistribution> {
        if self.scheme() != Scheme::Concat {
            return Err(Error::Scheme {
                op: "concat_predict",
                scheme: self.scheme().to_string(),
            });
        }
        self.check_reps(reps)?;
        let head = self.head.as_ref().expect("concat has a head");
        Ok(ActionDistribution::from_logits(
            &head.predict(&self.concat_input(reps))?,
        ))
    }

    pub fn blackbox_predict(&self, reps: &RepresentationSet) -> Result<ActionDistribution> {
        if self.scheme() != Scheme::Blackbox {
            return Err(Error::Scheme {
                op: "blackbox_predict",
                scheme: self.scheme().to_string(),
            });
        }
        let head = self.head.as_ref().expect("blackbox has a network");
        Ok(ActionDistribution::from_logits(
            &head.predict(&self.blackbox_input(reps))?,
        ))
    }

    /// The scheme's action distribution under an explicit gate (ignored by
    /// gateless schemes).
    pub fn distribution_with_gate(
        &self,
        gate: Option<&GateOutput>,
        reps: &RepresentationSet,
    ) -> Result<ActionDistribution> {
        match self.scheme() {
            Scheme::Blackbox => self.blackbox_predict(reps),
            Scheme::Concat => self.concat_predict(reps),
            Scheme::FeatureFusion | Scheme::ActionFusion => {
                let owned;
                let g = match gate {
                    Some(g) => g,
                    None => {
                        owned = self.gate(reps)?;
                        &owned
                    }
                };
                if self.scheme() == Scheme::FeatureFusion {
                    self.feature_predict_with(g, reps)
                } else {
                    fuse_actions(g, &self.candidates(reps)?)
                }
            }
        }
    }

    pub fn distribution(&self, reps: &RepresentationSet) -> Result<ActionDistribution> {
        self.distribution_with_gate(None, reps)
    }

    /// Greedy action.
    pub fn act(&self, reps: &RepresentationSet) -> Result<Action> {
        Ok(self.distribution(reps)?.argmax())
    }

    /// Writes `manifest.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path, meta: CheckpointMeta) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            layout: self.layout.clone(),
            nets: self
                .nets()
                .iter()
                .map(|n| NetEntry {
                    layers: n.layers().to_vec(),
                    params: n.param_count(),
                })
                .collect(),
            meta,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
        write_param_blob(&dir.join("params.bin"), &self.flat_params())
    }

    pub fn load(dir: &Path) -> Result<(FusionPolicy, CheckpointMeta)> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format `{}`",
                manifest.format
            )));
        }
        let mut policy = FusionPolicy::zeroed(manifest.layout);
        let shapes: Vec<Vec<_>> = policy.nets().iter().map(|n| n.layers().to_vec()).collect();
        let declared: Vec<Vec<_>> = manifest.nets.iter().map(|n| n.layers.clone()).collect();
        if shapes != declared {
            return Err(Error::Config(
                "checkpoint network shapes disagree with its layout".into(),
            ));
        }
        policy.set_flat_params(&read_param_blob(&dir.join("params.bin"))?)?;
        Ok((policy, manifest.meta))
    }
}

pub const CHECKPOINT_FORMAT: &str = "sitfuse-policy-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetEntry {
    layers: Vec<crate::numcore::LayerShape>,
    params: usize,
}

/// Provenance stored alongside a checkpoint.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub name: String,
    pub seed: u64,
    pub iteration: usize,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    layout: PolicyLayout,
    nets: Vec<NetEntry>,
    meta: CheckpointMeta,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{Direction, ObjectClass};
    use crate::numcore::DenseNet;
    use crate::percept::{register_default_bank, PerceptParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank() -> Bank {
        register_default_bank(&PerceptParams::default()).unwrap()
    }

    fn reps_for(bank: &Bank, seed: u64) -> RepresentationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RepresentationSet {
            features: bank
                .dims()
                .iter()
                .map(|&d| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
            raw_obs: (0..bank.raw_dim()).map(|_| rng.random_range(0.0..1.0)).collect(),
            target: ObjectClass::ALL[(seed % 4) as usize],
        }
    }

    fn policy(scheme: Scheme, seed: u64) -> FusionPolicy {
        let layout = PolicyLayout::new(scheme, &bank(), GateInput::Concat, Architecture::default());
        FusionPolicy::new(layout, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn dist(p: &[f64]) -> ActionDistribution {
        let mut a = [0.0; 9];
        a[..p.len()].copy_from_slice(p);
        ActionDistribution(a)
    }

    #[test]
    fn zero_gate_is_uniform() {
        let b = bank();
        let p = FusionPolicy::zeroed(PolicyLayout::new(
            Scheme::ActionFusion,
            &b,
            GateInput::Concat,
            Architecture::default(),
        ));
        let g = p.gate(&reps_for(&b, 1)).unwrap();
        for w in &g.g {
            assert!((w - 0.1).abs() < 1e-15);
        }
        let c = p.branch_predict(3, &reps_for(&b, 1)).unwrap();
        assert_eq!(c, ActionDistribution::uniform());
    }

    #[test]
    fn gate_matches_hand_softmax() {
        // Two-representation toy: the gate is a single identity-output layer
        // whose scores are w . x + b for each representation.
        let mut specs = crate::percept::default_specs(&PerceptParams::default(), 0.0);
        specs.truncate(6);
        let b = Bank::new(PerceptParams::default(), specs).unwrap();
        let mut layout = PolicyLayout::new(Scheme::ActionFusion, &b, GateInput::RawOnly, Architecture::default());
        layout.arch.gate_hidden = vec![];
        let mut p = FusionPolicy::zeroed(layout);
        let gate = p.gate.as_mut().unwrap();
        let cols = gate.input_dim();
        // Score_0 = x[0], score_1 = 2 x[1] + 0.5, others zero.
        gate.params[0] = 1.0;
        gate.params[cols + 1] = 2.0;
        gate.params[6 * cols + 1] = 0.5;
        let mut reps = reps_for(&b, 2);
        reps.raw_obs[0] = 0.3;
        reps.raw_obs[1] = -0.2;
        let out = p.gate(&reps).unwrap();
        let h = [0.3, 2.0 * -0.2 + 0.5, 0.0, 0.0, 0.0, 0.0];
        let z: f64 = h.iter().map(|x: &f64| x.exp()).sum();
        for (i, &hi) in h.iter().enumerate() {
            assert!((out.h[i] - hi).abs() < 1e-15);
            assert!((out.g[i] - hi.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_on_gateless_scheme_errors() {
        let b = bank();
        for s in [Scheme::Blackbox, Scheme::Concat] {
            assert!(matches!(policy(s, 0).gate(&reps_for(&b, 0)), Err(Error::Scheme { .. })));
        }
        assert!(matches!(
            policy(Scheme::ActionFusion, 0).branch_predict(10, &reps_for(&b, 0)),
            Err(Error::BranchIndex { .. })
        ));
    }

    #[test]
    fn fuse_actions_arithmetic() {
        let g = GateOutput::from_weights(vec![0.5, 0.5]);
        let out = fuse_actions(&g, &[dist(&[0.7, 0.3]), dist(&[0.1, 0.9])]).unwrap();
        assert!((out.0[0] - 0.4).abs() < 1e-15);
        assert!((out.0[1] - 0.6).abs() < 1e-15);
        let one = GateOutput::one_hot(2, 1);
        assert_eq!(
            fuse_actions(&one, &[dist(&[0.7, 0.3]), dist(&[0.1, 0.9])]).unwrap(),
            dist(&[0.1, 0.9])
        );
        assert!(fuse_actions(&one, &[dist(&[1.0])]).is_err());
    }

    #[test]
    fn feature_fusion_scaling() {
        let b = bank();
        let reps = reps_for(&b, 4);
        let fused = fuse_features(&GateOutput::one_hot(10, 2), &reps).unwrap();
        let offset: usize = b.dims()[..2].iter().sum();
        for (j, x) in fused.iter().enumerate() {
            if j >= offset && j < offset + b.dims()[2] {
                assert_eq!(*x, reps.features[2][j - offset]);
            } else {
                assert_eq!(*x, 0.0);
            }
        }
        let fused = fuse_features(&GateOutput::from_weights(vec![0.1; 10]), &reps).unwrap();
        let flat: Vec<f64> = reps.features.iter().flatten().copied().collect();
        for (a, x) in fused.iter().zip(flat) {
            assert_eq!(*a, 0.1 * x);
        }
    }

    #[test]
    fn feature_head_matches_hand_arithmetic() {
        // Head with no hidden layer: logits = W [g0 r0, g1 r1, ..., task] + b.
        let b = bank();
        let mut layout = PolicyLayout::new(Scheme::FeatureFusion, &b, GateInput::Concat, Architecture::default());
        layout.arch.head_hidden = vec![];
        let mut p = FusionPolicy::zeroed(layout);
        let head = p.head.as_mut().unwrap();
        let cols = head.input_dim();
        head.params[0] = 2.0; // action 0 <- first element of block 0
        head.params[cols + 8] = -1.0; // action 1 <- first element of block 1 (depth rays has 8)
        let reps = reps_for(&b, 5);
        let mut g = vec![0.0; 10];
        g[0] = 0.25;
        g[1] = 0.75;
        let out = p.feature_predict_with(&GateOutput::from_weights(g), &reps).unwrap();
        let mut z = [0.0; 9];
        z[0] = 2.0 * 0.25 * reps.features[0][0];
        z[1] = -0.75 * reps.features[1][0];
        let expect = softmax(&z);
        for (a, e) in out.0.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_and_blackbox_match_hand_arithmetic() {
        let b = bank();
        for scheme in [Scheme::Concat, Scheme::Blackbox] {
            let mut layout = PolicyLayout::new(scheme, &b, GateInput::Concat, Architecture::default());
            layout.arch.head_hidden = vec![];
            layout.arch.blackbox_hidden = vec![];
            let mut p = FusionPolicy::zeroed(layout);
            let head = p.head.as_mut().unwrap();
            let cols = head.input_dim();
            head.params[2 * cols + 1] = 3.0;
            head.params[9 * cols + 8] = 0.2; // bias of Stop
            let reps = reps_for(&b, 6);
            let x1 = match scheme {
                Scheme::Concat => reps.features[0][1],
                _ => reps.raw_obs[1],
            };
            let mut z = [0.0; 9];
            z[2] = 3.0 * x1;
            z[8] = 0.2;
            let got = p.distribution(&reps).unwrap();
            for (a, e) in got.0.iter().zip(softmax(&z)) {
                assert!((a - e).abs() < 1e-15);
            }
            assert_eq!(got, p.distribution(&reps).unwrap());
        }
    }

    #[test]
    fn all_schemes_output_simplex_deterministically() {
        let b = bank();
        for scheme in Scheme::ALL {
            let p = policy(scheme, 9);
            for s in 0..10 {
                let reps = reps_for(&b, s);
                let d = p.distribution(&reps).unwrap();
                assert!(d.is_simplex(1e-9), "{scheme}");
                assert_eq!(p.act(&reps).unwrap(), p.act(&reps).unwrap());
            }
        }
    }

    #[test]
    fn one_hot_gate_equals_branch_argmax() {
        let b = bank();
        let p = policy(Scheme::ActionFusion, 3);
        for s in 0..20 {
            let reps = reps_for(&b, s);
            let cands = p.candidates(&reps).unwrap();
            for k in 0..10 {
                let fused = p
                    .distribution_with_gate(Some(&GateOutput::one_hot(10, k)), &reps)
                    .unwrap();
                assert_eq!(fused.argmax(), cands[k].argmax());
            }
            let g = p.gate(&reps).unwrap();
            assert_eq!(p.act(&reps).unwrap(), fuse_actions(&g, &cands).unwrap().argmax());
        }
    }

    #[test]
    fn voting_rules() {
        let e = Action::Move(Direction::E);
        let n = Action::Move(Direction::N);
        let peak = |a: Action, p: f64| {
            let mut d = [(1.0 - p) / 8.0; 9];
            d[a.index()] = p;
            ActionDistribution(d)
        };
        assert_eq!(majority_vote(&[peak(e, 0.6), peak(e, 0.5), peak(Action::Stop, 0.9)]), e);
        assert_eq!(majority_vote(&[peak(Action::Stop, 0.3)]), Action::Stop);
        // One vote each for N and E; E carries more summed probability.
        assert_eq!(majority_vote(&[peak(n, 0.4), peak(e, 0.9)]), e);
        // Exact tie in votes and mass falls back to fixed order (N first).
        assert_eq!(majority_vote(&[peak(n, 0.5), peak(e, 0.5)]), n);

        let cands = [
            peak(n, 0.9),
            peak(e, 0.5),
            peak(e, 0.6),
            peak(Action::Stop, 0.7),
            peak(n, 0.3),
        ];
        let rank = [3, 0, 4, 1, 2];
        assert_eq!(top_k_vote(&cands, &rank, 1).unwrap(), Action::Stop);
        // Top 3 = {Stop, N, N}.
        assert_eq!(top_k_vote(&cands, &rank, 3).unwrap(), n);
        assert_eq!(top_k_vote(&cands, &rank, 5).unwrap(), majority_vote(&cands));
        assert!(top_k_vote(&cands, &[], 1).is_err());
        assert!(top_k_vote(&cands, &rank, 0).is_err());
    }

    #[test]
    fn renormalized_gate_sums_to_one() {
        let g = GateOutput::from_scores(vec![0.3, -1.0, 2.0, 0.1]);
        let d = g.drop_and_renormalize(&[2, 0]);
        assert_eq!(d.g[0], 0.0);
        assert_eq!(d.g[2], 0.0);
        assert!((d.g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((d.g[1] / d.g[3] - g.g[1] / g.g[3]).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = policy(Scheme::ActionFusion, 12);
        let meta = CheckpointMeta {
            name: "af".into(),
            seed: 12,
            iteration: 5,
            config_digest: "abc".into(),
        };
        p.save(dir.path(), meta.clone()).unwrap();
        let (q, m) = FusionPolicy::load(dir.path()).unwrap();
        assert_eq!(p, q);
        assert_eq!(m, meta);
        assert!(FusionPolicy::load(&dir.path().join("missing")).is_err());
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn fused_distribution_is_convex_and_permutation_consistent(
            g in simplex(5),
            raw in prop::collection::vec(simplex(9), 5),
            perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let cands: Vec<ActionDistribution> = raw.iter().map(|p| ActionDistribution::from_probs(p)).collect();
            let gate = GateOutput::from_weights(g.clone());
            let out = fuse_actions(&gate, &cands).unwrap();
            prop_assert!(out.is_simplex(1e-9));
            for a in 0..9 {
                let lo = cands.iter().map(|c| c.0[a]).fold(f64::INFINITY, f64::min);
                let hi = cands.iter().map(|c| c.0[a]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.0[a] >= lo - 1e-12 && out.0[a] <= hi + 1e-12);
            }
            let pg = GateOutput::from_weights(perm.iter().map(|&i| g[i]).collect());
            let pc: Vec<ActionDistribution> = perm.iter().map(|&i| cands[i]).collect();
            let pout = fuse_actions(&pg, &pc).unwrap();
            for a in 0..9 {
                prop_assert!((pout.0[a] - out.0[a]).abs() < 1e-12);
            }
            let rank: Vec<usize> = (0..5).collect();
            prop_assert_eq!(top_k_vote(&cands, &rank, 5).unwrap(), majority_vote(&cands));
        }
    }

    #[test]
    fn dense_net_sizes_follow_architecture() {
        let p = policy(Scheme::ActionFusion, 0);
        assert_eq!(p.branches.len(), 10);
        let g: &DenseNet = p.gate.as_ref().unwrap();
        assert_eq!(g.output_dim(), 10);
        assert_eq!(g.layers()[0].outputs, 64);
        assert_eq!(p.branches[0].layers()[0].outputs, 32);
        let bb = policy(Scheme::Blackbox, 0);
        let h = bb.head.as_ref().unwrap();
        assert_eq!(
            h.layers().iter().map(|l| l.outputs).collect::<Vec<_>>(),
            vec![128, 64, 9]
        );
    }
}
