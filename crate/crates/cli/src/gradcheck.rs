//! Finite-difference verification of the composite loss over randomly drawn
//! small policies, batches and regularizer settings.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use sitfuse::fusion::{Architecture, FusionPolicy, GateInput, PolicyLayout, Scheme};
use sitfuse::gridworld::{Action, ObjectClass};
use sitfuse::losses::{check_total_loss_gradient, AffinityMatrix, LblVariant, LossConfig};
use sitfuse::percept::{default_specs, Bank, PerceptParams, RepresentationSet};
use sitfuse::seed;

use crate::error::CliResult;

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckCase {
    pub index: usize,
    pub scheme: Scheme,
    pub gate_input: GateInput,
    pub lambda_lbl: f64,
    pub lambda_aff: f64,
    pub lbl_variant: LblVariant,
    pub detach_branches: bool,
    pub batch: usize,
    pub params: usize,
    pub max_rel_err: f64,
}

impl GradcheckCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn small_bank() -> Bank {
    let params = PerceptParams {
        patch: 3,
        raw_window: 3,
        projection_dim: 3,
        ..PerceptParams::default()
    };
    Bank::new(params.clone(), default_specs(&params, 0.0)).expect("small bank is valid")
}

fn random_affinity<R: Rng>(names: Vec<String>, rng: &mut R) -> AffinityMatrix {
    let n = names.len();
    let mut rows = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = rng.random_range(0.0..1.0);
            rows[i][j] = v;
            rows[j][i] = v;
        }
    }
    AffinityMatrix::new(names, rows).expect("random matrix is valid")
}

/// Runs `cases` random configurations, cycling through every scheme.
pub fn run_gradcheck(cases: usize, seed: u64) -> CliResult<Vec<GradcheckCase>> {
    let bank = small_bank();
    let mut out = Vec::with_capacity(cases);
    for index in 0..cases {
        let mut rng = seed::rng(seed, seed::streams::GRADCHECK, index as u64);
        let scheme = Scheme::ALL[index % Scheme::ALL.len()];
        let gated = scheme.uses_gate();
        let hidden = |rng: &mut rand_chacha::ChaCha8Rng| {
            if rng.random_bool(0.3) {
                Vec::new()
            } else {
                vec![rng.random_range(3..7)]
            }
        };
        let arch = Architecture {
            branch_hidden: hidden(&mut rng),
            gate_hidden: hidden(&mut rng),
            head_hidden: hidden(&mut rng),
            blackbox_hidden: hidden(&mut rng),
        };
        let gate_input = if rng.random_bool(0.5) {
            GateInput::Concat
        } else {
            GateInput::RawOnly
        };
        let policy = FusionPolicy::new(PolicyLayout::new(scheme, &bank, gate_input, arch), &mut rng);
        let cfg = LossConfig {
            lambda_lbl: if gated { rng.random_range(0.0..0.5) } else { 0.0 },
            lambda_aff: if gated { rng.random_range(0.0..0.5) } else { 0.0 },
            lbl_variant: if rng.random_bool(0.5) {
                LblVariant::BatchMean
            } else {
                LblVariant::PerExample
            },
            detach_branches: rng.random_bool(0.5),
        };
        let affinity = random_affinity(bank.names(), &mut rng);
        let batch = rng.random_range(2..6);
        let reps: Vec<RepresentationSet> = (0..batch)
            .map(|_| RepresentationSet {
                features: bank
                    .dims()
                    .iter()
                    .map(|&d| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                    .collect(),
                raw_obs: (0..bank.raw_dim()).map(|_| rng.random_range(0.0..1.0)).collect(),
                target: ObjectClass::ALL[rng.random_range(0..4)],
            })
            .collect();
        let samples: Vec<_> = reps
            .iter()
            .map(|r| (r, Action::ALL[rng.random_range(0..Action::COUNT)]))
            .collect();
        let report = check_total_loss_gradient(&policy, &samples, Some(&affinity), &cfg)?;
        out.push(GradcheckCase {
            index,
            scheme,
            gate_input,
            lambda_lbl: cfg.lambda_lbl,
            lambda_aff: cfg.lambda_aff,
            lbl_variant: cfg.lbl_variant,
            detach_branches: cfg.detach_branches,
            batch,
            params: policy.param_count(),
            max_rel_err: report.max_rel_err,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_few_cases_pass() {
        let cases = run_gradcheck(4, 11).unwrap();
        assert_eq!(cases.len(), 4);
        for c in &cases {
            assert!(c.passed(), "{c:?}");
        }
    }
}
