use sitfuse::eval::{evaluate, robustness_drop, DropMode, EvalConfig, OracleController, PolicyController, StartSet};
use sitfuse::fusion::{FusionPolicy, Scheme};
use sitfuse::gridworld::{generate_environment, GenParams, StartBand};
use sitfuse::percept::{register_default_bank, Bank, PerceptParams};
use sitfuse::train::{build_dataset, estimate_bank_affinity, train_policy, Split, TrainConfig};
use sitfuse::World;

fn worlds(offset: u64, count: u64) -> Vec<World> {
    let params = GenParams {
        width: 28,
        height: 28,
        rooms: 4,
        room_min: 5,
        room_max: 9,
        ..GenParams::default()
    };
    (offset..offset + count)
        .map(|s| World::new(format!("env-{s}"), generate_environment(s, &params).unwrap(), 1))
        .collect()
}

fn bank() -> Bank {
    register_default_bank(&PerceptParams::default()).unwrap()
}

fn eval_cfg() -> EvalConfig {
    EvalConfig {
        max_steps: 30,
        episodes_per_task: 8,
        band: StartBand { min: 3, max: 12 },
        seed: 4,
        record_gates: false,
    }
}

#[test]
fn trained_policy_beats_nothing_and_survives_a_checkpoint() {
    let (train, test) = (worlds(0, 5), worlds(100, 2));
    let bank = bank();
    let data = build_dataset(&train, &bank, 96, Split::Train, 1).unwrap();
    assert_eq!(data.len(), 480);
    assert_eq!(data.verify_labels(&train).unwrap(), 0);
    let aff = estimate_bank_affinity(&train, &bank, 400, 1e-3, 2).unwrap();
    let cfg = TrainConfig {
        iterations: 150,
        batch_size: 32,
        milestones: vec![100],
        lambda_aff: 0.1,
        lambda_lbl: 0.1,
        ..TrainConfig::default()
    };
    let out = train_policy(&data, &bank, &cfg, Some(&aff.matrix)).unwrap();
    let first = &out.curve.first().unwrap().loss;
    let last = &out.curve.last().unwrap().loss;
    assert!(last.ce_fused < first.ce_fused, "{first:?} -> {last:?}");

    let dir = tempfile::tempdir().unwrap();
    out.save(dir.path(), Default::default()).unwrap();
    let (loaded, _) = FusionPolicy::load(dir.path()).unwrap();
    assert_eq!(loaded.flat_params(), out.policy.flat_params());

    let ecfg = eval_cfg();
    let starts = StartSet::sample(&test, &ecfg).unwrap();
    let a = evaluate(&PolicyController(&out.policy), &test, &bank, &starts, &ecfg).unwrap();
    let b = evaluate(&PolicyController(&loaded), &test, &bank, &starts, &ecfg).unwrap();
    assert_eq!(a, b);
    let k0 = robustness_drop(&loaded, 0, DropMode::Renormalize, &test, &bank, &starts, &ecfg).unwrap();
    assert_eq!(k0.rate, a.average);
}

#[test]
fn oracle_is_perfect_on_fresh_environments() {
    let test = worlds(500, 4);
    let ecfg = eval_cfg();
    let starts = StartSet::sample(&test, &ecfg).unwrap();
    let r = evaluate(&OracleController, &test, &bank(), &starts, &ecfg).unwrap();
    assert_eq!(r.average, 1.0);
    assert_eq!(r.episodes, 32);
}

#[test]
fn every_scheme_trains_on_the_same_dataset() {
    let train = worlds(20, 3);
    let bank = bank();
    let data = build_dataset(&train, &bank, 64, Split::Train, 3).unwrap();
    for scheme in Scheme::ALL {
        let cfg = TrainConfig {
            scheme,
            iterations: 20,
            batch_size: 16,
            milestones: vec![],
            ..TrainConfig::default()
        };
        let out = train_policy(&data, &bank, &cfg, None).unwrap();
        assert_eq!(out.policy.scheme(), scheme);
        assert!(out.curve.iter().all(|p| p.loss.total.is_finite()));
    }
}
