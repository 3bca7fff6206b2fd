//! The experiment verbs. Every artifact lands under the config's `out`
//! directory and embeds the config digest and seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sitfuse::eval::{
    gate_analytics, robustness_csv, robustness_curve, run_episodes, BranchExtremes, Controller, EvalReport,
    OracleController, PolicyController, RandomController, RobustnessPoint, StartSet, VoteController, VoteRule,
};
use sitfuse::fusion::{CheckpointMeta, FusionPolicy, Scheme};
use sitfuse::gridworld::{generate_environment, GridMap, World};
use sitfuse::losses::AffinityMatrix;
use sitfuse::percept::Bank;
use sitfuse::seed::{self, streams};
use sitfuse::train::{build_dataset, estimate_bank_affinity, rank_branches, train_policy, Split};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::table::ComparisonTable;

/// Offset separating test-environment generation seeds from training ones.
const TEST_SEED_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub seed: u64,
    pub config_digest: String,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Resolved output locations.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Layout { root: cfg.out.clone() }
    }

    pub fn suite(&self) -> PathBuf {
        self.root.join("suite")
    }

    pub fn affinity(&self) -> PathBuf {
        self.root.join("affinity.json")
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(name)
    }

    pub fn eval(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(format!("{name}.json"))
    }

    pub fn robust(&self, name: &str) -> PathBuf {
        self.root.join("robust").join(format!("{name}.json"))
    }

    pub fn analyze(&self, name: &str) -> PathBuf {
        self.root.join("analyze").join(format!("{name}.json"))
    }
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| sitfuse::Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| sitfuse::Error::io(path, e))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(sitfuse::Error::from)? + "\n";
    write(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, hint: &'static str) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|_| CliError::Missing {
        path: path.to_path_buf(),
        hint,
    })?;
    Ok(serde_json::from_str(&text).map_err(sitfuse::Error::from)?)
}

fn env_id(split: Split, i: usize) -> String {
    match split {
        Split::Train => format!("train-{i:03}"),
        Split::Test => format!("test-{i:03}"),
    }
}

/// Writes the train and test environments plus `manifest.json`.
pub fn cmd_gen(cfg: &ExperimentConfig) -> CliResult<SuiteManifest> {
    let dir = Layout::new(cfg).suite();
    let mut manifest = SuiteManifest {
        seed: cfg.seed,
        config_digest: cfg.digest(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for (split, count, offset) in [
        (Split::Train, cfg.splits.train, 0),
        (Split::Test, cfg.splits.test, TEST_SEED_OFFSET),
    ] {
        for i in 0..count {
            let map_seed = seed::derive(cfg.seed, streams::GENERATION, offset + i as u64);
            let map = generate_environment(map_seed, &cfg.generation)?;
            let id = env_id(split, i);
            write_json(&dir.join(format!("{id}.json")), &map)?;
            match split {
                Split::Train => manifest.train.push(id),
                Split::Test => manifest.test.push(id),
            }
        }
    }
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub struct Suite {
    pub train: Vec<World>,
    pub test: Vec<World>,
}

pub fn load_suite(cfg: &ExperimentConfig) -> CliResult<Suite> {
    let dir = Layout::new(cfg).suite();
    let manifest: SuiteManifest = read_json(&dir.join("manifest.json"), "run `gen` first")?;
    let load = |ids: &[String]| -> CliResult<Vec<World>> {
        ids.iter()
            .map(|id| {
                let map: GridMap = read_json(
                    &dir.join(format!("{id}.json")),
                    "environment file listed in the manifest",
                )?;
                Ok(World::new(id.clone(), map, cfg.goal_radius))
            })
            .collect()
    };
    let suite = Suite {
        train: load(&manifest.train)?,
        test: load(&manifest.test)?,
    };
    let overlap = manifest.train.iter().any(|t| manifest.test.contains(t));
    if overlap {
        return Err(CliError::Runtime("train and test splits share an environment".into()));
    }
    Ok(suite)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityArtifact {
    pub seed: u64,
    pub config_digest: String,
    pub samples: usize,
    pub degenerate: Vec<String>,
    pub matrix: AffinityMatrix,
}

pub fn cmd_affinity(cfg: &ExperimentConfig) -> CliResult<AffinityArtifact> {
    let suite = load_suite(cfg)?;
    let bank = cfg.bank()?;
    let est = estimate_bank_affinity(&suite.train, &bank, cfg.affinity.samples, cfg.affinity.ridge, cfg.seed)?;
    let artifact = AffinityArtifact {
        seed: cfg.seed,
        config_digest: cfg.digest(),
        samples: cfg.affinity.samples,
        degenerate: est.degenerate,
        matrix: est.matrix,
    };
    write_json(&Layout::new(cfg).affinity(), &artifact)?;
    Ok(artifact)
}

/// The configured override matrix, or the estimated one on disk.
pub fn load_affinity(cfg: &ExperimentConfig, bank: &Bank) -> CliResult<AffinityMatrix> {
    let matrix = match &cfg.affinity.path {
        Some(p) => read_json::<AffinityMatrix>(p, "affinity override file")?,
        None => read_json::<AffinityArtifact>(&Layout::new(cfg).affinity(), "run `affinity` first")?.matrix,
    };
    if matrix.names() != bank.names().as_slice() {
        return Err(CliError::Usage("affinity matrix names do not match the bank".into()));
    }
    Ok(matrix)
}

/// Trains the named models (all when empty) and writes their checkpoints.
pub fn cmd_train(cfg: &ExperimentConfig, names: &[String]) -> CliResult<Vec<String>> {
    let names = selected(cfg, names)?;
    let suite = load_suite(cfg)?;
    let bank = cfg.bank()?;
    let data = build_dataset(
        &suite.train,
        &bank,
        cfg.samples_per_env,
        Split::Train,
        seed::derive(cfg.seed, streams::DATASET, 0),
    )?;
    for r in &data.rejected {
        log::warn!("environment {} rejected: missing {:?}", r.env_id, r.missing);
    }
    let layout = Layout::new(cfg);
    for name in &names {
        let tc = cfg.train_config(cfg.model(name)?)?;
        let affinity = if tc.lambda_aff > 0.0 {
            Some(load_affinity(cfg, &bank)?)
        } else {
            None
        };
        log::info!("training {name} ({}, {} iterations)", tc.scheme, tc.iterations);
        let out = train_policy(&data, &bank, &tc, affinity.as_ref())?;
        out.save(
            &layout.model(name),
            CheckpointMeta {
                name: name.clone(),
                seed: cfg.seed,
                iteration: tc.iterations,
                config_digest: cfg.digest(),
            },
        )?;
    }
    Ok(names)
}

fn selected(cfg: &ExperimentConfig, names: &[String]) -> CliResult<Vec<String>> {
    if names.is_empty() {
        return Ok(cfg.models.iter().map(|m| m.name.clone()).collect());
    }
    for n in names {
        cfg.model(n)?;
    }
    Ok(names.to_vec())
}

pub fn load_policy(dir: &Path) -> CliResult<(FusionPolicy, CheckpointMeta)> {
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::Missing {
            path: dir.to_path_buf(),
            hint: "no checkpoint here; run `train` first",
        });
    }
    Ok(FusionPolicy::load(dir)?)
}

fn finish(mut report: EvalReport, name: &str, cfg: &ExperimentConfig) -> EvalReport {
    report.model = name.to_string();
    report.config_digest = cfg.digest();
    report
}

fn evaluate_named(
    cfg: &ExperimentConfig,
    name: &str,
    ctl: &dyn Controller,
    suite: &Suite,
    bank: &Bank,
    starts: &StartSet,
) -> CliResult<EvalReport> {
    let episodes = run_episodes(ctl, &suite.test, bank, starts, &cfg.eval)?;
    let report = finish(EvalReport::from_episodes(name, &episodes, cfg.seed), name, cfg);
    let layout = Layout::new(cfg);
    write_json(&layout.eval(name), &report)?;
    write(&layout.eval(name).with_extension("csv"), &report.to_csv())?;
    Ok(report)
}

/// Which controllers `eval` runs.
pub enum EvalTarget {
    /// Every configured model plus the random, oracle and voting baselines.
    All,
    Models(Vec<String>),
    /// An explicit checkpoint directory, reported under its stored name.
    Checkpoint(PathBuf),
}

pub fn cmd_eval(cfg: &ExperimentConfig, target: EvalTarget) -> CliResult<Vec<EvalReport>> {
    let suite = load_suite(cfg)?;
    let bank = cfg.bank()?;
    let starts = StartSet::sample(&suite.test, &cfg.eval)?;
    let layout = Layout::new(cfg);
    let mut reports = Vec::new();
    match target {
        EvalTarget::Checkpoint(dir) => {
            let (policy, meta) = load_policy(&dir)?;
            let name = if meta.name.is_empty() {
                "checkpoint".to_string()
            } else {
                meta.name
            };
            reports.push(evaluate_named(
                cfg,
                &name,
                &PolicyController(&policy),
                &suite,
                &bank,
                &starts,
            )?);
        }
        EvalTarget::Models(names) => {
            for name in selected(cfg, &names)? {
                let (policy, _) = load_policy(&layout.model(&name))?;
                reports.push(evaluate_named(
                    cfg,
                    &name,
                    &PolicyController(&policy),
                    &suite,
                    &bank,
                    &starts,
                )?);
            }
        }
        EvalTarget::All => {
            reports.push(evaluate_named(
                cfg,
                "random",
                &RandomController,
                &suite,
                &bank,
                &starts,
            )?);
            reports.push(evaluate_named(
                cfg,
                "oracle",
                &OracleController,
                &suite,
                &bank,
                &starts,
            )?);
            for name in selected(cfg, &[])? {
                let (policy, _) = load_policy(&layout.model(&name))?;
                reports.push(evaluate_named(
                    cfg,
                    &name,
                    &PolicyController(&policy),
                    &suite,
                    &bank,
                    &starts,
                )?);
            }
            if let Some(v) = &cfg.vote_model {
                let (policy, _) = load_policy(&layout.model(v))?;
                if policy.scheme() != Scheme::ActionFusion {
                    return Err(CliError::Usage(format!(
                        "vote_model `{v}` is not an action-fusion model"
                    )));
                }
                let maj = VoteController::new(&policy, VoteRule::Majority)?;
                reports.push(evaluate_named(
                    cfg,
                    &format!("{v}+majority"),
                    &maj,
                    &suite,
                    &bank,
                    &starts,
                )?);
                let mix = VoteController::new(&policy, VoteRule::UniformMix)?;
                reports.push(evaluate_named(
                    cfg,
                    &format!("{v}+uniform"),
                    &mix,
                    &suite,
                    &bank,
                    &starts,
                )?);
                let train_starts = StartSet::sample(&suite.train, &cfg.eval)?;
                let ranking = rank_branches(&policy, &suite.train, &bank, &train_starts, &cfg.eval)?;
                write_json(&layout.eval(&format!("{v}+ranking")), &ranking)?;
                let rank: Vec<usize> = ranking.iter().map(|r| r.0).collect();
                let top = VoteController::new(&policy, VoteRule::TopK { rank, k: cfg.top_k })?;
                reports.push(evaluate_named(
                    cfg,
                    &format!("{v}+top{}", cfg.top_k),
                    &top,
                    &suite,
                    &bank,
                    &starts,
                )?);
            }
        }
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessArtifact {
    pub model: String,
    pub seed: u64,
    pub config_digest: String,
    pub points: Vec<RobustnessPoint>,
}

pub fn cmd_robust(cfg: &ExperimentConfig, name: &str, checkpoint: Option<&Path>) -> CliResult<RobustnessArtifact> {
    let layout = Layout::new(cfg);
    let dir = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| layout.model(name));
    let (policy, _) = load_policy(&dir)?;
    let suite = load_suite(cfg)?;
    let bank = cfg.bank()?;
    let starts = StartSet::sample(&suite.test, &cfg.eval)?;
    let ks: Vec<usize> = if cfg.robustness.ks.is_empty() {
        (0..policy.n()).collect()
    } else {
        cfg.robustness.ks.clone()
    };
    let mut points = Vec::new();
    for &mode in &cfg.robustness.modes {
        if mode == sitfuse::eval::DropMode::Renormalize && !policy.scheme().uses_gate() {
            log::warn!("{name}: renormalize mode needs a gate, skipped");
            continue;
        }
        points.extend(robustness_curve(
            &policy,
            &ks,
            mode,
            &suite.test,
            &bank,
            &starts,
            &cfg.eval,
        )?);
    }
    let artifact = RobustnessArtifact {
        model: name.to_string(),
        seed: cfg.seed,
        config_digest: cfg.digest(),
        points,
    };
    write_json(&layout.robust(name), &artifact)?;
    write(
        &layout.robust(name).with_extension("csv"),
        &robustness_csv(&artifact.points),
    )?;
    Ok(artifact)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsArtifact {
    pub model: String,
    pub seed: u64,
    pub config_digest: String,
    pub band_counts: [usize; 4],
    pub shares: [[f64; 3]; 4],
    pub domain_mass: [[f64; 3]; 4],
    pub mean_gate: Vec<f64>,
    pub batch_cv: f64,
    pub extremes: Vec<BranchExtremes>,
}

pub fn cmd_analyze(cfg: &ExperimentConfig, name: &str, checkpoint: Option<&Path>) -> CliResult<AnalyticsArtifact> {
    let layout = Layout::new(cfg);
    let dir = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| layout.model(name));
    let (policy, _) = load_policy(&dir)?;
    let suite = load_suite(cfg)?;
    let bank = cfg.bank()?;
    let a = gate_analytics(&policy, &suite.test, &bank, cfg.analytics.samples, cfg.seed)?;
    let csv = a.to_csv();
    let artifact = AnalyticsArtifact {
        model: name.to_string(),
        seed: cfg.seed,
        config_digest: cfg.digest(),
        band_counts: a.band_counts,
        shares: a.shares,
        domain_mass: a.domain_mass,
        mean_gate: a.mean_gate,
        batch_cv: a.batch_cv,
        extremes: a.extremes,
    };
    write_json(&layout.analyze(name), &artifact)?;
    write(&layout.analyze(name).with_extension("csv"), &csv)?;
    Ok(artifact)
}

/// Builds the comparison table from the named reports (every report under
/// `eval/` in config order when empty).
pub fn cmd_table(cfg: &ExperimentConfig, names: &[String]) -> CliResult<ComparisonTable> {
    let layout = Layout::new(cfg);
    let names: Vec<String> = if names.is_empty() {
        let mut v = vec!["random".to_string()];
        v.extend(cfg.models.iter().map(|m| m.name.clone()));
        if let Some(m) = &cfg.vote_model {
            v.push(format!("{m}+majority"));
            v.push(format!("{m}+uniform"));
            v.push(format!("{m}+top{}", cfg.top_k));
        }
        v.into_iter().filter(|n| layout.eval(n).is_file()).collect()
    } else {
        names.to_vec()
    };
    if names.is_empty() {
        return Err(CliError::Missing {
            path: layout.root.join("eval"),
            hint: "no evaluation reports; run `eval` first",
        });
    }
    let reports: Vec<EvalReport> = names
        .iter()
        .map(|n| read_json(&layout.eval(n), "evaluation report"))
        .collect::<CliResult<_>>()?;
    let table = ComparisonTable::from_reports(&reports)?;
    write(&layout.root.join("table.csv"), &table.to_csv())?;
    write(&layout.root.join("table.txt"), &table.to_text())?;
    Ok(table)
}

/// Runs every stage in order: gen, affinity, train, eval, robust, analyze,
/// table.
pub fn run_pipeline(cfg: &ExperimentConfig) -> CliResult<ComparisonTable> {
    cmd_gen(cfg)?;
    cmd_affinity(cfg)?;
    cmd_train(cfg, &[])?;
    cmd_eval(cfg, EvalTarget::All)?;
    let layout = Layout::new(cfg);
    for m in &cfg.models {
        let (policy, _) = load_policy(&layout.model(&m.name))?;
        if policy.scheme().uses_representations() {
            cmd_robust(cfg, &m.name, None)?;
        }
        if policy.scheme().uses_gate() {
            cmd_analyze(cfg, &m.name, None)?;
        }
    }
    cmd_table(cfg, &[])
}
