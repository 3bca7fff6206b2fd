//! Training objectives: imitation cross-entropy, the coefficient-of-variation
//! load-balancing penalty, the bilinear affinity penalty `gᵀFg`, and
//! empirical estimation of the affinity matrix `F`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionPolicy, GateOutput, Scheme, TASK_DIM};
use crate::gridworld::Action;
use crate::numcore::{cross_entropy_logits, softmax_backward, ForwardCache, GradCheckReport, PROB_FLOOR};
use crate::percept::RepresentationSet;

/// Pairwise representation affinity, symmetric with unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AffinityDocument", into = "AffinityDocument")]
pub struct AffinityMatrix {
    names: Vec<String>,
    n: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct AffinityDocument {
    names: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl TryFrom<AffinityDocument> for AffinityMatrix {
    type Error = Error;

    fn try_from(doc: AffinityDocument) -> Result<Self> {
        AffinityMatrix::new(doc.names, doc.values)
    }
}

impl From<AffinityMatrix> for AffinityDocument {
    fn from(m: AffinityMatrix) -> Self {
        AffinityDocument {
            values: m.values.chunks(m.n).map(<[f64]>::to_vec).collect(),
            names: m.names,
        }
    }
}

impl AffinityMatrix {
    pub fn new(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = names.len();
        let bad = |m: String| Err(Error::Config(format!("affinity matrix: {m}")));
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return bad(format!("expected {n}x{n} values"));
        }
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return bad(format!("entry ({i}, {j}) = {v} outside [0, 1]"));
                }
                if (v - rows[j][i]).abs() > 1e-9 {
                    return bad(format!("not symmetric at ({i}, {j})"));
                }
            }
            if row[i] != 1.0 {
                return bad(format!("diagonal entry {i} is {} instead of 1", row[i]));
            }
        }
        Ok(AffinityMatrix {
            names,
            n,
            values: rows.into_iter().flatten().collect(),
        })
    }

    pub fn identity(names: Vec<String>) -> Self {
        let n = names.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        AffinityMatrix { names, n, values }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

/// `gᵀFg` and its gradient `(F + Fᵀ)g`.
pub fn affinity_loss(g: &[f64], f: &AffinityMatrix) -> Result<(f64, Vec<f64>)> {
    if g.len() != f.len() {
        return Err(Error::Dimension {
            expected: f.len(),
            got: g.len(),
        });
    }
    let n = g.len();
    let fg: Vec<f64> = (0..n)
        .map(|i| f.row(i).iter().zip(g).map(|(a, b)| a * b).sum())
        .collect();
    let loss = g.iter().zip(&fg).map(|(a, b)| a * b).sum();
    let grad = (0..n)
        .map(|i| fg[i] + (0..n).map(|j| f.get(j, i) * g[j]).sum::<f64>())
        .collect();
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LblVariant {
    /// CV of the per-branch gate weight averaged over the batch.
    #[default]
    BatchMean,
    /// Mean over samples of the CV of each gate vector.
    PerExample,
}

/// Coefficient of variation (population std / mean) of `v` and its gradient.
fn cv_with_grad(v: &[f64]) -> (f64, Vec<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let cv = std / mean;
    if std == 0.0 {
        return (0.0, vec![0.0; v.len()]);
    }
    let grad = v
        .iter()
        .map(|x| (x - mean) / (n * std * mean) - cv / (n * mean))
        .collect();
    (cv, grad)
}

/// Load-balancing penalty over a batch of gate vectors, with the gradient
/// for every gate entry.
pub fn load_balance_loss(gates: &[Vec<f64>], variant: LblVariant) -> Result<(f64, Vec<Vec<f64>>)> {
    let b = gates.len();
    if b == 0 {
        return Err(Error::InvalidParams("load balancing needs a non-empty batch".into()));
    }
    let n = gates[0].len();
    match variant {
        LblVariant::BatchMean => {
            let mut means = vec![0.0; n];
            for g in gates {
                for (m, w) in means.iter_mut().zip(g) {
                    *m += w / b as f64;
                }
            }
            let (cv, dm) = cv_with_grad(&means);
            let per: Vec<f64> = dm.iter().map(|d| d / b as f64).collect();
            Ok((cv, vec![per; b]))
        }
        LblVariant::PerExample => {
            let mut total = 0.0;
            let mut grads = Vec::with_capacity(b);
            for g in gates {
                let (cv, d) = cv_with_grad(g);
                total += cv / b as f64;
                grads.push(d.into_iter().map(|x| x / b as f64).collect());
            }
            Ok((total, grads))
        }
    }
}

/// Result of [`estimate_affinity`].
#[derive(Debug, Clone)]
pub struct AffinityEstimate {
    pub matrix: AffinityMatrix,
    /// Representations found to be constant over the sample.
    pub degenerate: Vec<String>,
}

/// Estimates `F` from sampled representations: for each ordered pair, the
/// in-sample explained-variance ratio of a ridge regression from `i` to `j`,
/// clipped to `[0, 1]`, then symmetrised with the diagonal set to 1.
pub fn estimate_affinity(names: &[String], samples: &[&RepresentationSet], ridge: f64) -> Result<AffinityEstimate> {
    let n = names.len();
    if samples.is_empty() {
        return Err(Error::InvalidParams("affinity estimation needs samples".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.len() != n) {
        return Err(Error::Dimension {
            expected: n,
            got: s.len(),
        });
    }
    let centered: Vec<Matrix> = (0..n)
        .map(|i| Matrix::centered(samples.iter().map(|s| s.features[i].as_slice())))
        .collect();
    let degenerate: Vec<usize> = (0..n).filter(|&i| centered[i].total_ss() <= 1e-12).collect();
    for &i in &degenerate {
        log::warn!(
            "representation `{}` is constant over the sample; its affinities are set to 0",
            names[i]
        );
    }
    let mut raw = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j || degenerate.contains(&i) || degenerate.contains(&j) {
                continue;
            }
            raw[i][j] = explained_variance(&centered[i], &centered[j], ridge).clamp(0.0, 1.0);
        }
    }
    let mut rows = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            rows[i][j] = if i == j { 1.0 } else { 0.5 * (raw[i][j] + raw[j][i]) };
        }
    }
    Ok(AffinityEstimate {
        matrix: AffinityMatrix::new(names.to_vec(), rows)?,
        degenerate: degenerate.into_iter().map(|i| names[i].clone()).collect(),
    })
}

/// Dense row-major sample matrix.
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    fn centered<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Matrix {
        let mut data = Vec::new();
        let mut count = 0;
        let mut cols = 0;
        for r in rows {
            cols = r.len();
            data.extend_from_slice(r);
            count += 1;
        }
        for c in 0..cols {
            let mean = (0..count).map(|r| data[r * cols + c]).sum::<f64>() / count as f64;
            for r in 0..count {
                data[r * cols + c] -= mean;
            }
        }
        Matrix {
            rows: count,
            cols,
            data,
        }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn total_ss(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// `selfᵀ other`.
    fn t_mul(&self, other: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; self.cols * other.cols];
        for r in 0..self.rows {
            let (a, b) = (self.row(r), other.row(r));
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                for (j, &bj) in b.iter().enumerate() {
                    out[i * other.cols + j] += ai * bj;
                }
            }
        }
        out
    }
}

fn explained_variance(x: &Matrix, y: &Matrix, ridge: f64) -> f64 {
    let p = x.cols;
    let mut gram = x.t_mul(x);
    let trace: f64 = (0..p).map(|i| gram[i * p + i]).sum();
    let alpha = ridge * trace / p as f64 + 1e-12;
    for i in 0..p {
        gram[i * p + i] += alpha;
    }
    let xty = x.t_mul(y);
    let Some(l) = cholesky(&gram, p) else {
        return 0.0;
    };
    // Solve (XᵀX + αI) B = XᵀY column by column.
    let q = y.cols;
    let mut coef = vec![0.0; p * q];
    let mut col = vec![0.0; p];
    for j in 0..q {
        for i in 0..p {
            col[i] = xty[i * q + j];
        }
        let sol = cholesky_solve(&l, p, &col);
        for i in 0..p {
            coef[i * q + j] = sol[i];
        }
    }
    let mut ss_res = 0.0;
    for r in 0..x.rows {
        let (xr, yr) = (x.row(r), y.row(r));
        for j in 0..q {
            let pred: f64 = (0..p).map(|i| xr[i] * coef[i * q + j]).sum();
            ss_res += (yr[j] - pred).powi(2);
        }
    }
    1.0 - ss_res / y.total_ss()
}

fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>()) / l[i * n + i];
    }
    x
}

/// Regularizer weights and gradient-routing options for [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_lbl: f64,
    pub lambda_aff: f64,
    pub lbl_variant: LblVariant,
    /// When true the fused cross-entropy trains only the gate; branches learn
    /// from their own cross-entropy alone.
    pub detach_branches: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_lbl: 0.0,
            lambda_aff: 0.0,
            lbl_variant: LblVariant::BatchMean,
            detach_branches: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, scheme: Scheme, affinity: Option<&AffinityMatrix>) -> Result<()> {
        if !(self.lambda_lbl >= 0.0 && self.lambda_aff >= 0.0) {
            return Err(Error::Config("regularizer weights must be non-negative".into()));
        }
        if !scheme.uses_gate() && (self.lambda_lbl != 0.0 || self.lambda_aff != 0.0) {
            return Err(Error::Config(format!(
                "scheme {scheme} has no gate; lambda_lbl and lambda_aff must be 0"
            )));
        }
        if self.lambda_aff != 0.0 && affinity.is_none() {
            return Err(Error::Config("lambda_aff > 0 needs an affinity matrix".into()));
        }
        Ok(())
    }
}

/// Per-term values of the composite objective (batch means).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Cross-entropy of the scheme's final action distribution.
    pub ce_fused: f64,
    /// Per-branch cross-entropy (action fusion only).
    pub ce_branches: Vec<f64>,
    pub lbl: f64,
    pub affinity: f64,
    pub total: f64,
    pub lambda_lbl: f64,
    pub lambda_aff: f64,
}

impl LossBreakdown {
    pub fn ce_terms(&self) -> f64 {
        self.ce_fused + self.ce_branches.iter().sum::<f64>()
    }

    pub fn mean_ce_branch(&self) -> f64 {
        if self.ce_branches.is_empty() {
            0.0
        } else {
            self.ce_branches.iter().sum::<f64>() / self.ce_branches.len() as f64
        }
    }
}

pub type Sample<'a> = (&'a RepresentationSet, Action);

/// Computes the composite objective on a batch and leaves its gradient in
/// the policy's gradient buffers (which are zeroed first).
///
/// `total = ce_fused + Σ ce_branches + λ_lbl·lbl + λ_aff·affinity`.
pub fn total_loss(
    policy: &mut FusionPolicy,
    batch: &[Sample<'_>],
    affinity: Option<&AffinityMatrix>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::InvalidParams("empty batch".into()));
    }
    cfg.validate(policy.scheme(), affinity)?;
    policy.zero_grad();
    let inv_b = 1.0 / batch.len() as f64;
    let scheme = policy.scheme();
    let n = policy.n();

    let mut out = LossBreakdown {
        ce_fused: 0.0,
        ce_branches: if scheme == Scheme::ActionFusion {
            vec![0.0; n]
        } else {
            Vec::new()
        },
        lbl: 0.0,
        affinity: 0.0,
        total: 0.0,
        lambda_lbl: cfg.lambda_lbl,
        lambda_aff: cfg.lambda_aff,
    };

    if !scheme.uses_gate() {
        for (reps, label) in batch {
            let x = match scheme {
                Scheme::Concat => policy.concat_input(reps),
                _ => policy.blackbox_input(reps),
            };
            let head = policy.head.as_mut().expect("gateless schemes have a head");
            let cache = head.forward(&x)?;
            let (ce, _, g) = cross_entropy_logits(cache.output(), label.index());
            out.ce_fused += ce * inv_b;
            head.backward(&cache, &scale(&g, inv_b));
        }
        out.total = out.ce_fused;
        return Ok(out);
    }

    // Gate forward for the whole batch; the regularizers couple samples.
    let mut gate_caches: Vec<ForwardCache> = Vec::with_capacity(batch.len());
    let mut gates: Vec<GateOutput> = Vec::with_capacity(batch.len());
    {
        let gate = policy.gate.as_ref().expect("gated scheme");
        for (reps, _) in batch {
            let cache = gate.forward(&policy.gate_input(reps))?;
            gates.push(GateOutput::from_scores(cache.output().to_vec()));
            gate_caches.push(cache);
        }
    }
    let mut dg: Vec<Vec<f64>> = vec![vec![0.0; n]; batch.len()];

    if cfg.lambda_lbl != 0.0 {
        let gs: Vec<Vec<f64>> = gates.iter().map(|g| g.g.clone()).collect();
        let (lbl, grads) = load_balance_loss(&gs, cfg.lbl_variant)?;
        out.lbl = lbl;
        for (d, gr) in dg.iter_mut().zip(grads) {
            for (a, b) in d.iter_mut().zip(gr) {
                *a += cfg.lambda_lbl * b;
            }
        }
    }
    if let (Some(f), true) = (affinity, cfg.lambda_aff != 0.0) {
        for (d, g) in dg.iter_mut().zip(&gates) {
            let (l, gr) = affinity_loss(&g.g, f)?;
            out.affinity += l * inv_b;
            for (a, b) in d.iter_mut().zip(gr) {
                *a += cfg.lambda_aff * inv_b * b;
            }
        }
    }

    for (s, (reps, label)) in batch.iter().enumerate() {
        let y = label.index();
        let g = &gates[s].g;
        match scheme {
            Scheme::ActionFusion => {
                let mut probs = Vec::with_capacity(n);
                let mut caches = Vec::with_capacity(n);
                for i in 0..n {
                    let x = policy.branch_input(i, reps);
                    let cache = policy.branches[i].forward(&x)?;
                    let (ce, p, grad) = cross_entropy_logits(cache.output(), y);
                    out.ce_branches[i] += ce * inv_b;
                    policy.branches[i].backward(&cache, &scale(&grad, inv_b));
                    probs.push(p);
                    caches.push(cache);
                }
                let mixed: f64 = g.iter().zip(&probs).map(|(w, p)| w * p[y]).sum();
                out.ce_fused -= mixed.max(PROB_FLOOR).ln() * inv_b;
                if mixed > PROB_FLOOR {
                    for i in 0..n {
                        dg[s][i] -= probs[i][y] / mixed * inv_b;
                    }
                    if !cfg.detach_branches {
                        for i in 0..n {
                            let mut dp = vec![0.0; probs[i].len()];
                            dp[y] = -g[i] / mixed * inv_b;
                            let dz = softmax_backward(&probs[i], &dp);
                            policy.branches[i].backward(&caches[i], &dz);
                        }
                    }
                }
            }
            Scheme::FeatureFusion => {
                let mut x = crate::fusion::fuse_features(&gates[s], reps)?;
                x.extend_from_slice(&reps.task());
                let head = policy.head.as_mut().expect("feature fusion has a head");
                let cache = head.forward(&x)?;
                let (ce, _, grad) = cross_entropy_logits(cache.output(), y);
                out.ce_fused += ce * inv_b;
                let gx = head.backward(&cache, &scale(&grad, inv_b));
                let mut at = 0;
                for (i, r) in reps.features.iter().enumerate() {
                    dg[s][i] += r.iter().zip(&gx[at..at + r.len()]).map(|(a, b)| a * b).sum::<f64>();
                    at += r.len();
                }
                debug_assert_eq!(at + TASK_DIM, gx.len());
            }
            _ => unreachable!(),
        }
    }

    let gate = policy.gate.as_mut().expect("gated scheme");
    for ((cache, g), d) in gate_caches.iter().zip(&gates).zip(&dg) {
        let dh = softmax_backward(&g.g, d);
        gate.backward(cache, &dh);
    }

    out.total = out.ce_terms() + cfg.lambda_lbl * out.lbl + cfg.lambda_aff * out.affinity;
    Ok(out)
}

fn scale(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

/// Finite-difference check of [`total_loss`]'s gradient over every policy
/// parameter.
///
/// With detached branches, branch parameters follow `total - ce_fused` (the
/// objective they actually receive) and all other parameters follow `total`.
pub fn check_total_loss_gradient(
    policy: &FusionPolicy,
    batch: &[Sample<'_>],
    affinity: Option<&AffinityMatrix>,
    cfg: &LossConfig,
) -> Result<GradCheckReport> {
    let mut work = policy.clone();
    total_loss(&mut work, batch, affinity, cfg)?;
    let analytic = work.flat_grads();
    let params = policy.flat_params();
    let branch_params: usize = policy.branches.iter().map(|b| b.param_count()).sum();
    let detached = cfg.detach_branches && policy.scheme() == Scheme::ActionFusion;
    let mut probe = policy.clone();
    let mut failure = None;
    let report = crate::numcore::grad_check_with(
        |p, i| {
            probe.set_flat_params(p).expect("same layout");
            match total_loss(&mut probe, batch, affinity, cfg) {
                Ok(b) if detached && i < branch_params => b.total - b.ce_fused,
                Ok(b) => b.total,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &params,
        &analytic,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
