//! Blockwise permutation nulls, FDR adjustment, PC spatial-correlation tests
//! and paired t-tests.

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{arg_err, Error, Result};
use crate::pca::{collapse_beta, project_weights_raw, PcaBasis};
use crate::ridge::{pearson, prepare_fit, stack_responses, SvdBasis};
use crate::rng::{purpose, substream};
use crate::types::{DesignMatrix, ResponseMatrix, ScoreKind, ScoreMap};

/// Attempts per null refit before the trial is abandoned.
const MAX_REFIT_ATTEMPTS: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdrMethod {
    /// Benjamini-Hochberg step-up.
    #[default]
    Bh,
    /// Benjamini-Yekutieli, valid under arbitrary dependence.
    By,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermConfig {
    #[serde(default = "default_block")]
    pub block_trs: usize,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_q")]
    pub fdr_q: f64,
    #[serde(default)]
    pub fdr_method: FdrMethod,
}

fn default_block() -> usize {
    10
}

fn default_trials() -> usize {
    10_000
}

fn default_q() -> f64 {
    0.05
}

impl Default for PermConfig {
    fn default() -> Self {
        PermConfig {
            block_trs: default_block(),
            n_trials: default_trials(),
            seed: 0,
            fdr_q: default_q(),
            fdr_method: FdrMethod::Bh,
        }
    }
}

impl PermConfig {
    /// Defaults for the PC spatial-correlation test.
    pub fn for_pc_test() -> Self {
        PermConfig {
            n_trials: 1000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_trs == 0 {
            return Err(arg_err!("block_trs must be at least 1"));
        }
        if self.n_trials < 100 {
            return Err(arg_err!("n_trials must be at least 100, got {}", self.n_trials));
        }
        if !(self.fdr_q > 0.0 && self.fdr_q < 1.0) {
            return Err(arg_err!("fdr_q must lie in (0, 1), got {}", self.fdr_q));
        }
        Ok(())
    }
}

/// Row indices of `ceil(n / block)` blocks with uniform starts in `[0, n - block]`,
/// truncated to `n`.
pub fn block_indices<R: Rng>(n: usize, block: usize, rng: &mut R) -> Vec<usize> {
    let n_blocks = n.div_ceil(block);
    let mut idx = Vec::with_capacity(n_blocks * block);
    for _ in 0..n_blocks {
        let start = rng.random_range(0..=n - block);
        idx.extend(start..start + block);
    }
    idx.truncate(n);
    idx
}

/// Centered prediction columns; `None` marks a constant prediction.
fn centered_predictions(pred: &DMatrix<f64>) -> Vec<Option<(Vec<f64>, f64)>> {
    let n = pred.nrows() as f64;
    pred.column_iter()
        .map(|col| {
            let mean = col.sum() / n;
            let c: Vec<f64> = col.iter().map(|v| v - mean).collect();
            let ss: f64 = c.iter().map(|v| v * v).sum();
            let sd = (ss / n).sqrt();
            if sd == 0.0 || sd <= 1e-10 * mean.abs() {
                None
            } else {
                Some((c, ss.sqrt()))
            }
        })
        .collect()
}

fn resampled_correlation(pc: &[f64], pc_norm: f64, actual: &[f64], idx: &[usize]) -> f64 {
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&t| actual[t]).sum::<f64>() / n;
    let (mut sxy, mut syy) = (0.0, 0.0);
    for (p, &t) in pc.iter().zip(idx) {
        let d = actual[t] - mean;
        sxy += p * d;
        syy += d * d;
    }
    let sd = (syy / n).sqrt();
    if sd == 0.0 || sd <= 1e-10 * mean.abs() {
        return f64::NAN;
    }
    (sxy / (pc_norm * syy.sqrt())).clamp(-1.0, 1.0)
}

/// Null correlations (`n_trials x m`) of a fixed prediction against
/// block-resampled responses.
pub fn blockwise_null_scores(pred: &DMatrix<f64>, actual: &DMatrix<f64>, cfg: &PermConfig) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    if pred.shape() != actual.shape() {
        return Err(arg_err!(
            "prediction {:?} and response {:?} shapes differ",
            pred.shape(),
            actual.shape()
        ));
    }
    let (t, m) = pred.shape();
    if t < 2 * cfg.block_trs {
        return Err(arg_err!(
            "{t} time points is too short for {}-TR blocks (need {})",
            cfg.block_trs,
            2 * cfg.block_trs
        ));
    }
    let centered = centered_predictions(pred);
    let rows: Vec<Vec<f64>> = (0..cfg.n_trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = substream(cfg.seed, purpose::VOXEL_NULL, trial as u64);
            let idx = block_indices(t, cfg.block_trs, &mut rng);
            (0..m)
                .map(|v| match &centered[v] {
                    Some((pc, norm)) => resampled_correlation(pc, *norm, actual.column(v).as_slice(), &idx),
                    None => f64::NAN,
                })
                .collect()
        })
        .collect();
    Ok(DMatrix::from_fn(cfg.n_trials, m, |i, j| rows[i][j]))
}

/// Add-one one-sided p-value; NaN null draws are ignored.
pub fn permutation_p(observed: f64, null: impl Iterator<Item = f64>) -> f64 {
    if observed.is_nan() {
        return f64::NAN;
    }
    let (mut n, mut hits) = (0usize, 0usize);
    for v in null.filter(|v| !v.is_nan()) {
        n += 1;
        if v >= observed {
            hits += 1;
        }
    }
    (1 + hits) as f64 / (1 + n) as f64
}

/// FDR-adjusted q-values (step-up, monotone, capped at 1).
pub fn fdr_adjust(p: &[f64], method: FdrMethod) -> Result<Vec<f64>> {
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(arg_err!("p-value {bad} outside [0, 1]"));
    }
    let m = p.len();
    let c = match method {
        FdrMethod::Bh => 1.0,
        FdrMethod::By => (1..=m).map(|i| 1.0 / i as f64).sum(),
    };
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut q = vec![0.0; m];
    let mut running = f64::INFINITY;
    for (rank0, &i) in order.iter().enumerate().rev() {
        let candidate = p[i] * (c * m as f64 / (rank0 + 1) as f64);
        running = running.min(candidate);
        q[i] = running.min(1.0);
    }
    Ok(q)
}

/// Benjamini-Hochberg q-values.
pub fn bh_fdr(p: &[f64]) -> Result<Vec<f64>> {
    fdr_adjust(p, FdrMethod::Bh)
}

/// FDR adjustment that leaves NaN entries NaN and excludes them from the family.
fn fdr_skip_nan(p: &[f64], method: FdrMethod) -> Result<Vec<f64>> {
    let keep: Vec<usize> = (0..p.len()).filter(|&i| !p[i].is_nan()).collect();
    let sub: Vec<f64> = keep.iter().map(|&i| p[i]).collect();
    let q_sub = fdr_adjust(&sub, method)?;
    let mut q = vec![f64::NAN; p.len()];
    for (&i, v) in keep.iter().zip(q_sub) {
        q[i] = v;
    }
    Ok(q)
}

#[derive(Debug, Clone)]
pub struct Significance {
    pub p: ScoreMap,
    pub q: ScoreMap,
    pub reject: Vec<bool>,
}

impl Significance {
    pub fn n_rejected(&self) -> usize {
        self.reject.iter().filter(|&&r| r).count()
    }
}

/// Per-voxel permutation p-values, q-values and the `q < fdr_q` mask.
pub fn voxel_significance(observed: &ScoreMap, null: &DMatrix<f64>, cfg: &PermConfig) -> Result<Significance> {
    if null.ncols() != observed.len() {
        return Err(arg_err!(
            "null has {} voxels, scores have {}",
            null.ncols(),
            observed.len()
        ));
    }
    let p: Vec<f64> = observed
        .values
        .iter()
        .zip(null.column_iter())
        .map(|(&o, col)| permutation_p(o, col.iter().copied()))
        .collect();
    let q = fdr_skip_nan(&p, cfg.fdr_method)?;
    let reject = q.iter().map(|&v| v < cfg.fdr_q).collect();
    Ok(Significance {
        p: ScoreMap::new(p, ScoreKind::PValue, observed.source.clone()),
        q: ScoreMap::new(q, ScoreKind::QValue, observed.source.clone()),
        reject,
    })
}

/// Vision scans refitted under each null trial, with regularization held fixed.
#[derive(Debug, Clone, Copy)]
pub struct VisionRefit<'a> {
    pub designs: &'a [DesignMatrix],
    pub responses: &'a [ResponseMatrix],
    /// Per-voxel regularization of the original vision fit, reused in every refit.
    pub lambda_per_voxel: &'a [f64],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcTestResult {
    pub components: Vec<usize>,
    pub correlation: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub reject: Vec<bool>,
    pub n_voxels: usize,
}

struct NullRefit<'a> {
    basis: SvdBasis,
    feature_scales: Vec<f64>,
    dropped: Vec<usize>,
    n_delays: usize,
    lambdas: Vec<f64>,
    /// Response columns restricted to the voxel set, one matrix per scan.
    scans: Vec<DMatrix<f64>>,
    pca: &'a PcaBasis,
    components: &'a [usize],
}

impl NullRefit<'_> {
    /// Vision-weight projections (`components x voxels`) for the given row orders.
    fn projections(&self, row_orders: Option<&[Vec<usize>]>) -> Result<Vec<Vec<f64>>> {
        let resampled: Vec<DMatrix<f64>> = match row_orders {
            None => self.scans.clone(),
            Some(orders) => self
                .scans
                .iter()
                .zip(orders)
                .map(|(s, idx)| s.select_rows(idx))
                .collect(),
        };
        let refs: Vec<&DMatrix<f64>> = resampled.iter().collect();
        let (y, _, _) = stack_responses(&refs);
        let uty = self.basis.project(&y);
        let mut beta = self.basis.weights_per_voxel(&uty, &self.lambdas);
        for &j in &self.dropped {
            beta.row_mut(j).fill(0.0);
        }
        for (j, mut row) in beta.row_iter_mut().enumerate() {
            row /= self.feature_scales[j];
        }
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("null refit produced non-finite weights".into()));
        }
        let collapsed = collapse_beta(&beta, self.n_delays)?;
        self.components
            .iter()
            .map(|&c| project_weights_raw(&collapsed, self.pca, c))
            .collect()
    }
}

/// Spatial correlation, over `voxel_set`, between language- and vision-weight
/// projections onto each PC, tested against block-resampled vision refits.
///
/// `lang_collapsed` holds delay-collapsed language weights (`k x m`) in the
/// same feature coordinates as the vision designs.
pub fn pc_spatial_corr_test(
    lang_collapsed: &DMatrix<f64>,
    vision: VisionRefit<'_>,
    pca: &PcaBasis,
    components: &[usize],
    voxel_set: &[usize],
    cfg: &PermConfig,
) -> Result<PcTestResult> {
    cfg.validate()?;
    if voxel_set.len() < 2 {
        return Err(arg_err!(
            "spatial correlation needs at least 2 voxels, got {}",
            voxel_set.len()
        ));
    }
    if components.is_empty() {
        return Err(arg_err!("no components to test"));
    }
    let m = lang_collapsed.ncols();
    if let Some(&bad) = voxel_set.iter().find(|&&v| v >= m) {
        return Err(arg_err!("voxel {bad} out of range ({m} voxels)"));
    }
    if vision.lambda_per_voxel.len() != m {
        return Err(arg_err!(
            "{} vision lambdas for {m} voxels",
            vision.lambda_per_voxel.len()
        ));
    }
    for r in vision.responses {
        if r.n_trs() < 2 * cfg.block_trs {
            return Err(arg_err!(
                "scan '{}' has {} TRs, too short for {}-TR blocks",
                r.scan_id,
                r.n_trs(),
                cfg.block_trs
            ));
        }
    }
    let prep = prepare_fit(vision.designs, vision.responses)?;
    let n_delays = vision.designs[0].n_delays();
    if prep.z.ncols() / n_delays != pca.feature_dim() {
        return Err(arg_err!(
            "vision designs have {} features per delay, PCA basis has {}",
            prep.z.ncols() / n_delays,
            pca.feature_dim()
        ));
    }
    let lang_sel = lang_collapsed.select_columns(voxel_set);
    let lang_proj: Vec<Vec<f64>> = components
        .iter()
        .map(|&c| project_weights_raw(&lang_sel, pca, c))
        .collect::<Result<_>>()?;
    let refit = NullRefit {
        basis: SvdBasis::new(&prep.z)?,
        feature_scales: prep.feature_scales,
        dropped: prep.dropped_columns,
        n_delays,
        lambdas: voxel_set.iter().map(|&v| vision.lambda_per_voxel[v]).collect(),
        scans: vision
            .responses
            .iter()
            .map(|r| r.data.select_columns(voxel_set))
            .collect(),
        pca,
        components,
    };
    let correlate = |proj: &[Vec<f64>]| -> Vec<f64> {
        lang_proj.iter().zip(proj).map(|(l, v)| pearson(l, v)).collect()
    };
    let observed = correlate(&refit.projections(None)?);
    let lengths: Vec<usize> = vision.responses.iter().map(|r| r.n_trs()).collect();
    let null: Vec<Vec<f64>> = (0..cfg.n_trials)
        .into_par_iter()
        .map(|trial| {
            let mut last = None;
            for attempt in 0..MAX_REFIT_ATTEMPTS {
                let stream = trial as u64 * MAX_REFIT_ATTEMPTS + attempt;
                let mut rng = substream(cfg.seed, purpose::PC_NULL, stream);
                let orders: Vec<Vec<usize>> = lengths
                    .iter()
                    .map(|&n| block_indices(n, cfg.block_trs, &mut rng))
                    .collect();
                match refit.projections(Some(&orders)) {
                    Ok(proj) => return Ok(correlate(&proj)),
                    Err(e) => {
                        warn!("null trial {trial} attempt {attempt} failed: {e}");
                        last = Some(e);
                    }
                }
            }
            Err(Error::Trial(format!(
                "null trial {trial} failed {MAX_REFIT_ATTEMPTS} times: {}",
                last.map(|e| e.to_string()).unwrap_or_default()
            )))
        })
        .collect::<Result<_>>()?;
    let p: Vec<f64> = (0..components.len())
        .map(|c| permutation_p(observed[c], null.iter().map(|row| row[c])))
        .collect();
    let q = fdr_skip_nan(&p, cfg.fdr_method)?;
    let reject = q.iter().map(|&v| v < cfg.fdr_q).collect();
    Ok(PcTestResult {
        components: components.to_vec(),
        correlation: observed,
        p,
        q,
        reject,
        n_voxels: voxel_set.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub dof: usize,
    pub p: f64,
    pub mean_difference: f64,
    /// The differences have zero spread.
    pub degenerate: bool,
}

/// One-sided paired t-test of `mean(a - b) > 0`.
pub fn paired_t_test_one_sided(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(arg_err!("paired samples have lengths {} and {}", a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(arg_err!("paired t-test needs at least 2 pairs, got {n}"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(arg_err!("paired samples must be finite"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let dof = n - 1;
    if sd == 0.0 || sd <= 1e-14 * mean.abs() {
        let (t, p) = if mean > 0.0 {
            (f64::INFINITY, 0.0)
        } else if mean < 0.0 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (f64::NAN, f64::NAN)
        };
        return Ok(TTest {
            t,
            dof,
            p,
            mean_difference: mean,
            degenerate: true,
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::Data(e.to_string()))?;
    Ok(TTest {
        t,
        dof,
        p: dist.sf(t),
        mean_difference: mean,
        degenerate: false,
    })
}
