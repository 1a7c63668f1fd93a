//! Per-voxel ridge regression with cross-validated regularization.
//!
//! A single thin SVD of the design serves every regularization value:
//! `beta(lambda) = V diag(s / (s^2 + lambda)) U^T Y`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::rng::{purpose, substream};
use crate::types::{
    check_finite, common_voxel_count, DesignMatrix, ResponseMatrix, ScoreKind, ScoreMap,
    WeightSet,
};

/// Relative singular-value cutoff used when `lambda == 0`.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RidgeConfig {
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_cv_iters")]
    pub n_cv_iters: usize,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default = "default_chunk")]
    pub cv_chunk_trs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_lambda_grid() -> Vec<f64> {
    logspace(0.0, 5.0, 20)
}

fn default_cv_iters() -> usize {
    50
}

fn default_holdout() -> f64 {
    0.2
}

fn default_chunk() -> usize {
    10
}

impl Default for RidgeConfig {
    fn default() -> Self {
        RidgeConfig {
            lambda_grid: default_lambda_grid(),
            n_cv_iters: default_cv_iters(),
            holdout_fraction: default_holdout(),
            cv_chunk_trs: default_chunk(),
            seed: 0,
        }
    }
}

impl RidgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty() {
            return Err(arg_err!("lambda grid is empty"));
        }
        if self.lambda_grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(arg_err!("lambda grid values must be positive and finite"));
        }
        if self.lambda_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(arg_err!("lambda grid must be sorted ascending"));
        }
        if self.n_cv_iters < 1 {
            return Err(arg_err!("n_cv_iters must be >= 1"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(arg_err!("holdout_fraction must lie in (0, 1)"));
        }
        if self.cv_chunk_trs < 1 {
            return Err(arg_err!("cv_chunk_trs must be >= 1"));
        }
        Ok(())
    }
}

/// `n` values evenly spaced in log10 between `10^lo` and `10^hi`.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![10f64.powf(lo)],
        _ => (0..n)
            .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64))
            .collect(),
    }
}

/// Thin SVD `X = U diag(s) V^T`.
#[derive(Debug, Clone)]
pub struct SvdBasis {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl SvdBasis {
    pub fn new(x: &DMatrix<f64>) -> Result<Self> {
        check_finite(x, "design")?;
        let (n, p) = x.shape();
        if n == 0 || p == 0 {
            return Err(arg_err!("empty design ({n}x{p})"));
        }
        // tall designs: factor the p x p triangle instead of the full matrix
        let (u, s, v) = if n > p {
            let qr = x.clone().qr();
            let svd = qr.r().svd(true, true);
            let u = qr.q() * svd.u.unwrap();
            (u, svd.singular_values, svd.v_t.unwrap().transpose())
        } else {
            let svd = x.clone().svd(true, true);
            (
                svd.u.unwrap(),
                svd.singular_values,
                svd.v_t.unwrap().transpose(),
            )
        };
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("SVD did not converge".into()));
        }
        Ok(SvdBasis { u, s, v })
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U^T Y`.
    pub fn project(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        self.u.tr_mul(y)
    }

    fn shrink(&self, lambda: f64) -> DVector<f64> {
        let smax = self.s.max();
        self.s.map(|s| {
            if lambda == 0.0 {
                if s > RANK_TOL * smax {
                    1.0 / s
                } else {
                    0.0
                }
            } else {
                s / (s * s + lambda)
            }
        })
    }

    /// Ridge weights for one regularization value from precomputed `U^T Y`.
    pub fn weights(&self, uty: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
        let f = self.shrink(lambda);
        let mut scaled = uty.clone();
        for (mut row, fi) in scaled.row_iter_mut().zip(f.iter()) {
            row *= *fi;
        }
        &self.v * scaled
    }

    /// Ridge weights where column `j` uses `lambdas[j]`.
    pub fn weights_per_voxel(&self, uty: &DMatrix<f64>, lambdas: &[f64]) -> DMatrix<f64> {
        let mut scaled = uty.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            let f = self.shrink(lambdas[j]);
            col.component_mul_assign(&f);
        }
        &self.v * scaled
    }
}

/// Ridge solutions `(X^T X + lambda I)^-1 X^T Y` for every `lambda`.
pub fn svd_ridge_solve(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambdas: &[f64],
) -> Result<Vec<DMatrix<f64>>> {
    if x.nrows() != y.nrows() {
        return Err(arg_err!(
            "design has {} rows, responses have {}",
            x.nrows(),
            y.nrows()
        ));
    }
    if x.nrows() < 2 {
        return Err(arg_err!("need at least 2 rows, got {}", x.nrows()));
    }
    if lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
        return Err(arg_err!("lambdas must be finite and non-negative"));
    }
    check_finite(y, "responses")?;
    let basis = SvdBasis::new(x)?;
    let uty = basis.project(y);
    Ok(lambdas.iter().map(|&l| basis.weights(&uty, l)).collect())
}

/// Pearson correlation of each column pair. Constant columns yield NaN.
pub fn column_correlations(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    a.column_iter()
        .zip(b.column_iter())
        .map(|(x, y)| pearson(x.as_slice(), y.as_slice()))
        .collect()
}

fn is_constant(sd: f64, mean: f64) -> bool {
    sd == 0.0 || sd <= 1e-10 * mean.abs()
}

/// Pearson correlation; NaN when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    let (sdx, sdy) = ((sxx / n).sqrt(), (syy / n).sqrt());
    if is_constant(sdx, mx) || is_constant(sdy, my) {
        return f64::NAN;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// Held-out correlation per voxel.
pub fn score_correlation(pred: &DMatrix<f64>, actual: &DMatrix<f64>) -> Result<ScoreMap> {
    if pred.shape() != actual.shape() {
        return Err(arg_err!(
            "prediction {:?} and response {:?} shapes differ",
            pred.shape(),
            actual.shape()
        ));
    }
    if pred.nrows() < 3 {
        return Err(arg_err!("need at least 3 time points, got {}", pred.nrows()));
    }
    Ok(ScoreMap::new(
        column_correlations(pred, actual),
        ScoreKind::Correlation,
        "correlation",
    ))
}

/// Row chunks used as CV holdout units; the last chunk absorbs the remainder.
fn chunk_bounds(n: usize, chunk: usize) -> Vec<(usize, usize)> {
    let n_chunks = n / chunk;
    (0..n_chunks)
        .map(|c| {
            let end = if c + 1 == n_chunks { n } else { (c + 1) * chunk };
            (c * chunk, end)
        })
        .collect()
}

/// Train/test row split of one CV iteration.
pub fn cv_split(n: usize, cfg: &RidgeConfig, iteration: usize) -> (Vec<usize>, Vec<usize>) {
    split_rows(n, cfg, purpose::CV_SPLIT, iteration)
}

pub(crate) fn split_rows(
    n: usize,
    cfg: &RidgeConfig,
    stream: u64,
    iteration: usize,
) -> (Vec<usize>, Vec<usize>) {
    let chunks = chunk_bounds(n, cfg.cv_chunk_trs);
    let n_hold = ((cfg.holdout_fraction * chunks.len() as f64).round() as usize)
        .clamp(1, chunks.len() - 1);
    let mut rng = substream(cfg.seed, stream, iteration as u64);
    let mut held = index::sample(&mut rng, chunks.len(), n_hold).into_vec();
    held.sort_unstable();
    let mut is_test = vec![false; n];
    for c in held {
        let (a, b) = chunks[c];
        is_test[a..b].iter_mut().for_each(|t| *t = true);
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| is_test[i]);
    (train, test)
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub lambda_grid: Vec<f64>,
    /// Mean held-out correlation, `n_lambda x m`; NaN where every iteration was undefined.
    pub scores: DMatrix<f64>,
    pub best_index: Vec<usize>,
    pub lambda_per_voxel: Vec<f64>,
}

/// Held-out correlation of every `(lambda, voxel)` for one split.
pub(crate) fn split_scores(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    train: &[usize],
    test: &[usize],
    lambdas: &[f64],
) -> Result<DMatrix<f64>> {
    let x_tr = x.select_rows(train);
    let y_tr = y.select_rows(train);
    let x_te = x.select_rows(test);
    let y_te = y.select_rows(test);
    let basis = SvdBasis::new(&x_tr)?;
    let uty = basis.project(&y_tr);
    let xv = &x_te * &basis.v;
    let mut out = DMatrix::zeros(lambdas.len(), y.ncols());
    for (li, &lambda) in lambdas.iter().enumerate() {
        let f = basis.shrink(lambda);
        let mut scaled = uty.clone();
        for (mut row, fi) in scaled.row_iter_mut().zip(f.iter()) {
            row *= *fi;
        }
        let pred = &xv * scaled;
        for (j, r) in column_correlations(&pred, &y_te).into_iter().enumerate() {
            out[(li, j)] = r;
        }
    }
    Ok(out)
}

/// Averages per-split score matrices in split order, skipping NaN cells.
pub(crate) fn mean_scores(per_split: &[DMatrix<f64>]) -> DMatrix<f64> {
    let (rows, cols) = per_split[0].shape();
    let mut sum = DMatrix::<f64>::zeros(rows, cols);
    let mut count = DMatrix::<f64>::zeros(rows, cols);
    for s in per_split {
        for ((acc, c), v) in sum.iter_mut().zip(count.iter_mut()).zip(s.iter()) {
            if !v.is_nan() {
                *acc += v;
                *c += 1.0;
            }
        }
    }
    sum.zip_map(&count, |s, c| if c > 0.0 { s / c } else { f64::NAN })
}

/// Index of the best score per column; ties and all-NaN columns go to the larger lambda.
pub(crate) fn argmax_prefer_last(scores: &DMatrix<f64>) -> Vec<usize> {
    let n = scores.nrows();
    scores
        .column_iter()
        .map(|col| {
            let mut best = n - 1;
            let mut best_val = f64::NEG_INFINITY;
            for i in (0..n).rev() {
                let v = col[i];
                if !v.is_nan() && v > best_val {
                    best = i;
                    best_val = v;
                }
            }
            best
        })
        .collect()
}

/// Chooses a regularization value per voxel by repeated chunked holdout.
pub fn cv_select_lambda(x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &RidgeConfig) -> Result<CvResult> {
    cfg.validate()?;
    let n = x.nrows();
    if y.nrows() != n {
        return Err(arg_err!("design has {n} rows, responses have {}", y.nrows()));
    }
    if n < 5 * cfg.cv_chunk_trs {
        return Err(arg_err!(
            "{n} rows is fewer than 5 CV chunks of {} TRs",
            cfg.cv_chunk_trs
        ));
    }
    let per_split: Vec<DMatrix<f64>> = (0..cfg.n_cv_iters)
        .into_par_iter()
        .map(|it| {
            let (train, test) = cv_split(n, cfg, it);
            split_scores(x, y, &train, &test, &cfg.lambda_grid)
        })
        .collect::<Result<_>>()?;
    let scores = mean_scores(&per_split);
    let best_index = argmax_prefer_last(&scores);
    let lambda_per_voxel = best_index.iter().map(|&i| cfg.lambda_grid[i]).collect();
    Ok(CvResult {
        lambda_grid: cfg.lambda_grid.clone(),
        scores,
        best_index,
        lambda_per_voxel,
    })
}

/// Column means and population standard deviations.
pub fn column_stats(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    x.column_iter()
        .map(|c| {
            let mean = c.sum() / n;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .unzip()
}

/// Z-scores columns in place; constant columns are centered and keep scale 1.
/// Returns `(means, scales, constant_columns)`.
pub fn zscore_columns(x: &mut DMatrix<f64>) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let (means, sds) = column_stats(x);
    let mut scales = Vec::with_capacity(sds.len());
    let mut constant = Vec::new();
    for (j, mut col) in x.column_iter_mut().enumerate() {
        let scale = if is_constant(sds[j], means[j]) {
            constant.push(j);
            col.fill(0.0);
            1.0
        } else {
            col.add_scalar_mut(-means[j]);
            col /= sds[j];
            sds[j]
        };
        scales.push(scale);
    }
    (means, scales, constant)
}

/// Scans concatenated and standardized for fitting.
#[derive(Debug, Clone)]
pub struct PreparedFit {
    pub z: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub feature_means: Vec<f64>,
    pub feature_scales: Vec<f64>,
    pub dropped_columns: Vec<usize>,
    pub response_means: Vec<f64>,
    pub response_scales: Vec<f64>,
    pub scan_rows: Vec<usize>,
}

pub(crate) fn check_pairs(designs: &[DesignMatrix], responses: &[ResponseMatrix]) -> Result<usize> {
    if designs.is_empty() {
        return Err(arg_err!("no scans to fit"));
    }
    if designs.len() != responses.len() {
        return Err(arg_err!(
            "{} designs but {} response scans",
            designs.len(),
            responses.len()
        ));
    }
    let m = common_voxel_count(responses)?;
    let p = designs[0].data.ncols();
    for (d, r) in designs.iter().zip(responses) {
        if d.scan_id != r.scan_id {
            return Err(arg_err!(
                "design scan '{}' paired with response scan '{}'",
                d.scan_id,
                r.scan_id
            ));
        }
        if d.n_rows() != r.n_trs() {
            return Err(arg_err!(
                "scan '{}': design has {} rows, responses have {}",
                d.scan_id,
                d.n_rows(),
                r.n_trs()
            ));
        }
        if d.data.ncols() != p
            || d.delays_seconds != designs[0].delays_seconds
            || d.modality != designs[0].modality
            || d.source_layer != designs[0].source_layer
        {
            return Err(arg_err!(
                "scan '{}' has a design incompatible with scan '{}'",
                d.scan_id,
                designs[0].scan_id
            ));
        }
    }
    Ok(m)
}

/// Z-scores responses within each scan and stacks them.
pub fn stack_responses(responses: &[&DMatrix<f64>]) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let m = responses[0].ncols();
    let total: usize = responses.iter().map(|r| r.nrows()).sum();
    let mut y = DMatrix::zeros(total, m);
    let mut mean_acc = vec![0.0; m];
    let mut scale_acc = vec![0.0; m];
    let mut row = 0;
    for r in responses {
        let mut block = (*r).clone();
        let (means, scales, _) = zscore_columns(&mut block);
        for j in 0..m {
            mean_acc[j] += means[j];
            scale_acc[j] += scales[j];
        }
        y.rows_mut(row, block.nrows()).copy_from(&block);
        row += block.nrows();
    }
    let k = responses.len() as f64;
    (
        y,
        mean_acc.into_iter().map(|v| v / k).collect(),
        scale_acc.into_iter().map(|v| v / k).collect(),
    )
}

pub fn prepare_fit(designs: &[DesignMatrix], responses: &[ResponseMatrix]) -> Result<PreparedFit> {
    check_pairs(designs, responses)?;
    let p = designs[0].data.ncols();
    let total: usize = designs.iter().map(|d| d.n_rows()).sum();
    let mut z = DMatrix::zeros(total, p);
    let mut row = 0;
    for d in designs {
        z.rows_mut(row, d.n_rows()).copy_from(&d.data);
        row += d.n_rows();
    }
    check_finite(&z, "design")?;
    let (feature_means, feature_scales, dropped) = zscore_columns(&mut z);
    if !dropped.is_empty() {
        warn!(
            "{} zero-variance design columns dropped; their weights are fixed at 0",
            dropped.len()
        );
    }
    let blocks: Vec<&DMatrix<f64>> = responses.iter().map(|r| &r.data).collect();
    let (y, response_means, response_scales) = stack_responses(&blocks);
    Ok(PreparedFit {
        z,
        y,
        feature_means,
        feature_scales,
        dropped_columns: dropped,
        response_means,
        response_scales,
        scan_rows: designs.iter().map(|d| d.n_rows()).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub weights: WeightSet,
    pub cv: CvResult,
}

/// Fits one encoding model on the concatenation of the given scans.
pub fn fit_encoding_model(
    designs: &[DesignMatrix],
    responses: &[ResponseMatrix],
    cfg: &RidgeConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    let prep = prepare_fit(designs, responses)?;
    let cv = cv_select_lambda(&prep.z, &prep.y, cfg)?;
    let weights = final_fit(&prep, &cv.lambda_per_voxel, designs)?;
    Ok(FitResult { weights, cv })
}

/// Fits with fixed per-voxel regularization, skipping cross-validation.
pub fn fit_with_lambdas(
    designs: &[DesignMatrix],
    responses: &[ResponseMatrix],
    lambda_per_voxel: &[f64],
) -> Result<WeightSet> {
    let prep = prepare_fit(designs, responses)?;
    if lambda_per_voxel.len() != prep.y.ncols() {
        return Err(arg_err!(
            "{} lambdas for {} voxels",
            lambda_per_voxel.len(),
            prep.y.ncols()
        ));
    }
    final_fit(&prep, lambda_per_voxel, designs)
}

fn final_fit(prep: &PreparedFit, lambdas: &[f64], designs: &[DesignMatrix]) -> Result<WeightSet> {
    let basis = SvdBasis::new(&prep.z)?;
    let uty = basis.project(&prep.y);
    let mut beta = basis.weights_per_voxel(&uty, lambdas);
    for &j in &prep.dropped_columns {
        beta.row_mut(j).fill(0.0);
    }
    let ws = WeightSet {
        beta,
        lambda_per_voxel: lambdas.to_vec(),
        feature_means: prep.feature_means.clone(),
        feature_scales: prep.feature_scales.clone(),
        response_means: prep.response_means.clone(),
        response_scales: prep.response_scales.clone(),
        modality: designs[0].modality,
        layer: designs[0].source_layer,
        delays_seconds: designs[0].delays_seconds.clone(),
    };
    ws.validate()?;
    Ok(ws)
}

/// Predicted responses in the units of the training responses.
pub fn predict(weights: &WeightSet, design: &DesignMatrix) -> Result<DMatrix<f64>> {
    let p = weights.beta.nrows();
    if design.data.ncols() != p {
        return Err(arg_err!(
            "design '{}' has {} columns, model expects {p}",
            design.scan_id,
            design.data.ncols()
        ));
    }
    let mut z = design.data.clone();
    for (j, mut col) in z.column_iter_mut().enumerate() {
        col.add_scalar_mut(-weights.feature_means[j]);
        col /= weights.feature_scales[j];
    }
    let mut pred = z * &weights.beta;
    for (j, mut col) in pred.column_iter_mut().enumerate() {
        col *= weights.response_scales[j];
        col.add_scalar_mut(weights.response_means[j]);
    }
    Ok(pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Modality;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = substream(seed, 99, 0);
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn closed_form(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
        let p = x.ncols();
        let gram = x.tr_mul(x) + DMatrix::identity(p, p) * lambda;
        gram.lu().solve(&x.tr_mul(y)).unwrap()
    }

    fn design(id: &str, data: DMatrix<f64>) -> DesignMatrix {
        DesignMatrix {
            scan_id: id.into(),
            data,
            delays_seconds: vec![0.0],
            source_layer: 0,
            modality: Modality::Language,
        }
    }

    fn responses(id: &str, data: DMatrix<f64>) -> ResponseMatrix {
        ResponseMatrix::new(id, 2.0, data).unwrap()
    }

    #[test]
    fn two_row_hand_example() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let y = DMatrix::from_row_slice(2, 1, &[1.0, 3.0]);
        let b = svd_ridge_solve(&x, &y, &[2.0]).unwrap();
        assert!((b[0][(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn orthonormal_design_unregularized_is_projection() {
        let q = gaussian(30, 5, 1).qr().q();
        let y = gaussian(30, 3, 2);
        let b = &svd_ridge_solve(&q, &y, &[0.0]).unwrap()[0];
        assert!((b - q.tr_mul(&y)).abs().max() < 1e-12);
    }

    #[test]
    fn huge_lambda_shrinks_to_zero() {
        let x = gaussian(40, 6, 3);
        let y = gaussian(40, 2, 4);
        let b = &svd_ridge_solve(&x, &y, &[1e12]).unwrap()[0];
        let xty = x.tr_mul(&y).abs().max();
        assert!(b.abs().max() < 1e-6 * xty);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut x = gaussian(10, 2, 5);
        let y = gaussian(10, 1, 6);
        assert!(svd_ridge_solve(&x, &gaussian(9, 1, 6), &[1.0]).is_err());
        assert!(svd_ridge_solve(&x.rows(0, 1).into_owned(), &y.rows(0, 1).into_owned(), &[1.0]).is_err());
        x[(3, 1)] = f64::INFINITY;
        assert!(matches!(svd_ridge_solve(&x, &y, &[1.0]), Err(Error::Data(_))));
    }

    #[test]
    fn correlation_hand_examples() {
        let p = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let a = DMatrix::from_column_slice(4, 1, &[1.0, 3.0, 2.0, 4.0]);
        let r = score_correlation(&p, &a).unwrap();
        assert!((r.values[0] - 0.8).abs() < 1e-12);
        assert!((score_correlation(&p, &p).unwrap().values[0] - 1.0).abs() < 1e-12);
        assert!((score_correlation(&p, &(-&p)).unwrap().values[0] + 1.0).abs() < 1e-12);
        let flat = DMatrix::from_element(4, 1, 0.3);
        assert!(score_correlation(&flat, &a).unwrap().values[0].is_nan());
        assert!(score_correlation(&p, &gaussian(5, 1, 0)).is_err());
        assert!(score_correlation(&p.rows(0, 2).into_owned(), &a.rows(0, 2).into_owned()).is_err());
    }

    #[test]
    fn cv_split_uses_whole_chunks() {
        let cfg = RidgeConfig::default();
        let (train, test) = cv_split(200, &cfg, 3);
        assert_eq!(test.len(), 40);
        assert_eq!(train.len() + test.len(), 200);
        for c in test.chunks(10) {
            assert_eq!(c[0] % 10, 0);
            assert!(c.windows(2).all(|w| w[1] == w[0] + 1));
        }
        assert_eq!(cv_split(200, &cfg, 3), (train, test));
    }

    #[test]
    fn noiseless_plant_selects_smallest_lambda() {
        let x = gaussian(300, 20, 11);
        let beta = gaussian(20, 100, 12);
        let y = &x * beta;
        let cfg = RidgeConfig {
            n_cv_iters: 10,
            ..Default::default()
        };
        let cv = cv_select_lambda(&x, &y, &cfg).unwrap();
        let at_min = cv.lambda_per_voxel.iter().filter(|&&l| l == cfg.lambda_grid[0]).count();
        assert!(at_min >= 99, "{at_min} of 100 voxels at the smallest lambda");
    }

    #[test]
    fn pure_noise_selects_grid_extremes() {
        // Held-out correlation is sign-symmetric under the null, so the CV
        // curve is a random near-monotone function of lambda and its argmax
        // lands on one of the two grid ends.
        let x = gaussian(400, 40, 21);
        let y = gaussian(400, 300, 22);
        let cfg = RidgeConfig::default();
        let cv = cv_select_lambda(&x, &y, &cfg).unwrap();
        let last = cfg.lambda_grid.len() - 1;
        let ends = cv.best_index.iter().filter(|&&i| i == 0 || i == last).count();
        assert!(ends as f64 >= 0.8 * 300.0, "{ends} of 300 noise voxels at a grid end");
        let largest = cv.best_index.iter().filter(|&&i| i == last).count();
        assert!(largest >= 100, "{largest} noise voxels at the largest lambda");
        let mean_score = cv.scores.mean();
        assert!(mean_score.abs() < 0.01, "mean held-out r {mean_score}");
    }

    #[test]
    fn single_lambda_grid_is_constant() {
        let x = gaussian(100, 5, 31);
        let y = gaussian(100, 20, 32);
        let cfg = RidgeConfig {
            lambda_grid: vec![7.0],
            n_cv_iters: 3,
            ..Default::default()
        };
        let cv = cv_select_lambda(&x, &y, &cfg).unwrap();
        assert!(cv.lambda_per_voxel.iter().all(|&l| l == 7.0));
        assert!(cv_select_lambda(&x.rows(0, 49).into_owned(), &y.rows(0, 49).into_owned(), &cfg).is_err());
    }

    #[test]
    fn realizable_model_fits_training_data() {
        let x = gaussian(200, 8, 41);
        let y = &x * gaussian(8, 30, 42) + DMatrix::from_element(200, 30, 5.0);
        let d = design("a", x);
        let r = responses("a", y.clone());
        let fit = fit_encoding_model(std::slice::from_ref(&d), &[r], &RidgeConfig { n_cv_iters: 5, ..Default::default() }).unwrap();
        let pred = predict(&fit.weights, &d).unwrap();
        let scores = score_correlation(&pred, &y).unwrap();
        assert!(scores.values.iter().all(|&v| v > 0.999));
        // the training design reproduces the training fit
        let again = predict(&fit.weights, &d).unwrap();
        assert_eq!(pred, again);
    }

    #[test]
    fn zero_design_predicts_response_means() {
        let x = gaussian(100, 4, 51);
        let y = &x * gaussian(4, 3, 52) + DMatrix::from_element(100, 3, 2.0);
        let fit = fit_encoding_model(
            &[design("a", x)],
            &[responses("a", y)],
            &RidgeConfig { n_cv_iters: 2, ..Default::default() },
        )
        .unwrap();
        let mut ws = fit.weights.clone();
        ws.feature_means.iter_mut().for_each(|m| *m = 0.0);
        let pred = predict(&ws, &design("z", DMatrix::zeros(7, 4))).unwrap();
        for j in 0..3 {
            assert!(pred.column(j).iter().all(|&v| (v - ws.response_means[j]).abs() < 1e-12));
        }
        ws.beta.fill(0.0);
        let flat = predict(&ws, &design("a", gaussian(7, 4, 53))).unwrap();
        for j in 0..3 {
            assert!(flat.column(j).iter().all(|&v| v == flat[(0, j)]));
        }
        assert!(predict(&ws, &design("a", gaussian(7, 5, 53))).is_err());
    }

    #[test]
    fn duplicated_scan_matches_single_scan_at_half_lambda() {
        let x = gaussian(120, 6, 61);
        let y = &x * gaussian(6, 4, 62) + gaussian(120, 4, 63);
        let one = fit_encoding_model(
            &[design("a", x.clone())],
            &[responses("a", y.clone())],
            &RidgeConfig { lambda_grid: vec![5.0], n_cv_iters: 2, ..Default::default() },
        )
        .unwrap();
        let two = fit_encoding_model(
            &[design("a", x.clone()), design("b", x)],
            &[responses("a", y.clone()), responses("b", y)],
            &RidgeConfig { lambda_grid: vec![10.0], n_cv_iters: 2, ..Default::default() },
        )
        .unwrap();
        assert!((&one.weights.beta - &two.weights.beta).abs().max() < 1e-10);
        for (a, b) in one.weights.feature_means.iter().zip(&two.weights.feature_means) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn time_permuted_responses_score_near_zero() {
        let scan = |seed: u64| {
            let x = gaussian(300, 10, seed);
            let y = &x * gaussian(10, 200, 70) + gaussian(300, 200, seed + 1);
            (x, y)
        };
        let (x1, y1) = scan(71);
        let (x2, mut y2) = scan(73);
        // reverse time in the held-out scan's responses
        let n = y2.nrows();
        y2 = DMatrix::from_fn(n, y2.ncols(), |i, j| y2[(n - 1 - i, j)]);
        let fit = fit_encoding_model(
            &[design("a", x1)],
            &[responses("a", y1)],
            &RidgeConfig { n_cv_iters: 5, ..Default::default() },
        )
        .unwrap();
        let pred = predict(&fit.weights, &design("b", x2)).unwrap();
        let mean = score_correlation(&pred, &y2).unwrap().mean();
        assert!(mean.abs() < 0.02, "mean r {mean}");
    }

    #[test]
    fn mismatched_scans_are_rejected() {
        let cfg = RidgeConfig::default();
        let x = gaussian(60, 2, 81);
        let y = gaussian(60, 2, 82);
        assert!(fit_encoding_model(&[design("a", x.clone())], &[responses("b", y.clone())], &cfg).is_err());
        assert!(fit_encoding_model(&[design("a", x.clone())], &[], &cfg).is_err());
        assert!(fit_encoding_model(&[design("a", x.rows(0, 50).into_owned())], &[responses("a", y)], &cfg).is_err());
    }

    #[test]
    fn constant_design_column_gets_zero_weight() {
        let mut x = gaussian(100, 3, 91);
        x.column_mut(1).fill(4.0);
        let y = gaussian(100, 2, 92);
        let fit = fit_encoding_model(
            &[design("a", x)],
            &[responses("a", y)],
            &RidgeConfig { n_cv_iters: 2, ..Default::default() },
        )
        .unwrap();
        assert!(fit.weights.beta.row(1).iter().all(|&v| v == 0.0));
        assert_eq!(fit.weights.feature_scales[1], 1.0);
    }

    #[test]
    fn cv_is_thread_count_independent() {
        let x = gaussian(200, 10, 101);
        let y = gaussian(200, 30, 102) + &x * gaussian(10, 30, 103);
        let cfg = RidgeConfig { n_cv_iters: 12, seed: 5, ..Default::default() };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| cv_select_lambda(&x, &y, &cfg).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.lambda_per_voxel, b.lambda_per_voxel);
        assert_eq!(a.scores, b.scores);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn svd_matches_closed_form(n in 5usize..80, p in 1usize..20, seed in any::<u64>(), l in 0.01f64..100.0) {
            let x = gaussian(n, p, seed);
            let y = gaussian(n, 3, seed ^ 1);
            let b = &svd_ridge_solve(&x, &y, &[l]).unwrap()[0];
            let c = closed_form(&x, &y, l);
            prop_assert!((b - &c).norm() <= 1e-8 * c.norm().max(1e-300));
        }

        #[test]
        fn shrinkage_is_monotone(seed in any::<u64>(), l1 in 0.0f64..10.0, gap in 0.001f64..100.0) {
            let x = gaussian(40, 8, seed);
            let y = gaussian(40, 1, seed ^ 2);
            let b = svd_ridge_solve(&x, &y, &[l1, l1 + gap]).unwrap();
            prop_assert!(b[0].norm() >= b[1].norm() - 1e-12);
        }

        #[test]
        fn correlation_is_affine_invariant(seed in any::<u64>(), s in 0.01f64..100.0, t in -50.0f64..50.0) {
            let a = gaussian(30, 2, seed);
            let b = gaussian(30, 2, seed ^ 3);
            let r0 = column_correlations(&a, &b);
            let r1 = column_correlations(&a.map(|v| s * v + t), &b);
            let r2 = column_correlations(&a, &b.map(|v| s * v - t));
            for i in 0..2 {
                prop_assert!((r0[i] - r1[i]).abs() < 1e-10);
                prop_assert!((r0[i] - r2[i]).abs() < 1e-10);
            }
        }
    }
}
