//! Linear maps between language and vision feature spaces, estimated from
//! paired caption/image features.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::ridge::{self, logspace, svd_ridge_solve, RidgeConfig};
use crate::rng::purpose;
use crate::types::{check_finite, AlignDirection, AlignmentMap, FeatureMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    #[serde(default = "default_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_iters")]
    pub n_cv_iters: usize,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    /// Pairs per holdout chunk; shrunk automatically for small pair sets.
    #[serde(default = "default_chunk")]
    pub cv_chunk: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_grid() -> Vec<f64> {
    logspace(-6.0, 6.0, 13)
}

fn default_iters() -> usize {
    10
}

fn default_holdout() -> f64 {
    0.2
}

fn default_chunk() -> usize {
    10
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            lambda_grid: default_grid(),
            n_cv_iters: default_iters(),
            holdout_fraction: default_holdout(),
            cv_chunk: default_chunk(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlignmentFit {
    pub map: AlignmentMap,
    /// Mean held-out correlation (averaged over target dimensions) per lambda.
    pub cv_scores: Vec<f64>,
}

fn center(x: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let means = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.mean()));
    let mut out = x.clone();
    for (mut col, m) in out.column_iter_mut().zip(means.iter()) {
        col.add_scalar_mut(-m);
    }
    (out, means)
}

/// Ridge map from `source` rows to `target` rows with one CV-selected lambda.
pub fn fit_alignment(
    source: &DMatrix<f64>,
    target: &DMatrix<f64>,
    direction: AlignDirection,
    layer: u32,
    cfg: &AlignConfig,
) -> Result<AlignmentFit> {
    let n = source.nrows();
    if target.nrows() != n {
        return Err(arg_err!(
            "{n} source pairs but {} target pairs",
            target.nrows()
        ));
    }
    if n < 10 {
        return Err(arg_err!("need at least 10 pairs, got {n}"));
    }
    check_finite(source, "alignment source")?;
    check_finite(target, "alignment target")?;
    let ridge_cfg = RidgeConfig {
        lambda_grid: cfg.lambda_grid.clone(),
        n_cv_iters: cfg.n_cv_iters,
        holdout_fraction: cfg.holdout_fraction,
        cv_chunk_trs: cfg.cv_chunk.min(n / 5).max(1),
        seed: cfg.seed,
    };
    ridge_cfg.validate()?;

    let (xc, x_means) = center(source);
    let (yc, y_means) = center(target);

    let per_split: Vec<DMatrix<f64>> = (0..cfg.n_cv_iters)
        .into_par_iter()
        .map(|it| {
            let (train, test) = ridge::split_rows(n, &ridge_cfg, purpose::ALIGN_CV_SPLIT, it);
            ridge::split_scores(&xc, &yc, &train, &test, &cfg.lambda_grid)
        })
        .collect::<Result<_>>()?;
    let scores = ridge::mean_scores(&per_split);
    // average over target dimensions, ignoring constant ones
    let per_lambda: Vec<f64> = scores
        .row_iter()
        .map(|row| crate::types::nan_mean(&row.iter().copied().collect::<Vec<_>>()))
        .collect();
    let as_col = DMatrix::from_column_slice(per_lambda.len(), 1, &per_lambda);
    let best = ridge::argmax_prefer_last(&as_col)[0];
    let lambda = cfg.lambda_grid[best];

    let beta = svd_ridge_solve(&xc, &yc, &[lambda])?.remove(0);
    let matrix = beta.transpose();
    let intercept = &y_means - &matrix * &x_means;
    let map = AlignmentMap {
        matrix,
        intercept,
        direction,
        layer,
        fit_lambda: lambda,
    };
    map.validate()?;
    Ok(AlignmentFit {
        map,
        cv_scores: per_lambda,
    })
}

/// Maps every feature row into the target space of `map`.
pub fn apply_alignment(map: &AlignmentMap, features: &FeatureMatrix) -> Result<FeatureMatrix> {
    if features.modality != map.direction.source() {
        return Err(arg_err!(
            "alignment {} expects {} features, got {}",
            map.direction.as_str(),
            map.direction.source(),
            features.modality
        ));
    }
    if features.layer != map.layer {
        return Err(arg_err!(
            "alignment fitted for layer {} applied to layer {} features",
            map.layer,
            features.layer
        ));
    }
    if features.feature_dim() != map.source_dim() {
        return Err(arg_err!(
            "alignment expects {} source dims, features have {}",
            map.source_dim(),
            features.feature_dim()
        ));
    }
    let mut data = &features.data * map.matrix.transpose();
    for (mut col, c) in data.column_iter_mut().zip(map.intercept.iter()) {
        col.add_scalar_mut(*c);
    }
    check_finite(&data, "aligned features").map_err(|e| Error::Data(e.to_string()))?;
    Ok(FeatureMatrix {
        scan_id: features.scan_id.clone(),
        modality: map.direction.target(),
        layer: features.layer,
        sample_times: features.sample_times.clone(),
        data,
        dtype: features.dtype,
    })
}

/// `outer(inner(x))` as a single affine map.
pub fn compose(outer: &AlignmentMap, inner: &AlignmentMap) -> Result<AlignmentMap> {
    if outer.source_dim() != inner.target_dim() {
        return Err(arg_err!("cannot compose maps with mismatched dimensions"));
    }
    Ok(AlignmentMap {
        matrix: &outer.matrix * &inner.matrix,
        intercept: &outer.matrix * &inner.intercept + &outer.intercept,
        direction: outer.direction,
        layer: inner.layer,
        fit_lambda: outer.fit_lambda,
    })
}
