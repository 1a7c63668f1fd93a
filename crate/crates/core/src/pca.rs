//! Principal components of encoding weights and projections onto them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::types::{check_finite, FeatureMatrix, ScoreKind, ScoreMap, WeightSet};

/// Relative singular-value cutoff below which a component is flagged.
const RANK_TOL: f64 = 1e-10;

/// Averages the `n_delays` stacked blocks of `beta` (`(D*k) x m`) into `k x m`.
pub fn collapse_beta(beta: &DMatrix<f64>, n_delays: usize) -> Result<DMatrix<f64>> {
    if n_delays == 0 || !beta.nrows().is_multiple_of(n_delays) {
        return Err(arg_err!(
            "{} weight rows do not split into {n_delays} delay blocks",
            beta.nrows()
        ));
    }
    let k = beta.nrows() / n_delays;
    let mut out = DMatrix::<f64>::zeros(k, beta.ncols());
    for d in 0..n_delays {
        out += beta.rows(d * k, k);
    }
    Ok(out / n_delays as f64)
}

/// Delay-averaged weights in raw feature units, `k x m`.
pub fn collapse_delays(weights: &WeightSet) -> Result<DMatrix<f64>> {
    weights.validate()?;
    collapse_beta(&weights.raw_feature_beta(), weights.n_delays())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectCriterion {
    Value,
    MinPair,
    MaxPair,
}

fn top_n(keys: &[(usize, f64)], n: usize, what: &str) -> Result<Vec<usize>> {
    let mut ranked: Vec<(usize, f64)> = keys.iter().copied().filter(|(_, v)| !v.is_nan()).collect();
    if n > ranked.len() {
        return Err(arg_err!(
            "asked for {n} voxels by {what} but only {} are available",
            ranked.len()
        ));
    }
    // descending value, ascending index on ties
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut picked: Vec<usize> = ranked[..n].iter().map(|&(i, _)| i).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Indices (ascending) of the `n` best voxels under `criterion`.
///
/// `MaxPair` ranks by the elementwise max after removing the `MinPair` set.
pub fn select_top_voxels(
    score: &ScoreMap,
    n: usize,
    criterion: SelectCriterion,
    other: Option<&ScoreMap>,
) -> Result<Vec<usize>> {
    let pair = |f: fn(f64, f64) -> f64| -> Result<Vec<(usize, f64)>> {
        let other = other.ok_or_else(|| arg_err!("pair criteria need a second score map"))?;
        if other.len() != score.len() {
            return Err(arg_err!(
                "score maps have {} and {} voxels",
                score.len(),
                other.len()
            ));
        }
        Ok(score
            .values
            .iter()
            .zip(&other.values)
            .enumerate()
            .map(|(i, (&a, &b))| {
                let v = if a.is_nan() || b.is_nan() { f64::NAN } else { f(a, b) };
                (i, v)
            })
            .collect())
    };
    match criterion {
        SelectCriterion::Value => {
            let keys: Vec<_> = score.values.iter().copied().enumerate().collect();
            top_n(&keys, n, "value")
        }
        SelectCriterion::MinPair => top_n(&pair(f64::min)?, n, "min of pair"),
        SelectCriterion::MaxPair => {
            let multimodal = top_n(&pair(f64::min)?, n, "min of pair")?;
            let keys: Vec<_> = pair(f64::max)?
                .into_iter()
                .filter(|(i, _)| multimodal.binary_search(i).is_err())
                .collect();
            top_n(&keys, n, "max of pair")
        }
    }
}

/// Principal axes of voxel weight vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    /// `k x k`, one unit component per column, descending variance.
    pub components: DMatrix<f64>,
    /// Mean weight vector over the fitted voxels (after optional normalization).
    pub mean: DVector<f64>,
    pub explained_variance: Vec<f64>,
    /// Components whose singular value falls below the rank cutoff.
    pub beyond_rank: Vec<bool>,
    /// Each voxel's weights were z-scored across features before centering.
    pub normalized: bool,
}

impl PcaBasis {
    pub fn feature_dim(&self) -> usize {
        self.components.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.components.ncols()
    }

    pub fn explained_ratio(&self) -> Vec<f64> {
        let total: f64 = self.explained_variance.iter().sum();
        self.explained_variance.iter().map(|v| v / total).collect()
    }

    fn component(&self, c: usize) -> Result<DVector<f64>> {
        if c >= self.n_components() {
            return Err(arg_err!(
                "component {c} out of range (basis has {})",
                self.n_components()
            ));
        }
        Ok(self.components.column(c).into_owned())
    }
}

fn normalize_columns(w: &mut DMatrix<f64>) {
    let k = w.nrows() as f64;
    for mut col in w.column_iter_mut() {
        let mean = col.sum() / k;
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / k).sqrt();
        if sd > 0.0 {
            col /= sd;
        }
    }
}

/// PCA with voxels as observations and features as variables.
pub fn fit_pca(collapsed: &DMatrix<f64>, normalize: bool) -> Result<PcaBasis> {
    check_finite(collapsed, "weights")?;
    let (k, m) = collapsed.shape();
    if k == 0 || m < k + 1 {
        return Err(arg_err!("PCA over {k} features needs at least {} voxels, got {m}", k + 1));
    }
    let mut w = collapsed.clone();
    if normalize {
        normalize_columns(&mut w);
    }
    let mean = w.column_mean();
    // voxels x features, centered over voxels
    let mut x = w.transpose();
    for mut row in x.row_iter_mut() {
        row -= mean.transpose();
    }
    let svd = x.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let smax = s.max();
    let mut components = DMatrix::<f64>::zeros(k, k);
    let mut explained_variance = Vec::with_capacity(k);
    let mut beyond_rank = Vec::with_capacity(k);
    for (c, &i) in order.iter().enumerate() {
        let mut col = v_t.row(i).transpose();
        // largest-magnitude entry positive; first one wins ties
        let lead = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if lead < 0.0 {
            col.neg_mut();
        }
        components.set_column(c, &col);
        explained_variance.push(s[i] * s[i] / (m - 1) as f64);
        beyond_rank.push(!(s[i] > RANK_TOL * smax));
    }
    Ok(PcaBasis {
        components,
        mean,
        explained_variance,
        beyond_rank,
        normalized: normalize,
    })
}

/// Projection of every centered stimulus row onto component `component`.
pub fn project_features(features: &FeatureMatrix, basis: &PcaBasis, component: usize) -> Result<Vec<f64>> {
    if features.feature_dim() != basis.feature_dim() {
        return Err(arg_err!(
            "features have {} dims, basis has {}",
            features.feature_dim(),
            basis.feature_dim()
        ));
    }
    let pc = basis.component(component)?;
    let means = features.data.row_mean();
    Ok(features
        .data
        .row_iter()
        .map(|row| (row - &means).dot(&pc.transpose()))
        .collect())
}

/// Projection of every voxel's centered weight vector onto component `component`.
pub fn project_weights(collapsed: &DMatrix<f64>, basis: &PcaBasis, component: usize) -> Result<ScoreMap> {
    Ok(ScoreMap::new(
        project_weights_raw(collapsed, basis, component)?,
        ScoreKind::PcProjection,
        format!("pc{}", component + 1),
    ))
}

pub(crate) fn project_weights_raw(collapsed: &DMatrix<f64>, basis: &PcaBasis, component: usize) -> Result<Vec<f64>> {
    if collapsed.nrows() != basis.feature_dim() {
        return Err(arg_err!(
            "weights have {} features, basis has {}",
            collapsed.nrows(),
            basis.feature_dim()
        ));
    }
    let pc = basis.component(component)?;
    let mut w = collapsed.clone();
    if basis.normalized {
        normalize_columns(&mut w);
    }
    Ok(w.column_iter().map(|col| (col - &basis.mean).dot(&pc)).collect())
}

/// Largest principal angle (radians) between the column spans of `a` and `b`.
pub fn principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let s = (qa.transpose() * qb).singular_values();
    s.min().clamp(-1.0, 1.0).acos()
}
