//! Within- and cross-modality scoring, leave-one-scan-out layer selection and
//! sign correction, ratio maps and feature-set comparisons.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::ridge::{fit_encoding_model, predict, score_correlation, RidgeConfig};
use crate::types::{nan_mean, DesignMatrix, ResponseMatrix, ScoreKind, ScoreMap, WeightSet};

/// Correlations indexed by (layer, test scan, voxel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanScoreTable {
    pub layers: Vec<u32>,
    pub scans: Vec<String>,
    pub n_voxels: usize,
    /// Layer-major, then scan, then voxel.
    pub values: Vec<f64>,
}

impl ScanScoreTable {
    pub fn new(layers: Vec<u32>, scans: Vec<String>, n_voxels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != layers.len() * scans.len() * n_voxels {
            return Err(arg_err!(
                "score table needs {} cells, got {}",
                layers.len() * scans.len() * n_voxels,
                values.len()
            ));
        }
        if layers.is_empty() || scans.is_empty() || n_voxels == 0 {
            return Err(arg_err!("score table has an empty axis"));
        }
        Ok(ScanScoreTable {
            layers,
            scans,
            n_voxels,
            values,
        })
    }

    /// Single-layer table from per-scan score vectors.
    pub fn from_scans(layer: u32, scans: Vec<String>, per_scan: Vec<Vec<f64>>) -> Result<Self> {
        let m = per_scan.first().map(Vec::len).unwrap_or(0);
        if per_scan.iter().any(|s| s.len() != m) {
            return Err(arg_err!("per-scan score vectors differ in length"));
        }
        Self::new(vec![layer], scans, m, per_scan.concat())
    }

    /// Concatenates single- or multi-layer tables along the layer axis.
    pub fn stack(tables: &[ScanScoreTable]) -> Result<Self> {
        let first = tables.first().ok_or_else(|| arg_err!("no tables to stack"))?;
        let mut layers = Vec::new();
        let mut values = Vec::new();
        for t in tables {
            if t.scans != first.scans || t.n_voxels != first.n_voxels {
                return Err(arg_err!("tables disagree on scans or voxel count"));
            }
            layers.extend(&t.layers);
            values.extend(&t.values);
        }
        Self::new(layers, first.scans.clone(), first.n_voxels, values)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_scans(&self) -> usize {
        self.scans.len()
    }

    pub fn get(&self, layer: usize, scan: usize, voxel: usize) -> f64 {
        self.values[(layer * self.n_scans() + scan) * self.n_voxels + voxel]
    }

    pub fn scan_scores(&self, layer: usize, scan: usize) -> &[f64] {
        let start = (layer * self.n_scans() + scan) * self.n_voxels;
        &self.values[start..start + self.n_voxels]
    }

    /// Mean over test scans per voxel for one layer (NaN cells excluded).
    pub fn layer_mean(&self, layer: usize) -> ScoreMap {
        let values = (0..self.n_voxels)
            .map(|v| self.voxel_mean(layer, v, None))
            .collect();
        ScoreMap::new(values, ScoreKind::Correlation, format!("layer {}", self.layers[layer]))
    }

    /// Mean over scans of one voxel, optionally leaving one scan out.
    fn voxel_mean(&self, layer: usize, voxel: usize, skip: Option<usize>) -> f64 {
        let vals: Vec<f64> = (0..self.n_scans())
            .filter(|&s| Some(s) != skip)
            .map(|s| self.get(layer, s, voxel))
            .collect();
        nan_mean(&vals)
    }

    pub fn layer_index(&self, layer: u32) -> Option<usize> {
        self.layers.iter().position(|&l| l == layer)
    }
}

#[derive(Debug, Clone)]
pub struct LayerScores {
    pub table: ScanScoreTable,
    pub mean: ScoreMap,
}

/// Leave-one-scan-out within-modality performance for one layer.
pub fn within_modality_scores(
    scans: &[(DesignMatrix, ResponseMatrix)],
    cfg: &RidgeConfig,
) -> Result<LayerScores> {
    if scans.len() < 2 {
        return Err(arg_err!(
            "leave-one-scan-out needs at least 2 scans, got {}",
            scans.len()
        ));
    }
    let mut per_scan = Vec::with_capacity(scans.len());
    for held in 0..scans.len() {
        let (designs, responses): (Vec<_>, Vec<_>) = scans
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != held)
            .map(|(_, (d, r))| (d.clone(), r.clone()))
            .unzip();
        let fit = fit_encoding_model(&designs, &responses, cfg)?;
        let (d, r) = &scans[held];
        let pred = predict(&fit.weights, d)?;
        per_scan.push(score_correlation(&pred, &r.data)?.values);
    }
    let layer = scans[0].0.source_layer;
    let ids = scans.iter().map(|(d, _)| d.scan_id.clone()).collect();
    let table = ScanScoreTable::from_scans(layer, ids, per_scan)?;
    let mut mean = table.layer_mean(0);
    mean.source = format!("{0}->{0} layer {layer}", scans[0].0.modality);
    Ok(LayerScores { table, mean })
}

/// Scores a fitted model on target scans whose stimuli are already expressed
/// in the model's feature space.
pub fn cross_modality_scores(
    model: &WeightSet,
    designs: &[DesignMatrix],
    responses: &[ResponseMatrix],
) -> Result<LayerScores> {
    if designs.is_empty() || designs.len() != responses.len() {
        return Err(arg_err!(
            "{} target designs for {} target response scans",
            designs.len(),
            responses.len()
        ));
    }
    let mut per_scan = Vec::with_capacity(designs.len());
    for (d, r) in designs.iter().zip(responses) {
        if d.modality != model.modality {
            return Err(arg_err!(
                "scan '{}' has {} features but the model was trained on {} features; \
                 apply an alignment map first",
                d.scan_id,
                d.modality,
                model.modality
            ));
        }
        if d.source_layer != model.layer {
            return Err(arg_err!(
                "scan '{}' design is layer {}, model is layer {}",
                d.scan_id,
                d.source_layer,
                model.layer
            ));
        }
        if d.delays_seconds != model.delays_seconds {
            return Err(arg_err!("scan '{}' uses different delays than the model", d.scan_id));
        }
        if d.scan_id != r.scan_id {
            return Err(arg_err!(
                "design '{}' paired with responses '{}'",
                d.scan_id,
                r.scan_id
            ));
        }
        if r.n_voxels() != model.n_voxels() {
            return Err(arg_err!(
                "scan '{}' has {} voxels, model has {}",
                r.scan_id,
                r.n_voxels(),
                model.n_voxels()
            ));
        }
        let pred = predict(model, d)?;
        per_scan.push(score_correlation(&pred, &r.data)?.values);
    }
    let ids = designs.iter().map(|d| d.scan_id.clone()).collect();
    let table = ScanScoreTable::from_scans(model.layer, ids, per_scan)?;
    let mut mean = table.layer_mean(0);
    mean.source = format!("{}->{} layer {}", model.modality, model.modality.other(), model.layer);
    Ok(LayerScores { table, mean })
}

#[derive(Debug, Clone)]
pub struct LayerSelection {
    pub scores: ScoreMap,
    /// `selected[scan][voxel]` is the layer chosen while `scan` was held out.
    pub selected: Vec<Vec<u32>>,
}

fn argmax_lowest(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Best layer per voxel chosen on the other test scans, scored on the held-out one.
pub fn layer_select_bootstrap(table: &ScanScoreTable) -> Result<LayerSelection> {
    let n_scans = table.n_scans();
    let m = table.n_voxels;
    if n_scans < 2 {
        warn!("layer selection with a single test scan falls back to the global argmax");
        let mut selected = vec![0u32; m];
        let values = (0..m)
            .map(|v| match argmax_lowest((0..table.n_layers()).map(|l| table.get(l, 0, v))) {
                Some(l) => {
                    selected[v] = table.layers[l];
                    table.get(l, 0, v)
                }
                None => f64::NAN,
            })
            .collect();
        return Ok(LayerSelection {
            scores: ScoreMap::new(values, ScoreKind::Correlation, "layer-selected"),
            selected: vec![selected],
        });
    }
    let mut selected = vec![vec![0u32; m]; n_scans];
    let mut per_scan = vec![vec![f64::NAN; m]; n_scans];
    for j in 0..n_scans {
        for v in 0..m {
            let loo = (0..table.n_layers()).map(|l| table.voxel_mean(l, v, Some(j)));
            if let Some(l) = argmax_lowest(loo) {
                selected[j][v] = table.layers[l];
                per_scan[j][v] = table.get(l, j, v);
            }
        }
    }
    let values = (0..m)
        .map(|v| nan_mean(&per_scan.iter().map(|s| s[v]).collect::<Vec<_>>()))
        .collect();
    Ok(LayerSelection {
        scores: ScoreMap::new(values, ScoreKind::Correlation, "layer-selected"),
        selected,
    })
}

/// Negates each held-out scan's score wherever the other scans average below zero.
/// Applied independently to every layer of the table.
pub fn sign_flip_table(table: &ScanScoreTable) -> Result<ScanScoreTable> {
    if table.n_scans() < 2 {
        return Err(arg_err!("sign correction needs at least 2 test scans"));
    }
    let mut out = table.clone();
    for l in 0..table.n_layers() {
        for j in 0..table.n_scans() {
            for v in 0..table.n_voxels {
                if table.voxel_mean(l, v, Some(j)) < 0.0 {
                    let idx = (l * table.n_scans() + j) * table.n_voxels + v;
                    out.values[idx] = -table.values[idx];
                }
            }
        }
    }
    Ok(out)
}

/// Sign-corrected mean score per voxel of a single-layer table.
pub fn sign_flip_correct(table: &ScanScoreTable) -> Result<ScoreMap> {
    if table.n_layers() != 1 {
        return Err(arg_err!(
            "sign_flip_correct takes a single-layer table, got {} layers",
            table.n_layers()
        ));
    }
    let flipped = sign_flip_table(table)?;
    let mut map = flipped.layer_mean(0);
    map.source = format!("sign-corrected layer {}", table.layers[0]);
    Ok(map)
}

/// `cross / within` on significant voxels with a usable within score.
pub fn performance_ratio(cross: &ScoreMap, within: &ScoreMap, significant: &[bool]) -> Result<ScoreMap> {
    if cross.len() != within.len() || significant.len() != within.len() {
        return Err(arg_err!(
            "ratio inputs disagree on voxel count ({}, {}, {})",
            cross.len(),
            within.len(),
            significant.len()
        ));
    }
    let values = cross
        .values
        .iter()
        .zip(&within.values)
        .zip(significant)
        .map(|((&c, &w), &sig)| {
            if sig && w.abs() > 1e-6 && !c.is_nan() {
                c / w
            } else {
                f64::NAN
            }
        })
        .collect();
    Ok(ScoreMap::new(
        values,
        ScoreKind::Ratio,
        format!("{} / {}", cross.source, within.source),
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub difference: ScoreMap,
    pub mean_a: f64,
    pub mean_b: f64,
    pub mean_difference: f64,
    pub nan_a: usize,
    pub nan_b: usize,
}

/// Per-voxel `a - b` and the mean of each run.
pub fn compare_feature_sets(a: &ScoreMap, b: &ScoreMap) -> Result<Comparison> {
    if a.len() != b.len() {
        return Err(arg_err!("runs have {} and {} voxels", a.len(), b.len()));
    }
    let diff: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
    let difference = ScoreMap::new(
        diff,
        ScoreKind::Difference,
        format!("{} - {}", a.source, b.source),
    );
    Ok(Comparison {
        mean_difference: difference.mean(),
        difference,
        mean_a: a.mean(),
        mean_b: b.mean(),
        nan_a: a.nan_count(),
        nan_b: b.nan_count(),
    })
}
