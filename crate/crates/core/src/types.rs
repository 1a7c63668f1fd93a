//! Core domain types shared by every pipeline stage.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

/// Minimum TR count of a response scan; block resampling needs two 10-TR blocks.
pub const MIN_RESPONSE_TRS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Language,
    Vision,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Language => "language",
            Modality::Vision => "vision",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Language => Modality::Vision,
            Modality::Vision => Modality::Language,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "language" => Ok(Modality::Language),
            "vision" => Ok(Modality::Vision),
            other => Err(arg_err!("unknown modality '{other}'")),
        }
    }
}

/// On-disk precision of a stored payload. Compute is always f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub(crate) fn check_finite(data: &DMatrix<f64>, what: &str) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        let (r, c) = (pos % data.nrows(), pos / data.nrows());
        return Err(Error::Data(format!(
            "{what} contains a non-finite value at row {r}, column {c}"
        )));
    }
    Ok(())
}

/// Time-stamped stimulus features for one scan, layer and modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub scan_id: String,
    pub modality: Modality,
    pub layer: u32,
    pub sample_times: Vec<f64>,
    /// Rows are samples, columns are features.
    pub data: DMatrix<f64>,
    pub dtype: Dtype,
}

impl FeatureMatrix {
    pub fn new(
        scan_id: impl Into<String>,
        modality: Modality,
        layer: u32,
        sample_times: Vec<f64>,
        data: DMatrix<f64>,
    ) -> Result<Self> {
        let fm = FeatureMatrix {
            scan_id: scan_id.into(),
            modality,
            layer,
            sample_times,
            data,
            dtype: Dtype::F64,
        };
        fm.validate()?;
        Ok(fm)
    }

    pub fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.ncols() == 0 {
            return Err(Error::Data(format!(
                "features '{}' have zero feature dimension",
                self.scan_id
            )));
        }
        if self.sample_times.len() != self.data.nrows() {
            return Err(Error::Data(format!(
                "features '{}': {} sample times for {} rows",
                self.scan_id,
                self.sample_times.len(),
                self.data.nrows()
            )));
        }
        if self.sample_times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Data(format!(
                "features '{}': non-finite sample time",
                self.scan_id
            )));
        }
        if let Some(i) = self.sample_times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!(
                "features '{}': sample times not strictly increasing at index {}",
                self.scan_id,
                i + 1
            )));
        }
        check_finite(&self.data, &format!("features '{}'", self.scan_id))
    }
}

/// TR-aligned responses for one scan. Rows are TRs, columns are voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    pub scan_id: String,
    pub tr_seconds: f64,
    pub data: DMatrix<f64>,
    pub dtype: Dtype,
}

impl ResponseMatrix {
    pub fn new(scan_id: impl Into<String>, tr_seconds: f64, data: DMatrix<f64>) -> Result<Self> {
        let rm = ResponseMatrix {
            scan_id: scan_id.into(),
            tr_seconds,
            data,
            dtype: Dtype::F64,
        };
        rm.validate()?;
        Ok(rm)
    }

    pub fn n_trs(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_voxels(&self) -> usize {
        self.data.ncols()
    }

    /// Acquisition times `j * tr` of every TR.
    pub fn tr_grid(&self) -> Vec<f64> {
        tr_grid(self.n_trs(), self.tr_seconds)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tr_seconds > 0.0 && self.tr_seconds.is_finite()) {
            return Err(Error::Data(format!(
                "responses '{}': tr_seconds must be positive",
                self.scan_id
            )));
        }
        if self.data.nrows() < MIN_RESPONSE_TRS {
            return Err(Error::Data(format!(
                "responses '{}': {} TRs, need at least {MIN_RESPONSE_TRS}",
                self.scan_id,
                self.data.nrows()
            )));
        }
        if self.data.ncols() == 0 {
            return Err(Error::Data(format!(
                "responses '{}' have no voxels",
                self.scan_id
            )));
        }
        check_finite(&self.data, &format!("responses '{}'", self.scan_id))
    }
}

pub fn tr_grid(n_trs: usize, tr_seconds: f64) -> Vec<f64> {
    (0..n_trs).map(|j| j as f64 * tr_seconds).collect()
}

/// Checks that all scans of one subject share a voxel count.
pub fn common_voxel_count(responses: &[ResponseMatrix]) -> Result<usize> {
    let m = responses
        .first()
        .ok_or_else(|| arg_err!("no response scans given"))?
        .n_voxels();
    for r in responses {
        if r.n_voxels() != m {
            return Err(arg_err!(
                "voxel count mismatch: scan '{}' has {} voxels, expected {m}",
                r.scan_id,
                r.n_voxels()
            ));
        }
    }
    Ok(m)
}

/// FIR-delayed stimulus matrix: `D` column blocks of `k` features each.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub scan_id: String,
    pub data: DMatrix<f64>,
    pub delays_seconds: Vec<f64>,
    pub source_layer: u32,
    pub modality: Modality,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_delays(&self) -> usize {
        self.delays_seconds.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.data.ncols() / self.delays_seconds.len().max(1)
    }
}

/// Fitted encoding model.
///
/// `beta` is expressed in standardized units: design columns and responses
/// are z-scored with the stored statistics before the product is taken.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub beta: DMatrix<f64>,
    pub lambda_per_voxel: Vec<f64>,
    pub feature_means: Vec<f64>,
    pub feature_scales: Vec<f64>,
    pub response_means: Vec<f64>,
    pub response_scales: Vec<f64>,
    pub modality: Modality,
    pub layer: u32,
    pub delays_seconds: Vec<f64>,
}

impl WeightSet {
    pub fn n_voxels(&self) -> usize {
        self.beta.ncols()
    }

    pub fn n_delays(&self) -> usize {
        self.delays_seconds.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.beta.nrows() / self.n_delays().max(1)
    }

    /// Weights per raw feature unit, in response standard deviations.
    pub fn raw_feature_beta(&self) -> DMatrix<f64> {
        let mut out = self.beta.clone();
        for (mut row, &s) in out.row_iter_mut().zip(&self.feature_scales) {
            row /= s;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.beta.nrows();
        let m = self.beta.ncols();
        if self.delays_seconds.is_empty() || !p.is_multiple_of(self.delays_seconds.len()) {
            return Err(Error::Data(format!(
                "weight rows {p} not a multiple of {} delays",
                self.delays_seconds.len()
            )));
        }
        if self.feature_means.len() != p || self.feature_scales.len() != p {
            return Err(Error::Data("feature statistics length mismatch".into()));
        }
        if self.lambda_per_voxel.len() != m
            || self.response_means.len() != m
            || self.response_scales.len() != m
        {
            return Err(Error::Data("per-voxel vector length mismatch".into()));
        }
        check_finite(&self.beta, "weights")?;
        let all_finite = self
            .feature_means
            .iter()
            .chain(&self.feature_scales)
            .chain(&self.response_means)
            .chain(&self.response_scales)
            .chain(&self.lambda_per_voxel)
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Data("non-finite statistic in weight set".into()));
        }
        if self.feature_scales.iter().chain(&self.response_scales).any(|&s| s <= 0.0) {
            return Err(Error::Data("scales must be strictly positive".into()));
        }
        if self.lambda_per_voxel.iter().any(|&l| l <= 0.0) {
            return Err(Error::Data("regularization must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Correlation,
    Ratio,
    PValue,
    QValue,
    PcProjection,
    Difference,
}

/// Per-voxel scalar scores. NaN marks voxels without a defined value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub values: Vec<f64>,
    pub kind: ScoreKind,
    pub source: String,
}

impl ScoreMap {
    pub fn new(values: Vec<f64>, kind: ScoreKind, source: impl Into<String>) -> Self {
        ScoreMap {
            values,
            kind,
            source: source.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn nan_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    /// Mean over non-NaN voxels; NaN when every voxel is flagged.
    pub fn mean(&self) -> f64 {
        nan_mean(&self.values)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = match self.kind {
            ScoreKind::PValue | ScoreKind::QValue => {
                self.values.iter().any(|v| !(0.0..=1.0).contains(v))
            }
            ScoreKind::Correlation => self
                .values
                .iter()
                .any(|v| !v.is_nan() && !(-1.0 - 1e-12..=1.0 + 1e-12).contains(v)),
            _ => false,
        };
        if bad {
            return Err(Error::Data(format!(
                "score map '{}' has values outside the range of {:?}",
                self.source, self.kind
            )));
        }
        Ok(())
    }
}

pub fn nan_mean(values: &[f64]) -> f64 {
    let (sum, n) = values
        .iter()
        .filter(|v| !v.is_nan())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlignDirection {
    #[serde(rename = "image_to_caption")]
    ImageToCaption,
    #[serde(rename = "caption_to_image")]
    CaptionToImage,
}

impl AlignDirection {
    pub fn source(self) -> Modality {
        match self {
            AlignDirection::ImageToCaption => Modality::Vision,
            AlignDirection::CaptionToImage => Modality::Language,
        }
    }

    pub fn target(self) -> Modality {
        self.source().other()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AlignDirection::ImageToCaption => "image_to_caption",
            AlignDirection::CaptionToImage => "caption_to_image",
        }
    }

    /// Direction mapping features of `from` into the space of `from.other()`.
    pub fn from_source(from: Modality) -> AlignDirection {
        match from {
            Modality::Vision => AlignDirection::ImageToCaption,
            Modality::Language => AlignDirection::CaptionToImage,
        }
    }
}

/// Affine map `x -> matrix * x + intercept` between two feature spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMap {
    /// `k_target x k_source`.
    pub matrix: DMatrix<f64>,
    pub intercept: DVector<f64>,
    pub direction: AlignDirection,
    pub layer: u32,
    pub fit_lambda: f64,
}

impl AlignmentMap {
    pub fn source_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn target_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.intercept.len() != self.matrix.nrows() {
            return Err(Error::Data("alignment intercept length mismatch".into()));
        }
        check_finite(&self.matrix, "alignment matrix")?;
        if self.intercept.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("alignment intercept not finite".into()));
        }
        if !(self.fit_lambda > 0.0) {
            return Err(Error::Data("alignment lambda must be positive".into()));
        }
        Ok(())
    }
}
