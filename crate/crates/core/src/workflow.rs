//! Multi-step analyses shared by the command line and the test suites.

use serde::{Deserialize, Serialize};

use crate::alignment::{apply_alignment, fit_alignment, AlignConfig};
use crate::dataset::designs_for;
use crate::error::{arg_err, Error, Result};
use crate::pca::{collapse_delays, fit_pca, select_top_voxels, PcaBasis, SelectCriterion};
use crate::ridge::{fit_encoding_model, FitResult, RidgeConfig};
use crate::temporal::DesignConfig;
use crate::transfer::{cross_modality_scores, within_modality_scores, LayerScores};
use crate::types::{
    AlignDirection, AlignmentMap, DesignMatrix, FeatureMatrix, Modality, ResponseMatrix, ScoreMap, WeightSet,
};

/// Designs paired with their (possibly trimmed) responses.
#[derive(Debug, Clone)]
pub struct ScanSet {
    pub designs: Vec<DesignMatrix>,
    pub responses: Vec<ResponseMatrix>,
}

impl ScanSet {
    pub fn build(features: &[FeatureMatrix], responses: &[ResponseMatrix], cfg: &DesignConfig) -> Result<Self> {
        let (designs, responses) = designs_for(features, responses, cfg)?;
        Ok(ScanSet { designs, responses })
    }

    pub fn pairs(&self) -> Vec<(DesignMatrix, ResponseMatrix)> {
        self.designs.iter().cloned().zip(self.responses.iter().cloned()).collect()
    }

    pub fn fit(&self, cfg: &RidgeConfig) -> Result<FitResult> {
        fit_encoding_model(&self.designs, &self.responses, cfg)
    }

    pub fn within(&self, cfg: &RidgeConfig) -> Result<LayerScores> {
        within_modality_scores(&self.pairs(), cfg)
    }
}

/// Fits the map that carries `direction.source()` features into the target space.
pub fn align_pairs(
    caption: &FeatureMatrix,
    image: &FeatureMatrix,
    direction: AlignDirection,
    cfg: &AlignConfig,
) -> Result<AlignmentMap> {
    if caption.modality != Modality::Language || image.modality != Modality::Vision {
        return Err(arg_err!("pairs must be caption (language) and image (vision) features"));
    }
    if caption.layer != image.layer {
        return Err(arg_err!(
            "caption layer {} differs from image layer {}",
            caption.layer,
            image.layer
        ));
    }
    let (source, target) = match direction {
        AlignDirection::ImageToCaption => (image, caption),
        AlignDirection::CaptionToImage => (caption, image),
    };
    Ok(fit_alignment(&source.data, &target.data, direction, caption.layer, cfg)?.map)
}

/// Error raised when features must cross modalities but no map was supplied.
pub fn missing_alignment(from: Modality, layer: u32) -> Error {
    let direction = AlignDirection::from_source(from);
    Error::Missing(format!(
        "AlignmentMap {} for layer {layer}; run `align` first to map {from} features into the {} space",
        direction.as_str(),
        from.other()
    ))
}

/// Expresses `features` in `model_modality` coordinates, applying `map` when
/// the modalities differ.
pub fn features_for_model(
    features: &[FeatureMatrix],
    model_modality: Modality,
    map: Option<&AlignmentMap>,
) -> Result<Vec<FeatureMatrix>> {
    let Some(first) = features.first() else {
        return Err(arg_err!("no target features"));
    };
    if first.modality == model_modality {
        return Ok(features.to_vec());
    }
    let map = map.ok_or_else(|| missing_alignment(first.modality, first.layer))?;
    if map.direction.target() != model_modality {
        return Err(arg_err!(
            "alignment {} does not produce {model_modality} features",
            map.direction.as_str()
        ));
    }
    features.iter().map(|f| apply_alignment(map, f)).collect()
}

/// Scores a model on scans of the other modality.
pub fn transfer_scores(
    model: &WeightSet,
    target_features: &[FeatureMatrix],
    target_responses: &[ResponseMatrix],
    map: Option<&AlignmentMap>,
    design: &DesignConfig,
) -> Result<LayerScores> {
    let aligned = features_for_model(target_features, model.modality, map)?;
    let set = ScanSet::build(&aligned, target_responses, design)?;
    cross_modality_scores(model, &set.designs, &set.responses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaConfig {
    #[serde(default = "default_top")]
    pub n_voxels: usize,
    #[serde(default)]
    pub normalize: bool,
}

fn default_top() -> usize {
    10_000
}

impl Default for PcaConfig {
    fn default() -> Self {
        PcaConfig {
            n_voxels: default_top(),
            normalize: false,
        }
    }
}

/// Language-weight PCA over the best-predicted voxels by `score`.
pub fn weight_pca(model: &WeightSet, score: &ScoreMap, cfg: &PcaConfig) -> Result<(PcaBasis, Vec<usize>)> {
    let collapsed = collapse_delays(model)?;
    let n = cfg.n_voxels.min(score.len() - score.nan_count());
    let voxels = select_top_voxels(score, n, SelectCriterion::Value, None)?;
    let basis = fit_pca(&collapsed.select_columns(&voxels), cfg.normalize)?;
    Ok((basis, voxels))
}
