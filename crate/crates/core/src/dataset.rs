//! On-disk dataset layout.
//!
//! ```text
//! <root>/dataset.json
//! <root>/features/<modality>/<scan>/layerNN/      XEF1 feature store
//! <root>/responses/<scan>/                        XEF1 response store
//! <root>/pairs/layerNN/{caption,image}/           paired caption/image features
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::store::{read_features, read_json, read_responses, write_json};
use crate::temporal::{build_design, DesignConfig};
use crate::types::{DesignMatrix, FeatureMatrix, Modality, ResponseMatrix};

pub const INDEX_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub tr_seconds: f64,
    pub n_voxels: usize,
    pub layers: Vec<u32>,
    pub language_scans: Vec<String>,
    pub vision_scans: Vec<String>,
    pub has_pairs: bool,
}

impl DatasetIndex {
    pub fn scans(&self, modality: Modality) -> &[String] {
        match modality {
            Modality::Language => &self.language_scans,
            Modality::Vision => &self.vision_scans,
        }
    }

    pub fn check_layer(&self, layer: u32) -> Result<()> {
        if self.layers.contains(&layer) {
            Ok(())
        } else {
            Err(arg_err!("layer {layer} not in dataset (layers {:?})", self.layers))
        }
    }
}

pub fn layer_name(layer: u32) -> String {
    format!("layer{layer:02}")
}

pub fn features_dir(root: &Path, modality: Modality, scan: &str, layer: u32) -> PathBuf {
    root.join("features")
        .join(modality.as_str())
        .join(scan)
        .join(layer_name(layer))
}

pub fn responses_dir(root: &Path, scan: &str) -> PathBuf {
    root.join("responses").join(scan)
}

/// Caption (language) or image (vision) side of the paired corpus.
pub fn pairs_dir(root: &Path, layer: u32, side: Modality) -> PathBuf {
    let name = match side {
        Modality::Language => "caption",
        Modality::Vision => "image",
    };
    root.join("pairs").join(layer_name(layer)).join(name)
}

pub fn read_index(root: &Path) -> Result<DatasetIndex> {
    read_json(&root.join(INDEX_FILE))
}

pub fn write_index(root: &Path, index: &DatasetIndex) -> Result<()> {
    write_json(&root.join(INDEX_FILE), index)
}

pub fn load_features(root: &Path, modality: Modality, scans: &[String], layer: u32) -> Result<Vec<FeatureMatrix>> {
    scans
        .iter()
        .map(|s| {
            let f = read_features(&features_dir(root, modality, s, layer))?;
            if f.modality != modality || f.layer != layer {
                return Err(arg_err!(
                    "store for scan '{s}' holds {} layer {}, expected {modality} layer {layer}",
                    f.modality,
                    f.layer
                ));
            }
            Ok(f)
        })
        .collect()
}

pub fn load_responses(root: &Path, scans: &[String]) -> Result<Vec<ResponseMatrix>> {
    scans
        .iter()
        .map(|s| read_responses(&responses_dir(root, s)))
        .collect()
}

/// Design matrices for paired feature and response scans, with the responses
/// trimmed to the same rows as the designs.
pub fn designs_for(
    features: &[FeatureMatrix],
    responses: &[ResponseMatrix],
    cfg: &DesignConfig,
) -> Result<(Vec<DesignMatrix>, Vec<ResponseMatrix>)> {
    if features.len() != responses.len() {
        return Err(arg_err!(
            "{} feature scans for {} response scans",
            features.len(),
            responses.len()
        ));
    }
    let mut designs = Vec::with_capacity(features.len());
    let mut trimmed = Vec::with_capacity(responses.len());
    for (f, r) in features.iter().zip(responses) {
        if f.scan_id != r.scan_id {
            return Err(arg_err!(
                "features of scan '{}' paired with responses of scan '{}'",
                f.scan_id,
                r.scan_id
            ));
        }
        designs.push(build_design(f, r.n_trs(), r.tr_seconds, cfg)?);
        if cfg.trim.is_none() {
            trimmed.push(r.clone());
        } else {
            let mut t = ResponseMatrix::new(r.scan_id.clone(), r.tr_seconds, cfg.trim.apply(&r.data)?)?;
            t.dtype = r.dtype;
            trimmed.push(t);
        }
    }
    Ok((designs, trimmed))
}
