//! XEF1 array stores and persistence of fitted artifacts.
//!
//! A store is a directory holding `data.bin` and `manifest.json`.
//! `data.bin` layout (little-endian):
//!
//! | bytes  | content                          |
//! |--------|----------------------------------|
//! | 0..4   | magic `XEF1`                     |
//! | 4      | dtype code (1 = f32, 2 = f64)    |
//! | 5      | reserved, always 0               |
//! | 6..10  | u32 row count                    |
//! | 10..14 | u32 column count                 |
//! | 14..   | values, row-major                |

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    check_finite, AlignDirection, AlignmentMap, Dtype, FeatureMatrix, Modality, ResponseMatrix,
    ScoreMap, WeightSet,
};

pub const MAGIC: &[u8; 4] = b"XEF1";
pub const HEADER_LEN: usize = 14;
pub const DATA_FILE: &str = "data.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreRole {
    Features,
    Responses,
}

/// `manifest.json` of a store. Field order is the serialized key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub role: StoreRole,
    pub scan_id: String,
    pub modality: Option<Modality>,
    pub layer: Option<u32>,
    pub tr_seconds: Option<f64>,
    pub sample_times: Option<Vec<f64>>,
    pub n_rows: usize,
    pub n_cols: usize,
    pub dtype: Dtype,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Store {
    Features(FeatureMatrix),
    Responses(ResponseMatrix),
}

/// Serializes a matrix into the XEF1 binary layout.
pub fn encode_array(data: &DMatrix<f64>, dtype: Dtype) -> Result<Vec<u8>> {
    let (rows, cols) = data.shape();
    let rows32 = u32::try_from(rows).map_err(|_| Error::Arg("too many rows for XEF1".into()))?;
    let cols32 = u32::try_from(cols).map_err(|_| Error::Arg("too many columns for XEF1".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * dtype.width());
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(0);
    out.extend_from_slice(&rows32.to_le_bytes());
    out.extend_from_slice(&cols32.to_le_bytes());
    for r in 0..rows {
        for c in 0..cols {
            let v = data[(r, c)];
            match dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

/// Parses an XEF1 payload, widening f32 values to f64.
pub fn decode_array(bytes: &[u8]) -> Result<(DMatrix<f64>, Dtype)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "payload of {} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
    }
    let dtype = Dtype::from_code(bytes[4])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[4])))?;
    if bytes[5] != 0 {
        return Err(Error::Format(format!("reserved byte is {}, expected 0", bytes[5])));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.width()))
        .ok_or_else(|| Error::Corrupt("dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Corrupt(format!(
            "header declares {rows}x{cols} {dtype:?} ({expected} bytes), payload has {} bytes",
            payload.len()
        )));
    }
    let values: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((DMatrix::from_row_slice(rows, cols, &values), dtype))
}

pub fn write_array(path: &Path, data: &DMatrix<f64>, dtype: Dtype) -> Result<()> {
    let bytes = encode_array(data, dtype)?;
    write_bytes(path, &bytes)
}

/// Reads a bare XEF1 array file, rejecting non-finite values.
pub fn read_array(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (data, _) = decode_array(&bytes)?;
    check_finite(&data, &path.display().to_string())?;
    Ok(data)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path.display().to_string())
        } else {
            Error::io(path, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_store(store: &Store, dir: &Path) -> Result<()> {
    let (manifest, data, dtype) = match store {
        Store::Features(f) => {
            f.validate()?;
            (
                Manifest {
                    role: StoreRole::Features,
                    scan_id: f.scan_id.clone(),
                    modality: Some(f.modality),
                    layer: Some(f.layer),
                    tr_seconds: None,
                    sample_times: Some(f.sample_times.clone()),
                    n_rows: f.data.nrows(),
                    n_cols: f.data.ncols(),
                    dtype: f.dtype,
                },
                &f.data,
                f.dtype,
            )
        }
        Store::Responses(r) => {
            r.validate()?;
            (
                Manifest {
                    role: StoreRole::Responses,
                    scan_id: r.scan_id.clone(),
                    modality: None,
                    layer: None,
                    tr_seconds: Some(r.tr_seconds),
                    sample_times: None,
                    n_rows: r.data.nrows(),
                    n_cols: r.data.ncols(),
                    dtype: r.dtype,
                },
                &r.data,
                r.dtype,
            )
        }
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_array(&dir.join(DATA_FILE), data, dtype)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn read_store(dir: &Path) -> Result<Store> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let data_path = dir.join(DATA_FILE);
    let bytes = fs::read(&data_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(data_path.display().to_string())
        } else {
            Error::io(&data_path, e)
        }
    })?;
    let (data, dtype) = decode_array(&bytes)?;
    if data.nrows() != manifest.n_rows || data.ncols() != manifest.n_cols {
        return Err(Error::Corrupt(format!(
            "manifest declares {}x{}, payload is {}x{}",
            manifest.n_rows,
            manifest.n_cols,
            data.nrows(),
            data.ncols()
        )));
    }
    if dtype != manifest.dtype {
        return Err(Error::Corrupt(format!(
            "manifest dtype {:?} disagrees with payload dtype {dtype:?}",
            manifest.dtype
        )));
    }
    match manifest.role {
        StoreRole::Features => {
            let modality = manifest
                .modality
                .ok_or_else(|| Error::Format("feature manifest lacks modality".into()))?;
            let layer = manifest
                .layer
                .ok_or_else(|| Error::Format("feature manifest lacks layer".into()))?;
            let sample_times = manifest
                .sample_times
                .ok_or_else(|| Error::Format("feature manifest lacks sample_times".into()))?;
            if sample_times.len() != manifest.n_rows {
                return Err(Error::Corrupt(format!(
                    "{} sample times for {} rows",
                    sample_times.len(),
                    manifest.n_rows
                )));
            }
            let f = FeatureMatrix {
                scan_id: manifest.scan_id,
                modality,
                layer,
                sample_times,
                data,
                dtype,
            };
            f.validate()?;
            Ok(Store::Features(f))
        }
        StoreRole::Responses => {
            let tr_seconds = manifest
                .tr_seconds
                .ok_or_else(|| Error::Format("response manifest lacks tr_seconds".into()))?;
            let r = ResponseMatrix {
                scan_id: manifest.scan_id,
                tr_seconds,
                data,
                dtype,
            };
            r.validate()?;
            Ok(Store::Responses(r))
        }
    }
}

pub fn read_features(dir: &Path) -> Result<FeatureMatrix> {
    match read_store(dir)? {
        Store::Features(f) => Ok(f),
        Store::Responses(_) => Err(Error::Format(format!(
            "{} holds responses, expected features",
            dir.display()
        ))),
    }
}

pub fn read_responses(dir: &Path) -> Result<ResponseMatrix> {
    match read_store(dir)? {
        Store::Responses(r) => Ok(r),
        Store::Features(_) => Err(Error::Format(format!(
            "{} holds features, expected responses",
            dir.display()
        ))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightMeta {
    modality: Modality,
    layer: u32,
    delays_seconds: Vec<f64>,
    n_rows: usize,
    n_voxels: usize,
    lambda_per_voxel: Vec<f64>,
    feature_means: Vec<f64>,
    feature_scales: Vec<f64>,
    response_means: Vec<f64>,
    response_scales: Vec<f64>,
    fit: serde_json::Value,
}

/// Writes `beta.bin` and `weights.json`. `fit` carries run metadata such as
/// the lambda grid, seed and config hash.
pub fn write_weights(ws: &WeightSet, dir: &Path, fit: serde_json::Value) -> Result<()> {
    ws.validate()?;
    write_array(&dir.join("beta.bin"), &ws.beta, Dtype::F64)?;
    let meta = WeightMeta {
        modality: ws.modality,
        layer: ws.layer,
        delays_seconds: ws.delays_seconds.clone(),
        n_rows: ws.beta.nrows(),
        n_voxels: ws.beta.ncols(),
        lambda_per_voxel: ws.lambda_per_voxel.clone(),
        feature_means: ws.feature_means.clone(),
        feature_scales: ws.feature_scales.clone(),
        response_means: ws.response_means.clone(),
        response_scales: ws.response_scales.clone(),
        fit,
    };
    write_json(&dir.join("weights.json"), &meta)
}

pub fn read_weights(dir: &Path) -> Result<WeightSet> {
    let meta: WeightMeta = read_json(&dir.join("weights.json"))?;
    let beta = read_array(&dir.join("beta.bin"))?;
    if beta.shape() != (meta.n_rows, meta.n_voxels) {
        return Err(Error::Corrupt(format!(
            "weights.json declares {}x{}, beta.bin is {}x{}",
            meta.n_rows,
            meta.n_voxels,
            beta.nrows(),
            beta.ncols()
        )));
    }
    let ws = WeightSet {
        beta,
        lambda_per_voxel: meta.lambda_per_voxel,
        feature_means: meta.feature_means,
        feature_scales: meta.feature_scales,
        response_means: meta.response_means,
        response_scales: meta.response_scales,
        modality: meta.modality,
        layer: meta.layer,
        delays_seconds: meta.delays_seconds,
    };
    ws.validate()?;
    Ok(ws)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlignmentMeta {
    direction: AlignDirection,
    layer: u32,
    fit_lambda: f64,
    k_source: usize,
    k_target: usize,
    intercept: Vec<f64>,
}

pub fn alignment_dir(root: &Path, direction: AlignDirection, layer: u32) -> std::path::PathBuf {
    root.join(format!("{}_layer{layer:02}", direction.as_str()))
}

pub fn write_alignment(map: &AlignmentMap, dir: &Path) -> Result<()> {
    map.validate()?;
    write_array(&dir.join("matrix.bin"), &map.matrix, Dtype::F64)?;
    let meta = AlignmentMeta {
        direction: map.direction,
        layer: map.layer,
        fit_lambda: map.fit_lambda,
        k_source: map.source_dim(),
        k_target: map.target_dim(),
        intercept: map.intercept.iter().copied().collect(),
    };
    write_json(&dir.join("alignment.json"), &meta)
}

pub fn read_alignment(dir: &Path) -> Result<AlignmentMap> {
    let meta: AlignmentMeta = read_json(&dir.join("alignment.json"))?;
    let matrix = read_array(&dir.join("matrix.bin"))?;
    if matrix.shape() != (meta.k_target, meta.k_source) {
        return Err(Error::Corrupt("alignment matrix shape disagrees with metadata".into()));
    }
    let map = AlignmentMap {
        matrix,
        intercept: DVector::from_vec(meta.intercept),
        direction: meta.direction,
        layer: meta.layer,
        fit_lambda: meta.fit_lambda,
    };
    map.validate()?;
    Ok(map)
}

/// Writes `<stem>.csv` (`voxel_id,value`) and `<stem>.bin` (m x 1 XEF1).
pub fn write_score_map(map: &ScoreMap, dir: &Path, stem: &str) -> Result<()> {
    let mut csv = String::from("voxel_id,value\n");
    for (i, v) in map.values.iter().enumerate() {
        csv.push_str(&format!("{i},{v}\n"));
    }
    write_bytes(&dir.join(format!("{stem}.csv")), csv.as_bytes())?;
    let col = DMatrix::from_column_slice(map.values.len(), 1, &map.values);
    write_array(&dir.join(format!("{stem}.bin")), &col, Dtype::F64)
}

/// Reads the values of a score map written by [`write_score_map`]. NaN flags survive.
pub fn read_score_values(dir: &Path, stem: &str) -> Result<Vec<f64>> {
    let path = dir.join(format!("{stem}.bin"));
    let bytes = fs::read(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path.display().to_string())
        } else {
            Error::io(&path, e)
        }
    })?;
    let (data, _) = decode_array(&bytes)?;
    if data.ncols() != 1 {
        return Err(Error::Corrupt(format!("{} is not a single column", path.display())));
    }
    Ok(data.column(0).iter().copied().collect())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}
