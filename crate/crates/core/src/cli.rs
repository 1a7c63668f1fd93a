//! Batch commands behind the `xmodal` binary.
//!
//! Every command reads an optional JSON config (unknown keys rejected), takes
//! its seed, thread count and output directory from flags, and writes
//! `run.json` next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{fit_alignment, AlignConfig};
use crate::dataset::{load_features, load_responses, pairs_dir, read_index, DatasetIndex};
use crate::error::{arg_err, Error, Result};
use crate::pca::{collapse_delays, project_weights, select_top_voxels, SelectCriterion};
use crate::ridge::{fit_encoding_model, predict, score_correlation, RidgeConfig};
use crate::stats::{blockwise_null_scores, pc_spatial_corr_test, voxel_significance, PermConfig, VisionRefit};
use crate::store::{
    alignment_dir, decode_array, read_alignment, read_features, read_json, read_weights, write_alignment, write_array,
    write_json, write_score_map, write_text, write_weights,
};
use crate::synth::{generate_null_world, generate_world, write_world, WorldSpec};
use crate::temporal::DesignConfig;
use crate::transfer::{compare_feature_sets, layer_select_bootstrap, sign_flip_correct, ScanScoreTable};
use crate::types::{AlignDirection, AlignmentMap, Dtype, Modality, ScoreMap};
use crate::workflow::{features_for_model, missing_alignment, weight_pca, PcaConfig, ScanSet};

pub const RUN_FILE: &str = "run.json";
const TABLE_BIN: &str = "table.bin";
const TABLE_META: &str = "table.json";

#[derive(Debug, Parser)]
#[command(name = "xmodal", version, about = "Voxelwise encoding models and cross-modality transfer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config; every numeric parameter lives here.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; outputs do not depend on this value.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted ground truth.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Fit encoding models on every scan of one modality.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Leave-one-scan-out within-modality scores.
    Within {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit a model on one modality and score it on the other.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory holding `align` outputs.
        #[arg(long)]
        align: Option<PathBuf>,
        /// Output of `fit` to use instead of fitting the source model here.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum)]
        direction: Option<TransferDirection>,
    },
    /// Fit caption/image alignment maps on the paired corpus.
    Align {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Per-voxel best layer, chosen on held-out scans of a score run.
    Layers {
        #[command(flatten)]
        common: Common,
        /// Output directory of `within` or `transfer`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Sign-corrected mean scores of one layer of a score run.
    Signfix {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Blockwise permutation test of held-out prediction scores.
    Permtest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Principal components of delay-collapsed model weights.
    Pca {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Spatial correlation of language and vision weight projections per PC.
    Pcstat {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        align: Option<PathBuf>,
    },
    /// Per-voxel difference between two score runs.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Per-layer mean curves over score runs.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Fit { .. } => "fit",
            Command::Within { .. } => "within",
            Command::Transfer { .. } => "transfer",
            Command::Align { .. } => "align",
            Command::Layers { .. } => "layers",
            Command::Signfix { .. } => "signfix",
            Command::Permtest { .. } => "permtest",
            Command::Pca { .. } => "pca",
            Command::Pcstat { .. } => "pcstat",
            Command::Compare { .. } => "compare",
            Command::Report { .. } => "report",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Fit { common, .. }
            | Command::Within { common, .. }
            | Command::Transfer { common, .. }
            | Command::Align { common, .. }
            | Command::Layers { common, .. }
            | Command::Signfix { common, .. }
            | Command::Permtest { common, .. }
            | Command::Pca { common, .. }
            | Command::Pcstat { common, .. }
            | Command::Compare { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum TransferDirection {
    StoryToMovie,
    MovieToStory,
}

impl TransferDirection {
    fn model_modality(self) -> Modality {
        match self {
            TransferDirection::StoryToMovie => Modality::Language,
            TransferDirection::MovieToStory => Modality::Vision,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            TransferDirection::StoryToMovie => "story_to_movie",
            TransferDirection::MovieToStory => "movie_to_story",
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// `world.seed` is replaced by `--seed`.
    #[serde(default)]
    pub world: WorldSpec,
    /// Pure AR(1) noise responses with no stimulus tuning.
    #[serde(default)]
    pub null_world: bool,
}

fn default_language() -> Modality {
    Modality::Language
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_language")]
    pub modality: Modality,
    /// All dataset layers when absent.
    #[serde(default)]
    pub layers: Option<Vec<u32>>,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default)]
    pub ridge: RidgeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modality: Modality::Language,
            layers: None,
            design: DesignConfig::default(),
            ridge: RidgeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    /// Overridden by `--direction`; defaults to story_to_movie.
    #[serde(default)]
    pub direction: Option<TransferDirection>,
    #[serde(default)]
    pub layers: Option<Vec<u32>>,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default)]
    pub ridge: RidgeConfig,
}

fn default_align_direction() -> AlignDirection {
    AlignDirection::ImageToCaption
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignCmdConfig {
    #[serde(default = "default_align_direction")]
    pub direction: AlignDirection,
    #[serde(default)]
    pub layers: Option<Vec<u32>>,
    #[serde(default)]
    pub align: AlignConfig,
}

impl Default for AlignCmdConfig {
    fn default() -> Self {
        AlignCmdConfig {
            direction: default_align_direction(),
            layers: None,
            align: AlignConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerPick {
    /// Required when the run holds several layers.
    #[serde(default)]
    pub layer: Option<u32>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmptyConfig {}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermtestConfig {
    #[serde(default = "default_language")]
    pub modality: Modality,
    #[serde(default)]
    pub layer: u32,
    /// Held-out scan; the last scan when absent.
    #[serde(default)]
    pub test_scan: Option<String>,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default)]
    pub ridge: RidgeConfig,
    #[serde(default)]
    pub perm: PermConfig,
}

impl Default for PermtestConfig {
    fn default() -> Self {
        PermtestConfig {
            modality: Modality::Language,
            layer: 0,
            test_scan: None,
            design: DesignConfig::default(),
            ridge: RidgeConfig::default(),
            perm: PermConfig::default(),
        }
    }
}

fn default_n_project() -> usize {
    6
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaCmdConfig {
    #[serde(default = "default_language")]
    pub modality: Modality,
    #[serde(default)]
    pub layer: u32,
    /// Components whose weight projections are written.
    #[serde(default = "default_n_project")]
    pub n_project: usize,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default)]
    pub ridge: RidgeConfig,
    #[serde(default)]
    pub pca: PcaConfig,
}

impl Default for PcaCmdConfig {
    fn default() -> Self {
        PcaCmdConfig {
            modality: Modality::Language,
            layer: 0,
            n_project: default_n_project(),
            design: DesignConfig::default(),
            ridge: RidgeConfig::default(),
            pca: PcaConfig::default(),
        }
    }
}

fn default_components() -> Vec<usize> {
    (0..6).collect()
}

fn default_test_voxels() -> usize {
    10_000
}

fn default_pc_perm() -> PermConfig {
    PermConfig::for_pc_test()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcstatConfig {
    #[serde(default)]
    pub layer: u32,
    #[serde(default = "default_components")]
    pub components: Vec<usize>,
    /// Size of the multimodal voxel set (top voxels by the smaller of the two
    /// within-modality scores).
    #[serde(default = "default_test_voxels")]
    pub n_test_voxels: usize,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default)]
    pub ridge: RidgeConfig,
    #[serde(default)]
    pub pca: PcaConfig,
    #[serde(default = "default_pc_perm")]
    pub perm: PermConfig,
}

impl Default for PcstatConfig {
    fn default() -> Self {
        PcstatConfig {
            layer: 0,
            components: default_components(),
            n_test_voxels: default_test_voxels(),
            design: DesignConfig::default(),
            ridge: RidgeConfig::default(),
            pca: PcaConfig::default(),
            perm: default_pc_perm(),
        }
    }
}

/// Failure of a command, split by the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad config or missing inputs.
    Input(Error),
    Compute(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Input(_) => 2,
            Failure::Compute(_) => 3,
        }
    }

    pub fn error(&self) -> &Error {
        match self {
            Failure::Input(e) | Failure::Compute(e) => e,
        }
    }

    /// One-line JSON description for stderr.
    pub fn to_json(&self) -> String {
        let e = self.error();
        let kind = match e {
            Error::Format(_) => "format",
            Error::Corrupt(_) => "corrupt",
            Error::Data(_) => "data",
            Error::Arg(_) => "argument",
            Error::Trial(_) => "trial",
            Error::Missing(_) => "missing",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        };
        serde_json::json!({
            "status": if self.exit_code() == 2 { "input_error" } else { "compute_error" },
            "kind": kind,
            "message": e.to_string(),
        })
        .to_string()
    }
}

/// Input-side errors keep exit code 2 even when raised mid-computation.
fn classify(e: Error) -> Failure {
    match e {
        Error::Missing(_) | Error::Io { .. } | Error::Json { .. } | Error::Format(_) | Error::Corrupt(_) => {
            Failure::Input(e)
        }
        _ => Failure::Compute(e),
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => read_json(p),
    }
}

#[derive(Debug, Serialize)]
struct RunRecord<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    threads: usize,
    config_sha256: String,
    config: &'a C,
    inputs: Vec<String>,
    timestamp_unix: u64,
}

pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let bytes = serde_json::to_vec(config).map_err(|e| Error::json("<config>", e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_run<C: Serialize>(cmd: &Command, config: &C, inputs: Vec<String>) -> Result<()> {
    let common = cmd.common();
    let record = RunRecord {
        command: cmd.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed: common.seed,
        threads: common.threads,
        config_sha256: config_hash(config)?,
        config,
        inputs,
        timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    write_json(&common.out.join(RUN_FILE), &record)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Parses the config, then runs the command inside a pool of `--threads` workers.
pub fn run(cmd: &Command) -> std::result::Result<(), Failure> {
    let common = cmd.common();
    if common.threads == 0 {
        return Err(Failure::Input(arg_err!("--threads must be at least 1")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build()
        .map_err(|e| Failure::Compute(Error::Data(format!("thread pool: {e}"))))?;
    pool.install(|| dispatch(cmd))
}

macro_rules! parse_config {
    ($common:expr, $ty:ty) => {
        load_config::<$ty>($common.config.as_deref()).map_err(Failure::Input)?
    };
}

fn dispatch(cmd: &Command) -> std::result::Result<(), Failure> {
    let common = cmd.common();
    let seed = common.seed;
    let out = common.out.as_path();
    match cmd {
        Command::Synth { .. } => {
            let mut cfg = parse_config!(common, SynthConfig);
            cfg.world.seed = seed;
            cfg.world.validate().map_err(Failure::Input)?;
            synth(&cfg, out).map_err(classify)?;
            write_run(cmd, &cfg, vec![]).map_err(classify)
        }
        Command::Fit { data, .. } => {
            let mut cfg = parse_config!(common, ModelConfig);
            cfg.ridge.seed = seed;
            cfg.ridge.validate().map_err(Failure::Input)?;
            fit(&cfg, data, out).map_err(classify)?;
            write_run(cmd, &cfg, vec![path_str(data)]).map_err(classify)
        }
        Command::Within { data, .. } => {
            let mut cfg = parse_config!(common, ModelConfig);
            cfg.ridge.seed = seed;
            cfg.ridge.validate().map_err(Failure::Input)?;
            within(&cfg, data, out).map_err(classify)?;
            write_run(cmd, &cfg, vec![path_str(data)]).map_err(classify)
        }
        Command::Transfer {
            data,
            align,
            model,
            direction,
            ..
        } => {
            let mut cfg = parse_config!(common, TransferConfig);
            cfg.ridge.seed = seed;
            cfg.ridge.validate().map_err(Failure::Input)?;
            match (cfg.direction, *direction) {
                (Some(a), Some(b)) if a != b => {
                    return Err(Failure::Input(arg_err!(
                        "--direction {} conflicts with config direction {}",
                        b.as_str(),
                        a.as_str()
                    )))
                }
                (_, Some(d)) | (Some(d), None) => cfg.direction = Some(d),
                (None, None) => cfg.direction = Some(TransferDirection::StoryToMovie),
            }
            transfer(&cfg, data, align.as_deref(), model.as_deref(), out).map_err(classify)?;
            let mut inputs = vec![path_str(data)];
            inputs.extend(align.as_deref().map(path_str));
            inputs.extend(model.as_deref().map(path_str));
            write_run(cmd, &cfg, inputs).map_err(classify)
        }
        Command::Align { data, .. } => {
            let mut cfg = parse_config!(common, AlignCmdConfig);
            cfg.align.seed = seed;
            align(&cfg, data, out).map_err(classify)?;
            write_run(cmd, &cfg, vec![path_str(data)]).map_err(classify)
        }
        Command::Layers { input, .. } => {
            let cfg = parse_config!(common, EmptyConfig);
            layers(input, out).map_err(classify)?;
            write_run(cmd, &cfg, vec![path_str(input)]).map_err(classify)
        }
        Command::Signfix { input, .. } => {
            let cfg = parse_config!(common, LayerPick);
            signfix(&cfg, input, out).map_err(classify)?;
            write_run(cmd, &cfg, vec![path_str(input)]).map_err(classify)
        }
        Command::Permtest { data, .. } => {
            let mut cfg = parse_config!(common, PermtestConfig);
            cfg.ridge.seed = seed;
            cfg.perm.seed = seed;
            cfg.ridge.validate().map_err(Failure::Input)?;
            cfg.perm.validate().map_err(Failure::Input)?;
            permtest(&cfg, data, out).map_err(classify)?;
            write_run(cmd, &cfg, vec![path_str(data)]).map_err(classify)
        }
        Command::Pca { data, .. } => {
            let mut cfg = parse_config!(common, PcaCmdConfig);
            cfg.ridge.seed = seed;
            cfg.ridge.validate().map_err(Failure::Input)?;
            pca(&cfg, data, out).map_err(classify)?;
            write_run(cmd, &cfg, vec![path_str(data)]).map_err(classify)
        }
        Command::Pcstat { data, align, .. } => {
            let mut cfg = parse_config!(common, PcstatConfig);
            cfg.ridge.seed = seed;
            cfg.perm.seed = seed;
            cfg.ridge.validate().map_err(Failure::Input)?;
            cfg.perm.validate().map_err(Failure::Input)?;
            pcstat(&cfg, data, align.as_deref(), out).map_err(classify)?;
            let mut inputs = vec![path_str(data)];
            inputs.extend(align.as_deref().map(path_str));
            write_run(cmd, &cfg, inputs).map_err(classify)
        }
        Command::Compare { a, b, .. } => {
            let cfg = parse_config!(common, LayerPick);
            compare(&cfg, a, b, out).map_err(classify)?;
            write_run(cmd, &cfg, vec![path_str(a), path_str(b)]).map_err(classify)
        }
        Command::Report { runs, .. } => {
            let cfg = parse_config!(common, EmptyConfig);
            report(runs, out).map_err(classify)?;
            write_run(cmd, &cfg, runs.iter().map(|p| path_str(p)).collect()).map_err(classify)
        }
    }
}

fn synth(cfg: &SynthConfig, out: &Path) -> Result<()> {
    let world = if cfg.null_world {
        generate_null_world(&cfg.world)?
    } else {
        generate_world(&cfg.world)?
    };
    write_world(&world, out, cfg.null_world)?;
    info!("wrote {} voxels, {} layers to {}", cfg.world.m, cfg.world.n_layers, out.display());
    Ok(())
}

fn dataset_layers(index: &DatasetIndex, layers: Option<&[u32]>) -> Result<Vec<u32>> {
    match layers {
        None => Ok(index.layers.clone()),
        Some([]) => Err(arg_err!("layer list is empty")),
        Some(ls) => {
            for &l in ls {
                index.check_layer(l)?;
            }
            Ok(ls.to_vec())
        }
    }
}

fn scan_set(data: &Path, index: &DatasetIndex, modality: Modality, layer: u32, design: &DesignConfig) -> Result<ScanSet> {
    let scans = index.scans(modality);
    let features = load_features(data, modality, scans, layer)?;
    let responses = load_responses(data, scans)?;
    ScanSet::build(&features, &responses, design)
}

fn layer_dir(out: &Path, layer: u32) -> PathBuf {
    out.join(crate::dataset::layer_name(layer))
}

fn fit(cfg: &ModelConfig, data: &Path, out: &Path) -> Result<()> {
    let index = read_index(data)?;
    let layers = dataset_layers(&index, cfg.layers.as_deref())?;
    let mut summary = Vec::new();
    for layer in layers {
        let set = scan_set(data, &index, cfg.modality, layer, &cfg.design)?;
        let res = set.fit(&cfg.ridge)?;
        let best_cv: Vec<f64> = res
            .cv
            .best_index
            .iter()
            .enumerate()
            .map(|(v, &i)| res.cv.scores[(i, v)])
            .collect();
        let best_cv = ScoreMap::new(best_cv, crate::types::ScoreKind::Correlation, "cv");
        let meta = serde_json::json!({
            "lambda_grid": res.cv.lambda_grid,
            "n_cv_iters": cfg.ridge.n_cv_iters,
            "seed": cfg.ridge.seed,
            "scans": index.scans(cfg.modality),
        });
        let dir = layer_dir(out, layer);
        write_weights(&res.weights, &dir, meta)?;
        write_score_map(&best_cv, &dir, "cv_score")?;
        info!("layer {layer}: mean cv r {:.4}", best_cv.mean());
        summary.push(serde_json::json!({ "layer": layer, "mean_cv_r": json_f64(best_cv.mean()) }));
    }
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({ "modality": cfg.modality, "layers": summary }),
    )
}

/// NaN has no JSON form; it is written as null.
fn json_f64(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::Value::Null
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableMeta {
    pub kind: String,
    pub modality: Modality,
    pub layers: Vec<u32>,
    pub scans: Vec<String>,
    pub n_voxels: usize,
}

/// Writes a score table as `table.bin` (one row per layer and scan) plus
/// `table.json`, and each layer's mean map.
pub fn write_table(table: &ScanScoreTable, meta: &TableMeta, out: &Path) -> Result<()> {
    let rows = table.n_layers() * table.n_scans();
    let data = DMatrix::from_row_slice(rows, table.n_voxels, &table.values);
    write_array(&out.join(TABLE_BIN), &data, Dtype::F64)?;
    write_json(&out.join(TABLE_META), meta)?;
    for (l, &layer) in table.layers.iter().enumerate() {
        write_score_map(&table.layer_mean(l), &layer_dir(out, layer), "mean")?;
    }
    Ok(())
}

pub fn read_table(dir: &Path) -> Result<(ScanScoreTable, TableMeta)> {
    let meta: TableMeta = read_json(&dir.join(TABLE_META))?;
    let path = dir.join(TABLE_BIN);
    let bytes = fs::read(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path_str(&path))
        } else {
            Error::Io {
                path: path.clone(),
                source: e,
            }
        }
    })?;
    let (data, _) = decode_array(&bytes)?;
    if data.shape() != (meta.layers.len() * meta.scans.len(), meta.n_voxels) {
        return Err(Error::Corrupt(format!("{} disagrees with {TABLE_META}", path_str(&path))));
    }
    let values = data.transpose().as_slice().to_vec();
    let table = ScanScoreTable::new(meta.layers.clone(), meta.scans.clone(), meta.n_voxels, values)?;
    Ok((table, meta))
}

fn within(cfg: &ModelConfig, data: &Path, out: &Path) -> Result<()> {
    let index = read_index(data)?;
    let layers = dataset_layers(&index, cfg.layers.as_deref())?;
    let mut tables = Vec::new();
    let mut summary = Vec::new();
    for layer in layers {
        let set = scan_set(data, &index, cfg.modality, layer, &cfg.design)?;
        let scores = set.within(&cfg.ridge)?;
        info!("layer {layer}: mean within r {:.4}", scores.mean.mean());
        summary.push(layer_summary(layer, &scores.mean));
        tables.push(scores.table);
    }
    let table = ScanScoreTable::stack(&tables)?;
    let meta = TableMeta {
        kind: "within".into(),
        modality: cfg.modality,
        layers: table.layers.clone(),
        scans: table.scans.clone(),
        n_voxels: table.n_voxels,
    };
    write_table(&table, &meta, out)?;
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({ "modality": cfg.modality, "layers": summary }),
    )
}

fn layer_summary(layer: u32, mean: &ScoreMap) -> serde_json::Value {
    serde_json::json!({
        "layer": layer,
        "mean_r": json_f64(mean.mean()),
        "n_nan": mean.nan_count(),
    })
}

/// Loads the alignment carrying `from` features into the other space.
fn load_map(root: Option<&Path>, from: Modality, layer: u32) -> Result<AlignmentMap> {
    let Some(root) = root else {
        return Err(missing_alignment(from, layer));
    };
    let dir = alignment_dir(root, AlignDirection::from_source(from), layer);
    if !dir.is_dir() {
        return Err(missing_alignment(from, layer));
    }
    read_alignment(&dir)
}

fn transfer(cfg: &TransferConfig, data: &Path, align: Option<&Path>, model: Option<&Path>, out: &Path) -> Result<()> {
    let direction = cfg.direction.unwrap_or(TransferDirection::StoryToMovie);
    let source = direction.model_modality();
    let target = source.other();
    let index = read_index(data)?;
    let layers = dataset_layers(&index, cfg.layers.as_deref())?;
    let mut tables = Vec::new();
    let mut summary = Vec::new();
    for layer in layers {
        // the map is checked before any fitting
        let map = load_map(align, target, layer)?;
        let weights = match model {
            Some(dir) => {
                let ws = read_weights(&layer_dir(dir, layer))?;
                if ws.modality != source || ws.layer != layer {
                    return Err(arg_err!(
                        "model holds {} layer {}, {} needs {source} layer {layer}",
                        ws.modality,
                        ws.layer,
                        direction.as_str()
                    ));
                }
                ws
            }
            None => scan_set(data, &index, source, layer, &cfg.design)?.fit(&cfg.ridge)?.weights,
        };
        let features = load_features(data, target, index.scans(target), layer)?;
        let responses = load_responses(data, index.scans(target))?;
        let aligned = features_for_model(&features, source, Some(&map))?;
        let set = ScanSet::build(&aligned, &responses, &cfg.design)?;
        let scores = crate::transfer::cross_modality_scores(&weights, &set.designs, &set.responses)?;
        info!("layer {layer}: mean {} r {:.4}", direction.as_str(), scores.mean.mean());
        summary.push(layer_summary(layer, &scores.mean));
        tables.push(scores.table);
    }
    let table = ScanScoreTable::stack(&tables)?;
    let meta = TableMeta {
        kind: direction.as_str().into(),
        modality: target,
        layers: table.layers.clone(),
        scans: table.scans.clone(),
        n_voxels: table.n_voxels,
    };
    write_table(&table, &meta, out)?;
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({ "direction": direction, "layers": summary }),
    )
}

fn align(cfg: &AlignCmdConfig, data: &Path, out: &Path) -> Result<()> {
    let index = read_index(data)?;
    if !index.has_pairs {
        return Err(Error::Missing(format!("{} has no paired caption/image corpus", path_str(data))));
    }
    let layers = dataset_layers(&index, cfg.layers.as_deref())?;
    let mut summary = Vec::new();
    for layer in layers {
        let source = read_features(&pairs_dir(data, layer, cfg.direction.source()))?;
        let target = read_features(&pairs_dir(data, layer, cfg.direction.target()))?;
        let fitted = fit_alignment(&source.data, &target.data, cfg.direction, layer, &cfg.align)?;
        write_alignment(&fitted.map, &alignment_dir(out, cfg.direction, layer))?;
        info!("layer {layer}: lambda {}", fitted.map.fit_lambda);
        summary.push(serde_json::json!({
            "layer": layer,
            "lambda": fitted.map.fit_lambda,
            "cv_scores": fitted.cv_scores.iter().map(|&v| json_f64(v)).collect::<Vec<_>>(),
        }));
    }
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({ "direction": cfg.direction, "layers": summary }),
    )
}

fn layers(input: &Path, out: &Path) -> Result<()> {
    let (table, meta) = read_table(input)?;
    let sel = layer_select_bootstrap(&table)?;
    write_score_map(&sel.scores, out, "selected_score")?;
    let mut csv = String::from("voxel_id");
    let held_out: Vec<&str> = if sel.selected.len() == table.n_scans() {
        table.scans.iter().map(String::as_str).collect()
    } else {
        vec!["all"]
    };
    for s in &held_out {
        csv.push_str(&format!(",{s}"));
    }
    csv.push('\n');
    for v in 0..table.n_voxels {
        csv.push_str(&v.to_string());
        for scan in &sel.selected {
            csv.push_str(&format!(",{}", scan[v]));
        }
        csv.push('\n');
    }
    write_text(&out.join("selected_layer.csv"), &csv)?;
    let counts: Vec<serde_json::Value> = table
        .layers
        .iter()
        .map(|&l| {
            let n: usize = sel.selected.iter().map(|s| s.iter().filter(|&&x| x == l).count()).sum();
            serde_json::json!({ "layer": l, "selections": n })
        })
        .collect();
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "kind": meta.kind,
            "mean_selected_r": json_f64(sel.scores.mean()),
            "layers": counts,
        }),
    )
}

fn pick_layer(table: &ScanScoreTable, layer: Option<u32>) -> Result<usize> {
    match layer {
        Some(l) => table
            .layer_index(l)
            .ok_or_else(|| arg_err!("layer {l} not in run (layers {:?})", table.layers)),
        None if table.n_layers() == 1 => Ok(0),
        None => Err(arg_err!(
            "run holds layers {:?}; set \"layer\" in the config",
            table.layers
        )),
    }
}

fn single_layer(table: &ScanScoreTable, l: usize) -> Result<ScanScoreTable> {
    let per_scan = (0..table.n_scans()).map(|s| table.scan_scores(l, s).to_vec()).collect();
    ScanScoreTable::from_scans(table.layers[l], table.scans.clone(), per_scan)
}

fn signfix(cfg: &LayerPick, input: &Path, out: &Path) -> Result<()> {
    let (table, meta) = read_table(input)?;
    let l = pick_layer(&table, cfg.layer)?;
    let corrected = sign_flip_correct(&single_layer(&table, l)?)?;
    write_score_map(&corrected, out, "corrected")?;
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "kind": meta.kind,
            "layer": table.layers[l],
            "mean_raw_r": json_f64(table.layer_mean(l).mean()),
            "mean_corrected_r": json_f64(corrected.mean()),
        }),
    )
}

fn permtest(cfg: &PermtestConfig, data: &Path, out: &Path) -> Result<()> {
    let index = read_index(data)?;
    index.check_layer(cfg.layer)?;
    let set = scan_set(data, &index, cfg.modality, cfg.layer, &cfg.design)?;
    let scans = index.scans(cfg.modality);
    let test = match &cfg.test_scan {
        Some(name) => scans
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| arg_err!("test scan '{name}' not in {} scans", cfg.modality))?,
        None => scans.len() - 1,
    };
    if scans.len() < 2 {
        return Err(arg_err!("permutation test needs a training scan besides the test scan"));
    }
    let train: Vec<usize> = (0..scans.len()).filter(|&i| i != test).collect();
    let designs: Vec<_> = train.iter().map(|&i| set.designs[i].clone()).collect();
    let responses: Vec<_> = train.iter().map(|&i| set.responses[i].clone()).collect();
    let model = fit_encoding_model(&designs, &responses, &cfg.ridge)?;
    let pred = predict(&model.weights, &set.designs[test])?;
    let actual = &set.responses[test].data;
    let observed = score_correlation(&pred, actual)?;
    let null = blockwise_null_scores(&pred, actual, &cfg.perm)?;
    let sig = voxel_significance(&observed, &null, &cfg.perm)?;
    let mut csv = String::from("voxel_id,statistic,p,q,reject\n");
    for v in 0..observed.len() {
        csv.push_str(&format!(
            "{v},{},{},{},{}\n",
            observed.values[v], sig.p.values[v], sig.q.values[v], sig.reject[v]
        ));
    }
    write_text(&out.join("significance.csv"), &csv)?;
    let finite: Vec<f64> = sig.p.values.iter().copied().filter(|p| !p.is_nan()).collect();
    let raw_rate = finite.iter().filter(|&&p| p < 0.05).count() as f64 / finite.len().max(1) as f64;
    info!("{} of {} voxels significant", sig.n_rejected(), observed.len());
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "test_scan": scans[test],
            "mean_r": json_f64(observed.mean()),
            "n_rejected": sig.n_rejected(),
            "raw_p_below_0_05": raw_rate,
            "fdr_q": cfg.perm.fdr_q,
            "fdr_method": cfg.perm.fdr_method,
        }),
    )
}

fn pca(cfg: &PcaCmdConfig, data: &Path, out: &Path) -> Result<()> {
    let index = read_index(data)?;
    index.check_layer(cfg.layer)?;
    let set = scan_set(data, &index, cfg.modality, cfg.layer, &cfg.design)?;
    let model = set.fit(&cfg.ridge)?;
    let scores = set.within(&cfg.ridge)?;
    let (basis, voxels) = weight_pca(&model.weights, &scores.mean, &cfg.pca)?;
    write_array(&out.join("components.bin"), &basis.components, Dtype::F64)?;
    write_array(
        &out.join("mean.bin"),
        &DMatrix::from_column_slice(basis.mean.len(), 1, basis.mean.as_slice()),
        Dtype::F64,
    )?;
    let collapsed = collapse_delays(&model.weights)?;
    for c in 0..cfg.n_project.min(basis.n_components()) {
        write_score_map(&project_weights(&collapsed, &basis, c)?, out, &format!("pc{c:02}"))?;
    }
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "modality": cfg.modality,
            "layer": cfg.layer,
            "voxels": voxels,
            "explained_variance": basis.explained_variance,
            "explained_ratio": basis.explained_ratio(),
            "beyond_rank": basis.beyond_rank,
            "normalized": basis.normalized,
        }),
    )
}

fn pcstat(cfg: &PcstatConfig, data: &Path, align: Option<&Path>, out: &Path) -> Result<()> {
    let index = read_index(data)?;
    index.check_layer(cfg.layer)?;
    let map = load_map(align, Modality::Vision, cfg.layer)?;
    let lang = scan_set(data, &index, Modality::Language, cfg.layer, &cfg.design)?;
    let lang_fit = lang.fit(&cfg.ridge)?;
    let lang_within = lang.within(&cfg.ridge)?;
    let movie = load_features(data, Modality::Vision, index.scans(Modality::Vision), cfg.layer)?;
    let aligned = features_for_model(&movie, Modality::Language, Some(&map))?;
    let vis = ScanSet::build(&aligned, &load_responses(data, index.scans(Modality::Vision))?, &cfg.design)?;
    let vis_fit = vis.fit(&cfg.ridge)?;
    let vis_within = vis.within(&cfg.ridge)?;
    let (basis, _) = weight_pca(&lang_fit.weights, &lang_within.mean, &cfg.pca)?;
    let available = lang_within
        .mean
        .values
        .iter()
        .zip(&vis_within.mean.values)
        .filter(|(a, b)| !a.is_nan() && !b.is_nan())
        .count();
    let voxels = select_top_voxels(
        &lang_within.mean,
        cfg.n_test_voxels.min(available),
        SelectCriterion::MinPair,
        Some(&vis_within.mean),
    )?;
    let vision = VisionRefit {
        designs: &vis.designs,
        responses: &vis.responses,
        lambda_per_voxel: &vis_fit.weights.lambda_per_voxel,
    };
    let lang_collapsed = collapse_delays(&lang_fit.weights)?;
    let res = pc_spatial_corr_test(&lang_collapsed, vision, &basis, &cfg.components, &voxels, &cfg.perm)?;
    let mut csv = String::from("pc,statistic,p,q,reject\n");
    for i in 0..res.components.len() {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            res.components[i], res.correlation[i], res.p[i], res.q[i], res.reject[i]
        ));
    }
    write_text(&out.join("pcstat.csv"), &csv)?;
    write_json(&out.join("summary.json"), &res)
}

fn load_mean(dir: &Path, layer: Option<u32>) -> Result<(ScoreMap, u32)> {
    let (table, meta) = read_table(dir)?;
    let l = pick_layer(&table, layer)?;
    let mut map = table.layer_mean(l);
    map.source = format!("{} layer {}", meta.kind, table.layers[l]);
    Ok((map, table.layers[l]))
}

fn compare(cfg: &LayerPick, a: &Path, b: &Path, out: &Path) -> Result<()> {
    let (ma, la) = load_mean(a, cfg.layer)?;
    let (mb, lb) = load_mean(b, cfg.layer)?;
    let cmp = compare_feature_sets(&ma, &mb)?;
    write_score_map(&cmp.difference, out, "difference")?;
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "layer_a": la,
            "layer_b": lb,
            "mean_a": json_f64(cmp.mean_a),
            "mean_b": json_f64(cmp.mean_b),
            "mean_difference": json_f64(cmp.mean_difference),
            "nan_a": cmp.nan_a,
            "nan_b": cmp.nan_b,
        }),
    )
}

fn run_name(p: &Path) -> String {
    p.file_name().map_or_else(|| path_str(p), |n| n.to_string_lossy().into_owned())
}

fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let mut curves = Vec::new();
    for dir in runs {
        let (table, meta) = read_table(dir)?;
        let points: Vec<(u32, f64)> = table
            .layers
            .iter()
            .enumerate()
            .map(|(l, &layer)| (layer, table.layer_mean(l).mean()))
            .collect();
        curves.push((run_name(dir), meta.kind, points));
    }
    let mut layers: Vec<u32> = curves.iter().flat_map(|c| c.2.iter().map(|p| p.0)).collect();
    layers.sort_unstable();
    layers.dedup();

    let mut csv = String::from("layer");
    for (name, _, _) in &curves {
        csv.push_str(&format!(",{name}"));
    }
    csv.push_str(",mean\n");
    let mut mean_curve = Vec::new();
    for &layer in &layers {
        csv.push_str(&layer.to_string());
        let vals: Vec<f64> = curves
            .iter()
            .map(|c| c.2.iter().find(|p| p.0 == layer).map_or(f64::NAN, |p| p.1))
            .collect();
        for v in &vals {
            csv.push_str(&format!(",{v}"));
        }
        let m = crate::types::nan_mean(&vals);
        csv.push_str(&format!(",{m}\n"));
        mean_curve.push(serde_json::json!({ "layer": layer, "mean_r": json_f64(m) }));
    }
    write_text(&out.join("report.csv"), &csv)?;
    let runs_json: Vec<serde_json::Value> = curves
        .iter()
        .map(|(name, kind, points)| {
            serde_json::json!({
                "run": name,
                "kind": kind,
                "curve": points
                    .iter()
                    .map(|&(l, v)| serde_json::json!({ "layer": l, "mean_r": json_f64(v) }))
                    .collect::<Vec<_>>(),
            })
        })
        .collect();
    write_json(
        &out.join("report.json"),
        &serde_json::json!({ "runs": runs_json, "mean": mean_curve }),
    )
}
