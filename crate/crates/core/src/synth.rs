//! Synthetic worlds with planted tuning, used as ground truth for every
//! downstream check.
//!
//! Stimuli are band-limited latent series expressed in language coordinates.
//! Vision features are a (possibly nonlinear) map of the same latents.
//! Responses are generated through the same design pipeline used for fitting,
//! so noiseless worlds are exactly realizable.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{features_dir, pairs_dir, responses_dir, write_index, DatasetIndex};
use crate::error::{arg_err, Result};
use crate::rng::{purpose, substream};
use crate::store::{write_array, write_json, write_store, Store};
use crate::temporal::{build_design, DesignConfig};
use crate::types::{Dtype, FeatureMatrix, Modality, ResponseMatrix, MIN_RESPONSE_TRS};

pub const TRUTH_FILE: &str = "truth.json";
pub const TRUTH_DIR: &str = "truth";

/// Private (non-shared) part of vision tuning in shared and inverted voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisionPrivate {
    /// Same private tuning as language.
    #[default]
    Copied,
    Independent,
    /// Vision is tuned to the shared subspace only.
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossMap {
    #[default]
    ExactAffine,
    NoisyAffine,
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub seed: u64,
    pub k_lang: usize,
    pub k_vis: usize,
    pub m: usize,
    pub n_scans_per_modality: usize,
    pub t_per_scan: usize,
    pub tr_seconds: f64,
    pub n_layers: usize,
    /// Weight of the latent common to all layers in each layer's features.
    pub layer_mix: f64,
    pub shared_dim: usize,
    /// Tuning spread inside the shared subspace.
    pub shared_sd: f64,
    /// Tuning spread in the complement of the shared subspace.
    pub private_sd: f64,
    pub vision_private: VisionPrivate,
    pub frac_shared_voxels: f64,
    pub frac_inverted_voxels: f64,
    pub frac_unimodal_voxels: f64,
    /// Noise standard deviation relative to a unit-variance signal.
    pub noise_sd: f64,
    pub cross_map: CrossMap,
    /// Additive feature noise of the noisy affine map.
    pub map_noise_sd: f64,
    pub n_pairs: usize,
    pub samples_per_tr: usize,
    pub n_sinusoids: usize,
    /// Highest latent frequency as a fraction of the TR Nyquist frequency.
    pub max_freq_fraction: f64,
    /// Gain of each delay block; one entry per design delay.
    pub hrf: Vec<f64>,
    /// AR(1) coefficient of null-world responses.
    pub ar_phi: f64,
    pub design: DesignConfig,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 0,
            k_lang: 32,
            k_vis: 32,
            m: 500,
            n_scans_per_modality: 3,
            t_per_scan: 300,
            tr_seconds: 2.0,
            n_layers: 1,
            layer_mix: 0.5,
            shared_dim: 3,
            shared_sd: 2.0,
            private_sd: 0.5,
            vision_private: VisionPrivate::Copied,
            frac_shared_voxels: 0.6,
            frac_inverted_voxels: 0.0,
            frac_unimodal_voxels: 0.0,
            noise_sd: 0.5,
            cross_map: CrossMap::ExactAffine,
            map_noise_sd: 0.1,
            n_pairs: 2000,
            samples_per_tr: 2,
            n_sinusoids: 12,
            max_freq_fraction: 0.6,
            hrf: vec![0.5, 1.0, 0.7, 0.3],
            ar_phi: 0.8,
            design: DesignConfig::default(),
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [
            self.frac_shared_voxels,
            self.frac_inverted_voxels,
            self.frac_unimodal_voxels,
        ];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(arg_err!("voxel fractions must lie in [0, 1]"));
        }
        if fracs.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(arg_err!("voxel fractions sum above 1"));
        }
        if self.k_lang == 0 || self.k_vis == 0 || self.m == 0 {
            return Err(arg_err!("k_lang, k_vis and m must be positive"));
        }
        if self.shared_dim > self.k_lang.min(self.k_vis) {
            return Err(arg_err!(
                "shared_dim {} exceeds min(k_lang, k_vis) = {}",
                self.shared_dim,
                self.k_lang.min(self.k_vis)
            ));
        }
        if self.n_scans_per_modality == 0 || self.n_layers == 0 {
            return Err(arg_err!("need at least one scan per modality and one layer"));
        }
        if self.t_per_scan < MIN_RESPONSE_TRS {
            return Err(arg_err!(
                "t_per_scan must be at least {MIN_RESPONSE_TRS}, got {}",
                self.t_per_scan
            ));
        }
        if !(self.tr_seconds > 0.0 && self.tr_seconds.is_finite()) {
            return Err(arg_err!("tr_seconds must be positive"));
        }
        if !(0.0..=1.0).contains(&self.layer_mix) {
            return Err(arg_err!("layer_mix must lie in [0, 1]"));
        }
        if self.noise_sd < 0.0 || self.map_noise_sd < 0.0 || self.shared_sd < 0.0 || self.private_sd < 0.0 {
            return Err(arg_err!("standard deviations must be non-negative"));
        }
        if self.samples_per_tr == 0 || self.n_sinusoids == 0 {
            return Err(arg_err!("samples_per_tr and n_sinusoids must be positive"));
        }
        if !(self.max_freq_fraction > 0.0 && self.max_freq_fraction <= 1.0) {
            return Err(arg_err!("max_freq_fraction must lie in (0, 1]"));
        }
        if self.hrf.len() != self.design.delays_seconds.len() {
            return Err(arg_err!(
                "{} hrf gains for {} delays",
                self.hrf.len(),
                self.design.delays_seconds.len()
            ));
        }
        if !self.design.trim.is_none() {
            return Err(arg_err!("world generation uses untrimmed designs"));
        }
        if !(self.ar_phi > -1.0 && self.ar_phi < 1.0) {
            return Err(arg_err!("ar_phi must lie in (-1, 1)"));
        }
        Ok(())
    }

    pub fn scan_id(&self, modality: Modality, scan: usize) -> String {
        match modality {
            Modality::Language => format!("story{:02}", scan + 1),
            Modality::Vision => format!("movie{:02}", scan + 1),
        }
    }

    fn scan_ids(&self, modality: Modality) -> Vec<String> {
        (0..self.n_scans_per_modality)
            .map(|s| self.scan_id(modality, s))
            .collect()
    }

    fn layers(&self) -> Vec<u32> {
        (0..self.n_layers as u32).collect()
    }

    fn sample_times(&self) -> Vec<f64> {
        let step = self.tr_seconds / self.samples_per_tr as f64;
        (0..self.t_per_scan * self.samples_per_tr)
            .map(|i| (i as f64 + 0.5) * step)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoxelClass {
    /// Same tuning in both modalities.
    Shared,
    /// Vision tuning negated on the shared subspace.
    Inverted,
    LanguageOnly,
    VisionOnly,
    Untuned,
}

impl VoxelClass {
    pub fn tuned_in(self, modality: Modality) -> bool {
        match self {
            VoxelClass::Shared | VoxelClass::Inverted => true,
            VoxelClass::LanguageOnly => modality == Modality::Language,
            VoxelClass::VisionOnly => modality == Modality::Vision,
            VoxelClass::Untuned => false,
        }
    }
}

/// One scan's stored features (one per layer) and responses.
#[derive(Debug, Clone)]
pub struct ScanData {
    pub features: Vec<FeatureMatrix>,
    pub responses: ResponseMatrix,
}

#[derive(Debug, Clone)]
pub struct PairSet {
    pub layer: u32,
    pub caption: FeatureMatrix,
    pub image: FeatureMatrix,
}

/// Affine vision map `v = M f + c` (or `M tanh(1.5 f) + c`).
#[derive(Debug, Clone)]
pub struct PlantedMap {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Truth {
    pub labels: Vec<VoxelClass>,
    pub best_layer: Vec<u32>,
    /// Orthonormal `k_lang x shared_dim` basis of the shared subspace.
    pub shared_basis: DMatrix<f64>,
    /// `(D k_lang) x m` weights in raw language-feature units, after signal scaling.
    pub beta_language: DMatrix<f64>,
    /// Vision-world weights in language coordinates.
    pub beta_vision: DMatrix<f64>,
    pub maps: Vec<PlantedMap>,
}

impl Truth {
    pub fn tuning(&self, modality: Modality, hrf: &[f64]) -> Result<DMatrix<f64>> {
        let beta = match modality {
            Modality::Language => &self.beta_language,
            Modality::Vision => &self.beta_vision,
        };
        let gain: f64 = hrf.iter().sum();
        Ok(crate::pca::collapse_beta(beta, hrf.len())? * (hrf.len() as f64 / gain))
    }

    pub fn voxels_of(&self, class: VoxelClass) -> Vec<usize> {
        (0..self.labels.len()).filter(|&v| self.labels[v] == class).collect()
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub language: Vec<ScanData>,
    pub vision: Vec<ScanData>,
    pub pairs: Vec<PairSet>,
    pub truth: Truth,
}

impl World {
    pub fn scans(&self, modality: Modality) -> &[ScanData] {
        match modality {
            Modality::Language => &self.language,
            Modality::Vision => &self.vision,
        }
    }

    pub fn features(&self, modality: Modality, layer: u32) -> Vec<FeatureMatrix> {
        self.scans(modality)
            .iter()
            .map(|s| s.features[layer as usize].clone())
            .collect()
    }

    pub fn responses(&self, modality: Modality) -> Vec<ResponseMatrix> {
        self.scans(modality).iter().map(|s| s.responses.clone()).collect()
    }

    pub fn index(&self) -> DatasetIndex {
        DatasetIndex {
            tr_seconds: self.spec.tr_seconds,
            n_voxels: self.spec.m,
            layers: self.spec.layers(),
            language_scans: self.spec.scan_ids(Modality::Language),
            vision_scans: self.spec.scan_ids(Modality::Vision),
            has_pairs: !self.pairs.is_empty(),
        }
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(rng))
}

/// Unit-variance sums of random sinusoids below the cutoff, one column per dim.
fn latent(spec: &WorldSpec, rng: &mut ChaCha8Rng, times: &[f64], dims: usize) -> DMatrix<f64> {
    let fmax = spec.max_freq_fraction / (2.0 * spec.tr_seconds);
    let amp = (2.0 / spec.n_sinusoids as f64).sqrt();
    let mut out = DMatrix::zeros(times.len(), dims);
    for j in 0..dims {
        for _ in 0..spec.n_sinusoids {
            // skip near-DC components so every scan has a stable mean
            let f = rng.random_range(0.1 * fmax..fmax);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            for (i, &t) in times.iter().enumerate() {
                out[(i, j)] += amp * (std::f64::consts::TAU * f * t + phase).cos();
            }
        }
    }
    out
}

/// Language-coordinate features of one scan, one matrix per layer.
fn scan_latents(spec: &WorldSpec, global_scan: usize, times: &[f64]) -> Vec<DMatrix<f64>> {
    let base = (global_scan * (spec.n_layers + 1)) as u64;
    let common = latent(spec, &mut substream(spec.seed, purpose::WORLD_LATENT, base), times, spec.k_lang);
    if spec.n_layers == 1 {
        return vec![common];
    }
    let a = spec.layer_mix;
    let b = (1.0 - a * a).sqrt();
    (0..spec.n_layers)
        .map(|l| {
            let mut rng = substream(spec.seed, purpose::WORLD_LATENT, base + 1 + l as u64);
            let own = latent(spec, &mut rng, times, spec.k_lang);
            &common * a + own * b
        })
        .collect()
}

fn planted_map(spec: &WorldSpec, layer: usize) -> PlantedMap {
    let mut rng = substream(spec.seed, purpose::WORLD_MAP, layer as u64);
    let matrix = gaussian(&mut rng, spec.k_vis, spec.k_lang) / (spec.k_lang as f64).sqrt();
    let offset = DVector::from_fn(spec.k_vis, |_, _| 0.5 * normal(&mut rng));
    PlantedMap { matrix, offset }
}

/// Maps language-coordinate rows into vision features; `noise_index` selects
/// the noise substream of the noisy map.
fn apply_map(spec: &WorldSpec, map: &PlantedMap, lang: &DMatrix<f64>, noise_index: u64) -> DMatrix<f64> {
    let input = match spec.cross_map {
        CrossMap::Nonlinear => lang.map(|v| (1.5 * v).tanh()),
        _ => lang.clone(),
    };
    let mut out = input * map.matrix.transpose();
    for mut row in out.row_iter_mut() {
        row += map.offset.transpose();
    }
    if spec.cross_map == CrossMap::NoisyAffine && spec.map_noise_sd > 0.0 {
        let mut rng = substream(spec.seed, purpose::WORLD_MAP, 1 << 32 | noise_index);
        out += gaussian(&mut rng, out.nrows(), out.ncols()) * spec.map_noise_sd;
    }
    out
}

fn voxel_labels(spec: &WorldSpec) -> (Vec<VoxelClass>, Vec<u32>) {
    let m = spec.m;
    let n_shared = (spec.frac_shared_voxels * m as f64).round() as usize;
    let n_inv = ((spec.frac_inverted_voxels * m as f64).round() as usize).min(m - n_shared);
    let n_uni = ((spec.frac_unimodal_voxels * m as f64).round() as usize).min(m - n_shared - n_inv);
    let mut labels = Vec::with_capacity(m);
    labels.extend(std::iter::repeat_n(VoxelClass::Shared, n_shared));
    labels.extend(std::iter::repeat_n(VoxelClass::Inverted, n_inv));
    labels.extend(std::iter::repeat_n(VoxelClass::LanguageOnly, n_uni - n_uni / 2));
    labels.extend(std::iter::repeat_n(VoxelClass::VisionOnly, n_uni / 2));
    labels.resize(m, VoxelClass::Untuned);
    let mut rng = substream(spec.seed, purpose::WORLD_LABELS, 0);
    // Fisher-Yates
    for i in (1..m).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    let mut rng = substream(spec.seed, purpose::WORLD_LABELS, 1);
    let best = (0..m).map(|_| rng.random_range(0..spec.n_layers as u32)).collect();
    (labels, best)
}

/// Per-voxel tuning (`k_lang x m`) in each modality, plus the shared basis.
fn tunings(spec: &WorldSpec, labels: &[VoxelClass]) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let k = spec.k_lang;
    let s = spec.shared_dim;
    let basis = gaussian(&mut substream(spec.seed, purpose::WORLD_TUNING, 0), k, k).qr().q();
    let u_s = basis.columns(0, s).into_owned();
    let u_p = basis.columns(s, k - s).into_owned();
    let mut lang = DMatrix::zeros(k, spec.m);
    let mut vis = DMatrix::zeros(k, spec.m);
    for (v, &class) in labels.iter().enumerate() {
        let mut rng = substream(spec.seed, purpose::WORLD_TUNING, 1 + v as u64);
        let a = DVector::from_fn(s, |_, _| normal(&mut rng));
        let b = DVector::from_fn(k - s, |_, _| normal(&mut rng));
        let a2 = DVector::from_fn(s, |_, _| normal(&mut rng));
        let b2 = DVector::from_fn(k - s, |_, _| normal(&mut rng));
        let shared = &u_s * a * spec.shared_sd;
        let private = &u_p * b * spec.private_sd;
        let private_vis = match spec.vision_private {
            VisionPrivate::Copied => private.clone(),
            VisionPrivate::Independent => &u_p * b2.clone() * spec.private_sd,
            VisionPrivate::Absent => DVector::zeros(k),
        };
        let (wl, wv) = match class {
            VoxelClass::Shared => (&shared + &private, &shared + &private_vis),
            VoxelClass::Inverted => (&shared + &private, -&shared + &private_vis),
            VoxelClass::LanguageOnly => (&shared + &private, DVector::zeros(k)),
            VoxelClass::VisionOnly => (DVector::zeros(k), &u_s * a2 * spec.shared_sd + &u_p * b2 * spec.private_sd),
            VoxelClass::Untuned => (DVector::zeros(k), DVector::zeros(k)),
        };
        lang.set_column(v, &wl);
        vis.set_column(v, &wv);
    }
    (lang, vis, u_s)
}

/// Stacks `hrf[d] * tuning` into `(D k) x m` weights.
fn delay_weights(tuning: &DMatrix<f64>, hrf: &[f64]) -> DMatrix<f64> {
    let k = tuning.nrows();
    let mut beta = DMatrix::zeros(k * hrf.len(), tuning.ncols());
    for (d, &h) in hrf.iter().enumerate() {
        beta.rows_mut(d * k, k).copy_from(&(tuning * h));
    }
    beta
}

/// Noise-free responses of every scan in one modality, each voxel driven by
/// its best layer. Rescales `beta` columns so the pooled signal has unit variance.
fn signals(
    spec: &WorldSpec,
    latents: &[Vec<DMatrix<f64>>],
    beta: &mut DMatrix<f64>,
    best_layer: &[u32],
) -> Result<Vec<DMatrix<f64>>> {
    let times = spec.sample_times();
    let mut out = Vec::with_capacity(latents.len());
    for (s, layers) in latents.iter().enumerate() {
        let mut sig = DMatrix::zeros(spec.t_per_scan, spec.m);
        for (l, data) in layers.iter().enumerate() {
            let voxels: Vec<usize> = (0..spec.m).filter(|&v| best_layer[v] as usize == l).collect();
            if voxels.is_empty() {
                continue;
            }
            let f = FeatureMatrix::new(format!("latent{s}"), Modality::Language, l as u32, times.clone(), data.clone())?;
            let design = build_design(&f, spec.t_per_scan, spec.tr_seconds, &spec.design)?;
            let part = &design.data * beta.select_columns(&voxels);
            for (c, &v) in voxels.iter().enumerate() {
                sig.set_column(v, &part.column(c));
            }
        }
        out.push(sig);
    }
    let total: usize = out.iter().map(|s| s.nrows()).sum();
    for v in 0..spec.m {
        let mean = out.iter().map(|s| s.column(v).sum()).sum::<f64>() / total as f64;
        let var = out
            .iter()
            .map(|s| s.column(v).iter().map(|x| (x - mean).powi(2)).sum::<f64>())
            .sum::<f64>()
            / total as f64;
        if var > 0.0 {
            let scale = 1.0 / var.sqrt();
            for s in out.iter_mut() {
                s.column_mut(v).scale_mut(scale);
            }
            beta.column_mut(v).scale_mut(scale);
        }
    }
    Ok(out)
}

struct Stimuli {
    latents: [Vec<Vec<DMatrix<f64>>>; 2],
    features: [Vec<Vec<FeatureMatrix>>; 2],
    pairs: Vec<PairSet>,
    maps: Vec<PlantedMap>,
}

fn modality_slot(m: Modality) -> usize {
    match m {
        Modality::Language => 0,
        Modality::Vision => 1,
    }
}

fn stimuli(spec: &WorldSpec) -> Result<Stimuli> {
    let times = spec.sample_times();
    let maps: Vec<PlantedMap> = (0..spec.n_layers).map(|l| planted_map(spec, l)).collect();
    let mut latents: [Vec<Vec<DMatrix<f64>>>; 2] = [Vec::new(), Vec::new()];
    let mut features: [Vec<Vec<FeatureMatrix>>; 2] = [Vec::new(), Vec::new()];
    for modality in [Modality::Language, Modality::Vision] {
        let slot = modality_slot(modality);
        for s in 0..spec.n_scans_per_modality {
            let global = slot * spec.n_scans_per_modality + s;
            let lat = scan_latents(spec, global, &times);
            let id = spec.scan_id(modality, s);
            let feats = lat
                .iter()
                .enumerate()
                .map(|(l, data)| {
                    let data = match modality {
                        Modality::Language => data.clone(),
                        Modality::Vision => {
                            apply_map(spec, &maps[l], data, (global * spec.n_layers + l) as u64)
                        }
                    };
                    FeatureMatrix::new(id.clone(), modality, l as u32, times.clone(), data)
                })
                .collect::<Result<Vec<_>>>()?;
            latents[slot].push(lat);
            features[slot].push(feats);
        }
    }
    let pair_times: Vec<f64> = (0..spec.n_pairs).map(|i| i as f64).collect();
    let mut pairs = Vec::new();
    if spec.n_pairs > 0 {
        for (l, map) in maps.iter().enumerate() {
            let mut rng = substream(spec.seed, purpose::WORLD_PAIRS, l as u64);
            let caption = gaussian(&mut rng, spec.n_pairs, spec.k_lang);
            let noise_index = (1 << 31) + l as u64;
            let image = apply_map(spec, map, &caption, noise_index);
            pairs.push(PairSet {
                layer: l as u32,
                caption: FeatureMatrix::new("pairs", Modality::Language, l as u32, pair_times.clone(), caption)?,
                image: FeatureMatrix::new("pairs", Modality::Vision, l as u32, pair_times.clone(), image)?,
            });
        }
    }
    Ok(Stimuli {
        latents,
        features,
        pairs,
        maps,
    })
}

fn assemble(spec: &WorldSpec, stim: Stimuli, responses: [Vec<DMatrix<f64>>; 2], truth: Truth) -> Result<World> {
    let [lang_feats, vis_feats] = stim.features;
    let [lang_resp, vis_resp] = responses;
    let build = |modality: Modality, feats: Vec<Vec<FeatureMatrix>>, resp: Vec<DMatrix<f64>>| {
        feats
            .into_iter()
            .zip(resp)
            .enumerate()
            .map(|(s, (features, data))| {
                Ok(ScanData {
                    features,
                    responses: ResponseMatrix::new(spec.scan_id(modality, s), spec.tr_seconds, data)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    };
    Ok(World {
        spec: spec.clone(),
        language: build(Modality::Language, lang_feats, lang_resp)?,
        vision: build(Modality::Vision, vis_feats, vis_resp)?,
        pairs: stim.pairs,
        truth,
    })
}

/// World whose responses are driven by planted tuning of the latent stimuli.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let stim = stimuli(spec)?;
    let (labels, best_layer) = voxel_labels(spec);
    let (tune_lang, tune_vis, shared_basis) = tunings(spec, &labels);
    let mut beta_language = delay_weights(&tune_lang, &spec.hrf);
    let mut beta_vision = delay_weights(&tune_vis, &spec.hrf);
    let sig_lang = signals(spec, &stim.latents[0], &mut beta_language, &best_layer)?;
    let sig_vis = signals(spec, &stim.latents[1], &mut beta_vision, &best_layer)?;
    let mut responses = [sig_lang, sig_vis];
    for modality in [Modality::Language, Modality::Vision] {
        let slot = modality_slot(modality);
        for (s, data) in responses[slot].iter_mut().enumerate() {
            let global = (slot * spec.n_scans_per_modality + s) as u64;
            let mut rng = substream(spec.seed, purpose::WORLD_NOISE, global);
            for v in 0..spec.m {
                let sd = if labels[v].tuned_in(modality) { spec.noise_sd } else { 1.0 };
                for t in 0..spec.t_per_scan {
                    let e = normal(&mut rng);
                    data[(t, v)] += sd * e;
                }
            }
        }
    }
    let truth = Truth {
        labels,
        best_layer,
        shared_basis,
        beta_language,
        beta_vision,
        maps: stim.maps.clone(),
    };
    assemble(spec, stim, responses, truth)
}

/// World with the same stimuli but unit-variance AR(1) responses that ignore them.
pub fn generate_null_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let stim = stimuli(spec)?;
    let phi = spec.ar_phi;
    let innov = (1.0 - phi * phi).sqrt();
    let mut responses: [Vec<DMatrix<f64>>; 2] = [Vec::new(), Vec::new()];
    for modality in [Modality::Language, Modality::Vision] {
        let slot = modality_slot(modality);
        for s in 0..spec.n_scans_per_modality {
            let global = (slot * spec.n_scans_per_modality + s) as u64;
            let mut rng = substream(spec.seed, purpose::WORLD_NOISE, global);
            let mut data = DMatrix::zeros(spec.t_per_scan, spec.m);
            for v in 0..spec.m {
                let mut x = normal(&mut rng);
                for t in 0..spec.t_per_scan {
                    if t > 0 {
                        x = phi * x + innov * normal(&mut rng);
                    }
                    data[(t, v)] = x;
                }
            }
            responses[slot].push(data);
        }
    }
    let p = spec.k_lang * spec.hrf.len();
    let truth = Truth {
        labels: vec![VoxelClass::Untuned; spec.m],
        best_layer: vec![0; spec.m],
        shared_basis: DMatrix::zeros(spec.k_lang, spec.shared_dim),
        beta_language: DMatrix::zeros(p, spec.m),
        beta_vision: DMatrix::zeros(p, spec.m),
        maps: stim.maps.clone(),
    };
    assemble(spec, stim, responses, truth)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFile {
    pub spec: WorldSpec,
    pub null_world: bool,
    pub labels: Vec<VoxelClass>,
    pub best_layer: Vec<u32>,
    pub class_counts: Vec<(VoxelClass, usize)>,
    /// Arrays stored next to this file, relative to the dataset root.
    pub arrays: Vec<String>,
}

/// Writes every store, the dataset index, `truth.json` and the truth arrays.
pub fn write_world(world: &World, root: &Path, null_world: bool) -> Result<()> {
    for modality in [Modality::Language, Modality::Vision] {
        for scan in world.scans(modality) {
            for f in &scan.features {
                write_store(
                    &Store::Features(f.clone()),
                    &features_dir(root, modality, &f.scan_id, f.layer),
                )?;
            }
            write_store(
                &Store::Responses(scan.responses.clone()),
                &responses_dir(root, &scan.responses.scan_id),
            )?;
        }
    }
    for p in &world.pairs {
        write_store(&Store::Features(p.caption.clone()), &pairs_dir(root, p.layer, Modality::Language))?;
        write_store(&Store::Features(p.image.clone()), &pairs_dir(root, p.layer, Modality::Vision))?;
    }
    write_index(root, &world.index())?;

    let dir = root.join(TRUTH_DIR);
    let mut arrays = Vec::new();
    let mut put = |name: String, data: &DMatrix<f64>| -> Result<()> {
        write_array(&dir.join(&name), data, Dtype::F64)?;
        arrays.push(format!("{TRUTH_DIR}/{name}"));
        Ok(())
    };
    put("beta_language.bin".into(), &world.truth.beta_language)?;
    put("beta_vision.bin".into(), &world.truth.beta_vision)?;
    put("shared_basis.bin".into(), &world.truth.shared_basis)?;
    for (l, map) in world.truth.maps.iter().enumerate() {
        put(format!("map_layer{l:02}.bin"), &map.matrix)?;
        put(format!("map_offset_layer{l:02}.bin"), &DMatrix::from_column_slice(map.offset.len(), 1, map.offset.as_slice()))?;
    }
    let classes = [
        VoxelClass::Shared,
        VoxelClass::Inverted,
        VoxelClass::LanguageOnly,
        VoxelClass::VisionOnly,
        VoxelClass::Untuned,
    ];
    let truth = TruthFile {
        spec: world.spec.clone(),
        null_world,
        labels: world.truth.labels.clone(),
        best_layer: world.truth.best_layer.clone(),
        class_counts: classes
            .iter()
            .map(|&c| (c, world.truth.labels.iter().filter(|&&l| l == c).count()))
            .collect(),
        arrays,
    };
    write_json(&root.join(TRUTH_FILE), &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ridge::pearson;

    fn small() -> WorldSpec {
        WorldSpec {
            k_lang: 6,
            k_vis: 8,
            m: 40,
            n_scans_per_modality: 2,
            t_per_scan: 80,
            n_pairs: 50,
            frac_shared_voxels: 0.5,
            frac_inverted_voxels: 0.25,
            frac_unimodal_voxels: 0.2,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn spec_validation() {
        assert!(small().validate().is_ok());
        let bad = WorldSpec {
            frac_shared_voxels: 0.8,
            frac_inverted_voxels: 0.3,
            ..small()
        };
        assert!(bad.validate().is_err());
        let bad = WorldSpec { shared_dim: 7, ..small() };
        assert!(bad.validate().is_err());
        let bad = WorldSpec { hrf: vec![1.0], ..small() };
        assert!(bad.validate().is_err());
        let json = r#"{"m": 10, "typo_field": 1}"#;
        assert!(serde_json::from_str::<WorldSpec>(json).is_err());
    }

    #[test]
    fn shapes_and_labels() {
        let w = generate_world(&small()).unwrap();
        assert_eq!(w.language.len(), 2);
        assert_eq!(w.vision[0].features[0].feature_dim(), 8);
        assert_eq!(w.language[0].responses.data.shape(), (80, 40));
        assert_eq!(w.truth.beta_language.shape(), (24, 40));
        assert_eq!(w.truth.voxels_of(VoxelClass::Shared).len(), 20);
        assert_eq!(w.truth.voxels_of(VoxelClass::Inverted).len(), 10);
        assert_eq!(w.truth.voxels_of(VoxelClass::LanguageOnly).len(), 4);
        assert_eq!(w.truth.voxels_of(VoxelClass::VisionOnly).len(), 4);
        assert_eq!(w.pairs[0].caption.n_samples(), 50);
    }

    #[test]
    fn latents_are_band_limited_and_unit_scale() {
        let spec = small();
        let times = spec.sample_times();
        let lat = scan_latents(&spec, 0, &times);
        let col = lat[0].column(0);
        let var = col.iter().map(|v| v * v).sum::<f64>() / col.len() as f64;
        assert!(var > 0.3 && var < 3.0, "{var}");
    }

    #[test]
    fn exact_affine_vision_features_follow_the_map() {
        let spec = small();
        let w = generate_world(&spec).unwrap();
        let lat = scan_latents(&spec, spec.n_scans_per_modality, &spec.sample_times());
        let map = &w.truth.maps[0];
        let want = &lat[0] * map.matrix.transpose();
        let got = &w.vision[0].features[0].data;
        for i in 0..got.nrows() {
            for j in 0..got.ncols() {
                assert!((got[(i, j)] - want[(i, j)] - map.offset[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_responses_are_realizable() {
        let spec = WorldSpec {
            noise_sd: 0.0,
            frac_shared_voxels: 1.0,
            frac_inverted_voxels: 0.0,
            frac_unimodal_voxels: 0.0,
            ..small()
        };
        let w = generate_world(&spec).unwrap();
        for scan in &w.language {
            let d = build_design(&scan.features[0], spec.t_per_scan, spec.tr_seconds, &spec.design).unwrap();
            let pred = &d.data * &w.truth.beta_language;
            assert!((pred - &scan.responses.data).abs().max() < 1e-10);
        }
    }

    #[test]
    fn inverted_voxels_anticorrelate_across_modalities() {
        let spec = WorldSpec {
            noise_sd: 0.0,
            private_sd: 0.2,
            ..small()
        };
        let w = generate_world(&spec).unwrap();
        let lang = w.truth.tuning(Modality::Language, &spec.hrf).unwrap();
        let vis = w.truth.tuning(Modality::Vision, &spec.hrf).unwrap();
        let cosine = |v: usize| lang.column(v).dot(&vis.column(v)) / (lang.column(v).norm() * vis.column(v).norm());
        let inverted = w.truth.voxels_of(VoxelClass::Inverted);
        let mean = inverted.iter().map(|&v| cosine(v)).sum::<f64>() / inverted.len() as f64;
        assert!(mean < -0.8, "{mean}");
        assert!(inverted.iter().all(|&v| cosine(v) < 0.0));
        // vision weights differ from language weights only by the signal scaling
        for v in w.truth.voxels_of(VoxelClass::Shared) {
            assert!(cosine(v) > 1.0 - 1e-12);
        }
    }

    #[test]
    fn same_seed_same_world_and_map_choice_keeps_responses() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        assert_eq!(a.vision[1].responses, b.vision[1].responses);
        assert_eq!(a.vision[1].features, b.vision[1].features);
        let c = generate_world(&WorldSpec {
            cross_map: CrossMap::Nonlinear,
            ..small()
        })
        .unwrap();
        assert_eq!(a.language[0].responses, c.language[0].responses);
        assert_eq!(a.vision[0].responses, c.vision[0].responses);
        assert_ne!(a.vision[0].features, c.vision[0].features);
        let d = generate_world(&WorldSpec { seed: 9, ..small() }).unwrap();
        assert_ne!(a.language[0].responses, d.language[0].responses);
    }

    #[test]
    fn null_world_is_ar1() {
        let spec = WorldSpec {
            m: 200,
            t_per_scan: 400,
            ..small()
        };
        let w = generate_null_world(&spec).unwrap();
        let data = &w.language[0].responses.data;
        let mut lag1 = 0.0;
        for v in 0..spec.m {
            let c = data.column(v);
            lag1 += pearson(&c.as_slice()[..399], &c.as_slice()[1..]);
        }
        lag1 /= spec.m as f64;
        assert!((lag1 - 0.8).abs() < 0.03, "{lag1}");
        assert!(w.truth.beta_language.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn written_world_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let w = generate_world(&small()).unwrap();
        write_world(&w, dir.path(), false).unwrap();
        let idx = crate::dataset::read_index(dir.path()).unwrap();
        assert_eq!(idx.vision_scans, vec!["movie01", "movie02"]);
        let f = crate::dataset::load_features(dir.path(), Modality::Vision, &idx.vision_scans, 0).unwrap();
        assert_eq!(f[1], w.vision[1].features[0]);
        let r = crate::dataset::load_responses(dir.path(), &idx.language_scans).unwrap();
        assert_eq!(r[0], w.language[0].responses);
        let truth: TruthFile = crate::store::read_json(&dir.path().join(TRUTH_FILE)).unwrap();
        assert_eq!(truth.labels, w.truth.labels);
        let beta = crate::store::read_array(&dir.path().join("truth/beta_language.bin")).unwrap();
        assert_eq!(beta, w.truth.beta_language);
    }
}
