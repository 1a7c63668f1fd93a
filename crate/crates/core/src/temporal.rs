//! Resampling of stimulus features onto the acquisition grid and FIR delay
//! expansion.

use std::f64::consts::PI;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::types::{DesignMatrix, FeatureMatrix, Modality};

const WEIGHT_SUM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanczosConfig {
    pub window_a: u32,
    pub cutoff_hz: f64,
}

impl LanczosConfig {
    /// Window 3 with the cutoff at the Nyquist frequency of the TR grid.
    pub fn for_tr(tr_seconds: f64) -> Self {
        LanczosConfig {
            window_a: 3,
            cutoff_hz: 1.0 / (2.0 * tr_seconds),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.window_a < 1 {
            return Err(arg_err!("lanczos window_a must be >= 1"));
        }
        if !(self.cutoff_hz > 0.0 && self.cutoff_hz.is_finite()) {
            return Err(arg_err!("lanczos cutoff_hz must be positive"));
        }
        Ok(())
    }

    /// Half-width of the kernel support in seconds.
    pub fn half_width(&self) -> f64 {
        self.window_a as f64 / (2.0 * self.cutoff_hz)
    }

    /// Kernel value at time offset `delta` seconds.
    pub fn weight(&self, delta: f64) -> f64 {
        if delta.abs() >= self.half_width() {
            return 0.0;
        }
        let x = 2.0 * self.cutoff_hz * delta;
        sinc(x) * sinc(x / self.window_a as f64)
    }
}

/// Normalized sinc, `sin(pi x) / (pi x)`.
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resampled {
    pub scan_id: String,
    pub modality: Modality,
    pub layer: u32,
    /// `|tr_grid| x k`.
    pub data: DMatrix<f64>,
    /// Output rows whose kernel weights summed to (near) zero; they are left at zero.
    pub flagged_rows: Vec<usize>,
}

/// Lanczos interpolation of feature rows onto `tr_grid`, with per-row weight
/// renormalization.
pub fn lanczos_resample(
    features: &FeatureMatrix,
    tr_grid: &[f64],
    cfg: &LanczosConfig,
) -> Result<Resampled> {
    cfg.validate()?;
    if tr_grid.is_empty() {
        return Err(arg_err!("empty TR grid"));
    }
    if tr_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(arg_err!("TR grid must be strictly increasing"));
    }
    let times = &features.sample_times;
    let k = features.feature_dim();
    let half = cfg.half_width();
    let mut out = DMatrix::zeros(tr_grid.len(), k);
    let mut flagged_rows = Vec::new();
    let mut weights = Vec::new();

    for (j, &t) in tr_grid.iter().enumerate() {
        let lo = times.partition_point(|&s| s <= t - half);
        let hi = times.partition_point(|&s| s < t + half);
        weights.clear();
        weights.extend(times[lo..hi].iter().map(|&s| cfg.weight(t - s)));
        let total: f64 = weights.iter().sum();
        if total.abs() <= WEIGHT_SUM_FLOOR {
            flagged_rows.push(j);
            continue;
        }
        for (offset, w) in weights.iter().enumerate() {
            let w = w / total;
            if w == 0.0 {
                continue;
            }
            for c in 0..k {
                out[(j, c)] += w * features.data[(lo + offset, c)];
            }
        }
    }
    if !flagged_rows.is_empty() {
        warn!(
            "{}: {} of {} resampled rows have no samples inside the kernel window",
            features.scan_id,
            flagged_rows.len(),
            tr_grid.len()
        );
    }
    Ok(Resampled {
        scan_id: features.scan_id.clone(),
        modality: features.modality,
        layer: features.layer,
        data: out,
        flagged_rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelaySpec {
    pub delays_seconds: Vec<f64>,
    pub tr_seconds: f64,
    /// Allowed relative deviation of `delay / tr` from an integer.
    #[serde(default = "default_delay_tolerance")]
    pub tolerance: f64,
}

fn default_delay_tolerance() -> f64 {
    1e-9
}

impl DelaySpec {
    pub fn new(delays_seconds: Vec<f64>, tr_seconds: f64) -> Self {
        DelaySpec {
            delays_seconds,
            tr_seconds,
            tolerance: default_delay_tolerance(),
        }
    }

    /// Delays of 2, 4, 6 and 8 seconds.
    pub fn standard(tr_seconds: f64) -> Self {
        Self::new(vec![2.0, 4.0, 6.0, 8.0], tr_seconds)
    }

    /// Integer TR shift of every delay.
    pub fn shifts(&self) -> Result<Vec<usize>> {
        if !(self.tr_seconds > 0.0) {
            return Err(arg_err!("tr_seconds must be positive"));
        }
        if self.delays_seconds.is_empty() {
            return Err(arg_err!("at least one delay is required"));
        }
        let mut shifts = Vec::with_capacity(self.delays_seconds.len());
        for &d in &self.delays_seconds {
            let ratio = d / self.tr_seconds;
            let n = ratio.round();
            if d < 0.0 || (ratio - n).abs() > self.tolerance * n.abs().max(1.0) {
                return Err(arg_err!(
                    "delay {d} s is not a non-negative integer multiple of TR {} s",
                    self.tr_seconds
                ));
            }
            shifts.push(n as usize);
        }
        if shifts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(arg_err!("delays must be strictly ascending"));
        }
        Ok(shifts)
    }
}

/// Stacks shifted copies of `resampled`, one column block per delay.
pub fn make_delayed_design(resampled: &Resampled, spec: &DelaySpec) -> Result<DesignMatrix> {
    let shifts = spec.shifts()?;
    let (t, k) = resampled.data.shape();
    let max_shift = *shifts.last().unwrap();
    if t <= max_shift {
        return Err(arg_err!(
            "{} TRs cannot hold a {max_shift}-TR delay",
            t
        ));
    }
    let mut data = DMatrix::zeros(t, shifts.len() * k);
    for (d, &n) in shifts.iter().enumerate() {
        data.view_mut((n, d * k), (t - n, k))
            .copy_from(&resampled.data.rows(0, t - n));
    }
    Ok(DesignMatrix {
        scan_id: resampled.scan_id.clone(),
        data,
        delays_seconds: spec.delays_seconds.clone(),
        source_layer: resampled.layer,
        modality: resampled.modality,
    })
}

/// Number of TRs dropped from the start and end of every scan after delaying.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trim {
    pub head: usize,
    pub tail: usize,
}

impl Trim {
    pub fn is_none(&self) -> bool {
        self.head == 0 && self.tail == 0
    }

    pub fn apply(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let t = data.nrows();
        if self.head + self.tail >= t {
            return Err(arg_err!(
                "trim {}+{} leaves no rows of {t}",
                self.head,
                self.tail
            ));
        }
        Ok(data.rows(self.head, t - self.head - self.tail).into_owned())
    }
}

/// Everything needed to turn a feature store into a design matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    #[serde(default = "default_window")]
    pub lanczos_window: u32,
    /// Defaults to the TR Nyquist frequency.
    #[serde(default)]
    pub lanczos_cutoff_hz: Option<f64>,
    #[serde(default = "default_delays")]
    pub delays_seconds: Vec<f64>,
    #[serde(default = "default_delay_tolerance")]
    pub delay_tolerance: f64,
    #[serde(default)]
    pub trim: Trim,
}

fn default_window() -> u32 {
    3
}

fn default_delays() -> Vec<f64> {
    vec![2.0, 4.0, 6.0, 8.0]
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            lanczos_window: default_window(),
            lanczos_cutoff_hz: None,
            delays_seconds: default_delays(),
            delay_tolerance: default_delay_tolerance(),
            trim: Trim::default(),
        }
    }
}

impl DesignConfig {
    pub fn lanczos(&self, tr_seconds: f64) -> LanczosConfig {
        LanczosConfig {
            window_a: self.lanczos_window,
            cutoff_hz: self
                .lanczos_cutoff_hz
                .unwrap_or_else(|| LanczosConfig::for_tr(tr_seconds).cutoff_hz),
        }
    }

    pub fn delays(&self, tr_seconds: f64) -> DelaySpec {
        DelaySpec {
            delays_seconds: self.delays_seconds.clone(),
            tr_seconds,
            tolerance: self.delay_tolerance,
        }
    }
}

/// Resamples, delays and trims one scan's features for `n_trs` acquisitions.
pub fn build_design(
    features: &FeatureMatrix,
    n_trs: usize,
    tr_seconds: f64,
    cfg: &DesignConfig,
) -> Result<DesignMatrix> {
    let grid = crate::types::tr_grid(n_trs, tr_seconds);
    let resampled = lanczos_resample(features, &grid, &cfg.lanczos(tr_seconds))?;
    let mut design = make_delayed_design(&resampled, &cfg.delays(tr_seconds))?;
    if !cfg.trim.is_none() {
        design.data = cfg.trim.apply(&design.data)?;
    }
    Ok(design)
}
