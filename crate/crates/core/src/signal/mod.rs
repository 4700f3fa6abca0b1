//! Preprocessing of raw multichannel EEG into fixed-length segments, and
//! the spectral band masking used as a pretraining perturbation.
//!
//! ```text
//! RawTrial (C_in × T_in @ fs)
//!   ├─ interpolate_montage   → 65 standard channels
//!   ├─ resample              → 200 Hz
//!   ├─ bandpass              → 0.3–40 Hz brick-wall
//!   └─ segment               → Vec<Segment> (65 × 100)
//! ```

pub mod etrial;
pub mod fft;
pub mod montage;

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use fft::{Sample, SpectralPlan};
pub use montage::{idw_weights, Montage65, MONTAGE_CHANNELS};

use crate::{Error, Result};

pub const TARGET_RATE: f64 = 200.0;
pub const WINDOW_SAMPLES: usize = 100;

/// Number of nearest source electrodes blended per montage position.
pub const IDW_NEIGHBOURS: usize = 3;

/// One multichannel recording, `channels × samples`, in microvolts.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTrial {
    pub trial_id: String,
    pub subject_id: String,
    pub label: Option<String>,
    /// Catalog dataset this trial belongs to, when it differs from the
    /// run default.
    pub dataset: Option<String>,
    pub channel_names: Vec<String>,
    pub sample_rate: f64,
    pub data: Array2<f32>,
}

impl RawTrial {
    pub fn new(
        trial_id: impl Into<String>,
        subject_id: impl Into<String>,
        label: Option<String>,
        channel_names: Vec<String>,
        sample_rate: f64,
        data: Array2<f32>,
    ) -> Result<Self> {
        let t = Self {
            trial_id: trial_id.into(),
            subject_id: subject_id.into(),
            label,
            dataset: None,
            channel_names,
            sample_rate,
            data,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn with_dataset(mut self, dataset: impl Into<String>) -> Self {
        self.dataset = Some(dataset.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.nrows() != self.channel_names.len() {
            return Err(Error::Shape(format!(
                "trial {}: {} data rows but {} channel names",
                self.trial_id,
                self.data.nrows(),
                self.channel_names.len()
            )));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "trial {}: sample rate must be positive, got {}",
                self.trial_id, self.sample_rate
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("trial {}", self.trial_id)));
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    fn with_data(&self, channel_names: Vec<String>, sample_rate: f64, data: Array2<f32>) -> Self {
        Self {
            trial_id: self.trial_id.clone(),
            subject_id: self.subject_id.clone(),
            label: self.label.clone(),
            dataset: self.dataset.clone(),
            channel_names,
            sample_rate,
            data,
        }
    }
}

/// A non-overlapping `65 × t` window of a preprocessed trial.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub trial_id: String,
    pub index: usize,
    pub sample_rate: f64,
    pub data: Array2<f32>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }
}

/// A contiguous frequency band `[f_min, f_max]` to suppress.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandMask {
    pub f_min: f64,
    pub f_max: f64,
}

/// Maps the trial onto the 65 montage channels by inverse-distance
/// weighting of the three nearest source electrodes.
///
/// Source positions come from `source_positions` first and fall back to
/// the montage's own coordinates for channels it names.
pub fn interpolate_montage(
    trial: &RawTrial,
    montage: &Montage65,
    source_positions: &HashMap<String, [f64; 3]>,
) -> Result<RawTrial> {
    if trial.n_channels() == 0 {
        return Err(Error::invalid(format!("trial {} has no channels", trial.trial_id)));
    }
    let sources = trial
        .channel_names
        .iter()
        .map(|name| {
            source_positions
                .get(name)
                .copied()
                .or_else(|| montage.position(name))
                .ok_or_else(|| Error::UnknownChannel(name.clone()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = Array2::<f32>::zeros((montage.len(), trial.n_samples()));
    for (target_idx, target) in montage.positions().iter().enumerate() {
        let mut acc = vec![0.0f64; trial.n_samples()];
        for (src, w) in idw_weights(target, &sources, IDW_NEIGHBOURS) {
            for (a, &v) in acc.iter_mut().zip(trial.data.row(src)) {
                *a += w * v as f64;
            }
        }
        for (o, a) in out.row_mut(target_idx).iter_mut().zip(acc) {
            *o = a as f32;
        }
    }
    Ok(trial.with_data(montage.names().to_vec(), trial.sample_rate, out))
}

/// FFT-domain resampling. Only downsampling (or identity) is supported.
pub fn resample(trial: &RawTrial, target_rate: f64) -> Result<RawTrial> {
    if !(target_rate > 0.0) {
        return Err(Error::invalid(format!("target rate must be positive, got {target_rate}")));
    }
    if target_rate > trial.sample_rate {
        return Err(Error::invalid(format!(
            "upsampling from {} Hz to {target_rate} Hz is not supported",
            trial.sample_rate
        )));
    }
    if target_rate == trial.sample_rate {
        return Ok(trial.clone());
    }
    let out_len = (trial.n_samples() as f64 * target_rate / trial.sample_rate).floor() as usize;
    let mut out = Array2::<f32>::zeros((trial.n_channels(), out_len));
    for (ch, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let x: Vec<f32> = trial.data.row(ch).to_vec();
        for (o, v) in row.iter_mut().zip(fft::resample_channel(&x, out_len)) {
            *o = v;
        }
    }
    Ok(trial.with_data(trial.channel_names.clone(), target_rate, out))
}

/// Zero-phase brick-wall band-pass: bins strictly inside `(lo, hi)` pass
/// unchanged, every other bin is zeroed.
pub fn bandpass(trial: &RawTrial, lo: f64, hi: f64) -> Result<RawTrial> {
    let nyquist = trial.sample_rate / 2.0;
    if !(lo >= 0.0 && lo < hi) {
        return Err(Error::invalid(format!("band-pass needs 0 <= lo < hi, got ({lo}, {hi})")));
    }
    if hi > nyquist {
        return Err(Error::invalid(format!(
            "band-pass upper edge {hi} Hz exceeds Nyquist {nyquist} Hz"
        )));
    }
    let plan = SpectralPlan::<f32>::new(trial.n_samples());
    let mut out = trial.data.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mut x = row.to_vec();
        fft::keep_band(&plan, &mut x, trial.sample_rate, lo, hi);
        row.iter_mut().zip(x).for_each(|(o, v)| *o = v);
    }
    Ok(trial.with_data(trial.channel_names.clone(), trial.sample_rate, out))
}

/// Splits a trial into `floor(T / window)` consecutive windows; the
/// remainder is dropped.
pub fn segment(trial: &RawTrial, window_samples: usize) -> Result<Vec<Segment>> {
    if window_samples == 0 {
        return Err(Error::invalid("window length must be positive"));
    }
    if trial.n_channels() != MONTAGE_CHANNELS {
        return Err(Error::Dim {
            what: format!("channels of trial {}", trial.trial_id),
            expected: MONTAGE_CHANNELS,
            found: trial.n_channels(),
        });
    }
    let count = trial.n_samples() / window_samples;
    Ok((0..count)
        .map(|i| Segment {
            trial_id: trial.trial_id.clone(),
            index: i,
            sample_rate: trial.sample_rate,
            data: trial
                .data
                .slice(s![.., i * window_samples..(i + 1) * window_samples])
                .to_owned(),
        })
        .collect())
}

/// Draws a band of `band_width` Hz with its lower edge uniform over
/// `[cutoff_lo, cutoff_hi - band_width]`.
pub fn sample_mask_band<R: Rng + ?Sized>(
    rng: &mut R,
    cutoff_lo: f64,
    cutoff_hi: f64,
    band_width: f64,
) -> Result<BandMask> {
    if !(band_width > 0.0) || band_width > cutoff_hi - cutoff_lo {
        return Err(Error::invalid(format!(
            "band width {band_width} Hz does not fit in [{cutoff_lo}, {cutoff_hi}] Hz"
        )));
    }
    let span = cutoff_hi - band_width - cutoff_lo;
    let f_min = if span == 0.0 {
        cutoff_lo
    } else {
        cutoff_lo + rng.random::<f64>() * span
    };
    Ok(BandMask {
        f_min,
        f_max: f_min + band_width,
    })
}

/// Removes the band from every channel of the segment independently.
pub fn spectral_mask(segment: &Segment, band: BandMask) -> Result<Segment> {
    let nyquist = segment.sample_rate / 2.0;
    if !(band.f_min > 0.0 && band.f_min < band.f_max && band.f_max <= nyquist) {
        return Err(Error::invalid(format!(
            "mask band [{}, {}] Hz outside (0, {nyquist}]",
            band.f_min, band.f_max
        )));
    }
    let plan = SpectralPlan::<f32>::new(segment.len());
    let mut out = segment.clone();
    for mut row in out.data.axis_iter_mut(Axis(0)) {
        let mut x = row.to_vec();
        fft::zero_band(&plan, &mut x, segment.sample_rate, band.f_min, band.f_max);
        row.iter_mut().zip(x).for_each(|(o, v)| *o = v);
    }
    Ok(out)
}

/// Preprocessing and spectral-mask settings (`[signal]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalConfig {
    pub target_rate: f64,
    pub bandpass_lo: f64,
    pub bandpass_hi: f64,
    pub window_samples: usize,
    pub mask_cutoff_lo: f64,
    pub mask_cutoff_hi: f64,
    pub mask_band_width: f64,
    /// Multiplier from microvolts to model units.
    pub data_scale: f64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            target_rate: TARGET_RATE,
            bandpass_lo: 0.3,
            bandpass_hi: 40.0,
            window_samples: WINDOW_SAMPLES,
            mask_cutoff_lo: 1.0,
            mask_cutoff_hi: 50.0,
            mask_band_width: 6.0,
            data_scale: 0.1,
        }
    }
}

impl SignalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { section: "signal".into(), msg });
        let nyquist = self.target_rate / 2.0;
        if !(self.target_rate > 0.0) || self.window_samples == 0 {
            return bad("target_rate and window_samples must be positive".into());
        }
        if !(self.bandpass_lo >= 0.0 && self.bandpass_lo < self.bandpass_hi && self.bandpass_hi <= nyquist) {
            return bad(format!("band-pass ({}, {}) must satisfy 0 <= lo < hi <= {nyquist}", self.bandpass_lo, self.bandpass_hi));
        }
        if !(self.mask_cutoff_lo > 0.0
            && self.mask_band_width > 0.0
            && self.mask_cutoff_lo + self.mask_band_width <= self.mask_cutoff_hi
            && self.mask_cutoff_hi <= nyquist)
        {
            return bad(format!(
                "mask band of {} Hz must fit in [{}, {}] within (0, {nyquist}]",
                self.mask_band_width, self.mask_cutoff_lo, self.mask_cutoff_hi
            ));
        }
        if !(self.data_scale > 0.0 && self.data_scale.is_finite()) {
            return bad(format!("data_scale must be positive, got {}", self.data_scale));
        }
        Ok(())
    }
}

/// Montage unification, resampling and band-pass. Trials already laid out
/// in montage order skip interpolation.
pub fn preprocess(
    trial: &RawTrial,
    montage: &Montage65,
    source_positions: &HashMap<String, [f64; 3]>,
    config: &SignalConfig,
) -> Result<RawTrial> {
    let on_montage = trial.channel_names.len() == montage.len()
        && trial.channel_names.iter().zip(montage.names()).all(|(a, b)| a == b);
    let unified = if on_montage {
        trial.clone()
    } else {
        interpolate_montage(trial, montage, source_positions)?
    };
    let resampled = resample(&unified, config.target_rate)?;
    bandpass(&resampled, config.bandpass_lo, config.bandpass_hi)
}
