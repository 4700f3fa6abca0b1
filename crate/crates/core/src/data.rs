//! Synthetic corpora and train/validation/test splits.
//!
//! A synthetic trial for class `c` is
//! `gain · w_c ⊗ sin(2π f_c t + φ) + ε`, with `w_c` a spatial weight over
//! the 65 montage channels, gain and phase drawn per trial and
//! `ε ~ N(0, σ²)` i.i.d. per sample.

use std::collections::{BTreeMap, HashMap, HashSet};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::signal::{Montage65, RawTrial, MONTAGE_CHANNELS};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    pub carrier_hz: f64,
    /// One weight per montage channel.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Catalog dataset tag written to every trial.
    pub dataset: String,
    /// Prefix for subject ids, so corpora can be concatenated.
    pub subject_prefix: String,
    pub classes: Vec<SynthClass>,
    pub subjects: usize,
    pub trials_per_subject_per_class: usize,
    pub duration_s: f64,
    pub sample_rate: f64,
    /// Peak amplitude of the carrier before the subject gain, in µV.
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub gain_range: (f64, f64),
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate / 2.0;
        if self.classes.is_empty() || self.subjects == 0 || self.trials_per_subject_per_class == 0 {
            return Err(Error::invalid("synthetic spec needs at least one class, subject and trial"));
        }
        let mut seen = HashSet::new();
        for c in &self.classes {
            if !(c.carrier_hz > 0.0 && c.carrier_hz < nyquist) {
                return Err(Error::invalid(format!("carrier {} Hz of {} outside (0, {nyquist})", c.carrier_hz, c.name)));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::invalid(format!("duplicate class name {}", c.name)));
            }
            if c.weights.len() != MONTAGE_CHANNELS {
                return Err(Error::Dim {
                    what: format!("spatial weights of {}", c.name),
                    expected: MONTAGE_CHANNELS,
                    found: c.weights.len(),
                });
            }
        }
        let carriers: Vec<u64> = self.classes.iter().map(|c| c.carrier_hz.to_bits()).collect();
        if carriers.iter().collect::<HashSet<_>>().len() != carriers.len() {
            return Err(Error::invalid("class carriers must be distinct"));
        }
        if !(self.duration_s > 0.0 && self.sample_rate > 0.0) {
            return Err(Error::invalid("duration and sample rate must be positive"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.gain_range.0 > 0.0 && self.gain_range.0 <= self.gain_range.1) {
            return Err(Error::invalid("noise_sigma must be >= 0 and 0 < gain_min <= gain_max"));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate).round() as usize
    }

    pub fn n_trials(&self) -> usize {
        self.subjects * self.trials_per_subject_per_class * self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

/// Gaussian bump on the scalp centred on each named electrode, peak 1.
pub fn scalp_blob(montage: &Montage65, centres: &[&str], width: f64) -> Result<Vec<f64>> {
    let cs = centres
        .iter()
        .map(|n| montage.position(n).ok_or_else(|| Error::UnknownChannel(n.to_string())))
        .collect::<Result<Vec<_>>>()?;
    Ok(montage
        .positions()
        .iter()
        .map(|p| {
            cs.iter()
                .map(|c| {
                    let d2: f64 = p.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
                    (-d2 / (2.0 * width * width)).exp()
                })
                .fold(0.0, f64::max)
        })
        .collect())
}

/// Corpus presets understood by `[data] preset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Four motor-imagery classes at 6/10/14/20 Hz over sensorimotor sites.
    #[default]
    MotorImagery,
    /// Three emotion classes with frontal/parietal topographies.
    Emotion,
    /// Both of the above, subjects kept apart.
    Mixed,
}

pub const MI_DATASET: &str = "BCIC-IV2a";
pub const EMOTION_DATASET: &str = "SEED";

const BLOB_WIDTH: f64 = 0.35;

fn class(montage: &Montage65, name: &str, hz: f64, centres: &[&str]) -> Result<SynthClass> {
    Ok(SynthClass {
        name: name.into(),
        carrier_hz: hz,
        weights: scalp_blob(montage, centres, BLOB_WIDTH)?,
    })
}

/// Knobs shared by the presets (`[data]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub preset: Preset,
    /// ETRIAL directory to read instead of synthesizing; empty for synthetic.
    pub corpus: String,
    /// Dataset tag for corpus trials that carry none.
    pub default_dataset: String,
    pub subjects: usize,
    pub trials_per_subject_per_class: usize,
    pub duration_s: f64,
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub gain_min: f64,
    pub gain_max: f64,
    pub split: SplitMode,
    /// Held-out subjects per dataset (cross-subject). Zero uses `test_fraction`.
    pub test_subjects: usize,
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preset: Preset::MotorImagery,
            corpus: String::new(),
            default_dataset: MI_DATASET.into(),
            subjects: 8,
            trials_per_subject_per_class: 10,
            duration_s: 1.0,
            amplitude: 10.0,
            noise_sigma: 5.0,
            gain_min: 0.7,
            gain_max: 1.3,
            split: SplitMode::CrossSubject,
            test_subjects: 2,
            test_fraction: 0.2,
            val_fraction: 0.2,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { section: "data".into(), msg });
        if self.subjects == 0 || self.trials_per_subject_per_class == 0 || !(self.duration_s > 0.0) {
            return bad("subjects, trials_per_subject_per_class and duration_s must be positive".into());
        }
        if !(self.gain_min > 0.0 && self.gain_min <= self.gain_max) || !(self.noise_sigma >= 0.0) || !(self.amplitude > 0.0) {
            return bad("need amplitude > 0, noise_sigma >= 0 and 0 < gain_min <= gain_max".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("test_fraction and val_fraction must be in [0, 1)".into());
        }
        Ok(())
    }

    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan {
            mode: self.split,
            test_subjects: (self.test_subjects > 0).then_some(self.test_subjects),
            test_fraction: self.test_fraction,
            val_fraction: self.val_fraction,
        }
    }

    /// Synthetic specs for the configured preset.
    pub fn synth_specs(&self, sample_rate: f64) -> Result<Vec<SynthSpec>> {
        let m = Montage65::standard();
        let base = |dataset: &str, prefix: &str, classes: Vec<SynthClass>| SynthSpec {
            dataset: dataset.into(),
            subject_prefix: prefix.into(),
            classes,
            subjects: self.subjects,
            trials_per_subject_per_class: self.trials_per_subject_per_class,
            duration_s: self.duration_s,
            sample_rate,
            amplitude: self.amplitude,
            noise_sigma: self.noise_sigma,
            gain_range: (self.gain_min, self.gain_max),
        };
        let mi = || -> Result<SynthSpec> {
            Ok(base(
                MI_DATASET,
                "mi",
                vec![
                    class(&m, "Left", 6.0, &["C4"])?,
                    class(&m, "Right", 10.0, &["C3"])?,
                    class(&m, "Foot", 14.0, &["Cz"])?,
                    class(&m, "Tongue", 20.0, &["FT7", "FT8"])?,
                ],
            ))
        };
        let emo = || -> Result<SynthSpec> {
            Ok(base(
                EMOTION_DATASET,
                "emo",
                vec![
                    class(&m, "Positive", 10.0, &["F4"])?,
                    class(&m, "Neutral", 6.0, &["Pz"])?,
                    class(&m, "Negative", 14.0, &["F3"])?,
                ],
            ))
        };
        Ok(match self.preset {
            Preset::MotorImagery => vec![mi()?],
            Preset::Emotion => vec![emo()?],
            Preset::Mixed => vec![mi()?, emo()?],
        })
    }
}

/// Generates the corpus. Trials are ordered subject by subject, and within
/// a subject round-robin over classes. Subject `s` draws from ChaCha8
/// stream `s` of `seed`.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<Vec<RawTrial>> {
    spec.validate()?;
    let montage = Montage65::standard();
    let names = montage.names().to_vec();
    let n = spec.n_samples();
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut out = Vec::with_capacity(spec.n_trials());
    for s in 0..spec.subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64);
        let subject = format!("{}-S{:02}", spec.subject_prefix, s + 1);
        for t in 0..spec.trials_per_subject_per_class {
            for (ci, c) in spec.classes.iter().enumerate() {
                let gain = spec.amplitude * rng.random_range(spec.gain_range.0..=spec.gain_range.1);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let wave: Vec<f64> = (0..n)
                    .map(|i| (std::f64::consts::TAU * c.carrier_hz * i as f64 / spec.sample_rate + phase).sin())
                    .collect();
                let mut data = Array2::<f32>::zeros((MONTAGE_CHANNELS, n));
                for (ch, mut row) in data.rows_mut().into_iter().enumerate() {
                    let w = gain * c.weights[ch];
                    for (o, &v) in row.iter_mut().zip(&wave) {
                        let e = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        *o = (w * v + e) as f32;
                    }
                }
                let id = format!("{subject}-T{:04}", t * spec.classes.len() + ci);
                out.push(RawTrial::new(id, subject.clone(), Some(c.name.clone()), names.clone(), spec.sample_rate, data)?.with_dataset(&spec.dataset));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    #[default]
    CrossSubject,
    MultiSubject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    /// Explicit count of held-out subjects (cross-subject); otherwise
    /// `test_fraction` of subjects, rounded.
    pub test_subjects: Option<usize>,
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            mode: SplitMode::CrossSubject,
            test_subjects: None,
            test_fraction: 0.2,
            val_fraction: 0.2,
        }
    }
}

/// Train/validation/test partition of a corpus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<RawTrial>,
    pub val: Vec<RawTrial>,
    pub test: Vec<RawTrial>,
}

fn subjects_in_order(corpus: &[RawTrial]) -> Vec<String> {
    let mut seen = HashSet::new();
    corpus
        .iter()
        .filter(|t| seen.insert(t.subject_id.as_str()))
        .map(|t| t.subject_id.clone())
        .collect()
}

/// Subjects in first-appearance order; the last ones become the test set,
/// the last `val_fraction` of the remaining subjects the validation set.
pub fn split_cross_subject(corpus: &[RawTrial], plan: &SplitPlan) -> Result<Split> {
    let subjects = subjects_in_order(corpus);
    let n = subjects.len();
    if n < 3 {
        return Err(Error::invalid(format!("cross-subject split needs at least 3 subjects, found {n}")));
    }
    let n_test = plan
        .test_subjects
        .unwrap_or_else(|| (n as f64 * plan.test_fraction).round() as usize)
        .max(1);
    if n_test >= n {
        return Err(Error::invalid(format!("{n_test} test subjects leave none of {n} for training")));
    }
    let n_trainval = n - n_test;
    let n_val = ((n_trainval as f64 * plan.val_fraction).round() as usize).min(n_trainval - 1);
    let role: HashMap<&str, u8> = subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let r = if i >= n_trainval {
                2
            } else if i >= n_trainval - n_val {
                1
            } else {
                0
            };
            (s.as_str(), r)
        })
        .collect();
    let mut split = Split::default();
    for t in corpus {
        match role[t.subject_id.as_str()] {
            0 => split.train.push(t.clone()),
            1 => split.val.push(t.clone()),
            _ => split.test.push(t.clone()),
        }
    }
    Ok(split)
}

/// Per subject, in corpus order: the first 75% of trials go to
/// train/validation (the last `val_fraction` of those to validation), the
/// rest to test.
pub fn split_multi_subject(corpus: &[RawTrial], plan: &SplitPlan) -> Result<Split> {
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in corpus.iter().enumerate() {
        by_subject.entry(t.subject_id.as_str()).or_default().push(i);
    }
    let mut role = vec![0u8; corpus.len()];
    for (s, idx) in &by_subject {
        let n = idx.len();
        if n < 4 {
            return Err(Error::invalid(format!("subject {s} has {n} trials; multi-subject split needs at least 4")));
        }
        let n_trainval = (n as f64 * 0.75).round() as usize;
        let n_val = ((n_trainval as f64 * plan.val_fraction).round() as usize).min(n_trainval - 1);
        for (k, &i) in idx.iter().enumerate() {
            role[i] = if k >= n_trainval {
                2
            } else if k >= n_trainval - n_val {
                1
            } else {
                0
            };
        }
    }
    let mut split = Split::default();
    for (t, r) in corpus.iter().zip(role) {
        match r {
            0 => split.train.push(t.clone()),
            1 => split.val.push(t.clone()),
            _ => split.test.push(t.clone()),
        }
    }
    Ok(split)
}

/// Applies the plan to each dataset separately and concatenates the parts.
pub fn split_corpus(corpus: &[RawTrial], plan: &SplitPlan) -> Result<Split> {
    let mut groups: Vec<(Option<&str>, Vec<RawTrial>)> = Vec::new();
    for t in corpus {
        let key = t.dataset.as_deref();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(t.clone()),
            None => groups.push((key, vec![t.clone()])),
        }
    }
    let mut out = Split::default();
    for (_, trials) in groups {
        let part = match plan.mode {
            SplitMode::CrossSubject => split_cross_subject(&trials, plan)?,
            SplitMode::MultiSubject => split_multi_subject(&trials, plan)?,
        };
        out.train.extend(part.train);
        out.val.extend(part.val);
        out.test.extend(part.test);
    }
    Ok(out)
}

/// Builds or reads the corpus described by `[data]`.
pub fn load_corpus(config: &DataConfig, sample_rate: f64, seed: u64) -> Result<Vec<RawTrial>> {
    config.validate()?;
    if !config.corpus.is_empty() {
        let mut trials = crate::signal::etrial::read_corpus(std::path::Path::new(&config.corpus))?;
        for t in &mut trials {
            if t.dataset.is_none() {
                t.dataset = Some(config.default_dataset.clone());
            }
        }
        return Ok(trials);
    }
    let mut out = Vec::new();
    for (i, spec) in config.synth_specs(sample_rate)?.iter().enumerate() {
        out.extend(generate_synthetic(spec, seed.wrapping_add(i as u64 * 0x9e37_79b9))?);
    }
    Ok(out)
}
