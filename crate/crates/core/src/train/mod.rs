//! Optimization for both stages: reconstruction pretraining and
//! instruction tuning.
//!
//! Randomness is keyed by position rather than threaded through the run:
//! epoch `e` shuffles with stream `SHUFFLE_STREAM + e` of the run seed and
//! update `u` draws spectral bands, token masks and dropout from stream
//! `BATCH_STREAM + u`. A run stopped after any update therefore resumes
//! exactly.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::RunConfig;
use crate::encoder::{sample_mask, MaskSpec};
use crate::instruct::{alignment_loss, cross_entropy_loss, InstructionLevel, Objective, TaskSet};
use crate::model::{Model, PreparedTrial, VariantTags};
use crate::nn::Dropout;
use crate::params::{Grads, ParamGroup, ParamId, ParamStore};
use crate::signal::{sample_mask_band, spectral_mask, SignalConfig};
use crate::tensor::Matrix;
use crate::tokenizer::{segment_matrix, BatchStats};
use crate::{Error, Result};

const SHUFFLE_STREAM: u64 = 1 << 20;
const BATCH_STREAM: u64 = 1 << 40;
const VAL_STREAM: u64 = 3 << 20;
const TUNE_OFFSET: u64 = 1 << 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Tune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Tune => "tune",
        }
    }

    fn stream_offset(self) -> u64 {
        match self {
            Stage::Pretrain => 0,
            Stage::Tune => TUNE_OFFSET,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub pretrain_epochs: usize,
    pub tune_epochs: usize,
    pub transformer_lr_scale: f64,
    pub other_lr_scale: f64,
    pub seed: u64,
    pub spectral_mask: bool,
    pub random_mask: bool,
    pub causal_mask: bool,
    pub grad_clip: bool,
    pub grad_clip_norm: f64,
    /// Parameter group names held fixed during tuning.
    pub freeze: Vec<String>,
    pub text_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            peak_lr: 1e-3,
            min_lr: 1e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            pretrain_epochs: 5,
            tune_epochs: 20,
            transformer_lr_scale: 0.1,
            other_lr_scale: 1.0,
            seed: 0,
            spectral_mask: true,
            random_mask: true,
            causal_mask: true,
            grad_clip: false,
            grad_clip_norm: 1.0,
            freeze: Vec::new(),
            text_seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { section: "train".into(), msg });
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.peak_lr && self.peak_lr.is_finite()) {
            return bad(format!("need 0 < min_lr <= peak_lr, got {} and {}", self.min_lr, self.peak_lr));
        }
        if !(self.transformer_lr_scale > 0.0 && self.other_lr_scale > 0.0) {
            return bad("learning-rate scales must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip_norm > 0.0) {
            return bad("weight_decay must be >= 0 and grad_clip_norm > 0".into());
        }
        self.frozen_groups()?;
        Ok(())
    }

    pub fn frozen_groups(&self) -> Result<Vec<ParamGroup>> {
        self.freeze
            .iter()
            .map(|name| {
                ParamGroup::parse(name).ok_or_else(|| Error::Config {
                    section: "train".into(),
                    msg: format!("unknown parameter group `{name}` in freeze"),
                })
            })
            .collect()
    }

    pub fn switches(&self) -> MaskSwitches {
        MaskSwitches {
            spectral: self.spectral_mask,
            random: self.random_mask,
            causal: self.causal_mask,
        }
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Pretrain => self.pretrain_epochs,
            Stage::Tune => self.tune_epochs,
        }
    }

    /// Learning-rate multiplier of a group in the given stage.
    pub fn lr_scale(&self, group: ParamGroup, stage: Stage) -> f64 {
        if stage == Stage::Tune && group == ParamGroup::Transformer {
            self.transformer_lr_scale
        } else {
            self.other_lr_scale
        }
    }
}

/// The three pretraining perturbations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSwitches {
    /// Remove a random frequency band from every segment.
    pub spectral: bool,
    /// Replace random tokens in the bidirectional branch and reconstruct
    /// them.
    pub random: bool,
    /// Predict the next slice from the causal branch.
    pub causal: bool,
}

impl MaskSwitches {
    pub const ALL_ON: Self = Self {
        spectral: true,
        random: true,
        causal: true,
    };

    pub fn validate(&self) -> Result<()> {
        if !self.random && !self.causal {
            return Err(Error::Config {
                section: "train".into(),
                msg: "random_mask and causal_mask are both off, pretraining has no objective".into(),
            });
        }
        Ok(())
    }
}

/// `min + ½(peak − min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, peak: f64, min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("cosine schedule needs total_steps > 0"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!("step {step} beyond total_steps {total_steps}")));
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok((min + 0.5 * (peak - min) * (1.0 + phase.cos())).clamp(min, peak))
}

/// Schedule over a fixed number of updates: update `u` (from 0) uses
/// `cosine_lr(u, max(total − 1, 1))`, so the first update runs at the peak
/// and the last at the minimum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_updates: usize,
    pub updates_per_epoch: usize,
    /// Updates applied so far.
    pub updates: usize,
    pub peak: f64,
    pub min: f64,
}

impl Schedule {
    pub fn new(epochs: usize, updates_per_epoch: usize, peak: f64, min: f64) -> Self {
        Self {
            total_updates: epochs * updates_per_epoch,
            updates_per_epoch,
            updates: 0,
            peak,
            min,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.total_updates.saturating_sub(1).max(1)
    }

    pub fn lr_at(&self, update: usize) -> Result<f64> {
        cosine_lr(update, self.total_steps(), self.peak, self.min)
    }

    /// Index of the last applied update, if any.
    pub fn step(&self) -> Option<usize> {
        self.updates.checked_sub(1)
    }

    /// Learning rate of the next update.
    pub fn next_lr(&self) -> Result<f64> {
        self.lr_at(self.updates)
    }

    pub fn finished(&self) -> bool {
        self.updates >= self.total_updates
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
    pub steps: u64,
}

/// AdamW with decoupled weight decay and bias correction. Moments are kept
/// per parameter and created on the first gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub moments: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, n_params: usize) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            moments: vec![None; n_params],
        }
    }

    /// Applies one update to every parameter that has a gradient and a
    /// positive scale. A non-finite gradient aborts before anything
    /// changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64, scale: impl Fn(ParamId) -> f64) -> Result<()> {
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", store.param(id).name)));
                }
                if g.shape() != store.value(id).shape() {
                    return Err(Error::Shape(format!("gradient of {}", store.param(id).name)));
                }
            }
        }
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            if store.param(id).group == ParamGroup::Buffer {
                continue;
            }
            let s = scale(id);
            if s <= 0.0 {
                continue;
            }
            let lr = lr * s;
            let slot = self.moments[id.index()].get_or_insert_with(|| Moments {
                m: Matrix::zeros(g.rows(), g.cols()),
                v: Matrix::zeros(g.rows(), g.cols()),
                steps: 0,
            });
            slot.steps += 1;
            let c1 = 1.0 - self.beta1.powi(slot.steps as i32);
            let c2 = 1.0 - self.beta2.powi(slot.steps as i32);
            let decay = 1.0 - lr * self.weight_decay;
            let theta = store.value_mut(id).data_mut();
            let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                theta[i] = theta[i] * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates checked per parameter besides the largest-gradient one.
    pub random_coords: usize,
    /// Floor of the relative-error denominator.
    pub atol: f64,
    pub seed: u64,
    /// Only parameters whose name starts with one of these (all if empty).
    pub prefixes: Vec<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            random_coords: 3,
            atol: 1e-6,
            seed: 0,
            prefixes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares the analytic gradient of `loss` with central differences at
/// sampled coordinates of every non-buffer parameter.
///
/// Relative error is `|a − n| / max(|a|, |n|)`. Coordinates where both
/// gradients are below `atol` count as agreeing.
pub fn grad_check<F>(store: &ParamStore, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'s> Fn(&mut Tape<'s>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        tape.backward(l)
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let l = loss(&mut tape)?;
        Ok(tape.value(l).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for (id, p) in store.iter() {
        if p.group == ParamGroup::Buffer {
            continue;
        }
        if !opts.prefixes.is_empty() && !opts.prefixes.iter().any(|pre| p.name.starts_with(pre.as_str())) {
            continue;
        }
        let zero = Matrix::zeros(p.value.rows(), p.value.cols());
        let g = grads.get(id).unwrap_or(&zero);
        let n = p.value.len();
        let mut coords = vec![(0..n)
            .max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs()))
            .unwrap_or(0)];
        coords.extend(rand::seq::index::sample(&mut rng, n, opts.random_coords.min(n)));
        coords.sort_unstable();
        coords.dedup();
        for c in coords {
            let orig = p.value.data()[c];
            work.value_mut(id).data_mut()[c] = orig + opts.eps;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[c] = orig - opts.eps;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let analytic = g.data()[c];
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale < opts.atol {
                0.0
            } else {
                (analytic - numeric).abs() / scale
            };
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst_param = p.name.clone();
                report.worst_index = c;
            }
        }
    }
    Ok(report)
}

/// One trial's pretraining inputs after the stochastic perturbations.
#[derive(Clone, Debug)]
pub struct PretrainItem<'a> {
    pub inputs: Vec<Matrix>,
    pub mask: Option<MaskSpec>,
    pub targets: &'a Matrix,
}

/// Draws the spectral band (one per trial) and the token mask.
pub fn sample_pretrain_item<'a, R: rand::Rng + ?Sized>(
    model: &Model,
    trial: &'a PreparedTrial,
    switches: MaskSwitches,
    signal: &SignalConfig,
    rng: &mut R,
) -> Result<PretrainItem<'a>> {
    let inputs = if switches.spectral {
        let band = sample_mask_band(rng, signal.mask_cutoff_lo, signal.mask_cutoff_hi, signal.mask_band_width)?;
        trial
            .segments
            .iter()
            .map(|s| spectral_mask(s, band).map(|m| segment_matrix(&m.data, model.data_scale)))
            .collect::<Result<Vec<_>>>()?
    } else {
        trial.inputs.clone()
    };
    let mask = if switches.random {
        Some(sample_mask(trial.n_tokens(model.tokens_per_segment()), model.encoder.config.mask_ratio, rng)?)
    } else {
        None
    };
    Ok(PretrainItem {
        inputs,
        mask,
        targets: &trial.targets,
    })
}

/// Batch means of the two reconstruction terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub ctx: f64,
    pub cau: f64,
}

/// Tokenizes all segments of a batch in one pass and returns the per-trial
/// token blocks.
fn batch_tokens(
    model: &Model,
    tape: &mut Tape,
    inputs: &[&[Matrix]],
    training: bool,
) -> Result<(Vec<Var>, Option<BatchStats>)> {
    let all: Vec<&Matrix> = inputs.iter().flat_map(|x| x.iter()).collect();
    let (tokens, stats) = model.tokenizer.forward(tape, &all, training)?;
    let per = model.tokens_per_segment();
    let mut offset = 0;
    let mut out = Vec::with_capacity(inputs.len());
    for x in inputs {
        let n = x.len() * per;
        out.push(tape.slice_rows(tokens, offset, n));
        offset += n;
    }
    Ok((out, stats))
}

/// Mean over the batch of `λ_ctx·loss_ctx + λ_cau·loss_cau`, with the
/// disabled terms left out.
pub fn pretrain_batch_loss(
    model: &Model,
    tape: &mut Tape,
    items: &[PretrainItem],
    switches: MaskSwitches,
    training: bool,
    drop: &mut Dropout,
) -> Result<(Var, Option<BatchStats>, LossParts)> {
    switches.validate()?;
    if items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let inputs: Vec<&[Matrix]> = items.iter().map(|i| i.inputs.as_slice()).collect();
    let (tokens, stats) = batch_tokens(model, tape, &inputs, training)?;
    let cfg = &model.encoder.config;
    let mut terms = Vec::new();
    let mut parts = LossParts::default();
    for (item, &tok) in items.iter().zip(&tokens) {
        if switches.random {
            let mask = item
                .mask
                .as_ref()
                .ok_or_else(|| Error::invalid("random masking is on but the item has no mask"))?;
            let masked = model.encoder.apply_mask(tape, tok, mask);
            let states = model.encoder.bidirectional_forward(tape, masked, drop)?;
            let ctx = model.encoder.loss_ctx(tape, states, mask, item.targets)?;
            parts.ctx += tape.value(ctx).item();
            terms.push(tape.scale(ctx, cfg.lambda_ctx));
        }
        if switches.causal {
            let states = model.encoder.causal_forward(tape, tok, drop)?;
            let cau = model.encoder.loss_cau(tape, states, item.targets)?;
            parts.cau += tape.value(cau).item();
            terms.push(tape.scale(cau, cfg.lambda_cau));
        }
    }
    let n = items.len() as f64;
    let total = sum_vars(tape, &terms);
    parts.ctx /= n;
    parts.cau /= n;
    Ok((tape.scale(total, 1.0 / n), stats, parts))
}

fn sum_vars(tape: &mut Tape, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    acc
}

/// Mean tuning loss of a batch under one instruction level.
pub fn tune_batch_loss(
    model: &Model,
    tape: &mut Tape,
    trials: &[&PreparedTrial],
    tasks: &TaskSet,
    level: InstructionLevel,
    training: bool,
    drop: &mut Dropout,
) -> Result<(Var, Option<BatchStats>)> {
    if trials.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let inputs: Vec<&[Matrix]> = trials.iter().map(|t| t.inputs.as_slice()).collect();
    let (tokens, stats) = batch_tokens(model, tape, &inputs, training)?;
    let mut terms = Vec::with_capacity(trials.len());
    for (trial, &tok) in trials.iter().zip(&tokens) {
        let (dataset, label) = trial_task(trial)?;
        let binding = tasks.get(dataset)?;
        let h = model.head_output(tape, tok, binding.instruction(level), drop)?;
        let loss = match model.instruct.config.objective {
            Objective::Cosine => alignment_loss(tape, h, label, &binding.bank)?,
            Objective::CrossEntropy => {
                let lin = model
                    .instruct
                    .classifier(dataset)
                    .ok_or_else(|| Error::MissingCatalog(dataset.to_string()))?;
                cross_entropy_loss(tape, h, lin, label, &binding.bank)?
            }
        };
        terms.push(loss);
    }
    let total = sum_vars(tape, &terms);
    Ok((tape.scale(total, 1.0 / trials.len() as f64), stats))
}

fn trial_task(trial: &PreparedTrial) -> Result<(&str, &str)> {
    let dataset = trial
        .dataset
        .as_deref()
        .ok_or_else(|| Error::invalid(format!("trial {} has no dataset tag", trial.trial_id)))?;
    let label = trial
        .label
        .as_deref()
        .ok_or_else(|| Error::invalid(format!("trial {} has no label", trial.trial_id)))?;
    Ok((dataset, label))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub rows: Vec<CurveRow>,
}

impl LossCurve {
    pub fn split(&self, split: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.split == split).map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,lr\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.split, r.loss, r.lr));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Training-loss accumulator for the epoch in progress.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochProgress {
    pub loss_sum: f64,
    pub batches: usize,
}

/// Options that do not belong in the configuration file.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint of the same stage.
    pub resume: Option<Checkpoint>,
    /// Stop once this many updates have been applied in total.
    pub stop_after: Option<usize>,
}

enum Work<'a> {
    Pretrain(MaskSwitches),
    Tune { tasks: &'a TaskSet, level: InstructionLevel },
}

impl Work<'_> {
    fn stage(&self) -> Stage {
        match self {
            Work::Pretrain(_) => Stage::Pretrain,
            Work::Tune { .. } => Stage::Tune,
        }
    }

    fn loss(
        &self,
        model: &Model,
        cfg: &RunConfig,
        tape: &mut Tape,
        batch: &[&PreparedTrial],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Option<BatchStats>)> {
        let mut drop_rng = ChaCha8Rng::from_rng(&mut *rng);
        let mut drop = if training {
            Dropout::new(model.encoder.config.dropout, &mut drop_rng)
        } else {
            Dropout::off()
        };
        match self {
            Work::Pretrain(sw) => {
                let items = batch
                    .iter()
                    .map(|t| sample_pretrain_item(model, t, *sw, &cfg.signal, rng))
                    .collect::<Result<Vec<_>>>()?;
                let (l, stats, _) = pretrain_batch_loss(model, tape, &items, *sw, training, &mut drop)?;
                Ok((l, stats))
            }
            Work::Tune { tasks, level } => tune_batch_loss(model, tape, batch, tasks, *level, training, &mut drop),
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trial order for an epoch (1-based).
pub fn epoch_order(seed: u64, stage: Stage, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, stage.stream_offset() + SHUFFLE_STREAM + epoch as u64));
    order
}

fn validation_loss(model: &Model, cfg: &RunConfig, work: &Work, val: &[PreparedTrial]) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut rng = stream_rng(cfg.train.seed, work.stage().stream_offset() + VAL_STREAM);
    let mut sum = 0.0;
    for chunk in val.chunks(cfg.train.batch_size) {
        let refs: Vec<&PreparedTrial> = chunk.iter().collect();
        let mut tape = Tape::new(&model.store);
        let (l, _) = work.loss(model, cfg, &mut tape, &refs, false, &mut rng)?;
        sum += tape.value(l).item() * chunk.len() as f64;
    }
    Ok(Some(sum / val.len() as f64))
}

fn run(
    mut ckpt: Checkpoint,
    work: Work,
    train: &[PreparedTrial],
    val: &[PreparedTrial],
    stop_after: Option<usize>,
) -> Result<Checkpoint> {
    let cfg = ckpt.config.clone();
    let stage = work.stage();
    let seed = cfg.train.seed;
    let frozen = if stage == Stage::Tune {
        cfg.train.frozen_groups()?
    } else {
        Vec::new()
    };
    let mut model = ckpt.model()?;
    let per_epoch = ckpt.schedule.updates_per_epoch;
    while !ckpt.schedule.finished() {
        if stop_after.is_some_and(|s| ckpt.schedule.updates >= s) {
            break;
        }
        let u = ckpt.schedule.updates;
        let epoch = u / per_epoch + 1;
        let b = u % per_epoch;
        let order = epoch_order(seed, stage, epoch, train.len());
        let bs = cfg.train.batch_size;
        let batch: Vec<&PreparedTrial> = order[b * bs..((b + 1) * bs).min(train.len())]
            .iter()
            .map(|&i| &train[i])
            .collect();
        let lr = ckpt.schedule.lr_at(u)?;
        let mut rng = stream_rng(seed, stage.stream_offset() + BATCH_STREAM + u as u64);
        let (loss, mut grads, stats) = {
            let mut tape = Tape::new(&model.store);
            let (l, stats) = work.loss(&model, &cfg, &mut tape, &batch, true, &mut rng)?;
            let loss = tape.value(l).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("{stage} loss at update {u}")));
            }
            (loss, tape.backward(l), stats)
        };
        if cfg.train.grad_clip {
            let norm = grads.global_norm();
            if norm > cfg.train.grad_clip_norm {
                grads.scale(cfg.train.grad_clip_norm / norm);
            }
        }
        let store = &model.store;
        let scales: Vec<f64> = store
            .iter()
            .map(|(_, p)| {
                if frozen.contains(&p.group) {
                    0.0
                } else {
                    cfg.train.lr_scale(p.group, stage)
                }
            })
            .collect();
        ckpt.optimizer.step(&mut model.store, &grads, lr, |id| scales[id.index()])?;
        if let Some(stats) = stats {
            if !frozen.contains(&ParamGroup::Tokenizer) {
                model.tokenizer.update_running_stats(&mut model.store, &stats);
            }
        }
        ckpt.schedule.updates += 1;
        ckpt.progress.loss_sum += loss;
        ckpt.progress.batches += 1;
        if ckpt.schedule.updates.is_multiple_of(per_epoch) {
            let train_loss = ckpt.progress.loss_sum / ckpt.progress.batches as f64;
            ckpt.curve.rows.push(CurveRow {
                epoch,
                split: "train".into(),
                loss: train_loss,
                lr,
            });
            let val_loss = validation_loss(&model, &cfg, &work, val)?;
            if let Some(v) = val_loss {
                ckpt.curve.rows.push(CurveRow {
                    epoch,
                    split: "val".into(),
                    loss: v,
                    lr,
                });
            }
            log::info!("{stage} epoch {epoch}: train {train_loss:.6} val {val_loss:?} lr {lr:.3e}");
            ckpt.progress = EpochProgress::default();
        }
    }
    ckpt.store = model.store;
    Ok(ckpt)
}

fn check_resume(resume: &Checkpoint, stage: Stage, config: &RunConfig) -> Result<()> {
    if resume.stage != stage {
        return Err(Error::invalid(format!(
            "cannot resume {stage} from a {} checkpoint",
            resume.stage
        )));
    }
    if &resume.config != config {
        return Err(Error::invalid("resume checkpoint was written with a different configuration"));
    }
    Ok(())
}

fn updates_per_epoch(n: usize, batch: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    Ok(n.div_ceil(batch))
}

/// Reconstruction pretraining on prepared trials.
pub fn run_pretrain(
    train: &[PreparedTrial],
    val: &[PreparedTrial],
    config: &RunConfig,
    opts: RunOptions,
) -> Result<Checkpoint> {
    config.validate()?;
    let switches = config.train.switches();
    switches.validate()?;
    let per_epoch = updates_per_epoch(train.len(), config.train.batch_size)?;
    let ckpt = match opts.resume {
        Some(c) => {
            check_resume(&c, Stage::Pretrain, config)?;
            c
        }
        None => {
            let model = Model::new(config, config.train.seed)?;
            Checkpoint::fresh(Stage::Pretrain, config, model.store, per_epoch, None)
        }
    };
    if ckpt.schedule.updates_per_epoch != per_epoch {
        return Err(Error::invalid("training set size differs from the resumed run"));
    }
    run(ckpt, Work::Pretrain(switches), train, val, opts.stop_after)
}

/// Instruction tuning, starting from a pretrained checkpoint when given.
///
/// Every training label must exist in its dataset's prototype bank.
pub fn run_tune(
    train: &[PreparedTrial],
    val: &[PreparedTrial],
    pretrained: Option<&Checkpoint>,
    tasks: &TaskSet,
    config: &RunConfig,
    opts: RunOptions,
) -> Result<Checkpoint> {
    config.validate()?;
    for t in train.iter().chain(val) {
        let (dataset, label) = trial_task(t)?;
        let binding = tasks.get(dataset)?;
        if binding.bank.index_of(label).is_none() {
            return Err(Error::MissingLabel(label.to_string()));
        }
    }
    let per_epoch = updates_per_epoch(train.len(), config.train.batch_size)?;
    let ckpt = match opts.resume {
        Some(c) => {
            check_resume(&c, Stage::Tune, config)?;
            if c.tasks.as_ref() != Some(tasks) {
                return Err(Error::invalid("resume checkpoint was tuned on different tasks"));
            }
            c
        }
        None => {
            let mut model = Model::new(config, config.train.seed)?;
            if let Some(p) = pretrained {
                if p.stage != Stage::Pretrain {
                    return Err(Error::invalid(format!("expected a pretrain checkpoint, got {}", p.stage)));
                }
                model.store.load_values_from(&p.store)?;
            }
            model.attach_classifiers(&tasks.banks(), config.train.seed);
            Checkpoint::fresh(Stage::Tune, config, model.store, per_epoch, Some(tasks.clone()))
        }
    };
    if ckpt.schedule.updates_per_epoch != per_epoch {
        return Err(Error::invalid("training set size differs from the resumed run"));
    }
    let level = config.instruct.train_level;
    run(ckpt, Work::Tune { tasks, level }, train, val, opts.stop_after)
}

impl Checkpoint {
    /// A checkpoint before the first update.
    pub fn fresh(stage: Stage, config: &RunConfig, store: ParamStore, per_epoch: usize, tasks: Option<TaskSet>) -> Self {
        let t = &config.train;
        Self {
            stage,
            config: config.clone(),
            optimizer: AdamW::new(t, store.len()),
            store,
            schedule: Schedule::new(t.epochs(stage), per_epoch, t.peak_lr, t.min_lr),
            seed: t.seed,
            tasks,
            tags: VariantTags::default(),
            curve: LossCurve::default(),
            progress: EpochProgress::default(),
        }
    }

    /// Rebuilds the model and loads the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config, self.seed)?;
        if let Some(tasks) = &self.tasks {
            model.attach_classifiers(&tasks.banks(), self.seed);
        }
        if model.store.len() != self.store.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint holds {} parameters, the configured model has {}",
                self.store.len(),
                model.store.len()
            )));
        }
        model.store.load_values_from(&self.store)?;
        Ok(model)
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "tune" => Ok(Stage::Tune),
            _ => Err(Error::invalid(format!("unknown stage `{s}`"))),
        }
    }
}
