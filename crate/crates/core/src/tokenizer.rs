//! Convolutional tokenizer: temporal convolution, depthwise spatial
//! convolution over all 65 channels, batch normalization and average
//! pooling. A `65 × 100` segment becomes 10 tokens of width `d`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::signal::{Segment, MONTAGE_CHANNELS};
use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    /// Token width `d`; must equal the encoder width.
    pub dim: usize,
    pub channels: usize,
    pub temporal_kernel: usize,
    pub temporal_padding: usize,
    pub pool_width: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            channels: MONTAGE_CHANNELS,
            temporal_kernel: 40,
            temporal_padding: 20,
            pool_width: 10,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl TokenizerConfig {
    /// Length of the temporal convolution output for a window of `t`.
    pub fn conv_len(&self, t: usize) -> usize {
        t + 2 * self.temporal_padding + 1 - self.temporal_kernel
    }

    /// `floor((t + 2·pad − kernel + 1) / pool)`.
    pub fn tokens_per_segment(&self, t: usize) -> usize {
        self.conv_len(t) / self.pool_width
    }
}

/// Tokens for a run of segments plus where each token came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Matrix,
    pub provenance: Vec<TokenOrigin>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenOrigin {
    pub trial_id: String,
    pub segment: usize,
    pub position: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Batch-norm statistics observed during a training-mode pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as folded into the running estimate.
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    /// `d × 65`, one spatial filter per feature map.
    pub spatial: ParamId,
    /// `d × kernel`, one temporal filter per feature map.
    pub temporal: ParamId,
    pub bias: ParamId,
    pub bn_gain: ParamId,
    pub bn_shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl Tokenizer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: TokenizerConfig, rng: &mut R) -> Self {
        let d = config.dim;
        let g = ParamGroup::Tokenizer;
        Self {
            spatial: store.normal("tokenizer.spatial", g, d, config.channels, (1.0 / config.channels as f64).sqrt(), rng),
            temporal: store.normal(
                "tokenizer.temporal",
                g,
                d,
                config.temporal_kernel,
                (1.0 / config.temporal_kernel as f64).sqrt(),
                rng,
            ),
            bias: store.zeros("tokenizer.bias", g, d, 1),
            bn_gain: store.filled("tokenizer.bn_gain", g, d, 1, 1.0),
            bn_shift: store.zeros("tokenizer.bn_shift", g, d, 1),
            running_mean: store.zeros("tokenizer.running_mean", ParamGroup::Buffer, d, 1),
            running_var: store.filled("tokenizer.running_var", ParamGroup::Buffer, d, 1, 1.0),
            config,
        }
    }

    /// Records the forward pass for `segments` (each `channels × t`, all the
    /// same `t`) and returns `(S·tokens_per_segment) × d` tokens, segment by
    /// segment.
    ///
    /// The spatial filter is applied before the temporal one; both are
    /// linear maps acting on different axes, so the order does not change
    /// the result.
    pub fn forward(&self, tape: &mut Tape, segments: &[&Matrix], training: bool) -> Result<(Var, Option<BatchStats>)> {
        let cfg = &self.config;
        let t = segments
            .first()
            .map(|m| m.cols())
            .ok_or_else(|| Error::invalid("tokenize needs at least one segment"))?;
        for s in segments {
            if s.shape() != (cfg.channels, t) {
                return Err(Error::Shape(format!(
                    "segment is {}x{}, expected {}x{t}",
                    s.rows(),
                    s.cols(),
                    cfg.channels
                )));
            }
        }
        if cfg.tokens_per_segment(t) == 0 {
            return Err(Error::invalid(format!("window of {t} samples yields no tokens")));
        }
        let mut x = Matrix::zeros(cfg.channels, segments.len() * t);
        for (i, s) in segments.iter().enumerate() {
            for c in 0..cfg.channels {
                x.row_mut(c)[i * t..(i + 1) * t].copy_from_slice(s.row(c));
            }
        }
        let x = tape.constant(x);
        let spatial = tape.param(self.spatial);
        let mixed = tape.matmul(spatial, x);
        let temporal = tape.param(self.temporal);
        let conv = tape.conv1d_rows(mixed, temporal, cfg.temporal_padding, t);
        let bias = tape.param(self.bias);
        let pre = tape.add_col(conv, bias);

        let (normed, stats) = if training {
            let v = tape.value(pre);
            let n = v.cols() as f64;
            let mut mean = Vec::with_capacity(v.rows());
            let mut var = Vec::with_capacity(v.rows());
            for r in 0..v.rows() {
                let row = v.row(r);
                let m = row.iter().sum::<f64>() / n;
                let ss = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
                mean.push(m);
                var.push(if n > 1.0 { ss / (n - 1.0) } else { ss });
            }
            (tape.normalize_rows(pre, cfg.bn_eps), Some(BatchStats { mean, var }))
        } else {
            let store = tape.store();
            let rm = store.value(self.running_mean).map(|m| -m);
            let rv = store.value(self.running_var).map(|v| 1.0 / (v + cfg.bn_eps).sqrt());
            let rm = tape.constant(rm);
            let rv = tape.constant(rv);
            let centered = tape.add_col(pre, rm);
            (tape.mul_col(centered, rv), None)
        };
        let gain = tape.param(self.bn_gain);
        let shift = tape.param(self.bn_shift);
        let y = tape.mul_col(normed, gain);
        let y = tape.add_col(y, shift);
        let pooled = tape.avg_pool_blocks(y, cfg.conv_len(t), cfg.pool_width);
        Ok((tape.transpose(pooled), stats))
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running_stats(&self, store: &mut ParamStore, stats: &BatchStats) {
        let mom = self.config.bn_momentum;
        let rm = store.value_mut(self.running_mean);
        for (r, m) in rm.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - mom) * *r + mom * m;
        }
        let rv = store.value_mut(self.running_var);
        for (r, v) in rv.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - mom) * *r + mom * v;
        }
    }

    /// Tokenizes segments outside of training. In training mode the running
    /// statistics are updated from this batch.
    pub fn tokenize(&self, store: &mut ParamStore, segments: &[Segment], training: bool) -> Result<TokenSequence> {
        let mats: Vec<Matrix> = segments.iter().map(|s| segment_matrix(&s.data, 1.0)).collect();
        let refs: Vec<&Matrix> = mats.iter().collect();
        let (tokens, stats) = {
            let mut tape = Tape::new(store);
            let (v, stats) = self.forward(&mut tape, &refs, training)?;
            (tape.value(v).clone(), stats)
        };
        if let Some(stats) = stats {
            self.update_running_stats(store, &stats);
        }
        if !tokens.all_finite() {
            return Err(Error::NonFinite("tokens".into()));
        }
        let per = tokens.rows() / segments.len();
        let provenance = segments
            .iter()
            .flat_map(|s| {
                (0..per).map(move |p| TokenOrigin {
                    trial_id: s.trial_id.clone(),
                    segment: s.index,
                    position: p,
                })
            })
            .collect();
        Ok(TokenSequence { tokens, provenance })
    }
}

/// Converts segment samples to a scaled `f64` matrix.
pub fn segment_matrix(data: &Array2<f32>, scale: f64) -> Matrix {
    let (r, c) = data.dim();
    Matrix::from_fn(r, c, |i, j| data[[i, j]] as f64 * scale)
}
