//! Building blocks shared by the transformer stacks and the Q-Former.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Matrix;

pub const LN_EPS: f64 = 1e-5;

/// Dropout state for one forward pass. Inactive when `p == 0` or no
/// generator is attached (inference).
pub struct Dropout<'r> {
    p: f64,
    rng: Option<&'r mut dyn RngCore>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn new(p: f64, rng: &'r mut dyn RngCore) -> Self {
        Self { p, rng: Some(rng) }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if self.p <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.p;
        let (r, c) = tape.value(x).shape();
        let mask = Matrix::from_fn(r, c, |_, _| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = tape.constant(mask);
        tape.mul(x, m)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// `in_dim × out_dim` weight, scaled-normal init.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let weight = store.normal(format!("{name}.weight"), group, in_dim, out_dim, std, rng);
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), group, 1, out_dim));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gain: store.filled(format!("{name}.gain"), group, 1, dim, 1.0),
            shift: store.zeros(format!("{name}.shift"), group, 1, dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let n = tape.normalize_rows(x, LN_EPS);
        let g = tape.param(self.gain);
        let b = tape.param(self.shift);
        let y = tape.mul_row(n, g);
        tape.add_row(y, b)
    }
}

/// Multi-head scaled dot-product attention projections.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Option<Linear>,
    pub heads: usize,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        output_proj: bool,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), group, dim, dim, false, rng),
            key: Linear::new(store, &format!("{name}.k"), group, dim, dim, false, rng),
            value: Linear::new(store, &format!("{name}.v"), group, dim, dim, false, rng),
            output: output_proj.then(|| Linear::new(store, &format!("{name}.o"), group, dim, dim, true, rng)),
            heads,
        }
    }

    /// `queries` attend over `keys`; returns one row per query.
    pub fn forward(&self, tape: &mut Tape, queries: Var, keys: Var, causal: bool) -> Var {
        let (out, _) = self.forward_with_weights(tape, queries, keys, causal);
        out
    }

    /// Also returns the per-head attention matrices.
    pub fn forward_with_weights(&self, tape: &mut Tape, queries: Var, keys: Var, causal: bool) -> (Var, Vec<Var>) {
        let q = self.query.forward(tape, queries);
        let k = self.key.forward(tape, keys);
        let v = self.value.forward(tape, keys);
        let dim = tape.value(q).cols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh),
                    tape.slice_cols(k, h * dh, dh),
                    tape.slice_cols(v, h * dh, dh),
                )
            };
            let scores = tape.matmul_t(qh, false, kh, true);
            let scores = tape.scale(scores, scale);
            let p = tape.softmax_rows(scores, causal);
            weights.push(p);
            outs.push(tape.matmul(p, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let out = match &self.output {
            Some(o) => o.forward(tape, merged),
            None => merged,
        };
        (out, weights)
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), group, in_dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), group, hidden, out_dim, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.fc1.forward(tape, x);
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }
}
