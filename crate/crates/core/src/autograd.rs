//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns gradients for every parameter that was read through
//! [`Tape::param`].

use std::collections::HashMap;

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    AddCol { a: Var, col: Var },
    MulCol { a: Var, col: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Tanh(Var),
    Softmax { a: Var },
    NormalizeRows { a: Var, inv_std: Vec<f64> },
    Conv1dRows { x: Var, w: Var, pad: usize, block: usize },
    AvgPoolBlocks { a: Var, block: usize, width: usize },
    Transpose(Var),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    ReplaceRows { a: Var, emb: Var, rows: Vec<usize> },
    SumSquares(Var),
    Cosine { h: Var, target: Vec<f64> },
    SoftmaxXent { logits: Var, target: usize },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Reads a parameter; repeated reads share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param(id), &[]);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = Matrix::matmul_t(self.value(a), ta, self.value(b), tb);
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = broadcast_rows(self.value(a), self.value(row), |x, y| x + y);
        self.push(out, Op::AddRow { a, row }, &[a, row])
    }

    /// Multiplies every row of `a` elementwise by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = broadcast_rows(self.value(a), self.value(row), |x, y| x * y);
        self.push(out, Op::MulRow { a, row }, &[a, row])
    }

    /// Adds an `r × 1` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let out = broadcast_cols(self.value(a), self.value(col), |x, y| x + y);
        self.push(out, Op::AddCol { a, col }, &[a, col])
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let out = broadcast_cols(self.value(a), self.value(col), |x, y| x * y);
        self.push(out, Op::MulCol { a, col }, &[a, col])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is
    /// excluded and comes out as exactly zero.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let limit = if causal { (r + 1).min(x.cols()) } else { x.cols() };
            let row = &x.row(r)[..limit];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(r);
            let mut sum = 0.0;
            for (dst, &v) in o[..limit].iter_mut().zip(row) {
                *dst = (v - max).exp();
                sum += *dst;
            }
            for dst in &mut o[..limit] {
                *dst /= sum;
            }
        }
        self.push(out, Op::Softmax { a }, &[a])
    }

    /// Standardizes each row to zero mean and unit (biased) variance.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.cols() as f64;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for (dst, &v) in out.row_mut(r).iter_mut().zip(row) {
                *dst = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::NormalizeRows { a, inv_std }, &[a])
    }

    /// Per-row 1-D cross-correlation with a per-row kernel. Columns of `x`
    /// are split into independent blocks of `block` samples, each
    /// zero-padded by `pad` on both sides.
    pub fn conv1d_rows(&mut self, x: Var, w: Var, pad: usize, block: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.rows(), wv.rows(), "conv1d_rows: kernel rows must match input rows");
        assert!(block > 0 && xv.cols() % block == 0, "conv1d_rows: columns not a multiple of block");
        let k = wv.cols();
        assert!(block + 2 * pad >= k, "conv1d_rows: kernel longer than padded block");
        let out_len = block + 2 * pad - k + 1;
        let nblocks = xv.cols() / block;
        let mut out = Matrix::zeros(xv.rows(), nblocks * out_len);
        for r in 0..xv.rows() {
            let xr = xv.row(r);
            let wr = wv.row(r);
            let or = out.row_mut(r);
            for b in 0..nblocks {
                let xb = &xr[b * block..(b + 1) * block];
                let ob = &mut or[b * out_len..(b + 1) * out_len];
                for (tau, o) in ob.iter_mut().enumerate() {
                    // input index j = tau + kk - pad must lie in [0, block)
                    let kk_lo = pad.saturating_sub(tau);
                    let kk_hi = (block + pad).saturating_sub(tau).min(k);
                    let mut acc = 0.0;
                    for kk in kk_lo..kk_hi {
                        acc += wr[kk] * xb[tau + kk - pad];
                    }
                    *o = acc;
                }
            }
        }
        self.push(out, Op::Conv1dRows { x, w, pad, block }, &[x, w])
    }

    /// Non-overlapping average pooling of `width` columns within each block
    /// of `block` columns; a trailing partial window is dropped.
    pub fn avg_pool_blocks(&mut self, a: Var, block: usize, width: usize) -> Var {
        let x = self.value(a);
        assert!(block > 0 && x.cols().is_multiple_of(block));
        let per = block / width;
        let nblocks = x.cols() / block;
        let mut out = Matrix::zeros(x.rows(), nblocks * per);
        let inv = 1.0 / width as f64;
        for r in 0..x.rows() {
            let xr = x.row(r);
            let or = out.row_mut(r);
            for b in 0..nblocks {
                for p in 0..per {
                    let start = b * block + p * width;
                    or[b * per + p] = xr[start..start + width].iter().sum::<f64>() * inv;
                }
            }
        }
        self.push(out, Op::AvgPoolBlocks { a, block, width }, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols());
        let out = Matrix::from_fn(x.rows(), len, |r, c| x.get(r, start + c));
        self.push(out, Op::SliceCols { a, start }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        self.push(out, Op::SliceRows { a, start }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let out = {
            let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
            Matrix::vstack(&mats)
        };
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Column means as a `1 × c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.rows() as f64;
        let mut out = Matrix::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / n);
        self.push(out, Op::MeanRows(a), &[a])
    }

    /// Overwrites the listed rows of `a` with the `1 × c` row `emb`.
    pub fn replace_rows(&mut self, a: Var, emb: Var, rows: &[usize]) -> Var {
        let mut out = self.value(a).clone();
        let e = self.value(emb);
        assert_eq!(e.shape(), (1, out.cols()));
        for &r in rows {
            out.row_mut(r).copy_from_slice(e.data());
        }
        self.push(
            out,
            Op::ReplaceRows {
                a,
                emb,
                rows: rows.to_vec(),
            },
            &[a, emb],
        )
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum_squares());
        self.push(out, Op::SumSquares(a), &[a])
    }

    /// Cosine similarity between the row `h` and a fixed target vector.
    pub fn cosine(&mut self, h: Var, target: &[f64]) -> Var {
        let hv = self.value(h);
        assert_eq!(hv.shape(), (1, target.len()), "cosine: dimension mismatch");
        let (dot, hn, tn) = dot_norms(hv.data(), target);
        let out = Matrix::scalar(dot / (hn * tn));
        self.push(
            out,
            Op::Cosine {
                h,
                target: target.to_vec(),
            },
            &[h],
        )
    }

    /// Cross-entropy of a `1 × C` logit row against class `target`.
    pub fn softmax_xent(&mut self, logits: Var, target: usize) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows(), 1);
        let max = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let out = Matrix::scalar(lse - x.data()[target]);
        self.push(out, Op::SoftmaxXent { logits, target }, &[logits])
    }

    /// Gradients of the scalar `loss` with respect to every parameter read
    /// on this tape.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Grads::new(self.store.len());

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        // C = op(A) op(B): dop(A) = G op(B)^T
                        let ga = if *ta {
                            Matrix::matmul_t(bv, *tb, &g, true)
                        } else {
                            Matrix::matmul_t(&g, false, bv, !*tb)
                        };
                        acc(&mut grads, *a, ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = if *tb {
                            Matrix::matmul_t(&g, true, av, *ta)
                        } else {
                            Matrix::matmul_t(av, !*ta, &g, false)
                        };
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    acc_ref(&mut grads, *a, &g);
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc_ref(&mut grads, *a, &g);
                    acc(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let ga = zip_with(&g, self.value(*b), |x, y| x * y);
                    let gb = zip_with(&g, self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow { a, row } => {
                    acc(&mut grads, *row, col_sums(&g));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow { a, row } => {
                    let rv = self.value(*row);
                    let av = self.value(*a);
                    let gr = col_sums(&zip_with(&g, av, |x, y| x * y));
                    acc(&mut grads, *a, broadcast_rows(&g, rv, |x, y| x * y));
                    acc(&mut grads, *row, gr);
                }
                Op::AddCol { a, col } => {
                    acc(&mut grads, *col, row_sums(&g));
                    acc(&mut grads, *a, g);
                }
                Op::MulCol { a, col } => {
                    let cv = self.value(*col);
                    let av = self.value(*a);
                    let gc = row_sums(&zip_with(&g, av, |x, y| x * y));
                    acc(&mut grads, *a, broadcast_cols(&g, cv, |x, y| x * y));
                    acc(&mut grads, *col, gc);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|v| v * s)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Gelu(a) => {
                    let ga = zip_with(&g, self.value(*a), |gv, x| gv * gelu_grad(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = zip_with(&g, y, |gv, t| gv * (1.0 - t * t));
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax { a } => {
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, p), q) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = p * (q - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::NormalizeRows { a, inv_std } => {
                    let n = y.cols() as f64;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = yr.iter().zip(gr).map(|(p, q)| p * q).sum::<f64>() / n;
                        for ((o, yy), gg) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = inv_std[r] * (gg - mean_g - yy * mean_gy);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Conv1dRows { x, w, pad, block } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let k = wv.cols();
                    let out_len = block + 2 * pad - k + 1;
                    let nblocks = xv.cols() / block;
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    let mut gw = Matrix::zeros(wv.rows(), k);
                    for r in 0..xv.rows() {
                        let (xr, wr, gr) = (xv.row(r), wv.row(r), g.row(r));
                        let mut gwr = vec![0.0; k];
                        let gxr = gx.row_mut(r);
                        for b in 0..nblocks {
                            let xb = &xr[b * block..(b + 1) * block];
                            let gb = &gr[b * out_len..(b + 1) * out_len];
                            let gxb = &mut gxr[b * block..(b + 1) * block];
                            for (tau, &gt) in gb.iter().enumerate() {
                                let kk_lo = pad.saturating_sub(tau);
                                let kk_hi = (block + pad).saturating_sub(tau).min(k);
                                for kk in kk_lo..kk_hi {
                                    let j = tau + kk - pad;
                                    gwr[kk] += gt * xb[j];
                                    gxb[j] += gt * wr[kk];
                                }
                            }
                        }
                        gw.row_mut(r).copy_from_slice(&gwr);
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                }
                Op::AvgPoolBlocks { a, block, width } => {
                    let av = self.value(*a);
                    let per = block / width;
                    let nblocks = av.cols() / block;
                    let inv = 1.0 / *width as f64;
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let gr = g.row(r);
                        let gar = ga.row_mut(r);
                        for b in 0..nblocks {
                            for p in 0..per {
                                let start = b * block + p * width;
                                let v = gr[b * per + p] * inv;
                                for o in &mut gar[start..start + width] {
                                    *o = v;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::SliceCols { a, start } => {
                    let av = self.value(*a);
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let gp = Matrix::from_fn(g.rows(), c, |r, cc| g.get(r, off + cc));
                        acc(&mut grads, p, gp);
                        off += c;
                    }
                }
                Op::SliceRows { a, start } => {
                    let av = self.value(*a);
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    let w = av.cols();
                    ga.data_mut()[start * w..(start + g.rows()) * w].copy_from_slice(g.data());
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        acc(&mut grads, p, g.slice_rows(off, rows));
                        off += rows;
                    }
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let inv = 1.0 / av.rows() as f64;
                    let ga = Matrix::from_fn(av.rows(), av.cols(), |_, c| g.get(0, c) * inv);
                    acc(&mut grads, *a, ga);
                }
                Op::ReplaceRows { a, emb, rows } => {
                    let mut ge = Matrix::zeros(1, g.cols());
                    let mut ga = g;
                    for &r in rows {
                        for (e, v) in ge.data_mut().iter_mut().zip(ga.row(r)) {
                            *e += v;
                        }
                        ga.row_mut(r).fill(0.0);
                    }
                    acc(&mut grads, *emb, ge);
                    acc(&mut grads, *a, ga);
                }
                Op::SumSquares(a) => {
                    let s = g.item();
                    acc(&mut grads, *a, self.value(*a).map(|v| 2.0 * s * v));
                }
                Op::Cosine { h, target } => {
                    let hv = self.value(*h);
                    let (dot, hn, tn) = dot_norms(hv.data(), target);
                    let s = g.item();
                    let cos = dot / (hn * tn);
                    // d cos / dh = t/(|h||t|) - cos * h/|h|^2
                    let data = hv
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&hh, &tt)| s * (tt / (hn * tn) - cos * hh / (hn * hn)))
                        .collect();
                    acc(&mut grads, *h, Matrix::from_vec(1, target.len(), data));
                }
                Op::SoftmaxXent { logits, target } => {
                    let x = self.value(*logits);
                    let s = g.item();
                    let max = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = x.data().iter().map(|v| (v - max).exp()).sum();
                    let mut gl = x.map(|v| s * (v - max).exp() / z);
                    gl.data_mut()[*target] -= s;
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn acc_ref(grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn zip_with(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

fn broadcast_rows(a: &Matrix, row: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(row.shape(), (1, a.cols()), "row broadcast shape mismatch");
    let mut out = a.clone();
    for r in 0..out.rows() {
        for (o, &b) in out.row_mut(r).iter_mut().zip(row.data()) {
            *o = f(*o, b);
        }
    }
    out
}

fn broadcast_cols(a: &Matrix, col: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(col.shape(), (a.rows(), 1), "column broadcast shape mismatch");
    let mut out = a.clone();
    for r in 0..out.rows() {
        let b = col.data()[r];
        for o in out.row_mut(r) {
            *o = f(*o, b);
        }
    }
    out
}

fn col_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn row_sums(g: &Matrix) -> Matrix {
    Matrix::from_fn(g.rows(), 1, |r, _| g.row(r).iter().sum())
}

fn dot_norms(h: &[f64], t: &[f64]) -> (f64, f64, f64) {
    let dot = h.iter().zip(t).map(|(a, b)| a * b).sum::<f64>();
    let hn = h.iter().map(|a| a * a).sum::<f64>().sqrt();
    let tn = t.iter().map(|a| a * a).sum::<f64>().sqrt();
    (dot, hn, tn)
}
