//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every forward op in
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! returns a [`Gradients`] aligned with the store; parameters the loss does not
//! reach get zero gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AutogradError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{dims2, gemm_nn, gemm_nt, gemm_tn, real, Real, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Controls the behavior of stochastic ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks drawn from a generator keyed on `(seed, op counter)`.
    Train { seed: u64 },
    /// Dropout is the identity.
    Eval,
    /// Gradient checking: any dropout with `p > 0` is an error.
    Check,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Dropout(Var, Vec<T>),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ChannelsToFrames(Var),
    Sum(Var),
    Nll {
        x: Var,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    Custom {
        x: Var,
        grad: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Dropout(..) => "dropout",
            Op::Softmax(_) => "softmax_rows",
            Op::LogSoftmax(_) => "log_softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Conv1d { .. } => "conv1d_causal",
            Op::Embedding { .. } => "embedding",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ChannelsToFrames(_) => "channels_to_frames",
            Op::Sum(_) => "sum",
            Op::Nll { .. } => "nll",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor<T>>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    mode: Mode,
    dropout_counter: u64,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            mode,
            dropout_counter: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (_, Some(t)) => t,
            (Op::Param(id), None) => self.params.get(*id),
            _ => unreachable!("non-param node without value"),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutogradError::NonFiniteForward {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(Op::Leaf, t, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), out, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        self.push(Op::Transpose(a), out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(AutogradError::Shape {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), out, rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(AutogradError::Shape {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), out, rg)
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.cols();
        if tb.len() != c {
            return Err(AutogradError::Shape {
                op: "add_row",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let bias = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % c])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        self.push(Op::AddRow(x, b), out, rg)
    }

    /// `x · w + b` with `w: [in, out]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(Op::Scale(x, s), out, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(Op::Relu(x), out, rg)
    }

    /// Inverted dropout. Identity outside [`Mode::Train`] or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutogradError::invalid(
                "dropout",
                format!("p={p} outside [0, 1)"),
            ));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let seed = match self.mode {
            Mode::Eval => return Ok(x),
            Mode::Check => return Err(AutogradError::StochasticInCheck("dropout")),
            Mode::Train { seed } => seed,
        };
        let counter = self.dropout_counter;
        self.dropout_counter += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, counter));
        let keep = real::<T>(1.0 / (1.0 - p));
        let tx = self.value(x);
        let mask: Vec<T> = (0..tx.len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(Op::Dropout(x, mask), out, rg)
    }

    /// Row-wise softmax over the last dimension. `allowed`, when given, marks
    /// the entries that take part; the rest get probability zero. A row with
    /// nothing allowed is an error.
    pub fn softmax_rows(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if c == 0 {
            return Err(AutogradError::invalid("softmax_rows", "zero columns"));
        }
        if let Some(m) = allowed {
            if m.len() != tx.len() {
                return Err(AutogradError::invalid(
                    "softmax_rows",
                    format!("mask length {} for {} entries", m.len(), tx.len()),
                ));
            }
        }
        let mut out = vec![T::zero(); tx.len()];
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let ok = |j: usize| allowed.is_none_or(|m| m[r * c + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if ok(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(AutogradError::FullyMaskedRow { row: r });
            }
            let orow = &mut out[r * c..(r + 1) * c];
            let mut total = T::zero();
            for (j, (o, &v)) in orow.iter_mut().zip(row).enumerate() {
                if ok(j) {
                    *o = (v - max).exp();
                    total = total + *o;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / total;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(Op::Softmax(x), out, rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if c == 0 {
            return Err(AutogradError::invalid("log_softmax_rows", "zero columns"));
        }
        let mut out = Vec::with_capacity(tx.len());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|&v| v - lse));
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(Op::LogSoftmax(x), out, rg)
    }

    /// Normalizes each row over the last dimension, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let (tg, tb) = (self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(AutogradError::Shape {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let n = real::<T>(c as f64);
        let eps = real::<T>(LAYER_NORM_EPS);
        let rows = tx.rows();
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.len());
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
            rg,
        )
    }

    /// Stride-1 "same" cross-correlation.
    /// `x: [c_in, h, w]`, `w: [c_out, c_in, k, k]` with odd `k`, `b: [c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (cin, h, wd) = dims3(tx)?;
        let (cout, k) = match tw.shape() {
            [co, ci, k1, k2] if *ci == cin && k1 == k2 && k1 % 2 == 1 => (*co, *k1),
            _ => {
                return Err(AutogradError::Shape {
                    op: "conv2d",
                    lhs: tx.shape().to_vec(),
                    rhs: tw.shape().to_vec(),
                })
            }
        };
        if tb.len() != cout {
            return Err(AutogradError::invalid(
                "conv2d",
                "bias length != output channels",
            ));
        }
        if h == 0 || wd == 0 {
            return Err(AutogradError::invalid("conv2d", "empty input plane"));
        }
        let hw = h * wd;
        let col = im2col(tx.data(), cin, h, wd, k);
        let mut out = vec![T::zero(); cout * hw];
        for (co, plane) in out.chunks_mut(hw).enumerate() {
            plane.iter_mut().for_each(|o| *o = tb.data()[co]);
        }
        gemm_nn(tw.data(), &col, &mut out, cout, cin * k * k, hw);
        let out = Tensor::new(vec![cout, h, wd], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Op::Conv2d { x, w, b }, out, rg)
    }

    /// 2×2 max pooling over the two trailing axes of `[c, h, w]`, ceil mode:
    /// output is `[c, ⌈h/2⌉, ⌈w/2⌉]`, edge windows use only in-range cells.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (c, h, w) = dims3(tx)?;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let xd = tx.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = usize::MAX;
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for xx in 2 * ox..(2 * ox + 2).min(w) {
                            let idx = (ch * h + y) * w + xx;
                            if best == usize::MAX || xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], out)?;
        let rg = self.rg(x);
        self.push(Op::MaxPool2d { x, argmax }, out, rg)
    }

    /// Causal (left-padded) 1-D convolution over time.
    /// `x: [len, c_in]`, `w: [c_out, c_in, k]`, `b: [c_out]`; output `[len, c_out]`
    /// where step `t` sees inputs `t-k+1 ..= t`.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (len, cin) = dims2(tx)?;
        let (cout, k) = match tw.shape() {
            [co, ci, k] if *ci == cin && *k >= 1 => (*co, *k),
            _ => {
                return Err(AutogradError::Shape {
                    op: "conv1d_causal",
                    lhs: tx.shape().to_vec(),
                    rhs: tw.shape().to_vec(),
                })
            }
        };
        if tb.len() != cout {
            return Err(AutogradError::invalid(
                "conv1d_causal",
                "bias length != output channels",
            ));
        }
        let xd = tx.data();
        let mut out = Vec::with_capacity(len * cout);
        for _ in 0..len {
            out.extend_from_slice(tb.data());
        }
        // Tap j reads the input `k - 1 - j` steps back.
        for (j, wj) in conv1d_taps(tw.data(), cout, cin, k).iter().enumerate() {
            let shift = k - 1 - j;
            if shift >= len {
                continue;
            }
            let m = len - shift;
            gemm_nt(&xd[..m * cin], wj, &mut out[shift * cout..], m, cin, cout);
        }
        let out = Tensor::new(vec![len, cout], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Op::Conv1d { x, w, b }, out, rg)
    }

    /// Gathers rows of `table: [vocab, dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, dim) = dims2(tt)?;
        if ids.is_empty() {
            return Err(AutogradError::invalid("embedding", "empty id sequence"));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(AutogradError::invalid(
                    "embedding",
                    format!("id {id} out of range for vocab {vocab}"),
                ));
            }
            out.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), dim], out)?;
        let rg = self.rg(table);
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            out,
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = dims2(tx)?;
        if start + width > c {
            return Err(AutogradError::invalid(
                "slice_cols",
                format!("columns {start}..{} of {c}", start + width),
            ));
        }
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&tx.row(i)[start..start + width]);
        }
        let out = Tensor::new(vec![r, width], out)?;
        let rg = self.rg(x);
        self.push(Op::SliceCols { x, start }, out, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AutogradError::invalid("concat_cols", "no inputs"))?;
        let r = dims2(self.value(*first))?.0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = dims2(self.value(p))?;
            if pr != r {
                return Err(AutogradError::Shape {
                    op: "concat_cols",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatCols(parts.to_vec()), out, rg)
    }

    /// `[c, t, f] -> [t, c*f]`, laying channel-major feature planes side by side.
    pub fn channels_to_frames(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (c, t, f) = dims3(tx)?;
        let xd = tx.data();
        let mut out = vec![T::zero(); c * t * f];
        for ch in 0..c {
            for ti in 0..t {
                let src = &xd[(ch * t + ti) * f..(ch * t + ti + 1) * f];
                out[ti * c * f + ch * f..ti * c * f + (ch + 1) * f].copy_from_slice(src);
            }
        }
        let out = Tensor::new(vec![t, c * f], out)?;
        let rg = self.rg(x);
        self.push(Op::ChannelsToFrames(x), out, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(AutogradError::invalid("mean", "empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, real::<T>(1.0 / n as f64))
    }

    /// Mean negative log-likelihood of `targets` under row-wise log-probs.
    /// `None` targets are skipped and excluded from the mean.
    pub fn nll(&mut self, log_probs: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tx = self.value(log_probs);
        let (r, c) = dims2(tx)?;
        if targets.len() != r {
            return Err(AutogradError::invalid(
                "nll",
                format!("{} targets for {r} rows", targets.len()),
            ));
        }
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= c {
                    return Err(AutogradError::invalid(
                        "nll",
                        format!("target {t} out of range for {c} classes"),
                    ));
                }
                total = total - tx.at(i, t);
                count += 1;
            }
        }
        if count == 0 {
            return Err(AutogradError::invalid("nll", "every target is ignored"));
        }
        let v = total / real::<T>(count as f64);
        let rg = self.rg(log_probs);
        self.push(
            Op::Nll {
                x: log_probs,
                targets: targets.to_vec(),
                count,
            },
            Tensor::scalar(v),
            rg,
        )
    }

    /// Scalar node whose value and input gradient were computed externally.
    pub fn custom_scalar(&mut self, x: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != grad.shape() {
            return Err(AutogradError::Shape {
                op: "custom",
                lhs: tx.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let rg = self.rg(x);
        self.push(Op::Custom { x, grad }, Tensor::scalar(value), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutogradError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut out = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let name = node.op.name();
            let mut acc = Acc {
                graph: self,
                grads: &mut grads,
                op: name,
                node: i,
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.get_mut(*id).axpy(T::one(), &g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    if self.rg(*a) {
                        let mut da = vec![T::zero(); m * k];
                        gemm_nt(g.data(), tb.data(), &mut da, m, n, k);
                        acc.add(*a, Tensor::new(vec![m, k], da)?)?;
                    }
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); k * n];
                        gemm_tn(ta.data(), g.data(), &mut db, k, m, n);
                        acc.add(*b, Tensor::new(vec![k, n], db)?)?;
                    }
                }
                Op::Transpose(a) => acc.add(*a, g.transpose()?)?,
                Op::Add(a, b) => {
                    acc.add(*a, g.clone())?;
                    acc.add(*b, g)?;
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da = g
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    let db = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    acc.add(*a, Tensor::new(g.shape().to_vec(), da)?)?;
                    acc.add(*b, Tensor::new(g.shape().to_vec(), db)?)?;
                }
                Op::AddRow(x, b) => {
                    if self.rg(*b) {
                        let c = g.cols();
                        let mut db = vec![T::zero(); c];
                        for (j, &v) in g.data().iter().enumerate() {
                            db[j % c] = db[j % c] + v;
                        }
                        let shape = self.value(*b).shape().to_vec();
                        acc.add(*b, Tensor::new(shape, db)?)?;
                    }
                    acc.add(*x, g)?;
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    acc.add(*x, g.map(|v| v * s))?;
                }
                Op::Relu(x) => {
                    let tx = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    acc.add(*x, Tensor::new(g.shape().to_vec(), data)?)?;
                }
                Op::Dropout(x, mask) => {
                    let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    acc.add(*x, Tensor::new(g.shape().to_vec(), data)?)?;
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().expect("softmax output");
                    let c = y.cols();
                    let mut dx = vec![T::zero(); y.len()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc.add(*x, Tensor::new(y.shape().to_vec(), dx)?)?;
                }
                Op::LogSoftmax(x) => {
                    let y = node.value.as_ref().expect("log_softmax output");
                    let c = y.cols();
                    let mut dx = vec![T::zero(); y.len()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let gs: T = gr.iter().copied().sum();
                        for j in 0..c {
                            dx[r * c + j] = gr[j] - yr[j].exp() * gs;
                        }
                    }
                    acc.add(*x, Tensor::new(y.shape().to_vec(), dx)?)?;
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let tg = self.value(*gain);
                    let c = tg.len();
                    let rows = inv_std.len();
                    let mut dgain = vec![T::zero(); c];
                    let mut dbias = vec![T::zero(); c];
                    let mut dx = vec![T::zero(); rows * c];
                    let n = real::<T>(c as f64);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for j in 0..c {
                            dgain[j] = dgain[j] + gr[j] * hr[j];
                            dbias[j] = dbias[j] + gr[j];
                            let d = gr[j] * tg.data()[j];
                            sum_d = sum_d + d;
                            sum_dh = sum_dh + d * hr[j];
                        }
                        let k = inv_std[r] / n;
                        for j in 0..c {
                            let d = gr[j] * tg.data()[j];
                            dx[r * c + j] = k * (n * d - sum_d - hr[j] * sum_dh);
                        }
                    }
                    acc.add(*gain, Tensor::new(tg.shape().to_vec(), dgain)?)?;
                    let bshape = self.value(*bias).shape().to_vec();
                    acc.add(*bias, Tensor::new(bshape, dbias)?)?;
                    acc.add(*x, Tensor::new(g.shape().to_vec(), dx)?)?;
                }
                Op::Conv2d { x, w, b } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (cin, h, wd) = dims3(tx)?;
                    let (cout, k) = (tw.shape()[0], tw.shape()[2]);
                    let (hw, ckk) = (h * wd, cin * k * k);
                    let gd = g.data();
                    let col = im2col(tx.data(), cin, h, wd, k);
                    let mut dw = vec![T::zero(); tw.len()];
                    gemm_nt(gd, &col, &mut dw, cout, hw, ckk);
                    let db: Vec<T> = gd.chunks(hw).map(|p| p.iter().copied().sum()).collect();
                    if self.rg(*x) {
                        let mut dcol = vec![T::zero(); ckk * hw];
                        gemm_tn(tw.data(), gd, &mut dcol, ckk, cout, hw);
                        let dx = col2im(&dcol, cin, h, wd, k);
                        acc.add(*x, Tensor::new(tx.shape().to_vec(), dx)?)?;
                    }
                    acc.add(*w, Tensor::new(tw.shape().to_vec(), dw)?)?;
                    let bshape = self.value(*b).shape().to_vec();
                    acc.add(*b, Tensor::new(bshape, db)?)?;
                }
                Op::MaxPool2d { x, argmax } => {
                    let tx = self.value(*x);
                    let mut dx = vec![T::zero(); tx.len()];
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dx[src] = dx[src] + gv;
                    }
                    acc.add(*x, Tensor::new(tx.shape().to_vec(), dx)?)?;
                }
                Op::Conv1d { x, w, b } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (len, cin) = (tx.shape()[0], tx.shape()[1]);
                    let (cout, k) = (tw.shape()[0], tw.shape()[2]);
                    let (xd, wdata, gd) = (tx.data(), tw.data(), g.data());
                    let mut dx = vec![T::zero(); xd.len()];
                    let mut dw = vec![T::zero(); wdata.len()];
                    let mut db = vec![T::zero(); cout];
                    for grow in gd.chunks_exact(cout) {
                        for (d, &gv) in db.iter_mut().zip(grow) {
                            *d = *d + gv;
                        }
                    }
                    let mut dwj = vec![T::zero(); cout * cin];
                    for (j, wj) in conv1d_taps(wdata, cout, cin, k).iter().enumerate() {
                        let shift = k - 1 - j;
                        if shift >= len {
                            continue;
                        }
                        let m = len - shift;
                        let g_rows = &gd[shift * cout..];
                        gemm_nn(g_rows, wj, &mut dx[..m * cin], m, cout, cin);
                        dwj.iter_mut().for_each(|v| *v = T::zero());
                        gemm_tn(g_rows, &xd[..m * cin], &mut dwj, cout, m, cin);
                        for (idx, &v) in dwj.iter().enumerate() {
                            dw[idx * k + j] = v;
                        }
                    }
                    acc.add(*x, Tensor::new(tx.shape().to_vec(), dx)?)?;
                    acc.add(*w, Tensor::new(tw.shape().to_vec(), dw)?)?;
                    let bshape = self.value(*b).shape().to_vec();
                    acc.add(*b, Tensor::new(bshape, db)?)?;
                }
                Op::Embedding { table, ids } => {
                    let tt = self.value(*table);
                    let dim = tt.cols();
                    let mut dt = vec![T::zero(); tt.len()];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            dt[id * dim + j] = dt[id * dim + j] + g.at(i, j);
                        }
                    }
                    acc.add(*table, Tensor::new(tt.shape().to_vec(), dt)?)?;
                }
                Op::SliceCols { x, start } => {
                    let tx = self.value(*x);
                    let (r, c) = (tx.shape()[0], tx.shape()[1]);
                    let wdt = g.cols();
                    let mut dx = vec![T::zero(); r * c];
                    for i in 0..r {
                        dx[i * c + start..i * c + start + wdt].copy_from_slice(g.row(i));
                    }
                    acc.add(*x, Tensor::new(vec![r, c], dx)?)?;
                }
                Op::ConcatCols(parts) => {
                    let r = g.rows();
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let mut dp = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            dp.extend_from_slice(&g.row(i)[off..off + pc]);
                        }
                        off += pc;
                        acc.add(p, Tensor::new(vec![r, pc], dp)?)?;
                    }
                }
                Op::ChannelsToFrames(x) => {
                    let tx = self.value(*x);
                    let (c, t, f) = dims3(tx)?;
                    let gd = g.data();
                    let mut dx = vec![T::zero(); tx.len()];
                    for ch in 0..c {
                        for ti in 0..t {
                            dx[(ch * t + ti) * f..(ch * t + ti + 1) * f].copy_from_slice(
                                &gd[ti * c * f + ch * f..ti * c * f + (ch + 1) * f],
                            );
                        }
                    }
                    acc.add(*x, Tensor::new(tx.shape().to_vec(), dx)?)?;
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc.add(*x, Tensor::full(&shape, g.item()))?;
                }
                Op::Nll { x, targets, count } => {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let k = -g.item() / real::<T>(*count as f64);
                    let mut dx = vec![T::zero(); tx.len()];
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            dx[i * c + t] = k;
                        }
                    }
                    acc.add(*x, Tensor::new(tx.shape().to_vec(), dx)?)?;
                }
                Op::Custom { x, grad } => {
                    let k = g.item();
                    acc.add(*x, grad.map(|v| v * k))?;
                }
            }
        }
        Ok(out)
    }
}

struct Acc<'a, 'p, T: Real> {
    graph: &'a Graph<'p, T>,
    grads: &'a mut Vec<Option<Tensor<T>>>,
    op: &'static str,
    node: usize,
}

impl<T: Real> Acc<'_, '_, T> {
    fn add(&mut self, target: Var, contrib: Tensor<T>) -> Result<()> {
        if !self.graph.rg(target) {
            return Ok(());
        }
        if !contrib.is_finite() {
            return Err(AutogradError::NonFiniteGradient {
                op: self.op,
                node: self.node,
            });
        }
        match &mut self.grads[target.0] {
            Some(existing) => existing.axpy(T::one(), &contrib),
            slot @ None => *slot = Some(contrib),
        }
        Ok(())
    }
}

fn dims3<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        other => Err(AutogradError::Rank {
            expected: 3,
            shape: other.to_vec(),
        }),
    }
}

/// Output columns `xo` for which `xo + kx - pad` lands inside `0..w`.
#[inline]
/// Unfolds `[cin, h, w]` into `[cin·k·k, h·w]` patches with zero padding `k/2`.
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let hw = h * w;
    let mut col = vec![T::zero(); cin * k * k * hw];
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let (x0, x1) = valid_range(w, kx, pad);
                if x0 == x1 {
                    continue;
                }
                for y in 0..h {
                    let Some(iy) = (y + ky).checked_sub(pad).filter(|&iy| iy < h) else {
                        continue;
                    };
                    let src = &plane[iy * w + x0 + kx - pad..iy * w + x1 + kx - pad];
                    row[y * w + x0..y * w + x1].copy_from_slice(src);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto `[cin, h, w]`.
fn col2im<T: Real>(col: &[T], cin: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let hw = h * w;
    let mut x = vec![T::zero(); cin * hw];
    for ci in 0..cin {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let (x0, x1) = valid_range(w, kx, pad);
                if x0 == x1 {
                    continue;
                }
                for y in 0..h {
                    let Some(iy) = (y + ky).checked_sub(pad).filter(|&iy| iy < h) else {
                        continue;
                    };
                    let dst = &mut plane[iy * w + x0 + kx - pad..iy * w + x1 + kx - pad];
                    for (d, &v) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
    x
}

fn valid_range(w: usize, kx: usize, pad: usize) -> (usize, usize) {
    let x0 = pad.saturating_sub(kx);
    let x1 = (w + pad).saturating_sub(kx).min(w);
    (x0, x1.max(x0))
}

pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + xs.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// SplitMix64 finalizer over `(seed, counter)`.
pub fn mix_seed(seed: u64, counter: u64) -> u64 {
    let mut z = seed ^ counter.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splits `[cout, cin, k]` kernels into `k` contiguous `[cout, cin]` matrices.
fn conv1d_taps<T: Real>(w: &[T], cout: usize, cin: usize, k: usize) -> Vec<Vec<T>> {
    (0..k)
        .map(|j| (0..cout * cin).map(|idx| w[idx * k + j]).collect())
        .collect()
}
