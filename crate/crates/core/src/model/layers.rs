//! Attention, feed-forward and pre-LN transformer blocks.

use rand::Rng;
use weaksup_autograd::{real, xavier_uniform, Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::error::{Error, Result};

/// How a parameter is filled when it is created rather than loaded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Glorot uniform with explicit fan-in / fan-out.
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    Zeros,
    Ones,
}

/// Supplies parameters by name: either freshly initialized or looked up in
/// an existing store (with a shape check).
pub trait ParamSource<T: Real> {
    fn take(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId>;
}

pub struct InitSource<'a, T: Real, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Real, R: Rng> ParamSource<T> for InitSource<'_, T, R> {
    fn take(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let t = match init {
            Init::Xavier { fan_in, fan_out } => xavier_uniform(shape, fan_in, fan_out, self.rng),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
        };
        Ok(self.store.insert(name, t)?)
    }
}

pub struct LoadSource<'a, T: Real> {
    store: &'a ParamStore<T>,
    taken: usize,
}

impl<'a, T: Real> LoadSource<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self { store, taken: 0 }
    }

    /// Fails if the store holds tensors the layout never asked for.
    pub fn expect_all_used(&self) -> Result<()> {
        if self.taken != self.store.len() {
            return Err(Error::Input(format!(
                "parameter set has {} tensors, layout uses {}",
                self.store.len(),
                self.taken
            )));
        }
        Ok(())
    }
}

impl<T: Real> ParamSource<T> for LoadSource<'_, T> {
    fn take(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<ParamId> {
        let id = self.store.id(name)?;
        self.taken += 1;
        let got = self.store.get(id).shape();
        if got != shape {
            return Err(Error::Input(format!(
                "parameter {name} has shape {got:?}, expected {shape:?}"
            )));
        }
        Ok(id)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormIds {
    pub fn build<T: Real>(src: &mut impl ParamSource<T>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: src.take(&format!("{prefix}.gain"), &[dim], Init::Ones)?,
            bias: src.take(&format!("{prefix}.bias"), &[dim], Init::Zeros)?,
        })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        Ok(g.layer_norm(x, gain, bias)?)
    }
}

#[derive(Clone, Debug)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearIds {
    pub fn build<T: Real>(
        src: &mut impl ParamSource<T>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: src.take(
                &format!("{prefix}.weight"),
                &[fan_in, fan_out],
                Init::Xavier { fan_in, fan_out },
            )?,
            bias: src.take(&format!("{prefix}.bias"), &[fan_out], Init::Zeros)?,
        })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        Ok(g.linear(x, w, b)?)
    }
}

/// Projections of one multi-head attention layer. Head `h` uses columns
/// `h*d_i .. (h+1)*d_i` of `wq`, `wk`, `wv`, and rows of `wo`.
#[derive(Clone, Debug)]
pub struct AttentionIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionIds {
    pub fn build<T: Real>(src: &mut impl ParamSource<T>, prefix: &str, dim: usize) -> Result<Self> {
        let x = Init::Xavier {
            fan_in: dim,
            fan_out: dim,
        };
        Ok(Self {
            wq: src.take(&format!("{prefix}.wq"), &[dim, dim], x)?,
            wk: src.take(&format!("{prefix}.wk"), &[dim, dim], x)?,
            wv: src.take(&format!("{prefix}.wv"), &[dim, dim], x)?,
            wo: src.take(&format!("{prefix}.wo"), &[dim, dim], x)?,
        })
    }
}

/// Which keys each query may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Only the first `n` keys are valid (padding beyond).
    KeyLength(usize),
}

impl AttnMask {
    pub fn allowed(self, queries: usize, keys: usize) -> Option<Vec<bool>> {
        match self {
            AttnMask::None => None,
            AttnMask::Causal => Some((0..queries * keys).map(|i| i % keys <= i / keys).collect()),
            AttnMask::KeyLength(n) => Some((0..queries * keys).map(|i| i % keys < n).collect()),
        }
    }
}

/// `Dropout(Softmax(QKᵀ/√d)) · V`, with `d` the shared inner dimension.
pub fn self_attention<T: Real>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    mask: AttnMask,
    dropout: f64,
) -> Result<Var> {
    let d = g.value(q).cols();
    if g.value(k).cols() != d {
        return Err(Error::Input(format!(
            "query dim {d} != key dim {}",
            g.value(k).cols()
        )));
    }
    let (nq, nk) = (g.value(q).rows(), g.value(k).rows());
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, real::<T>(1.0 / (d as f64).sqrt()))?;
    let allowed = mask.allowed(nq, nk);
    let weights = g.softmax_rows(scores, allowed.as_deref())?;
    let weights = g.dropout(weights, dropout)?;
    Ok(g.matmul(weights, v)?)
}

/// Concatenation over heads of [`self_attention`] on projected inputs, then `· w_o`.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<'_, T>,
    query_in: Var,
    kv_in: Var,
    ids: &AttentionIds,
    heads: usize,
    mask: AttnMask,
    dropout: f64,
) -> Result<Var> {
    let (wq, wk, wv, wo) = (
        g.param(ids.wq),
        g.param(ids.wk),
        g.param(ids.wv),
        g.param(ids.wo),
    );
    let inner = g.value(wq).cols();
    if heads == 0 || !inner.is_multiple_of(heads) || g.value(wo).rows() != inner {
        return Err(Error::Input(format!(
            "{heads} heads do not split inner dim {inner} (w_o rows {})",
            g.value(wo).rows()
        )));
    }
    let dh = inner / heads;
    let q = g.matmul(query_in, wq)?;
    let k = g.matmul(kv_in, wk)?;
    let v = g.matmul(kv_in, wv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        outs.push(self_attention(g, qh, kh, vh, mask, dropout)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    Ok(g.matmul(cat, wo)?)
}

#[derive(Clone, Debug)]
pub struct FeedForwardIds {
    pub inner: LinearIds,
    pub outer: LinearIds,
}

/// Parameters of one pre-LN block; `cross` is present in decoder blocks.
#[derive(Clone, Debug)]
pub struct BlockIds {
    pub ln_self: LayerNormIds,
    pub self_attn: AttentionIds,
    pub cross: Option<(LayerNormIds, AttentionIds)>,
    pub ln_ffn: LayerNormIds,
    pub ffn: FeedForwardIds,
}

impl BlockIds {
    pub fn build<T: Real>(
        src: &mut impl ParamSource<T>,
        prefix: &str,
        dim: usize,
        ffn_dim: usize,
        is_decoder: bool,
    ) -> Result<Self> {
        let ln_self = LayerNormIds::build(src, &format!("{prefix}.ln_self"), dim)?;
        let self_attn = AttentionIds::build(src, &format!("{prefix}.self_attn"), dim)?;
        let cross = if is_decoder {
            Some((
                LayerNormIds::build(src, &format!("{prefix}.ln_cross"), dim)?,
                AttentionIds::build(src, &format!("{prefix}.cross_attn"), dim)?,
            ))
        } else {
            None
        };
        let ln_ffn = LayerNormIds::build(src, &format!("{prefix}.ln_ffn"), dim)?;
        let ffn = FeedForwardIds {
            inner: LinearIds::build(src, &format!("{prefix}.ffn.inner"), dim, ffn_dim)?,
            outer: LinearIds::build(src, &format!("{prefix}.ffn.outer"), ffn_dim, dim)?,
        };
        Ok(Self {
            ln_self,
            self_attn,
            cross,
            ln_ffn,
            ffn,
        })
    }

    pub fn is_decoder(&self) -> bool {
        self.cross.is_some()
    }
}

/// Pre-LN transformer block:
///
/// ```text
/// x ← x + MHA(LN(x))               (causal in the decoder)
/// x ← x + CrossMHA(LN(x), enc)     (decoder only)
/// x ← x + FFN(LN(x))               FFN = linear → relu → linear
/// ```
pub fn transformer_block<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    ids: &BlockIds,
    heads: usize,
    dropout: f64,
    self_mask: AttnMask,
    enc: Option<(Var, AttnMask)>,
) -> Result<Var> {
    let h = ids.ln_self.apply(g, x)?;
    let a = multi_head_attention(g, h, h, &ids.self_attn, heads, self_mask, dropout)?;
    let a = g.dropout(a, dropout)?;
    let mut x = g.add(x, a)?;

    if let Some((ln_cross, cross)) = &ids.cross {
        let (enc, enc_mask) = enc.ok_or(Error::MissingEncoderState)?;
        let h = ln_cross.apply(g, x)?;
        let c = multi_head_attention(g, h, enc, cross, heads, enc_mask, dropout)?;
        let c = g.dropout(c, dropout)?;
        x = g.add(x, c)?;
    }

    let h = ids.ln_ffn.apply(g, x)?;
    let f = ids.ffn.inner.apply(g, h)?;
    let f = g.relu(f)?;
    let f = g.dropout(f, dropout)?;
    let f = ids.ffn.outer.apply(g, f)?;
    let f = g.dropout(f, dropout)?;
    Ok(g.add(x, f)?)
}
