use weaksup_autograd::{Graph, ParamId, Real, Tensor, Var};

use super::config::ModelConfig;
use super::layers::{
    transformer_block, AttnMask, BlockIds, Init, LayerNormIds, LinearIds, ParamSource,
};
use crate::error::{Error, Result};

/// Minimum input length accepted by the encoder frontend.
pub const MIN_FRAMES: usize = 4;

/// conv2d → layer_norm (over frequency) → relu → 2×2 max-pool.
/// The convolution has no bias: the layer norm right after it removes any
/// per-channel shift.
#[derive(Clone, Debug)]
pub struct ConvBlockIds {
    pub weight: ParamId,
    pub ln: LayerNormIds,
}

#[derive(Clone, Debug)]
pub struct EncoderIds {
    pub convs: Vec<ConvBlockIds>,
    pub proj: LinearIds,
    pub blocks: Vec<BlockIds>,
    pub final_ln: LayerNormIds,
}

/// Encoder output `C = [c_1..c_τ]` inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct EncoderState {
    pub activations: Var,
    pub frames: usize,
}

/// Encoder length for `frames` input steps: two ceil-mode 2× poolings.
pub fn encoded_len(frames: usize) -> usize {
    frames.div_ceil(2).div_ceil(2)
}

impl EncoderIds {
    pub fn build<T: Real>(src: &mut impl ParamSource<T>, cfg: &ModelConfig) -> Result<Self> {
        let k = cfg.conv_kernel;
        let mut convs = Vec::with_capacity(2);
        let mut cin = 1;
        let mut freq = cfg.feat_dim;
        for (i, &cout) in cfg.conv_channels.iter().enumerate() {
            convs.push(ConvBlockIds {
                weight: src.take(
                    &format!("enc.conv{i}.weight"),
                    &[cout, cin, k, k],
                    Init::Xavier {
                        fan_in: cin * k * k,
                        fan_out: cout * k * k,
                    },
                )?,
                ln: LayerNormIds::build(src, &format!("enc.conv{i}.ln"), freq)?,
            });
            cin = cout;
            freq = freq.div_ceil(2);
        }
        let proj = LinearIds::build(src, "enc.proj", cin * freq, cfg.model_dim)?;
        let blocks = (0..cfg.enc_blocks)
            .map(|i| {
                BlockIds::build(
                    src,
                    &format!("enc.block{i}"),
                    cfg.model_dim,
                    cfg.ffn_dim,
                    false,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNormIds::build(src, "enc.final_ln", cfg.model_dim)?;
        Ok(Self {
            convs,
            proj,
            blocks,
            final_ln,
        })
    }
}

/// Two convolution blocks over (time, frequency), flattened per frame and
/// projected to the model dimension: `[T, d_in] -> [⌈T/4⌉, d]`.
pub fn encoder_frontend<T: Real>(
    g: &mut Graph<'_, T>,
    ids: &EncoderIds,
    cfg: &ModelConfig,
    features: &Tensor<T>,
) -> Result<Var> {
    let (frames, dim) = match features.shape() {
        [t, d] => (*t, *d),
        other => return Err(Error::Input(format!("features must be T×d, got {other:?}"))),
    };
    if dim != cfg.feat_dim {
        return Err(Error::Input(format!(
            "feature dim {dim} != configured {}",
            cfg.feat_dim
        )));
    }
    if frames < MIN_FRAMES {
        return Err(Error::TooShort {
            frames,
            min: MIN_FRAMES,
        });
    }
    let mut x = g.constant(features.clone().reshaped(vec![1, frames, dim])?)?;
    for conv in &ids.convs {
        let w = g.param(conv.weight);
        let no_bias = g.constant(Tensor::zeros(&[g.value(w).shape()[0]]))?;
        x = g.conv2d(x, w, no_bias)?;
        x = conv.ln.apply(g, x)?;
        x = g.relu(x)?;
        x = g.maxpool2d(x)?;
    }
    let flat = g.channels_to_frames(x)?;
    ids.proj.apply(g, flat)
}

/// Frontend followed by the encoder transformer stack and a final layer norm.
pub fn encode<T: Real>(
    g: &mut Graph<'_, T>,
    ids: &EncoderIds,
    cfg: &ModelConfig,
    features: &Tensor<T>,
) -> Result<EncoderState> {
    let mut x = encoder_frontend(g, ids, cfg, features)?;
    for block in &ids.blocks {
        x = transformer_block(g, x, block, cfg.heads, cfg.dropout, AttnMask::None, None)?;
    }
    let x = ids.final_ln.apply(g, x)?;
    let frames = g.value(x).rows();
    Ok(EncoderState {
        activations: x,
        frames,
    })
}
