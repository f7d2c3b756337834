use weaksup_autograd::{Graph, ParamId, Real, Var};

use super::config::ModelConfig;
use super::encoder::EncoderState;
use super::layers::{
    transformer_block, AttnMask, BlockIds, Init, LayerNormIds, LinearIds, ParamSource,
};
use crate::error::{Error, Result};
use crate::TokenId;

#[derive(Clone, Debug)]
pub struct CausalConvIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct DecoderIds {
    pub embed: ParamId,
    pub convs: Vec<CausalConvIds>,
    pub proj: LinearIds,
    pub blocks: Vec<BlockIds>,
    pub final_ln: LayerNormIds,
    pub out: LinearIds,
}

impl DecoderIds {
    pub fn build<T: Real>(src: &mut impl ParamSource<T>, cfg: &ModelConfig) -> Result<Self> {
        let ch = cfg.dec_conv_channels;
        let k = cfg.dec_conv_kernel;
        let embed = src.take(
            "dec.embed",
            &[cfg.vocab_size, ch],
            Init::Xavier {
                fan_in: cfg.vocab_size,
                fan_out: ch,
            },
        )?;
        let convs = (0..cfg.dec_conv_layers)
            .map(|i| {
                Ok(CausalConvIds {
                    weight: src.take(
                        &format!("dec.conv{i}.weight"),
                        &[ch, ch, k],
                        Init::Xavier {
                            fan_in: ch * k,
                            fan_out: ch * k,
                        },
                    )?,
                    bias: src.take(&format!("dec.conv{i}.bias"), &[ch], Init::Zeros)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let proj = LinearIds::build(src, "dec.proj", ch, cfg.model_dim)?;
        let blocks = (0..cfg.dec_blocks)
            .map(|i| {
                BlockIds::build(
                    src,
                    &format!("dec.block{i}"),
                    cfg.model_dim,
                    cfg.ffn_dim,
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNormIds::build(src, "dec.final_ln", cfg.model_dim)?;
        let out = LinearIds::build(src, "dec.out", cfg.model_dim, cfg.vocab_size)?;
        Ok(Self {
            embed,
            convs,
            proj,
            blocks,
            final_ln,
            out,
        })
    }
}

/// Token embedding followed by causal 1-D convolutions (ReLU after each) and
/// a projection to the model dimension. Output row `i` depends only on
/// `tokens[..=i]`.
pub fn decoder_frontend<T: Real>(
    g: &mut Graph<'_, T>,
    ids: &DecoderIds,
    tokens: &[TokenId],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Empty("decoder input"));
    }
    let table = g.param(ids.embed);
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut x = g.embedding(table, &idx)?;
    for conv in &ids.convs {
        let (w, b) = (g.param(conv.weight), g.param(conv.bias));
        x = g.conv1d_causal(x, w, b)?;
        x = g.relu(x)?;
    }
    ids.proj.apply(g, x)
}

/// Decoder stack on top of the frontend; returns `[len(prefix), vocab]` logits.
pub fn decode<T: Real>(
    g: &mut Graph<'_, T>,
    ids: &DecoderIds,
    cfg: &ModelConfig,
    prefix: &[TokenId],
    enc: &EncoderState,
) -> Result<Var> {
    let mut x = decoder_frontend(g, ids, prefix)?;
    let enc_in = Some((enc.activations, AttnMask::KeyLength(enc.frames)));
    for block in &ids.blocks {
        x = transformer_block(
            g,
            x,
            block,
            cfg.heads,
            cfg.dropout,
            AttnMask::Causal,
            enc_in,
        )?;
    }
    let x = ids.final_ln.apply(g, x)?;
    ids.out.apply(g, x)
}
