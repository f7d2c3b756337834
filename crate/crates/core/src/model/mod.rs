//! Convolutional transformer encoder-decoder.
//!
//! Position information comes only from the convolutional frontends: 2-D
//! convolutions over (time, frequency) on the encoder side and causal 1-D
//! convolutions over previous tokens on the decoder side. There is no
//! positional encoding.

pub mod beam;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weaksup_autograd::{Graph, ParamStore, Real, Tensor, Var};

pub use beam::{beam_search, beam_search_with, Hypothesis};
pub use config::ModelConfig;
pub use decoder::{decode, decoder_frontend, DecoderIds};
pub use encoder::{encode, encoded_len, encoder_frontend, EncoderIds, EncoderState, MIN_FRAMES};
pub use layers::{
    multi_head_attention, self_attention, transformer_block, AttentionIds, AttnMask, BlockIds,
    InitSource, LoadSource, ParamSource,
};

use crate::error::{Error, Result};
use crate::{TokenId, BOS, EOS};

/// θ = {θ_enc, θ_dec}: the full encoder-decoder and its parameters.
#[derive(Clone, Debug)]
pub struct EncoderDecoder<T: Real> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub enc: EncoderIds,
    pub dec: DecoderIds,
}

impl<T: Real> EncoderDecoder<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut src = InitSource {
            store: &mut params,
            rng: &mut rng,
        };
        let enc = EncoderIds::build(&mut src, &cfg)?;
        let dec = DecoderIds::build(&mut src, &cfg)?;
        Ok(Self {
            cfg,
            params,
            enc,
            dec,
        })
    }

    /// Rebinds an existing parameter set, checking every name and shape.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut src = LoadSource::new(&params);
        let enc = EncoderIds::build(&mut src, &cfg)?;
        let dec = DecoderIds::build(&mut src, &cfg)?;
        src.expect_all_used()?;
        Ok(Self {
            cfg,
            params,
            enc,
            dec,
        })
    }

    pub fn cast<U: Real>(&self) -> EncoderDecoder<U> {
        EncoderDecoder {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            enc: self.enc.clone(),
            dec: self.dec.clone(),
        }
    }

    pub fn encode(&self, g: &mut Graph<'_, T>, features: &Tensor<T>) -> Result<EncoderState> {
        encode(g, &self.enc, &self.cfg, features)
    }

    /// Logits `[len(prefix), vocab]`; row `i` depends on `prefix[..=i]` and all of X.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        features: &Tensor<T>,
        prefix: &[TokenId],
    ) -> Result<Var> {
        let enc = self.encode(g, features)?;
        decode(g, &self.dec, &self.cfg, prefix, &enc)
    }

    /// Teacher-forced sequence cross-entropy for target tokens `y` (no BOS/EOS):
    /// the decoder reads `[BOS] + y` and is scored against `y + [EOS]`.
    pub fn loss(
        &self,
        g: &mut Graph<'_, T>,
        features: &Tensor<T>,
        tokens: &[TokenId],
    ) -> Result<Var> {
        let (input, target) = teacher_forcing(tokens);
        let logits = self.forward(g, features, &input)?;
        seq_cross_entropy(g, logits, &target, crate::PAD)
    }
}

/// Decoder input and target for teacher forcing.
pub fn teacher_forcing(tokens: &[TokenId]) -> (Vec<TokenId>, Vec<TokenId>) {
    let mut input = Vec::with_capacity(tokens.len() + 1);
    input.push(BOS);
    input.extend_from_slice(tokens);
    let mut target = tokens.to_vec();
    target.push(EOS);
    (input, target)
}

/// Mean over non-pad positions of `−log softmax(logits)[target]`.
pub fn seq_cross_entropy<T: Real>(
    g: &mut Graph<'_, T>,
    logits: Var,
    targets: &[TokenId],
    pad_id: TokenId,
) -> Result<Var> {
    let vocab = g.value(logits).cols();
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Input(format!("target id {bad} >= vocab {vocab}")));
    }
    let lp = g.log_softmax_rows(logits)?;
    let t: Vec<Option<usize>> = targets
        .iter()
        .map(|&t| (t != pad_id).then_some(t as usize))
        .collect();
    Ok(g.nll(lp, &t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use weaksup_autograd::Mode;

    #[test]
    fn cross_entropy_examples() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        // Near-one-hot logits: loss ~ 0.
        let l = g
            .constant(Tensor::from_rows(&[vec![0.0, 800.0, 0.0]]).unwrap())
            .unwrap();
        let loss = seq_cross_entropy(&mut g, l, &[1], crate::PAD).unwrap();
        assert!(g.value(loss).item().abs() < 1e-12);

        let l = g.constant(Tensor::zeros(&[3, 7])).unwrap();
        let loss = seq_cross_entropy(&mut g, l, &[1, 2, 6], crate::PAD).unwrap();
        assert!((g.value(loss).item() - 7f64.ln()).abs() < 1e-12);

        // Logits equal to log-probabilities: p = 0.5 and p = 0.25 on the targets.
        let rows = [vec![0.25f64, 0.5, 0.125, 0.125], vec![0.25; 4]];
        let rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|p| p.ln()).collect())
            .collect();
        let l = g.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
        let loss = seq_cross_entropy(&mut g, l, &[1, 3], crate::PAD).unwrap();
        let expect = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((g.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn pad_targets_are_excluded_and_range_checked() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let l = g
            .constant(Tensor::from_rows(&[vec![0.0, 5.0], vec![9.0, 0.0]]).unwrap())
            .unwrap();
        let with_pad = seq_cross_entropy(&mut g, l, &[1, crate::PAD], crate::PAD).unwrap();
        let lp1 = 5.0f64 - (1.0f64 + 5f64.exp()).ln();
        assert!((g.value(with_pad).item() + lp1).abs() < 1e-12);
        assert!(seq_cross_entropy(&mut g, l, &[1, 2], crate::PAD).is_err());
    }
}
