//! Numeric self-checks of the model, shared by the test suites and the
//! `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weaksup_autograd::{
    finite_diff_check, CheckConfig, CheckReport, Graph, Mode, ParamStore, Tensor,
};

use crate::ctc::{ctc_brute_force, ctc_loss};
use crate::error::{Error, Result};
use crate::model::{
    decoder_frontend, encoded_len, multi_head_attention, self_attention, transformer_block,
    AttentionIds, AttnMask, BlockIds, EncoderDecoder, InitSource, ModelConfig,
};
use crate::TokenId;

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest deviation between single-head attention with identity projections
/// and plain scaled dot-product attention.
pub fn mha_identity_vs_sa(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 6;
    let mut store = ParamStore::<f64>::new();
    let ids = AttentionIds {
        wq: store.insert("wq", Tensor::eye(d))?,
        wk: store.insert("wk", Tensor::eye(d))?,
        wv: store.insert("wv", Tensor::eye(d))?,
        wo: store.insert("wo", Tensor::eye(d))?,
    };
    let mut g = Graph::new(&store, Mode::Eval);
    let q = g.constant(rand_tensor(&mut rng, &[4, d]))?;
    let kv = g.constant(rand_tensor(&mut rng, &[5, d]))?;
    let mha = multi_head_attention(&mut g, q, kv, &ids, 1, AttnMask::None, 0.0)?;
    let sa = self_attention(&mut g, q, kv, kv, AttnMask::None, 0.0)?;
    Ok(max_abs_diff(g.value(mha), g.value(sa)))
}

/// Largest deviation from the identity map of encoder and decoder blocks
/// whose sublayer output projections are all zero.
pub fn zeroed_block_identity(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, ffn) = (8, 12);
    let mut store = ParamStore::<f64>::new();
    let (enc, dec) = {
        let mut src = InitSource {
            store: &mut store,
            rng: &mut rng,
        };
        (
            BlockIds::build(&mut src, "enc", d, ffn, false)?,
            BlockIds::build(&mut src, "dec", d, ffn, true)?,
        )
    };
    for b in [&enc, &dec] {
        let mut zero = vec![b.self_attn.wo, b.ffn.outer.weight, b.ffn.outer.bias];
        if let Some((_, cross)) = &b.cross {
            zero.push(cross.wo);
        }
        for id in zero {
            store.get_mut(id).scale_in_place(0.0);
        }
    }
    let x = rand_tensor(&mut rng, &[5, d]);
    let memory = rand_tensor(&mut rng, &[3, d]);
    let mut g = Graph::new(&store, Mode::Eval);
    let xv = g.constant(x.clone())?;
    let mv = g.constant(memory)?;
    let ye = transformer_block(&mut g, xv, &enc, 2, 0.0, AttnMask::None, None)?;
    let yd = transformer_block(
        &mut g,
        xv,
        &dec,
        2,
        0.0,
        AttnMask::Causal,
        Some((mv, AttnMask::KeyLength(3))),
    )?;
    Ok(max_abs_diff(g.value(ye), &x).max(max_abs_diff(g.value(yd), &x)))
}

/// Largest change in decoder outputs at positions `< j` when tokens at
/// positions `>= j` are replaced, over every `j`, for both the token
/// frontend and the full model logits.
pub fn decoder_causality(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = 9;
    let model = EncoderDecoder::<f64>::new(ModelConfig::tiny(vocab), seed)?;
    let feats = rand_tensor(&mut rng, &[12, model.cfg.feat_dim]);
    let m = 6;
    let base: Vec<TokenId> = (0..m)
        .map(|_| rng.random_range(1..vocab as TokenId))
        .collect();
    let run = |prefix: &[TokenId]| -> Result<(Tensor<f64>, Tensor<f64>)> {
        let mut g = Graph::new(&model.params, Mode::Eval);
        let front = decoder_frontend(&mut g, &model.dec, prefix)?;
        let logits = model.forward(&mut g, &feats, prefix)?;
        Ok((g.value(front).clone(), g.value(logits).clone()))
    };
    let (f0, l0) = run(&base)?;
    let mut worst = 0.0f64;
    for j in 1..m {
        let mut other = base.clone();
        for t in &mut other[j..] {
            *t = (*t % (vocab as TokenId - 1)) + 1;
        }
        let (f1, l1) = run(&other)?;
        for (a, b) in [(&f0, &f1), (&l0, &l1)] {
            for r in 0..j {
                for (x, y) in a.row(r).iter().zip(b.row(r)) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        // Shorter prefixes give the same leading rows.
        let (fs, ls) = run(&base[..j])?;
        for (a, b) in [(&f0, &fs), (&l0, &ls)] {
            for r in 0..j {
                for (x, y) in a.row(r).iter().zip(b.row(r)) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// `(T, τ)` pairs as produced by a real forward pass of the tiny model.
pub fn encoder_lengths(lengths: &[usize]) -> Result<Vec<(usize, usize)>> {
    let model = EncoderDecoder::<f32>::new(ModelConfig::tiny(6), 0)?;
    lengths
        .iter()
        .map(|&t| {
            let mut g = Graph::new(&model.params, Mode::Eval);
            let x = Tensor::zeros(&[t, model.cfg.feat_dim]);
            let state = model.encode(&mut g, &x)?;
            debug_assert_eq!(state.frames, encoded_len(t));
            Ok((t, state.frames))
        })
        .collect()
}

/// Finite-difference check of the full tiny encoder-decoder loss
/// (d=8, H=2, one encoder and one decoder block, T=12, M=4).
pub fn tiny_model_gradcheck(seed: u64, coords_per_param: usize) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = 7;
    let model = EncoderDecoder::<f64>::new(ModelConfig::tiny(vocab), seed)?;
    // Non-trivial layer norm affine parameters so their gradients are exercised.
    let mut params = model.params.clone();
    for id in params.ids().collect::<Vec<_>>() {
        let name = params.name(id).to_string();
        if name.ends_with(".gain") || name.ends_with(".bias") {
            for v in params.get_mut(id).data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }
    let feats = rand_tensor(&mut rng, &[12, model.cfg.feat_dim]);
    let tokens: Vec<TokenId> = (0..3)
        .map(|_| rng.random_range(3..vocab as TokenId))
        .collect();
    let model = EncoderDecoder::from_params(model.cfg.clone(), params)?;
    let report = finite_diff_check(
        |g| {
            model.loss(g, &feats, &tokens).map_err(|e| match e {
                crate::Error::Autograd(a) => a,
                other => weaksup_autograd::AutogradError::Invalid {
                    op: "model",
                    msg: other.to_string(),
                },
            })
        },
        &model.params,
        CheckConfig {
            coords_per_param,
            seed,
            ..CheckConfig::default()
        },
    )?;
    Ok(report)
}

/// Outcome of comparing the CTC forward algorithm against path enumeration.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcOracleReport {
    pub instances: usize,
    /// Instances without any valid alignment (both sides must agree).
    pub infeasible: usize,
    /// Largest `|loss + log p_oracle|` over feasible instances; infinite on
    /// any disagreement about feasibility.
    pub max_abs_diff: f64,
}

/// Random instances with τ ≤ 8, at most 4 labels and targets of length ≤ 4.
pub fn ctc_oracle_equivalence(instances: usize, seed: u64) -> Result<CtcOracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CtcOracleReport {
        instances,
        infeasible: 0,
        max_abs_diff: 0.0,
    };
    for _ in 0..instances {
        let tau = rng.random_range(1..=8usize);
        let labels = rng.random_range(1..=4usize);
        let len = rng.random_range(0..=4usize);
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..=labels)).collect();
        let logits = rand_tensor(&mut rng, &[tau, labels + 1]).map(|v| 3.0 * v);
        let lp = Tensor::from_fn(&[tau, labels + 1], |i| {
            let r = i / (labels + 1);
            let row = logits.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            logits.data()[i] - z
        });
        let oracle = ctc_brute_force(&lp, &target)?;
        match ctc_loss(&lp, &target) {
            Ok(loss) => {
                report.max_abs_diff = report.max_abs_diff.max((loss + oracle).abs());
            }
            Err(Error::NoAlignment { .. }) => {
                report.infeasible += 1;
                if oracle != f64::NEG_INFINITY {
                    report.max_abs_diff = f64::INFINITY;
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}
