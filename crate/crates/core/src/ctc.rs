//! Connectionist temporal classification: loss, oracle, decoders and the
//! encoder-only model used for CTC fine-tuning.
//!
//! Head outputs have `V + 1` columns. Column 0 is the blank and subword id
//! `k` lives in column `k + 1`.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weaksup_autograd::{log_sum_exp, Graph, ParamStore, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::layers::{
    transformer_block, AttnMask, BlockIds, InitSource, LinearIds, LoadSource, ParamSource,
};
use crate::model::{encode, EncoderDecoder, EncoderIds, ModelConfig};
use crate::TokenId;

pub const BLANK: usize = 0;

/// Head column of a subword id.
pub fn label_of(token: TokenId) -> usize {
    token as usize + 1
}

/// Subword id of a non-blank head column.
pub fn token_of(label: usize) -> TokenId {
    debug_assert!(label != BLANK);
    (label - 1) as TokenId
}

/// Frames needed for any alignment: one per label plus a blank between repeats.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Removes repeated labels, then blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Rows of a `[τ, C]` tensor as f64.
fn rows_f64<T: Real>(log_probs: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    match log_probs.shape() {
        [t, c] if *t > 0 && *c > 1 => Ok((
            *t,
            *c,
            log_probs.data().iter().map(|v| v.as_f64()).collect(),
        )),
        other => Err(Error::Input(format!(
            "ctc log-probs must be τ×C with τ≥1, C≥2, got {other:?}"
        ))),
    }
}

/// Negative log-likelihood `−log p(labels | X)` and its gradient with
/// respect to every log-probability entry (`−` the label posterior).
pub fn ctc_forward_backward<T: Real>(
    log_probs: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<f64>)> {
    let (tau, classes, lp) = rows_f64(log_probs)?;
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= classes) {
        return Err(Error::Input(format!(
            "ctc label {bad} outside 1..{classes}"
        )));
    }
    let required = min_frames(labels);
    if tau < required {
        return Err(Error::NoAlignment {
            frames: tau,
            required,
        });
    }
    let at = |t: usize, c: usize| lp[t * classes + c];
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; tau * s_len];
    alpha[0] = at(0, ext[0]);
    if s_len > 1 {
        alpha[1] = at(0, ext[1]);
    }
    for t in 1..tau {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let a = prev[s];
            let b = if s >= 1 { prev[s - 1] } else { ninf };
            let c = if skip(s) { prev[s - 2] } else { ninf };
            let sum = lse3(a, b, c);
            alpha[t * s_len + s] = if sum == ninf {
                ninf
            } else {
                sum + at(t, ext[s])
            };
        }
    }
    let last = (tau - 1) * s_len;
    let log_p = if s_len > 1 {
        lse2(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if !log_p.is_finite() {
        return Err(Error::NoAlignment {
            frames: tau,
            required,
        });
    }

    // beta(t, s): log-probability of the remaining frames t+1.. given state s at t.
    let mut beta = vec![ninf; tau * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..tau - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + at(t + 1, ext[s2]);
            let a = next(s);
            let b = if s + 1 < s_len { next(s + 1) } else { ninf };
            let c = if s + 2 < s_len && skip(s + 2) {
                next(s + 2)
            } else {
                ninf
            };
            beta[t * s_len + s] = lse3(a, b, c);
        }
    }

    let mut grad = vec![0.0f64; tau * classes];
    let mut occ = vec![ninf; classes];
    for t in 0..tau {
        occ.iter_mut().for_each(|o| *o = ninf);
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            occ[ext[s]] = lse2(occ[ext[s]], v);
        }
        for c in 0..classes {
            if occ[c] != ninf {
                grad[t * classes + c] = -(occ[c] - log_p).exp();
            }
        }
    }
    Ok((-log_p, Tensor::new(vec![tau, classes], grad)?))
}

/// `−log p(labels | X)`; errors with [`Error::NoAlignment`] when no path exists.
pub fn ctc_loss<T: Real>(log_probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    Ok(ctc_forward_backward(log_probs, labels)?.0)
}

/// CTC loss as a graph node whose gradient flows into `log_probs`.
pub fn ctc_loss_node<T: Real>(
    g: &mut Graph<'_, T>,
    log_probs: Var,
    labels: &[usize],
) -> Result<Var> {
    let (nll, grad) = ctc_forward_backward(g.value(log_probs), labels)?;
    Ok(g.custom_scalar(log_probs, T::from_f64_lossy(nll), grad.cast())?)
}

/// `log p(labels | X)` by enumerating all `C^τ` frame labelings.
/// Returns `−∞` when no labeling collapses to `labels`.
pub fn ctc_brute_force<T: Real>(log_probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (tau, classes, lp) = rows_f64(log_probs)?;
    if tau > 8 || classes > 5 {
        return Err(Error::TooLarge(format!(
            "brute force needs τ ≤ 8 and at most 4 labels plus blank, got τ={tau}, C={classes}"
        )));
    }
    let mut terms = Vec::new();
    let mut path = vec![0usize; tau];
    loop {
        if collapse(&path) == labels {
            terms.push(
                path.iter()
                    .enumerate()
                    .map(|(t, &c)| lp[t * classes + c])
                    .sum::<f64>(),
            );
        }
        // Odometer increment.
        let mut i = 0;
        while i < tau {
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == tau {
            break;
        }
    }
    Ok(if terms.is_empty() {
        f64::NEG_INFINITY
    } else {
        log_sum_exp(&terms)
    })
}

/// Per-frame argmax, collapsed. Ties go to the lower column.
pub fn ctc_greedy_decode<T: Real>(log_probs: &Tensor<T>) -> Vec<usize> {
    let c = log_probs.cols();
    let path: Vec<usize> = log_probs
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    collapse(&path)
}

/// Scores subword continuations for shallow fusion.
pub trait PrefixScorer {
    /// `log P(next | history)` over subword ids.
    fn log_prob(&self, history: &[TokenId], next: TokenId) -> f64;
    /// `log P(end of sentence | history)`.
    fn log_prob_end(&self, history: &[TokenId]) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionWeights {
    pub lm_weight: f64,
    pub word_bonus: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            lm_weight: 0.0,
            word_bonus: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Beam {
    blank: f64,
    non_blank: f64,
    lm: f64,
}

impl Beam {
    fn acoustic(&self) -> f64 {
        lse2(self.blank, self.non_blank)
    }
}

fn rank(a: &(f64, &Vec<usize>), b: &(f64, &Vec<usize>)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Prefix beam search with optional subword LM shallow fusion.
///
/// Hypotheses are ranked by `acoustic + lm_weight·LM + word_bonus·|prefix|`
/// (ties by lexicographic prefix); the final ranking adds the LM end-of-
/// sentence term. Returns head labels (no blanks).
pub fn ctc_beam_lm_decode<T: Real>(
    log_probs: &Tensor<T>,
    lm: Option<&dyn PrefixScorer>,
    beam: usize,
    weights: FusionWeights,
) -> Result<Vec<usize>> {
    if beam == 0 {
        return Err(Error::Input("beam must be >= 1".into()));
    }
    let (tau, classes, lp) = rows_f64(log_probs)?;
    let ninf = f64::NEG_INFINITY;
    let lm_ext = |prefix: &[usize], next: usize| -> f64 {
        match lm {
            Some(m) if weights.lm_weight != 0.0 => {
                let hist: Vec<TokenId> = prefix.iter().map(|&l| token_of(l)).collect();
                m.log_prob(&hist, token_of(next))
            }
            _ => 0.0,
        }
    };
    let total = |prefix: &[usize], b: &Beam| {
        b.acoustic() + weights.lm_weight * b.lm + weights.word_bonus * prefix.len() as f64
    };

    let mut beams: HashMap<Vec<usize>, Beam> = HashMap::new();
    beams.insert(
        Vec::new(),
        Beam {
            blank: 0.0,
            non_blank: ninf,
            lm: 0.0,
        },
    );
    for t in 0..tau {
        let row = &lp[t * classes..(t + 1) * classes];
        let mut next: HashMap<Vec<usize>, Beam> = HashMap::new();
        for (prefix, b) in &beams {
            let acoustic = b.acoustic();
            // Blank keeps the prefix.
            let e = next.entry(prefix.clone()).or_insert(Beam {
                blank: ninf,
                non_blank: ninf,
                lm: b.lm,
            });
            e.blank = lse2(e.blank, acoustic + row[BLANK]);
            let last = prefix.last().copied();
            for (c, &lpc) in row.iter().enumerate().skip(1) {
                if lpc == ninf {
                    continue;
                }
                if Some(c) == last {
                    // Repeat without a blank collapses into the same prefix.
                    let e = next.get_mut(prefix).expect("inserted above");
                    e.non_blank = lse2(e.non_blank, b.non_blank + lpc);
                }
                let mut ext = prefix.clone();
                ext.push(c);
                let from = if Some(c) == last { b.blank } else { acoustic };
                let e = next.entry(ext).or_insert_with(|| Beam {
                    blank: ninf,
                    non_blank: ninf,
                    lm: b.lm + lm_ext(prefix, c),
                });
                e.non_blank = lse2(e.non_blank, from + lpc);
            }
        }
        let mut scored: Vec<(f64, &Vec<usize>)> =
            next.iter().map(|(p, b)| (total(p, b), p)).collect();
        scored.sort_by(rank);
        let keep: Vec<Vec<usize>> = scored
            .into_iter()
            .take(beam)
            .map(|(_, p)| p.clone())
            .collect();
        beams = keep
            .into_iter()
            .map(|p| {
                let b = next.remove(&p).expect("present");
                (p, b)
            })
            .collect();
    }
    let finals: Vec<(f64, &Vec<usize>)> = beams
        .iter()
        .map(|(p, b)| {
            let end = match lm {
                Some(m) if weights.lm_weight != 0.0 => {
                    let hist: Vec<TokenId> = p.iter().map(|&l| token_of(l)).collect();
                    weights.lm_weight * m.log_prob_end(&hist)
                }
                _ => 0.0,
            };
            (total(p, b) + end, p)
        })
        .collect();
    let best = finals
        .into_iter()
        .min_by(rank)
        .map(|(_, p)| p.clone())
        .unwrap_or_default();
    Ok(best)
}

/// Encoder (copied from an encoder-decoder or freshly initialized), an
/// optional extra transformer block and a projection to `V + 1` columns.
#[derive(Clone, Debug)]
pub struct CtcModel<T: Real> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub enc: EncoderIds,
    pub adapter: Option<BlockIds>,
    pub head: LinearIds,
}

fn build_head<T: Real>(
    src: &mut impl ParamSource<T>,
    cfg: &ModelConfig,
    adapter: bool,
) -> Result<(Option<BlockIds>, LinearIds)> {
    let block = if adapter {
        Some(BlockIds::build(
            src,
            "ctc.adapter",
            cfg.model_dim,
            cfg.ffn_dim,
            false,
        )?)
    } else {
        None
    };
    let head = LinearIds::build(src, "ctc.head", cfg.model_dim, cfg.vocab_size + 1)?;
    Ok((block, head))
}

impl<T: Real> CtcModel<T> {
    /// Randomly initialized encoder and head.
    pub fn new(cfg: ModelConfig, adapter: bool, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut src = InitSource {
            store: &mut params,
            rng: &mut rng,
        };
        let enc = EncoderIds::build(&mut src, &cfg)?;
        let (adapter, head) = build_head(&mut src, &cfg, adapter)?;
        Ok(Self {
            cfg,
            params,
            enc,
            adapter,
            head,
        })
    }

    /// Keeps θ_enc of a trained encoder-decoder; θ_dec is dropped.
    pub fn from_encoder(model: &EncoderDecoder<T>, adapter: bool, seed: u64) -> Result<Self> {
        let cfg = model.cfg.clone();
        let mut params = ParamStore::new();
        for (_, name, t) in model.params.iter() {
            if name.starts_with("enc.") {
                params.insert(name, t.clone())?;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderIds::build(&mut LoadSource::new(&params), &cfg)?;
        let mut src = InitSource {
            store: &mut params,
            rng: &mut rng,
        };
        let (adapter, head) = build_head(&mut src, &cfg, adapter)?;
        Ok(Self {
            cfg,
            params,
            enc,
            adapter,
            head,
        })
    }

    pub fn from_params(cfg: ModelConfig, adapter: bool, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut src = LoadSource::new(&params);
        let enc = EncoderIds::build(&mut src, &cfg)?;
        let (adapter, head) = build_head(&mut src, &cfg, adapter)?;
        src.expect_all_used()?;
        Ok(Self {
            cfg,
            params,
            enc,
            adapter,
            head,
        })
    }

    pub fn cast<U: Real>(&self) -> CtcModel<U> {
        CtcModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            enc: self.enc.clone(),
            adapter: self.adapter.clone(),
            head: self.head.clone(),
        }
    }

    /// Log-probabilities `[τ, V + 1]`.
    pub fn log_probs(&self, g: &mut Graph<'_, T>, features: &Tensor<T>) -> Result<Var> {
        let state = encode(g, &self.enc, &self.cfg, features)?;
        let mut x = state.activations;
        if let Some(block) = &self.adapter {
            x = transformer_block(
                g,
                x,
                block,
                self.cfg.heads,
                self.cfg.dropout,
                AttnMask::None,
                None,
            )?;
        }
        let logits = self.head.apply(g, x)?;
        Ok(g.log_softmax_rows(logits)?)
    }

    pub fn loss(
        &self,
        g: &mut Graph<'_, T>,
        features: &Tensor<T>,
        tokens: &[TokenId],
    ) -> Result<Var> {
        let lp = self.log_probs(g, features)?;
        let labels: Vec<usize> = tokens.iter().map(|&t| label_of(t)).collect();
        ctc_loss_node(g, lp, &labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(
            &rows
                .iter()
                .map(|r| r.iter().map(|p| p.ln()).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn single_frame_single_path() {
        let x = lp(&[vec![0.3, 0.7]]);
        assert!((ctc_loss(&x, &[1]).unwrap() + 0.7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_by_enumeration() {
        let (a1, b1, a2, b2) = (0.6, 0.4, 0.3, 0.7);
        let x = lp(&[vec![b1, a1], vec![b2, a2]]);
        let expect = -(a1 * a2 + a1 * b2 + b1 * a2).ln();
        assert!((ctc_loss(&x, &[1]).unwrap() - expect).abs() < 1e-12);
        let x = lp(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!((ctc_loss(&x, &[1]).unwrap() + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn no_alignment_is_distinct_error() {
        let x = lp(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(matches!(
            ctc_loss(&x, &[1, 1]),
            Err(Error::NoAlignment {
                frames: 2,
                required: 3
            })
        ));
        assert_eq!(ctc_brute_force(&x, &[1, 1]).unwrap(), f64::NEG_INFINITY);
        assert_eq!(ctc_brute_force(&x, &[1, 1, 1]).unwrap(), f64::NEG_INFINITY);
        assert!(ctc_loss(&x, &[0]).is_err());
    }

    #[test]
    fn greedy_examples() {
        let onehot = |labels: &[usize]| {
            Tensor::from_rows(
                &labels
                    .iter()
                    .map(|&l| (0..3).map(|c| if c == l { 0.0 } else { -5.0 }).collect())
                    .collect::<Vec<Vec<f64>>>(),
            )
            .unwrap()
        };
        assert_eq!(ctc_greedy_decode(&onehot(&[1, 1, 0, 1])), vec![1, 1]);
        assert_eq!(ctc_greedy_decode(&onehot(&[0, 0, 0])), Vec::<usize>::new());
        assert_eq!(ctc_greedy_decode(&onehot(&[0, 1, 1, 2])), vec![1, 2]);
    }

    #[test]
    fn label_mapping() {
        assert_eq!(label_of(0), 1);
        assert_eq!(token_of(label_of(7)), 7);
        assert_eq!(min_frames(&[1, 1, 2, 2, 2]), 8);
    }
}
