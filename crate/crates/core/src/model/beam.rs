use std::cmp::Ordering;

use weaksup_autograd::{Graph, Mode, Real, Tensor};

use super::encoder::EncoderState;
use super::{decode, EncoderDecoder};
use crate::error::{Error, Result};
use crate::{TokenId, BOS, EOS, PAD};

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens without BOS or EOS.
    pub tokens: Vec<TokenId>,
    /// Sum of token log-probabilities, EOS included when present.
    pub log_prob: f64,
    /// `log_prob` divided by the number of scored tokens.
    pub score: f64,
    /// False when `max_len` was reached before EOS.
    pub finished: bool,
}

struct Live {
    tokens: Vec<TokenId>,
    log_prob: f64,
}

fn finalize(tokens: Vec<TokenId>, log_prob: f64, finished: bool) -> Hypothesis {
    let scored = tokens.len() + usize::from(finished);
    Hypothesis {
        score: log_prob / scored.max(1) as f64,
        tokens,
        log_prob,
        finished,
    }
}

fn by_score(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.finished
        .cmp(&a.finished)
        .then(b.score.total_cmp(&a.score))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-expanding beam search over any next-token distribution.
///
/// `step` receives `[BOS] + tokens` and returns log-probabilities over the
/// vocabulary. PAD and BOS are never emitted. At every step the `beam` best
/// extensions by cumulative log-probability survive (ties go to the smaller
/// token sequence); extensions ending in EOS are set aside as finished. The
/// search stops once nothing is live or `beam` hypotheses have finished.
/// `max_len` bounds the number of emitted tokens including EOS.
///
/// Returns hypotheses ranked by length-normalized score, finished first.
pub fn beam_search_with<F>(mut step: F, beam: usize, max_len: usize) -> Result<Vec<Hypothesis>>
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>>,
{
    if beam == 0 {
        return Err(Error::Input("beam must be >= 1".into()));
    }
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    let mut prefix = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<(f64, Vec<TokenId>)> = Vec::new();
        for h in &live {
            prefix.clear();
            prefix.push(BOS);
            prefix.extend_from_slice(&h.tokens);
            let lp = step(&prefix)?;
            for (tok, &l) in lp.iter().enumerate() {
                let tok = tok as TokenId;
                if tok == PAD || tok == BOS || !l.is_finite() {
                    continue;
                }
                let mut seq = h.tokens.clone();
                seq.push(tok);
                cands.push((h.log_prob + l, seq));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        cands.truncate(beam);
        live.clear();
        for (log_prob, mut seq) in cands {
            if seq.last() == Some(&EOS) {
                seq.pop();
                done.push(finalize(seq, log_prob, true));
            } else {
                live.push(Live {
                    tokens: seq,
                    log_prob,
                });
            }
        }
        if live.is_empty() || done.len() >= beam {
            break;
        }
    }
    if done.is_empty() {
        done.extend(
            live.into_iter()
                .map(|h| finalize(h.tokens, h.log_prob, false)),
        );
    }
    done.sort_by(by_score);
    Ok(done)
}

/// Encoder-decoder beam search without any external language model.
pub fn beam_search<T: Real>(
    model: &EncoderDecoder<T>,
    features: &Tensor<T>,
    beam: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    let enc = {
        let mut g = Graph::new(&model.params, Mode::Eval);
        let state = model.encode(&mut g, features)?;
        g.value(state.activations).clone()
    };
    beam_search_with(
        |prefix| {
            let mut g = Graph::new(&model.params, Mode::Eval);
            let frames = enc.rows();
            let activations = g.constant(enc.clone())?;
            let state = EncoderState {
                activations,
                frames,
            };
            let logits = decode(&mut g, &model.dec, &model.cfg, prefix, &state)?;
            let lp = g.log_softmax_rows(logits)?;
            Ok(g.value(lp)
                .row(prefix.len() - 1)
                .iter()
                .map(|v| v.as_f64())
                .collect())
        },
        beam,
        max_len,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Vocab {PAD, BOS, EOS, a=3, b=4}; distributions depend on the prefix.
    fn toy(prefix: &[TokenId]) -> Vec<f64> {
        let p: [f64; 5] = match &prefix[1..] {
            [] => [0.0, 0.0, 0.0, 0.6, 0.4],
            [3] => [0.0, 0.0, 0.34, 0.33, 0.33],
            [4] => [0.0, 0.0, 0.9, 0.05, 0.05],
            _ => [0.0, 0.0, 1.0, 0.0, 0.0],
        };
        p.iter().map(|v| v.ln()).collect()
    }

    #[test]
    fn beam_two_beats_greedy_on_toy() {
        let greedy = beam_search_with(|p| Ok(toy(p)), 1, 4).unwrap();
        assert_eq!(greedy[0].tokens, vec![3]);
        let wide = beam_search_with(|p| Ok(toy(p)), 2, 4).unwrap();
        // 0.4*0.9 = 0.36 beats 0.6*0.34 = 0.204.
        assert_eq!(wide[0].tokens, vec![4]);
        assert!(wide[0].finished);
        assert!((wide[0].log_prob - 0.36f64.ln()).abs() < 1e-12);
        assert!((wide[0].score - 0.36f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn max_len_without_eos_is_flagged() {
        let never_ends =
            |_: &[TokenId]| Ok(vec![f64::NEG_INFINITY, f64::NEG_INFINITY, -9.0, -0.1, -3.0]);
        let out = beam_search_with(never_ends, 1, 3).unwrap();
        assert_eq!(out.len(), 1);
        assert!(!out[0].finished);
        assert_eq!(out[0].tokens, vec![3, 3, 3]);
        assert!(beam_search_with(never_ends, 0, 3).is_err());
    }

    #[test]
    fn ties_go_to_smaller_token() {
        let flat = |p: &[TokenId]| {
            Ok(if p.len() == 1 {
                vec![0.0, 0.0, f64::NEG_INFINITY, 0.5f64.ln(), 0.5f64.ln()]
            } else {
                vec![0.0, 0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]
            })
        };
        let out = beam_search_with(flat, 1, 3).unwrap();
        assert_eq!(out[0].tokens, vec![3]);
        let out = beam_search_with(flat, 2, 3).unwrap();
        assert_eq!(out[0].tokens, vec![3]);
        assert_eq!(out[1].tokens, vec![4]);
    }
}
