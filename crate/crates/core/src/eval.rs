//! Word error rate scoring and test-set evaluation.

use serde::{Deserialize, Serialize};
use weaksup_autograd::{Graph, Mode, Tensor};

use crate::ctc::{ctc_beam_lm_decode, token_of, CtcModel, FusionWeights, PrefixScorer};
use crate::data::{Corpus, NGramLm, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{beam_search, encoded_len, EncoderDecoder};
use crate::train::{config_hash, Arch};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_words: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn rate(&self) -> f64 {
        if self.ref_words == 0 {
            return 0.0;
        }
        self.errors() as f64 / self.ref_words as f64
    }

    pub fn add(&mut self, other: &ErrorCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_words += other.ref_words;
    }
}

/// Levenshtein alignment of two word sequences. Among minimum-cost
/// alignments the backtrace prefers substitution, then deletion, then insertion.
pub fn align<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> ErrorCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![0usize; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        d[at(i, 0)] = i;
    }
    for j in 0..=m {
        d[at(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let diag = d[at(i - 1, j - 1)] + usize::from(!same);
            d[at(i, j)] = diag.min(d[at(i - 1, j)] + 1).min(d[at(i, j - 1)] + 1);
        }
    }
    let mut c = ErrorCounts {
        ref_words: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if d[at(i, j)] == d[at(i - 1, j - 1)] + usize::from(!same) {
                if !same {
                    c.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[at(i, j)] == d[at(i - 1, j)] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

/// Word error rate on whitespace-separated words; errors on an empty reference.
pub fn wer(reference: &str, hypothesis: &str) -> Result<(f64, ErrorCounts)> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::Empty("reference"));
    }
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    let c = align(&r, &h);
    Ok((c.rate(), c))
}

/// Turns features into a word string.
pub trait Recognizer {
    fn transcribe(&self, features: &Tensor<f32>) -> Result<String>;
    /// `enc-dec` or `ctc`, with the decoding settings.
    fn describe(&self) -> String;
    fn config_hash(&self) -> String;
}

/// Encoder-decoder beam search, no external LM.
pub struct EncDecRecognizer<'a> {
    pub model: &'a EncoderDecoder<f32>,
    pub tokenizer: &'a Tokenizer,
    pub beam: usize,
    /// Hypotheses stop after `ceil(max_len_ratio · τ) + 2` tokens.
    pub max_len_ratio: f64,
}

impl Recognizer for EncDecRecognizer<'_> {
    fn transcribe(&self, features: &Tensor<f32>) -> Result<String> {
        let max_len =
            (self.max_len_ratio * encoded_len(features.rows()) as f64).ceil() as usize + 2;
        let hyps = beam_search(self.model, features, self.beam, max_len)?;
        let best = hyps
            .first()
            .map(|h| h.tokens.as_slice())
            .unwrap_or_default();
        Ok(self.tokenizer.decode(best))
    }

    fn describe(&self) -> String {
        format!("enc-dec beam={}", self.beam)
    }

    fn config_hash(&self) -> String {
        config_hash(&self.model.cfg, Arch::EncDec)
    }
}

/// CTC prefix beam search with optional n-gram shallow fusion.
pub struct CtcRecognizer<'a> {
    pub model: &'a CtcModel<f32>,
    pub tokenizer: &'a Tokenizer,
    pub lm: Option<&'a NGramLm>,
    pub beam: usize,
    pub weights: FusionWeights,
}

impl Recognizer for CtcRecognizer<'_> {
    fn transcribe(&self, features: &Tensor<f32>) -> Result<String> {
        let mut g = Graph::new(&self.model.params, Mode::Eval);
        let lp = self.model.log_probs(&mut g, features)?;
        let lm = self.lm.map(|m| m as &dyn PrefixScorer);
        let labels = ctc_beam_lm_decode(g.value(lp), lm, self.beam, self.weights)?;
        let tokens: Vec<_> = labels.into_iter().map(token_of).collect();
        Ok(self.tokenizer.decode(&tokens))
    }

    fn describe(&self) -> String {
        match self.lm {
            Some(_) => format!(
                "ctc beam={} lm_weight={} word_bonus={}",
                self.beam, self.weights.lm_weight, self.weights.word_bonus
            ),
            None => format!("ctc beam={} lm=off", self.beam),
        }
    }

    fn config_hash(&self) -> String {
        config_hash(
            &self.model.cfg,
            Arch::Ctc {
                adapter: self.model.adapter.is_some(),
            },
        )
    }
}

/// Scores of one test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub name: String,
    pub wer: f64,
    pub counts: ErrorCounts,
    pub utterances: usize,
    /// Utterances whose decoding failed; scored as empty hypotheses.
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub decode_mode: String,
    pub config_hash: String,
    pub sets: Vec<SetReport>,
}

impl EvalReport {
    /// Unweighted mean of the per-set WERs.
    pub fn mean_wer(&self) -> f64 {
        if self.sets.is_empty() {
            return 0.0;
        }
        self.sets.iter().map(|s| s.wer).sum::<f64>() / self.sets.len() as f64
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{}\n{:<12} {:>8} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
            self.decode_mode, "set", "WER%", "sub", "ins", "del", "words", "utts"
        );
        for s in &self.sets {
            out.push_str(&format!(
                "{:<12} {:>8.2} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
                s.name,
                100.0 * s.wer,
                s.counts.substitutions,
                s.counts.insertions,
                s.counts.deletions,
                s.counts.ref_words,
                s.utterances
            ));
        }
        out
    }
}

/// Transcribes every utterance; decode errors become empty hypotheses.
pub fn transcribe_all(rec: &dyn Recognizer, corpus: &Corpus) -> (Vec<String>, Vec<String>) {
    let mut failures = Vec::new();
    let hyps = corpus
        .utterances
        .iter()
        .map(|u| match rec.transcribe(&u.features) {
            Ok(h) => h,
            Err(e) => {
                failures.push(format!("{}: {e}", u.id));
                String::new()
            }
        })
        .collect();
    (hyps, failures)
}

/// Decodes and scores a transcribed corpus.
pub fn evaluate(rec: &dyn Recognizer, name: &str, corpus: &Corpus) -> Result<SetReport> {
    let (hyps, failures) = transcribe_all(rec, corpus);
    let mut counts = ErrorCounts::default();
    for (u, h) in corpus.utterances.iter().zip(&hyps) {
        let reference = u
            .text
            .as_deref()
            .ok_or_else(|| Error::Input(format!("utterance {} has no transcript", u.id)))?;
        counts.add(&wer(reference, h)?.1);
    }
    if counts.ref_words == 0 {
        return Err(Error::Empty("test set"));
    }
    Ok(SetReport {
        name: name.to_string(),
        wer: counts.rate(),
        counts,
        utterances: corpus.len(),
        failures,
    })
}

/// Evaluates several named test sets.
pub fn evaluate_sets(rec: &dyn Recognizer, sets: &[(&str, &Corpus)]) -> Result<EvalReport> {
    let sets = sets
        .iter()
        .map(|(n, c)| evaluate(rec, n, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        decode_mode: rec.describe(),
        config_hash: rec.config_hash(),
        sets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(wer("a b c", "a b c").unwrap().0, 0.0);
        let (r, c) = wer("a b c", "a x c").unwrap();
        assert!((r - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.substitutions, 1);
        let (r, c) = wer("a b", "a b c").unwrap();
        assert_eq!(r, 0.5);
        assert_eq!(c.insertions, 1);
        let (r, c) = wer("a b", "").unwrap();
        assert_eq!(r, 1.0);
        assert_eq!(c.deletions, 2);
        assert!(wer("", "a").is_err());
        assert!(wer("a", "b c d e").unwrap().0 > 1.0);
    }
}
