//! Interpolated n-gram language model over subword ids.
//!
//! `P(w | h) = λ₀/V + Σ_{k=1..n} λ_k q_k(w | h)`, where `q_k` is the maximum
//! likelihood estimate from k-gram counts when the (k−1)-token context was
//! seen and falls back to `q_{k−1}` otherwise, and `q_0` is uniform. Every
//! `q_k` is a distribution, so `P(· | h)` sums to one for any history.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::ctc::PrefixScorer;
use crate::error::{Error, Result};
use crate::{TokenId, BOS, EOS};

const HEADER: &str = "#ngram v1";

#[derive(Clone, Debug, PartialEq)]
pub struct NGramLm {
    order: usize,
    vocab: usize,
    /// `λ₀..λ_n`; λ₀ weights the uniform floor.
    lambdas: Vec<f64>,
    /// `counts[k-1]`: k-gram → count.
    counts: Vec<HashMap<Vec<TokenId>, u64>>,
    /// `context[k-1]`: (k−1)-token context → Σ_w count(context, w).
    context: Vec<HashMap<Vec<TokenId>, u64>>,
}

/// λ₀ = 0.01, the rest split in proportion to the order.
pub fn default_lambdas(order: usize) -> Vec<f64> {
    let floor = 0.01;
    let total: f64 = (1..=order).map(|k| k as f64).sum();
    std::iter::once(floor)
        .chain((1..=order).map(|k| (1.0 - floor) * k as f64 / total))
        .collect()
}

impl NGramLm {
    fn empty(order: usize, vocab: usize, lambdas: Vec<f64>) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("n-gram order must be >= 1".into()));
        }
        if vocab == 0 {
            return Err(Error::Config("n-gram vocab must be >= 1".into()));
        }
        if lambdas.len() != order + 1 {
            return Err(Error::Config(format!(
                "{} interpolation weights for order {order}",
                lambdas.len()
            )));
        }
        let sum: f64 = lambdas.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || lambdas.iter().any(|&l| l < 0.0) {
            return Err(Error::Config(format!(
                "interpolation weights must be >= 0 and sum to 1, got {sum}"
            )));
        }
        Ok(Self {
            order,
            vocab,
            lambdas,
            counts: vec![HashMap::new(); order],
            context: vec![HashMap::new(); order],
        })
    }

    fn add_count(&mut self, gram: &[TokenId], n: u64) {
        let k = gram.len();
        *self.counts[k - 1].entry(gram.to_vec()).or_default() += n;
        *self.context[k - 1]
            .entry(gram[..k - 1].to_vec())
            .or_default() += n;
    }

    /// Counts every k-gram (k ≤ order) of `[BOS] + s + [EOS]` for each sentence.
    /// BOS is only ever a context, never a predicted token.
    pub fn estimate(
        sentences: &[Vec<TokenId>],
        order: usize,
        vocab: usize,
        lambdas: Vec<f64>,
    ) -> Result<Self> {
        let mut lm = Self::empty(order, vocab, lambdas)?;
        for s in sentences {
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::Input(format!("token {bad} outside vocab {vocab}")));
            }
            let mut seq = Vec::with_capacity(s.len() + 2);
            seq.push(BOS);
            seq.extend_from_slice(s);
            seq.push(EOS);
            for i in 1..seq.len() {
                for k in 1..=order.min(i + 1) {
                    lm.add_count(&seq[i + 1 - k..=i], 1);
                }
            }
        }
        Ok(lm)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn count(&self, gram: &[TokenId]) -> u64 {
        if gram.is_empty() || gram.len() > self.order {
            return 0;
        }
        self.counts[gram.len() - 1].get(gram).copied().unwrap_or(0)
    }

    /// Maximum-likelihood `count(ctx, w) / count(ctx, ·)`; `None` for unseen contexts.
    pub fn mle(&self, context: &[TokenId], w: TokenId) -> Option<f64> {
        let k = context.len() + 1;
        if k > self.order {
            return None;
        }
        let total = *self.context[k - 1].get(context)?;
        let mut gram = context.to_vec();
        gram.push(w);
        Some(self.count(&gram) as f64 / total as f64)
    }

    /// `P(w | history)`; only the last `order − 1` history tokens matter.
    pub fn prob(&self, history: &[TokenId], w: TokenId) -> f64 {
        let uniform = 1.0 / self.vocab as f64;
        let mut p = self.lambdas[0] * uniform;
        let mut q = uniform;
        for k in 1..=self.order {
            let need = k - 1;
            if need <= history.len() {
                if let Some(m) = self.mle(&history[history.len() - need..], w) {
                    q = m;
                }
            }
            p += self.lambdas[k] * q;
        }
        p
    }

    pub fn log_prob(&self, history: &[TokenId], w: TokenId) -> f64 {
        self.prob(history, w).ln()
    }

    /// `Σ log P(tokens[i] | history + tokens[..i])`.
    pub fn score_continuation(&self, history: &[TokenId], tokens: &[TokenId]) -> f64 {
        let mut ctx: Vec<TokenId> = history.to_vec();
        let mut total = 0.0;
        for &t in tokens {
            total += self.log_prob(&ctx, t);
            ctx.push(t);
        }
        total
    }

    /// `Σ log P(tokens[i] | tokens[..i])`.
    pub fn score(&self, tokens: &[TokenId]) -> f64 {
        self.score_continuation(&[], tokens)
    }

    /// Log-probability of a whole sentence including BOS context and EOS.
    pub fn sentence_score(&self, tokens: &[TokenId]) -> f64 {
        let mut seq = tokens.to_vec();
        seq.push(EOS);
        self.score_continuation(&[BOS], &seq)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER}");
        let _ = writeln!(out, "order {}", self.order);
        let _ = writeln!(out, "vocab {}", self.vocab);
        let l: Vec<String> = self.lambdas.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "lambdas {}", l.join(" "));
        for (k, table) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "\\{}-grams:", k + 1);
            let mut rows: Vec<(&Vec<TokenId>, &u64)> = table.iter().collect();
            rows.sort();
            for (gram, n) in rows {
                let g: Vec<String> = gram.iter().map(|t| t.to_string()).collect();
                let _ = writeln!(out, "{}\t{n}", g.join(" "));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::parse("n-gram file", m);
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad("missing header".into()));
        }
        let mut field = |name: &str| -> Result<String> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(name))
                .and_then(|l| l.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("missing {name} line")))
        };
        let order: usize = field("order")?
            .parse()
            .map_err(|e| bad(format!("order: {e}")))?;
        let vocab: usize = field("vocab")?
            .parse()
            .map_err(|e| bad(format!("vocab: {e}")))?;
        let lambdas = field("lambdas")?
            .split(' ')
            .map(|v| v.parse::<f64>().map_err(|e| bad(format!("lambda: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut lm = Self::empty(order, vocab, lambdas)?;
        let mut current = 0usize;
        for line in lines {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('\\') {
                current = rest
                    .strip_suffix("-grams:")
                    .and_then(|n| n.parse().ok())
                    .filter(|&n| n >= 1 && n <= order)
                    .ok_or_else(|| bad(format!("bad block header {line:?}")))?;
                continue;
            }
            let (gram, n) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("bad line {line:?}")))?;
            let gram = gram
                .split(' ')
                .map(|t| t.parse::<TokenId>().map_err(|e| bad(format!("token: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if gram.len() != current {
                return Err(bad(format!("{}-gram in block {current}", gram.len())));
            }
            let n: u64 = n.parse().map_err(|e| bad(format!("count: {e}")))?;
            lm.add_count(&gram, n);
        }
        Ok(lm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

impl PrefixScorer for NGramLm {
    fn log_prob(&self, history: &[TokenId], next: TokenId) -> f64 {
        let mut h = Vec::with_capacity(history.len() + 1);
        h.push(BOS);
        h.extend_from_slice(history);
        NGramLm::log_prob(self, &h, next)
    }

    fn log_prob_end(&self, history: &[TokenId]) -> f64 {
        PrefixScorer::log_prob(self, history, EOS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bigram_mle_from_counts() {
        // "a b a b" with a=5, b=6.
        let lm = NGramLm::estimate(&[vec![5, 6, 5, 6]], 2, 8, default_lambdas(2)).unwrap();
        assert_eq!(lm.mle(&[5], 6), Some(1.0));
        assert_eq!(lm.mle(&[6], 5), Some(0.5));
        assert_eq!(lm.mle(&[7], 5), None);
        assert_eq!(lm.count(&[5, 6]), 2);
    }

    #[test]
    fn unseen_token_keeps_floor() {
        let lambdas = default_lambdas(3);
        let lm = NGramLm::estimate(&[vec![4, 5]], 3, 10, lambdas.clone()).unwrap();
        assert!(lm.prob(&[BOS, 4], 9) >= lambdas[0] / 10.0);
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(NGramLm::estimate(&[], 2, 5, vec![0.5, 0.4, 0.2]).is_err());
        assert!(NGramLm::estimate(&[], 2, 5, vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let lm = NGramLm::estimate(&[vec![4, 5, 6], vec![5, 5]], 3, 9, default_lambdas(3)).unwrap();
        let again = NGramLm::from_text(&lm.to_text()).unwrap();
        assert_eq!(again, lm);
        assert_eq!(again.to_text(), lm.to_text());
    }
}
