//! Relevance filter: keep weak utterances whose context shares enough
//! words with a baseline recognizer's hypothesis.

use std::collections::{BTreeSet, HashMap};

use super::corpus::Corpus;

/// Only words longer than this many characters count.
pub const MIN_WORD_CHARS_EXCLUSIVE: usize = 3;

/// Lowercased alphanumeric runs.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

fn long_word_set(text: &str) -> BTreeSet<String> {
    words(text)
        .into_iter()
        .filter(|w| w.chars().count() > MIN_WORD_CHARS_EXCLUSIVE)
        .collect()
}

/// Size of the set intersection of words longer than three characters.
pub fn relevance_overlap(context: &str, hypothesis: &str) -> usize {
    let a = long_word_set(context);
    long_word_set(hypothesis).intersection(&a).count()
}

/// Indices (in corpus order) of utterances whose overlap reaches `threshold`.
/// Utterances without a hypothesis are scored against the empty string.
pub fn filter_indices(
    weak: &Corpus,
    hypotheses: &HashMap<String, String>,
    threshold: usize,
) -> Vec<usize> {
    weak.utterances
        .iter()
        .enumerate()
        .filter(|(_, u)| {
            let hyp = hypotheses.get(&u.id).map(String::as_str).unwrap_or("");
            relevance_overlap(u.context.as_deref().unwrap_or(""), hyp) >= threshold
        })
        .map(|(i, _)| i)
        .collect()
}

pub fn filter_corpus(
    weak: &Corpus,
    hypotheses: &HashMap<String, String>,
    threshold: usize,
) -> Corpus {
    weak.select(&filter_indices(weak, hypotheses, threshold))
}

/// Smallest threshold whose kept fraction does not exceed `fraction`
/// (never below 1 unless everything has zero overlap).
pub fn threshold_for_fraction(overlaps: &[usize], fraction: f64) -> usize {
    let max = overlaps.iter().copied().max().unwrap_or(0);
    let n = overlaps.len().max(1) as f64;
    (1..=max + 1)
        .find(|&t| overlaps.iter().filter(|&&o| o >= t).count() as f64 / n <= fraction)
        .unwrap_or(max + 1)
}
