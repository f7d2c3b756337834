//! Synthetic stand-in for a large corpus of videos with loosely related text.
//!
//! A fixed inventory of words is rendered as random feature templates. Each
//! utterance is a word sequence from a small bigram grammar; its transcript
//! is exact, while its context text is a corrupted copy (word dropout, random
//! insertions, local swaps) whose fidelity is set by a relatedness in [0, 1].

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Normal};
use weaksup_autograd::{mix_seed, Tensor};

use super::corpus::{Corpus, CorpusKind, Utterance};
use super::filter::relevance_overlap;
use crate::error::{Error, Result};

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
/// Probability that the next word follows the grammar rather than the unigram.
const GRAMMAR_WEIGHT: f64 = 0.6;
const SUCCESSORS: usize = 3;

/// How closely context text tracks the transcript.
#[derive(Clone, Debug, PartialEq)]
pub enum Relatedness {
    Fixed(f64),
    /// `(weight, relatedness)` components; one is drawn per utterance.
    Mixture(Vec<(f64, f64)>),
}

impl Relatedness {
    fn validate(&self) -> Result<()> {
        let ok = |r: f64| (0.0..=1.0).contains(&r);
        match self {
            Relatedness::Fixed(r) if ok(*r) => Ok(()),
            Relatedness::Mixture(parts)
                if !parts.is_empty() && parts.iter().all(|&(w, r)| w > 0.0 && ok(r)) =>
            {
                Ok(())
            }
            other => Err(Error::Config(format!("invalid relatedness {other:?}"))),
        }
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        match self {
            Relatedness::Fixed(r) => *r,
            Relatedness::Mixture(parts) => {
                let w = WeightedIndex::new(parts.iter().map(|p| p.0)).expect("validated weights");
                parts[w.sample(rng)].1
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_sup: usize,
    pub n_weak: usize,
    pub n_dev: usize,
    /// Utterances per test tier.
    pub n_test: usize,
    pub vocab_words: usize,
    pub feat_dim: usize,
    /// Frames rendered per word before ±1 jitter.
    pub frames_per_token: usize,
    /// Noise on training and dev features.
    pub noise_sd: f64,
    /// Noise per test tier: clean, noisy, extreme.
    pub test_noise: [f64; 3],
    pub relatedness: Relatedness,
    pub min_words: usize,
    pub max_words: usize,
    /// Zipf exponent of the unigram word distribution.
    pub zipf: f64,
    pub seed: u64,
}

pub const TEST_TIERS: [&str; 3] = ["clean", "noisy", "extreme"];

impl SynthConfig {
    /// Laptop-scale defaults.
    pub fn desk() -> Self {
        Self {
            n_sup: 500,
            n_weak: 5000,
            n_dev: 300,
            n_test: 300,
            vocab_words: 100,
            feat_dim: 16,
            frames_per_token: 8,
            noise_sd: 0.3,
            test_noise: [0.0, 0.3, 0.6],
            relatedness: Relatedness::Fixed(0.6),
            min_words: 4,
            max_words: 8,
            zipf: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.relatedness.validate()?;
        if self.vocab_words < 2 || self.feat_dim == 0 || self.frames_per_token < 2 {
            return Err(Error::Config(
                "need vocab_words >= 2, feat_dim >= 1, frames_per_token >= 2".into(),
            ));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config("need 1 <= min_words <= max_words".into()));
        }
        if self.noise_sd < 0.0 || self.test_noise.iter().any(|&n| n < 0.0) {
            return Err(Error::Config("noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Word inventory, acoustic templates and grammar shared by every split.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub words: Vec<String>,
    /// `[frames_per_token, feat_dim]` per word.
    pub templates: Vec<Tensor<f32>>,
    pub unigram: Vec<f64>,
    pub successors: Vec<Vec<usize>>,
    unigram_dist: WeightedIndex<f64>,
}

impl SynthWorld {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x0057_0A1D));
        let mut words: Vec<String> = Vec::with_capacity(cfg.vocab_words);
        while words.len() < cfg.vocab_words {
            let len = rng.random_range(4..=7);
            let w: String = (0..len)
                .map(|_| *LETTERS.choose(&mut rng).expect("nonempty") as char)
                .collect();
            if !words.contains(&w) {
                words.push(w);
            }
        }
        let normal = Normal::new(0.0f32, 1.0).expect("valid");
        let templates = (0..cfg.vocab_words)
            .map(|_| {
                Tensor::from_fn(&[cfg.frames_per_token, cfg.feat_dim], |_| {
                    normal.sample(&mut rng)
                })
            })
            .collect();
        let unigram: Vec<f64> = (1..=cfg.vocab_words)
            .map(|r| (r as f64).powf(-cfg.zipf))
            .collect();
        let z: f64 = unigram.iter().sum();
        let unigram: Vec<f64> = unigram.into_iter().map(|p| p / z).collect();
        let successors = (0..cfg.vocab_words)
            .map(|_| {
                (0..SUCCESSORS)
                    .map(|_| rng.random_range(0..cfg.vocab_words))
                    .collect()
            })
            .collect();
        let unigram_dist =
            WeightedIndex::new(&unigram).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            words,
            templates,
            unigram,
            successors,
            unigram_dist,
        })
    }

    pub fn sentence(&self, cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<usize> {
        let len = rng.random_range(cfg.min_words..=cfg.max_words);
        let mut out: Vec<usize> = Vec::with_capacity(len);
        for _ in 0..len {
            let next = match out.last() {
                Some(&prev) if rng.random_bool(GRAMMAR_WEIGHT) => {
                    *self.successors[prev].choose(rng).expect("nonempty")
                }
                _ => self.unigram_dist.sample(rng),
            };
            out.push(next);
        }
        out
    }

    pub fn text(&self, words: &[usize]) -> String {
        words
            .iter()
            .map(|&w| self.words[w].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Template of word `w` stretched to `len` frames by nearest-row lookup.
    pub fn stretched(&self, w: usize, len: usize) -> impl Iterator<Item = &[f32]> + '_ {
        let t = &self.templates[w];
        let base = t.rows();
        (0..len).map(move |i| t.row(i * base / len))
    }

    /// Features for a word sequence: each word jittered by ±1 frame, plus noise.
    pub fn render(&self, words: &[usize], noise_sd: f64, rng: &mut impl Rng) -> Tensor<f32> {
        let dim = self.templates[0].cols();
        let base = self.templates[0].rows();
        let mut data = Vec::new();
        for &w in words {
            let len = (base as i64 + rng.random_range(-1..=1)) as usize;
            for row in self.stretched(w, len) {
                data.extend_from_slice(row);
            }
        }
        if noise_sd > 0.0 {
            let n = Normal::new(0.0f32, noise_sd as f32).expect("valid sd");
            data.iter_mut().for_each(|v| *v += n.sample(rng));
        }
        let frames = data.len() / dim;
        Tensor::new(vec![frames, dim], data).expect("consistent shape")
    }

    /// Corrupted copy of a transcript: keep each word with probability `rel`,
    /// insert Binomial(len, 1 − rel) uniform random words, then swap adjacent
    /// words with probability (1 − rel) / 2. Never empty.
    pub fn context(&self, words: &[usize], rel: f64, rng: &mut impl Rng) -> Vec<usize> {
        let mut out: Vec<usize> = words
            .iter()
            .copied()
            .filter(|_| rng.random_bool(rel))
            .collect();
        let inserts = Binomial::new(words.len() as u64, 1.0 - rel)
            .expect("valid probability")
            .sample(rng);
        for _ in 0..inserts {
            let pos = rng.random_range(0..=out.len());
            out.insert(pos, rng.random_range(0..self.words.len()));
        }
        let swap = (1.0 - rel) / 2.0;
        for i in 1..out.len() {
            if rng.random_bool(swap) {
                out.swap(i - 1, i);
            }
        }
        if out.is_empty() {
            out.push(rng.random_range(0..self.words.len()));
        }
        out
    }

    /// Best segmentation of `features` into stretched templates (lengths
    /// base−1..=base+1) by dynamic programming on squared distance.
    pub fn template_decode(&self, features: &Tensor<f32>) -> Vec<usize> {
        let frames = features.rows();
        let base = self.templates[0].rows();
        let lens: Vec<usize> = (base.saturating_sub(1).max(1)..=base + 1).collect();
        let mut cost = vec![f64::INFINITY; frames + 1];
        let mut back: Vec<Option<(usize, usize)>> = vec![None; frames + 1];
        cost[0] = 0.0;
        for end in 1..=frames {
            for &len in &lens {
                if len > end || !cost[end - len].is_finite() {
                    continue;
                }
                let start = end - len;
                for w in 0..self.words.len() {
                    let d: f64 = self
                        .stretched(w, len)
                        .enumerate()
                        .map(|(i, row)| {
                            row.iter()
                                .zip(features.row(start + i))
                                .map(|(a, b)| ((a - b) as f64).powi(2))
                                .sum::<f64>()
                        })
                        .sum();
                    let c = cost[start] + d;
                    if c < cost[end] {
                        cost[end] = c;
                        back[end] = Some((start, w));
                    }
                }
            }
        }
        let mut out = Vec::new();
        let mut pos = frames;
        while let Some((start, w)) = back[pos] {
            out.push(w);
            pos = start;
        }
        out.reverse();
        out
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpora {
    pub world: SynthWorld,
    pub sup: Corpus,
    pub weak: Corpus,
    /// Context/transcript overlap (filter word rule) per weak utterance.
    pub weak_overlap: Vec<usize>,
    /// Relatedness drawn for each weak utterance.
    pub weak_relatedness: Vec<f64>,
    pub dev: Corpus,
    /// `(tier name, corpus)` for clean, noisy, extreme.
    pub tests: Vec<(String, Corpus)>,
}

fn utterance_rng(seed: u64, split: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, split), index as u64))
}

/// Supervised utterances (transcript only) for one split.
pub fn supervised_split(
    world: &SynthWorld,
    cfg: &SynthConfig,
    prefix: &str,
    split: u64,
    n: usize,
    noise_sd: f64,
) -> Result<Corpus> {
    let utts = (0..n)
        .map(|i| {
            let mut rng = utterance_rng(cfg.seed, split, i);
            let words = world.sentence(cfg, &mut rng);
            Utterance {
                id: format!("{prefix}{i:05}"),
                features: world.render(&words, noise_sd, &mut rng),
                text: Some(world.text(&words)),
                context: None,
            }
        })
        .collect();
    Corpus::new(CorpusKind::Supervised, utts)
}

/// Weak utterances (context only) with their true overlaps and relatedness.
pub fn weak_split(
    world: &SynthWorld,
    cfg: &SynthConfig,
    prefix: &str,
    split: u64,
    n: usize,
    relatedness: &Relatedness,
) -> Result<(Corpus, Vec<usize>, Vec<f64>)> {
    relatedness.validate()?;
    let mut overlaps = Vec::with_capacity(n);
    let mut rels = Vec::with_capacity(n);
    let utts = (0..n)
        .map(|i| {
            let mut rng = utterance_rng(cfg.seed, split, i);
            let words = world.sentence(cfg, &mut rng);
            let features = world.render(&words, cfg.noise_sd, &mut rng);
            let rel = relatedness.draw(&mut rng);
            let ctx = world.text(&world.context(&words, rel, &mut rng));
            overlaps.push(relevance_overlap(&ctx, &world.text(&words)));
            rels.push(rel);
            Utterance {
                id: format!("{prefix}{i:05}"),
                features,
                text: None,
                context: Some(ctx),
            }
        })
        .collect();
    Ok((Corpus::new(CorpusKind::Weak, utts)?, overlaps, rels))
}

pub const SPLIT_SUP: u64 = 1;
pub const SPLIT_WEAK: u64 = 2;
pub const SPLIT_DEV: u64 = 3;
pub const SPLIT_TEST: u64 = 4;

/// All corpora for one configuration. Bit-identical for a fixed config.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpora> {
    let world = SynthWorld::new(cfg)?;
    let sup = supervised_split(&world, cfg, "sup", SPLIT_SUP, cfg.n_sup, cfg.noise_sd)?;
    let (weak, weak_overlap, weak_relatedness) = weak_split(
        &world,
        cfg,
        "weak",
        SPLIT_WEAK,
        cfg.n_weak,
        &cfg.relatedness,
    )?;
    let dev = supervised_split(&world, cfg, "dev", SPLIT_DEV, cfg.n_dev, cfg.noise_sd)?;
    let tests = TEST_TIERS
        .iter()
        .zip(cfg.test_noise)
        .enumerate()
        .map(|(k, (name, noise))| {
            let c = supervised_split(
                &world,
                cfg,
                &format!("test-{name}-"),
                SPLIT_TEST + k as u64,
                cfg.n_test,
                noise,
            )?;
            Ok((name.to_string(), c))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthCorpora {
        world,
        sup,
        weak,
        weak_overlap,
        weak_relatedness,
        dev,
        tests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_sup: 20,
            n_weak: 30,
            n_dev: 5,
            n_test: 5,
            frames_per_token: 4,
            ..SynthConfig::desk()
        }
    }

    #[test]
    fn words_are_long_enough_for_the_filter() {
        let w = SynthWorld::new(&small()).unwrap();
        assert_eq!(w.words.len(), 100);
        assert!(w.words.iter().all(|x| x.len() > 3));
    }

    #[test]
    fn full_relatedness_copies_transcript() {
        let cfg = small();
        let w = SynthWorld::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = w.sentence(&cfg, &mut rng);
            assert_eq!(w.context(&s, 1.0, &mut rng), s);
        }
    }

    #[test]
    fn render_lengths_follow_jitter() {
        let cfg = small();
        let w = SynthWorld::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = vec![0, 1, 2];
        let f = w.render(&s, 0.0, &mut rng);
        assert!((9..=15).contains(&f.rows()));
        assert_eq!(f.cols(), 16);
    }
}
