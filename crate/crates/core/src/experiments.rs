//! Desk-scale trend experiments on the synthetic corpora: weak pretraining
//! against a supervised baseline, relevance filtering against a random
//! subset, burn-in against none, and the effect of enc-dec fine-tuning.
//!
//! Every arm of one seed shares the corpus seed and the training seed, so
//! arms differ only in their data and schedule. The report files contain no
//! timings and are byte-identical across runs.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use weaksup_autograd::mix_seed;

use crate::ctc::{CtcModel, FusionWeights};
use crate::data::synth::{weak_split, SPLIT_WEAK};
use crate::data::{relevance_overlap, Corpus, Relatedness, SynthCorpora, Tokenizer};
use crate::error::Result;
use crate::eval::{evaluate, transcribe_all, CtcRecognizer, EncDecRecognizer, Recognizer};
use crate::model::EncoderDecoder;
use crate::settings::Settings;
use crate::train::{fine_tune_ctc, fine_tune_enc_dec, prepare, pretrain, Example, TrainConfig, TrainLog};

/// Subword inventory for the synthetic corpora: enough merges to keep most
/// of the 100 words whole.
pub const DESK_TOKENIZER_VOCAB: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Tiny corpora and schedules; seconds.
    Quick,
    /// The desk experiment: three seeds.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendConfig {
    pub settings: Settings,
    pub tokenizer_vocab: usize,
    /// Relatedness of the corpus the relevance filter selects from.
    pub filter_relatedness: Relatedness,
    /// Kept fraction the filter threshold is chosen to approach.
    pub filter_keep: f64,
    pub seeds: Vec<u64>,
}

impl TrendConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let mut cfg = Self {
            settings: Settings::desk(),
            tokenizer_vocab: DESK_TOKENIZER_VOCAB,
            filter_relatedness: Relatedness::Mixture(vec![(0.25, 0.9), (0.75, 0.15)]),
            filter_keep: 0.25,
            seeds: (0..3).map(|k| seed + k).collect(),
        };
        if preset == Preset::Quick {
            let s = &mut cfg.settings;
            s.synth.n_sup = 40;
            s.synth.n_weak = 120;
            s.synth.n_dev = 8;
            s.synth.n_test = 8;
            let p = &mut s.train.phases;
            p.burn_in_updates = 10;
            p.main_updates = 30;
            p.fine_tune_enc_dec_updates = 10;
            p.fine_tune_ctc_updates = 10;
            p.checkpoint_every = 10;
            cfg.tokenizer_vocab = 120;
            cfg.seeds = vec![seed];
        }
        cfg
    }
}

/// Dev and per-tier test WERs of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub dev: f64,
    /// In tier order: clean, noisy, extreme.
    pub tests: Vec<f64>,
}

impl Scores {
    pub fn test_mean(&self) -> f64 {
        self.tests.iter().sum::<f64>() / self.tests.len().max(1) as f64
    }
}

/// One pretraining condition followed by both fine-tunes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub burn_in_updates: usize,
    pub main_updates: usize,
    pub mixing_ratio: f64,
    pub weak_utterances: usize,
    /// Enc-dec after pretraining, before fine-tuning.
    pub pre: Scores,
    /// Enc-dec after fine-tuning.
    pub enc_dec: Scores,
    /// Encoder fine-tuned with CTC.
    pub ctc: Scores,
    pub skipped_ctc_utterances: usize,
    /// Wall-clock seconds of pretraining, enc-dec fine-tuning and enc-dec
    /// scoring; kept out of written reports.
    #[serde(skip)]
    pub enc_dec_seconds: f64,
    /// Wall-clock seconds of CTC fine-tuning and scoring.
    #[serde(skip)]
    pub ctc_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub filter_threshold: usize,
    pub filter_kept: usize,
    /// Mean relatedness of the filtered and the random subsets.
    pub filtered_relatedness: f64,
    pub random_relatedness: f64,
    pub arms: Vec<ArmResult>,
}

impl SeedResult {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.name == name)
    }
}

pub const BASELINE: &str = "baseline";
pub const WEAK: &str = "weak";
pub const FILTERED: &str = "weak-filtered";
pub const RANDOM: &str = "weak-random";
pub const BURN_IN: &str = "burn-in-ratio-0";
pub const NO_BURN_IN: &str = "no-burn-in-ratio-0";

/// Outcome of one trend, per seed and by majority.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub per_seed: Vec<bool>,
    pub holds: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub seeds: Vec<SeedResult>,
    pub checks: Vec<TrendCheck>,
}

fn check(name: &str, per_seed: Vec<bool>, detail: String) -> TrendCheck {
    let passed = per_seed.iter().filter(|&&b| b).count();
    TrendCheck {
        name: name.to_string(),
        holds: 2 * passed > per_seed.len(),
        per_seed,
        detail,
    }
}

/// Relative reduction `1 − a / b`.
fn rel_gain(a: f64, b: f64) -> f64 {
    1.0 - a / b
}

impl TrendReport {
    fn from_seeds(seeds: Vec<SeedResult>) -> Self {
        let mean_of = |name: &str, f: &dyn Fn(&ArmResult) -> f64| -> Vec<f64> {
            seeds
                .iter()
                .map(|r| r.arm(name).map_or(f64::NAN, f))
                .collect()
        };
        let post = |a: &ArmResult| a.enc_dec.test_mean();
        let pre = |a: &ArmResult| a.pre.test_mean();
        let ctc_dev = |a: &ArmResult| a.ctc.dev;
        let (base, weak) = (mean_of(BASELINE, &post), mean_of(WEAK, &post));
        let weak_pre = mean_of(WEAK, &pre);
        let (filt, rand) = (mean_of(FILTERED, &post), mean_of(RANDOM, &post));
        let (on, off) = (mean_of(BURN_IN, &ctc_dev), mean_of(NO_BURN_IN, &ctc_dev));
        let fmt = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{:.4}", x))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let checks = vec![
            check(
                "weak pretraining lowers enc-dec test WER by >= 5% relative",
                base.iter().zip(&weak).map(|(b, w)| rel_gain(*w, *b) >= 0.05).collect(),
                format!(
                    "relative reduction {}",
                    fmt(&base.iter().zip(&weak).map(|(b, w)| rel_gain(*w, *b)).collect::<Vec<_>>())
                ),
            ),
            check(
                "filtered subset <= random subset in enc-dec test WER",
                filt.iter().zip(&rand).map(|(f, r)| f <= r).collect(),
                format!("filtered {} random {}", fmt(&filt), fmt(&rand)),
            ),
            check(
                "burn-in beats no burn-in at ratio 0 (CTC dev WER)",
                on.iter().zip(&off).map(|(a, b)| a < b).collect(),
                format!("burn-in {} none {}", fmt(&on), fmt(&off)),
            ),
            check(
                "pre-fine-tune WER < 90% and fine-tuning does not hurt",
                weak_pre
                    .iter()
                    .zip(&weak)
                    .map(|(p, q)| p.is_finite() && *p < 0.9 && q <= p)
                    .collect(),
                format!("pre {} post {}", fmt(&weak_pre), fmt(&weak)),
            ),
        ];
        Self { seeds, checks }
    }

    /// Seed-averaged WERs shaped like a results table, then the trend checks.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let n = self.seeds.len().max(1) as f64;
        let avg = |name: &str, f: &dyn Fn(&ArmResult) -> Vec<f64>| -> Vec<f64> {
            let mut acc: Vec<f64> = Vec::new();
            for r in &self.seeds {
                if let Some(a) = r.arm(name) {
                    let v = f(a);
                    if acc.is_empty() {
                        acc = vec![0.0; v.len()];
                    }
                    for (x, y) in acc.iter_mut().zip(v) {
                        *x += y / n;
                    }
                }
            }
            acc
        };
        let with_mean = |s: &Scores| {
            let mut v = s.tests.clone();
            v.push(s.test_mean());
            v
        };
        let _ = writeln!(
            out,
            "test WER % (mean over {} seed{})",
            self.seeds.len(),
            if self.seeds.len() == 1 { "" } else { "s" }
        );
        let _ = writeln!(
            out,
            "{:<16} {:<8} {:>8} {:>8} {:>8} {:>8}",
            "data", "model", "clean", "noisy", "extreme", "avg"
        );
        for arm in [BASELINE, WEAK, FILTERED, RANDOM] {
            for (model, f) in [
                ("enc-dec", &(|a: &ArmResult| with_mean(&a.enc_dec)) as &dyn Fn(&ArmResult) -> Vec<f64>),
                ("ctc", &|a: &ArmResult| with_mean(&a.ctc)),
            ] {
                let v = avg(arm, f);
                let cells: String = v.iter().map(|x| format!(" {:>8.2}", 100.0 * x)).collect();
                let _ = writeln!(out, "{:<16} {:<8}{}", arm, model, cells);
            }
        }
        let _ = writeln!(out, "\nburn-in and mixing: CTC fine-tune dev WER %");
        let _ = writeln!(out, "{:<8} {:>6} {:>8}", "burn-in", "ratio", "dev");
        for (arm, label) in [(BURN_IN, "yes"), (NO_BURN_IN, "no")] {
            let v = avg(arm, &|a| vec![a.ctc.dev, a.mixing_ratio]);
            if v.len() == 2 {
                let _ = writeln!(out, "{:<8} {:>6.2} {:>8.2}", label, v[1], 100.0 * v[0]);
            }
        }
        let _ = writeln!(out, "\nenc-dec fine-tuning: test WER % of the weak model");
        let pre = avg(WEAK, &|a| vec![a.pre.test_mean()]);
        let post = avg(WEAK, &|a| vec![a.enc_dec.test_mean()]);
        if let (Some(a), Some(b)) = (pre.first(), post.first()) {
            let _ = writeln!(out, "{:<16} {:>8.2}", "before", 100.0 * a);
            let _ = writeln!(out, "{:<16} {:>8.2}", "after", 100.0 * b);
        }
        let _ = writeln!(out, "\nfilter: threshold / kept / mean relatedness (filtered, random)");
        for r in &self.seeds {
            let _ = writeln!(
                out,
                "seed {:<4} {:>3} {:>6} {:>6.3} {:>6.3}",
                r.seed, r.filter_threshold, r.filter_kept, r.filtered_relatedness, r.random_relatedness
            );
        }
        let _ = writeln!(out, "\ntrends (majority of seeds)");
        for c in &self.checks {
            let marks: String = c.per_seed.iter().map(|&b| if b { '+' } else { '-' }).collect();
            let _ = writeln!(
                out,
                "{} [{}] {}: {}",
                if c.holds { "HOLDS " } else { "FAILS " },
                marks,
                c.name,
                c.detail
            );
        }
        out
    }
}

/// Threshold whose kept fraction is closest to `keep` (smallest on ties).
pub fn threshold_closest_to(overlaps: &[usize], keep: f64) -> usize {
    let n = overlaps.len().max(1) as f64;
    let max = overlaps.iter().copied().max().unwrap_or(0);
    (0..=max + 1)
        .min_by(|&a, &b| {
            let f = |t: usize| (overlaps.iter().filter(|&&o| o >= t).count() as f64 / n - keep).abs();
            f(a).total_cmp(&f(b))
        })
        .unwrap_or(0)
}

fn scores(rec: &dyn Recognizer, c: &SynthCorpora) -> Result<Scores> {
    Ok(Scores {
        dev: evaluate(rec, "dev", &c.dev)?.wer,
        tests: c
            .tests
            .iter()
            .map(|(n, t)| evaluate(rec, n, t).map(|r| r.wer))
            .collect::<Result<Vec<_>>>()?,
    })
}

struct World<'a> {
    corpora: &'a SynthCorpora,
    tok: &'a Tokenizer,
    sup: &'a [Example],
    settings: &'a Settings,
}

impl World<'_> {
    fn enc_dec_scores(&self, m: &EncoderDecoder<f32>) -> Result<Scores> {
        let rec = EncDecRecognizer {
            model: m,
            tokenizer: self.tok,
            beam: self.settings.decode.beam,
            max_len_ratio: self.settings.decode.max_len_ratio,
        };
        scores(&rec, self.corpora)
    }

    fn ctc_recognizer<'m>(&'m self, m: &'m CtcModel<f32>) -> CtcRecognizer<'m> {
        CtcRecognizer {
            model: m,
            tokenizer: self.tok,
            lm: None,
            beam: self.settings.decode.ctc_beam,
            weights: FusionWeights::default(),
        }
    }

    /// Pretrains, scores, fine-tunes both ways and scores again. Returns the
    /// CTC model for reuse as a filter recognizer.
    fn run_arm(
        &self,
        name: &str,
        cfg: &TrainConfig,
        weak: &[Example],
        out: &Path,
    ) -> Result<(ArmResult, CtcModel<f32>)> {
        let start = std::time::Instant::now();
        let mut log = TrainLog::default();
        let pre_model = pretrain(self.sup, weak, cfg, &mut log, |_| Ok(()))?;
        let pre = self.enc_dec_scores(&pre_model)?;
        let ft = fine_tune_enc_dec(&pre_model, self.sup, cfg, &mut log, |_| Ok(()))?;
        let enc_dec = self.enc_dec_scores(&ft)?;
        let enc_dec_seconds = start.elapsed().as_secs_f64();
        let skipped_before = log.skipped;
        let ctc_model = fine_tune_ctc(&pre_model, self.sup, cfg, &mut log, |_| Ok(()))?;
        let ctc = scores(&self.ctc_recognizer(&ctc_model), self.corpora)?;
        log.write_csv(&out.join(format!("{name}.csv")))?;
        let arm = ArmResult {
            name: name.to_string(),
            burn_in_updates: cfg.phases.burn_in_updates,
            main_updates: cfg.phases.main_updates,
            mixing_ratio: cfg.phases.mixing_ratio,
            weak_utterances: weak.len(),
            pre,
            enc_dec,
            ctc,
            skipped_ctc_utterances: log.skipped - skipped_before,
            enc_dec_seconds,
            ctc_seconds: start.elapsed().as_secs_f64() - enc_dec_seconds,
        };
        Ok((arm, ctc_model))
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// All arms for one seed; stats CSVs go to `out`.
pub fn run_seed(tc: &TrendConfig, seed: u64, out: &Path) -> Result<SeedResult> {
    std::fs::create_dir_all(out)?;
    let mut settings = tc.settings.clone();
    settings.synth.seed = seed;
    settings.train.seed = seed;
    let corpora = crate::data::synth_corpus(&settings.synth)?;
    let (mixed, _, mixed_rel) = weak_split(
        &corpora.world,
        &settings.synth,
        "mixed",
        mix_seed(SPLIT_WEAK, 1),
        settings.synth.n_weak,
        &tc.filter_relatedness,
    )?;
    let mut texts: Vec<&str> = corpora.sup.utterances.iter().map(|u| corpora.sup.target(u)).collect();
    texts.extend(corpora.weak.utterances.iter().map(|u| corpora.weak.target(u)));
    let tok = Tokenizer::train(&texts, tc.tokenizer_vocab)?;
    settings.train.model.vocab_size = tok.vocab_size();
    settings.train.model.feat_dim = settings.synth.feat_dim;
    settings.validate()?;
    let sup = prepare(&corpora.sup, &tok);
    let weak = prepare(&corpora.weak, &tok);
    let world = World {
        corpora: &corpora,
        tok: &tok,
        sup: &sup,
        settings: &settings,
    };
    let base_cfg = settings.train.clone();
    let mut arms = Vec::new();

    let mut cfg = base_cfg.clone();
    cfg.phases.mixing_ratio = 1.0;
    let (baseline, baseline_ctc) = world.run_arm(BASELINE, &cfg, &[], out)?;
    arms.push(baseline);

    arms.push(world.run_arm(WEAK, &base_cfg, &weak, out)?.0);

    // Relevance filter driven by the baseline recognizer, against a random
    // subset of the same size from the same mixed-relatedness corpus.
    let (hyps, _) = transcribe_all(&world.ctc_recognizer(&baseline_ctc), &mixed);
    let overlaps: Vec<usize> = mixed
        .utterances
        .iter()
        .zip(&hyps)
        .map(|(u, h)| relevance_overlap(u.context.as_deref().unwrap_or(""), h))
        .collect();
    let threshold = threshold_closest_to(&overlaps, tc.filter_keep);
    let kept: Vec<usize> = (0..mixed.len()).filter(|&i| overlaps[i] >= threshold).collect();
    let mut order: Vec<usize> = (0..mixed.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xF11)));
    let mut random: Vec<usize> = order[..kept.len()].to_vec();
    random.sort_unstable();
    let subset = |idx: &[usize]| -> (Corpus, f64) {
        (mixed.select(idx), mean(idx.iter().map(|&i| mixed_rel[i])))
    };
    let (filtered_corpus, filtered_relatedness) = subset(&kept);
    let (random_corpus, random_relatedness) = subset(&random);
    for (name, corpus) in [(FILTERED, &filtered_corpus), (RANDOM, &random_corpus)] {
        let data = prepare(corpus, &tok);
        let cfg = if data.is_empty() {
            let mut c = base_cfg.clone();
            c.phases.mixing_ratio = 1.0;
            c
        } else {
            base_cfg.clone()
        };
        arms.push(world.run_arm(name, &cfg, &data, out)?.0);
    }

    // Weak-only train-main with and without burn-in, at equal total updates.
    let mut on = base_cfg.clone();
    on.phases.mixing_ratio = 0.0;
    let mut off = on.clone();
    off.phases.main_updates += off.phases.burn_in_updates;
    off.phases.burn_in_updates = 0;
    arms.push(world.run_arm(BURN_IN, &on, &weak, out)?.0);
    arms.push(world.run_arm(NO_BURN_IN, &off, &weak, out)?.0);

    Ok(SeedResult {
        seed,
        filter_threshold: threshold,
        filter_kept: kept.len(),
        filtered_relatedness,
        random_relatedness,
        arms,
    })
}

/// Runs every seed, writing `seed-<n>/<arm>.csv`, `report.json` and
/// `report.txt` under `out`.
pub fn run_trend(tc: &TrendConfig, out: &Path) -> Result<TrendReport> {
    std::fs::create_dir_all(out)?;
    let seeds = tc
        .seeds
        .iter()
        .map(|&s| run_seed(tc, s, &out.join(format!("seed-{s}"))))
        .collect::<Result<Vec<_>>>()?;
    let report = TrendReport::from_seeds(seeds);
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(out.join("report.txt"), report.table())?;
    Ok(report)
}

pub fn trend_report(preset: Preset, seed: u64, out: &Path) -> Result<TrendReport> {
    run_trend(&TrendConfig::preset(preset, seed), out)
}
