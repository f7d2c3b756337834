//! Line-oriented `key = value` configuration covering every hyperparameter.
//!
//! Blank lines and text after `#` are ignored. Later assignments override
//! earlier ones, so command-line flags are applied after the file.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Relatedness, SynthConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{OptimConfig, PhaseConfig, TrainConfig};

/// Decoding and language-model settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    pub ctc_beam: usize,
    pub lm_weight: f64,
    pub word_bonus: f64,
    /// Enc-dec hypotheses stop after `ceil(ratio · τ) + 2` tokens.
    pub max_len_ratio: f64,
    pub lm_order: usize,
}

impl DecodeConfig {
    pub fn paper() -> Self {
        Self {
            beam: 20,
            ctc_beam: 20,
            lm_weight: 0.5,
            word_bonus: 1.0,
            max_len_ratio: 2.0,
            lm_order: 5,
        }
    }
}

/// Relevance filter thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig {
    /// Minimum count of shared words longer than three characters.
    pub threshold: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub filter: FilterConfig,
    pub synth: SynthConfig,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {v:?}: expected true or false"))),
    }
}

/// `0.6` or `weight:relatedness,weight:relatedness,...`.
pub fn parse_relatedness(v: &str) -> Result<Relatedness> {
    if !v.contains(':') {
        return Ok(Relatedness::Fixed(parse_num("relatedness", v)?));
    }
    let parts = v
        .split(',')
        .map(|p| {
            let (w, r) = p
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("relatedness component {p:?}")))?;
            Ok((parse_num("relatedness", w.trim())?, parse_num("relatedness", r.trim())?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Relatedness::Mixture(parts))
}

pub fn format_relatedness(r: &Relatedness) -> String {
    match r {
        Relatedness::Fixed(v) => format!("{v}"),
        Relatedness::Mixture(parts) => parts
            .iter()
            .map(|(w, r)| format!("{w}:{r}"))
            .collect::<Vec<_>>()
            .join(","),
    }
}

fn parse_list<const N: usize, T: std::str::FromStr>(key: &str, v: &str) -> Result<[T; N]>
where
    T::Err: std::fmt::Display,
{
    let items = v
        .split(',')
        .map(|x| parse_num(key, x.trim()))
        .collect::<Result<Vec<T>>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key} needs {N} comma-separated values")))
}

impl Settings {
    /// Full-size hyperparameters.
    pub fn paper() -> Self {
        Self {
            train: TrainConfig {
                model: ModelConfig::paper(),
                phases: PhaseConfig::paper(),
                optim: OptimConfig::default(),
                batch_size: 8,
                ctc_adapter: true,
                seed: 0,
            },
            decode: DecodeConfig::paper(),
            filter: FilterConfig { threshold: 14 },
            synth: SynthConfig::desk(),
        }
    }

    /// Laptop-scale hyperparameters for the synthetic corpus.
    pub fn desk() -> Self {
        Self {
            train: TrainConfig::desk(),
            decode: DecodeConfig {
                beam: 4,
                ctc_beam: 8,
                ..DecodeConfig::paper()
            },
            filter: FilterConfig { threshold: 2 },
            synth: SynthConfig::desk(),
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.train.model;
        let p = &mut self.train.phases;
        let o = &mut self.train.optim;
        let d = &mut self.decode;
        let s = &mut self.synth;
        match key {
            "model.feat_dim" => m.feat_dim = parse_num(key, v)?,
            "model.model_dim" => m.model_dim = parse_num(key, v)?,
            "model.heads" => m.heads = parse_num(key, v)?,
            "model.ffn_dim" => m.ffn_dim = parse_num(key, v)?,
            "model.enc_blocks" => m.enc_blocks = parse_num(key, v)?,
            "model.dec_blocks" => m.dec_blocks = parse_num(key, v)?,
            "model.dec_conv_layers" => m.dec_conv_layers = parse_num(key, v)?,
            "model.dec_conv_channels" => m.dec_conv_channels = parse_num(key, v)?,
            "model.dec_conv_kernel" => m.dec_conv_kernel = parse_num(key, v)?,
            "model.conv_channels" => m.conv_channels = parse_list(key, v)?,
            "model.conv_kernel" => m.conv_kernel = parse_num(key, v)?,
            "model.dropout" => m.dropout = parse_num(key, v)?,
            "model.vocab_size" => m.vocab_size = parse_num(key, v)?,
            "phases.burn_in_updates" => p.burn_in_updates = parse_num(key, v)?,
            "phases.main_updates" => p.main_updates = parse_num(key, v)?,
            "phases.fine_tune_enc_dec_updates" => p.fine_tune_enc_dec_updates = parse_num(key, v)?,
            "phases.fine_tune_ctc_updates" => p.fine_tune_ctc_updates = parse_num(key, v)?,
            "phases.mixing_ratio" => p.mixing_ratio = parse_num(key, v)?,
            "phases.checkpoint_every" => p.checkpoint_every = parse_num(key, v)?,
            "phases.average_last" => p.average_last = parse_num(key, v)?,
            "optim.lr" => o.lr = parse_num(key, v)?,
            "optim.rho" => o.rho = parse_num(key, v)?,
            "optim.epsilon" => o.epsilon = parse_num(key, v)?,
            "optim.clip" => o.clip = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.ctc_adapter" => self.train.ctc_adapter = parse_bool(key, v)?,
            "seed" => {
                let seed = parse_num(key, v)?;
                self.train.seed = seed;
                self.synth.seed = seed;
            }
            "decode.beam" => d.beam = parse_num(key, v)?,
            "decode.ctc_beam" => d.ctc_beam = parse_num(key, v)?,
            "decode.lm_weight" => d.lm_weight = parse_num(key, v)?,
            "decode.word_bonus" => d.word_bonus = parse_num(key, v)?,
            "decode.max_len_ratio" => d.max_len_ratio = parse_num(key, v)?,
            "lm.order" => d.lm_order = parse_num(key, v)?,
            "filter.threshold" => self.filter.threshold = parse_num(key, v)?,
            "synth.n_sup" => s.n_sup = parse_num(key, v)?,
            "synth.n_weak" => s.n_weak = parse_num(key, v)?,
            "synth.n_dev" => s.n_dev = parse_num(key, v)?,
            "synth.n_test" => s.n_test = parse_num(key, v)?,
            "synth.vocab_words" => s.vocab_words = parse_num(key, v)?,
            "synth.feat_dim" => s.feat_dim = parse_num(key, v)?,
            "synth.frames_per_token" => s.frames_per_token = parse_num(key, v)?,
            "synth.noise_sd" => s.noise_sd = parse_num(key, v)?,
            "synth.test_noise" => s.test_noise = parse_list(key, v)?,
            "synth.relatedness" => s.relatedness = parse_relatedness(v)?,
            "synth.min_words" => s.min_words = parse_num(key, v)?,
            "synth.max_words" => s.max_words = parse_num(key, v)?,
            "synth.zipf" => s.zipf = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        let d = &self.decode;
        if d.beam == 0 || d.ctc_beam == 0 || d.lm_order == 0 || d.max_len_ratio <= 0.0 {
            return Err(Error::Config("beams, lm.order and max_len_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its current value; `apply_text` of this output on any
    /// settings reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.train.model;
        let p = &self.train.phases;
        let o = &self.train.optim;
        let d = &self.decode;
        let s = &self.synth;
        let rows: Vec<(&str, String)> = vec![
            ("model.feat_dim", m.feat_dim.to_string()),
            ("model.model_dim", m.model_dim.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.ffn_dim", m.ffn_dim.to_string()),
            ("model.enc_blocks", m.enc_blocks.to_string()),
            ("model.dec_blocks", m.dec_blocks.to_string()),
            ("model.dec_conv_layers", m.dec_conv_layers.to_string()),
            ("model.dec_conv_channels", m.dec_conv_channels.to_string()),
            ("model.dec_conv_kernel", m.dec_conv_kernel.to_string()),
            ("model.conv_channels", format!("{},{}", m.conv_channels[0], m.conv_channels[1])),
            ("model.conv_kernel", m.conv_kernel.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("model.vocab_size", m.vocab_size.to_string()),
            ("phases.burn_in_updates", p.burn_in_updates.to_string()),
            ("phases.main_updates", p.main_updates.to_string()),
            ("phases.fine_tune_enc_dec_updates", p.fine_tune_enc_dec_updates.to_string()),
            ("phases.fine_tune_ctc_updates", p.fine_tune_ctc_updates.to_string()),
            ("phases.mixing_ratio", p.mixing_ratio.to_string()),
            ("phases.checkpoint_every", p.checkpoint_every.to_string()),
            ("phases.average_last", p.average_last.to_string()),
            ("optim.lr", o.lr.to_string()),
            ("optim.rho", o.rho.to_string()),
            ("optim.epsilon", o.epsilon.to_string()),
            ("optim.clip", o.clip.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.ctc_adapter", self.train.ctc_adapter.to_string()),
            ("seed", self.train.seed.to_string()),
            ("decode.beam", d.beam.to_string()),
            ("decode.ctc_beam", d.ctc_beam.to_string()),
            ("decode.lm_weight", d.lm_weight.to_string()),
            ("decode.word_bonus", d.word_bonus.to_string()),
            ("decode.max_len_ratio", d.max_len_ratio.to_string()),
            ("lm.order", d.lm_order.to_string()),
            ("filter.threshold", self.filter.threshold.to_string()),
            ("synth.n_sup", s.n_sup.to_string()),
            ("synth.n_weak", s.n_weak.to_string()),
            ("synth.n_dev", s.n_dev.to_string()),
            ("synth.n_test", s.n_test.to_string()),
            ("synth.vocab_words", s.vocab_words.to_string()),
            ("synth.feat_dim", s.feat_dim.to_string()),
            ("synth.frames_per_token", s.frames_per_token.to_string()),
            ("synth.noise_sd", s.noise_sd.to_string()),
            (
                "synth.test_noise",
                s.test_noise.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("synth.relatedness", format_relatedness(&s.relatedness)),
            ("synth.min_words", s.min_words.to_string()),
            ("synth.max_words", s.max_words.to_string()),
            ("synth.zipf", s.zipf.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
