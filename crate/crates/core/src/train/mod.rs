//! Three-phase training: supervised burn-in, weak/supervised mixing, and a
//! supervised fine-tune of either the encoder-decoder or a CTC encoder.

pub mod checkpoint;

use std::fmt::Write as _;
use std::path::Path;

use weaksup_autograd::{
    adadelta_step, mix_seed, scale_and_clip, AdaDeltaState, AutogradError, Graph, Mode, ParamStore,
    Tensor, Var,
};

pub use checkpoint::{average_checkpoints, config_hash, Arch, Checkpoint};

use crate::ctc::{label_of, min_frames, CtcModel};
use crate::data::{Corpus, MixingSampler, Source, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{encoded_len, EncoderDecoder, ModelConfig};
use crate::TokenId;

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseConfig {
    pub burn_in_updates: usize,
    pub main_updates: usize,
    pub fine_tune_enc_dec_updates: usize,
    pub fine_tune_ctc_updates: usize,
    /// Probability that a train-main batch is supervised.
    pub mixing_ratio: f64,
    /// 0 disables checkpointing.
    pub checkpoint_every: usize,
    pub average_last: usize,
}

impl PhaseConfig {
    pub fn paper() -> Self {
        Self {
            burn_in_updates: 15_000,
            main_updates: 400_000,
            fine_tune_enc_dec_updates: 22_000,
            fine_tune_ctc_updates: 150_000,
            mixing_ratio: 0.3,
            checkpoint_every: 5_000,
            average_last: 20,
        }
    }

    pub fn desk() -> Self {
        Self {
            burn_in_updates: 1_000,
            main_updates: 6_000,
            fine_tune_enc_dec_updates: 600,
            fine_tune_ctc_updates: 1_500,
            mixing_ratio: 0.3,
            checkpoint_every: 200,
            average_last: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            rho: 0.95,
            epsilon: 1e-6,
            clip: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub phases: PhaseConfig,
    pub optim: OptimConfig,
    pub batch_size: usize,
    /// Extra transformer block between the encoder and the CTC projection.
    pub ctc_adapter: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            phases: PhaseConfig::desk(),
            optim: OptimConfig::default(),
            batch_size: 8,
            ctc_adapter: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let p = &self.phases;
        if !(0.0..=1.0).contains(&p.mixing_ratio) {
            return Err(Error::Config(format!(
                "mixing_ratio {} outside [0, 1]",
                p.mixing_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.clip > 0.0 && o.epsilon > 0.0 && (0.0..1.0).contains(&o.rho)) {
            return Err(Error::Config(
                "need lr > 0, clip > 0, epsilon > 0 and 0 <= rho < 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    BurnIn,
    Main,
    FineTune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::BurnIn => "burn-in",
            Phase::Main => "main",
            Phase::FineTune => "fine-tune",
        }
    }

    fn code(self) -> u64 {
        match self {
            Phase::BurnIn => 1,
            Phase::Main => 2,
            Phase::FineTune => 3,
        }
    }
}

/// Features paired with target token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: Tensor<f32>,
    pub tokens: Vec<TokenId>,
}

/// Tokenizes each utterance's training target (transcript or context).
pub fn prepare(corpus: &Corpus, tok: &Tokenizer) -> Vec<Example> {
    corpus
        .utterances
        .iter()
        .map(|u| Example {
            features: u.features.clone(),
            tokens: tok.encode(corpus.target(u)),
        })
        .collect()
}

/// Anything trained by a per-utterance scalar loss over shared parameters.
pub trait Trainable {
    fn params(&self) -> &ParamStore<f32>;
    fn params_mut(&mut self) -> &mut ParamStore<f32>;
    /// `None` when the utterance cannot be scored (it is skipped).
    fn utterance_loss<'p>(&'p self, g: &mut Graph<'p, f32>, ex: &Example) -> Result<Option<Var>>;
}

impl Trainable for EncoderDecoder<f32> {
    fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    fn utterance_loss<'p>(&'p self, g: &mut Graph<'p, f32>, ex: &Example) -> Result<Option<Var>> {
        self.loss(g, &ex.features, &ex.tokens).map(Some)
    }
}

impl Trainable for CtcModel<f32> {
    fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    fn utterance_loss<'p>(&'p self, g: &mut Graph<'p, f32>, ex: &Example) -> Result<Option<Var>> {
        let labels: Vec<usize> = ex.tokens.iter().map(|&t| label_of(t)).collect();
        let tau = encoded_len(ex.features.rows());
        if labels.is_empty() || min_frames(&labels) > tau {
            return Ok(None);
        }
        self.loss(g, &ex.features, &ex.tokens).map(Some)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStat {
    pub step: usize,
    pub phase: Phase,
    pub source: Source,
    /// Mean per-utterance loss of the batch.
    pub loss: f64,
    /// Gradient norm after utterance scaling, before clipping.
    pub grad_norm: f64,
}

/// Append-only record of every update across phases.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub stats: Vec<StepStat>,
    /// Global update counter across phases.
    pub step: usize,
    /// Utterances left out because no CTC alignment exists.
    pub skipped: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,phase,source,loss,grad_norm\n");
        for s in &self.stats {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                s.step,
                s.phase.as_str(),
                s.source.as_str(),
                s.loss,
                s.grad_norm
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }

    /// Mean loss of the first and last `n` stats of a phase.
    pub fn loss_ends(&self, phase: Phase, n: usize) -> Option<(f64, f64)> {
        let v: Vec<f64> = self
            .stats
            .iter()
            .filter(|s| s.phase == phase)
            .map(|s| s.loss)
            .collect();
        if v.is_empty() {
            return None;
        }
        let n = n.clamp(1, v.len());
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&v[..n]), mean(&v[v.len() - n..])))
    }
}

/// One update on a batch. Returns `None` when every utterance was skipped.
fn train_step<M: Trainable>(
    model: &mut M,
    opt: &mut AdaDeltaState<f32>,
    batch: &[&Example],
    cfg: &TrainConfig,
    seed: u64,
    phase: Phase,
    log: &mut TrainLog,
) -> Result<Option<(f64, f64)>> {
    let diverged = |reason: String| Error::Divergence {
        phase: phase.as_str(),
        step: log.step,
        reason,
    };
    let (mut grads, loss, used) = {
        let mut g = Graph::new(model.params(), Mode::Train { seed });
        let mut total: Option<Var> = None;
        let mut used = 0usize;
        for ex in batch {
            let scored = model.utterance_loss(&mut g, ex).map_err(|e| match e {
                Error::Autograd(AutogradError::NonFiniteForward { .. }) => diverged(e.to_string()),
                other => other,
            })?;
            let Some(l) = scored else {
                log.skipped += 1;
                continue;
            };
            used += 1;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let Some(total) = total else {
            return Ok(None);
        };
        let loss = g.value(total).item() as f64 / used as f64;
        if !loss.is_finite() {
            return Err(diverged(format!("loss {loss}")));
        }
        let grads = g.backward(total).map_err(|e| diverged(e.to_string()))?;
        (grads, loss, used)
    };
    let norm = scale_and_clip(&mut grads, used, cfg.optim.clip)?;
    if !norm.is_finite() {
        return Err(diverged(format!("gradient norm {norm}")));
    }
    adadelta_step(model.params_mut(), &grads, opt, cfg.optim.lr)?;
    Ok(Some((loss, norm)))
}

/// Data and schedule of one phase.
#[derive(Clone, Copy, Debug)]
pub struct PhasePlan<'a> {
    pub phase: Phase,
    pub updates: usize,
    /// Supervised batch probability.
    pub ratio: f64,
    pub sup: &'a [Example],
    pub weak: &'a [Example],
    pub checkpoint_every: usize,
}

/// Runs `plan.updates` updates with a fresh optimizer state and returns the
/// checkpoints taken every `checkpoint_every` updates.
pub fn run_phase<M: Trainable>(
    model: &mut M,
    plan: PhasePlan<'_>,
    cfg: &TrainConfig,
    log: &mut TrainLog,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
    hash: &str,
) -> Result<Vec<ParamStore<f32>>> {
    cfg.validate()?;
    if plan.updates == 0 {
        return Ok(Vec::new());
    }
    let mut opt = AdaDeltaState::new(model.params(), cfg.optim.rho, cfg.optim.epsilon);
    let phase_seed = mix_seed(cfg.seed, plan.phase.code());
    let mut sampler = MixingSampler::new(
        plan.sup.len(),
        plan.weak.len(),
        plan.ratio,
        cfg.batch_size,
        mix_seed(phase_seed, 0),
    )?;
    let mut checkpoints = Vec::new();
    for i in 1..=plan.updates {
        log.step += 1;
        let batch = sampler.next_batch();
        let pool = match batch.source {
            Source::Supervised => plan.sup,
            Source::Weak => plan.weak,
        };
        let examples: Vec<&Example> = batch.indices.iter().map(|&j| &pool[j]).collect();
        let seed = mix_seed(phase_seed, i as u64);
        if let Some((loss, grad_norm)) =
            train_step(model, &mut opt, &examples, cfg, seed, plan.phase, log)?
        {
            log.stats.push(StepStat {
                step: log.step,
                phase: plan.phase,
                source: batch.source,
                loss,
                grad_norm,
            });
        }
        if plan.checkpoint_every > 0 && i % plan.checkpoint_every == 0 {
            let ck = Checkpoint {
                step: log.step,
                config_hash: hash.to_string(),
                params: model.params().clone(),
                optimizer: Some(opt.clone()),
            };
            on_checkpoint(&ck)?;
            checkpoints.push(ck.params);
        }
    }
    Ok(checkpoints)
}

fn averaged_or_current(
    checkpoints: &[ParamStore<f32>],
    current: &ParamStore<f32>,
    k: usize,
) -> Result<ParamStore<f32>> {
    if checkpoints.is_empty() {
        Ok(current.clone())
    } else {
        average_checkpoints(checkpoints, k)
    }
}

/// Supervised-only burn-in on `sup`.
pub fn run_burn_in(
    model: &mut EncoderDecoder<f32>,
    sup: &[Example],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    if cfg.phases.burn_in_updates > 0 && sup.is_empty() {
        return Err(Error::Empty("supervised corpus"));
    }
    let plan = PhasePlan {
        phase: Phase::BurnIn,
        updates: cfg.phases.burn_in_updates,
        ratio: 1.0,
        sup,
        weak: &[],
        checkpoint_every: 0,
    };
    let hash = config_hash(&model.cfg, Arch::EncDec);
    run_phase(model, plan, cfg, log, |_| Ok(()), &hash)?;
    Ok(())
}

/// Train-main on the supervised/weak mixture. Returns the checkpoints; the
/// model is left at the last update.
pub fn run_train_main(
    model: &mut EncoderDecoder<f32>,
    sup: &[Example],
    weak: &[Example],
    cfg: &TrainConfig,
    log: &mut TrainLog,
    on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Vec<ParamStore<f32>>> {
    let plan = PhasePlan {
        phase: Phase::Main,
        updates: cfg.phases.main_updates,
        ratio: cfg.phases.mixing_ratio,
        sup,
        weak,
        checkpoint_every: cfg.phases.checkpoint_every,
    };
    let hash = config_hash(&model.cfg, Arch::EncDec);
    run_phase(model, plan, cfg, log, on_checkpoint, &hash)
}

fn fine_tune_plan<'a>(updates: usize, sup: &'a [Example], cfg: &TrainConfig) -> PhasePlan<'a> {
    PhasePlan {
        phase: Phase::FineTune,
        updates,
        ratio: 1.0,
        sup,
        weak: &[],
        checkpoint_every: cfg.phases.checkpoint_every,
    }
}

/// Continues cross-entropy training on `sup`, then averages the last
/// checkpoints of this phase.
pub fn fine_tune_enc_dec(
    model: &EncoderDecoder<f32>,
    sup: &[Example],
    cfg: &TrainConfig,
    log: &mut TrainLog,
    on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<EncoderDecoder<f32>> {
    let mut m = model.clone();
    let plan = fine_tune_plan(cfg.phases.fine_tune_enc_dec_updates, sup, cfg);
    let hash = config_hash(&m.cfg, Arch::EncDec);
    let cks = run_phase(&mut m, plan, cfg, log, on_checkpoint, &hash)?;
    let params = averaged_or_current(&cks, &m.params, cfg.phases.average_last)?;
    EncoderDecoder::from_params(m.cfg.clone(), params)
}

/// Drops θ_dec, attaches a CTC head and trains encoder and head on `sup`.
pub fn fine_tune_ctc(
    model: &EncoderDecoder<f32>,
    sup: &[Example],
    cfg: &TrainConfig,
    log: &mut TrainLog,
    on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<CtcModel<f32>> {
    let mut m = CtcModel::from_encoder(model, cfg.ctc_adapter, mix_seed(cfg.seed, 17))?;
    fine_tune_ctc_model(&mut m, sup, cfg, log, on_checkpoint)
}

/// Fine-tunes an existing CTC model in place and returns the averaged result.
pub fn fine_tune_ctc_model(
    m: &mut CtcModel<f32>,
    sup: &[Example],
    cfg: &TrainConfig,
    log: &mut TrainLog,
    on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<CtcModel<f32>> {
    let plan = fine_tune_plan(cfg.phases.fine_tune_ctc_updates, sup, cfg);
    let hash = config_hash(
        &m.cfg,
        Arch::Ctc {
            adapter: m.adapter.is_some(),
        },
    );
    let cks = run_phase(m, plan, cfg, log, on_checkpoint, &hash)?;
    let params = averaged_or_current(&cks, &m.params, cfg.phases.average_last)?;
    CtcModel::from_params(m.cfg.clone(), m.adapter.is_some(), params)
}

/// Burn-in, train-main, then the average of the last train-main checkpoints.
pub fn pretrain(
    sup: &[Example],
    weak: &[Example],
    cfg: &TrainConfig,
    log: &mut TrainLog,
    on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<EncoderDecoder<f32>> {
    let mut model = EncoderDecoder::new(cfg.model.clone(), mix_seed(cfg.seed, 11))?;
    run_burn_in(&mut model, sup, cfg, log)?;
    let cks = run_train_main(&mut model, sup, weak, cfg, log, on_checkpoint)?;
    let params = averaged_or_current(&cks, &model.params, cfg.phases.average_last)?;
    EncoderDecoder::from_params(model.cfg.clone(), params)
}
