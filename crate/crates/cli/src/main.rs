//! `weaksup`: data generation, training, decoding and evaluation.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use weaksup_autograd::{mix_seed, primitive_suite};
use weaksup_core::checks::tiny_model_gradcheck;
use weaksup_core::ctc::{CtcModel, FusionWeights};
use weaksup_core::data::corpus::{read_manifest_entries, write_entries, ManifestEntry};
use weaksup_core::data::{
    read_manifest, relevance_overlap, synth_corpus, write_manifest, Corpus, CorpusKind, NGramLm,
    Tokenizer,
};
use weaksup_core::eval::{evaluate_sets, transcribe_all, CtcRecognizer, EncDecRecognizer, Recognizer};
use weaksup_core::experiments::{trend_report, Preset, DESK_TOKENIZER_VOCAB};
use weaksup_core::model::EncoderDecoder;
use weaksup_core::settings::{parse_relatedness, Settings};
use weaksup_core::train::{
    average_checkpoints, config_hash, fine_tune_ctc_model, fine_tune_enc_dec, prepare,
    run_burn_in, run_train_main, Arch, Checkpoint, TrainLog,
};
use weaksup_core::{Error, Result};

const GRADCHECK_PRIMITIVE_TOL: f64 = 1e-5;
const GRADCHECK_MODEL_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "weaksup", version, about = "Weakly supervised speech recognition at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Setting override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    BurnIn,
    Main,
    FineTune,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    EncDec,
    Ctc,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Quick,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpora as manifests plus feature files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// `0.6` or `weight:rel,weight:rel,...`.
        #[arg(long)]
        relatedness: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Learn subword merges from transcripts and context texts.
    TokenizerTrain {
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long, default_value_t = DESK_TOKENIZER_VOCAB)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the subword n-gram LM from transcripts.
    LmTrain {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Keep weak utterances whose context overlaps a recognizer hypothesis.
    Filter {
        #[arg(long)]
        weak: PathBuf,
        /// JSON Lines with `id` and `text` per utterance, as written by `decode`.
        #[arg(long)]
        hyp_manifest: PathBuf,
        #[arg(long)]
        threshold: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run one training phase.
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        #[arg(long, value_enum, default_value = "enc-dec")]
        mode: ModeArg,
        #[arg(long)]
        sup: PathBuf,
        #[arg(long)]
        weak: Option<PathBuf>,
        #[arg(long)]
        tokenizer: PathBuf,
        /// Checkpoint to start from; burn-in starts from scratch without one.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        mixing_ratio: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        updates: Option<usize>,
        /// Output directory for checkpoints and the stats CSV.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Element-wise mean of the last checkpoints given.
    AverageCheckpoints {
        #[arg(long)]
        last: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Transcribe a manifest; writes `{"id", "text"}` lines.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        /// n-gram LM for CTC shallow fusion.
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        lm_weight: Option<f64>,
        #[arg(long)]
        word_bonus: Option<f64>,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score test sets: JSON report on stdout, table on stderr.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        /// `name=manifest` or a manifest path. Repeatable.
        #[arg(long = "test", required = true)]
        tests: Vec<String>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        lm_weight: Option<f64>,
        #[arg(long)]
        word_bonus: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks of every primitive and of a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Run the trend experiments and write stats CSVs and a report.
    TrendReport {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, value_enum, default_value = "quick")]
        preset: PresetArg,
        #[arg(long, default_value = "trend-report")]
        out: PathBuf,
    },
}

fn load_settings(common: &Common, overrides: &[(&str, Option<String>)]) -> Result<Settings> {
    let mut s = Settings::desk();
    if let Some(path) = &common.config {
        s.apply_file(path)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {kv:?}: expected KEY=VALUE")))?;
        s.set(k.trim(), v.trim())?;
    }
    for (k, v) in overrides {
        if let Some(v) = v {
            s.set(k, v)?;
        }
    }
    s.validate()?;
    Ok(s)
}

fn some<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

/// Reads a manifest whose entries may carry a transcript, a context, or both.
fn read_any_manifest(path: &Path) -> Result<Corpus> {
    let entries = read_manifest_entries(path)?;
    let kind = if entries.iter().all(|e| e.text.is_some()) {
        CorpusKind::Supervised
    } else {
        CorpusKind::Weak
    };
    read_manifest(path, kind)
}

fn feature_dim(corpus: &Corpus) -> Result<usize> {
    corpus
        .utterances
        .first()
        .map(|u| u.dim())
        .ok_or(Error::Empty("manifest"))
}

/// Model config from the settings, with the vocabulary and feature size
/// taken from the tokenizer and the data.
fn fit_model(s: &mut Settings, tok: &Tokenizer, feat_dim: usize) -> Result<()> {
    s.train.model.vocab_size = tok.vocab_size();
    s.train.model.feat_dim = feat_dim;
    s.train.model.validate()
}

enum Loaded {
    EncDec(EncoderDecoder<f32>),
    Ctc(CtcModel<f32>),
}

fn load_model(path: &Path, s: &Settings) -> Result<(Loaded, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let is_ctc = ck.params.iter().any(|(_, n, _)| n.starts_with("ctc."));
    let arch = if is_ctc {
        Arch::Ctc {
            adapter: ck.params.iter().any(|(_, n, _)| n.starts_with("ctc.adapter.")),
        }
    } else {
        Arch::EncDec
    };
    let cfg = s.train.model.clone();
    let expected = config_hash(&cfg, arch);
    if ck.config_hash != expected {
        return Err(Error::Config(format!(
            "{} was trained with a different {} configuration (hash {}, settings give {})",
            path.display(),
            arch.tag(),
            ck.config_hash,
            expected
        )));
    }
    let model = match arch {
        Arch::EncDec => Loaded::EncDec(EncoderDecoder::from_params(cfg, ck.params.clone())?),
        Arch::Ctc { adapter } => Loaded::Ctc(CtcModel::from_params(cfg, adapter, ck.params.clone())?),
    };
    Ok((model, ck))
}

fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    ck.save(path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn cmd_synth(out: &Path, seed: Option<u64>, rel: Option<String>, common: &Common) -> Result<()> {
    let mut s = load_settings(common, &[("seed", some(&seed))])?;
    if let Some(r) = rel {
        s.synth.relatedness = parse_relatedness(&r)?;
        s.validate()?;
    }
    std::fs::create_dir_all(out)?;
    let c = synth_corpus(&s.synth)?;
    write_manifest(out, "sup", &c.sup)?;
    write_manifest(out, "weak", &c.weak)?;
    write_manifest(out, "dev", &c.dev)?;
    for (name, corpus) in &c.tests {
        write_manifest(out, &format!("test-{name}"), corpus)?;
    }
    std::fs::write(out.join("settings.txt"), s.to_text())?;
    eprintln!(
        "wrote {} supervised, {} weak, {} dev and {}×{} test utterances to {}",
        c.sup.len(),
        c.weak.len(),
        c.dev.len(),
        c.tests.len(),
        s.synth.n_test,
        out.display()
    );
    Ok(())
}

fn cmd_tokenizer_train(manifests: &[PathBuf], vocab_size: usize, out: &Path) -> Result<()> {
    let mut texts = Vec::new();
    for m in manifests {
        for e in read_manifest_entries(m)? {
            texts.extend(e.text);
            texts.extend(e.context);
        }
    }
    let tok = Tokenizer::train(&texts, vocab_size)?;
    tok.save(out)?;
    eprintln!("wrote {} ({} entries)", out.display(), tok.vocab_size());
    Ok(())
}

fn cmd_lm_train(
    tokenizer: &Path,
    manifests: &[PathBuf],
    order: Option<usize>,
    out: &Path,
    common: &Common,
) -> Result<()> {
    let s = load_settings(common, &[("lm.order", some(&order))])?;
    let tok = Tokenizer::load(tokenizer)?;
    let mut sentences = Vec::new();
    for m in manifests {
        for e in read_manifest_entries(m)? {
            let text = e
                .text
                .ok_or_else(|| Error::Input(format!("{} in {} has no transcript", e.id, m.display())))?;
            sentences.push(tok.encode(&text));
        }
    }
    let order = s.decode.lm_order;
    let lm = NGramLm::estimate(
        &sentences,
        order,
        tok.vocab_size(),
        weaksup_core::data::default_lambdas(order),
    )?;
    lm.save(out)?;
    eprintln!("wrote {} (order {order}, {} sentences)", out.display(), sentences.len());
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Hypothesis {
    id: String,
    text: String,
}

fn cmd_filter(
    weak: &Path,
    hyp_manifest: &Path,
    threshold: Option<usize>,
    out: &Path,
    common: &Common,
) -> Result<()> {
    let s = load_settings(common, &[("filter.threshold", some(&threshold))])?;
    let threshold = s.filter.threshold;
    let mut hyps = HashMap::new();
    for line in std::fs::read_to_string(hyp_manifest)?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let h: Hypothesis = serde_json::from_str(line)?;
        hyps.insert(h.id, h.text);
    }
    let entries = read_manifest_entries(weak)?;
    let src_dir = weak.parent().unwrap_or(Path::new("")).to_path_buf();
    let out_dir = out.parent().unwrap_or(Path::new("")).to_path_buf();
    let same_dir = std::fs::canonicalize(if src_dir.as_os_str().is_empty() { Path::new(".") } else { &src_dir })?
        == std::fs::canonicalize(if out_dir.as_os_str().is_empty() { Path::new(".") } else { &out_dir })?;
    let kept: Vec<ManifestEntry> = entries
        .into_iter()
        .filter(|e| {
            let ctx = e.context.as_deref().unwrap_or("");
            let hyp = hyps.get(&e.id).map(String::as_str).unwrap_or("");
            relevance_overlap(ctx, hyp) >= threshold
        })
        .map(|mut e| {
            if !same_dir && Path::new(&e.feat_path).is_relative() {
                let abs = std::fs::canonicalize(src_dir.join(&e.feat_path))
                    .unwrap_or_else(|_| src_dir.join(&e.feat_path));
                e.feat_path = abs.to_string_lossy().into_owned();
            }
            e
        })
        .collect();
    write_entries(out, &kept)?;
    eprintln!("kept {} utterances at threshold {threshold}", kept.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    phase: PhaseArg,
    mode: ModeArg,
    sup_path: &Path,
    weak_path: Option<&Path>,
    tokenizer: &Path,
    init: Option<&Path>,
    ratio: Option<f64>,
    seed: Option<u64>,
    updates: Option<usize>,
    out: &Path,
    common: &Common,
) -> Result<()> {
    let updates_key = match (phase, mode) {
        (PhaseArg::BurnIn, _) => "phases.burn_in_updates",
        (PhaseArg::Main, _) => "phases.main_updates",
        (PhaseArg::FineTune, ModeArg::EncDec) => "phases.fine_tune_enc_dec_updates",
        (PhaseArg::FineTune, ModeArg::Ctc) => "phases.fine_tune_ctc_updates",
    };
    let mut s = load_settings(
        common,
        &[
            ("phases.mixing_ratio", some(&ratio)),
            ("seed", some(&seed)),
            (updates_key, some(&updates)),
        ],
    )?;
    let tok = Tokenizer::load(tokenizer)?;
    let sup_corpus = read_manifest(sup_path, CorpusKind::Supervised)?;
    fit_model(&mut s, &tok, feature_dim(&sup_corpus)?)?;
    let cfg = s.train.clone();
    let sup = prepare(&sup_corpus, &tok);
    std::fs::create_dir_all(out)?;
    let mut log = TrainLog::default();
    let loaded = init.map(|p| load_model(p, &s)).transpose()?;
    let ckpt_dir = out.to_path_buf();
    let tag = match (phase, mode) {
        (PhaseArg::BurnIn, _) => "burn-in",
        (PhaseArg::Main, _) => "main",
        (PhaseArg::FineTune, ModeArg::EncDec) => "fine-tune",
        (PhaseArg::FineTune, ModeArg::Ctc) => "ctc",
    };
    let save_each = |ck: &Checkpoint| save_checkpoint(&ckpt_dir.join(format!("{tag}-{:06}.ckpt", ck.step)), ck);
    let enc_dec_init = |loaded: Option<(Loaded, Checkpoint)>| -> Result<EncoderDecoder<f32>> {
        match loaded {
            Some((Loaded::EncDec(m), _)) => Ok(m),
            Some((Loaded::Ctc(_), _)) => Err(Error::Input("this phase needs an encoder-decoder checkpoint".into())),
            None => Err(Error::Input("--init is required for this phase".into())),
        }
    };
    let hash_ed = config_hash(&cfg.model, Arch::EncDec);
    let (final_params, final_hash, step) = match (phase, mode) {
        (PhaseArg::BurnIn, ModeArg::EncDec) => {
            let mut m = match loaded {
                Some(_) => enc_dec_init(loaded)?,
                None => EncoderDecoder::new(cfg.model.clone(), mix_seed(cfg.seed, 11))?,
            };
            run_burn_in(&mut m, &sup, &cfg, &mut log)?;
            (m.params, hash_ed, cfg.phases.burn_in_updates)
        }
        (PhaseArg::Main, ModeArg::EncDec) => {
            let mut m = enc_dec_init(loaded)?;
            let weak = match weak_path {
                Some(p) => prepare(&read_manifest(p, CorpusKind::Weak)?, &tok),
                None => Vec::new(),
            };
            let cks = run_train_main(&mut m, &sup, &weak, &cfg, &mut log, save_each)?;
            save_checkpoint(
                &out.join("main-last.ckpt"),
                &Checkpoint {
                    step: cfg.phases.main_updates,
                    config_hash: hash_ed.clone(),
                    params: m.params.clone(),
                    optimizer: None,
                },
            )?;
            let params = if cks.is_empty() {
                m.params
            } else {
                average_checkpoints(&cks, cfg.phases.average_last)?
            };
            (params, hash_ed, cfg.phases.main_updates)
        }
        (PhaseArg::FineTune, ModeArg::EncDec) => {
            let m = enc_dec_init(loaded)?;
            let ft = fine_tune_enc_dec(&m, &sup, &cfg, &mut log, save_each)?;
            (ft.params, hash_ed, cfg.phases.fine_tune_enc_dec_updates)
        }
        (PhaseArg::FineTune, ModeArg::Ctc) => {
            let mut m = match loaded {
                Some((Loaded::EncDec(ed), _)) => {
                    CtcModel::from_encoder(&ed, cfg.ctc_adapter, mix_seed(cfg.seed, 17))?
                }
                Some((Loaded::Ctc(c), _)) => c,
                None => return Err(Error::Input("--init is required for this phase".into())),
            };
            let ft = fine_tune_ctc_model(&mut m, &sup, &cfg, &mut log, save_each)?;
            let hash = config_hash(
                &ft.cfg,
                Arch::Ctc {
                    adapter: ft.adapter.is_some(),
                },
            );
            (ft.params, hash, cfg.phases.fine_tune_ctc_updates)
        }
        (_, ModeArg::Ctc) => {
            return Err(Error::Config("--mode ctc only applies to --phase fine-tune".into()))
        }
    };
    let final_path = out.join(format!("{tag}-final.ckpt"));
    save_checkpoint(
        &final_path,
        &Checkpoint {
            step,
            config_hash: final_hash,
            params: final_params,
            optimizer: None,
        },
    )?;
    let csv = out.join(format!("stats-{tag}.csv"));
    log.write_csv(&csv)?;
    eprintln!("wrote {} ({} updates, {} skipped utterances)", csv.display(), log.stats.len(), log.skipped);
    Ok(())
}

fn cmd_average(last: usize, out: &Path, paths: &[PathBuf]) -> Result<()> {
    let cks = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    let first = &cks[0];
    if let Some((p, _)) = paths
        .iter()
        .zip(&cks)
        .find(|(_, c)| c.config_hash != first.config_hash)
    {
        return Err(Error::Input(format!(
            "{} has a different config hash from {}",
            p.display(),
            paths[0].display()
        )));
    }
    let stores: Vec<_> = cks.iter().map(|c| c.params.clone()).collect();
    let params = average_checkpoints(&stores, last)?;
    save_checkpoint(
        out,
        &Checkpoint {
            step: cks.last().map_or(0, |c| c.step),
            config_hash: first.config_hash.clone(),
            params,
            optimizer: None,
        },
    )
}

struct DecodeOpts<'a> {
    model: &'a Path,
    tokenizer: &'a Path,
    beam: Option<usize>,
    lm: Option<&'a Path>,
    lm_weight: Option<f64>,
    word_bonus: Option<f64>,
    common: &'a Common,
}

/// Runs `f` with a recognizer built from the checkpoint and decode settings.
fn with_recognizer<R>(
    o: &DecodeOpts<'_>,
    feat_dim: usize,
    f: impl FnOnce(&dyn Recognizer) -> Result<R>,
) -> Result<R> {
    let mut s = load_settings(
        o.common,
        &[
            ("decode.beam", some(&o.beam)),
            ("decode.ctc_beam", some(&o.beam)),
            ("decode.lm_weight", some(&o.lm_weight)),
            ("decode.word_bonus", some(&o.word_bonus)),
        ],
    )?;
    let tok = Tokenizer::load(o.tokenizer)?;
    fit_model(&mut s, &tok, feat_dim)?;
    let lm = o.lm.map(NGramLm::load).transpose()?;
    if let Some(lm) = &lm {
        if lm.vocab() != tok.vocab_size() {
            return Err(Error::Input(format!(
                "LM vocabulary {} does not match tokenizer {}",
                lm.vocab(),
                tok.vocab_size()
            )));
        }
    }
    let (model, _) = load_model(o.model, &s)?;
    match &model {
        Loaded::EncDec(m) => {
            if lm.is_some() {
                return Err(Error::Config("--lm applies to CTC models only".into()));
            }
            f(&EncDecRecognizer {
                model: m,
                tokenizer: &tok,
                beam: s.decode.beam,
                max_len_ratio: s.decode.max_len_ratio,
            })
        }
        Loaded::Ctc(m) => f(&CtcRecognizer {
            model: m,
            tokenizer: &tok,
            lm: lm.as_ref(),
            beam: s.decode.ctc_beam,
            weights: if lm.is_some() {
                FusionWeights {
                    lm_weight: s.decode.lm_weight,
                    word_bonus: s.decode.word_bonus,
                }
            } else {
                FusionWeights::default()
            },
        }),
    }
}

fn cmd_decode(o: &DecodeOpts<'_>, manifest: &Path, out: Option<&Path>) -> Result<()> {
    let corpus = read_any_manifest(manifest)?;
    let (hyps, failures) = with_recognizer(o, feature_dim(&corpus)?, |rec| Ok(transcribe_all(rec, &corpus)))?;
    for f in &failures {
        eprintln!("decode failed: {f}");
    }
    let mut text = String::new();
    for (u, h) in corpus.utterances.iter().zip(hyps) {
        text.push_str(&serde_json::to_string(&Hypothesis {
            id: u.id.clone(),
            text: h,
        })?);
        text.push('\n');
    }
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_eval(o: &DecodeOpts<'_>, tests: &[String]) -> Result<()> {
    let mut sets = Vec::new();
    for t in tests {
        let (name, path) = match t.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(t);
                let n = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| t.clone());
                (n, p)
            }
        };
        sets.push((name, read_manifest(&path, CorpusKind::Supervised)?));
    }
    let dim = feature_dim(&sets[0].1)?;
    let named: Vec<(&str, &Corpus)> = sets.iter().map(|(n, c)| (n.as_str(), c)).collect();
    let report = with_recognizer(o, dim, |rec| evaluate_sets(rec, &named))?;
    eprint!("{}", report.table());
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_gradcheck(seeds: u64) -> Result<bool> {
    let mut ok = true;
    println!("{:<22} {:>12}", "primitive", "max rel err");
    for c in primitive_suite(seeds)? {
        let pass = c.max_rel_error < GRADCHECK_PRIMITIVE_TOL;
        ok &= pass;
        println!(
            "{:<22} {:>12.3e} {}",
            c.name,
            c.max_rel_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    for seed in 0..seeds {
        let r = tiny_model_gradcheck(seed, 4)?;
        let pass = r.max_rel_error < GRADCHECK_MODEL_TOL;
        ok &= pass;
        println!(
            "{:<22} {:>12.3e} {} ({} coords)",
            format!("tiny model seed {seed}"),
            r.max_rel_error,
            if pass { "ok" } else { "FAIL" },
            r.coords_checked
        );
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            relatedness,
            common,
        } => cmd_synth(&out, seed, relatedness, &common)?,
        Command::TokenizerTrain {
            manifests,
            vocab_size,
            out,
        } => cmd_tokenizer_train(&manifests, vocab_size, &out)?,
        Command::LmTrain {
            tokenizer,
            manifests,
            order,
            out,
            common,
        } => cmd_lm_train(&tokenizer, &manifests, order, &out, &common)?,
        Command::Filter {
            weak,
            hyp_manifest,
            threshold,
            out,
            common,
        } => cmd_filter(&weak, &hyp_manifest, threshold, &out, &common)?,
        Command::Train {
            phase,
            mode,
            sup,
            weak,
            tokenizer,
            init,
            mixing_ratio,
            seed,
            updates,
            out,
            common,
        } => cmd_train(
            phase,
            mode,
            &sup,
            weak.as_deref(),
            &tokenizer,
            init.as_deref(),
            mixing_ratio,
            seed,
            updates,
            &out,
            &common,
        )?,
        Command::AverageCheckpoints {
            last,
            out,
            checkpoints,
        } => cmd_average(last, &out, &checkpoints)?,
        Command::Decode {
            model,
            tokenizer,
            manifest,
            beam,
            lm,
            lm_weight,
            word_bonus,
            out,
            common,
        } => {
            let o = DecodeOpts {
                model: &model,
                tokenizer: &tokenizer,
                beam,
                lm: lm.as_deref(),
                lm_weight,
                word_bonus,
                common: &common,
            };
            cmd_decode(&o, &manifest, out.as_deref())?
        }
        Command::Eval {
            model,
            tokenizer,
            tests,
            beam,
            lm,
            lm_weight,
            word_bonus,
            common,
        } => {
            let o = DecodeOpts {
                model: &model,
                tokenizer: &tokenizer,
                beam,
                lm: lm.as_deref(),
                lm_weight,
                word_bonus,
                common: &common,
            };
            cmd_eval(&o, &tests)?
        }
        Command::Gradcheck { seeds } => return cmd_gradcheck(seeds),
        Command::TrendReport { seed, preset, out } => {
            let preset = match preset {
                PresetArg::Quick => Preset::Quick,
                PresetArg::Full => Preset::Full,
            };
            let report = trend_report(preset, seed, &out)?;
            print!("{}", report.table());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
