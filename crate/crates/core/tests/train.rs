use proptest::prelude::*;
use weaksup_autograd::{ParamStore, Tensor};
use weaksup_core::data::{synth_corpus, Source, SynthConfig, Tokenizer};
use weaksup_core::model::{EncoderDecoder, ModelConfig};
use weaksup_core::train::*;
use weaksup_core::Error;

struct Setup {
    sup: Vec<Example>,
    weak: Vec<Example>,
    cfg: TrainConfig,
}

fn setup(seed: u64) -> Setup {
    let synth = SynthConfig {
        n_sup: 24,
        n_weak: 24,
        n_dev: 2,
        n_test: 2,
        vocab_words: 12,
        frames_per_token: 8,
        seed,
        ..SynthConfig::desk()
    };
    let c = synth_corpus(&synth).unwrap();
    let texts: Vec<&str> = c
        .sup
        .utterances
        .iter()
        .map(|u| u.text.as_deref().unwrap())
        .collect();
    let tok = Tokenizer::train(&texts, 60).unwrap();
    let mut model = ModelConfig::tiny(tok.vocab_size());
    model.feat_dim = synth.feat_dim;
    model.dropout = 0.1;
    let cfg = TrainConfig {
        model,
        phases: PhaseConfig {
            burn_in_updates: 3,
            main_updates: 7,
            fine_tune_enc_dec_updates: 4,
            fine_tune_ctc_updates: 4,
            mixing_ratio: 0.5,
            checkpoint_every: 2,
            average_last: 2,
        },
        batch_size: 3,
        seed,
        ..TrainConfig::desk()
    };
    Setup {
        sup: prepare(&c.sup, &tok),
        weak: prepare(&c.weak, &tok),
        cfg,
    }
}

fn store(values: &[f32]) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.insert(
        "a",
        Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
    )
    .unwrap();
    s.insert("b", Tensor::scalar(values.iter().sum())).unwrap();
    s
}

#[test]
fn average_examples() {
    let two = [store(&[0.0, 4.0]), store(&[2.0, 8.0])];
    let avg = average_checkpoints(&two, 20).unwrap();
    assert_eq!(avg.by_name("a").unwrap().data(), &[1.0, 6.0]);
    assert_eq!(average_checkpoints(&two, 1).unwrap(), two[1]);
    let same = vec![store(&[0.1, -0.7]); 5];
    assert_eq!(average_checkpoints(&same, 5).unwrap(), same[0]);
    assert!(average_checkpoints(&[], 3).is_err());
    let mut odd = store(&[1.0, 2.0]);
    odd.insert("c", Tensor::scalar(0.0)).unwrap();
    assert!(average_checkpoints(&[store(&[1.0, 2.0]), odd], 2).is_err());
    assert!(average_checkpoints(&[store(&[1.0, 2.0]), store(&[1.0])], 2).is_err());
}

proptest! {
    #[test]
    fn average_is_permutation_invariant(
        vals in proptest::collection::vec(proptest::collection::vec(-100f32..100.0, 3), 1..8),
        rot in 0usize..8,
        exp in -4i32..4,
    ) {
        let list: Vec<ParamStore<f32>> = vals.iter().map(|v| store(v)).collect();
        let k = list.len();
        let base = average_checkpoints(&list, k).unwrap();
        let mut rotated = list.clone();
        rotated.rotate_left(rot % k);
        rotated.reverse();
        prop_assert_eq!(&average_checkpoints(&rotated, k).unwrap(), &base);
        // Power-of-two scaling commutes with averaging.
        let s = 2f32.powi(exp);
        let scaled: Vec<ParamStore<f32>> =
            vals.iter().map(|v| store(&v.iter().map(|x| x * s).collect::<Vec<_>>())).collect();
        let avg_scaled = average_checkpoints(&scaled, k).unwrap();
        let a = avg_scaled.by_name("a").unwrap().data();
        let b = base.by_name("a").unwrap().data();
        for (x, y) in a.iter().zip(b) {
            prop_assert_eq!(*x, y * s);
        }
        // Only the last k entries count.
        let mut padded = vec![store(&[9.0, 9.0, 9.0])];
        padded.extend(list.clone());
        prop_assert_eq!(&average_checkpoints(&padded, k).unwrap(), &base);
        prop_assert_eq!(&average_checkpoints(&list, 1).unwrap(), list.last().unwrap());
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let s = setup(1);
    let dir = tempfile::tempdir().unwrap();
    let copy_dir = tempfile::tempdir().unwrap();
    let mut log = TrainLog::default();
    let mut saved = Vec::new();
    pretrain(&s.sup, &s.weak, &s.cfg, &mut log, |ck| {
        let p = dir.path().join(format!("main-{}.ckpt", ck.step));
        ck.save(&p)?;
        saved.push((p, ck.clone()));
        Ok(())
    })
    .unwrap();
    assert_eq!(saved.len(), 7 / 2);
    for (p, ck) in &saved {
        let back = Checkpoint::load(p).unwrap();
        assert_eq!(&back, ck);
        let again = copy_dir.path().join(p.file_name().unwrap());
        back.save(&again).unwrap();
        assert_eq!(std::fs::read(p).unwrap(), std::fs::read(&again).unwrap());
        let bin = |q: &std::path::Path| std::fs::read(q.with_extension("ckpt.bin")).unwrap();
        assert_eq!(bin(p), bin(&again));
    }
    let hash = config_hash(&s.cfg.model, Arch::EncDec);
    assert!(Checkpoint::load_expecting(&saved[0].0, &hash).is_ok());
    let other = config_hash(&s.cfg.model, Arch::Ctc { adapter: false });
    assert!(Checkpoint::load_expecting(&saved[0].0, &other).is_err());
    let text = std::fs::read_to_string(&saved[0].0).unwrap();
    assert!(text.starts_with("#checkpoint v1\nconfig "));
    assert!(text.contains("\ntensor opt.grad_sq."));
}

#[test]
fn pipeline_is_deterministic() {
    let s = setup(2);
    let run = || {
        let mut log = TrainLog::default();
        let m = pretrain(&s.sup, &s.weak, &s.cfg, &mut log, |_| Ok(())).unwrap();
        let ft = fine_tune_enc_dec(&m, &s.sup, &s.cfg, &mut log, |_| Ok(())).unwrap();
        let ctc = fine_tune_ctc(&m, &s.sup, &s.cfg, &mut log, |_| Ok(())).unwrap();
        (log.to_csv(), ft.params, ctc.params)
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert!(a.0.starts_with("step,phase,source,loss,grad_norm\n"));
    assert_eq!(a.0.lines().count(), 1 + 3 + 7 + 4 + 4);
}

#[test]
fn phase_bookkeeping() {
    let mut s = setup(3);
    s.cfg.phases.mixing_ratio = 0.0;
    let mut log = TrainLog::default();
    let mut taken = 0;
    pretrain(&s.sup, &s.weak, &s.cfg, &mut log, |_| {
        taken += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(taken, 7 / 2);
    let main: Vec<&StepStat> = log
        .stats
        .iter()
        .filter(|x| x.phase == Phase::Main)
        .collect();
    assert_eq!(main.len(), 7);
    assert!(main.iter().all(|x| x.source == Source::Weak));
    assert!(log
        .stats
        .iter()
        .filter(|x| x.phase == Phase::BurnIn)
        .all(|x| x.source == Source::Supervised));
    assert!(log
        .stats
        .iter()
        .all(|x| x.loss.is_finite() && x.grad_norm.is_finite()));
    let steps: Vec<usize> = log.stats.iter().map(|x| x.step).collect();
    assert_eq!(steps, (1..=10).collect::<Vec<_>>());
}

#[test]
fn zero_update_phases_leave_the_model_alone() {
    let mut s = setup(4);
    s.cfg.phases.burn_in_updates = 0;
    s.cfg.phases.fine_tune_enc_dec_updates = 0;
    let mut m = EncoderDecoder::new(s.cfg.model.clone(), 5).unwrap();
    let before = m.params.clone();
    let mut log = TrainLog::default();
    run_burn_in(&mut m, &s.sup, &s.cfg, &mut log).unwrap();
    assert_eq!(m.params, before);
    let ft = fine_tune_enc_dec(&m, &s.sup, &s.cfg, &mut log, |_| Ok(())).unwrap();
    assert_eq!(ft.params, before);
    assert!(log.stats.is_empty());
}

#[test]
fn supervised_data_only_matters_in_fine_tune_without_burn_in_or_mixing() {
    let mut s = setup(5);
    s.cfg.phases.burn_in_updates = 0;
    s.cfg.phases.mixing_ratio = 0.0;
    let other = setup(6).sup;
    let mut log = TrainLog::default();
    let a = pretrain(&s.sup, &s.weak, &s.cfg, &mut log, |_| Ok(())).unwrap();
    let b = pretrain(&other, &s.weak, &s.cfg, &mut log, |_| Ok(())).unwrap();
    assert_eq!(a.params, b.params);
    let fa = fine_tune_enc_dec(&a, &s.sup, &s.cfg, &mut log, |_| Ok(())).unwrap();
    let fb = fine_tune_enc_dec(&b, &other, &s.cfg, &mut log, |_| Ok(())).unwrap();
    assert_ne!(fa.params, fb.params);
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let s = setup(7);
    let mut m = EncoderDecoder::new(s.cfg.model.clone(), 0).unwrap();
    let id = m.params.id("dec.out.weight").unwrap();
    m.params.get_mut(id).data_mut()[0] = f32::NAN;
    let mut log = TrainLog::default();
    log.step = 41;
    let err = run_burn_in(&mut m, &s.sup, &s.cfg, &mut log).unwrap_err();
    assert!(
        matches!(
            err,
            Error::Divergence {
                phase: "burn-in",
                step: 42,
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn ctc_fine_tune_skips_unalignable_utterances() {
    let s = setup(8);
    let mut sup = s.sup.clone();
    // 8 frames give two encoder steps; five labels cannot fit.
    for ex in &mut sup {
        ex.features = Tensor::zeros(&[8, ex.features.cols()]);
        ex.tokens = vec![5, 6, 7, 8, 9];
    }
    sup[0].features = Tensor::zeros(&[40, sup[0].features.cols()]);
    sup[0].tokens = vec![5, 6];
    let mut cfg = s.cfg.clone();
    cfg.batch_size = sup.len();
    let mut log = TrainLog::default();
    let m = EncoderDecoder::new(cfg.model.clone(), 0).unwrap();
    fine_tune_ctc(&m, &sup, &cfg, &mut log, |_| Ok(())).unwrap();
    assert_eq!(
        log.skipped,
        (sup.len() - 1) * cfg.phases.fine_tune_ctc_updates
    );
    assert_eq!(log.stats.len(), cfg.phases.fine_tune_ctc_updates);
}

#[test]
fn rejects_bad_configs() {
    let mut s = setup(9);
    s.cfg.phases.mixing_ratio = 1.5;
    let mut log = TrainLog::default();
    assert!(pretrain(&s.sup, &s.weak, &s.cfg, &mut log, |_| Ok(())).is_err());
    let mut s = setup(9);
    s.cfg.phases.burn_in_updates = 1;
    assert!(pretrain(&[], &s.weak, &s.cfg, &mut log, |_| Ok(())).is_err());
}

#[test]
fn desk_burn_in_drops_below_uniform_loss() {
    let synth = SynthConfig {
        n_sup: 100,
        n_weak: 0,
        n_dev: 1,
        n_test: 1,
        vocab_words: 40,
        frames_per_token: 8,
        ..SynthConfig::desk()
    };
    let c = synth_corpus(&synth).unwrap();
    let texts: Vec<&str> = c
        .sup
        .utterances
        .iter()
        .map(|u| u.text.as_deref().unwrap())
        .collect();
    let tok = Tokenizer::train(&texts, 200).unwrap();
    let mut cfg = TrainConfig::desk();
    cfg.model.vocab_size = tok.vocab_size();
    let sup = prepare(&c.sup, &tok);
    let mut model = EncoderDecoder::new(cfg.model.clone(), 1).unwrap();
    let mut log = TrainLog::default();
    run_burn_in(&mut model, &sup, &cfg, &mut log).unwrap();
    assert_eq!(log.stats.len(), cfg.phases.burn_in_updates);
    let first = log.stats[0].loss;
    let (_, last) = log.loss_ends(Phase::BurnIn, 20).unwrap();
    let uniform = (tok.vocab_size() as f64).ln();
    assert!(first > 0.8 * uniform, "first {first} vs ln V {uniform}");
    assert!(last < uniform, "last {last} vs ln V {uniform}");
}
