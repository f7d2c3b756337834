use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to train in a few seconds
synth.n_sup = 12
synth.n_weak = 16
synth.n_dev = 3
synth.n_test = 3
synth.vocab_words = 12
model.model_dim = 16
model.heads = 2
model.ffn_dim = 32
model.enc_blocks = 1
model.dec_blocks = 1
model.dec_conv_layers = 1
model.dec_conv_channels = 8
model.conv_channels = 4,8
phases.burn_in_updates = 4
phases.main_updates = 4
phases.fine_tune_enc_dec_updates = 4
phases.fine_tune_ctc_updates = 4
phases.checkpoint_every = 2
phases.average_last = 2
train.batch_size = 4
decode.beam = 2
decode.ctc_beam = 2
";

fn weaksup(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weaksup"))
        .args(args)
        .output()
        .expect("spawn weaksup")
}

fn ok(args: &[&str]) -> Output {
    let out = weaksup(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let out = weaksup(&["gradcheck", "--bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = weaksup(&["no-such-command"]);
    assert!(!out.status.success());
}

#[test]
fn gradcheck_passes() {
    ok(&["gradcheck", "--seeds", "1"]);
}

#[test]
fn bad_setting_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = weaksup(&[
        "synth",
        "--out",
        s(dir.path()),
        "--set",
        "synth.no_such_key=1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

struct Pipeline {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Pipeline {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.conf");
        std::fs::write(&config, TINY).unwrap();
        Self {
            _dir: dir,
            root,
            config,
        }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn end_to_end_pipeline() {
    let t = Pipeline::new();
    let conf = s(&t.config).to_string();
    let data = t.p("data");
    let d = |f: &str| data.join(f);
    ok(&["synth", "--out", s(&data), "--seed", "3", "--config", &conf]);
    for f in ["sup.jsonl", "weak.jsonl", "dev.jsonl", "test-clean.jsonl", "test-noisy.jsonl", "test-extreme.jsonl"] {
        assert!(d(f).exists(), "{f}");
    }
    let tok = t.p("bpe.txt");
    ok(&[
        "tokenizer-train",
        "--manifest",
        s(&d("sup.jsonl")),
        "--manifest",
        s(&d("weak.jsonl")),
        "--vocab-size",
        "60",
        "--out",
        s(&tok),
    ]);
    let lm = t.p("lm.txt");
    ok(&[
        "lm-train",
        "--tokenizer",
        s(&tok),
        "--manifest",
        s(&d("sup.jsonl")),
        "--order",
        "3",
        "--out",
        s(&lm),
        "--config",
        &conf,
    ]);

    let run = t.p("run");
    let sup = d("sup.jsonl");
    let train = |extra: &[&str]| {
        let mut args = vec![
            "train",
            "--sup",
            s(&sup),
            "--tokenizer",
            s(&tok),
            "--out",
            s(&run),
            "--config",
            &conf,
        ];
        args.extend_from_slice(extra);
        ok(&args);
    };
    train(&["--phase", "burn-in"]);
    let burn = run.join("burn-in-final.ckpt");
    train(&[
        "--phase",
        "main",
        "--weak",
        s(&d("weak.jsonl")),
        "--mixing-ratio",
        "0.5",
        "--init",
        s(&burn),
    ]);
    let main = run.join("main-final.ckpt");
    train(&["--phase", "fine-tune", "--init", s(&main)]);
    train(&["--phase", "fine-tune", "--mode", "ctc", "--init", s(&main)]);
    for f in ["stats-burn-in.csv", "stats-main.csv", "stats-fine-tune.csv", "stats-ctc.csv"] {
        let csv = std::fs::read_to_string(run.join(f)).unwrap();
        assert!(csv.starts_with("step,phase,source,loss,grad_norm\n"), "{f}");
        assert_eq!(csv.lines().count(), 5, "{f}");
    }
    let stats = std::fs::read_to_string(run.join("stats-main.csv")).unwrap();
    assert!(stats.lines().skip(1).all(|l| l.contains(",main,")));

    let avg = t.p("avg.ckpt");
    ok(&[
        "average-checkpoints",
        "--last",
        "2",
        "--out",
        s(&avg),
        s(&run.join("main-000002.ckpt")),
        s(&run.join("main-000004.ckpt")),
    ]);
    let blob = |ckpt: &Path| std::fs::read(ckpt.with_extension("ckpt.bin")).unwrap();
    assert!(
        blob(&avg) == blob(&main),
        "averaging the same two checkpoints again reproduces main-final"
    );

    let hyps = t.p("hyps.jsonl");
    ok(&[
        "decode",
        "--model",
        s(&run.join("ctc-final.ckpt")),
        "--tokenizer",
        s(&tok),
        "--manifest",
        s(&d("weak.jsonl")),
        "--lm",
        s(&lm),
        "--lm-weight",
        "0.3",
        "--out",
        s(&hyps),
        "--config",
        &conf,
    ]);
    let lines = std::fs::read_to_string(&hyps).unwrap();
    assert_eq!(lines.lines().count(), 16);
    for l in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["id"].is_string() && v["text"].is_string());
    }

    let kept = d("weak-all.jsonl");
    ok(&[
        "filter",
        "--weak",
        s(&d("weak.jsonl")),
        "--hyp-manifest",
        s(&hyps),
        "--threshold",
        "0",
        "--out",
        s(&kept),
    ]);
    assert!(std::fs::read(&kept).unwrap() == std::fs::read(d("weak.jsonl")).unwrap());

    for (model, mode) in [("fine-tune-final.ckpt", "enc-dec"), ("ctc-final.ckpt", "ctc")] {
        let out = ok(&[
            "eval",
            "--model",
            s(&run.join(model)),
            "--tokenizer",
            s(&tok),
            "--test",
            &format!("clean={}", s(&d("test-clean.jsonl"))),
            "--test",
            &format!("noisy={}", s(&d("test-noisy.jsonl"))),
            "--config",
            &conf,
        ]);
        let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(report["decode_mode"].as_str().unwrap().starts_with(mode));
        let sets = report["sets"].as_array().unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0]["name"], "clean");
        for set in sets {
            let c = &set["counts"];
            let errors = c["substitutions"].as_u64().unwrap()
                + c["insertions"].as_u64().unwrap()
                + c["deletions"].as_u64().unwrap();
            let rate = errors as f64 / c["ref_words"].as_u64().unwrap() as f64;
            assert!((set["wer"].as_f64().unwrap() - rate).abs() < 1e-12);
        }
        assert!(String::from_utf8_lossy(&out.stderr).contains("WER%"));
    }
}

#[test]
fn flags_override_the_config_file() {
    let t = Pipeline::new();
    let conf = s(&t.config).to_string();
    let data = t.p("data");
    ok(&[
        "synth",
        "--out",
        s(&data),
        "--config",
        &conf,
        "--set",
        "synth.n_sup=5",
    ]);
    let sup = std::fs::read_to_string(data.join("sup.jsonl")).unwrap();
    assert_eq!(sup.lines().count(), 5);
}

#[test]
fn trend_report_has_the_comparison_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trend");
    ok(&["trend-report", "--seed", "3", "--out", s(&out)]);
    let table = std::fs::read_to_string(out.join("report.txt")).unwrap();
    for data in ["baseline", "weak", "weak-filtered"] {
        for model in ["enc-dec", "ctc"] {
            assert!(
                table
                    .lines()
                    .any(|l| l.split_whitespace().take(2).eq([data, model])),
                "{data} {model}"
            );
        }
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["checks"].as_array().unwrap().len(), 4);
    assert!(out.join("seed-3").join("baseline.csv").exists());
}
