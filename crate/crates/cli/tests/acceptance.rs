//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs the full trend experiment, so it takes tens of minutes:
//!
//! ```text
//! cargo test --release -p weaksup-cli --test acceptance
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weaksup_autograd::{primitive_suite, ParamStore, Tensor};
use weaksup_core::checks;
use weaksup_core::data::tokenizer::normalize;
use weaksup_core::data::{
    default_lambdas, filter_indices, Corpus, CorpusKind, MixingSampler, NGramLm, Source, Tokenizer,
    Utterance,
};
use weaksup_core::eval::wer;
use weaksup_core::experiments::{run_trend, Preset, TrendConfig, TrendReport};
use weaksup_core::train::average_checkpoints;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn ctc_oracle() -> Outcome {
    let t = Instant::now();
    let r = checks::ctc_oracle_equivalence(200, 1).expect("ctc oracle");
    let el = t.elapsed();
    outcome(
        r.max_abs_diff < 1e-6 && el < Duration::from_secs(10),
        format!(
            "max |Δ| {:.2e} over {} instances ({} infeasible), {}",
            r.max_abs_diff,
            r.instances,
            r.infeasible,
            secs(el)
        ),
    )
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let prims = primitive_suite(3).expect("primitive suite");
    let worst_prim = prims
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("nonempty");
    let model = (0..3)
        .map(|s| checks::tiny_model_gradcheck(s, usize::MAX).expect("gradcheck").max_rel_error)
        .fold(0.0f64, f64::max);
    let el = t.elapsed();
    outcome(
        worst_prim.max_rel_error < 1e-5 && model < 1e-4 && el < Duration::from_secs(60),
        format!(
            "{} primitives, worst {} {:.2e}; tiny model {:.2e}; {}",
            prims.len(),
            worst_prim.name,
            worst_prim.max_rel_error,
            model,
            secs(el)
        ),
    )
}

fn architecture() -> Outcome {
    let mut mha = 0.0f64;
    let mut ident = 0.0f64;
    let mut causal = 0.0f64;
    for seed in 0..5 {
        mha = mha.max(checks::mha_identity_vs_sa(seed).expect("mha"));
        ident = ident.max(checks::zeroed_block_identity(seed).expect("identity"));
        causal = causal.max(checks::decoder_causality(seed).expect("causality"));
    }
    let lengths: Vec<usize> = (4..120).collect();
    let taus = checks::encoder_lengths(&lengths).expect("lengths");
    let bad_tau = taus.iter().filter(|(t, tau)| *tau != t.div_ceil(4)).count();
    outcome(
        mha <= 1e-6 && ident == 0.0 && causal == 0.0 && bad_tau == 0,
        format!(
            "MHA vs SA {mha:.1e}, zeroed block {ident:.1e}, causality {causal:.1e}, {bad_tau} wrong encoder lengths of {}",
            taus.len()
        ),
    )
}

/// Minimum edit distance by memoized recursion over suffixes.
fn edit_oracle(r: &[u8], h: &[u8]) -> usize {
    fn go(r: &[u8], h: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if r.is_empty() {
            return h.len();
        }
        if h.is_empty() {
            return r.len();
        }
        if let Some(&v) = memo.get(&(r.len(), h.len())) {
            return v;
        }
        let sub = go(&r[1..], &h[1..], memo) + usize::from(r[0] != h[0]);
        let del = go(&r[1..], h, memo) + 1;
        let ins = go(r, &h[1..], memo) + 1;
        let v = sub.min(del).min(ins);
        memo.insert((r.len(), h.len()), v);
        v
    }
    go(r, h, &mut HashMap::new())
}

fn exact_utilities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut notes = Vec::new();

    let mut wer_bad = 0;
    for _ in 0..1000 {
        let r: Vec<u8> = (0..rng.random_range(1..10)).map(|_| rng.random_range(0..4)).collect();
        let h: Vec<u8> = (0..rng.random_range(0..10)).map(|_| rng.random_range(0..4)).collect();
        let text = |v: &[u8]| v.iter().map(|c| format!("w{c}")).collect::<Vec<_>>().join(" ");
        let (rate, counts) = wer(&text(&r), &text(&h)).expect("wer");
        let d = edit_oracle(&r, &h);
        if counts.errors() != d || rate != d as f64 / r.len() as f64 {
            wer_bad += 1;
        }
    }
    notes.push(format!("wer mismatches {wer_bad}/1000"));

    // Dyadic values keep every sum exact in f32.
    let store = |rng: &mut ChaCha8Rng| {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::from_fn(&[3, 4], |_| rng.random_range(-64..64) as f32 / 8.0)).expect("insert");
        s.insert("b", Tensor::from_fn(&[5], |_| rng.random_range(-64..64) as f32 / 8.0)).expect("insert");
        s
    };
    let mut avg_ok = true;
    for _ in 0..20 {
        let list: Vec<_> = (0..4).map(|_| store(&mut rng)).collect();
        let avg = average_checkpoints(&list, 4).expect("average");
        let mut shuffled = list.clone();
        shuffled.shuffle(&mut rng);
        avg_ok &= average_checkpoints(&shuffled, 4).expect("average") == avg;
        let doubled: Vec<_> = list
            .iter()
            .map(|s| {
                let mut d = s.clone();
                for id in d.ids().collect::<Vec<_>>() {
                    d.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 2.0);
                }
                d
            })
            .collect();
        let avg2 = average_checkpoints(&doubled, 4).expect("average");
        for ((_, _, x), (_, _, y)) in avg.iter().zip(avg2.iter()) {
            avg_ok &= x.data().iter().zip(y.data()).all(|(a, b)| 2.0 * a == *b);
        }
        let same = vec![list[0].clone(); 3];
        avg_ok &= average_checkpoints(&same, 3).expect("average") == list[0];
        avg_ok &= average_checkpoints(&list, 1).expect("average") == list[3];
    }
    notes.push(format!("averaging exact {avg_ok}"));

    let mut sampler = MixingSampler::new(500, 5000, 0.3, 8, 3).expect("sampler");
    let sup = (0..10_000)
        .filter(|_| sampler.next_batch().source == Source::Supervised)
        .count();
    let frac = sup as f64 / 10_000.0;
    let frac_ok = (frac - 0.3).abs() <= 0.02;
    notes.push(format!("sampler {frac:.4}"));

    let sentences: Vec<Vec<u32>> = (0..200)
        .map(|_| (0..rng.random_range(1..8)).map(|_| rng.random_range(4..20)).collect())
        .collect();
    let mut norm_err = 0.0f64;
    for order in 1..=5 {
        let lm = NGramLm::estimate(&sentences, order, 20, default_lambdas(order)).expect("lm");
        for _ in 0..50 {
            let hist: Vec<u32> = (0..rng.random_range(0..6)).map(|_| rng.random_range(1..20)).collect();
            let total: f64 = (0..20u32).map(|w| lm.prob(&hist, w)).sum();
            norm_err = norm_err.max((total - 1.0).abs());
        }
    }
    notes.push(format!("n-gram normalization {norm_err:.1e}"));

    let words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta"];
    let texts: Vec<String> = (0..100)
        .map(|_| {
            (0..rng.random_range(1..6))
                .map(|_| *words.choose(&mut rng).expect("nonempty"))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let tok = Tokenizer::train(&texts, 40).expect("tokenizer");
    let tok_bad = texts
        .iter()
        .filter(|t| tok.decode(&tok.encode(t)) != normalize(t).join(" "))
        .count();
    notes.push(format!("tokenizer mismatches {tok_bad}"));

    let utts: Vec<Utterance> = (0..200)
        .map(|i| Utterance {
            id: format!("u{i}"),
            features: Tensor::zeros(&[1, 1]),
            text: None,
            context: Some(
                (0..6)
                    .map(|_| *words.choose(&mut rng).expect("nonempty"))
                    .collect::<Vec<_>>()
                    .join(" "),
            ),
        })
        .collect();
    let hyps: HashMap<String, String> = utts
        .iter()
        .map(|u| {
            let h = (0..5)
                .map(|_| *words.choose(&mut rng).expect("nonempty"))
                .collect::<Vec<_>>()
                .join(" ");
            (u.id.clone(), h)
        })
        .collect();
    let weak = Corpus::new(CorpusKind::Weak, utts).expect("corpus");
    let mut mono = true;
    let mut prev = filter_indices(&weak, &hyps, 0);
    mono &= prev.len() == weak.len();
    for t in 1..8 {
        let cur = filter_indices(&weak, &hyps, t);
        mono &= cur.iter().all(|i| prev.contains(i));
        prev = cur;
    }
    notes.push(format!("filter monotone {mono}"));

    outcome(
        wer_bad == 0 && avg_ok && frac_ok && norm_err <= 1e-6 && tok_bad == 0 && mono,
        notes.join(", "),
    )
}

fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("read dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("prefix").to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).expect("read"));
            }
        }
    }
    out
}

fn determinism(tmp: &Path) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_weaksup");
    let mut runs = Vec::new();
    for k in 0..2 {
        let out = tmp.join(format!("trend-{k}"));
        let status = Command::new(bin)
            .args(["trend-report", "--seed", "7", "--out"])
            .arg(&out)
            .output()
            .expect("spawn weaksup");
        if !status.status.success() {
            return outcome(false, format!("run {k} failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        runs.push((files_under(&out), status.stdout));
    }
    let (a, b) = (&runs[0], &runs[1]);
    let csvs = a.0.keys().filter(|k| k.ends_with(".csv")).count();
    let same = a.0 == b.0 && a.1 == b.1;
    outcome(
        same && csvs > 0 && a.0.contains_key("report.json"),
        format!("{} files ({csvs} stats CSVs) and stdout identical: {same}", a.0.len()),
    )
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "CTC oracle equivalence", ctc_oracle()),
        (2, "gradient integrity", gradients()),
        (3, "architecture invariants", architecture()),
    ];

    let report: TrendReport =
        run_trend(&TrendConfig::preset(Preset::Full, 7), &tmp.path().join("full")).expect("trend run");
    // The weak-supervision comparison is the enc-dec path of the baseline and
    // weak arms over all seeds.
    let el = Duration::from_secs_f64(
        report
            .seeds
            .iter()
            .flat_map(|s| &s.arms)
            .filter(|a| a.name == "baseline" || a.name == "weak")
            .map(|a| a.enc_dec_seconds)
            .sum(),
    );
    eprint!("{}", report.table());
    let trend = |i: usize| {
        let c = &report.checks[i];
        let marks: String = c.per_seed.iter().map(|&b| if b { '+' } else { '-' }).collect();
        (c.holds, format!("[{marks}] {}", c.detail))
    };
    let (ok, d) = trend(0);
    results.push((
        4,
        "weak supervision helps",
        outcome(ok && el < Duration::from_secs(30 * 60), format!("{d}; baseline+weak enc-dec {}", secs(el))),
    ));
    let (ok, d) = trend(1);
    results.push((5, "relevance filtering helps", outcome(ok, d)));
    let (ok, d) = trend(2);
    results.push((6, "burn-in dominates mixing", outcome(ok, d)));
    let (ok, d) = trend(3);
    results.push((7, "fine-tuning helps, pre-fine-tune decodes", outcome(ok, d)));
    results.push((8, "exact utilities", exact_utilities()));
    results.push((9, "determinism", determinism(tmp.path())));

    let mut all = true;
    for (n, name, o) in &results {
        all &= o.pass;
        println!(
            "criterion {n} {}: {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
