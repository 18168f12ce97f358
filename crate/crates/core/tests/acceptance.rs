//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints its own PASS/FAIL line even when all of them pass.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::oracle::{PAIRS, CORPUS_BLEU_ALL};
use common::*;
use mergecheck::audit::{
    classify_checkpoint, default_hypotheses, infer_mix_weights, verify_merge, Tolerances, Verdict,
};
use mergecheck::chat_template::{contains_think_open, strip_think, THINK_CLOSE, THINK_OPEN};
use mergecheck::guard::{fingerprint, lint_templates, Finding};
use mergecheck::lora::apply_merge;
use mergecheck::tensor_store::{StoreError, Tensor, TensorStore};
use mergecheck::text_eval::{corpus_bleu, leakage_audit, rouge_l, rouge_n};
use rand::seq::SliceRandom;
use rand::Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !($cond) {
            return Err(format!($($msg)+));
        }
    };
}

fn timed(limit: Duration, f: impl FnOnce() -> Check) -> Check {
    let start = Instant::now();
    let detail = f()?;
    let elapsed = start.elapsed();
    ensure!(elapsed < limit, "took {elapsed:?}, limit {limit:?}");
    Ok(format!("{detail}; {:.3}s", elapsed.as_secs_f64()))
}

fn merge_round_trip() -> Check {
    timed(Duration::from_secs(1), || {
        let mut r = rng(1);
        let layout = random_layout(&mut r, 4);
        let base = random_base(&mut r, &layout);
        ensure!(base.len() == 6, "base has {} tensors", base.len());
        let pt = random_adapter(&mut r, "pt", &layout, 2);
        let sft = random_adapter(&mut r, "sft", &layout, 2);
        let entries = [(&pt, 0.3), (&sft, 0.7)];
        let spec = spec(&entries, "pt0.3-sft0.7");
        let merged = apply_merge(&base, &spec).map_err(|e| e.to_string())?;
        let report = verify_merge(&base, &spec, &merged, Tolerances::F32).map_err(|e| e.to_string())?;
        ensure!(report.verdict == Verdict::Pass, "verify failed: {:?}", report.failing_tensors);
        let err = max_abs_diff(&merged, &oracle_merge(&base, &entries));
        ensure!(err <= 1e-6, "max abs error vs scalar oracle {err:e}");
        Ok(format!("max_abs_err vs oracle {err:.2e}"))
    })
}

fn attribution() -> Check {
    timed(Duration::from_secs(10), || {
        let mut worst_w = 0.0f64;
        let mut worst_res = 0.0f64;
        let mut correct = 0;
        let fixtures = 100;
        for seed in 0..fixtures {
            let mut r = rng(1000 + seed);
            let n_targets = r.gen_range(2..=4);
            let layout = random_layout(&mut r, n_targets);
            let base = random_base(&mut r, &layout);
            let n_adapters = r.gen_range(2..=3);
            let adapters: Vec<_> = ["pt", "sft", "dpo"][..n_adapters]
                .iter()
                .map(|name| {
                    let rank = r.gen_range(1..=4);
                    random_adapter(&mut r, name, &layout, rank)
                })
                .collect();
            let true_w: Vec<f64> = (0..n_adapters).map(|_| r.gen_range(-0.5..1.5)).collect();
            let entries: Vec<_> = adapters.iter().zip(&true_w).map(|(a, w)| (a, *w)).collect();
            let declared = spec(&entries, "declared");

            // Every fifth fixture is the misattribution case: the file on
            // disk is SFT alone although the declared spec says otherwise.
            let (candidate, truth) = if seed % 5 == 0 {
                (oracle_store(&base, &[(&adapters[1], 1.0)]), "sft-only".to_string())
            } else {
                let inferred = infer_mix_weights(&base, &adapters, &oracle_store(&base, &entries))
                    .map_err(|e| e.to_string())?;
                for (a, w) in adapters.iter().zip(&true_w) {
                    worst_w = worst_w.max((inferred.inferred_weights[&a.name] - w).abs());
                }
                worst_res = worst_res.max(inferred.residual_rms);
                (oracle_store(&base, &entries), "declared".to_string())
            };
            let hyps = default_hypotheses(&adapters, Some(&declared));
            let report = classify_checkpoint(&base, &adapters, &candidate, &hyps).map_err(|e| e.to_string())?;
            if report.best_hypothesis.as_deref() == Some(truth.as_str()) {
                correct += 1;
            }
        }
        ensure!(worst_w <= 1e-4, "worst weight error {worst_w:e}");
        ensure!(worst_res <= 1e-6, "worst residual rms {worst_res:e}");
        ensure!(correct == fixtures, "classified {correct}/{fixtures}");
        Ok(format!(
            "{correct}/{fixtures} classified; worst |Δw| {worst_w:.2e}; worst residual {worst_res:.2e}"
        ))
    })
}

fn tamper_localization() -> Check {
    for seed in 0..20 {
        let mut r = rng(2000 + seed);
        let layout = random_layout(&mut r, 4);
        let base = random_base(&mut r, &layout);
        let pt = random_adapter(&mut r, "pt", &layout, 2);
        let sft = random_adapter(&mut r, "sft", &layout, 2);
        let spec = spec(&[(&pt, 0.3), (&sft, 0.7)], "mix");
        let mut merged = apply_merge(&base, &spec).map_err(|e| e.to_string())?;

        let names: Vec<String> = merged.names().map(str::to_string).collect();
        let victim = names.choose(&mut r).unwrap().clone();
        let t = merged.get(&victim).unwrap();
        let mut vals = t.to_f32_vec();
        let idx = r.gen_range(0..vals.len());
        vals[idx] += 0.1;
        let tampered = Tensor::from_f32(t.shape().to_vec(), &vals);
        merged.insert(victim.clone(), tampered).unwrap();

        let report = verify_merge(&base, &spec, &merged, Tolerances::F32).map_err(|e| e.to_string())?;
        ensure!(report.verdict == Verdict::Fail, "seed {seed}: tamper of {victim} not detected");
        ensure!(
            report.failing_tensors == vec![victim.clone()],
            "seed {seed}: expected [{victim}], got {:?}",
            report.failing_tensors
        );
    }
    Ok("20/20 tampered tensors localized".into())
}

fn metrics_vs_oracle() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-6;
    let mut worst = 0.0f64;
    for p in PAIRS {
        let bleu = corpus_bleu(&[(p.hyp, p.reference)], false).map_err(|e| e.to_string())?.score;
        ensure!(close(bleu, p.bleu), "BLEU {:?}: {bleu} vs {}", p.hyp, p.bleu);
        worst = worst.max((bleu - p.bleu).abs());
        for (got, want, what) in [
            (rouge_n(p.hyp, p.reference, 1), p.rouge1, "ROUGE-1"),
            (rouge_n(p.hyp, p.reference, 2), p.rouge2, "ROUGE-2"),
            (rouge_l(p.hyp, p.reference), p.rouge_l, "ROUGE-L"),
        ] {
            for (g, w) in [got.precision, got.recall, got.f1].into_iter().zip(want) {
                ensure!(close(g, w), "{what} {:?}: {g} vs {w}", p.hyp);
                worst = worst.max((g - w).abs());
            }
        }
    }
    let all: Vec<_> = PAIRS.iter().map(|p| (p.hyp, p.reference)).collect();
    let corpus = corpus_bleu(&all, false).map_err(|e| e.to_string())?.score;
    ensure!(close(corpus, CORPUS_BLEU_ALL), "corpus BLEU {corpus} vs {CORPUS_BLEU_ALL}");

    let refs: Vec<_> = PAIRS.iter().map(|p| (p.reference, p.reference)).collect();
    let identical = corpus_bleu(&refs, false).map_err(|e| e.to_string())?.score;
    ensure!(identical == 100.0, "identical corpus BLEU {identical}");
    let disjoint = [("alpha beta gamma delta epsilon", "one two three four five")];
    let d = corpus_bleu(&disjoint, false).map_err(|e| e.to_string())?.score;
    let (h, rf) = disjoint[0];
    ensure!(
        d == 0.0 && rouge_n(h, rf, 1).f1 == 0.0 && rouge_n(h, rf, 2).f1 == 0.0 && rouge_l(h, rf).f1 == 0.0,
        "disjoint corpus scored nonzero"
    );
    Ok(format!("{} pairs, worst deviation {worst:.1e}", PAIRS.len()))
}

fn think_fixture() -> Vec<(String, bool)> {
    let mut gens = Vec::new();
    for i in 0..10 {
        gens.push((format!("<think>step {i}: weigh the options\n</think>\n\nAnswer {i}."), true));
        gens.push((format!("Plain answer number {i}, no reasoning shown."), false));
    }
    for i in 0..5 {
        gens.push((format!("<think>ran out of tokens while thinking about case {i}"), true));
        gens.push((format!("  Sure. <think>late tag {i}</think> trailing"), true));
    }
    gens
}

fn think_handling() -> Check {
    let gens = think_fixture();
    ensure!(gens.len() == 30, "fixture has {} generations", gens.len());
    let mut wellformed = 0;
    for (text, _) in &gens {
        let s = strip_think(text);
        if !s.wellformed {
            ensure!(s.answer.is_empty(), "malformed {text:?} kept an answer");
            continue;
        }
        wellformed += 1;
        let rebuilt = if text.trim_start().starts_with(THINK_OPEN) {
            format!("{THINK_OPEN}{}{THINK_CLOSE}{}", s.thought, s.answer)
        } else {
            ensure!(s.thought.is_empty() && s.answer == *text, "untagged {text:?} altered");
            s.answer.clone()
        };
        ensure!(strip_think(&rebuilt) == s, "reconstruction failed for {text:?}");
        if text.trim_start().starts_with(THINK_OPEN) {
            // Only whitespace may disappear between the tags and the answer.
            let head = format!("{THINK_OPEN}{}{THINK_CLOSE}", s.thought);
            let rest = text.trim_start().strip_prefix(head.as_str()).ok_or("thought not verbatim")?;
            ensure!(rest.trim_start() == s.answer, "answer of {text:?} lost characters");
        }
    }
    let expected: usize = gens.iter().filter(|(_, has)| *has).count();
    let texts: Vec<&str> = gens.iter().map(|(t, _)| t.as_str()).collect();
    let findings = lint_templates("qwen3_nothink", "qwen3_nothink", &texts);
    ensure!(
        findings == vec![Finding::ThinkLeakage { count: expected, sampled: 30 }],
        "lint returned {findings:?}"
    );
    for (text, has) in &gens {
        let flagged = !lint_templates("qwen3_nothink", "qwen3_nothink", &[text])[0].is_clean();
        ensure!(flagged == *has && contains_think_open(text) == *has, "wrong flag for {text:?}");
    }
    Ok(format!("{wellformed} well-formed reconstructed; {expected}/30 flagged"))
}

const HEX_FIXTURE: &str = "36000000000000007b2278223a7b226474797065223a22463332222c227368617065223a5b325d2c22646174615f6f666673657473223a5b302c385d7d7d0000803f00000040";

fn container_format() -> Check {
    for seed in 0..50 {
        let store = random_store(&mut rng(3000 + seed));
        let bytes = store.to_bytes();
        let back = TensorStore::from_bytes(&bytes).map_err(|e| format!("seed {seed}: {e}"))?;
        ensure!(back == store && back.to_bytes() == bytes, "seed {seed}: round trip differs");
    }

    let bytes = hex::decode(HEX_FIXTURE).unwrap();
    let store = TensorStore::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let x = store.get("x").ok_or("fixture tensor x missing")?;
    ensure!(x.shape() == [2] && x.to_f32_vec() == vec![1.0, 2.0], "fixture parsed to {x:?}");
    ensure!(x.data() == [0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40], "fixture bytes differ");
    ensure!(store.to_bytes() == bytes, "fixture does not re-serialize identically");

    let overlap = raw_store(r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#, 8);
    ensure!(
        matches!(TensorStore::from_bytes(&overlap), Err(StoreError::OverlappingOffsets { .. })),
        "overlap not rejected"
    );
    let truncated = raw_store(r#"{"a":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}}"#, 10);
    ensure!(
        matches!(TensorStore::from_bytes(&truncated), Err(StoreError::TruncatedData { expected: 16, actual: 10 })),
        "truncation not rejected"
    );
    Ok("50 random round trips; hex fixture; overlap/truncation errors".into())
}

fn raw_store(header: &str, data_len: usize) -> Vec<u8> {
    let mut out = (header.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(header.as_bytes());
    out.resize(out.len() + data_len, 0);
    out
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mergecheck"));
    c.env("SOURCE_DATE_EPOCH", "1700000000").env_remove("MERGECHECK_TOLERANCE");
    c
}

fn run_bin(args: &[&str], cwd: &Path) -> (i32, Vec<u8>) {
    let out = bin().args(args).current_dir(cwd).output().expect("spawn mergecheck");
    (out.status.code().unwrap_or(-1), out.stdout)
}

fn pipeline_guard() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    write_cli_fixture(dir, 7, (0.3, 0.7), "m1");
    write_spec(dir, "spec2.json", (0.5, 0.5), "m2");
    let merge = |spec: &str| run_bin(&["merge", "--base", "base.safetensors", "--spec", spec, "--out", "export"], dir);

    let (code, _) = merge("spec.json");
    ensure!(code == 0, "first merge exited {code}");
    let before = snapshot(&dir.join("export"));
    let (code, _) = merge("spec.json");
    ensure!(code == 0, "matching-manifest re-merge exited {code}");
    ensure!(snapshot(&dir.join("export")) == before, "matching re-merge changed the export");
    let (code, _) = merge("spec2.json");
    ensure!(code == 2, "overwrite under a new manifest exited {code}");
    ensure!(snapshot(&dir.join("export")) == before, "refused merge still wrote files");

    for seed in 0..50 {
        let store = random_store(&mut rng(4000 + seed));
        let mut entries: Vec<(String, Tensor)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        entries.shuffle(&mut rng(5000 + seed));
        let mut shuffled = TensorStore::new();
        for (k, v) in store.metadata() {
            shuffled.metadata_mut().insert(k.clone(), v.clone());
        }
        for (n, t) in entries {
            shuffled.insert(n, t).unwrap();
        }
        ensure!(fingerprint(&shuffled) == fingerprint(&store), "seed {seed}: fingerprint depends on order");
    }
    Ok("overwrite refused (exit 2), rerun accepted (exit 0), 50 order-independent fingerprints".into())
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    if let Ok(rd) = fs::read_dir(dir) {
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                for (k, v) in snapshot(&p) {
                    out.insert(format!("{}/{k}", e.file_name().to_string_lossy()), v);
                }
            } else {
                out.insert(e.file_name().to_string_lossy().into_owned(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn leakage() -> Check {
    let train = [
        "patients with persistent cough for more than three weeks should be evaluated for tuberculosis with a chest radiograph and sputum testing",
        "drink plenty of fluids and rest when you have a mild viral infection",
    ];
    let span = "persistent cough for more than three weeks should be evaluated for tuberculosis with"; // 13 tokens
    ensure!(mergecheck::text_eval::tokenize(span).len() == 13, "planted span is not 13 tokens");
    let planted = format!("my grandfather has {span} what else should we do");
    let eval = [planted.as_str(), "how do i treat a sprained ankle at home"];
    let r = leakage_audit(&train, &eval, 13).map_err(|e| e.to_string())?;
    ensure!(r.contaminated_eval == 1 && r.exact_dups == 0, "planted span: {r:?}");

    let copy = ["Drink plenty of fluids, and rest when you have a mild viral infection!"];
    let r = leakage_audit(&train, &copy, 13).map_err(|e| e.to_string())?;
    ensure!(r.exact_dups == 1 && r.contaminated_eval == 1, "verbatim copy: {r:?}");

    let r = leakage_audit(&train, &train, 13).map_err(|e| e.to_string())?;
    ensure!(r.contaminated_eval == train.len(), "self-audit flagged {}/{}", r.contaminated_eval, train.len());
    Ok("planted span contaminated=1 dups=0; verbatim dups=1; self-audit 100%".into())
}

/// Runs a scripted CLI session in `dir` and returns every artifact plus the
/// stdout of each command.
fn cli_session(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    write_cli_fixture(dir, 11, (0.3, 0.7), "pt0.3-sft0.7");
    fs::write(
        dir.join("gen.jsonl"),
        "{\"id\":\"q1\",\"prompt\":\"p\",\"generation\":\"<think>hm</think> the cat sat on the mat\",\"reference\":\"the cat sat on a mat\"}\n\
         {\"id\":\"q2\",\"prompt\":\"p\",\"generation\":\"I cannot help with that.\",\"reference\":\"rest and fluids\"}\n",
    )
    .unwrap();
    fs::write(dir.join("train.txt"), "rest and drink fluids when you have a cold\n").unwrap();
    fs::write(dir.join("conv.jsonl"), "[{\"role\":\"user\",\"content\":\"hi\"}]\n").unwrap();
    fs::write(dir.join("log.jsonl"), "{\"epoch\":1.0,\"loss\":2.5}\n{\"epoch\":1.0,\"eval_loss\":2.4}\n").unwrap();

    let script: &[(&[&str], i32)] = &[
        (&["merge", "--base", "base.safetensors", "--spec", "spec.json", "--out", "export", "--json"], 0),
        (&["verify", "--base", "base.safetensors", "--spec", "spec.json", "--candidate", "export/model.safetensors", "--json"], 0),
        (&["attribute", "--base", "base.safetensors", "--spec", "spec.json", "--candidate", "export/model.safetensors", "--json"], 0),
        (&["fingerprint", "export/model.safetensors", "--json"], 0),
        (&["lint", "--train-template", "qwen3_nothink", "--eval-template", "qwen3_nothink", "--generations", "gen.jsonl", "--json"], 2),
        (&["eval", "--records", "gen.jsonl", "--refusal", "--out", "report.json"], 0),
        (&["report", "--input", "report.json"], 0),
        (&["leak-audit", "--train", "train.txt", "--eval", "gen.jsonl", "--n", "3", "--json"], 0),
        (&["ingest-log", "--stage", "PT", "log.jsonl", "--json"], 0),
        (&["render", "--messages", "conv.jsonl", "--template", "qwen3_nothink", "--out", "prompts.jsonl"], 0),
    ];
    let mut artifacts = BTreeMap::new();
    for (i, (args, want)) in script.iter().enumerate() {
        let (code, stdout) = run_bin(args, dir);
        if code != *want {
            return Err(format!("`mergecheck {}` exited {code}, expected {want}", args.join(" ")));
        }
        artifacts.insert(format!("stdout.{i:02}.{}", args[0]), stdout);
    }
    artifacts.extend(snapshot(dir));
    Ok(artifacts)
}

fn determinism() -> Check {
    timed(Duration::from_secs(60), || {
        let a = tempfile::tempdir().map_err(|e| e.to_string())?;
        let b = tempfile::tempdir().map_err(|e| e.to_string())?;
        let first = cli_session(a.path())?;
        let second = cli_session(b.path())?;
        ensure!(
            first.keys().eq(second.keys()),
            "artifact sets differ: {:?} vs {:?}",
            first.keys().collect::<Vec<_>>(),
            second.keys().collect::<Vec<_>>()
        );
        for (k, v) in &first {
            ensure!(second[k] == *v, "artifact {k} differs between runs");
        }
        Ok(format!("{} artifacts byte-identical across two runs", first.len()))
    })
}

fn main() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("merge round trip", merge_round_trip),
        ("attribution", attribution),
        ("tamper localization", tamper_localization),
        ("metrics vs oracle", metrics_vs_oracle),
        ("think-tag handling", think_handling),
        ("container format", container_format),
        ("pipeline guard", pipeline_guard),
        ("leakage audit", leakage),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
