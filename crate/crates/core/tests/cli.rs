use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bhg_core::corpus::{load_corpus, synth_corpus, SynthSpec};
use bhg_core::hetgraph::edge_count_oracle;
use bhg_core::model::{save_checkpoint, Model, ModelConfig};
use serde_json::Value;
use tempfile::TempDir;

fn bhg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bhg"))
        .args(args)
        .env("BHG_NUM_WORKERS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bhg(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn synth(tmp: &TempDir, name: &str, extra: &[&str]) -> PathBuf {
    let dir = tmp.path().join(name);
    let mut args = vec!["synth", "--out", s(&dir)];
    args.extend_from_slice(extra);
    ok(&args);
    dir
}

/// Run every subcommand into `root` from the same inputs.
fn pipeline(root: &Path, corpus: &Path, ckpt: &Path) {
    let c = s(corpus);
    let train = root.join("train");
    ok(&["train", "--corpus", c, "--seeds", "0,1", "--set", "epochs=2", "--set", "val_fraction=0.25", "--out", s(&train)]);
    let ckpt = if ckpt.exists() { ckpt.to_path_buf() } else { train.join("seed1/model.bhgc") };
    ok(&["eval", "--checkpoint", s(&ckpt), "--corpus", c, "--out", s(&root.join("eval"))]);
    ok(&["gradcheck", "--checkpoint", s(&ckpt), "--corpus", c, "--out", s(&root.join("gc"))]);
    ok(&["attn-stats", "--checkpoint", s(&ckpt), "--corpus", c, "--per-head", "--out", s(&root.join("attn"))]);
    ok(&["build-graph", "--corpus", c, "--conv", "conv0003", "--dump-graph", s(&root.join("graph.json")), "--out", s(&root.join("bg"))]);
}

#[test]
fn every_subcommand_is_bitwise_reproducible() {
    let tmp = TempDir::new().unwrap();
    let a = synth(&tmp, "a", &["--seed", "7"]);
    let b = synth(&tmp, "b", &["--seed", "7"]);
    assert_eq!(snapshot(&a), snapshot(&b));

    let (ra, rb) = (tmp.path().join("run_a"), tmp.path().join("run_b"));
    // Both runs read the first run's checkpoint, so recorded input paths match.
    let shared = ra.join("train/seed1/model.bhgc");
    pipeline(&ra, &a, &shared);
    pipeline(&rb, &a, &shared);
    let (sa, sb) = (snapshot(&ra), snapshot(&rb));
    assert!(sa.len() >= 15, "{:?}", sa.keys());
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{} differs between runs", k.display());
    }
    for sub in ["train", "eval", "gc", "attn", "bg"] {
        assert!(ra.join(sub).join("resolved_config.json").is_file(), "{sub}");
    }
    let agg = json(&ra.join("train/aggregate.json"));
    assert_eq!(agg["selection_metric"]["values"].as_array().unwrap().len(), 2);
    assert!(json(&ra.join("gc/gradcheck.json"))["pass"].as_bool().unwrap());
    let header = fs::read_to_string(ra.join("train/seed0/history.csv")).unwrap();
    assert_eq!(header.lines().count(), 3);
}

#[test]
fn overrides_and_config_files_reach_the_resolved_config() {
    let tmp = TempDir::new().unwrap();
    let corpus = synth(&tmp, "c", &["--set", "n_conversations=3", "--set", "d_h=16"]);
    assert_eq!(load_corpus(&corpus).unwrap().conversations.len(), 3);
    assert_eq!(json(&corpus.join("resolved_config.json"))["d_h"], 16);

    let cfg_file = tmp.path().join("cfg.json");
    fs::write(&cfg_file, r#"{"epochs": 1, "model": {"heads": 2}}"#).unwrap();
    let out = tmp.path().join("t");
    ok(&[
        "train", "--corpus", s(&corpus), "--config", s(&cfg_file), "--set", "model.layers=1", "--set", "val_fraction=0",
        "--seed", "9", "--out", s(&out),
    ]);
    let resolved = json(&out.join("resolved_config.json"));
    let t = &resolved["train"];
    assert_eq!(t["epochs"], 1);
    assert_eq!(t["model"]["heads"], 2);
    assert_eq!(t["model"]["layers"], 1);
    assert_eq!(t["seed"], 9);
    assert!(out.join("seed9/model.bhgc").is_file());
    assert_eq!(json(&out.join("seed9/train.json")), resolved["train"]);

    let bad = bhg(&["train", "--corpus", s(&corpus), "--set", "epochz=1", "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn cee_with_zero_alpha_trains() {
    let tmp = TempDir::new().unwrap();
    let corpus = synth(&tmp, "c", &["--set", "n_conversations=4"]);
    let out = tmp.path().join("t");
    ok(&[
        "train", "--corpus", s(&corpus), "--task", "cee", "--set", "alpha=0", "--set", "epochs=1", "--set",
        "val_fraction=0.25", "--out", s(&out),
    ]);
    let agg = json(&out.join("aggregate.json"));
    assert_eq!(agg["task"], "cee");
    let m = ok(&["eval", "--checkpoint", s(&out.join("seed0/model.bhgc")), "--corpus", s(&corpus), "--task", "cee", "--out", s(&tmp.path().join("e"))]);
    assert!(m.contains("pos_f1"));
}

#[test]
fn build_graph_reports_the_closed_form_count() {
    let tmp = TempDir::new().unwrap();
    let corpus = synth(&tmp, "c", &[]);
    let conv = load_corpus(&corpus).unwrap().conversations[2].clone();
    for (wf, wb) in [(5, 5), (0, 0), (1, 3)] {
        let stdout = ok(&[
            "build-graph", "--corpus", s(&corpus), "--conv", &conv.id, "--wf", &wf.to_string(), "--wb", &wb.to_string(),
            "--out", s(&tmp.path().join("bg")),
        ]);
        let want = edge_count_oracle(conv.len(), &conv.knowledge_counts(), wf, wb);
        assert!(stdout.contains(&format!("edges total: {want}\n")), "{stdout}");
        assert!(stdout.contains(&format!("edges expected: {want}\n")), "{stdout}");
    }
    let stdout = ok(&["build-graph", "--corpus", s(&corpus), "--conv", &conv.id, "--variant", "no_knowledge", "--out", s(&tmp.path().join("bg"))]);
    assert!(stdout.contains("edges  kf: 0\n") && stdout.contains("edges  kb: 0\n"), "{stdout}");
    assert!(!stdout.contains("edges expected"));
    ok(&["build-graph", "--corpus", s(&corpus), "--conv", &conv.id, "--variant", "no-forward", "--out", s(&tmp.path().join("bg"))]);
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope");
    let out = tmp.path().join("o");
    assert_eq!(bhg(&["eval", "--checkpoint", s(&missing), "--corpus", s(&missing), "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(bhg(&["build-graph", "--corpus", s(&missing), "--conv", "x"]).status.code(), Some(2));

    let corpus = synth(&tmp, "c", &[]);
    let ckpt = tmp.path().join("m.bhgc");
    let model = Model::for_corpus(&load_corpus(&corpus).unwrap(), &ModelConfig { heads: 2, layers: 1, ..ModelConfig::default() }, 0).unwrap();
    save_checkpoint(&model, &ckpt).unwrap();

    let three_class = synth(&tmp, "c3", &["--set", "n_classes=3"]);
    let narrow = synth(&tmp, "narrow", &["--set", "d_h=16"]);
    for other in [&three_class, &narrow] {
        let r = bhg(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(other), "--out", s(&out)]);
        assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(bhg(&["build-graph", "--corpus", s(&corpus), "--conv", "missing-id"]).status.code(), Some(3));

    let r = bhg(&["gradcheck", "--tolerance", "1e-15", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(4));
    assert!(!json(&out.join("gradcheck.json"))["pass"].as_bool().unwrap());
    assert_eq!(bhg(&["gradcheck", "--out", s(&out)]).status.code(), Some(0));
}

#[test]
fn untrained_model_is_near_chance_on_a_balanced_fixture() {
    let tmp = TempDir::new().unwrap();
    let spec = SynthSpec::separable(3);
    let corpus = synth_corpus(&spec).unwrap();
    let gold: Vec<usize> = corpus.conversations.iter().flat_map(|c| c.utterances.iter().map(|u| u.emotion.unwrap())).collect();
    let ones = gold.iter().filter(|&&y| y == 1).count() as f64 / gold.len() as f64;
    assert!((0.4..=0.6).contains(&ones), "{ones}");
    let dir = tmp.path().join("c");
    bhg_core::corpus::save_corpus(&corpus, &dir).unwrap();
    let ckpt = tmp.path().join("m.bhgc");
    save_checkpoint(&Model::for_corpus(&corpus, &ModelConfig::default(), 11).unwrap(), &ckpt).unwrap();
    let out = tmp.path().join("e");
    ok(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&dir), "--preset", "full", "--out", s(&out)]);
    let m = json(&out.join("metrics.json"));
    let macro_f1 = m["macro_f1"].as_f64().unwrap();
    assert!((0.3..=0.7).contains(&macro_f1), "{macro_f1}");
}
