use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sample() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/sample")
}

fn graphad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphad"))
        .args(args)
        .output()
        .expect("spawn graphad")
}

fn ok(args: &[&str]) -> Output {
    let out = graphad(args);
    assert!(
        out.status.success(),
        "graphad {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn quick_config(dir: &Path) -> PathBuf {
    let p = dir.join("model.json");
    fs::write(&p, r#"{"epochs": 2, "lr": 0.001, "d_a": 8}"#).unwrap();
    p
}

#[test]
fn unknown_subcommand_and_flag_exit_nonzero() {
    let out = graphad(&["frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = graphad(&["generate", "--out", "x", "--bogus"]);
    assert!(!out.status.success());
    let out = graphad(&["detect", "--dataset", "/nonexistent", "--model", "/nonexistent", "--out", "/tmp/x"]);
    assert!(!out.status.success());
}

#[test]
fn generate_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.json");
    fs::write(&cfg, r#"{"n_entities": 4, "n_days": 70}"#).unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["generate", "--config", s(&cfg), "--out", s(&a), "--seed", "5"]);
    ok(&["generate", "--config", s(&cfg), "--out", s(&b), "--seed", "5"]);
    ok(&["generate", "--config", s(&cfg), "--out", s(&c), "--seed", "6"]);
    for f in ["values.f32", "labels.csv", "static.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("values.f32")).unwrap(), fs::read(c.join("values.f32")).unwrap());
}

#[test]
fn detect_on_sample_writes_all_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let model = dir.path().join("model");
    let report = dir.path().join("report");
    ok(&["train", "--dataset", s(&sample()), "--config", s(&cfg), "--out", s(&model)]);
    let log = fs::read_to_string(model.join("log.csv")).unwrap();
    assert!(log.starts_with("epoch,mse,mi,recon,total,val_f1\n"));
    assert_eq!(log.lines().count(), 3);
    ok(&["detect", "--dataset", s(&sample()), "--model", s(&model), "--out", s(&report)]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(report.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["schema"], 1);
    for k in ["precision", "recall", "f1", "auc"] {
        assert!(m.get(k).is_some(), "missing {k}");
    }
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    assert!(csv.starts_with("entity_id,day,error,threshold,score,decision,label\n"));
}

#[test]
fn no_kdecom_ablation_checkpoint_has_no_decomposition_arrays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let out = dir.path().join("abl");
    ok(&[
        "ablate", "--dataset", s(&sample()), "--variant", "no-kdecom,full", "--config", s(&cfg), "--seeds", "1", "--out",
        s(&out),
    ]);
    let manifest = fs::read_to_string(out.join("no-kdecom/seed-0/manifest.json")).unwrap();
    assert!(!manifest.contains("kdecom."));
    let full = fs::read_to_string(out.join("full/seed-0/manifest.json")).unwrap();
    assert!(full.contains("kdecom.stable.l1.w"));
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 2);
    assert!(graphad(&["ablate", "--dataset", s(&sample()), "--variant", "no-such", "--out", s(&out)])
        .status
        .code()
        .is_some_and(|c| c != 0));
}

#[test]
fn bench_has_row_per_method_and_seed_plus_means() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.json");
    fs::write(&cfg, r#"{"graphad": {"epochs": 2, "lr": 0.001}, "ae": {"epochs": 3}}"#).unwrap();
    let table = dir.path().join("t.csv");
    ok(&[
        "bench", "--dataset", s(&sample()), "--methods", "graphad,ae", "--seeds", "2", "--config", s(&cfg), "--out",
        s(&table),
    ]);
    let text = fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,seed,precision,recall,f1,auc");
    let keys: Vec<String> = lines[1..].iter().map(|l| l.split(',').take(2).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(keys, ["graphad,0", "graphad,1", "graphad,mean", "ae,0", "ae,1", "ae,mean"]);
    assert!(!graphad(&["bench", "--dataset", s(&sample()), "--methods", "lstm", "--out", s(&table)])
        .status
        .success());
}

#[test]
fn inspect_graph_dumps_k_edges_per_node() {
    for (kind, nodes, k) in [("entity", 20, 1), ("temporal", 20, 1), ("attr", 8, 1)] {
        let out = ok(&["inspect-graph", "--dataset", s(&sample()), "--kind", kind, "--offset", "3"]);
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.starts_with("source,target\n"));
        assert_eq!(text.lines().count(), 1 + nodes * k, "{kind}");
    }
    assert!(!graphad(&["inspect-graph", "--dataset", s(&sample()), "--kind", "attr", "--entity", "99"])
        .status
        .success());
}
