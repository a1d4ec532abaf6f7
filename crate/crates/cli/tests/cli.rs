use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dgm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgm"))
        .args(args)
        .current_dir(dir)
        .env_remove("DGM_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SMALL_CONFIG: &str = "node_conv = \"sgcn\"\nstandardize = false\nepochs = 8\n\n[[layers]]\nk = 1\ngraph_width = 4\nnode_width = 8\ngraph_fn = \"identity\"\n\n[[layers]]\nk = 1\ngraph_width = 4\nnode_width = 8\ngraph_fn = \"edge_conv\"\n";

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL_CONFIG).unwrap();
    ok(&dgm(&["synth", "clusters", "--out", "d.csv", "--nodes", "60", "--seed", "4"], dir.path()));
    dir
}

#[test]
fn repeated_training_gives_byte_identical_reports() {
    let dir = setup();
    let p = dir.path();
    for out in ["a", "b"] {
        ok(&dgm(&["train", "--config", "c.toml", "--data", "d.csv", "--seed", "7", "--out", out], p));
    }
    let a = fs::read(p.join("a/report.json")).unwrap();
    assert_eq!(a, fs::read(p.join("b/report.json")).unwrap());
    assert_eq!(fs::read(p.join("a/model.ckpt")).unwrap(), fs::read(p.join("b/model.ckpt")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.contains("\"seed\": 7") && text.contains("\"accuracy\""), "{text}");

    let env_run = Command::new(env!("CARGO_BIN_EXE_dgm"))
        .args(["train", "--config", "c.toml", "--data", "d.csv", "--out", "c"])
        .current_dir(p)
        .env("DGM_SEED", "7")
        .output()
        .unwrap();
    ok(&env_run);
    assert_eq!(fs::read(p.join("c/report.json")).unwrap(), text.as_bytes());
}

#[test]
fn evaluation_of_saved_models() {
    let dir = setup();
    let p = dir.path();
    ok(&dgm(&["train", "--config", "c.toml", "--data", "d.csv", "--out", "m"], p));
    let report = ok(&dgm(&["eval", "--checkpoint", "m/model.ckpt", "--data", "d.csv"], p));
    assert!(report.contains("\"protocol\": \"transductive\""), "{report}");
    let trained = fs::read_to_string(p.join("m/report.json")).unwrap();
    let accuracy = |t: &str| t.lines().find(|l| l.contains("\"accuracy\"")).unwrap().trim().to_string();
    assert_eq!(accuracy(&report), accuracy(&trained));

    ok(&dgm(&["train", "--config", "c.toml", "--data", "d.csv", "--split", "inductive", "--out", "i"], p));
    ok(&dgm(
        &["eval", "--checkpoint", "i/model.ckpt", "--data", "d.csv", "--inductive", "--repeats", "3", "--report", "r.json"],
        p,
    ));
    let r = fs::read_to_string(p.join("r.json")).unwrap();
    assert!(r.contains("\"protocol\": \"inductive\""), "{r}");
}

#[test]
fn graph_export_writes_one_file_per_layer() {
    let dir = setup();
    let p = dir.path();
    ok(&dgm(&["train", "--config", "c.toml", "--data", "d.csv", "--out", "m"], p));
    ok(&dgm(&["export-graph", "--checkpoint", "m/model.ckpt", "--data", "d.csv", "--out", "g"], p));
    for l in 0..2 {
        let text = fs::read_to_string(p.join(format!("g/layer{l}.txt"))).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 60);
        let fields: Vec<&str> = lines[0].split_whitespace().collect();
        assert_eq!(fields.len(), 3);
        let prob: f64 = fields[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&prob));
    }
    ok(&dgm(&["export-graph", "--checkpoint", "m/model.ckpt", "--data", "d.csv", "--format", "dot", "--out", "g"], p));
    assert!(fs::read_to_string(p.join("g/layer1.dot")).unwrap().contains("->"));
}

#[test]
fn crossval_with_baseline() {
    let dir = setup();
    let p = dir.path();
    let out = ok(&dgm(
        &["crossval", "--config", "c.toml", "--data", "d.csv", "--folds", "3", "--epochs", "3", "--baseline"],
        p,
    ));
    assert!(out.contains("\"crossval\"") && out.contains("\"baseline_crossval\""), "{out}");
    assert_eq!(out.matches("\"fold_accuracy\"").count(), 2);
}

#[test]
fn segmentation_from_shape_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&dgm(&["synth", "shapes", "--out", "s", "--count", "5", "--points", "24"], p));
    assert_eq!(fs::read_dir(p.join("s")).unwrap().count(), 5);
    ok(&dgm(&["train", "--shapes", "s", "--epochs", "2", "--out", "m"], p));
    let report = fs::read_to_string(p.join("m/report.json")).unwrap();
    assert!(report.contains("\"mean_iou\""), "{report}");
    let eval = ok(&dgm(&["eval", "--checkpoint", "m/model.ckpt", "--shapes", "s", "--repeats", "2"], p));
    assert!(eval.contains("\"protocol\": \"segmentation\""));
}

#[test]
fn self_checks_pass() {
    let dir = tempfile::tempdir().unwrap();
    let grad = ok(&dgm(&["gradcheck"], dir.path()));
    assert!(grad.contains("dgm_stack") && grad.contains("max relative error"), "{grad}");
    let worst: f64 = grad
        .lines()
        .last()
        .unwrap()
        .split_whitespace()
        .nth(3)
        .unwrap()
        .parse()
        .unwrap();
    assert!(worst < 1e-4);
    let sample = ok(&dgm(&["sample-test", "--draws", "20000"], dir.path()));
    assert!(!sample.contains("FAILED"), "{sample}");
}

#[test]
fn bad_input_exits_with_configuration_code() {
    let dir = setup();
    let p = dir.path();
    let unknown = dgm(&["train", "--bogus"], p);
    assert_eq!(unknown.status.code(), Some(2));
    let missing = dgm(&["train", "--data", "nope.csv", "--out", "m"], p);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error"));
    fs::write(p.join("bad.toml"), "lambda = -1\n").unwrap();
    let bad = dgm(&["train", "--config", "bad.toml", "--data", "d.csv", "--out", "m"], p);
    assert_eq!(bad.status.code(), Some(2));
    fs::write(p.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let junk = dgm(&["eval", "--checkpoint", "junk.ckpt", "--data", "d.csv"], p);
    assert_eq!(junk.status.code(), Some(2));
}

#[test]
fn shipped_benchmark_config_trains() {
    let dir = setup();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    let config = config.to_str().unwrap();
    ok(&dgm(&["train", "--config", config, "--data", "d.csv", "--epochs", "3", "--out", "r"], dir.path()));
    let report = fs::read_to_string(dir.path().join("r/report.json")).unwrap();
    assert!(report.contains("\"node_conv\": \"sgcn\""), "{report}");
}
