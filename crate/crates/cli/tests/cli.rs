use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sta_core::bench::generate_corpus;
use sta_core::io::save_png;
use sta_core::keygen::load_registry;

fn sta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sta")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    registry: PathBuf,
    clean: PathBuf,
    root: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let registry = root.join("reg.json");
    let out = sta(&["keygen", "--users", "3", "--bits", "100", "--seed", "1", "-o", path_str(&registry)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let clean = root.join("clean.png");
    save_png(&clean, &generate_corpus(1, 64, 5).unwrap()[0]).unwrap();
    Fixture { _dir: dir, registry, clean, root }
}

#[test]
fn keygen_writes_a_valid_registry() {
    let f = fixture();
    let reg = load_registry(&f.registry).unwrap();
    assert_eq!(reg.len(), 3);
    assert_eq!(reg.n_bits, 100);
    assert_eq!(reg.users[0].secret.image_shape, (64, 64, 3));
    let raw: Value = serde_json::from_str(&std::fs::read_to_string(&f.registry).unwrap()).unwrap();
    assert!(raw["users"][0]["watermark"].as_str().unwrap().chars().all(|c| c == '0' || c == '1'));
}

#[test]
fn embed_then_extract_and_attribute() {
    let f = fixture();
    let marked = f.root.join("marked.png");
    let report = f.root.join("report.json");
    let reg = path_str(&f.registry);
    let out = sta(&[
        "embed", "--registry", reg, "--user", "user-1", "--image", path_str(&f.clean), "-o", path_str(&marked),
        "--report", path_str(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["success"], Value::Bool(true));

    let out = sta(&["extract", "--registry", reg, "--user", "user-1", "--image", path_str(&marked)]);
    assert!(out.status.success());
    let expected = load_registry(&f.registry).unwrap().users[1].watermark.to_string();
    assert_eq!(stdout(&out).trim(), expected);

    let out = sta(&["attribute", "--registry", reg, "--image", path_str(&marked)]);
    let res: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(res["result"]["matched_user"], "user-1");
    assert_eq!(res["result"]["distance"], 0);

    let out = sta(&["certify", "--registry", reg, "--user", "user-1", "--image", path_str(&marked), "--budget", "0.05"]);
    let cert: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(cert["max_flips_exclusive"], 1);

    let inverted = f.root.join("inv.png");
    let out = sta(&[
        "attack", "--image", path_str(&marked), "--spec", r#"{"kind":"contrast_neg","params":{"c":-1.0},"seed":0}"#,
        "-o", path_str(&inverted),
    ]);
    assert!(out.status.success());
    let out = sta(&["detect", "--registry", reg, "--image", path_str(&inverted)]);
    let res: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(res["detected"], Value::Bool(true));
}

#[test]
fn clean_image_has_no_match() {
    let f = fixture();
    let out = sta(&["attribute", "--registry", path_str(&f.registry), "--image", path_str(&f.clean)]);
    assert_eq!(out.status.code(), Some(0));
    let res: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(res["result"]["matched_user"].is_null());
    // Three users: 3 * P(d <= 24 or d >= 76) = 5.4e-7 is within 1e-6.
    assert_eq!(res["policy"]["tau1"], 24);
}

#[test]
fn exit_codes() {
    let f = fixture();
    assert_eq!(sta(&["keygen", "--bogus"]).status.code(), Some(2));
    assert_eq!(sta(&[]).status.code(), Some(2));
    assert_eq!(sta(&["--help"]).status.code(), Some(0));
    let missing = sta(&["extract", "--registry", path_str(&f.registry), "--user", "nobody", "--image", path_str(&f.clean)]);
    assert_eq!(missing.status.code(), Some(1));
    let bad_spec = sta(&["attack", "--image", path_str(&f.clean), "--spec", r#"{"kind":"blur","seed":0}"#, "-o", "x.png"]);
    assert_eq!(bad_spec.status.code(), Some(1));
    let triple = sta(&["detect", "--triple", "--registry", path_str(&f.registry), "--image", path_str(&f.clean)]);
    assert_eq!(triple.status.code(), Some(1));
}

#[test]
fn bench_prints_csv() {
    let f = fixture();
    let cfg = f.root.join("bench.json");
    let config = serde_json::json!({
        "corpus": {"procedural": {"count": 3, "size": 64, "seed": 9}},
        "registry_path": f.registry,
        "attacks": [{"kind": "gamma", "params": {"g": 1.5}, "seed": 1}],
        "policy": {"target_fpr": {"target_fpr": 1e-6, "p_null": 0.5}},
        "output_path": f.root.join("report"),
    });
    std::fs::write(&cfg, config.to_string()).unwrap();
    let out = sta(&["bench", "--config", path_str(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "attack,abwe,tpr_attr,tpr_det,psnr,ssim,cert_budget");
    assert!(lines[1].starts_with("none,0,1,1,"));
    assert!(lines[2].starts_with("gamma(g=1.5),0,1,1,"));
    assert!(f.root.join("report.json").exists());
}
