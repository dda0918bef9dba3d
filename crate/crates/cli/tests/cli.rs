use std::path::Path;
use std::process::{Command, Output};

fn cisod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cisod"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cisod(args);
    assert!(
        out.status.success(),
        "cisod {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn dataset_codec_train_and_bench_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    ok(&["dataset", "synth", "--out", s(&corpus), "--count", "3", "--size", "64", "--seed", "4"]);
    let (images, masks) = (corpus.join("clean"), corpus.join("gt"));
    let bench = d.join("bench");
    let out = ok(&[
        "dataset", "build-test", "--images", s(&images), "--masks", s(&masks), "--out", s(&bench), "--name", "te",
    ]);
    assert!(out.starts_with("15 entries"), "{out}");
    let out = ok(&[
        "dataset", "build-train", "--images", s(&images), "--masks", s(&masks), "--out", s(&bench), "--name", "tr",
        "--seed", "1",
    ]);
    assert!(out.starts_with("3 entries"), "{out}");

    let compressed = d.join("qp37");
    let out = ok(&["codec", "compress", "--in", s(&images), "--out", s(&compressed), "--qp", "37"]);
    assert!(out.starts_with("3 images"), "{out}");
    let first = std::fs::read_dir(&images).unwrap().next().unwrap().unwrap().file_name();
    let psnr: f64 = ok(&["codec", "psnr", s(&images.join(&first)), s(&compressed.join(&first))])
        .trim()
        .parse()
        .unwrap();
    assert!(psnr.is_finite() && psnr > 15.0, "{psnr}");

    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let text = std::fs::read_to_string(root.join("configs/toy_prior.toml")).unwrap();
    let mut cfg: toml::Table = toml::from_str(&text).unwrap();
    cfg.insert("manifest".into(), s(&bench.join("tr")).into());
    cfg.insert("batch_size".into(), 2.into());
    let cfg_path = d.join("prior.toml");
    std::fs::write(&cfg_path, toml::to_string(&cfg).unwrap()).unwrap();
    let run_dir = d.join("run");
    ok(&["train", "prior", "--config", s(&cfg_path), "--max-steps", "2", "--output-dir", s(&run_dir)]);
    let ckpt = run_dir.join("final.safetensors");
    assert!(ckpt.exists());

    let report = d.join("report");
    ok(&[
        "bench", "eval", "--ckpt", s(&ckpt), "--benchmarks", s(&bench.join("te")), "--out", s(&report),
        "--image-size", "64", "--plot",
    ]);
    assert!(report.join("aggregate.csv").exists());
    assert!(report.join("robustness.png").exists());
    let out = ok(&["bench", "compare", s(&report), s(&report), "--fail-on-regression"]);
    assert!(out.contains("0 regression"), "{out}");

    let graphs = d.join("graphs");
    ok(&["bench", "dump-graphs", "--ckpt", s(&ckpt), "--images", s(&images.join(&first)), "--out", s(&graphs), "--size", "64"]);
    assert!(std::fs::read_dir(&graphs).unwrap().count() > 0);
}

#[test]
fn net_summary_reports_parameters_and_shapes() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let out = ok(&["net", "summary", "--config", s(&root.join("configs/toy_prior.toml")), "--size", "64"]);
    assert!(out.contains("parameters 280794"), "{out}");
    assert!(out.contains("input      3x64x64"), "{out}");
}

#[test]
fn unsupported_level_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = cisod(&["codec", "compress", "--in", s(dir.path()), "--out", s(&dir.path().join("o")), "--qp", "30"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("QP 30"));
}

#[test]
fn target_without_prior_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("t.toml");
    std::fs::write(&cfg, "phase = \"target\"\nmanifest = \"nowhere\"\n").unwrap();
    let out = cisod(&["train", "target", "--config", s(&cfg)]);
    assert!(!out.status.success());
}
