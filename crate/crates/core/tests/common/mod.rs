#![allow(dead_code)]

use std::path::{Path, PathBuf};

use cisod_core::codec::CodecConfig;
use cisod_core::dataset::{build_test_benchmark, build_train_benchmark, make_synthetic_corpus};
use cisod_core::imageio::list_images;
use cisod_core::train::TrainConfig;
use tempfile::TempDir;

/// Synthetic train/test benchmarks in a temporary directory.
pub struct ToyData {
    pub dir: TempDir,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

fn copy_subset(files: &[PathBuf], dest: &Path) {
    std::fs::create_dir_all(dest).unwrap();
    for f in files {
        std::fs::copy(f, dest.join(f.file_name().unwrap())).unwrap();
    }
}

/// Renders `n_train + n_test` scenes, then builds a train benchmark (one
/// random level per image) and a test benchmark (every level per image).
pub fn toy_data(n_train: usize, n_test: usize, size: u32, seed: u64) -> ToyData {
    let dir = tempfile::tempdir().unwrap();
    let (clean, gt) = make_synthetic_corpus(n_train + n_test, size, seed, &dir.path().join("corpus")).unwrap();
    let clean_files = list_images(&clean).unwrap();
    let gt_files = list_images(&gt).unwrap();
    let split = |name: &str, range: std::ops::Range<usize>| {
        let root = dir.path().join(name);
        copy_subset(&clean_files[range.clone()], &root.join("images"));
        copy_subset(&gt_files[range], &root.join("masks"));
        root
    };
    let train = split("train", 0..n_train);
    let test = split("test", n_train..n_train + n_test);
    let bench = dir.path().join("bench");
    let cfg = CodecConfig::default();
    build_train_benchmark(&train.join("images"), &train.join("masks"), &bench, "toy-tr", &cfg, seed).unwrap();
    build_test_benchmark(&test.join("images"), &test.join("masks"), &bench, "toy-te", &cfg).unwrap();
    ToyData {
        train_manifest: bench.join("toy-tr"),
        test_manifest: bench.join("toy-te"),
        dir,
    }
}

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// A shipped config with its data and output paths redirected.
pub fn shipped_config(name: &str, manifest: &Path, output_dir: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::from_file(&repo_root().join("configs").join(name)).unwrap();
    cfg.manifest = manifest.to_path_buf();
    cfg.output_dir = output_dir.to_path_buf();
    cfg
}
