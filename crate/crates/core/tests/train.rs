mod common;

use std::path::Path;

use cisod_core::checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint};
use cisod_core::dataset::read_manifest;
use cisod_core::error::Error;
use cisod_core::hpl::HplWeights;
use cisod_core::net::{NetworkConfig, SodNet};
use cisod_core::train::{
    run, Batch, Phase, SampleSource, TrainConfig, Trainer, FINAL_CHECKPOINT, LOG_FILE, LOG_HEADER, NONFINITE_DUMP,
};
use cisod_tensor::Tensor;

const SIZE: usize = 64;

fn config(phase: Phase, manifest: &Path, out: &Path) -> TrainConfig {
    let name = match phase {
        Phase::Prior => "toy_prior.toml",
        Phase::Target => "toy_target.toml",
    };
    let mut cfg = common::shipped_config(name, manifest, out);
    cfg.batch_size = 2;
    cfg.max_steps = Some(4);
    cfg.epochs = 2;
    cfg
}

fn batch(manifest: &Path, n: usize) -> Batch {
    let mut source = SampleSource::new(read_manifest(manifest).unwrap(), SIZE, true);
    let ids = source.ids();
    source.batch(&ids[..n]).unwrap()
}

fn prior_net(cfg: &TrainConfig) -> SodNet {
    SodNet::new(&cfg.network).unwrap()
}

fn target_trainer(data: &common::ToyData, weights: HplWeights, total: u64) -> Trainer {
    let mut cfg = config(Phase::Target, &data.train_manifest, &data.dir.path().join("t"));
    cfg.weights = weights;
    let prior = prior_net(&cfg);
    Trainer::new(cfg, Some(prior), total, [0.5, 0.5, 0.5]).unwrap()
}

#[test]
fn zero_prior_weights_reduce_to_saliency_terms() {
    let data = common::toy_data(4, 1, SIZE as u32, 11);
    let b = batch(&data.train_manifest, 2);
    let weights = HplWeights { alpha: 0.0, beta: 0.0, sml_probability: 0.0 };
    let mut t = target_trainer(&data, weights, 10);
    for _ in 0..3 {
        let r = t.train_step(&b).unwrap();
        assert_eq!(r.losses.total, r.losses.sal1 + r.losses.sal2);
        assert_eq!((r.losses.rpl, r.losses.lpl), (0.0, 0.0));
    }
}

#[test]
fn logged_total_matches_weighted_components_every_step() {
    let data = common::toy_data(4, 1, SIZE as u32, 12);
    let b = batch(&data.train_manifest, 2);
    let weights = HplWeights { alpha: 0.7, beta: 0.3, sml_probability: 0.5 };
    let mut t = target_trainer(&data, weights, 10);
    for _ in 0..5 {
        let r = t.train_step(&b).unwrap();
        let l = r.losses;
        assert_eq!(l.recombined(Phase::Target, &weights), l.total);
        assert!(l.rpl > 0.0 && l.lpl > 0.0, "{l:?}");
        assert!((l.rpl - (l.short_range + l.long_range)).abs() <= 1e-12 * l.rpl.max(1.0), "{l:?}");
    }
}

#[test]
fn small_steps_descend_on_a_fixed_batch() {
    let data = common::toy_data(4, 1, SIZE as u32, 13);
    let b = batch(&data.train_manifest, 2);
    let mut cfg = config(Phase::Prior, &data.train_manifest, &data.dir.path().join("p"));
    cfg.max_lr = 1e-4;
    let mut t = Trainer::new(cfg, None, 1000, [0.0; 3]).unwrap();
    let mut last = t.losses_at(&b, 0).unwrap().total;
    for _ in 0..5 {
        t.train_step(&b).unwrap();
        let now = t.losses_at(&b, 0).unwrap().total;
        assert!(now < last, "{now} !< {last}");
        last = now;
    }
}

#[test]
fn prior_is_untouched_by_target_training() {
    let data = common::toy_data(4, 1, SIZE as u32, 14);
    let b = batch(&data.train_manifest, 2);
    let mut t = target_trainer(&data, HplWeights::default(), 20);
    let before = t.prior.as_ref().unwrap().store.clone();
    let net_before = t.net.store.clone();
    for _ in 0..10 {
        t.train_step(&b).unwrap();
    }
    assert_eq!(t.prior.as_ref().unwrap().store, before);
    assert_ne!(t.net.store, net_before);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = common::toy_data(6, 1, SIZE as u32, 15);
    let run_once = |name: &str| {
        let mut cfg = config(Phase::Prior, &data.train_manifest, &data.dir.path().join(name));
        cfg.max_steps = Some(50);
        cfg.epochs = 100;
        run(&cfg).unwrap()
    };
    let a = run_once("a");
    let b = run_once("b");
    assert_eq!(a.log.len(), 50);
    for (ra, rb) in a.log.iter().zip(&b.log) {
        assert_eq!(ra.losses, rb.losses, "step {}", ra.step);
    }
    assert_eq!(a.net.store, b.net.store);
}

#[test]
fn prior_with_other_structure_is_refused() {
    let data = common::toy_data(2, 1, SIZE as u32, 16);
    let cfg = config(Phase::Target, &data.train_manifest, &data.dir.path().join("t"));
    let other = NetworkConfig {
        tiny_widths: [8, 16, 32, 64, 32],
        ..cfg.network.clone()
    };
    let prior = SodNet::new(&other).unwrap();
    match Trainer::new(cfg, Some(prior), 1, [0.0; 3]) {
        Err(Error::IncompatibleCheckpoint(keys)) => assert!(!keys.is_empty()),
        other => panic!("expected an incompatible prior, got {:?}", other.err()),
    }
}

#[test]
fn target_phase_without_prior_is_a_config_error() {
    let data = common::toy_data(2, 1, SIZE as u32, 17);
    let cfg = config(Phase::Target, &data.train_manifest, &data.dir.path().join("t"));
    assert!(matches!(Trainer::new(cfg, None, 1, [0.0; 3]), Err(Error::Config(_))));
}

#[test]
fn non_finite_loss_aborts_and_dumps_the_batch() {
    let data = common::toy_data(4, 1, SIZE as u32, 18);
    let out = data.dir.path().join("nan");
    let mut cfg = config(Phase::Target, &data.train_manifest, &out);
    let mut prior = prior_net(&cfg);
    let names: Vec<String> = prior.store.params().map(|(n, _)| n.clone()).collect();
    for n in names {
        let shape = prior.store.param(&n).unwrap().shape().to_vec();
        prior.store.set_param(&n, Tensor::full(shape, f64::NAN)).unwrap();
    }
    let prior_path = data.dir.path().join("nan_prior.safetensors");
    save_checkpoint(&prior_path, &prior, serde_json::Value::Null).unwrap();
    cfg.prior_checkpoint = Some(prior_path);
    match run(&cfg) {
        Err(Error::NonFiniteLoss { step, batch_ids }) => {
            assert_eq!(step, 0);
            assert_eq!(batch_ids.len(), 2);
        }
        other => panic!("expected a non-finite loss, got {:?}", other.err()),
    }
    let dump: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join(NONFINITE_DUMP)).unwrap()).unwrap();
    assert_eq!(dump["batch_ids"].as_array().unwrap().len(), 2);
    assert!(!out.join(FINAL_CHECKPOINT).exists());
}

#[test]
fn run_writes_log_and_self_describing_checkpoints() {
    let data = common::toy_data(5, 1, SIZE as u32, 19);
    let out = data.dir.path().join("prior");
    let mut cfg = config(Phase::Prior, &data.train_manifest, &out);
    cfg.val_fraction = 0.2;
    let outcome = run(&cfg).unwrap();
    // 4 train ids at batch 2 → 2 steps per epoch, capped at 4 steps.
    assert_eq!(outcome.log.len(), 4);
    assert_eq!(outcome.validation.len(), 2);

    let mut reader = csv::Reader::from_path(out.join(LOG_FILE)).unwrap();
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), LOG_HEADER.to_vec());
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    for (row, rec) in rows.iter().zip(&outcome.log) {
        assert_eq!(row[0].parse::<u64>().unwrap(), rec.step);
        assert_eq!(row[3].parse::<f64>().unwrap(), rec.losses.total);
    }

    let meta = read_checkpoint_meta(&outcome.final_checkpoint).unwrap();
    assert_eq!(meta.network, cfg.network);
    assert_eq!(meta.extra["steps"], 4);
    let stored: TrainConfig = serde_json::from_value(meta.extra["train_config"].clone()).unwrap();
    assert_eq!(stored, cfg);
    assert!(meta.extra["validation"]["mae"].as_f64().unwrap().is_finite());
    assert!(outcome.best_checkpoint.unwrap().exists());

    let (net, _) = load_checkpoint(&outcome.final_checkpoint).unwrap();
    assert_eq!(net.store, outcome.net.store);

    // The prior checkpoint feeds a target run.
    let mut tcfg = config(Phase::Target, &data.train_manifest, &data.dir.path().join("target"));
    tcfg.prior_checkpoint = Some(outcome.final_checkpoint.clone());
    tcfg.max_steps = Some(2);
    let target = run(&tcfg).unwrap();
    assert_eq!(target.log.len(), 2);
    assert!(target.log.iter().all(|r| r.losses.total.is_finite()));
}

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = common::repo_root().join("configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            TrainConfig::from_file(&path).unwrap().validate().unwrap();
            n += 1;
        }
    }
    assert_eq!(n, 5);
}
