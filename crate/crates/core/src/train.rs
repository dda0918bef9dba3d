//! Two-phase training controller.
//!
//! Phase `prior` trains the prior generator on clean images with the two
//! saliency losses only. Phase `target` loads that prior, freezes it (its
//! parameters are bound as constants) and trains the target network on
//! compressed images under
//! `L_sal1 + L_sal2 + α·L_RPL + β·L_LPL`, with optional self-masking of the
//! compressed input.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cisod_tensor::nn::{clip_grad_norm, Adam, BindMode, Binder};
use cisod_tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::{
    load_sample, mean_color, read_manifest, split_ids, stack_images, stack_masks, BenchmarkManifest, CompressedSample,
    ManifestEntry, Normalization,
};
use crate::error::{Error, Result};
use crate::hpl::{foreground_mask, lpl_loss, rpl_loss, saliency_loss, self_mask, sml_rng, HplWeights, Side};
use crate::metrics::{f_measure_max, mae, s_measure, Map};
use crate::net::{NetworkConfig, SodNet};

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const NONFINITE_DUMP: &str = "nonfinite_batch.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Clean images, saliency losses only.
    Prior,
    /// Compressed images, full objective against a frozen prior.
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    LinearDecay,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub lr_schedule: LrSchedule,
    /// Linear warm-up steps before the decay; 0 disables it.
    pub warmup_steps: u64,
    pub image_size: usize,
    pub seed: u64,
    pub weights: HplWeights,
    pub network: NetworkConfig,
    /// Training manifest (file or benchmark directory). Phase `prior` uses
    /// its clean images, phase `target` its compressed ones.
    pub manifest: PathBuf,
    /// Prior checkpoint; required for phase `target`.
    pub prior_checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Stops early after this many optimization steps; the learning-rate
    /// schedule spans the shortened run.
    pub max_steps: Option<u64>,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Fraction of manifest ids held out for validation.
    pub val_fraction: f64,
    pub optimizer: OptimizerConfig,
    pub normalization: Normalization,
    /// Random horizontal flips of training batches.
    pub hflip: bool,
    /// Fill colour for self-masking; defaults to the mean colour of the
    /// training images.
    pub sml_fill: Option<[f64; 3]>,
    pub checkpoint_every_epoch: bool,
    /// Keep decoded training samples in memory between epochs.
    pub cache_samples: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Prior,
            epochs: 100,
            batch_size: 12,
            max_lr: 1e-4,
            lr_schedule: LrSchedule::LinearDecay,
            warmup_steps: 0,
            image_size: 256,
            seed: 0,
            weights: HplWeights::default(),
            network: NetworkConfig::default(),
            manifest: PathBuf::new(),
            prior_checkpoint: None,
            output_dir: PathBuf::from("runs/default"),
            max_steps: None,
            grad_clip: None,
            val_fraction: 0.1,
            optimizer: OptimizerConfig::default(),
            normalization: Normalization::default(),
            hflip: false,
            sml_fill: None,
            checkpoint_every_epoch: true,
            cache_samples: true,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::Config(format!("max_lr must be positive, got {}", self.max_lr)));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 32, got {}",
                self.image_size
            )));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || o.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if self.phase == Phase::Target && self.prior_checkpoint.is_none() {
            return Err(Error::Config("phase target requires prior_checkpoint".into()));
        }
        Ok(())
    }
}

/// `max_lr · (1 − step / total_steps)`, clamped at zero.
pub fn lr_at(step: u64, total_steps: u64, max_lr: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    max_lr * (1.0 - (step as f64 / total_steps as f64).min(1.0))
}

/// Decay schedule preceded by an optional linear warm-up.
pub fn scheduled_lr(step: u64, total_steps: u64, max_lr: f64, warmup_steps: u64) -> f64 {
    let decayed = lr_at(step, total_steps, max_lr);
    if step < warmup_steps {
        decayed * (step + 1) as f64 / warmup_steps as f64
    } else {
        decayed
    }
}

/// Scalar losses of one step. Terms whose weight is zero are not evaluated
/// and reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub sal1: f64,
    pub sal2: f64,
    pub rpl: f64,
    pub short_range: f64,
    pub long_range: f64,
    pub lpl: f64,
    pub total: f64,
}

impl LossBundle {
    /// The objective recomputed from the components, in the order the
    /// training graph sums them.
    pub fn recombined(&self, phase: Phase, weights: &HplWeights) -> f64 {
        match phase {
            Phase::Prior => self.sal1 + self.sal2,
            Phase::Target => self.sal1 + self.sal2 + weights.alpha * self.rpl + weights.beta * self.lpl,
        }
    }
}

/// A training batch of `[3, H, W]` images in `[0, 1]` and `[1, H, W]` masks.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub clean: Vec<Tensor>,
    pub compressed: Vec<Tensor>,
    pub gt: Vec<Tensor>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a CompressedSample>) -> Self {
        let mut batch = Batch {
            ids: Vec::new(),
            clean: Vec::new(),
            compressed: Vec::new(),
            gt: Vec::new(),
        };
        for s in samples {
            batch.ids.push(s.id.clone());
            batch.clean.push(s.clean.clone());
            batch.compressed.push(s.compressed.clone());
            batch.gt.push(s.gt.clone());
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Mirrors a `[C, H, W]` tensor left to right.
pub fn hflip(t: &Tensor) -> Tensor {
    let s = t.shape();
    let w = s[s.len() - 1];
    let mut out = t.clone();
    for (row_out, row_in) in out.data_mut().chunks_exact_mut(w).zip(t.data().chunks_exact(w)) {
        for (o, i) in row_out.iter_mut().zip(row_in.iter().rev()) {
            *o = *i;
        }
    }
    out
}

/// Per-step record of the scalar log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBundle,
    pub grad_norm: f64,
    pub masked: usize,
}

pub const LOG_HEADER: [&str; 12] = [
    "step", "epoch", "lr", "total", "sal1", "sal2", "rpl", "short_range", "long_range", "lpl", "grad_norm", "masked",
];

impl StepRecord {
    fn csv_row(&self) -> Vec<String> {
        let l = &self.losses;
        vec![
            self.step.to_string(),
            self.epoch.to_string(),
            format!("{:e}", self.lr),
            l.total.to_string(),
            l.sal1.to_string(),
            l.sal2.to_string(),
            l.rpl.to_string(),
            l.short_range.to_string(),
            l.long_range.to_string(),
            l.lpl.to_string(),
            self.grad_norm.to_string(),
            self.masked.to_string(),
        ]
    }
}

/// Mean metrics over a held-out slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub epoch: usize,
    pub count: usize,
    pub mae: f64,
    pub s_m: f64,
    /// Mean over images with a non-empty ground truth; `None` when there
    /// are none.
    pub f_max: Option<f64>,
}

/// Eval-mode predictions `[1, H, W]` for `[3, H, W]` images in `[0, 1]`,
/// processed `batch_size` at a time.
pub fn predict_images(net: &SodNet, images: &[&Tensor], norm: &Normalization, batch_size: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let pred = net.predict(&stack_images(chunk, Some(norm))?)?;
        let s = pred.shape().to_vec();
        let plane = s[1] * s[2] * s[3];
        for i in 0..s[0] {
            out.push(Tensor::new([1, s[2], s[3]], pred.data()[i * plane..(i + 1) * plane].to_vec())?);
        }
    }
    Ok(out)
}

/// Scores eval-mode predictions on `samples`, using compressed inputs when
/// `compressed` is set and clean inputs otherwise.
pub fn validate_samples(
    net: &SodNet,
    samples: &[&CompressedSample],
    compressed: bool,
    norm: &Normalization,
    batch_size: usize,
    epoch: usize,
) -> Result<ValidationMetrics> {
    let inputs: Vec<&Tensor> = samples
        .iter()
        .map(|s| if compressed { &s.compressed } else { &s.clean })
        .collect();
    let preds = predict_images(net, &inputs, norm, batch_size)?;
    let (mut mae_sum, mut s_sum, mut f_sum, mut f_count) = (0.0, 0.0, 0.0, 0usize);
    for (pred, sample) in preds.iter().zip(samples) {
        let (h, w) = (pred.shape()[1], pred.shape()[2]);
        let p = Map::new(pred.data(), h, w)?;
        let g = Map::new(sample.gt.data(), h, w)?;
        mae_sum += mae(&p, &g)?;
        s_sum += s_measure(&p, &g)?;
        if let Some(f) = f_measure_max(&p, &g)? {
            f_sum += f;
            f_count += 1;
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(ValidationMetrics {
        epoch,
        count: samples.len(),
        mae: mae_sum / n,
        s_m: s_sum / n,
        f_max: (f_count > 0).then(|| f_sum / f_count as f64),
    })
}

/// One network under optimization (plus the frozen prior in phase
/// `target`) and its optimizer state.
pub struct Trainer {
    pub config: TrainConfig,
    pub net: SodNet,
    pub prior: Option<SodNet>,
    adam: Adam,
    step: u64,
    total_steps: u64,
    fill: [f64; 3],
}

struct Prepared {
    target_input: Tensor,
    prior_input: Tensor,
    gt: Tensor,
    masked: usize,
}

impl Trainer {
    /// `total_steps` sets the span of the learning-rate schedule; `fill` is
    /// the self-masking colour.
    pub fn new(config: TrainConfig, prior: Option<SodNet>, total_steps: u64, fill: [f64; 3]) -> Result<Self> {
        config.validate()?;
        let net = SodNet::new(&config.network)?;
        match (config.phase, &prior) {
            (Phase::Target, None) => return Err(Error::Config("phase target requires a prior network".into())),
            (Phase::Target, Some(p)) => {
                let mismatched = net.mismatched_keys(p);
                if !mismatched.is_empty() {
                    return Err(Error::IncompatibleCheckpoint(mismatched));
                }
            }
            (Phase::Prior, _) => {}
        }
        let o = config.optimizer;
        Ok(Self {
            adam: Adam::new(o.beta1, o.beta2, o.eps, o.weight_decay),
            config,
            net,
            prior,
            step: 0,
            total_steps,
            fill,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn current_lr(&self) -> f64 {
        scheduled_lr(self.step, self.total_steps, self.config.max_lr, self.config.warmup_steps)
    }

    fn prepare(&self, batch: &Batch, step: u64) -> Result<Prepared> {
        if batch.is_empty() {
            return Err(Error::Shape("empty training batch".into()));
        }
        let cfg = &self.config;
        let mut clean = Vec::with_capacity(batch.len());
        let mut inputs = Vec::with_capacity(batch.len());
        let mut gts = Vec::with_capacity(batch.len());
        let mut masked = 0;
        for (i, id) in batch.ids.iter().enumerate() {
            let mut rng = sml_rng(cfg.seed, id, step);
            let flip = cfg.hflip && ChaCha8Rng::seed_from_u64(rng.random()).random::<bool>();
            let orient = |t: &Tensor| if flip { hflip(t) } else { t.clone() };
            let (c, gt) = (orient(&batch.clean[i]), orient(&batch.gt[i]));
            let input = match cfg.phase {
                Phase::Prior => c.clone(),
                Phase::Target => {
                    let (img, applied) = self_mask(
                        &orient(&batch.compressed[i]),
                        &gt,
                        cfg.weights.sml_probability,
                        self.fill,
                        &mut rng,
                    )?;
                    masked += usize::from(applied);
                    img
                }
            };
            clean.push(c);
            inputs.push(input);
            gts.push(gt);
        }
        let norm = Some(&cfg.normalization);
        Ok(Prepared {
            target_input: stack_images(&inputs.iter().collect::<Vec<_>>(), norm)?,
            prior_input: stack_images(&clean.iter().collect::<Vec<_>>(), norm)?,
            gt: stack_masks(&gts.iter().collect::<Vec<_>>())?,
            masked,
        })
    }

    /// Builds the objective on `tape`; returns the total and its components.
    fn objective<'t>(&self, tape: &'t Tape, bt: &Binder<'t, '_>, prep: &Prepared) -> Result<(Var<'t>, LossBundle)> {
        let cfg = &self.config;
        let s = prep.gt.shape();
        let out_size = (s[2], s[3]);
        let y = tape.constant(prep.gt.clone());
        let x = tape.constant(prep.target_input.clone());
        let out = self.net.forward(bt, &x, out_size)?;
        let sal1 = saliency_loss(&out.sal1, &y)?;
        let sal2 = saliency_loss(&out.sal2, &y)?;
        let mut total = sal1.add(&sal2)?;
        let mut bundle = LossBundle {
            sal1: sal1.item(),
            sal2: sal2.item(),
            ..Default::default()
        };
        if cfg.phase == Phase::Target {
            let w = cfg.weights;
            let prior = self.prior.as_ref().expect("checked in Trainer::new");
            if w.alpha > 0.0 || w.beta > 0.0 {
                let bp = Binder::new(tape, &prior.store, BindMode::EVAL);
                let xp = tape.constant(prep.prior_input.clone());
                let pyramid_p = prior.extract_pyramid(&bp, &xp)?;
                if w.alpha > 0.0 {
                    let rpl = rpl_loss(
                        Side {
                            net: &self.net,
                            binder: bt,
                            pyramid: &out.pyramid,
                        },
                        Side {
                            net: prior,
                            binder: &bp,
                            pyramid: &pyramid_p,
                        },
                    )?;
                    bundle.rpl = rpl.total.item();
                    bundle.short_range = rpl.short_range.item();
                    bundle.long_range = rpl.long_range.item();
                    total = total.add(&rpl.total.mul_scalar(w.alpha))?;
                }
                if w.beta > 0.0 {
                    let s_l_p = prior.aggregate_location(&bp, &pyramid_p)?;
                    let ls = out.s_l.shape();
                    let mask = tape.constant(foreground_mask(&prep.gt, ls[2], ls[3])?);
                    let lpl = lpl_loss(&out.s_l, &s_l_p, &mask)?;
                    bundle.lpl = lpl.item();
                    total = total.add(&lpl.mul_scalar(w.beta))?;
                }
            }
        }
        bundle.total = total.item();
        Ok((total, bundle))
    }

    /// Losses of the current network on `batch` as the step `step` would
    /// see them (same self-masking draws), without updating anything.
    pub fn losses_at(&self, batch: &Batch, step: u64) -> Result<LossBundle> {
        let prep = self.prepare(batch, step)?;
        let tape = Tape::new();
        let bt = Binder::new(&tape, &self.net.store, BindMode::TRAIN);
        Ok(self.objective(&tape, &bt, &prep)?.1)
    }

    /// One optimization step on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let step = self.step;
        let lr = self.current_lr();
        let prep = self.prepare(batch, step)?;
        let (mut grads, buffers, losses) = {
            let tape = Tape::new();
            let bt = Binder::new(&tape, &self.net.store, BindMode::TRAIN);
            let (total, losses) = self.objective(&tape, &bt, &prep)?;
            if !losses.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: step as usize,
                    batch_ids: batch.ids.clone(),
                });
            }
            let g = tape.backward(total)?;
            (bt.gradients(&g), bt.take_buffer_updates(), losses)
        };
        let grad_norm = match self.config.grad_clip {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => global_norm(&grads),
        };
        self.adam.step(&mut self.net.store, &grads, lr)?;
        for (name, value) in buffers {
            self.net.store.set_buffer(&name, value)?;
        }
        self.step += 1;
        Ok(StepRecord {
            step,
            epoch: 0,
            lr,
            losses,
            grad_norm,
            masked: prep.masked,
        })
    }
}

fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Training samples keyed by id, decoded lazily and optionally cached.
pub struct SampleSource {
    pub manifest: BenchmarkManifest,
    entries: BTreeMap<String, ManifestEntry>,
    size: usize,
    cache: Option<BTreeMap<String, CompressedSample>>,
}

impl SampleSource {
    /// Uses the first entry of every id (test manifests list one per level).
    pub fn new(manifest: BenchmarkManifest, size: usize, cache: bool) -> Self {
        let mut entries = BTreeMap::new();
        for e in &manifest.entries {
            entries.entry(e.id.clone()).or_insert_with(|| e.clone());
        }
        Self {
            manifest,
            entries,
            size,
            cache: cache.then(BTreeMap::new),
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn get(&mut self, id: &str) -> Result<CompressedSample> {
        if let Some(s) = self.cache.as_ref().and_then(|c| c.get(id)) {
            return Ok(s.clone());
        }
        let entry = self.entries.get(id).ok_or_else(|| Error::Load {
            id: id.to_string(),
            reason: "not in manifest".into(),
        })?;
        let sample = load_sample(&self.manifest, entry, self.size)?;
        if let Some(c) = self.cache.as_mut() {
            c.insert(id.to_string(), sample.clone());
        }
        Ok(sample)
    }

    pub fn batch(&mut self, ids: &[String]) -> Result<Batch> {
        let samples = ids.iter().map(|id| self.get(id)).collect::<Result<Vec<_>>>()?;
        Ok(Batch::from_samples(&samples))
    }
}

/// Everything a finished run produced.
pub struct TrainOutcome {
    pub net: SodNet,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub log: Vec<StepRecord>,
    pub validation: Vec<ValidationMetrics>,
}

fn epoch_order(ids: &[String], seed: u64, epoch: usize) -> Vec<String> {
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407)));
    order
}

fn write_nonfinite_dump(dir: &Path, err: &Error, record: Option<&LossBundle>) -> Result<()> {
    if let Error::NonFiniteLoss { step, batch_ids } = err {
        let path = dir.join(NONFINITE_DUMP);
        let body = serde_json::json!({ "step": step, "batch_ids": batch_ids, "last_finite_losses": record });
        std::fs::write(&path, serde_json::to_vec_pretty(&body)?).map_err(|e| Error::io(&path, e))?;
        log::error!("non-finite loss; offending batch written to {}", path.display());
    }
    Ok(())
}

/// Runs the phase selected by the config: loads data (and the prior for
/// phase `target`), trains, validates after every epoch and writes the
/// scalar log plus checkpoints into `output_dir`.
pub fn run(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = read_manifest(&cfg.manifest)?;
    let prior = match cfg.phase {
        Phase::Prior => None,
        Phase::Target => {
            let path = cfg.prior_checkpoint.as_ref().expect("validated");
            Some(load_checkpoint(path)?.0)
        }
    };
    let mut source = SampleSource::new(manifest, cfg.image_size, cfg.cache_samples);
    let (train_ids, val_ids) = split_ids(&source.ids(), cfg.val_fraction, cfg.seed);
    if train_ids.is_empty() {
        return Err(Error::Manifest("no training samples".into()));
    }
    let fill = match (cfg.phase, cfg.sml_fill) {
        (Phase::Prior, _) => [0.0; 3],
        (Phase::Target, Some(f)) => f,
        (Phase::Target, None) => {
            let mut images = Vec::with_capacity(train_ids.len());
            for id in &train_ids {
                images.push(source.get(id)?.compressed);
            }
            mean_color(&images)
        }
    };
    let steps_per_epoch = train_ids.len().div_ceil(cfg.batch_size) as u64;
    let mut total_steps = steps_per_epoch * cfg.epochs as u64;
    if let Some(m) = cfg.max_steps {
        total_steps = total_steps.min(m);
    }
    let mut trainer = Trainer::new(cfg.clone(), prior, total_steps, fill)?;

    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let log_path = cfg.output_dir.join(LOG_FILE);
    let mut writer = csv::Writer::from_path(&log_path)?;
    writer.write_record(LOG_HEADER)?;
    log::info!(
        "phase {:?}: {} train / {} val ids, {} steps",
        cfg.phase,
        train_ids.len(),
        val_ids.len(),
        total_steps
    );

    let mut log = Vec::new();
    let mut validation = Vec::new();
    let mut best: Option<(f64, PathBuf)> = None;
    let use_compressed = cfg.phase == Phase::Target;
    'epochs: for epoch in 0..cfg.epochs {
        for chunk in epoch_order(&train_ids, cfg.seed, epoch).chunks(cfg.batch_size) {
            if trainer.step_count() >= total_steps {
                break;
            }
            let batch = source.batch(chunk)?;
            let mut record = match trainer.train_step(&batch) {
                Ok(r) => r,
                Err(e) => {
                    writer.flush().map_err(|io| Error::io(&log_path, io))?;
                    write_nonfinite_dump(&cfg.output_dir, &e, log.last().map(|r: &StepRecord| &r.losses))?;
                    return Err(e);
                }
            };
            record.epoch = epoch;
            writer.write_record(record.csv_row())?;
            log::debug!("step {} total {:.6}", record.step, record.losses.total);
            log.push(record);
        }
        writer.flush().map_err(|e| Error::io(&log_path, e))?;
        let metrics = if val_ids.is_empty() {
            None
        } else {
            let samples = val_ids.iter().map(|id| source.get(id)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&CompressedSample> = samples.iter().collect();
            let m = validate_samples(
                &trainer.net,
                &refs,
                use_compressed,
                &cfg.normalization,
                cfg.batch_size,
                epoch,
            )?;
            log::info!("epoch {epoch}: val MAE {:.4}, S_m {:.4}", m.mae, m.s_m);
            validation.push(m);
            Some(m)
        };
        let extra = checkpoint_extra(cfg, trainer.step_count(), metrics.as_ref());
        if cfg.checkpoint_every_epoch {
            save_checkpoint(
                &cfg.output_dir.join(format!("epoch_{epoch:03}.safetensors")),
                &trainer.net,
                extra.clone(),
            )?;
        }
        if let Some(m) = metrics {
            if best.as_ref().is_none_or(|(b, _)| m.mae < *b) {
                let path = cfg.output_dir.join(BEST_CHECKPOINT);
                save_checkpoint(&path, &trainer.net, extra)?;
                best = Some((m.mae, path));
            }
        }
        if trainer.step_count() >= total_steps {
            break 'epochs;
        }
    }
    let final_checkpoint = cfg.output_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(
        &final_checkpoint,
        &trainer.net,
        checkpoint_extra(cfg, trainer.step_count(), validation.last()),
    )?;
    Ok(TrainOutcome {
        net: trainer.net,
        final_checkpoint,
        best_checkpoint: best.map(|(_, p)| p),
        log,
        validation,
    })
}

fn checkpoint_extra(cfg: &TrainConfig, steps: u64, metrics: Option<&ValidationMetrics>) -> serde_json::Value {
    serde_json::json!({
        "phase": cfg.phase,
        "steps": steps,
        "train_config": cfg,
        "validation": metrics,
    })
}

/// The network config a phase-`target` run should use so that it is
/// structurally compatible with `prior`.
pub fn matching_network(prior: &NetworkConfig, seed: u64) -> NetworkConfig {
    NetworkConfig {
        seed,
        pretrained_weights_path: None,
        ..prior.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_decay_endpoints() {
        assert_eq!(lr_at(0, 100, 1e-4), 1e-4);
        assert_eq!(lr_at(100, 100, 1e-4), 0.0);
        assert!((lr_at(50, 100, 1e-4) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at(150, 100, 1e-4), 0.0);
    }

    #[test]
    fn warmup_ramps_to_the_decay_curve() {
        assert!((scheduled_lr(0, 100, 1.0, 4) - 0.25).abs() < 1e-12);
        assert_eq!(scheduled_lr(10, 100, 1.0, 4), lr_at(10, 100, 1.0));
    }

    #[test]
    fn target_phase_requires_prior() {
        let cfg = TrainConfig {
            phase: Phase::Target,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = TrainConfig {
            grad_clip: Some(5.0),
            max_steps: Some(300),
            ..Default::default()
        };
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn defaults_follow_the_training_protocol() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.image_size), (100, 12, 256));
        assert_eq!(cfg.max_lr, 1e-4);
        assert_eq!((cfg.weights.alpha, cfg.weights.beta), (0.5, 0.5));
    }

    #[test]
    fn hflip_is_an_involution() {
        let t = Tensor::new([1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(hflip(&t).data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert_eq!(hflip(&hflip(&t)), t);
    }
}
