//! Compressed benchmarks: building, persisting and loading them, plus a
//! synthetic corpus generator.
//!
//! On disk a benchmark lives at `<root>/<name>/` with the compressed images
//! under `<qp>/<id>.png` and a `manifest.txt` holding one JSON header line
//! followed by one JSON line per entry. Entry paths inside the benchmark
//! directory are stored relative to it; everything else is absolute.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use cisod_tensor::Tensor;
use image::{GrayImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, CodecConfig, QpLevel};
use crate::error::{Error, Result};
use crate::imageio;

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_FORMAT: &str = "cisod-manifest";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub clean_path: PathBuf,
    pub compressed_path: PathBuf,
    pub gt_path: PathBuf,
    pub qp: QpLevel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkManifest {
    pub name: String,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    pub codec_record: CodecConfig,
    pub seed: u64,
    /// Directory the relative entry paths resolve against.
    pub root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    name: String,
    split: Split,
    seed: u64,
    count: usize,
    codec_record: CodecConfig,
}

impl BenchmarkManifest {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn entry(&self, id: &str, qp: Option<QpLevel>) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.id == id && qp.is_none_or(|q| q == e.qp))
    }

    pub fn ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Checks the structural invariants of the split: for test manifests
    /// every `(id, qp)` pair of the level set appears exactly once, for
    /// train manifests every id appears once with a level from the set.
    pub fn validate(&self) -> Result<()> {
        let levels = &self.codec_record.level_set;
        let mut seen: BTreeMap<&str, Vec<QpLevel>> = BTreeMap::new();
        for e in &self.entries {
            if !levels.contains(&e.qp) {
                return Err(Error::Manifest(format!("entry {} has QP {} outside the level set", e.id, e.qp)));
            }
            seen.entry(&e.id).or_default().push(e.qp);
        }
        for (id, mut qps) in seen {
            qps.sort();
            let ok = match self.split {
                Split::Train => qps.len() == 1,
                Split::Test => qps == *levels,
            };
            if !ok {
                return Err(Error::Manifest(format!("id {id} has levels {qps:?}")));
            }
        }
        Ok(())
    }
}

pub fn write_manifest(manifest: &BenchmarkManifest, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        name: manifest.name.clone(),
        split: manifest.split,
        seed: manifest.seed,
        count: manifest.entries.len(),
        codec_record: manifest.codec_record.clone(),
    };
    let mut text = serde_json::to_string(&header)?;
    text.push('\n');
    for e in &manifest.entries {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a manifest file; `path` may also name the benchmark directory.
pub fn read_manifest(path: &Path) -> Result<BenchmarkManifest> {
    let file_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let file = std::fs::File::open(&file_path).map_err(|e| Error::io(&file_path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Manifest(format!("{} is empty", file_path.display())))?
        .map_err(|e| Error::io(&file_path, e))?;
    let header: ManifestHeader = serde_json::from_str(&header_line)?;
    if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported manifest {} v{}",
            header.format, header.version
        )));
    }
    let mut entries = Vec::with_capacity(header.count);
    for line in lines {
        let line = line.map_err(|e| Error::io(&file_path, e))?;
        if !line.trim().is_empty() {
            entries.push(serde_json::from_str(&line)?);
        }
    }
    if entries.len() != header.count {
        return Err(Error::Manifest(format!(
            "header announces {} entries, found {}",
            header.count,
            entries.len()
        )));
    }
    let root = file_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(BenchmarkManifest {
        name: header.name,
        split: header.split,
        entries,
        codec_record: header.codec_record,
        seed: header.seed,
        root,
    })
}

/// Clean image paths paired with ground-truth paths by file stem.
pub fn pair_by_id(clean_dir: &Path, gt_dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let gts: BTreeMap<String, PathBuf> = imageio::list_images(gt_dir)?
        .into_iter()
        .map(|p| (imageio::stem(&p), p))
        .collect();
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for clean in imageio::list_images(clean_dir)? {
        let id = imageio::stem(&clean);
        match gts.get(&id) {
            Some(gt) => pairs.push((id, clean, gt.clone())),
            None => missing.push(id),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingGroundTruth(missing));
    }
    Ok(pairs)
}

/// Every `(id, qp)` combination, ids in the given order, QPs ascending.
pub fn plan_test_entries(ids: &[String], levels: &[QpLevel]) -> Vec<(String, QpLevel)> {
    ids.iter()
        .flat_map(|id| levels.iter().map(move |&q| (id.clone(), q)))
        .collect()
}

/// One uniformly drawn level per id, in the given order.
pub fn assign_train_qps(ids: &[String], levels: &[QpLevel], seed: u64) -> Vec<(String, QpLevel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.iter()
        .map(|id| (id.clone(), levels[rng.random_range(0..levels.len())]))
        .collect()
}

fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let abs = std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf());
    let base = std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf());
    abs.strip_prefix(&base).map(Path::to_path_buf).unwrap_or(abs)
}

fn materialize(
    plan: &[(String, QpLevel)],
    pairs: &[(String, PathBuf, PathBuf)],
    bench_dir: &Path,
    cfg: &CodecConfig,
) -> Result<Vec<ManifestEntry>> {
    let lookup: BTreeMap<&str, (&PathBuf, &PathBuf)> =
        pairs.iter().map(|(id, c, g)| (id.as_str(), (c, g))).collect();
    let mut cache: Option<(String, RgbImage)> = None;
    let mut entries = Vec::with_capacity(plan.len());
    for (id, qp) in plan {
        let (clean, gt) = lookup[id.as_str()];
        if cache.as_ref().is_none_or(|(cid, _)| cid != id) {
            let img = imageio::load_rgb(clean).map_err(|e| Error::Load {
                id: id.clone(),
                reason: e.to_string(),
            })?;
            cache = Some((id.clone(), img));
        }
        let img = &cache.as_ref().expect("filled above").1;
        let out = codec::compress(img, *qp, cfg)?;
        let dest = bench_dir.join(qp.to_string()).join(format!("{id}.png"));
        imageio::save_rgb(&out, &dest)?;
        entries.push(ManifestEntry {
            id: id.clone(),
            clean_path: relative_to(clean, bench_dir),
            compressed_path: relative_to(&dest, bench_dir),
            gt_path: relative_to(gt, bench_dir),
            qp: *qp,
        });
    }
    Ok(entries)
}

fn build(
    clean_dir: &Path,
    gt_dir: &Path,
    out_root: &Path,
    name: &str,
    cfg: &CodecConfig,
    split: Split,
    seed: u64,
) -> Result<BenchmarkManifest> {
    cfg.validate()?;
    let pairs = pair_by_id(clean_dir, gt_dir)?;
    if pairs.is_empty() {
        log::warn!("no clean images in {}; writing an empty manifest", clean_dir.display());
    }
    let ids: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
    let plan = match split {
        Split::Test => plan_test_entries(&ids, &cfg.level_set),
        Split::Train => assign_train_qps(&ids, &cfg.level_set, seed),
    };
    let bench_dir = out_root.join(name);
    std::fs::create_dir_all(&bench_dir).map_err(|e| Error::io(&bench_dir, e))?;
    let entries = materialize(&plan, &pairs, &bench_dir, cfg)?;
    let manifest = BenchmarkManifest {
        name: name.to_string(),
        split,
        entries,
        codec_record: cfg.clone(),
        seed,
        root: bench_dir.clone(),
    };
    write_manifest(&manifest, &bench_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Compresses every clean image at every level of `cfg.level_set`.
pub fn build_test_benchmark(
    clean_dir: &Path,
    gt_dir: &Path,
    out_root: &Path,
    name: &str,
    cfg: &CodecConfig,
) -> Result<BenchmarkManifest> {
    build(clean_dir, gt_dir, out_root, name, cfg, Split::Test, cfg.rng_seed)
}

/// Compresses every clean image once at a level drawn uniformly with `seed`.
pub fn build_train_benchmark(
    clean_dir: &Path,
    gt_dir: &Path,
    out_root: &Path,
    name: &str,
    cfg: &CodecConfig,
    seed: u64,
) -> Result<BenchmarkManifest> {
    build(clean_dir, gt_dir, out_root, name, cfg, Split::Train, seed)
}

/// Geometric primitives of the synthetic corpus, in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Triangle { pts } => {
                let sign = |a: (f64, f64), b: (f64, f64)| (x - b.0) * (a.1 - b.1) - (a.0 - b.0) * (y - b.1);
                let d1 = sign(pts[0], pts[1]);
                let d2 = sign(pts[1], pts[2]);
                let d3 = sign(pts[2], pts[0]);
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }
}

/// A rendered scene: shapes with fill colours over a textured background.
#[derive(Clone, Debug)]
pub struct Scene {
    pub size: u32,
    pub background: [f64; 3],
    pub shapes: Vec<(Shape, [f64; 3])>,
    pub texture_seed: u64,
}

/// Renders the image and its binary mask (pixel centres tested against the
/// shapes).
pub fn render_scene(scene: &Scene) -> (RgbImage, GrayImage) {
    let n = scene.size;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.texture_seed);
    let (fx, fy, phase): (f64, f64, f64) = (
        rng.random_range(0.05..0.35),
        rng.random_range(0.05..0.35),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let mut img = RgbImage::new(n, n);
    let mut mask = GrayImage::new(n, n);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
            let wave = 18.0 * (fx * px + fy * py + phase).sin();
            let grain: f64 = rng.random_range(-10.0..10.0);
            let inside = scene.shapes.iter().rev().find(|(s, _)| s.contains(px, py));
            let (base, amp) = match inside {
                Some((_, color)) => (*color, 0.35),
                None => (scene.background, 1.0),
            };
            let px_color = base.map(|c| (c + amp * (wave + grain)).round().clamp(0.0, 255.0) as u8);
            img.put_pixel(x, y, Rgb(px_color));
            if inside.is_some() {
                mask.put_pixel(x, y, image::Luma([255]));
            }
        }
    }
    (img, mask)
}

fn random_scene(size: u32, rng: &mut ChaCha8Rng) -> Scene {
    let s = f64::from(size);
    let dark_bg = rng.random_bool(0.5);
    let pick = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| [0; 3].map(|_| rng.random_range(lo..hi));
    let background = if dark_bg { pick(rng, 20.0, 90.0) } else { pick(rng, 165.0, 235.0) };
    let count = rng.random_range(1..=3);
    let mut shapes = Vec::new();
    for _ in 0..count {
        let color = if dark_bg { pick(rng, 170.0, 250.0) } else { pick(rng, 5.0, 85.0) };
        let cx = rng.random_range(0.2 * s..0.8 * s);
        let cy = rng.random_range(0.2 * s..0.8 * s);
        let r = rng.random_range(0.1 * s..0.22 * s);
        let shape = match rng.random_range(0..4) {
            0 => Shape::Disk { cx, cy, r },
            1 => Shape::Rect {
                x0: cx - r,
                y0: cy - r * rng.random_range(0.5..1.0),
                x1: cx + r * rng.random_range(0.5..1.0),
                y1: cy + r,
            },
            2 => Shape::Ellipse {
                cx,
                cy,
                rx: r,
                ry: r * rng.random_range(0.45..0.9),
                angle: rng.random_range(0.0..std::f64::consts::PI),
            },
            _ => {
                let a0: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let pts = [0.0, 2.1, 4.2].map(|o: f64| (cx + 1.3 * r * (a0 + o).cos(), cy + 1.3 * r * (a0 + o).sin()));
                Shape::Triangle { pts }
            }
        };
        shapes.push((shape, color));
    }
    Scene {
        size,
        background,
        shapes,
        texture_seed: rng.random(),
    }
}

/// Writes `n` synthetic images and masks under `out_dir/clean` and
/// `out_dir/gt` (`synth_0000.png`, ...). Returns both directories.
pub fn make_synthetic_corpus(n: usize, size: u32, seed: u64, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if n < 1 {
        return Err(Error::Config("synthetic corpus needs at least one image".into()));
    }
    if size < 32 {
        return Err(Error::Config(format!("synthetic image size {size} < 32")));
    }
    let clean_dir = out_dir.join("clean");
    let gt_dir = out_dir.join("gt");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let (img, mask) = render_scene(&random_scene(size, &mut rng));
        let name = format!("synth_{i:04}.png");
        imageio::save_rgb(&img, &clean_dir.join(&name))?;
        imageio::save_gray(&mask, &gt_dir.join(&name))?;
    }
    Ok((clean_dir, gt_dir))
}

/// Per-channel input normalization applied when batches are assembled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn apply(&self, image: &Tensor) -> Tensor {
        let plane = image.numel() / 3;
        let mut out = image.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = (i / plane) % 3;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        out
    }
}

/// One training or evaluation example, resized; images are `[3, H, W]` in
/// `[0, 1]`, the ground truth `[1, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedSample {
    pub id: String,
    pub qp: QpLevel,
    pub clean: Tensor,
    pub compressed: Tensor,
    pub gt: Tensor,
}

fn rgb_tensor(img: &RgbImage, size: usize) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hwc = imageio::resize_area(&imageio::rgb_to_f64(img), w, h, 3, size, size);
    let plane = size * size;
    let mut chw = vec![0.0; 3 * plane];
    for (i, v) in hwc.iter().enumerate() {
        chw[(i % 3) * plane + i / 3] = *v;
    }
    Tensor::new([3, size, size], chw).expect("sized above")
}

fn gray_tensor(img: &GrayImage, size: usize) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = imageio::resize_area(&imageio::gray_to_f64(img), w, h, 1, size, size)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Tensor::new([1, size, size], data).expect("sized above")
}

pub fn load_sample(manifest: &BenchmarkManifest, entry: &ManifestEntry, target_size: usize) -> Result<CompressedSample> {
    let fail = |e: Error| Error::Load {
        id: entry.id.clone(),
        reason: e.to_string(),
    };
    let clean = imageio::load_rgb(&manifest.resolve(&entry.clean_path)).map_err(fail)?;
    let compressed = imageio::load_rgb(&manifest.resolve(&entry.compressed_path)).map_err(fail)?;
    let gt = imageio::load_gray(&manifest.resolve(&entry.gt_path)).map_err(fail)?;
    if clean.dimensions() != compressed.dimensions() || clean.dimensions() != gt.dimensions() {
        return Err(Error::Load {
            id: entry.id.clone(),
            reason: format!(
                "size mismatch: clean {:?}, compressed {:?}, gt {:?}",
                clean.dimensions(),
                compressed.dimensions(),
                gt.dimensions()
            ),
        });
    }
    Ok(CompressedSample {
        id: entry.id.clone(),
        qp: entry.qp,
        clean: rgb_tensor(&clean, target_size),
        compressed: rgb_tensor(&compressed, target_size),
        gt: gray_tensor(&gt, target_size),
    })
}

/// Loads the entries with the given ids (every level of each id for test
/// manifests), resized to `target_size`². Images stay in `[0, 1]`; use
/// [`stack_images`] to normalize them into a batch.
pub fn load_batch(manifest: &BenchmarkManifest, ids: &[String], target_size: usize) -> Result<Vec<CompressedSample>> {
    let mut out = Vec::new();
    for id in ids {
        let entries: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| &e.id == id).collect();
        if entries.is_empty() {
            return Err(Error::Load {
                id: id.clone(),
                reason: "not in manifest".into(),
            });
        }
        for e in entries {
            out.push(load_sample(manifest, e, target_size)?);
        }
    }
    Ok(out)
}

/// Stacks `[3, H, W]` images into a normalized `[B, 3, H, W]` batch.
pub fn stack_images(images: &[&Tensor], norm: Option<&Normalization>) -> Result<Tensor> {
    stack(images, |t| norm.map_or_else(|| t.clone(), |n| n.apply(t)))
}

/// Stacks `[1, H, W]` masks into `[B, 1, H, W]`.
pub fn stack_masks(masks: &[&Tensor]) -> Result<Tensor> {
    stack(masks, Tensor::clone)
}

fn stack(items: &[&Tensor], f: impl Fn(&Tensor) -> Tensor) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::Shape("cannot stack an empty batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != shape.as_slice() {
            return Err(Error::Shape(format!("batch item {:?} vs {:?}", t.shape(), shape)));
        }
        data.extend_from_slice(f(t).data());
    }
    let mut full = vec![items.len()];
    full.extend(shape);
    Ok(Tensor::new(full, data)?)
}

/// Mean RGB colour over a set of `[3, H, W]` images.
pub fn mean_color<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    for img in images {
        let plane = img.numel() / 3;
        for (c, s) in sum.iter_mut().enumerate() {
            *s += img.data()[c * plane..(c + 1) * plane].iter().sum::<f64>();
        }
        count += plane;
    }
    if count == 0 {
        return [0.5; 3];
    }
    sum.map(|s| s / count as f64)
}

/// Seeded split of ids into (train, validation) with `fraction` held out
/// (at least one when there are two or more ids).
pub fn split_ids(ids: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    use rand::seq::SliceRandom;
    let mut shuffled = ids.to_vec();
    shuffled.sort();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (ids.len() as f64 * fraction).round() as usize;
    if n_val == 0 && fraction > 0.0 && ids.len() >= 2 {
        n_val = 1;
    }
    let val = shuffled.split_off(shuffled.len() - n_val);
    shuffled.sort();
    let mut val = val;
    val.sort();
    (shuffled, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img_{i:05}")).collect()
    }

    #[test]
    fn test_plan_counts() {
        let levels = QpLevel::defaults();
        assert_eq!(plan_test_entries(&ids(4), &levels).len(), 20);
        assert_eq!(plan_test_entries(&ids(1000), &levels).len(), 5000);
        assert!(plan_test_entries(&[], &levels).is_empty());
    }

    #[test]
    fn train_assignment_is_seeded_and_balanced() {
        let levels = QpLevel::defaults();
        assert_eq!(assign_train_qps(&ids(10), &levels, 7), assign_train_qps(&ids(10), &levels, 7));
        assert_eq!(assign_train_qps(&ids(10553), &levels, 1).len(), 10553);
        // Binomial(5000, 1/5): mean 1000, σ = √800 ≈ 28.3, so 3σ ≈ 84.9.
        let plan = assign_train_qps(&ids(5000), &levels, 3);
        let three_sigma = 3.0 * (5000.0f64 * 0.2 * 0.8).sqrt();
        for q in &levels {
            let count = plan.iter().filter(|(_, p)| p == q).count() as f64;
            assert!((count - 1000.0).abs() <= three_sigma, "QP {q}: {count}");
        }
    }

    #[test]
    fn disk_area_matches_geometry() {
        let r = 20.0;
        let scene = Scene {
            size: 64,
            background: [40.0; 3],
            shapes: vec![(Shape::Disk { cx: 32.0, cy: 32.0, r }, [220.0; 3])],
            texture_seed: 1,
        };
        let (_, mask) = render_scene(&scene);
        let area = mask.pixels().filter(|p| p[0] > 127).count() as f64;
        let expect = std::f64::consts::PI * r * r;
        assert!((area - expect).abs() / expect < 0.02, "{area} vs {expect}");
    }

    #[test]
    fn shapes_contain_their_centres() {
        let shapes = [
            Shape::Rect { x0: 1.0, y0: 1.0, x1: 3.0, y1: 3.0 },
            Shape::Ellipse { cx: 2.0, cy: 2.0, rx: 2.0, ry: 1.0, angle: 0.7 },
            Shape::Triangle { pts: [(0.0, 0.0), (4.0, 0.0), (2.0, 4.0)] },
        ];
        for s in &shapes {
            assert!(s.contains(2.0, 2.0));
            assert!(!s.contains(10.0, 10.0));
        }
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let all = ids(20);
        let (tr, va) = split_ids(&all, 0.1, 4);
        assert_eq!(va.len(), 2);
        assert_eq!(tr.len(), 18);
        assert!(va.iter().all(|v| !tr.contains(v)));
        assert_eq!(split_ids(&all, 0.1, 4), (tr, va));
    }

    #[test]
    fn normalization_and_stacking() {
        let img = Tensor::full([3, 2, 2], 0.485);
        let n = Normalization::default().apply(&img);
        assert!(n.data()[..4].iter().all(|v| v.abs() < 1e-12));
        let batch = stack_images(&[&img, &img], None).unwrap();
        assert_eq!(batch.shape(), &[2, 3, 2, 2]);
        assert!(stack_images(&[], None).is_err());
        let c = mean_color([&img]);
        assert!((c[0] - 0.485).abs() < 1e-12);
    }
}
