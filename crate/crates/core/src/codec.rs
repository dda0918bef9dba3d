//! Lossy compression at discrete quantization levels.
//!
//! The internal backend is a block transform codec: replicate-pad to a block
//! multiple, orthonormal 2-D DCT per block and channel, uniform quantization
//! of the AC coefficients with step `2^((QP - 4) / 6)`, inverse transform,
//! crop, round and clamp. The DC coefficient is kept exact, so flat regions
//! survive untouched while texture inside a block is smoothed away and block
//! edges become discontinuous.
//!
//! The external backend shells out to a user-supplied encoder command.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;

/// Quantization levels of the compressed benchmarks.
pub const DEFAULT_LEVELS: [u8; 5] = [22, 27, 32, 37, 42];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QpLevel(u8);

impl QpLevel {
    pub const fn new(value: u8) -> Self {
        QpLevel(value)
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Quantization step of this level: doubles every 6 QP, 1 at QP 4.
    pub fn step(self) -> f64 {
        2f64.powf((f64::from(self.0) - 4.0) / 6.0)
    }

    pub fn defaults() -> Vec<QpLevel> {
        DEFAULT_LEVELS.iter().copied().map(QpLevel).collect()
    }
}

impl fmt::Display for QpLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CodecBackend {
    InternalBlockCodec,
    /// `command` is run through `sh -c` after substituting `{input}`,
    /// `{output}` and `{qp}`.
    ExternalHevcAdapter { command: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub backend: CodecBackend,
    pub block_size: usize,
    pub level_set: Vec<QpLevel>,
    pub rng_seed: u64,
    /// Replaces the QP-derived step. Steps at or below 1 keep every
    /// coefficient, i.e. the codec becomes lossless.
    pub step_override: Option<f64>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            backend: CodecBackend::InternalBlockCodec,
            block_size: 8,
            level_set: QpLevel::defaults(),
            rng_seed: 0,
            step_override: None,
        }
    }
}

impl CodecConfig {
    pub fn lossless() -> Self {
        Self {
            step_override: Some(1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size < 4 {
            return Err(Error::Config(format!("block_size {} < 4", self.block_size)));
        }
        if self.level_set.is_empty() {
            return Err(Error::Config("empty level set".into()));
        }
        if self.level_set.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "level set {:?} is not strictly increasing",
                self.level_values()
            )));
        }
        if let Some(s) = self.step_override {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!("invalid step override {s}")));
            }
        }
        Ok(())
    }

    pub fn level_values(&self) -> Vec<u8> {
        self.level_set.iter().map(|q| q.value()).collect()
    }

    pub fn check_qp(&self, qp: QpLevel) -> Result<()> {
        if self.level_set.contains(&qp) {
            Ok(())
        } else {
            Err(Error::UnsupportedQp {
                qp: qp.value(),
                levels: self.level_values(),
            })
        }
    }

    pub fn quant_step(&self, qp: QpLevel) -> f64 {
        self.step_override.unwrap_or_else(|| qp.step())
    }
}

pub fn compress(image: &RgbImage, qp: QpLevel, cfg: &CodecConfig) -> Result<RgbImage> {
    cfg.validate()?;
    cfg.check_qp(qp)?;
    let (w, h) = image.dimensions();
    let n = cfg.block_size;
    if (w as usize) < n || (h as usize) < n {
        return Err(Error::Shape(format!(
            "image {w}x{h} is smaller than block size {n}"
        )));
    }
    match &cfg.backend {
        CodecBackend::InternalBlockCodec => Ok(block_codec(image, cfg.quant_step(qp), n)),
        CodecBackend::ExternalHevcAdapter { command } => compress_external(image, qp, command),
    }
}

/// Peak signal-to-noise ratio in dB for 8-bit images; `+inf` when identical.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::Shape(format!(
            "psnr of {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    let n = a.as_raw().len();
    if n == 0 {
        return Ok(f64::INFINITY);
    }
    let sse: f64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / n as f64;
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

/// Orthonormal DCT-II matrix, row `u` holds basis function `u`.
struct DctBasis {
    n: usize,
    m: Vec<f64>,
}

impl DctBasis {
    fn new(n: usize) -> Self {
        let mut m = vec![0.0; n * n];
        for u in 0..n {
            let scale = if u == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            for i in 0..n {
                m[u * n + i] = scale
                    * ((2 * i + 1) as f64 * u as f64 * std::f64::consts::PI / (2 * n) as f64).cos();
            }
        }
        Self { n, m }
    }

    /// `out = D · x · Dᵀ` (forward) or `Dᵀ · x · D` (inverse).
    fn apply(&self, x: &[f64], out: &mut [f64], inverse: bool) {
        let n = self.n;
        let d = |r: usize, c: usize| if inverse { self.m[c * n + r] } else { self.m[r * n + c] };
        let mut tmp = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                tmp[r * n + c] = (0..n).map(|k| d(r, k) * x[k * n + c]).sum();
            }
        }
        for r in 0..n {
            for c in 0..n {
                out[r * n + c] = (0..n).map(|k| tmp[r * n + k] * d(c, k)).sum();
            }
        }
    }
}

fn block_codec(image: &RgbImage, step: f64, n: usize) -> RgbImage {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let pw = w.div_ceil(n) * n;
    let ph = h.div_ceil(n) * n;
    let dct = DctBasis::new(n);
    let lossy = step > 1.0;
    let mut out = RgbImage::new(w as u32, h as u32);
    let mut block = vec![0.0; n * n];
    let mut coef = vec![0.0; n * n];
    let mut plane = vec![0.0; pw * ph];
    for ch in 0..3 {
        for y in 0..ph {
            for x in 0..pw {
                plane[y * pw + x] = f64::from(image.get_pixel(x.min(w - 1) as u32, y.min(h - 1) as u32)[ch]);
            }
        }
        for by in (0..ph).step_by(n) {
            for bx in (0..pw).step_by(n) {
                for i in 0..n {
                    block[i * n..(i + 1) * n].copy_from_slice(&plane[(by + i) * pw + bx..(by + i) * pw + bx + n]);
                }
                dct.apply(&block, &mut coef, false);
                if lossy {
                    for c in coef.iter_mut().skip(1) {
                        *c = (*c / step).round() * step;
                    }
                }
                dct.apply(&coef, &mut block, true);
                for i in 0..n {
                    plane[(by + i) * pw + bx..(by + i) * pw + bx + n].copy_from_slice(&block[i * n..(i + 1) * n]);
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                out.get_pixel_mut(x as u32, y as u32)[ch] = plane[y * pw + x].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

fn compress_external(image: &RgbImage, qp: QpLevel, template: &str) -> Result<RgbImage> {
    if template.trim().is_empty() {
        return Err(Error::BackendMissing("no encoder command configured".into()));
    }
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let input = dir.path().join("input.png");
    let output = dir.path().join("output.png");
    imageio::save_rgb(image, &input)?;
    let cmd = template
        .replace("{input}", &input.to_string_lossy())
        .replace("{output}", &output.to_string_lossy())
        .replace("{qp}", &qp.to_string());
    let result = Command::new("sh").arg("-c").arg(&cmd).output();
    let result = match result {
        Ok(r) => r,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::BackendMissing("`sh` not found".into()))
        }
        Err(e) => return Err(Error::io("sh", e)),
    };
    if result.status.code() == Some(127) {
        return Err(Error::BackendMissing(format!("encoder command not found: {template}")));
    }
    if !result.status.success() {
        return Err(Error::ExternalCodec(format!(
            "`{cmd}` exited with {}: {}",
            result.status,
            String::from_utf8_lossy(&result.stderr).trim()
        )));
    }
    if !output.exists() {
        return Err(Error::ExternalCodec(format!("`{cmd}` produced no output file")));
    }
    let decoded = imageio::load_rgb(&output)?;
    if decoded.dimensions() != image.dimensions() {
        return Err(Error::ExternalCodec(format!(
            "output is {:?}, input was {:?}",
            decoded.dimensions(),
            image.dimensions()
        )));
    }
    Ok(decoded)
}

/// Compresses every PNG in `input_dir` into `output_dir` (same file names).
/// Returns the written paths.
pub fn compress_dir(input_dir: &Path, output_dir: &Path, qp: QpLevel, cfg: &CodecConfig) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let mut written = Vec::new();
    for path in imageio::list_images(input_dir)? {
        let img = imageio::load_rgb(&path)?;
        let out = compress(&img, qp, cfg)?;
        let dest = output_dir.join(path.file_name().expect("listed files have names")).with_extension("png");
        imageio::save_rgb(&out, &dest)?;
        written.push(dest);
    }
    Ok(written)
}
