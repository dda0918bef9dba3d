//! Image file helpers and small raster utilities shared by the pipeline.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    Ok(img.to_rgb8())
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    Ok(img.to_luma8())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    img.save(path)?;
    Ok(())
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    img.save(path)?;
    Ok(())
}

/// Sorted list of `.png`/`.jpg`/`.jpeg`/`.bmp` files directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
            .unwrap_or(false);
        if path.is_file() && is_image {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// File stem used as a sample id.
pub fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Area-averaging resize of a channel-interleaved `f64` raster.
/// Every output pixel is the coverage-weighted mean of the input pixels
/// its footprint overlaps, so the operation preserves the global mean.
pub fn resize_area(src: &[f64], w: usize, h: usize, channels: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    assert_eq!(src.len(), w * h * channels, "raster size");
    assert!(w > 0 && h > 0 && out_w > 0 && out_h > 0, "empty raster");
    let xs = weights(w, out_w);
    let ys = weights(h, out_h);
    let mut tmp = vec![0.0; h * out_w * channels];
    for y in 0..h {
        for (ox, taps) in xs.iter().enumerate() {
            for &(ix, wt) in taps {
                for c in 0..channels {
                    tmp[(y * out_w + ox) * channels + c] += wt * src[(y * w + ix) * channels + c];
                }
            }
        }
    }
    let mut out = vec![0.0; out_h * out_w * channels];
    for (oy, taps) in ys.iter().enumerate() {
        for &(iy, wt) in taps {
            for x in 0..out_w {
                for c in 0..channels {
                    out[(oy * out_w + x) * channels + c] += wt * tmp[(iy * out_w + x) * channels + c];
                }
            }
        }
    }
    out
}

/// Per output index, the input indices and normalized overlap weights.
fn weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = lo + scale;
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n_in {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, overlap / scale));
                }
                i += 1;
            }
            taps
        })
        .collect()
}

pub fn rgb_to_f64(img: &RgbImage) -> Vec<f64> {
    img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect()
}

pub fn gray_to_f64(img: &GrayImage) -> Vec<f64> {
    img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect()
}

pub fn f64_to_gray(values: &[f64], w: usize, h: usize) -> GrayImage {
    assert_eq!(values.len(), w * h, "raster size");
    let raw = values
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer sized above")
}
