//! Evaluation harness: scores a checkpoint on compressed benchmarks (and
//! optionally their clean originals), persists per-record and aggregate
//! tables, draws robustness curves across QP levels, compares reports and
//! dumps graph-assignment maps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use cisod_tensor::nn::{BindMode, Binder};
use cisod_tensor::{Tape, Tensor};
use image::{GrayImage, Luma};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{file_sha256, load_checkpoint};
use crate::dataset::{load_sample, read_manifest, stack_images, CompressedSample, Normalization};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate_pair, AggregateRow, EvalRecord, Level, Map};
use crate::net::NetworkConfig;
use crate::train::predict_images;

/// Version tag of the on-disk report layout.
pub const REPORT_SCHEMA: &str = "cisod-report/1";
pub const RECORDS_FILE: &str = "records.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const META_FILE: &str = "report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Inputs and ground truth are resized to `image_size`² and scored at
    /// that resolution.
    pub image_size: usize,
    pub batch_size: usize,
    pub normalization: Normalization,
    /// Also score the clean image of every id once (level `clean`).
    pub include_clean: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            image_size: 256,
            batch_size: 8,
            normalization: Normalization::default(),
            include_clean: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub schema: String,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub network: NetworkConfig,
    /// Training metadata stored in the checkpoint.
    pub checkpoint_extra: serde_json::Value,
    pub options: EvalOptions,
    pub seed: u64,
    pub benchmarks: Vec<String>,
    pub wall_time_s: f64,
    pub created_unix: u64,
    /// False when some entries could not be scored; they are listed in
    /// `missing`.
    pub complete: bool,
    pub missing: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkReport {
    pub meta: RunMetadata,
    pub records: Vec<EvalRecord>,
    pub aggregate: Vec<AggregateRow>,
}

fn score(
    dataset: &str,
    qp: Option<u8>,
    samples: &[(&CompressedSample, &Tensor)],
    net: &crate::net::SodNet,
    opts: &EvalOptions,
) -> Result<Vec<EvalRecord>> {
    let inputs: Vec<&Tensor> = samples.iter().map(|(_, t)| *t).collect();
    let preds = predict_images(net, &inputs, &opts.normalization, opts.batch_size)?;
    preds
        .iter()
        .zip(samples)
        .map(|(p, (s, _))| {
            let n = opts.image_size;
            evaluate_pair(
                dataset,
                &s.id,
                qp,
                &Map::new(p.data(), n, n)?,
                &Map::new(s.gt.data(), n, n)?,
            )
        })
        .collect()
}

/// Scores every entry of every manifest with the checkpoint in eval mode.
/// Entries that fail to load are listed in the metadata and the report is
/// marked incomplete.
pub fn evaluate(checkpoint: &Path, manifests: &[PathBuf], opts: &EvalOptions) -> Result<BenchmarkReport> {
    if opts.image_size == 0 || !opts.image_size.is_multiple_of(32) {
        return Err(Error::Config(format!(
            "image_size must be a positive multiple of 32, got {}",
            opts.image_size
        )));
    }
    let start = Instant::now();
    let (net, meta) = load_checkpoint(checkpoint)?;
    let mut records = Vec::new();
    let mut missing = Vec::new();
    let mut names = Vec::new();
    for path in manifests {
        let manifest = read_manifest(path)?;
        names.push(manifest.name.clone());
        let mut loaded = Vec::new();
        for entry in &manifest.entries {
            match load_sample(&manifest, entry, opts.image_size) {
                Ok(s) => loaded.push(s),
                Err(e) => missing.push(format!("{}/{}@{}: {e}", manifest.name, entry.id, entry.qp)),
            }
        }
        // Score level by level so batches never mix QPs.
        let mut by_qp: BTreeMap<u8, Vec<(&CompressedSample, &Tensor)>> = BTreeMap::new();
        for s in &loaded {
            by_qp.entry(s.qp.value()).or_default().push((s, &s.compressed));
        }
        let mut manifest_records = Vec::new();
        for (qp, group) in &by_qp {
            manifest_records.extend(score(&manifest.name, Some(*qp), group, &net, opts)?);
        }
        if opts.include_clean {
            let mut seen = BTreeSet::new();
            let clean: Vec<(&CompressedSample, &Tensor)> = loaded
                .iter()
                .filter(|s| seen.insert(s.id.clone()))
                .map(|s| (s, &s.clean))
                .collect();
            manifest_records.extend(score(&manifest.name, None, &clean, &net, opts)?);
        }
        manifest_records.sort_by(|a, b| (a.qp.is_some(), a.qp, &a.id).cmp(&(b.qp.is_some(), b.qp, &b.id)));
        records.extend(manifest_records);
    }
    if !missing.is_empty() {
        log::warn!("{} entries could not be scored; report marked incomplete", missing.len());
    }
    let aggregate = aggregate(&records);
    Ok(BenchmarkReport {
        meta: RunMetadata {
            schema: REPORT_SCHEMA.to_string(),
            checkpoint: checkpoint.to_path_buf(),
            checkpoint_sha256: file_sha256(checkpoint)?,
            seed: meta.network.seed,
            network: meta.network,
            checkpoint_extra: meta.extra,
            options: opts.clone(),
            benchmarks: names,
            wall_time_s: start.elapsed().as_secs_f64(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            complete: missing.is_empty(),
            missing,
        },
        records,
        aggregate,
    })
}

const AGGREGATE_HEADER: [&str; 7] = ["dataset", "level", "count", "S_m", "F_max", "MAE", "f_excluded"];

fn fmt_opt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn parse_opt(s: &str) -> Result<f64> {
    if s.is_empty() {
        Ok(f64::NAN)
    } else {
        s.parse().map_err(|_| Error::Report(format!("bad number `{s}`")))
    }
}

pub fn write_records_csv(records: &[EvalRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<EvalRecord>, _>>()?)
}

pub fn write_aggregate_csv(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(AGGREGATE_HEADER)?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.level.to_string(),
            r.count.to_string(),
            fmt_opt(r.s_m),
            fmt_opt(r.f_max),
            fmt_opt(r.mae),
            r.f_excluded.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_aggregate_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != AGGREGATE_HEADER.len() {
            return Err(Error::Report(format!("aggregate row with {} fields", rec.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| Error::Report(format!("bad count `{s}`")));
        rows.push(AggregateRow {
            dataset: rec[0].to_string(),
            level: rec[1].parse()?,
            count: int(&rec[2])?,
            s_m: parse_opt(&rec[3])?,
            f_max: parse_opt(&rec[4])?,
            mae: parse_opt(&rec[5])?,
            f_excluded: int(&rec[6])?,
        });
    }
    Ok(rows)
}

/// Wide table: one row per level, one `S_m F_max MAE` column group per
/// dataset.
pub fn format_table(rows: &[AggregateRow]) -> String {
    let datasets: Vec<&str> = rows
        .iter()
        .map(|r| r.dataset.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let levels: BTreeSet<Level> = rows.iter().map(|r| r.level).collect();
    let cell = |v: f64| if v.is_nan() { "-".to_string() } else { format!("{v:.3}") };
    let mut out = String::new();
    let _ = write!(out, "{:<8}", "");
    for d in &datasets {
        let _ = write!(out, " | {d:^20}");
    }
    out.push('\n');
    let _ = write!(out, "{:<8}", "level");
    for _ in &datasets {
        let _ = write!(out, " | {:>6} {:>6} {:>6}", "S_m", "F_max", "MAE");
    }
    out.push('\n');
    out.push_str(&"-".repeat(8 + datasets.len() * 23));
    out.push('\n');
    for level in levels {
        let _ = write!(out, "{:<8}", level.to_string());
        for d in &datasets {
            match rows.iter().find(|r| r.dataset == *d && r.level == level) {
                Some(r) => {
                    let _ = write!(out, " | {:>6} {:>6} {:>6}", cell(r.s_m), cell(r.f_max), cell(r.mae));
                }
                None => {
                    let _ = write!(out, " | {:>6} {:>6} {:>6}", "-", "-", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

fn summary_text(report: &BenchmarkReport) -> String {
    let m = &report.meta;
    let mut out = String::new();
    let _ = writeln!(out, "schema      {}", m.schema);
    let _ = writeln!(out, "checkpoint  {} (sha256 {})", m.checkpoint.display(), m.checkpoint_sha256);
    let _ = writeln!(out, "benchmarks  {}", m.benchmarks.join(", "));
    let _ = writeln!(out, "records     {}", report.records.len());
    let _ = writeln!(out, "wall time   {:.2} s", m.wall_time_s);
    if !m.complete {
        let _ = writeln!(out, "status      INCOMPLETE ({} entries missing)", m.missing.len());
    }
    out.push('\n');
    out.push_str(&format_table(&report.aggregate));
    out
}

/// Writes `records.csv`, `aggregate.csv`, `summary.txt` and `report.json`
/// into `dir`.
pub fn write_report(report: &BenchmarkReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_records_csv(&report.records, &dir.join(RECORDS_FILE))?;
    write_aggregate_csv(&report.aggregate, &dir.join(AGGREGATE_FILE))?;
    let summary = dir.join(SUMMARY_FILE);
    std::fs::write(&summary, summary_text(report)).map_err(|e| Error::io(&summary, e))?;
    let meta = dir.join(META_FILE);
    std::fs::write(&meta, serde_json::to_vec_pretty(&report.meta)?).map_err(|e| Error::io(&meta, e))
}

/// Reads a report directory; refuses unknown schema versions.
pub fn read_report(dir: &Path) -> Result<BenchmarkReport> {
    let meta_path = dir.join(META_FILE);
    let bytes = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    match value.get("schema").and_then(|s| s.as_str()) {
        Some(REPORT_SCHEMA) => {}
        other => {
            return Err(Error::Report(format!(
                "{} has report schema {other:?}, expected {REPORT_SCHEMA}",
                dir.display()
            )))
        }
    }
    Ok(BenchmarkReport {
        meta: serde_json::from_value(value)?,
        records: read_records_csv(&dir.join(RECORDS_FILE))?,
        aggregate: read_aggregate_csv(&dir.join(AGGREGATE_FILE))?,
    })
}

/// Largest absolute difference between stored aggregates and aggregates
/// recomputed from the per-record rows; `None` if the row sets differ.
pub fn aggregate_discrepancy(report: &BenchmarkReport) -> Option<f64> {
    let fresh = aggregate(&report.records);
    if fresh.len() != report.aggregate.len() {
        return None;
    }
    let diff = |a: f64, b: f64| {
        if a.is_nan() && b.is_nan() {
            Some(0.0)
        } else if a.is_nan() || b.is_nan() {
            None
        } else {
            Some((a - b).abs())
        }
    };
    let mut worst: f64 = 0.0;
    for (a, b) in fresh.iter().zip(&report.aggregate) {
        if a.dataset != b.dataset || a.level != b.level || a.count != b.count {
            return None;
        }
        for d in [diff(a.s_m, b.s_m)?, diff(a.f_max, b.f_max)?, diff(a.mae, b.mae)?] {
            worst = worst.max(d);
        }
    }
    Some(worst)
}

fn font_family() -> Result<&'static str> {
    static FONT: OnceLock<std::result::Result<(), String>> = OnceLock::new();
    let registered = FONT.get_or_init(|| {
        let candidates: Vec<PathBuf> = std::env::var_os("CISOD_FONT")
            .map(PathBuf::from)
            .into_iter()
            .chain(
                [
                    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
                    "/usr/share/fonts/TTF/DejaVuSans.ttf",
                    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
                    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
                    "/Library/Fonts/Arial.ttf",
                    "C:\\Windows\\Fonts\\arial.ttf",
                ]
                .map(PathBuf::from),
            )
            .collect();
        for path in &candidates {
            if let Ok(bytes) = std::fs::read(path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return Ok(());
                }
            }
        }
        Err("no usable TrueType font found; set CISOD_FONT to a .ttf file".to_string())
    });
    registered.clone().map(|_| "sans-serif").map_err(Error::Report)
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Report(format!("plotting failed: {e}"))
}

/// One row of panels per dataset with S_m, max F and MAE against QP
/// (ascending from left to right); the clean score, when present, is drawn
/// as a dashed horizontal reference.
pub fn emit_robustness_plot(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let family = font_family()?;
    let datasets: Vec<&str> = rows
        .iter()
        .filter(|r| matches!(r.level, Level::Qp(_)))
        .map(|r| r.dataset.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if datasets.is_empty() {
        return Err(Error::Report("no per-QP rows to plot".into()));
    }
    let (panel_w, panel_h) = (360u32, 280u32);
    let root = BitMapBackend::new(path, (panel_w * 3, panel_h * datasets.len() as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((datasets.len(), 3));
    type Getter = fn(&AggregateRow) -> f64;
    let metrics: [(&str, Getter); 3] = [("S_m", |r| r.s_m), ("max F", |r| r.f_max), ("MAE", |r| r.mae)];
    for (d, dataset) in datasets.iter().enumerate() {
        let mut qp_rows: Vec<&AggregateRow> = rows
            .iter()
            .filter(|r| r.dataset == *dataset && matches!(r.level, Level::Qp(_)))
            .collect();
        qp_rows.sort_by_key(|r| r.level);
        let qps: Vec<u8> = qp_rows
            .iter()
            .map(|r| match r.level {
                Level::Qp(q) => q,
                _ => unreachable!(),
            })
            .collect();
        let clean = rows.iter().find(|r| r.dataset == *dataset && r.level == Level::Clean);
        for (m, (label, get)) in metrics.iter().enumerate() {
            let values: Vec<f64> = qp_rows.iter().map(|r| get(r)).collect();
            let mut lo = values.iter().chain(clean.map(get).as_ref()).copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
            let mut hi = values.iter().chain(clean.map(get).as_ref()).copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() {
                (lo, hi) = (0.0, 1.0);
            }
            let pad = ((hi - lo) * 0.15).max(0.005);
            let (x0, x1) = (f64::from(qps[0]) - 2.0, f64::from(*qps.last().expect("non-empty")) + 2.0);
            let mut chart = ChartBuilder::on(&panels[d * 3 + m])
                .caption(format!("{dataset} — {label}"), (family, 16))
                .margin(8)
                .x_label_area_size(30)
                .y_label_area_size(48)
                .build_cartesian_2d(x0..x1, (lo - pad)..(hi + pad))
                .map_err(plot_err)?;
            chart
                .configure_mesh()
                .x_desc("QP")
                .x_labels(qps.len() + 2)
                .x_label_formatter(&|x| format!("{x:.0}"))
                .y_label_formatter(&|y| format!("{y:.3}"))
                .label_style((family, 12))
                .draw()
                .map_err(plot_err)?;
            let points: Vec<(f64, f64)> = qps.iter().map(|&q| f64::from(q)).zip(values.iter().copied()).collect();
            chart
                .draw_series(LineSeries::new(points.clone(), BLUE.stroke_width(2)))
                .map_err(plot_err)?;
            chart
                .draw_series(points.iter().map(|&p| Circle::new(p, 3, BLUE.filled())))
                .map_err(plot_err)?;
            if let Some(c) = clean.map(get).filter(|v| v.is_finite()) {
                chart
                    .draw_series(DashedLineSeries::new(vec![(x0, c), (x1, c)], 6, 4, RED.stroke_width(1)))
                    .map_err(plot_err)?;
            }
        }
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Allowed degradation per metric before a cell is flagged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub s_m: f64,
    pub f_max: f64,
    pub mae: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            s_m: 0.005,
            f_max: 0.005,
            mae: 0.005,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaCell {
    /// Index of the compared report (1-based; report 0 is the baseline).
    pub report: usize,
    pub dataset: String,
    pub level: Level,
    pub metric: &'static str,
    pub baseline: f64,
    pub value: f64,
    pub delta: f64,
    /// The value moved in the worse direction by more than the tolerance.
    pub regression: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub cells: Vec<DeltaCell>,
    /// `(report, dataset, level)` rows present in the baseline only.
    pub unmatched: Vec<(usize, String, Level)>,
}

impl Comparison {
    pub fn regressions(&self) -> impl Iterator<Item = &DeltaCell> {
        self.cells.iter().filter(|c| c.regression)
    }

    pub fn format(&self) -> String {
        let mut out = format!(
            "{:<3} {:<16} {:<7} {:<6} {:>9} {:>9} {:>10}  flag\n",
            "#", "dataset", "level", "metric", "baseline", "value", "delta"
        );
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{:<3} {:<16} {:<7} {:<6} {:>9.4} {:>9.4} {:>+10.4}  {}",
                c.report,
                c.dataset,
                c.level.to_string(),
                c.metric,
                c.baseline,
                c.value,
                c.delta,
                if c.regression { "REGRESSION" } else { "" }
            );
        }
        for (i, d, l) in &self.unmatched {
            let _ = writeln!(out, "{i:<3} {d:<16} {:<7} missing in this report", l.to_string());
        }
        out
    }
}

/// Side-by-side deltas of every report against the first one. Higher is
/// better for S_m and max F, lower for MAE.
pub fn compare(reports: &[BenchmarkReport], tol: &Tolerance) -> Result<Comparison> {
    let base = reports
        .first()
        .ok_or_else(|| Error::Report("nothing to compare".into()))?;
    for r in reports {
        if r.meta.schema != base.meta.schema || r.meta.schema != REPORT_SCHEMA {
            return Err(Error::Report(format!(
                "report schemas differ: {} vs {}",
                base.meta.schema, r.meta.schema
            )));
        }
    }
    let mut cells = Vec::new();
    let mut unmatched = Vec::new();
    for (i, other) in reports.iter().enumerate().skip(1) {
        for b in &base.aggregate {
            let Some(o) = other
                .aggregate
                .iter()
                .find(|o| o.dataset == b.dataset && o.level == b.level)
            else {
                unmatched.push((i, b.dataset.clone(), b.level));
                continue;
            };
            let specs: [(&'static str, f64, f64, f64, bool); 3] = [
                ("S_m", b.s_m, o.s_m, tol.s_m, true),
                ("F_max", b.f_max, o.f_max, tol.f_max, true),
                ("MAE", b.mae, o.mae, tol.mae, false),
            ];
            for (metric, bv, ov, t, higher_better) in specs {
                let delta = if bv.is_nan() && ov.is_nan() { 0.0 } else { ov - bv };
                let worse = if higher_better { -delta } else { delta };
                cells.push(DeltaCell {
                    report: i,
                    dataset: b.dataset.clone(),
                    level: b.level,
                    metric,
                    baseline: bv,
                    value: ov,
                    delta,
                    regression: worse > t || delta.is_nan(),
                });
            }
        }
    }
    Ok(Comparison { cells, unmatched })
}

/// Writes the soft node-assignment maps of the graph reasoning block for
/// every image as grayscale PNGs (`<id>_part_nodeNN.png`,
/// `<id>_location_nodeNN.png`), each scaled to its own maximum. Returns the
/// files written.
pub fn dump_graphs(checkpoint: &Path, images: &[PathBuf], size: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (net, _) = load_checkpoint(checkpoint)?;
    if !net.config.use_lgr {
        return Err(Error::Config("checkpoint was built without graph reasoning".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let norm = Normalization::default();
    let mut written = Vec::new();
    for path in images {
        let rgb = crate::imageio::load_rgb(path)?;
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let hwc = crate::imageio::resize_area(&crate::imageio::rgb_to_f64(&rgb), w, h, 3, size, size);
        let plane = size * size;
        let mut chw = vec![0.0; 3 * plane];
        for (i, v) in hwc.iter().enumerate() {
            chw[(i % 3) * plane + i / 3] = *v;
        }
        let x = stack_images(&[&Tensor::new([3, size, size], chw)?], Some(&norm))?;
        let tape = Tape::new();
        let b = Binder::new(&tape, &net.store, BindMode::EVAL);
        let out = net.forward(&b, &tape.constant(x), (size, size))?;
        let graph = out.graph.as_ref().expect("graph reasoning enabled");
        let id = crate::imageio::stem(path);
        for (kind, m, map) in [("part", &graph.m_p, &out.s_p), ("location", &graph.m_l, &out.s_l)] {
            let s = map.shape();
            let (mh, mw) = (s[2], s[3]);
            let m = m.value();
            let nodes = m.shape()[2];
            for n in 0..nodes {
                let vals: Vec<f64> = (0..mh * mw).map(|p| m.data()[p * nodes + n]).collect();
                let max = vals.iter().copied().fold(0.0, f64::max);
                let img = GrayImage::from_fn(mw as u32, mh as u32, |x, y| {
                    let v = vals[y as usize * mw + x as usize];
                    Luma([if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 }])
                });
                let file = out_dir.join(format!("{id}_{kind}_node{n:02}.png"));
                img.save(&file)?;
                written.push(file);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(dataset: &str, level: Level, s: f64, f: f64, m: f64) -> AggregateRow {
        AggregateRow {
            dataset: dataset.into(),
            level,
            count: 1,
            s_m: s,
            f_max: f,
            mae: m,
            f_excluded: 0,
        }
    }

    fn report(rows: Vec<AggregateRow>) -> BenchmarkReport {
        BenchmarkReport {
            meta: RunMetadata {
                schema: REPORT_SCHEMA.into(),
                checkpoint: PathBuf::from("x"),
                checkpoint_sha256: String::new(),
                network: NetworkConfig::default(),
                checkpoint_extra: serde_json::Value::Null,
                options: EvalOptions::default(),
                seed: 0,
                benchmarks: vec![],
                wall_time_s: 0.0,
                created_unix: 0,
                complete: true,
                missing: vec![],
            },
            records: vec![],
            aggregate: rows,
        }
    }

    #[test]
    fn self_comparison_has_zero_deltas() {
        let r = report(vec![row("a", Level::Qp(22), 0.8, 0.7, 0.1), row("a", Level::Clean, 0.9, 0.8, 0.05)]);
        let c = compare(&[r.clone(), r], &Tolerance::default()).unwrap();
        assert_eq!(c.cells.len(), 6);
        assert!(c.cells.iter().all(|c| c.delta == 0.0 && !c.regression));
    }

    #[test]
    fn one_shifted_value_flags_one_cell() {
        let a = report(vec![row("a", Level::Qp(22), 0.8, 0.7, 0.1), row("a", Level::Qp(27), 0.7, 0.6, 0.2)]);
        let mut b = a.clone();
        b.aggregate[1].mae += 0.05;
        let c = compare(&[a, b], &Tolerance::default()).unwrap();
        let flagged: Vec<_> = c.regressions().collect();
        assert_eq!(flagged.len(), 1);
        assert_eq!((flagged[0].metric, flagged[0].level), ("MAE", Level::Qp(27)));
    }

    #[test]
    fn improvements_are_not_flagged() {
        let a = report(vec![row("a", Level::Qp(22), 0.8, 0.7, 0.1)]);
        let mut b = a.clone();
        b.aggregate[0].s_m += 0.1;
        b.aggregate[0].mae -= 0.05;
        assert_eq!(compare(&[a, b], &Tolerance::default()).unwrap().regressions().count(), 0);
    }

    #[test]
    fn mismatched_schema_is_refused() {
        let a = report(vec![]);
        let mut b = a.clone();
        b.meta.schema = "cisod-report/0".into();
        assert!(matches!(compare(&[a, b], &Tolerance::default()), Err(Error::Report(_))));
    }

    #[test]
    fn aggregate_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            row("a", Level::Clean, 0.9, f64::NAN, 0.05),
            row("a", Level::Qp(42), 0.123456789012345, 0.7, 0.1),
            row("a", Level::QpMean, 0.5, 0.6, 0.2),
        ];
        let path = dir.path().join("agg.csv");
        write_aggregate_csv(&rows, &path).unwrap();
        let back = read_aggregate_csv(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert!(back[0].f_max.is_nan());
        assert_eq!(back[1], rows[1]);
        assert_eq!(back[2].level, Level::QpMean);
    }

    #[test]
    fn table_lists_levels_in_order() {
        let t = format_table(&[
            row("a", Level::QpMean, 0.5, 0.6, 0.2),
            row("a", Level::Qp(22), 0.8, 0.7, 0.1),
            row("a", Level::Clean, 0.9, 0.8, 0.05),
        ]);
        let clean = t.find("clean").unwrap();
        let qp = t.find("QP22").unwrap();
        let avg = t.find("QP-avg").unwrap();
        assert!(clean < qp && qp < avg);
    }
}
