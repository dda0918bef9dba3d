//! Saliency evaluation metrics (MAE, max F-measure, S-measure) and their
//! aggregation across datasets and quantization levels.
//!
//! Maps are flat row-major `f64` slices in `[0, 1]` with explicit height and
//! width. Ground truth is binarized at `0.5` where a metric needs it.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA2: f64 = 0.3;
/// Number of binarization thresholds `k / 255`, `k = 0..254`.
pub const THRESHOLDS: usize = 255;
const S_ALPHA: f64 = 0.5;

/// A row-major single-channel map.
#[derive(Clone, Copy, Debug)]
pub struct Map<'a> {
    pub data: &'a [f64],
    pub height: usize,
    pub width: usize,
}

impl<'a> Map<'a> {
    pub fn new(data: &'a [f64], height: usize, width: usize) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(Error::Shape(format!(
                "map of {} values is not {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { data, height, width })
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

fn check_pair(pred: &Map<'_>, gt: &Map<'_>) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

pub fn mae(pred: &Map<'_>, gt: &Map<'_>) -> Result<f64> {
    check_pair(pred, gt)?;
    let total: f64 = pred.data.iter().zip(gt.data).map(|(p, g)| (p - g).abs()).sum();
    Ok(total / pred.data.len() as f64)
}

/// True-positive, predicted-positive counts per threshold and the number
/// of ground-truth positives.
pub struct ThresholdCounts {
    pub tp: Vec<u64>,
    pub predicted: Vec<u64>,
    pub positives: u64,
}

impl ThresholdCounts {
    pub fn new(pred: &Map<'_>, gt: &Map<'_>) -> Result<Self> {
        check_pair(pred, gt)?;
        // Histogram over the bucket of the highest threshold each value clears.
        let mut hist_all = vec![0u64; THRESHOLDS + 1];
        let mut hist_fg = vec![0u64; THRESHOLDS + 1];
        let mut positives = 0;
        for (&p, &g) in pred.data.iter().zip(gt.data) {
            // Number of thresholds k/255 strictly below p.
            let cleared = (0..THRESHOLDS).take_while(|&k| p > k as f64 / 255.0).count();
            hist_all[cleared] += 1;
            if g > 0.5 {
                hist_fg[cleared] += 1;
                positives += 1;
            }
        }
        let mut tp = vec![0u64; THRESHOLDS];
        let mut predicted = vec![0u64; THRESHOLDS];
        let (mut acc_all, mut acc_fg) = (0, 0);
        for k in (0..THRESHOLDS).rev() {
            acc_all += hist_all[k + 1];
            acc_fg += hist_fg[k + 1];
            tp[k] = acc_fg;
            predicted[k] = acc_all;
        }
        Ok(Self { tp, predicted, positives })
    }

    /// Precision and recall per threshold; empty predictions have
    /// precision 0.
    pub fn precision_recall(&self) -> Vec<(f64, f64)> {
        self.tp
            .iter()
            .zip(&self.predicted)
            .map(|(&tp, &pp)| {
                let p = if pp == 0 { 0.0 } else { tp as f64 / pp as f64 };
                let r = if self.positives == 0 { 0.0 } else { tp as f64 / self.positives as f64 };
                (p, r)
            })
            .collect()
    }
}

pub fn f_beta(precision: f64, recall: f64) -> f64 {
    let den = BETA2 * precision + recall;
    if den <= 0.0 {
        0.0
    } else {
        (1.0 + BETA2) * precision * recall / den
    }
}

/// Maximum F-measure over the threshold sweep; `None` when the ground truth
/// has no foreground (the metric is undefined there).
pub fn f_measure_max(pred: &Map<'_>, gt: &Map<'_>) -> Result<Option<f64>> {
    let counts = ThresholdCounts::new(pred, gt)?;
    if counts.positives == 0 {
        return Ok(None);
    }
    Ok(Some(
        counts
            .precision_recall()
            .into_iter()
            .map(|(p, r)| f_beta(p, r))
            .fold(0.0, f64::max),
    ))
}

/// Dataset-level alternative: precision and recall are averaged over the
/// images per threshold before taking the maximum F. Images without
/// foreground are skipped.
pub fn f_measure_max_curve(pairs: &[(Map<'_>, Map<'_>)]) -> Result<Option<f64>> {
    let mut sum = vec![(0.0, 0.0); THRESHOLDS];
    let mut n = 0usize;
    for (pred, gt) in pairs {
        let counts = ThresholdCounts::new(pred, gt)?;
        if counts.positives == 0 {
            continue;
        }
        for (acc, (p, r)) in sum.iter_mut().zip(counts.precision_recall()) {
            acc.0 += p;
            acc.1 += r;
        }
        n += 1;
    }
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(
        sum.into_iter()
            .map(|(p, r)| f_beta(p / n as f64, r / n as f64))
            .fold(0.0, f64::max),
    ))
}

/// Round half away from zero.
fn round_half_away(v: f64) -> usize {
    (v.abs() + 0.5).floor() as usize
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

fn s_object(pred: &Map<'_>, gt: &[bool]) -> f64 {
    let fg: Vec<f64> = pred.data.iter().zip(gt).filter(|(_, &g)| g).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred.data.iter().zip(gt).filter(|(_, &g)| !g).map(|(&p, _)| 1.0 - p).collect();
    let u = fg.len() as f64 / gt.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// SSIM-style similarity of one region with global statistics.
fn region_similarity(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let x = pred.iter().sum::<f64>() / nf;
    let y = gt.iter().sum::<f64>() / nf;
    let denom = nf - 1.0 + f64::EPSILON;
    let sx2 = pred.iter().map(|p| (p - x).powi(2)).sum::<f64>() / denom;
    let sy2 = gt.iter().map(|g| (g - y).powi(2)).sum::<f64>() / denom;
    let sxy = pred.iter().zip(gt).map(|(p, g)| (p - x) * (g - y)).sum::<f64>() / denom;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pred: &Map<'_>, gt: &[bool]) -> f64 {
    let (rows, cols) = (pred.height, pred.width);
    let total = gt.iter().filter(|&&g| g).count() as f64;
    // 1-based centroid; the split puts rows/cols `< cy`/`< cx` (0-based) on
    // the top/left.
    let (cx, cy) = if total == 0.0 {
        (round_half_away(cols as f64 / 2.0), round_half_away(rows as f64 / 2.0))
    } else {
        let (mut sx, mut sy) = (0.0, 0.0);
        for y in 0..rows {
            for x in 0..cols {
                if gt[y * cols + x] {
                    sx += (x + 1) as f64;
                    sy += (y + 1) as f64;
                }
            }
        }
        (round_half_away(sx / total), round_half_away(sy / total))
    };
    let area = (rows * cols) as f64;
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((cols - cx) * cy) as f64 / area;
    let w3 = (cx * (rows - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let block = |y0: usize, y1: usize, x0: usize, x1: usize| {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                p.push(pred.at(y, x));
                g.push(if gt[y * cols + x] { 1.0 } else { 0.0 });
            }
        }
        region_similarity(&p, &g)
    };
    w1 * block(0, cy, 0, cx) + w2 * block(0, cy, cx, cols) + w3 * block(cy, rows, 0, cx) + w4 * block(cy, rows, cx, cols)
}

/// Structure measure `0.5·S_object + 0.5·S_region`, clamped at 0. Ground
/// truth without foreground (or without background) compares the mean
/// prediction against the trivial map.
pub fn s_measure(pred: &Map<'_>, gt: &Map<'_>) -> Result<f64> {
    check_pair(pred, gt)?;
    let mask: Vec<bool> = gt.data.iter().map(|&g| g > 0.5).collect();
    let coverage = mask.iter().filter(|&&g| g).count() as f64 / mask.len() as f64;
    let mean_pred = pred.data.iter().sum::<f64>() / pred.data.len() as f64;
    if coverage == 0.0 {
        return Ok(1.0 - mean_pred);
    }
    if coverage == 1.0 {
        return Ok(mean_pred);
    }
    let q = S_ALPHA * s_object(pred, &mask) + (1.0 - S_ALPHA) * s_region(pred, &mask);
    Ok(q.max(0.0))
}

/// Scores of one prediction. `qp` is `None` for clean (uncompressed) sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub dataset: String,
    pub id: String,
    pub qp: Option<u8>,
    #[serde(rename = "S_m")]
    pub s_m: f64,
    /// Empty when the ground truth has no foreground.
    #[serde(rename = "F_max")]
    pub f_max: Option<f64>,
    #[serde(rename = "MAE")]
    pub mae: f64,
}

pub fn evaluate_pair(dataset: &str, id: &str, qp: Option<u8>, pred: &Map<'_>, gt: &Map<'_>) -> Result<EvalRecord> {
    Ok(EvalRecord {
        dataset: dataset.to_string(),
        id: id.to_string(),
        qp,
        s_m: s_measure(pred, gt)?,
        f_max: f_measure_max(pred, gt)?,
        mae: mae(pred, gt)?,
    })
}

/// Row label of an aggregate table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    Clean,
    Qp(u8),
    /// Mean over the per-QP rows of one dataset.
    QpMean,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Clean => write!(f, "clean"),
            Level::Qp(q) => write!(f, "QP{q}"),
            Level::QpMean => write!(f, "QP-avg"),
        }
    }
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Level::Clean),
            "QP-avg" => Ok(Level::QpMean),
            _ => s
                .strip_prefix("QP")
                .and_then(|q| q.parse().ok())
                .map(Level::Qp)
                .ok_or_else(|| Error::Report(format!("unknown level `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub level: Level,
    pub count: usize,
    pub s_m: f64,
    pub f_max: f64,
    pub mae: f64,
    /// Records without foreground that were left out of the F average.
    pub f_excluded: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Per-(dataset, level) means, plus one `QpMean` row per dataset with
/// compressed levels (the mean of its per-QP rows). Rows are ordered by
/// dataset, then clean, ascending QP, and the QP mean last.
pub fn aggregate(records: &[EvalRecord]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, Level), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        let level = r.qp.map_or(Level::Clean, Level::Qp);
        groups.entry((r.dataset.clone(), level)).or_default().push(r);
    }
    let mut rows: Vec<AggregateRow> = groups
        .into_iter()
        .map(|((dataset, level), rs)| {
            let f: Vec<f64> = rs.iter().filter_map(|r| r.f_max).collect();
            AggregateRow {
                dataset,
                level,
                count: rs.len(),
                s_m: mean(rs.iter().map(|r| r.s_m)),
                f_max: mean(f.iter().copied()),
                mae: mean(rs.iter().map(|r| r.mae)),
                f_excluded: rs.len() - f.len(),
            }
        })
        .collect();
    let datasets: Vec<String> = rows.iter().map(|r| r.dataset.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    for ds in datasets {
        let qp_rows: Vec<&AggregateRow> = rows
            .iter()
            .filter(|r| r.dataset == ds && matches!(r.level, Level::Qp(_)))
            .collect();
        if qp_rows.is_empty() {
            continue;
        }
        let row = AggregateRow {
            dataset: ds.clone(),
            level: Level::QpMean,
            count: qp_rows.iter().map(|r| r.count).sum(),
            s_m: mean(qp_rows.iter().map(|r| r.s_m)),
            f_max: mean(qp_rows.iter().map(|r| r.f_max).filter(|v| !v.is_nan())),
            mae: mean(qp_rows.iter().map(|r| r.mae)),
            f_excluded: qp_rows.iter().map(|r| r.f_excluded).sum(),
        };
        rows.push(row);
    }
    rows.sort_by(|a, b| (&a.dataset, a.level).cmp(&(&b.dataset, b.level)));
    rows
}

/// Published reference scores of the full method (train on compressed data,
/// compressed DUTS test set). Documentation only; not reachable at desk
/// scale.
pub const REFERENCE_COMPRESSED_DUTS_TE: (f64, f64, f64) = (0.861, 0.841, 0.044);

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn splitmix_bytes(seed: u64, count: usize) -> Vec<u8> {
        let mut state = seed;
        (0..count)
            .map(|_| {
                state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
                let mut z = state;
                z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
                (z ^ (z >> 31)) as u8
            })
            .collect()
    }

    /// Same 16×16 pair as `tests/oracles/saliency_metrics.py`.
    fn fixed_pair() -> (Vec<f64>, Vec<f64>) {
        let mut gt = vec![0.0; 256];
        for y in 0..16i32 {
            for x in 0..16i32 {
                if (x - 7).pow(2) + (y - 6).pow(2) <= 20 || (x >= 10 && y >= 11) {
                    gt[(y * 16 + x) as usize] = 1.0;
                }
            }
        }
        let noise = splitmix_bytes(42, 256);
        let pred = noise.iter().zip(&gt).map(|(&n, g)| f64::from(n) / 255.0 * 0.6 + 0.4 * g).collect();
        (pred, gt)
    }

    fn m(d: &[f64], h: usize, w: usize) -> Map<'_> {
        Map::new(d, h, w).unwrap()
    }

    #[test]
    fn fixed_pair_matches_reference() {
        let (p, g) = fixed_pair();
        let (p, g) = (m(&p, 16, 16), m(&g, 16, 16));
        assert!((s_measure(&p, &g).unwrap() - 0.694277079577).abs() < 1e-10);
        assert!((f_measure_max(&p, &g).unwrap().unwrap() - 0.906399235912).abs() < 1e-10);
        assert!((mae(&p, &g).unwrap() - 0.294393382353).abs() < 1e-10);
    }

    #[test]
    fn hand_case_threshold_sweep() {
        let p = [0.8, 0.8, 0.2, 0.2, 0.8, 0.2, 0.2, 0.2, 0.2, 0.8, 0.8, 0.2, 0.2, 0.2, 0.2, 0.2];
        let g = [1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 0.];
        let (p, g) = (m(&p, 4, 4), m(&g, 4, 4));
        assert!((f_measure_max(&p, &g).unwrap().unwrap() - 0.8).abs() < 1e-12);
        assert!((s_measure(&p, &g).unwrap() - 0.647228281996).abs() < 1e-10);
    }

    #[test]
    fn degenerate_cases() {
        let g = [0., 1., 1., 0.];
        let inv = [1., 0., 0., 1.];
        let zeros = [0.0; 4];
        let ones = [1.0; 4];
        assert_eq!(f_measure_max(&m(&g, 2, 2), &m(&g, 2, 2)).unwrap(), Some(1.0));
        assert_eq!(f_measure_max(&m(&inv, 2, 2), &m(&g, 2, 2)).unwrap(), Some(0.0));
        assert_eq!(f_measure_max(&m(&g, 2, 2), &m(&zeros, 2, 2)).unwrap(), None);
        assert_eq!(s_measure(&m(&zeros, 2, 2), &m(&zeros, 2, 2)).unwrap(), 1.0);
        assert_eq!(s_measure(&m(&ones, 2, 2), &m(&ones, 2, 2)).unwrap(), 1.0);
        assert!((s_measure(&m(&g, 2, 2), &m(&g, 2, 2)).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(mae(&m(&zeros, 2, 2), &m(&g, 2, 2)).unwrap(), 0.5);
        assert!(mae(&m(&g, 2, 2), &m(&g, 1, 4)).is_err());
    }

    #[test]
    fn curve_variant_agrees_for_single_image() {
        let (p, g) = fixed_pair();
        let pair = (m(&p, 16, 16), m(&g, 16, 16));
        assert_eq!(
            f_measure_max_curve(&[pair]).unwrap(),
            f_measure_max(&pair.0, &pair.1).unwrap()
        );
    }

    fn rec(ds: &str, qp: Option<u8>, v: f64, f: Option<f64>) -> EvalRecord {
        EvalRecord {
            dataset: ds.into(),
            id: "x".into(),
            qp,
            s_m: v,
            f_max: f,
            mae: v / 2.0,
        }
    }

    #[test]
    fn aggregation_means_and_order() {
        let mut records = vec![rec("A", Some(22), 0.8, Some(0.9)), rec("A", Some(22), 0.6, None)];
        records.push(rec("A", Some(42), 0.2, Some(0.1)));
        records.push(rec("A", None, 1.0, Some(1.0)));
        let rows = aggregate(&records);
        let levels: Vec<Level> = rows.iter().map(|r| r.level).collect();
        assert_eq!(levels, vec![Level::Clean, Level::Qp(22), Level::Qp(42), Level::QpMean]);
        assert!((rows[1].s_m - 0.7).abs() < 1e-12);
        assert_eq!(rows[1].f_max, 0.9);
        assert_eq!(rows[1].f_excluded, 1);
        assert!((rows[3].s_m - 0.45).abs() < 1e-12);
        assert!((rows[3].f_max - 0.5).abs() < 1e-12);
        let same = aggregate(&vec![rec("B", Some(27), 0.3, Some(0.4)); 5]);
        assert_eq!(same[0].s_m, 0.3);
        assert_eq!(same[0].f_max, 0.4);
        assert_eq!("QP37".parse::<Level>().unwrap(), Level::Qp(37));
    }

    proptest! {
        #[test]
        fn mae_symmetric_and_f_permutation_invariant(
            values in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 4..64),
            rot in 0usize..64,
        ) {
            let p: Vec<f64> = values.iter().map(|v| v.0).collect();
            let g: Vec<f64> = values.iter().map(|v| if v.1 { 1.0 } else { 0.0 }).collect();
            let n = p.len();
            prop_assert_eq!(mae(&m(&p, 1, n), &m(&g, 1, n)).unwrap(), mae(&m(&g, 1, n), &m(&p, 1, n)).unwrap());
            let mut pr = p.clone();
            let mut gr = g.clone();
            pr.rotate_left(rot % n);
            gr.rotate_left(rot % n);
            prop_assert_eq!(f_measure_max(&m(&p, 1, n), &m(&g, 1, n)).unwrap(), f_measure_max(&m(&pr, 1, n), &m(&gr, 1, n)).unwrap());
            let a = mae(&m(&p, 1, n), &m(&g, 1, n)).unwrap();
            let b = mae(&m(&pr, 1, n), &m(&gr, 1, n)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            let f = f_measure_max(&m(&p, 1, n), &m(&g, 1, n)).unwrap();
            if let Some(f) = f { prop_assert!((0.0..=1.0).contains(&f)); }
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
