//! Mask metrics (F1, IoU, boundary Hausdorff distance), per-patch evaluation
//! and dataset-level aggregation.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::scalar::Scalar;
use crate::tensor::{BinaryMask, ProbMap};
use log::warn;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Hausdorff value used when the ground truth has foreground but the
/// prediction is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmptyPredictionHd {
    /// `sqrt((H-1)^2 + (W-1)^2)`.
    #[default]
    Diagonal,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsOptions {
    pub threshold: f64,
    /// F1 and IoU reported when prediction and ground truth are both empty.
    pub both_empty_score: f64,
    pub empty_prediction_hd: EmptyPredictionHd,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            both_empty_score: 1.0,
            empty_prediction_hd: EmptyPredictionHd::Diagonal,
        }
    }
}

impl MetricsOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "metrics.threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.both_empty_score) {
            return Err(Error::Config("metrics.both_empty_score must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `1` where `map >= threshold`.
pub fn binarize<T: Scalar>(map: &ProbMap<T>, threshold: T) -> BinaryMask {
    BinaryMask {
        height: map.height,
        width: map.width,
        values: map.values.iter().map(|&v| v >= threshold).collect(),
    }
}

fn check_masks(context: &'static str, a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.height == b.height && a.width == b.width {
        Ok(())
    } else {
        Err(Error::shape(context, a.shape_str(), b.shape_str()))
    }
}

/// Confusion counts `(tp, fp, fn)`.
pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<(usize, usize, usize)> {
    check_masks("confusion", pred, gt)?;
    let (mut tp, mut fp, mut fnn) = (0, 0, 0);
    for (&p, &g) in pred.values.iter().zip(&gt.values) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    Ok((tp, fp, fnn))
}

/// `2TP / (2TP + FP + FN)`; 1 when both masks are empty.
pub fn f1_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    f1_score_with(pred, gt, 1.0)
}

pub fn f1_score_with(pred: &BinaryMask, gt: &BinaryMask, both_empty: f64) -> Result<f64> {
    let (tp, fp, fnn) = confusion(pred, gt)?;
    let den = 2 * tp + fp + fnn;
    Ok(if den == 0 {
        both_empty
    } else {
        (2 * tp) as f64 / den as f64
    })
}

/// `|pred & gt| / |pred | gt|`; 1 when both masks are empty.
pub fn iou_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    iou_score_with(pred, gt, 1.0)
}

pub fn iou_score_with(pred: &BinaryMask, gt: &BinaryMask, both_empty: f64) -> Result<f64> {
    let (tp, fp, fnn) = confusion(pred, gt)?;
    let union = tp + fp + fnn;
    Ok(if union == 0 {
        both_empty
    } else {
        tp as f64 / union as f64
    })
}

/// Foreground pixels 4-adjacent to background or to the image edge.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height, mask.width);
    let mut out = BinaryMask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            let touches_bg = edge
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1);
            out.values[y * w + x] = touches_bg;
        }
    }
    out
}

const FAR: i64 = i64::MAX / 4;

/// Exact squared Euclidean distance transform: for every pixel the squared
/// distance to the nearest set pixel (`FAR` when the set is empty).
pub fn squared_distance_transform(set: &BinaryMask) -> Vec<i64> {
    let (h, w) = (set.height, set.width);
    // columns first
    let mut col = vec![FAR; h * w];
    for x in 0..w {
        let f: Vec<i64> = (0..h).map(|y| if set.get(y, x) { 0 } else { FAR }).collect();
        let d = lower_envelope(&f);
        for y in 0..h {
            col[y * w + x] = d[y];
        }
    }
    let mut out = vec![FAR; h * w];
    for y in 0..h {
        let d = lower_envelope(&col[y * w..(y + 1) * w]);
        out[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    out
}

/// One-dimensional pass: `d(q) = min_p (q - p)^2 + f(p)` over sampled
/// parabolas, in exact integer arithmetic.
fn lower_envelope(f: &[i64]) -> Vec<i64> {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&p| f[p] < FAR).collect();
    if sites.is_empty() {
        return vec![FAR; n];
    }
    // intersection of parabolas from sites p < q, as a rational s = num / den
    let cross = |p: usize, q: usize| -> (i64, i64) {
        let (pi, qi) = (p as i64, q as i64);
        ((f[q] + qi * qi) - (f[p] + pi * pi), 2 * (qi - pi))
    };
    let mut hull: Vec<usize> = Vec::with_capacity(sites.len());
    let mut starts: Vec<(i64, i64)> = Vec::with_capacity(sites.len());
    for &q in &sites {
        loop {
            match hull.last() {
                None => {
                    hull.push(q);
                    starts.push((i64::MIN / 4, 1));
                    break;
                }
                Some(&p) => {
                    let s = cross(p, q);
                    let start = *starts.last().expect("parallel to hull");
                    // s <= start  <=>  s.0 * start.1 <= start.0 * s.1 (positive denominators)
                    if (s.0 as i128) * (start.1 as i128) <= (start.0 as i128) * (s.1 as i128) {
                        hull.pop();
                        starts.pop();
                        continue;
                    }
                    hull.push(q);
                    starts.push(s);
                    break;
                }
            }
        }
    }
    let mut out = vec![0; n];
    let mut k = 0;
    for (q, slot) in out.iter_mut().enumerate() {
        let qi = q as i64;
        while k + 1 < hull.len() {
            let (num, den) = starts[k + 1];
            // advance while the next parabola starts at or before q
            if (num as i128) <= (qi as i128) * (den as i128) {
                k += 1;
            } else {
                break;
            }
        }
        let p = hull[k] as i64;
        *slot = (qi - p) * (qi - p) + f[hull[k]];
    }
    out
}

fn directed_max(from: &BinaryMask, dist_to_other: &[i64]) -> i64 {
    from.values
        .iter()
        .zip(dist_to_other)
        .filter(|(&on, _)| on)
        .map(|(_, &d)| d)
        .max()
        .unwrap_or(0)
}

/// Symmetric Hausdorff distance between the boundary pixel sets, in
/// pixels. `None` when the ground truth is empty; the image diagonal when
/// only the prediction is empty.
pub fn hausdorff_distance(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    hausdorff_distance_with(pred, gt, EmptyPredictionHd::Diagonal)
}

pub fn hausdorff_distance_with(
    pred: &BinaryMask,
    gt: &BinaryMask,
    empty_pred: EmptyPredictionHd,
) -> Result<Option<f64>> {
    check_masks("hausdorff_distance", pred, gt)?;
    if !gt.any() {
        return Ok(None);
    }
    if !pred.any() {
        return Ok(Some(match empty_pred {
            EmptyPredictionHd::Diagonal => {
                let (h, w) = ((gt.height - 1) as f64, (gt.width - 1) as f64);
                (h * h + w * w).sqrt()
            }
            EmptyPredictionHd::Fixed(v) => v,
        }));
    }
    let (bp, bg) = (boundary(pred), boundary(gt));
    let to_gt = squared_distance_transform(&bg);
    let to_pred = squared_distance_transform(&bp);
    let d2 = directed_max(&bp, &to_gt).max(directed_max(&bg, &to_pred));
    Ok(Some((d2 as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMetrics {
    pub id: String,
    pub label: u8,
    pub f1: f64,
    pub iou: f64,
    pub hd: Option<f64>,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_patch: Vec<PatchMetrics>,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub mean_iou: f64,
    pub std_iou: f64,
    /// Over patches whose ground truth has foreground; `None` without any.
    pub mean_hd_pos: Option<f64>,
    pub std_hd_pos: Option<f64>,
    pub total: usize,
    pub positive: usize,
    /// Patches excluded because they carry no mask.
    pub skipped: usize,
}

impl MetricsReport {
    pub fn from_patches(per_patch: Vec<PatchMetrics>, skipped: usize) -> Self {
        let f1: Vec<f64> = per_patch.iter().map(|p| p.f1).collect();
        let iou: Vec<f64> = per_patch.iter().map(|p| p.iou).collect();
        let hd: Vec<f64> = per_patch.iter().filter_map(|p| p.hd).collect();
        let sf = Summary::of(&f1);
        let si = Summary::of(&iou);
        let sh = Summary::of(&hd);
        Self {
            mean_f1: sf.map_or(f64::NAN, |s| s.mean),
            std_f1: sf.map_or(f64::NAN, |s| s.std),
            mean_iou: si.map_or(f64::NAN, |s| s.mean),
            std_iou: si.map_or(f64::NAN, |s| s.std),
            mean_hd_pos: sh.map(|s| s.mean),
            std_hd_pos: sh.map(|s| s.std),
            total: per_patch.len(),
            positive: hd.len(),
            skipped,
            per_patch,
        }
    }

    /// `F1 / IOU / HD^Pos` line, scores in percent.
    pub fn summary_line(&self) -> String {
        let hd = self.mean_hd_pos.map_or_else(|| "n/a".to_string(), |v| format!("{v:.1}"));
        format!(
            "F1 {:.1} / IOU {:.1} / HD^Pos {}",
            100.0 * self.mean_f1,
            100.0 * self.mean_iou,
            hd
        )
    }

    /// Per-patch rows followed by `mean` and `std` summary rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["row", "id", "label", "f1", "iou", "hd"])?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for p in &self.per_patch {
            w.write_record([
                "patch".to_string(),
                p.id.clone(),
                p.label.to_string(),
                p.f1.to_string(),
                p.iou.to_string(),
                opt(p.hd),
            ])?;
        }
        w.write_record([
            "mean".to_string(),
            String::new(),
            String::new(),
            self.mean_f1.to_string(),
            self.mean_iou.to_string(),
            opt(self.mean_hd_pos),
        ])?;
        w.write_record([
            "std".to_string(),
            String::new(),
            String::new(),
            self.std_f1.to_string(),
            self.std_iou.to_string(),
            opt(self.std_hd_pos),
        ])?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", self.summary_line()).map_err(|e| Error::io(path, e))?;
        writeln!(f, "patches {} (positive {}, skipped {})", self.total, self.positive, self.skipped)
            .map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Metrics of one binarized prediction against its ground truth.
pub fn patch_metrics(id: &str, label: u8, pred: &BinaryMask, gt: &BinaryMask, opts: &MetricsOptions) -> Result<PatchMetrics> {
    Ok(PatchMetrics {
        id: id.to_string(),
        label,
        f1: f1_score_with(pred, gt, opts.both_empty_score)?,
        iou: iou_score_with(pred, gt, opts.both_empty_score)?,
        hd: hausdorff_distance_with(pred, gt, opts.empty_prediction_hd)?,
    })
}

/// Segments every patch, binarizes the fused map and aggregates.
pub fn evaluate_dataset<T: Scalar, S: Segmenter<T> + ?Sized>(
    model: &S,
    data: &Dataset<T>,
    opts: &MetricsOptions,
) -> Result<MetricsReport> {
    Ok(evaluate_thresholds(model, data, opts, &[opts.threshold])?.remove(0))
}

/// Like [`evaluate_dataset`] for several thresholds with one forward pass
/// per patch.
pub fn evaluate_thresholds<T: Scalar, S: Segmenter<T> + ?Sized>(
    model: &S,
    data: &Dataset<T>,
    opts: &MetricsOptions,
    thresholds: &[f64],
) -> Result<Vec<MetricsReport>> {
    let mut rows: Vec<Vec<PatchMetrics>> = vec![Vec::with_capacity(data.len()); thresholds.len()];
    let mut skipped = 0;
    for sample in data.eval_view().iter() {
        let Some(gt) = sample.gt_mask else {
            warn!("{}: no ground-truth mask, excluded from evaluation", sample.source_id);
            skipped += 1;
            continue;
        };
        let fused = model.segment(sample.pixels)?;
        for (t, out) in thresholds.iter().zip(rows.iter_mut()) {
            let pred = binarize(&fused, T::lit(*t));
            out.push(patch_metrics(sample.source_id, sample.label.as_u8(), &pred, gt, opts)?);
        }
    }
    Ok(rows
        .into_iter()
        .map(|r| MetricsReport::from_patches(r, skipped))
        .collect())
}
