//! Segmentation metrics: confusion-matrix IoU and mIoU, tolerance-based
//! boundary precision/recall/F1, and image occupancy percentage (IOP).

use std::fmt::Write as _;

use crate::edge::label_to_boundary;
use crate::error::{Error, Result};
use crate::image::LabelMap;
use crate::tensor::{shape_str, Tensor};

/// `K × K` pixel counts; rows are ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.width, pred.height) != (truth.width, truth.height) {
            return Err(Error::shape(
                "miou",
                format!("{}x{} prediction", truth.width, truth.height),
                format!("{}x{}", pred.width, pred.height),
            ));
        }
        pred.validate(self.num_classes)?;
        truth.validate(self.num_classes)?;
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            self.counts[t as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "cannot merge confusion matrices over {} and {} classes",
                self.num_classes, other.num_classes
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn truth_count(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(c, p)).sum()
    }

    pub fn pred_count(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, c)).sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class appears in neither map.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let union = self.truth_count(c) + self.pred_count(c) - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }
}

/// Treatment of classes absent from both prediction and truth in the mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AbsentClasses {
    #[default]
    Exclude,
    CountAsZero,
}

/// Boundary precision, recall and F1 of one class or their average.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryReport {
    /// `None` for classes without boundary pixels in either map.
    pub per_class: Vec<Option<BoundaryScore>>,
    /// Mean over the classes that have a score.
    pub mean: BoundaryScore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub per_class_iop: Vec<Option<f64>>,
    pub boundary: Option<BoundaryReport>,
    pub truth_pixels: Vec<u64>,
    pub pred_pixels: Vec<u64>,
    pub total_pixels: u64,
}

fn check_pairs(preds: &[LabelMap], truths: &[LabelMap]) -> Result<()> {
    if preds.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth maps",
            preds.len(),
            truths.len()
        )));
    }
    Ok(())
}

/// Confusion matrix accumulated over every `(pred, truth)` pair.
pub fn confusion(preds: &[LabelMap], truths: &[LabelMap], num_classes: usize) -> Result<ConfusionMatrix> {
    check_pairs(preds, truths)?;
    let mut m = ConfusionMatrix::new(num_classes);
    for (p, t) in preds.iter().zip(truths) {
        m.accumulate(p, t)?;
    }
    Ok(m)
}

/// Mean of the per-class IoUs under the given absent-class rule.
pub fn mean_iou(per_class: &[Option<f64>], absent: AbsentClasses) -> f64 {
    let values: Vec<f64> = match absent {
        AbsentClasses::Exclude => per_class.iter().flatten().copied().collect(),
        AbsentClasses::CountAsZero => per_class.iter().map(|v| v.unwrap_or(0.0)).collect(),
    };
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Per-class IoU and mIoU over all pairs, absent classes excluded; IOP is
/// computed on the ground truth with background excluded.
pub fn miou(preds: &[LabelMap], truths: &[LabelMap], num_classes: usize) -> Result<MetricsReport> {
    miou_with(preds, truths, num_classes, AbsentClasses::Exclude)
}

pub fn miou_with(
    preds: &[LabelMap],
    truths: &[LabelMap],
    num_classes: usize,
    absent: AbsentClasses,
) -> Result<MetricsReport> {
    let m = confusion(preds, truths, num_classes)?;
    let per_class_iou: Vec<Option<f64>> = (0..num_classes).map(|c| m.iou(c)).collect();
    Ok(MetricsReport {
        miou: mean_iou(&per_class_iou, absent),
        per_class_iou,
        per_class_iop: iop(truths, num_classes, false)?,
        boundary: None,
        truth_pixels: (0..num_classes).map(|c| m.truth_count(c)).collect(),
        pred_pixels: (0..num_classes).map(|c| m.pred_count(c)).collect(),
        total_pixels: m.total(),
    })
}

/// Square dilation of a binary plane by Chebyshev radius `r`.
fn dilate(plane: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
    if r == 0 {
        return plane.to_vec();
    }
    let mut rows = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if plane[y * w + x] {
                for nx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    rows[y * w + nx] = true;
                }
            }
        }
    }
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if rows[y * w + x] {
                for ny in y.saturating_sub(r)..(y + r + 1).min(h) {
                    out[ny * w + x] = true;
                }
            }
        }
    }
    out
}

fn score_plane(pred: &[bool], truth: &[bool], w: usize, h: usize, tolerance: usize) -> Option<BoundaryScore> {
    let n_pred = pred.iter().filter(|&&b| b).count();
    let n_truth = truth.iter().filter(|&&b| b).count();
    if n_pred == 0 && n_truth == 0 {
        return None;
    }
    let near_truth = dilate(truth, w, h, tolerance);
    let near_pred = dilate(pred, w, h, tolerance);
    let tp_pred = pred.iter().zip(&near_truth).filter(|(&p, &t)| p && t).count();
    let tp_truth = truth.iter().zip(&near_pred).filter(|(&t, &p)| t && p).count();
    let precision = if n_pred == 0 { 0.0 } else { tp_pred as f64 / n_pred as f64 };
    let recall = if n_truth == 0 { 0.0 } else { tp_truth as f64 / n_truth as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Some(BoundaryScore { precision, recall, f1 })
}

fn average(per_class: Vec<Option<BoundaryScore>>) -> BoundaryReport {
    let scored: Vec<&BoundaryScore> = per_class.iter().flatten().collect();
    let n = scored.len().max(1) as f64;
    let mean = BoundaryScore {
        precision: scored.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scored.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scored.iter().map(|s| s.f1).sum::<f64>() / n,
    };
    BoundaryReport { per_class, mean }
}

/// Boundary precision/recall/F1 between per-class boundary stacks, each
/// binarized at 0.5. A predicted boundary pixel counts as correct when a
/// truth boundary pixel of the same class lies within Chebyshev distance
/// `tolerance`, and symmetrically for recall.
pub fn boundary_f1_maps(pred: &Tensor, truth: &Tensor, tolerance: usize) -> Result<BoundaryReport> {
    boundary_f1_maps_at(pred, truth, tolerance, 0.5)
}

/// [`boundary_f1_maps`] with the prediction binarized at `threshold`
/// (`pred >= threshold`); the truth is always binarized at 0.5.
pub fn boundary_f1_maps_at(pred: &Tensor, truth: &Tensor, tolerance: usize, threshold: f64) -> Result<BoundaryReport> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("boundary_f1", shape_str(truth.shape()), shape_str(pred.shape())));
    }
    let (k, h, w) = pred.shape();
    let per_class = (0..k)
        .map(|c| {
            let p: Vec<bool> = pred.channel(c).iter().map(|&v| v as f64 >= threshold).collect();
            let t: Vec<bool> = truth.channel(c).iter().map(|&v| v >= 0.5).collect();
            score_plane(&p, &t, w, h, tolerance)
        })
        .collect();
    Ok(average(per_class))
}

/// Thresholds `0.01, 0.02, ..., 0.99` swept by [`boundary_f1_ods`].
pub fn ods_thresholds() -> Vec<f64> {
    (1..100).map(|i| i as f64 / 100.0).collect()
}

/// Optimal-dataset-scale boundary F1 of soft boundary maps: the mean F1
/// over all pairs at each threshold, maximized over `thresholds`. Returns
/// `(threshold, f1)`; ties keep the lowest threshold.
pub fn boundary_f1_ods(preds: &[Tensor], truths: &[Tensor], tolerance: usize, thresholds: &[f64]) -> Result<(f64, f64)> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} truth maps",
            preds.len(),
            truths.len()
        )));
    }
    let mut best = (f64::NAN, -1.0);
    for &t in thresholds {
        let mut total = 0.0;
        for (p, g) in preds.iter().zip(truths) {
            total += boundary_f1_maps_at(p, g, tolerance, t)?.mean.f1;
        }
        let f1 = total / preds.len() as f64;
        if f1 > best.1 {
            best = (t, f1);
        }
    }
    if best.1 < 0.0 {
        return Err(Error::InvalidArgument("no thresholds to sweep".into()));
    }
    Ok(best)
}

/// Boundary scores of two label maps using thickness-1 class boundaries.
pub fn boundary_f1(pred: &LabelMap, truth: &LabelMap, num_classes: usize, tolerance: usize) -> Result<BoundaryReport> {
    let pb = label_to_boundary(pred, num_classes, 1)?;
    let tb = label_to_boundary(truth, num_classes, 1)?;
    boundary_f1_maps(&pb, &tb, tolerance)
}

/// Image occupancy percentage: pixels of class `c` divided by the total
/// pixels of the images that contain `c`. `None` for classes in no image;
/// background is `None` unless `include_background`.
pub fn iop(labels: &[LabelMap], num_classes: usize, include_background: bool) -> Result<Vec<Option<f64>>> {
    let mut class_pixels = vec![0u64; num_classes];
    let mut image_pixels = vec![0u64; num_classes];
    for l in labels {
        l.validate(num_classes)?;
        let mut counts = vec![0u64; num_classes];
        for &v in &l.data {
            counts[v as usize] += 1;
        }
        for c in 0..num_classes {
            if counts[c] > 0 {
                class_pixels[c] += counts[c];
                image_pixels[c] += l.data.len() as u64;
            }
        }
    }
    Ok((0..num_classes)
        .map(|c| {
            if (c == 0 && !include_background) || image_pixels[c] == 0 {
                None
            } else {
                Some(class_pixels[c] as f64 / image_pixels[c] as f64)
            }
        })
        .collect())
}

/// Shortest decimal that round-trips, always with a fractional part.
pub fn format_number(v: f64) -> String {
    format!("{v:?}")
}

impl MetricsReport {
    /// Column order of [`MetricsReport::to_csv`].
    pub const CSV_HEADER: &'static str =
        "class,iou,iop,boundary_precision,boundary_recall,boundary_f1,truth_pixels,pred_pixels";

    /// One row per class (empty cells for undefined values) and a final
    /// `mIoU,<value>` row.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(format_number).unwrap_or_default();
        let mut out = String::new();
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for c in 0..self.per_class_iou.len() {
            let b = self.boundary.as_ref().and_then(|b| b.per_class.get(c).copied().flatten());
            let _ = writeln!(
                out,
                "{c},{},{},{},{},{},{},{}",
                opt(self.per_class_iou[c]),
                opt(self.per_class_iop.get(c).copied().flatten()),
                opt(b.map(|s| s.precision)),
                opt(b.map(|s| s.recall)),
                opt(b.map(|s| s.f1)),
                self.truth_pixels[c],
                self.pred_pixels[c],
            );
        }
        let _ = writeln!(out, "mIoU,{}", format_number(self.miou));
        out
    }
}
