//! Mask, contour and box overlap metrics, success AUC and the
//! accuracy/robustness protocol.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{squared_distance_transform, BoundingBox, Mask};

/// Binarization threshold used by every mask metric.
pub const MASK_THRESHOLD: f32 = 0.5;
/// An overlap below this counts toward a failure run.
pub const FAILURE_OVERLAP: f64 = 0.1;
/// Consecutive low-overlap frames that make a failure.
pub const FAILURE_FRAMES: usize = 10;

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Intersection over union of the binarized masks; 1 when both are empty.
pub fn jaccard(a: &Mask, b: &Mask) -> Result<f64> {
    same_shape(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x >= MASK_THRESHOLD, y >= MASK_THRESHOLD);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with a 4-neighbour in the background. Pixels outside
/// the image count as background.
pub fn boundary(on: &[bool], width: usize, height: usize) -> Vec<bool> {
    let mut out = vec![false; on.len()];
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if !on[i] {
                continue;
            }
            let off = |rr: isize, cc: isize| {
                rr < 0 || cc < 0 || rr >= height as isize || cc >= width as isize || !on[rr as usize * width + cc as usize]
            };
            let (r, c) = (r as isize, c as isize);
            out[i] = off(r - 1, c) || off(r + 1, c) || off(r, c - 1) || off(r, c + 1);
        }
    }
    out
}

/// Fraction of `from` boundary pixels within `tolerance` of a `to` boundary
/// pixel; `None` when `from` has no boundary.
fn boundary_match(from: &[bool], to_sq_dist: &[f64], tolerance: f64) -> Option<f64> {
    let total = from.iter().filter(|&&b| b).count();
    if total == 0 {
        return None;
    }
    let t2 = tolerance * tolerance;
    let hit = from.iter().zip(to_sq_dist).filter(|(&b, &d)| b && d <= t2).count();
    Some(hit as f64 / total as f64)
}

/// Contour F-measure: harmonic mean of boundary precision and recall at a
/// pixel tolerance. 1 when both masks are empty, 0 when only one is.
pub fn contour_f(pred: &Mask, gt: &Mask, tolerance: f64) -> Result<f64> {
    same_shape(pred, gt)?;
    let (w, h) = (pred.width(), pred.height());
    let bp = boundary(&pred.binarize(MASK_THRESHOLD), w, h);
    let bg = boundary(&gt.binarize(MASK_THRESHOLD), w, h);
    let (np, ng) = (bp.iter().any(|&b| b), bg.iter().any(|&b| b));
    if !np && !ng {
        return Ok(1.0);
    }
    if !np || !ng {
        return Ok(0.0);
    }
    let dp = squared_distance_transform(&bp, w, h);
    let dg = squared_distance_transform(&bg, w, h);
    let precision = boundary_match(&bp, &dg, tolerance).unwrap_or(0.0);
    let recall = boundary_match(&bg, &dp, tolerance).unwrap_or(0.0);
    Ok(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
}

/// Default contour tolerance: 0.8% of the image diagonal, at least one pixel.
pub fn default_contour_tolerance(width: usize, height: usize) -> f64 {
    (0.008 * ((width * width + height * height) as f64).sqrt()).max(1.0)
}

pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Area under the success curve on thresholds `0.00, 0.01, ..., 1.00`, as a
/// left Riemann sum: the success rate at `t` (fraction of overlaps strictly
/// above `t`) weighs each step of 0.01, so the last grid point has no width.
/// Equals the mean overlap to within 0.01.
pub fn success_auc(overlaps: &[f64]) -> f64 {
    if overlaps.is_empty() {
        return 0.0;
    }
    let n = overlaps.len() as f64;
    (0..100)
        .map(|k| {
            let t = k as f64 / 100.0;
            overlaps.iter().filter(|&&o| o > t).count() as f64 / n
        })
        .sum::<f64>()
        / 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyRobustness {
    pub accuracy: f64,
    pub robustness: f64,
    /// Frames at which failures are declared: the start of each low-overlap
    /// run plus the run length requirement.
    pub failures: Vec<usize>,
}

/// Accuracy is the mean overlap before the first failure, robustness the
/// fraction of frames before it. A failure is declared `FAILURE_FRAMES`
/// frames into a run of overlaps below `FAILURE_OVERLAP`.
pub fn accuracy_robustness(overlaps: &[f64]) -> AccuracyRobustness {
    let mut failures = Vec::new();
    let mut run_start = None;
    for (i, &o) in overlaps.iter().enumerate() {
        if o < FAILURE_OVERLAP {
            let s = *run_start.get_or_insert(i);
            if i + 1 - s == FAILURE_FRAMES {
                failures.push(s + FAILURE_FRAMES);
            }
        } else {
            run_start = None;
        }
    }
    let tracked = failures.first().copied().unwrap_or(overlaps.len()).min(overlaps.len());
    let accuracy = if tracked == 0 { 0.0 } else { overlaps[..tracked].iter().sum::<f64>() / tracked as f64 };
    let robustness = if overlaps.is_empty() { 0.0 } else { tracked as f64 / overlaps.len() as f64 };
    AccuracyRobustness { accuracy, robustness, failures }
}

/// Per-frame mask Jaccard of a tracked sequence against ground truth.
pub fn mask_overlaps(pred: &[Mask], gt: &[Mask]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("{} predicted frames for {} ground-truth frames", pred.len(), gt.len())));
    }
    pred.iter()
        .zip(gt)
        .enumerate()
        .map(|(i, (p, g))| jaccard(p, g).map_err(|e| Error::ShapeMismatch(format!("frame {i}: {e}"))))
        .collect()
}
