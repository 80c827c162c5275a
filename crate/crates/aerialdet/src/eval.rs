//! Detection evaluation: axis-aligned IoU, greedy matching against ground
//! truth, average precision, and per-category reports.
//!
//! Matching follows the classic VOC protocol: detections are visited in
//! descending score, each grabs the highest-IoU ground-truth box of its
//! image, already-claimed or below-threshold boxes count as false positives,
//! and boxes marked difficult neither count as positives nor penalize
//! detections that land on them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::dota::{Detection, Hbb};
use crate::error::{Error, Result};

/// Intersection-over-union of two axis-aligned boxes, in pure geometric
/// coordinates (no pixel +1 convention). Degenerate inputs give 0.
pub fn iou_hbb(a: &Hbb, b: &Hbb) -> f64 {
    let inter = a.intersect(b).area();
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Outcome of one detection under greedy matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchFlag {
    /// Claimed an unmatched, non-difficult ground-truth box.
    Tp,
    /// No ground truth above the IoU threshold, or the best one was taken.
    Fp,
    /// Landed on a difficult box; dropped from the precision/recall counts.
    Ignore,
}

/// Greedily match detections of one image against its ground truth.
///
/// `dets` are (score, box); `gts` are (box, difficult). Detections are
/// visited in descending score (ties keep input order) and the returned
/// flags are in that visiting order. Each detection takes the ground-truth
/// box with the highest IoU; a match below `iou_thresh` is a false positive,
/// a match on a difficult box is ignored, and a second match on an
/// already-claimed box is a false positive.
pub fn match_detections(dets: &[(f64, Hbb)], gts: &[(Hbb, bool)], iou_thresh: f64) -> Vec<MatchFlag> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].0.total_cmp(&dets[a].0).then(a.cmp(&b)));

    let mut used = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for &i in &order {
        let mut best_iou = 0.0;
        let mut best: Option<usize> = None;
        for (j, (gbox, _)) in gts.iter().enumerate() {
            let v = iou_hbb(&dets[i].1, gbox);
            if v > best_iou {
                best_iou = v;
                best = Some(j);
            }
        }
        let flag = match best {
            Some(j) if best_iou >= iou_thresh => {
                if gts[j].1 {
                    MatchFlag::Ignore
                } else if !used[j] {
                    used[j] = true;
                    MatchFlag::Tp
                } else {
                    MatchFlag::Fp
                }
            }
            _ => MatchFlag::Fp,
        };
        flags.push(flag);
    }
    flags
}

/// Cumulative precision/recall over flags in descending-score order.
///
/// Ignored detections contribute to neither counter. With zero positives the
/// recall stays 0 by definition.
pub fn precision_recall(flags: &[MatchFlag], n_positive: usize) -> (Vec<f64>, Vec<f64>) {
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    for f in flags {
        match f {
            MatchFlag::Tp => tp += 1,
            MatchFlag::Fp => fp += 1,
            MatchFlag::Ignore => continue,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(if n_positive == 0 { 0.0 } else { tp as f64 / n_positive as f64 });
    }
    (precision, recall)
}

/// How average precision summarizes the precision/recall curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApMethod {
    /// Mean of interpolated precision at recalls 0.0, 0.1, ..., 1.0.
    ElevenPoint,
    /// Exact area under the monotone precision envelope.
    AllPoint,
}

impl std::str::FromStr for ApMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<ApMethod> {
        match s {
            "eleven_point" => Ok(ApMethod::ElevenPoint),
            "all_point" => Ok(ApMethod::AllPoint),
            other => Err(Error::invalid(format!(
                "unknown AP method {other:?} (expected eleven_point or all_point)"
            ))),
        }
    }
}

/// Average precision from a cumulative precision/recall curve.
pub fn average_precision(precision: &[f64], recall: &[f64], method: ApMethod) -> f64 {
    assert_eq!(precision.len(), recall.len(), "precision/recall length mismatch");
    match method {
        ApMethod::ElevenPoint => {
            let mut total = 0.0;
            for i in 0..=10 {
                let r = i as f64 / 10.0;
                let p_max = precision
                    .iter()
                    .zip(recall)
                    .filter(|(_, &rr)| rr >= r)
                    .map(|(&pp, _)| pp)
                    .fold(0.0, f64::max);
                total += p_max;
            }
            total / 11.0
        }
        ApMethod::AllPoint => {
            // monotone envelope over recall, then sum rectangle areas at the
            // recall steps
            let n = precision.len();
            if n == 0 {
                return 0.0;
            }
            let mut env = precision.to_vec();
            for i in (0..n - 1).rev() {
                env[i] = env[i].max(env[i + 1]);
            }
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for i in 0..n {
                if recall[i] > prev_r {
                    ap += (recall[i] - prev_r) * env[i];
                    prev_r = recall[i];
                }
            }
            ap
        }
    }
}

/// Ground-truth box in scene coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub category: String,
    pub bbox: Hbb,
    pub difficult: bool,
}

/// Per-category evaluation result.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassResult {
    pub category: String,
    /// `None` when the category has neither ground truth nor detections and
    /// is therefore left out of the mean.
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub n_det: usize,
}

/// Full evaluation: one row per category plus the mean over scored rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ClassResult>,
    pub iou_thresh: f64,
    pub method: ApMethod,
    pub mean_ap: f64,
}

/// Evaluate detections against ground truth for the given category list.
///
/// Detections of one category are ranked by score across all images while
/// matching stays per image. Categories with no ground truth but some
/// detections score 0; categories absent from both sides are excluded from
/// the mean.
pub fn evaluate(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    categories: &[&str],
    iou_thresh: f64,
    method: ApMethod,
) -> EvalReport {
    let mut rows = Vec::with_capacity(categories.len());
    for &cat in categories {
        let dets: Vec<&Detection> = detections.iter().filter(|d| d.category == cat).collect();
        let gts: Vec<&GroundTruth> = ground_truth.iter().filter(|g| g.category == cat).collect();
        let n_positive = gts.iter().filter(|g| !g.difficult).count();

        let ap = if dets.is_empty() && gts.is_empty() {
            None
        } else if dets.is_empty() {
            Some(0.0)
        } else {
            // group ground truth by image with claim bookkeeping
            let mut per_image: BTreeMap<&str, Vec<(Hbb, bool, bool)>> = BTreeMap::new();
            for g in &gts {
                per_image
                    .entry(g.image_id.as_str())
                    .or_default()
                    .push((g.bbox, g.difficult, false));
            }
            let mut order: Vec<usize> = (0..dets.len()).collect();
            order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));

            let mut flags = Vec::with_capacity(dets.len());
            for &i in &order {
                let d = dets[i];
                let flag = match per_image.get_mut(d.image_id.as_str()) {
                    None => MatchFlag::Fp,
                    Some(boxes) => {
                        let mut best_iou = 0.0;
                        let mut best: Option<usize> = None;
                        for (j, (gbox, _, _)) in boxes.iter().enumerate() {
                            let v = iou_hbb(&d.bbox, gbox);
                            if v > best_iou {
                                best_iou = v;
                                best = Some(j);
                            }
                        }
                        match best {
                            Some(j) if best_iou >= iou_thresh => {
                                if boxes[j].1 {
                                    MatchFlag::Ignore
                                } else if !boxes[j].2 {
                                    boxes[j].2 = true;
                                    MatchFlag::Tp
                                } else {
                                    MatchFlag::Fp
                                }
                            }
                            _ => MatchFlag::Fp,
                        }
                    }
                };
                flags.push(flag);
            }
            let (precision, recall) = precision_recall(&flags, n_positive);
            Some(average_precision(&precision, &recall, method))
        };

        rows.push(ClassResult {
            category: cat.to_string(),
            ap,
            n_gt: n_positive,
            n_det: dets.len(),
        });
    }

    let scored: Vec<f64> = rows.iter().filter_map(|r| r.ap).collect();
    let mean_ap = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    EvalReport { rows, iou_thresh, method, mean_ap }
}

impl EvalReport {
    /// Human-readable table: one category per row, mean at the bottom.
    pub fn render_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.category.len())
            .chain(["category".len(), "mAP".len()].into_iter())
            .max()
            .unwrap_or(8);
        let mut s = String::new();
        let method = match self.method {
            ApMethod::ElevenPoint => "eleven_point",
            ApMethod::AllPoint => "all_point",
        };
        let _ = writeln!(s, "IoU threshold {:.2}, AP method {method}", self.iou_thresh);
        let _ = writeln!(s, "{:width$}  {:>8}  {:>6}  {:>6}", "category", "AP", "gt", "det");
        for r in &self.rows {
            match r.ap {
                Some(ap) => {
                    let _ = writeln!(s, "{:width$}  {:>8.4}  {:>6}  {:>6}", r.category, ap, r.n_gt, r.n_det);
                }
                None => {
                    let _ = writeln!(s, "{:width$}  {:>8}  {:>6}  {:>6}", r.category, "-", r.n_gt, r.n_det);
                }
            }
        }
        let _ = writeln!(s, "{:width$}  {:>8.4}", "mAP", self.mean_ap);
        s
    }

    /// Machine-readable rows: `category,ap,n_gt,n_det`, empty `ap` for
    /// excluded categories, final `mAP` row.
    pub fn render_csv(&self) -> String {
        let mut s = String::from("category,ap,n_gt,n_det\n");
        for r in &self.rows {
            let ap = r.ap.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{ap},{},{}", r.category, r.n_gt, r.n_det);
        }
        let _ = writeln!(s, "mAP,{:.6},,", self.mean_ap);
        s
    }
}
