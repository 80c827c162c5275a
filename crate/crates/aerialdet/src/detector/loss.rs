//! Training targets and losses for the anchor-free head.
//!
//! Assignment follows the standard level-range scheme: a grid location is
//! positive for the smallest ground-truth box that contains it and whose
//! largest center-to-side distance falls in the level's range. Losses are
//! focal classification over all locations, IoU regression and binary
//! center-ness over positives, each normalized by the positive count and
//! summed with equal weights.

use crate::dota::Hbb;
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;

use super::head::LevelHead;

/// Ground-truth object: axis-aligned box in image pixels plus class index.
#[derive(Clone, Debug, PartialEq)]
pub struct GtObject {
    pub bbox: Hbb,
    pub class: usize,
}

/// Focal-loss weighting of the rare positive class.
pub const FOCAL_ALPHA: f64 = 0.25;

/// Size range (lo, hi] of the largest regression distance accepted at a
/// stride, in image pixels. Strides double from 4 to 64; ranges double from
/// 32 up, the coarsest level taking everything larger.
pub fn range_for_stride(stride: usize) -> Result<(f64, f64)> {
    Ok(match stride {
        4 => (0.0, 32.0),
        8 => (32.0, 64.0),
        16 => (64.0, 128.0),
        32 => (128.0, 256.0),
        64 => (256.0, f64::INFINITY),
        _ => return Err(Error::invalid(format!("no assignment range for stride {stride}"))),
    })
}

/// Dense targets for one pyramid level.
#[derive(Clone, Debug)]
pub struct LevelTargets {
    pub stride: usize,
    /// (N, classes, H, W) one-hot class map.
    pub cls: Tensor,
    /// (N, 4, H, W) distances in stride units at positives; 1.0 elsewhere
    /// as a harmless placeholder (masked out of the loss).
    pub distances: Tensor,
    /// (N, 1, H, W) center-ness target in [0, 1] at positives.
    pub centerness: Tensor,
    /// (N, 1, H, W) 1.0 at positive locations, 0.0 elsewhere.
    pub pos_mask: Tensor,
}

/// Assign ground truth to every level. `level_shapes` lists (stride, H, W)
/// in head order; returns the per-level targets and the total positive count
/// across levels.
pub fn assign_targets(
    objects: &[Vec<GtObject>],
    level_shapes: &[(usize, usize, usize)],
    classes: usize,
) -> Result<(Vec<LevelTargets>, usize)> {
    let n = objects.len();
    if n == 0 {
        return Err(Error::invalid("target assignment needs at least one image"));
    }
    for per_image in objects {
        for obj in per_image {
            if obj.class >= classes {
                return Err(Error::invalid(format!(
                    "class index {} outside the {classes}-class vocabulary",
                    obj.class
                )));
            }
        }
    }

    let mut out = Vec::with_capacity(level_shapes.len());
    let mut num_pos = 0usize;
    for &(stride, h, w) in level_shapes {
        let (lo, hi) = range_for_stride(stride)?;
        let s = stride as f64;
        let mut t = LevelTargets {
            stride,
            cls: Tensor::zeros([n, classes, h, w]),
            distances: Tensor::filled([n, 4, h, w], 1.0),
            centerness: Tensor::zeros([n, 1, h, w]),
            pos_mask: Tensor::zeros([n, 1, h, w]),
        };
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let cx = (x as f64 + 0.5) * s;
                    let cy = (y as f64 + 0.5) * s;
                    let mut best: Option<(f64, &GtObject, [f64; 4])> = None;
                    for obj in &objects[b] {
                        let l = cx - obj.bbox.xmin;
                        let tdist = cy - obj.bbox.ymin;
                        let r = obj.bbox.xmax - cx;
                        let bdist = obj.bbox.ymax - cy;
                        if l <= 0.0 || tdist <= 0.0 || r <= 0.0 || bdist <= 0.0 {
                            continue; // location not strictly inside the box
                        }
                        let m = l.max(tdist).max(r).max(bdist);
                        if m <= lo || m > hi {
                            continue; // belongs to another level
                        }
                        let area = (obj.bbox.xmax - obj.bbox.xmin) * (obj.bbox.ymax - obj.bbox.ymin);
                        if best.as_ref().is_none_or(|(a, _, _)| area < *a) {
                            best = Some((area, obj, [l, tdist, r, bdist]));
                        }
                    }
                    if let Some((_, obj, d)) = best {
                        num_pos += 1;
                        *t.cls.at_mut(b, obj.class, y, x) = 1.0;
                        for (c, dist) in d.iter().enumerate() {
                            *t.distances.at_mut(b, c, y, x) = dist / s;
                        }
                        let lr = d[0].min(d[2]) / d[0].max(d[2]);
                        let tb = d[1].min(d[3]) / d[1].max(d[3]);
                        *t.centerness.at_mut(b, 0, y, x) = (lr * tb).sqrt();
                        *t.pos_mask.at_mut(b, 0, y, x) = 1.0;
                    }
                }
            }
        }
        out.push(t);
    }
    Ok((out, num_pos))
}

/// Loss terms, already normalized; `total` is their 1:1:1 sum on the graph.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub cls: f64,
    pub reg: f64,
    pub ctr: f64,
}

/// Focal binary cross-entropy over all locations and classes, normalized by
/// `norm`: alpha t (1-p)^2 softplus(-z) + (1-alpha)(1-t) p^2 softplus(z).
fn focal_loss(g: &mut Graph, logits: Var, targets: Var, norm: f64) -> Result<Var> {
    let p = g.sigmoid(logits);
    let neg_z = g.affine(logits, -1.0, 0.0);
    let sp_neg = g.softplus(neg_z);
    let sp_pos = g.softplus(logits);
    let one_minus_p = g.affine(p, -1.0, 1.0);
    let omp_sq = g.mul(one_minus_p, one_minus_p)?;
    let p_sq = g.mul(p, p)?;
    let one_minus_t = g.affine(targets, -1.0, 1.0);

    let pos = g.mul(targets, omp_sq)?;
    let pos = g.mul(pos, sp_neg)?;
    let pos = g.affine(pos, FOCAL_ALPHA, 0.0);
    let neg = g.mul(one_minus_t, p_sq)?;
    let neg = g.mul(neg, sp_pos)?;
    let neg = g.affine(neg, 1.0 - FOCAL_ALPHA, 0.0);

    let both = g.add(pos, neg)?;
    let total = g.sum(both);
    Ok(g.affine(total, 1.0 / norm, 0.0))
}

/// -ln(IoU) between predicted and target distance quadruples at positive
/// locations, normalized by `norm`. Off-mask cells contribute exactly zero:
/// their IoU is blended to 1 before the logarithm.
fn iou_loss(g: &mut Graph, reg: Var, target_dist: Var, pos_mask: Var, norm: f64) -> Result<Var> {
    let ch = |g: &mut Graph, v: Var, c: usize| g.slice_channels(v, c, 1);
    let lp = ch(g, reg, 0)?;
    let tp = ch(g, reg, 1)?;
    let rp = ch(g, reg, 2)?;
    let bp = ch(g, reg, 3)?;
    let lg = ch(g, target_dist, 0)?;
    let tg = ch(g, target_dist, 1)?;
    let rg = ch(g, target_dist, 2)?;
    let bg = ch(g, target_dist, 3)?;

    let iw_a = g.min(lp, lg)?;
    let iw_b = g.min(rp, rg)?;
    let iw = g.add(iw_a, iw_b)?;
    let ih_a = g.min(tp, tg)?;
    let ih_b = g.min(bp, bg)?;
    let ih = g.add(ih_a, ih_b)?;
    let inter = g.mul(iw, ih)?;

    let pw = g.add(lp, rp)?;
    let ph = g.add(tp, bp)?;
    let area_p = g.mul(pw, ph)?;
    let gw = g.add(lg, rg)?;
    let gh = g.add(tg, bg)?;
    let area_g = g.mul(gw, gh)?;
    let summed = g.add(area_p, area_g)?;
    let union = g.sub(summed, inter)?;
    let iou = g.div(inter, union)?;

    // mask * iou + (1 - mask): off-mask cells see ln(1) = 0
    let masked = g.mul(pos_mask, iou)?;
    let inv_mask = g.affine(pos_mask, -1.0, 1.0);
    let blended = g.add(masked, inv_mask)?;
    let ln_iou = g.ln(blended);
    let neg_ln = g.affine(ln_iou, -1.0, 0.0);
    let total = g.sum(neg_ln);
    Ok(g.affine(total, 1.0 / norm, 0.0))
}

/// Binary cross-entropy softplus(z) - t z on positive locations, normalized
/// by `norm`.
fn centerness_loss(g: &mut Graph, ctr: Var, target: Var, pos_mask: Var, norm: f64) -> Result<Var> {
    let sp = g.softplus(ctr);
    let tz = g.mul(target, ctr)?;
    let bce = g.sub(sp, tz)?;
    let masked = g.mul(bce, pos_mask)?;
    let total = g.sum(masked);
    Ok(g.affine(total, 1.0 / norm, 0.0))
}

/// Combined loss over every level. `levels` and `targets` must line up.
pub fn detection_loss(
    g: &mut Graph,
    levels: &[LevelHead],
    targets: &[LevelTargets],
    num_pos: usize,
) -> Result<LossBreakdown> {
    if levels.len() != targets.len() {
        return Err(Error::shape("level count", targets.len(), levels.len(), "head outputs vs targets"));
    }
    let norm = num_pos.max(1) as f64;
    let mut cls_total: Option<Var> = None;
    let mut reg_total: Option<Var> = None;
    let mut ctr_total: Option<Var> = None;
    for (head, t) in levels.iter().zip(targets) {
        let cls_t = g.leaf(t.cls.clone());
        let dist_t = g.leaf(t.distances.clone());
        let ctr_t = g.leaf(t.centerness.clone());
        let mask = g.leaf(t.pos_mask.clone());

        let c = focal_loss(g, head.cls, cls_t, norm)?;
        let r = iou_loss(g, head.reg, dist_t, mask, norm)?;
        let n = centerness_loss(g, head.ctr, ctr_t, mask, norm)?;
        cls_total = Some(match cls_total {
            Some(acc) => g.add(acc, c)?,
            None => c,
        });
        reg_total = Some(match reg_total {
            Some(acc) => g.add(acc, r)?,
            None => r,
        });
        ctr_total = Some(match ctr_total {
            Some(acc) => g.add(acc, n)?,
            None => n,
        });
    }
    let (cls, reg, ctr) = match (cls_total, reg_total, ctr_total) {
        (Some(c), Some(r), Some(n)) => (c, r, n),
        _ => return Err(Error::invalid("detection loss needs at least one level")),
    };
    let cr = g.add(cls, reg)?;
    let total = g.add(cr, ctr)?;
    Ok(LossBreakdown {
        total,
        cls: g.scalar_value(cls),
        reg: g.scalar_value(reg),
        ctr: g.scalar_value(ctr),
    })
}
