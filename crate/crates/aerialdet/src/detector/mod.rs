//! Toy detector assembly: backbone, pyramid, optional conditional fusion
//! (extra finest level P2'), optional key-point attention, anchor-free
//! heads, decoding, and micro-training.
//!
//! The assembly is deliberately small — it exists to exercise the fusion and
//! attention mechanisms end to end, not to reach any absolute accuracy.

pub mod backbone;
pub mod fpn;
pub mod head;
pub mod loss;
pub mod train;

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bvr::{bvr_head_forward, BvrConfig, BvrParams, BvrVars, KeySet};
use crate::dota::{Detection, Hbb, CATEGORIES};
use crate::drm::{fusion_operation, fuse_pyramid, generate_dynamic_params, DrmConfig, DrmParams, DrmVars};
use crate::error::{Error, Result};
use crate::eval::iou_hbb;
use crate::numerics::graph::{stable_sigmoid, Graph, Var};
use crate::numerics::tensor::Tensor;

pub use backbone::{backbone_forward, BackboneParams, BackboneVars, BACKBONE_CHANNELS};
pub use fpn::{fpn_forward, FpnParams, FpnVars};
pub use head::{fcos_head_forward, HeadParams, HeadVars, LevelHead};
pub use loss::{assign_targets, detection_loss, range_for_stride, GtObject, LevelTargets, LossBreakdown};
pub use train::{
    evaluate_loss, micro_train, micro_train_step, synthetic_dataset, synthetic_scene, Sgd, StepReport,
    SyntheticScene,
};

/// SGD settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> OptimizerConfig {
        OptimizerConfig { lr: 0.0025, momentum: 0.9, weight_decay: 1e-4 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Top-level sizing and switches of the detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Object categories (15 for the aerial vocabulary).
    pub classes: usize,
    /// Pyramid channel width `d`. The desk-scale default is small; the
    /// fusion and attention modules keep their own paper-scale defaults.
    pub channels: usize,
    /// Add the conditionally fused extra finest level P2'.
    pub drm: bool,
    /// Enhance every consumed level with key-point attention.
    pub bvr: bool,
    /// Keys per image for the attention (cap 400).
    pub k_max: usize,
    /// Decode: minimum score.
    pub score_thresh: f64,
    /// Decode: per-class NMS IoU threshold.
    pub nms_iou: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for DetectorConfig {
    fn default() -> DetectorConfig {
        DetectorConfig {
            classes: CATEGORIES.len(),
            channels: 32,
            drm: true,
            bvr: true,
            k_max: 50,
            score_thresh: 0.05,
            nms_iou: 0.5,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Largest group count from {16, 8, 4, 2} dividing `d` (1 otherwise).
fn fusion_groups(d: usize) -> usize {
    [16usize, 8, 4, 2].into_iter().find(|g| d % g == 0).unwrap_or(1)
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::invalid("class count must be >= 1"));
        }
        if self.channels == 0 {
            return Err(Error::invalid("pyramid width must be >= 1"));
        }
        for (name, v) in [("score threshold", self.score_thresh), ("NMS IoU threshold", self.nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        self.optimizer.validate()?;
        if self.drm {
            self.drm_config().validate()?;
        }
        if self.bvr {
            self.bvr_config().validate()?;
        }
        Ok(())
    }

    /// Fusion-module sizing derived from the pyramid width.
    pub fn drm_config(&self) -> DrmConfig {
        DrmConfig {
            channels: self.channels,
            fo_channels: (self.channels / 4).max(8),
            groups: fusion_groups(self.channels),
        }
    }

    /// Attention sizing derived from the pyramid width.
    pub fn bvr_config(&self) -> BvrConfig {
        BvrConfig {
            channels: self.channels,
            attn_dim: (self.channels / 4).max(4),
            embed_dim: 64,
            top_k: self.k_max,
            max_period: 1000.0,
        }
    }
}

/// Every learned tensor of the assembled detector.
#[derive(Clone, Debug)]
pub struct DetectorParams {
    pub config: DetectorConfig,
    pub backbone: BackboneParams,
    pub fpn: FpnParams,
    pub head: HeadParams,
    pub drm: Option<DrmParams>,
    pub bvr: Option<BvrParams>,
}

impl DetectorParams {
    pub fn init(cfg: &DetectorConfig, rng: &mut impl Rng) -> Result<DetectorParams> {
        cfg.validate()?;
        Ok(DetectorParams {
            config: *cfg,
            backbone: BackboneParams::init(rng),
            fpn: FpnParams::init(cfg.channels, rng),
            head: HeadParams::init(cfg.channels, cfg.classes, rng),
            drm: if cfg.drm {
                Some(DrmParams::init(&cfg.drm_config(), &BACKBONE_CHANNELS, rng)?)
            } else {
                None
            },
            bvr: if cfg.bvr { Some(BvrParams::init(&cfg.bvr_config(), rng)?) } else { None },
        })
    }

    pub fn bind(&self, g: &mut Graph) -> DetectorVars {
        DetectorVars {
            backbone: self.backbone.bind(g),
            fpn: self.fpn.bind(g),
            head: self.head.bind(g),
            drm: self.drm.as_ref().map(|p| p.bind(g)),
            bvr: self.bvr.as_ref().map(|p| p.bind(g)),
        }
    }

    /// Canonical (name, tensor) order shared with [`DetectorVars::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.backbone.named_mut();
        out.extend(self.fpn.named_mut());
        out.extend(self.head.named_mut());
        if let Some(drm) = &mut self.drm {
            out.extend(drm.named_mut());
        }
        if let Some(bvr) = &mut self.bvr {
            out.extend(bvr.named_mut());
        }
        out
    }
}

/// Graph handles of [`DetectorParams`].
#[derive(Clone, Copy, Debug)]
pub struct DetectorVars {
    pub backbone: BackboneVars,
    pub fpn: FpnVars,
    pub head: HeadVars,
    pub drm: Option<DrmVars>,
    pub bvr: Option<BvrVars>,
}

impl DetectorVars {
    /// Must mirror [`DetectorParams::named_mut`] exactly.
    pub fn named(&self) -> Vec<(String, Var)> {
        let mut out = self.backbone.named();
        out.extend(self.fpn.named());
        out.extend(self.head.named());
        if let Some(drm) = &self.drm {
            out.extend(drm.ordered().map(|(n, v)| (n.to_string(), v)));
        }
        if let Some(bvr) = &self.bvr {
            out.extend(bvr.ordered().map(|(n, v)| (n.to_string(), v)));
        }
        out
    }
}

/// One consumed pyramid level with its head outputs.
#[derive(Clone, Copy, Debug)]
pub struct PyramidLevelOutput {
    pub name: &'static str,
    pub stride: usize,
    /// The (possibly attention-enhanced) feature the head consumed.
    pub feature: Var,
    pub head: LevelHead,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct DetectorForward {
    pub backbone: [Var; 4],
    /// P2..P6 straight out of the pyramid (before any enhancement).
    pub pyramid: [Var; 5],
    pub p2_prime: Option<Var>,
    /// Conditional-fusion routing gate per image, (N, 1, 1, 1).
    pub routing: Option<Var>,
    /// Head order: P2' first when present, then P2..P6.
    pub levels: Vec<PyramidLevelOutput>,
    /// Selected attention keys per level (aligned with `levels`), per image;
    /// empty when the attention is off.
    pub keys: Vec<Vec<KeySet>>,
}

/// Full forward pass.
pub fn detector_forward(
    g: &mut Graph,
    image: Var,
    vars: &DetectorVars,
    cfg: &DetectorConfig,
) -> Result<DetectorForward> {
    cfg.validate()?;
    if cfg.drm != vars.drm.is_some() || cfg.bvr != vars.bvr.is_some() {
        return Err(Error::invalid("config switches disagree with the bound parameters"));
    }
    let c = backbone_forward(g, image, &vars.backbone)?;
    let p = fpn_forward(g, &c, &vars.fpn)?;

    let (p2_prime, routing) = match &vars.drm {
        Some(drm_vars) => {
            let drm_cfg = cfg.drm_config();
            let fo = fusion_operation(g, &c, drm_vars)?;
            let kernels = generate_dynamic_params(g, fo, drm_vars, &drm_cfg)?;
            let fused = fuse_pyramid(g, &[p[0], p[1], p[2], p[3]], &kernels, &drm_cfg)?;
            (Some(fused), Some(kernels.routing))
        }
        None => (None, None),
    };

    let mut consumed: Vec<(&'static str, usize, Var)> = Vec::with_capacity(6);
    if let Some(extra) = p2_prime {
        consumed.push(("P2'", 4, extra));
    }
    for (i, &lv) in p.iter().enumerate() {
        let names = ["P2", "P3", "P4", "P5", "P6"];
        consumed.push((names[i], 4 << i, lv));
    }

    let bvr_cfg = cfg.bvr_config();
    let mut levels = Vec::with_capacity(consumed.len());
    let mut keys = Vec::with_capacity(consumed.len());
    for (name, stride, feature) in consumed {
        let (head_input, level_keys) = match &vars.bvr {
            Some(bvr_vars) => {
                let out = bvr_head_forward(g, feature, bvr_vars, &bvr_cfg)?;
                (out.enhanced, out.keys)
            }
            None => (feature, Vec::new()),
        };
        let head = fcos_head_forward(g, head_input, &vars.head)?;
        levels.push(PyramidLevelOutput { name, stride, feature: head_input, head });
        keys.push(level_keys);
    }

    Ok(DetectorForward { backbone: c, pyramid: p, p2_prime, routing, levels, keys })
}

/// Value-level copy of one level's head outputs, for decoding.
#[derive(Clone, Debug)]
pub struct LevelMaps {
    pub stride: usize,
    pub cls: Tensor,
    pub reg: Tensor,
    pub ctr: Tensor,
}

impl DetectorForward {
    pub fn level_maps(&self, g: &Graph) -> Vec<LevelMaps> {
        self.levels
            .iter()
            .map(|lv| LevelMaps {
                stride: lv.stride,
                cls: g.value(lv.head.cls).clone(),
                reg: g.value(lv.head.reg).clone(),
                ctr: g.value(lv.head.ctr).clone(),
            })
            .collect()
    }
}

/// One decoded box.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredBox {
    pub class: usize,
    pub score: f64,
    pub bbox: Hbb,
}

/// Greedy per-class NMS: keep in descending score order (stable on ties),
/// drop anything overlapping a kept box above the threshold.
fn nms_boxes(boxes: &[ScoredBox], iou_thresh: f64) -> Vec<ScoredBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score).then(a.cmp(&b)));
    let mut kept: Vec<ScoredBox> = Vec::new();
    for idx in order {
        let cand = &boxes[idx];
        if kept
            .iter()
            .all(|k| k.class != cand.class || iou_hbb(&k.bbox, &cand.bbox) <= iou_thresh)
        {
            kept.push(cand.clone());
        }
    }
    kept
}

/// Decode dense head outputs into scored boxes per image: score is the
/// product of the class and center-ness sigmoids, boxes grow from the cell
/// center by the predicted distances times the stride, get clipped to the
/// image, and pass per-class NMS.
pub fn decode_detections(
    levels: &[LevelMaps],
    image_hw: (usize, usize),
    cfg: &DetectorConfig,
) -> Result<Vec<Vec<ScoredBox>>> {
    if levels.is_empty() {
        return Err(Error::invalid("decoding needs at least one level"));
    }
    let n = levels[0].cls.shape()[0];
    let (img_h, img_w) = image_hw;
    for lv in levels {
        let [ln, c, h, w] = lv.cls.shape();
        if ln != n {
            return Err(Error::shape("batch", n, ln, "level batch sizes"));
        }
        if c != cfg.classes {
            return Err(Error::shape("class channels", cfg.classes, c, "decode"));
        }
        if lv.reg.shape() != [n, 4, h, w] || lv.ctr.shape() != [n, 1, h, w] {
            return Err(Error::invalid("regression/center-ness shapes disagree with the class map"));
        }
    }

    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let mut candidates = Vec::new();
        for lv in levels {
            let [_, _, h, w] = lv.cls.shape();
            let s = lv.stride as f64;
            for y in 0..h {
                for x in 0..w {
                    let ctr_q = stable_sigmoid(lv.ctr.at(b, 0, y, x));
                    let cx = (x as f64 + 0.5) * s;
                    let cy = (y as f64 + 0.5) * s;
                    for class in 0..cfg.classes {
                        let score = stable_sigmoid(lv.cls.at(b, class, y, x)) * ctr_q;
                        if score <= cfg.score_thresh {
                            continue;
                        }
                        let bbox = Hbb::new(
                            (cx - lv.reg.at(b, 0, y, x) * s).clamp(0.0, img_w as f64),
                            (cy - lv.reg.at(b, 1, y, x) * s).clamp(0.0, img_h as f64),
                            (cx + lv.reg.at(b, 2, y, x) * s).clamp(0.0, img_w as f64),
                            (cy + lv.reg.at(b, 3, y, x) * s).clamp(0.0, img_h as f64),
                        );
                        candidates.push(ScoredBox { class, score, bbox });
                    }
                }
            }
        }
        out.push(nms_boxes(&candidates, cfg.nms_iou));
    }
    Ok(out)
}

/// Map decoded boxes onto the shared detection-record type using the fixed
/// category vocabulary.
pub fn to_detections(image_id: &str, boxes: &[ScoredBox]) -> Result<Vec<Detection>> {
    boxes
        .iter()
        .map(|sb| {
            let category = CATEGORIES
                .get(sb.class)
                .ok_or_else(|| Error::invalid(format!("class index {} has no category name", sb.class)))?;
            Ok(Detection {
                image_id: image_id.to_string(),
                category: category.to_string(),
                score: sb.score,
                bbox: sb.bbox,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// checkpointing

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: [usize; 4],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: DetectorConfig,
    tensors: BTreeMap<String, TensorRecord>,
}

/// Write config and every named tensor as JSON.
pub fn save_checkpoint(path: &Path, params: &DetectorParams) -> Result<()> {
    let mut scratch = params.clone();
    let mut tensors = BTreeMap::new();
    for (name, t) in scratch.named_mut() {
        tensors.insert(name, TensorRecord { shape: t.shape(), data: t.data().to_vec() });
    }
    let file = CheckpointFile { config: params.config, tensors };
    let f = std::fs::File::create(path)?;
    serde_json::to_writer(f, &file).map_err(|e| Error::Checkpoint(format!("{path:?}: {e}")))
}

/// Read a checkpoint back; every tensor must be present, finite, and of the
/// shape the config implies.
pub fn load_checkpoint(path: &Path) -> Result<DetectorParams> {
    let f = std::fs::File::open(path)?;
    let file: CheckpointFile =
        serde_json::from_reader(f).map_err(|e| Error::Checkpoint(format!("{path:?}: {e}")))?;
    let mut tensors = file.tensors;
    let mut params = DetectorParams::init(&file.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    for (name, t) in params.named_mut() {
        let record = tensors
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if record.shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {:?} does not match the config's {:?}",
                record.shape,
                t.shape()
            )));
        }
        let loaded = Tensor::from_vec(record.shape, record.data)?;
        if !loaded.all_finite() {
            return Err(Error::Checkpoint(format!("tensor {name} contains non-finite values")));
        }
        *t = loaded;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unknown tensor {extra}")));
    }
    Ok(params)
}
