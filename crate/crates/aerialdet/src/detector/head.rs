//! Anchor-free detection head shared across pyramid levels.
//!
//! Two small convolution towers (classification and regression, one 3x3 +
//! ReLU each) feed three predictors: per-class logits, four box distances
//! (left/top/right/bottom in stride units, exponential-transformed so they
//! are strictly positive), and a center-ness logit on the regression tower.

use rand::Rng;

use crate::error::Result;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::{ConvSpec, Tensor};

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub cls_tower_w: Tensor,
    pub cls_tower_b: Tensor,
    pub reg_tower_w: Tensor,
    pub reg_tower_b: Tensor,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
    pub reg_w: Tensor,
    pub reg_b: Tensor,
    pub ctr_w: Tensor,
    pub ctr_b: Tensor,
}

impl HeadParams {
    pub fn init(channels: usize, classes: usize, rng: &mut impl Rng) -> HeadParams {
        let std3 = (1.0 / (channels * 9) as f64).sqrt();
        HeadParams {
            cls_tower_w: Tensor::randn([channels, channels, 3, 3], std3, rng),
            cls_tower_b: Tensor::zeros([1, channels, 1, 1]),
            reg_tower_w: Tensor::randn([channels, channels, 3, 3], std3, rng),
            reg_tower_b: Tensor::zeros([1, channels, 1, 1]),
            cls_w: Tensor::randn([classes, channels, 3, 3], std3, rng),
            cls_b: Tensor::zeros([1, classes, 1, 1]),
            reg_w: Tensor::randn([4, channels, 3, 3], std3, rng),
            reg_b: Tensor::zeros([1, 4, 1, 1]),
            ctr_w: Tensor::randn([1, channels, 3, 3], std3, rng),
            ctr_b: Tensor::zeros([1, 1, 1, 1]),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> HeadVars {
        HeadVars {
            cls_tower_w: g.leaf(self.cls_tower_w.clone()),
            cls_tower_b: g.leaf(self.cls_tower_b.clone()),
            reg_tower_w: g.leaf(self.reg_tower_w.clone()),
            reg_tower_b: g.leaf(self.reg_tower_b.clone()),
            cls_w: g.leaf(self.cls_w.clone()),
            cls_b: g.leaf(self.cls_b.clone()),
            reg_w: g.leaf(self.reg_w.clone()),
            reg_b: g.leaf(self.reg_b.clone()),
            ctr_w: g.leaf(self.ctr_w.clone()),
            ctr_b: g.leaf(self.ctr_b.clone()),
        }
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("head.cls_tower_w".into(), &mut self.cls_tower_w),
            ("head.cls_tower_b".into(), &mut self.cls_tower_b),
            ("head.reg_tower_w".into(), &mut self.reg_tower_w),
            ("head.reg_tower_b".into(), &mut self.reg_tower_b),
            ("head.cls_w".into(), &mut self.cls_w),
            ("head.cls_b".into(), &mut self.cls_b),
            ("head.reg_w".into(), &mut self.reg_w),
            ("head.reg_b".into(), &mut self.reg_b),
            ("head.ctr_w".into(), &mut self.ctr_w),
            ("head.ctr_b".into(), &mut self.ctr_b),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub cls_tower_w: Var,
    pub cls_tower_b: Var,
    pub reg_tower_w: Var,
    pub reg_tower_b: Var,
    pub cls_w: Var,
    pub cls_b: Var,
    pub reg_w: Var,
    pub reg_b: Var,
    pub ctr_w: Var,
    pub ctr_b: Var,
}

impl HeadVars {
    pub fn named(&self) -> Vec<(String, Var)> {
        vec![
            ("head.cls_tower_w".to_string(), self.cls_tower_w),
            ("head.cls_tower_b".to_string(), self.cls_tower_b),
            ("head.reg_tower_w".to_string(), self.reg_tower_w),
            ("head.reg_tower_b".to_string(), self.reg_tower_b),
            ("head.cls_w".to_string(), self.cls_w),
            ("head.cls_b".to_string(), self.cls_b),
            ("head.reg_w".to_string(), self.reg_w),
            ("head.reg_b".to_string(), self.reg_b),
            ("head.ctr_w".to_string(), self.ctr_w),
            ("head.ctr_b".to_string(), self.ctr_b),
        ]
    }
}

/// One level's raw head outputs.
#[derive(Clone, Copy, Debug)]
pub struct LevelHead {
    /// (N, classes, H, W) class logits.
    pub cls: Var,
    /// (N, 4, H, W) strictly positive distances in stride units.
    pub reg: Var,
    /// (N, 1, H, W) center-ness logits.
    pub ctr: Var,
}

/// Apply the shared head to one pyramid level.
pub fn fcos_head_forward(g: &mut Graph, p: Var, vars: &HeadVars) -> Result<LevelHead> {
    let ct = g.conv2d(p, vars.cls_tower_w, vars.cls_tower_b, ConvSpec::same(3, 1))?;
    let ct = g.relu(ct);
    let rt = g.conv2d(p, vars.reg_tower_w, vars.reg_tower_b, ConvSpec::same(3, 1))?;
    let rt = g.relu(rt);
    let cls = g.conv2d(ct, vars.cls_w, vars.cls_b, ConvSpec::same(3, 1))?;
    let reg_raw = g.conv2d(rt, vars.reg_w, vars.reg_b, ConvSpec::same(3, 1))?;
    let reg = g.exp(reg_raw);
    let ctr = g.conv2d(rt, vars.ctr_w, vars.ctr_b, ConvSpec::same(3, 1))?;
    Ok(LevelHead { cls, reg, ctr })
}
