//! Small strided-convolution backbone producing four feature levels.
//!
//! A stride-2 stem followed by four stride-2 stages yields C2..C5 at strides
//! 4/8/16/32 with channel widths 16/32/64/128. Absolute accuracy is a
//! non-goal; the stage layout only has to exercise the pyramid plumbing.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::{ConvSpec, Tensor};

/// Channel widths of C2..C5.
pub const BACKBONE_CHANNELS: [usize; 4] = [16, 32, 64, 128];

/// Stem width (also the width of C2's stage input).
const STEM_CHANNELS: usize = 16;

#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub stem_w: Tensor,
    pub stem_b: Tensor,
    pub stage_w: [Tensor; 4],
    pub stage_b: [Tensor; 4],
}

impl BackboneParams {
    pub fn init(rng: &mut impl Rng) -> BackboneParams {
        fn conv<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Tensor {
            Tensor::randn([c_out, c_in, 3, 3], (1.0 / (c_in * 9) as f64).sqrt(), rng)
        }
        let stage_in = [STEM_CHANNELS, BACKBONE_CHANNELS[0], BACKBONE_CHANNELS[1], BACKBONE_CHANNELS[2]];
        BackboneParams {
            stem_w: conv(3, STEM_CHANNELS, rng),
            stem_b: Tensor::zeros([1, STEM_CHANNELS, 1, 1]),
            stage_w: std::array::from_fn(|i| conv(stage_in[i], BACKBONE_CHANNELS[i], rng)),
            stage_b: std::array::from_fn(|i| Tensor::zeros([1, BACKBONE_CHANNELS[i], 1, 1])),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> BackboneVars {
        BackboneVars {
            stem_w: g.leaf(self.stem_w.clone()),
            stem_b: g.leaf(self.stem_b.clone()),
            stage_w: std::array::from_fn(|i| g.leaf(self.stage_w[i].clone())),
            stage_b: std::array::from_fn(|i| g.leaf(self.stage_b[i].clone())),
        }
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("backbone.stem_w".into(), &mut self.stem_w),
            ("backbone.stem_b".into(), &mut self.stem_b),
        ];
        for (i, t) in self.stage_w.iter_mut().enumerate() {
            out.push((format!("backbone.stage{}_w", i + 2), t));
        }
        for (i, t) in self.stage_b.iter_mut().enumerate() {
            out.push((format!("backbone.stage{}_b", i + 2), t));
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BackboneVars {
    pub stem_w: Var,
    pub stem_b: Var,
    pub stage_w: [Var; 4],
    pub stage_b: [Var; 4],
}

impl BackboneVars {
    pub fn named(&self) -> Vec<(String, Var)> {
        let mut out = vec![
            ("backbone.stem_w".to_string(), self.stem_w),
            ("backbone.stem_b".to_string(), self.stem_b),
        ];
        for (i, v) in self.stage_w.iter().enumerate() {
            out.push((format!("backbone.stage{}_w", i + 2), *v));
        }
        for (i, v) in self.stage_b.iter().enumerate() {
            out.push((format!("backbone.stage{}_b", i + 2), *v));
        }
        out
    }
}

/// Run the backbone on an (N, 3, H, W) image whose sides are divisible
/// by 32, returning [C2, C3, C4, C5].
pub fn backbone_forward(g: &mut Graph, image: Var, vars: &BackboneVars) -> Result<[Var; 4]> {
    let [_, c, h, w] = g.value(image).shape();
    if c != 3 {
        return Err(Error::shape("image channels", 3, c, "backbone input"));
    }
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::invalid(format!(
            "image sides must be positive multiples of 32, got {h}x{w}"
        )));
    }
    let stem = g.conv2d(image, vars.stem_w, vars.stem_b, ConvSpec::same(3, 2))?;
    let mut x = g.relu(stem);
    let mut levels = Vec::with_capacity(4);
    for i in 0..4 {
        let conv = g.conv2d(x, vars.stage_w[i], vars.stage_b[i], ConvSpec::same(3, 2))?;
        x = g.relu(conv);
        levels.push(x);
    }
    Ok([levels[0], levels[1], levels[2], levels[3]])
}
