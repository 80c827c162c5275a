//! Conditionally generated multi-scale fusion.
//!
//! A plain feature pyramid treats every image the same way. This module
//! instead *generates* the weights of the fusion convolutions per batch from
//! the backbone features themselves, mixture-of-experts style: each patch in
//! the batch proposes one expert kernel, a learned routing head scores every
//! expert with a sigmoid gate, and the gated sum of expert kernels becomes
//! the weight of two grouped 1x1 convolutions. Those dynamic convolutions
//! fuse all pyramid levels (resized to the finest resolution) into one extra
//! high-resolution level, `P2'`, appended below the regular pyramid.
//!
//! Because the combined kernel sums contributions from every patch in the
//! batch, the output for one patch depends on which other patches it was
//! batched with — that coupling is the point, and is pinned down in tests.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::{ConvSpec, Tensor};

/// Sizing of the dynamic fusion path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DrmConfig {
    /// Channel width `d` of every pyramid level (and of `P2'`).
    pub channels: usize,
    /// Channel width of the fusion-operation feature map the kernels are
    /// generated from.
    pub fo_channels: usize,
    /// Group count of the two dynamic 1x1 convolutions.
    pub groups: usize,
}

impl Default for DrmConfig {
    fn default() -> DrmConfig {
        DrmConfig { channels: 256, fo_channels: 64, groups: 16 }
    }
}

impl DrmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.fo_channels == 0 || self.groups == 0 {
            return Err(Error::invalid("channel and group counts must be >= 1"));
        }
        if self.channels % self.groups != 0 {
            return Err(Error::shape(
                "pyramid channels",
                self.channels.next_multiple_of(self.groups),
                self.channels,
                format!("not divisible by {} groups", self.groups),
            ));
        }
        Ok(())
    }

    /// Number of scalars the expert head must produce: weights and biases of
    /// both grouped 1x1 fusion convolutions.
    ///
    /// conv1 maps the 4d-channel concat to d channels in `groups` groups
    /// (d * 4d/groups weights + d biases); conv2 maps d to d channels
    /// (d * d/groups weights + d biases).
    pub fn dynamic_param_count(&self) -> usize {
        let d = self.channels;
        let g = self.groups;
        d * (4 * d / g) + d + d * (d / g) + d
    }

    fn w1_len(&self) -> usize {
        self.channels * (4 * self.channels / self.groups)
    }

    fn w2_len(&self) -> usize {
        self.channels * (self.channels / self.groups)
    }
}

/// Learned (static) parameters of the fusion path.
#[derive(Clone, Debug)]
pub struct DrmParams {
    /// 3x3 conv from the concatenated backbone features to the
    /// fusion-operation map.
    pub fo_w: Tensor,
    pub fo_b: Tensor,
    /// 1x1 conv turning each patch's pooled descriptor into its expert's
    /// flattened kernel block.
    pub expert_w: Tensor,
    pub expert_b: Tensor,
    /// 1x1 conv producing the (pre-sigmoid) routing score of each expert.
    pub route_w: Tensor,
    pub route_b: Tensor,
}

impl DrmParams {
    /// Random initialization; weight scales shrink with fan-in so the
    /// generated kernels start small.
    pub fn init(cfg: &DrmConfig, backbone_channels: &[usize; 4], rng: &mut impl Rng) -> Result<DrmParams> {
        cfg.validate()?;
        let c_sum: usize = backbone_channels.iter().sum();
        if c_sum == 0 {
            return Err(Error::invalid("backbone channel counts must be >= 1"));
        }
        let p = cfg.dynamic_param_count();
        let fo_fan_in = (c_sum * 9) as f64;
        let head_fan_in = cfg.fo_channels as f64;
        Ok(DrmParams {
            fo_w: Tensor::randn([cfg.fo_channels, c_sum, 3, 3], (1.0 / fo_fan_in).sqrt(), rng),
            fo_b: Tensor::zeros([1, cfg.fo_channels, 1, 1]),
            expert_w: Tensor::randn([p, cfg.fo_channels, 1, 1], (1.0 / head_fan_in).sqrt(), rng),
            expert_b: Tensor::randn([1, p, 1, 1], 0.01, rng),
            route_w: Tensor::randn([1, cfg.fo_channels, 1, 1], (1.0 / head_fan_in).sqrt(), rng),
            route_b: Tensor::zeros([1, 1, 1, 1]),
        })
    }

    /// Register every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> DrmVars {
        DrmVars {
            fo_w: g.leaf(self.fo_w.clone()),
            fo_b: g.leaf(self.fo_b.clone()),
            expert_w: g.leaf(self.expert_w.clone()),
            expert_b: g.leaf(self.expert_b.clone()),
            route_w: g.leaf(self.route_w.clone()),
            route_b: g.leaf(self.route_b.clone()),
        }
    }

    /// Named views for checkpointing and optimizer updates.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("drm.fo_w".into(), &mut self.fo_w),
            ("drm.fo_b".into(), &mut self.fo_b),
            ("drm.expert_w".into(), &mut self.expert_w),
            ("drm.expert_b".into(), &mut self.expert_b),
            ("drm.route_w".into(), &mut self.route_w),
            ("drm.route_b".into(), &mut self.route_b),
        ]
    }
}

/// Graph handles of [`DrmParams`], paired with them by [`DrmParams::bind`].
#[derive(Clone, Copy, Debug)]
pub struct DrmVars {
    pub fo_w: Var,
    pub fo_b: Var,
    pub expert_w: Var,
    pub expert_b: Var,
    pub route_w: Var,
    pub route_b: Var,
}

impl DrmVars {
    pub fn ordered(&self) -> [(&'static str, Var); 6] {
        [
            ("drm.fo_w", self.fo_w),
            ("drm.fo_b", self.fo_b),
            ("drm.expert_w", self.expert_w),
            ("drm.expert_b", self.expert_b),
            ("drm.route_w", self.route_w),
            ("drm.route_b", self.route_b),
        ]
    }
}

/// Dynamic kernels for one batch, plus the routing gates they came from.
#[derive(Clone, Copy, Debug)]
pub struct DynamicKernels {
    /// (d, 4d/groups, 1, 1) weight of the first fusion conv.
    pub w1: Var,
    pub b1: Var,
    /// (d, d/groups, 1, 1) weight of the second fusion conv.
    pub w2: Var,
    pub b2: Var,
    /// (N, 1, 1, 1) sigmoid gate per expert/patch.
    pub routing: Var,
}

/// Squash all backbone levels to the finest one's resolution, concatenate,
/// and run the 3x3 fusion conv. Output: (N, fo_channels, H2, W2).
pub fn fusion_operation(g: &mut Graph, backbone: &[Var; 4], vars: &DrmVars) -> Result<Var> {
    let [h, w] = {
        let s = g.value(backbone[0]).shape();
        [s[2], s[3]]
    };
    let mut parts = Vec::with_capacity(4);
    parts.push(backbone[0]);
    for &level in &backbone[1..] {
        parts.push(g.resize_bilinear(level, h, w)?);
    }
    let stacked = g.concat_channels(&parts)?;
    g.conv2d(stacked, vars.fo_w, vars.fo_b, ConvSpec::same(3, 1))
}

/// Generate the fusion kernels from the fusion-operation map.
///
/// Each batch item's pooled descriptor is mapped to one flattened expert
/// kernel and one routing logit; the sigmoid-gated sum of experts is split
/// and reshaped into the weights and biases of the two fusion convolutions.
pub fn generate_dynamic_params(
    g: &mut Graph,
    fo: Var,
    vars: &DrmVars,
    cfg: &DrmConfig,
) -> Result<DynamicKernels> {
    cfg.validate()?;
    let d = cfg.channels;
    let grp = cfg.groups;
    let p = cfg.dynamic_param_count();
    if g.value(fo).channels() != cfg.fo_channels {
        return Err(Error::shape(
            "fusion channels",
            cfg.fo_channels,
            g.value(fo).channels(),
            "fusion-operation map vs config",
        ));
    }

    let pooled = g.global_avg_pool(fo)?;
    let experts = g.conv2d(pooled, vars.expert_w, vars.expert_b, ConvSpec::pointwise(1))?;
    let logits = g.conv2d(pooled, vars.route_w, vars.route_b, ConvSpec::pointwise(1))?;
    let routing = g.sigmoid(logits);
    let combined = g.weighted_batch_sum(experts, routing)?;
    debug_assert_eq!(g.value(combined).shape(), [1, p, 1, 1]);

    let w1_len = cfg.w1_len();
    let w2_len = cfg.w2_len();
    let mut off = 0;
    let w1_flat = g.slice_channels(combined, off, w1_len)?;
    off += w1_len;
    let b1_flat = g.slice_channels(combined, off, d)?;
    off += d;
    let w2_flat = g.slice_channels(combined, off, w2_len)?;
    off += w2_len;
    let b2_flat = g.slice_channels(combined, off, d)?;

    Ok(DynamicKernels {
        w1: g.reshape(w1_flat, [d, 4 * d / grp, 1, 1])?,
        b1: g.reshape(b1_flat, [1, d, 1, 1])?,
        w2: g.reshape(w2_flat, [d, d / grp, 1, 1])?,
        b2: g.reshape(b2_flat, [1, d, 1, 1])?,
        routing,
    })
}

/// Apply the dynamic kernels: resize every pyramid level to the finest
/// resolution, concatenate to 4d channels, then run the two grouped 1x1
/// convolutions back-to-back (both linear — there is deliberately no
/// nonlinearity between them).
pub fn fuse_pyramid(g: &mut Graph, pyramid: &[Var; 4], k: &DynamicKernels, cfg: &DrmConfig) -> Result<Var> {
    for (i, lv) in pyramid.iter().enumerate() {
        let c = g.value(*lv).channels();
        if c != cfg.channels {
            return Err(Error::shape("pyramid channels", cfg.channels, c, format!("pyramid level {i}")));
        }
    }
    let [h, w] = {
        let s = g.value(pyramid[0]).shape();
        [s[2], s[3]]
    };
    let mut parts = Vec::with_capacity(4);
    parts.push(pyramid[0]);
    for &level in &pyramid[1..] {
        parts.push(g.resize_bilinear(level, h, w)?);
    }
    let stacked = g.concat_channels(&parts)?;
    let mid = g.conv2d(stacked, k.w1, k.b1, ConvSpec::pointwise(cfg.groups))?;
    g.conv2d(mid, k.w2, k.b2, ConvSpec::pointwise(cfg.groups))
}

/// Coarsest pyramid level: 2x2/stride-2 max pooling of `P5` (window shrinks
/// to what fits when `P5` is already 1 pixel tall or wide).
pub fn build_p6(g: &mut Graph, p5: Var) -> Result<Var> {
    let [_, _, h, w] = g.value(p5).shape();
    let window = 2.min(h).min(w);
    g.max_pool2d(p5, window, 2)
}

/// Full fusion path: fusion operation on the backbone features, dynamic
/// kernel generation, and pyramid fusion. Returns `P2'` at the resolution of
/// `pyramid[0]`.
pub fn drm_forward(
    g: &mut Graph,
    backbone: &[Var; 4],
    pyramid: &[Var; 4],
    vars: &DrmVars,
    cfg: &DrmConfig,
) -> Result<Var> {
    let fo = fusion_operation(g, backbone, vars)?;
    let kernels = generate_dynamic_params(g, fo, vars, cfg)?;
    fuse_pyramid(g, pyramid, &kernels, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use crate::numerics::graph::stable_sigmoid;
    use crate::numerics::ops;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> DrmConfig {
        DrmConfig { channels: 4, fo_channels: 3, groups: 2 }
    }

    const BB_CH: [usize; 4] = [2, 3, 4, 5];

    fn small_inputs(rng: &mut ChaCha8Rng, n: usize) -> ([Tensor; 4], [Tensor; 4]) {
        let backbone = [
            Tensor::randn([n, BB_CH[0], 8, 8], 1.0, rng),
            Tensor::randn([n, BB_CH[1], 4, 4], 1.0, rng),
            Tensor::randn([n, BB_CH[2], 2, 2], 1.0, rng),
            Tensor::randn([n, BB_CH[3], 1, 1], 1.0, rng),
        ];
        let d = small_cfg().channels;
        let pyramid = [
            Tensor::randn([n, d, 8, 8], 1.0, rng),
            Tensor::randn([n, d, 4, 4], 1.0, rng),
            Tensor::randn([n, d, 2, 2], 1.0, rng),
            Tensor::randn([n, d, 1, 1], 1.0, rng),
        ];
        (backbone, pyramid)
    }

    fn forward(params: &DrmParams, cfg: &DrmConfig, backbone: &[Tensor; 4], pyramid: &[Tensor; 4]) -> Tensor {
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let bvars: [Var; 4] = std::array::from_fn(|i| g.leaf(backbone[i].clone()));
        let pvars: [Var; 4] = std::array::from_fn(|i| g.leaf(pyramid[i].clone()));
        let out = drm_forward(&mut g, &bvars, &pvars, &vars, cfg).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn dynamic_param_count_formula_matches_default_sizing() {
        let cfg = DrmConfig::default();
        // d=256, g=16: 256*64 + 256 + 256*16 + 256
        assert_eq!(cfg.dynamic_param_count(), 16384 + 256 + 4096 + 256);
        assert_eq!(small_cfg().dynamic_param_count(), 4 * 8 + 4 + 4 * 2 + 4);
    }

    #[test]
    fn config_rejects_channels_not_divisible_by_groups() {
        let cfg = DrmConfig { channels: 6, fo_channels: 3, groups: 4 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn output_is_finest_resolution_with_d_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = small_cfg();
        let params = DrmParams::init(&cfg, &BB_CH, &mut rng).unwrap();
        let (backbone, pyramid) = small_inputs(&mut rng, 2);
        let out = forward(&params, &cfg, &backbone, &pyramid);
        assert_eq!(out.shape(), [2, 4, 8, 8]);
        assert!(out.all_finite());
    }

    /// Straight-line recomputation with the bare kernels, no graph: pins the
    /// wiring of the whole fusion path.
    #[test]
    fn graph_forward_matches_straight_line_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = small_cfg();
        let params = DrmParams::init(&cfg, &BB_CH, &mut rng).unwrap();
        let (backbone, pyramid) = small_inputs(&mut rng, 3);
        let got = forward(&params, &cfg, &backbone, &pyramid);

        // fusion operation
        let (h2, w2) = (backbone[0].height(), backbone[0].width());
        let resized: Vec<Tensor> = backbone
            .iter()
            .map(|t| ops::resize_bilinear(t, h2, w2).unwrap())
            .collect();
        let cat_refs: Vec<&Tensor> = resized.iter().collect();
        let stacked = ops::concat_channels(&cat_refs).unwrap();
        let fo = ops::conv2d(&stacked, &params.fo_w, params.fo_b.data(), &ConvSpec::same(3, 1)).unwrap();

        // per-patch experts and routing gates
        let pooled = ops::global_avg_pool(&fo).unwrap();
        let experts = ops::conv2d(&pooled, &params.expert_w, params.expert_b.data(), &ConvSpec::pointwise(1)).unwrap();
        let logits = ops::conv2d(&pooled, &params.route_w, params.route_b.data(), &ConvSpec::pointwise(1)).unwrap();
        let p = cfg.dynamic_param_count();
        let n = 3;
        let mut combined = vec![0.0; p];
        for b in 0..n {
            let gate = stable_sigmoid(logits.at(b, 0, 0, 0));
            for i in 0..p {
                combined[i] += gate * experts.at(b, i, 0, 0);
            }
        }

        // split the flat vector into the two convolutions' weights/biases
        let d = cfg.channels;
        let (w1_len, w2_len) = (cfg.w1_len(), cfg.w2_len());
        let dyn_w1 = Tensor::from_vec([d, 4 * d / cfg.groups, 1, 1], combined[..w1_len].to_vec()).unwrap();
        let dyn_b1 = combined[w1_len..w1_len + d].to_vec();
        let dyn_w2 = Tensor::from_vec([d, d / cfg.groups, 1, 1], combined[w1_len + d..w1_len + d + w2_len].to_vec()).unwrap();
        let dyn_b2 = combined[w1_len + d + w2_len..].to_vec();

        // dynamic fusion of the pyramid
        let pr: Vec<Tensor> = pyramid
            .iter()
            .map(|t| ops::resize_bilinear(t, h2, w2).unwrap())
            .collect();
        let pref: Vec<&Tensor> = pr.iter().collect();
        let pcat = ops::concat_channels(&pref).unwrap();
        let mid = ops::conv2d(&pcat, &dyn_w1, &dyn_b1, &ConvSpec::pointwise(cfg.groups)).unwrap();
        let want = ops::conv2d(&mid, &dyn_w2, &dyn_b2, &ConvSpec::pointwise(cfg.groups)).unwrap();

        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    /// The gated sum over experts is order-free, so shuffling the batch must
    /// not change any patch's fused output.
    #[test]
    fn batch_permutation_leaves_each_patch_output_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cfg = small_cfg();
        let params = DrmParams::init(&cfg, &BB_CH, &mut rng).unwrap();
        let (backbone, pyramid) = small_inputs(&mut rng, 2);

        let fwd = forward(&params, &cfg, &backbone, &pyramid);

        let swap = |t: &Tensor| {
            Tensor::stack_batch(&[t.batch_item(1), t.batch_item(0)]).unwrap()
        };
        let backbone_sw: [Tensor; 4] = std::array::from_fn(|i| swap(&backbone[i]));
        let pyramid_sw: [Tensor; 4] = std::array::from_fn(|i| swap(&pyramid[i]));
        let rev = forward(&params, &cfg, &backbone_sw, &pyramid_sw);

        let (a0, a1) = (fwd.batch_item(0), fwd.batch_item(1));
        let (b0, b1) = (rev.batch_item(1), rev.batch_item(0));
        for (x, y) in a0.data().iter().zip(b0.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
        for (x, y) in a1.data().iter().zip(b1.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
    }

    /// The kernel is generated from the whole batch, so the same patch fused
    /// alone vs. alongside a different patch gives different results.
    #[test]
    fn fusion_couples_patches_within_a_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cfg = small_cfg();
        let params = DrmParams::init(&cfg, &BB_CH, &mut rng).unwrap();
        let (backbone, pyramid) = small_inputs(&mut rng, 2);

        let joint = forward(&params, &cfg, &backbone, &pyramid);
        let solo_backbone: [Tensor; 4] = std::array::from_fn(|i| backbone[i].batch_item(0));
        let solo_pyramid: [Tensor; 4] = std::array::from_fn(|i| pyramid[i].batch_item(0));
        let solo = forward(&params, &cfg, &solo_backbone, &solo_pyramid);

        let joint_first = joint.batch_item(0);
        let max_diff = joint_first
            .data()
            .iter()
            .zip(solo.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 1e-6, "batching had no effect on the generated kernels (diff {max_diff})");
    }

    /// With the conditioning features held fixed the fusion is affine in the
    /// pyramid: out(a*x) - out(0) == a * (out(x) - out(0)).
    #[test]
    fn fusion_is_affine_in_the_pyramid_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let cfg = small_cfg();
        let params = DrmParams::init(&cfg, &BB_CH, &mut rng).unwrap();
        let (backbone, pyramid) = small_inputs(&mut rng, 2);

        let scale = |ts: &[Tensor; 4], a: f64| -> [Tensor; 4] {
            std::array::from_fn(|i| {
                let mut t = ts[i].clone();
                for v in t.data_mut() {
                    *v *= a;
                }
                t
            })
        };
        let out1 = forward(&params, &cfg, &backbone, &pyramid);
        let out3 = forward(&params, &cfg, &backbone, &scale(&pyramid, 3.0));
        let out0 = forward(&params, &cfg, &backbone, &scale(&pyramid, 0.0));
        for i in 0..out1.len() {
            let lin = out1.data()[i] - out0.data()[i];
            let lin3 = out3.data()[i] - out0.data()[i];
            assert_abs_diff_eq!(lin3, 3.0 * lin, epsilon = 1e-8);
        }
    }

    #[test]
    fn p6_is_strided_pool_of_p5_and_survives_1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut g = Graph::new();
        let p5 = g.leaf(Tensor::randn([1, 4, 4, 4], 1.0, &mut rng));
        let p6 = build_p6(&mut g, p5).unwrap();
        assert_eq!(g.value(p6).shape(), [1, 4, 2, 2]);

        let tiny = g.leaf(Tensor::randn([1, 4, 1, 1], 1.0, &mut rng));
        let p6_tiny = build_p6(&mut g, tiny).unwrap();
        assert_eq!(g.value(p6_tiny).shape(), [1, 4, 1, 1]);
        assert_eq!(g.value(p6_tiny).data(), g.value(tiny).data());
    }

    #[test]
    fn gradients_flow_to_every_parameter_and_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let cfg = DrmConfig { channels: 2, fo_channels: 2, groups: 1 };
        let bb_ch = [1usize, 1, 1, 1];
        let params = DrmParams::init(&cfg, &bb_ch, &mut rng).unwrap();
        let backbone = [
            Tensor::randn([2, 1, 4, 4], 1.0, &mut rng),
            Tensor::randn([2, 1, 2, 2], 1.0, &mut rng),
            Tensor::randn([2, 1, 1, 1], 1.0, &mut rng),
            Tensor::randn([2, 1, 1, 1], 1.0, &mut rng),
        ];
        let pyramid = [
            Tensor::randn([2, 2, 4, 4], 1.0, &mut rng),
            Tensor::randn([2, 2, 2, 2], 1.0, &mut rng),
            Tensor::randn([2, 2, 1, 1], 1.0, &mut rng),
            Tensor::randn([2, 2, 1, 1], 1.0, &mut rng),
        ];

        let inputs = vec![
            params.fo_w.clone(),
            params.fo_b.clone(),
            params.expert_w.clone(),
            params.expert_b.clone(),
            params.route_w.clone(),
            params.route_b.clone(),
            backbone[0].clone(),
            backbone[1].clone(),
            backbone[2].clone(),
            backbone[3].clone(),
            pyramid[0].clone(),
            pyramid[1].clone(),
            pyramid[2].clone(),
            pyramid[3].clone(),
        ];
        let report = grad_check(
            move |g, vars| {
                let dv = DrmVars {
                    fo_w: vars[0],
                    fo_b: vars[1],
                    expert_w: vars[2],
                    expert_b: vars[3],
                    route_w: vars[4],
                    route_b: vars[5],
                };
                let bb = [vars[6], vars[7], vars[8], vars[9]];
                let pyr = [vars[10], vars[11], vars[12], vars[13]];
                drm_forward(g, &bb, &pyr, &dv, &cfg)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "worst {:?}", report.worst);
    }
}
