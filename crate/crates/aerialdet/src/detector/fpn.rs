//! Feature pyramid: top-down pathway over the backbone levels.
//!
//! Each backbone level is projected to the shared pyramid width with a 1x1
//! lateral convolution; coarser levels are nearest-upsampled by 2 and added
//! on the way down; a 3x3 convolution smooths every merged map. P6 is max
//! pooling of P5.

use rand::Rng;

use crate::drm::build_p6;
use crate::error::Result;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::{ConvSpec, Tensor};

use super::backbone::BACKBONE_CHANNELS;

#[derive(Clone, Debug)]
pub struct FpnParams {
    pub lateral_w: [Tensor; 4],
    pub lateral_b: [Tensor; 4],
    pub smooth_w: [Tensor; 4],
    pub smooth_b: [Tensor; 4],
}

impl FpnParams {
    pub fn init(channels: usize, rng: &mut impl Rng) -> FpnParams {
        FpnParams {
            lateral_w: std::array::from_fn(|i| {
                let c_in = BACKBONE_CHANNELS[i];
                Tensor::randn([channels, c_in, 1, 1], (1.0 / c_in as f64).sqrt(), rng)
            }),
            lateral_b: std::array::from_fn(|_| Tensor::zeros([1, channels, 1, 1])),
            smooth_w: std::array::from_fn(|_| {
                Tensor::randn([channels, channels, 3, 3], (1.0 / (channels * 9) as f64).sqrt(), rng)
            }),
            smooth_b: std::array::from_fn(|_| Tensor::zeros([1, channels, 1, 1])),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> FpnVars {
        FpnVars {
            lateral_w: std::array::from_fn(|i| g.leaf(self.lateral_w[i].clone())),
            lateral_b: std::array::from_fn(|i| g.leaf(self.lateral_b[i].clone())),
            smooth_w: std::array::from_fn(|i| g.leaf(self.smooth_w[i].clone())),
            smooth_b: std::array::from_fn(|i| g.leaf(self.smooth_b[i].clone())),
        }
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, t) in self.lateral_w.iter_mut().enumerate() {
            out.push((format!("fpn.lateral{}_w", i + 2), t));
        }
        for (i, t) in self.lateral_b.iter_mut().enumerate() {
            out.push((format!("fpn.lateral{}_b", i + 2), t));
        }
        for (i, t) in self.smooth_w.iter_mut().enumerate() {
            out.push((format!("fpn.smooth{}_w", i + 2), t));
        }
        for (i, t) in self.smooth_b.iter_mut().enumerate() {
            out.push((format!("fpn.smooth{}_b", i + 2), t));
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FpnVars {
    pub lateral_w: [Var; 4],
    pub lateral_b: [Var; 4],
    pub smooth_w: [Var; 4],
    pub smooth_b: [Var; 4],
}

impl FpnVars {
    pub fn named(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (i, v) in self.lateral_w.iter().enumerate() {
            out.push((format!("fpn.lateral{}_w", i + 2), *v));
        }
        for (i, v) in self.lateral_b.iter().enumerate() {
            out.push((format!("fpn.lateral{}_b", i + 2), *v));
        }
        for (i, v) in self.smooth_w.iter().enumerate() {
            out.push((format!("fpn.smooth{}_w", i + 2), *v));
        }
        for (i, v) in self.smooth_b.iter().enumerate() {
            out.push((format!("fpn.smooth{}_b", i + 2), *v));
        }
        out
    }
}

/// Build [P2, P3, P4, P5, P6] from [C2, C3, C4, C5].
pub fn fpn_forward(g: &mut Graph, c: &[Var; 4], vars: &FpnVars) -> Result<[Var; 5]> {
    // lateral projections, coarsest first
    let mut merged = [None; 4];
    let mut carry: Option<Var> = None;
    for i in (0..4).rev() {
        let lat = g.conv2d(c[i], vars.lateral_w[i], vars.lateral_b[i], ConvSpec::pointwise(1))?;
        let m = match carry {
            Some(coarser) => {
                let up = g.upsample_nearest(coarser, 2)?;
                g.add(lat, up)?
            }
            None => lat,
        };
        merged[i] = Some(m);
        carry = Some(m);
    }
    let mut p = Vec::with_capacity(5);
    for i in 0..4 {
        let sm = g.conv2d(merged[i].unwrap(), vars.smooth_w[i], vars.smooth_b[i], ConvSpec::same(3, 1))?;
        p.push(sm);
    }
    let p6 = build_p6(g, p[3])?;
    Ok([p[0], p[1], p[2], p[3], p6])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::backbone::{backbone_forward, BackboneParams};
    use crate::numerics::gradcheck::grad_check_sampled;
    use crate::numerics::ops;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 8;

    fn backbone_values(seed: u64, size: usize) -> [Tensor; 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = BackboneParams::init(&mut rng);
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let image = g.leaf(Tensor::randn([1, 3, size, size], 1.0, &mut rng));
        let c = backbone_forward(&mut g, image, &vars).unwrap();
        std::array::from_fn(|i| g.value(c[i]).clone())
    }

    #[test]
    fn every_level_has_pyramid_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = FpnParams::init(D, &mut rng);
        let c_vals = backbone_values(6, 64);
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let c = std::array::from_fn(|i| g.leaf(c_vals[i].clone()));
        let p = fpn_forward(&mut g, &c, &vars).unwrap();
        let shapes: Vec<[usize; 4]> = p.iter().map(|&v| g.value(v).shape()).collect();
        assert_eq!(shapes[0], [1, D, 16, 16]);
        assert_eq!(shapes[1], [1, D, 8, 8]);
        assert_eq!(shapes[2], [1, D, 4, 4]);
        assert_eq!(shapes[3], [1, D, 2, 2]);
        assert_eq!(shapes[4], [1, D, 1, 1]);
    }

    #[test]
    fn zero_input_and_bias_give_zero_pyramid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = FpnParams::init(D, &mut rng); // biases are zero-initialized
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let c = std::array::from_fn(|i| {
            g.leaf(Tensor::zeros([1, BACKBONE_CHANNELS[i], 16 >> i, 16 >> i]))
        });
        let p = fpn_forward(&mut g, &c, &vars).unwrap();
        for &lv in &p {
            assert!(g.value(lv).data().iter().all(|&v| v == 0.0));
        }
    }

    /// Straight-line oracle: the same top-down arithmetic written directly
    /// against the value-level kernels, without the graph.
    #[test]
    fn matches_naive_top_down_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = FpnParams::init(D, &mut rng);
        let c = backbone_values(9, 64);

        let lateral = |i: usize| {
            ops::conv2d(&c[i], &params.lateral_w[i], params.lateral_b[i].data(), &ConvSpec::pointwise(1)).unwrap()
        };
        let mut want = Vec::new();
        let mut carry: Option<Tensor> = None;
        for i in (0..4).rev() {
            let lat = lateral(i);
            let merged = match &carry {
                Some(coarser) => {
                    let up = ops::upsample_nearest(coarser, 2).unwrap();
                    let mut m = lat.clone();
                    for (dst, src) in m.data_mut().iter_mut().zip(up.data()) {
                        *dst += src;
                    }
                    m
                }
                None => lat,
            };
            carry = Some(merged.clone());
            want.push(merged);
        }
        want.reverse();
        let smoothed: Vec<Tensor> = (0..4)
            .map(|i| ops::conv2d(&want[i], &params.smooth_w[i], params.smooth_b[i].data(), &ConvSpec::same(3, 1)).unwrap())
            .collect();
        let p6_want = ops::max_pool2d(&smoothed[3], 2, 2).unwrap();

        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let cv = std::array::from_fn(|i| g.leaf(c[i].clone()));
        let p = fpn_forward(&mut g, &cv, &vars).unwrap();
        for i in 0..4 {
            for (a, b) in g.value(p[i]).data().iter().zip(smoothed[i].data()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
        for (a, b) in g.value(p[4]).data().iter().zip(p6_want.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradients_flow_through_the_top_down_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = FpnParams::init(D, &mut rng);
        let c = backbone_values(11, 32);
        let inputs = vec![params.lateral_w[3].clone(), params.smooth_w[0].clone()];
        let report = grad_check_sampled(
            move |g, vars| {
                let bound = params.bind(g);
                let mut lateral_w = bound.lateral_w;
                lateral_w[3] = vars[0];
                let mut smooth_w = bound.smooth_w;
                smooth_w[0] = vars[1];
                let v = FpnVars { lateral_w, smooth_w, ..bound };
                let cv = std::array::from_fn(|i| g.leaf(c[i].clone()));
                let p = fpn_forward(g, &cv, &v)?;
                let mut acc = g.sum(p[0]);
                for &lv in &p[1..] {
                    let s = g.sum(lv);
                    acc = g.add(acc, s)?;
                }
                Ok(acc)
            },
            &inputs,
            1e-5,
            8,
            0xf9,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "worst {:?}", report.worst);
    }
}
