//! Micro-training: SGD with momentum and weight decay, a synthetic-scene
//! generator, and a small train loop for overfit tests.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dota::Hbb;
use crate::error::{Error, Result};
use crate::numerics::graph::Graph;
use crate::numerics::tensor::Tensor;

use super::loss::{assign_targets, detection_loss, GtObject};
use super::{detector_forward, DetectorParams, OptimizerConfig};

/// SGD with momentum and decoupled-from-nothing classic weight decay:
/// v <- momentum * v + (g + wd * p); p <- p - lr * v.
#[derive(Clone, Debug)]
pub struct Sgd {
    cfg: OptimizerConfig,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(cfg: OptimizerConfig) -> Result<Sgd> {
        cfg.validate()?;
        Ok(Sgd { cfg, velocity: BTreeMap::new() })
    }

    /// Update one named parameter in place.
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if grad.shape() != param.shape() {
            return Err(Error::shape(
                "gradient elements",
                param.data().len(),
                grad.data().len(),
                format!("optimizer step for {name}"),
            ));
        }
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let m = self.cfg.momentum;
        let wd = self.cfg.weight_decay;
        let lr = self.cfg.lr;
        for ((pv, vv), gv) in param.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
            *vv = m * *vv + (gv + wd * *pv);
            *pv -= lr * *vv;
        }
        Ok(())
    }
}

/// One generated training scene: an image and its ground-truth objects.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    /// (1, 3, size, size) image.
    pub image: Tensor,
    pub objects: Vec<GtObject>,
}

/// Deterministic per-class fill color, spread over the RGB cube.
fn class_color(class: usize) -> [f64; 3] {
    let spread = |k: usize| 0.35 + 0.65 * (((class * k + 3) % 7) as f64 / 6.0);
    [spread(5), spread(11), spread(17)]
}

/// Draw a scene: mild background noise plus one or two filled rectangles
/// whose class decides the fill color.
pub fn synthetic_scene(size: usize, classes: usize, rng: &mut impl Rng) -> Result<SyntheticScene> {
    if size < 32 {
        return Err(Error::invalid(format!("scene size {size} below the 32-pixel minimum")));
    }
    if classes == 0 {
        return Err(Error::invalid("need at least one class"));
    }
    let mut image = Tensor::randn([1, 3, size, size], 0.05, rng);
    let count = rng.gen_range(1..=2);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let bw = rng.gen_range(12..=28.min(size - 4));
        let bh = rng.gen_range(12..=28.min(size - 4));
        let x0 = rng.gen_range(2..=size - bw - 2);
        let y0 = rng.gen_range(2..=size - bh - 2);
        let class = rng.gen_range(0..classes);
        let color = class_color(class);
        for c in 0..3 {
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    *image.at_mut(0, c, y, x) = color[c] + 0.02 * rng.gen_range(-1.0..1.0);
                }
            }
        }
        objects.push(GtObject {
            bbox: Hbb::new(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64),
            class,
        });
    }
    Ok(SyntheticScene { image, objects })
}

/// A fixed dataset of scenes from one seed.
pub fn synthetic_dataset(count: usize, size: usize, classes: usize, seed: u64) -> Result<Vec<SyntheticScene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| synthetic_scene(size, classes, &mut rng)).collect()
}

/// Loss values of one optimization step.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct StepReport {
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub ctr: f64,
}

/// Forward pass and loss on a batch without touching the parameters.
pub fn evaluate_loss(
    params: &DetectorParams,
    images: &Tensor,
    objects: &[Vec<GtObject>],
) -> Result<StepReport> {
    let cfg = params.config;
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let image = g.leaf(images.clone());
    let fwd = detector_forward(&mut g, image, &vars, &cfg)?;
    let level_shapes: Vec<(usize, usize, usize)> = fwd
        .levels
        .iter()
        .map(|lv| {
            let s = g.value(lv.head.cls).shape();
            (lv.stride, s[2], s[3])
        })
        .collect();
    let (targets, num_pos) = assign_targets(objects, &level_shapes, cfg.classes)?;
    let heads: Vec<_> = fwd.levels.iter().map(|lv| lv.head).collect();
    let loss = detection_loss(&mut g, &heads, &targets, num_pos)?;
    Ok(StepReport {
        loss: g.scalar_value(loss.total),
        cls: loss.cls,
        reg: loss.reg,
        ctr: loss.ctr,
    })
}

/// One forward/backward/update pass over a batch. A non-finite loss aborts
/// the step before any parameter is touched.
pub fn micro_train_step(
    params: &mut DetectorParams,
    opt: &mut Sgd,
    images: &Tensor,
    objects: &[Vec<GtObject>],
) -> Result<StepReport> {
    let cfg = params.config;
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let image = g.leaf(images.clone());
    let fwd = detector_forward(&mut g, image, &vars, &cfg)?;

    let level_shapes: Vec<(usize, usize, usize)> = fwd
        .levels
        .iter()
        .map(|lv| {
            let s = g.value(lv.head.cls).shape();
            (lv.stride, s[2], s[3])
        })
        .collect();
    let (targets, num_pos) = assign_targets(objects, &level_shapes, cfg.classes)?;
    let heads: Vec<_> = fwd.levels.iter().map(|lv| lv.head).collect();
    let loss = detection_loss(&mut g, &heads, &targets, num_pos)?;

    let loss_value = g.scalar_value(loss.total);
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss ({loss_value}); step aborted, parameters unchanged"
        )));
    }
    let grads = g.backward_scalar(loss.total)?;

    let named_vars = vars.named();
    let named_params = params.named_mut();
    debug_assert_eq!(named_vars.len(), named_params.len());
    for ((vname, var), (pname, tensor)) in named_vars.iter().zip(named_params) {
        debug_assert_eq!(*vname, pname);
        let grad = grads.wrt_or_zeros(*var, tensor.shape());
        opt.step(&pname, tensor, &grad)?;
    }
    Ok(StepReport { loss: loss_value, cls: loss.cls, reg: loss.reg, ctr: loss.ctr })
}

/// Train for `steps` steps with batch size 2, cycling through `scenes`
/// round-robin. Returns one report per step (deterministic given the same
/// parameters and scenes).
pub fn micro_train(
    params: &mut DetectorParams,
    opt: &mut Sgd,
    scenes: &[SyntheticScene],
    steps: usize,
) -> Result<Vec<StepReport>> {
    if scenes.is_empty() {
        return Err(Error::invalid("micro-training needs at least one scene"));
    }
    let mut reports = Vec::with_capacity(steps);
    for step in 0..steps {
        let a = &scenes[(2 * step) % scenes.len()];
        let b = &scenes[(2 * step + 1) % scenes.len()];
        let images = Tensor::stack_batch(&[a.image.clone(), b.image.clone()])?;
        let objects = vec![a.objects.clone(), b.objects.clone()];
        reports.push(micro_train_step(params, opt, &images, &objects)?);
    }
    Ok(reports)
}
