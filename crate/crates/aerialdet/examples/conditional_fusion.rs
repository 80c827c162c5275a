//! Conditionally parameterized multi-scale fusion: every image in a batch
//! contributes an "expert" 1x1 kernel, a routing gate blends the experts,
//! and the blended kernel fuses the four pyramid levels into an extra
//! high-resolution level.
//!
//! The demo shows the part that is easy to get wrong: the fused kernel is
//! shared across the batch, so WHO ELSE is in the batch changes each image's
//! output, while each image's routing gate depends on that image alone.
//!
//! Run with: cargo run --example conditional_fusion

use aerialdet::drm::{fusion_operation, generate_dynamic_params, fuse_pyramid, DrmConfig, DrmParams};
use aerialdet::numerics::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BACKBONE_CH: [usize; 4] = [8, 12, 16, 20];

/// Stack per-image backbone/pyramid tensors into batched graph leaves.
fn bind(g: &mut Graph, per_image: &[[Tensor; 4]]) -> aerialdet::Result<[Var; 4]> {
    let mut out = Vec::with_capacity(4);
    for level in 0..4 {
        let items: Vec<Tensor> = per_image.iter().map(|t| t[level].clone()).collect();
        out.push(g.leaf(Tensor::stack_batch(&items)?));
    }
    Ok([out[0], out[1], out[2], out[3]])
}

fn random_image(rng: &mut ChaCha8Rng, channels: usize) -> ([Tensor; 4], [Tensor; 4]) {
    let backbone = [
        Tensor::randn([1, BACKBONE_CH[0], 16, 16], 1.0, rng),
        Tensor::randn([1, BACKBONE_CH[1], 8, 8], 1.0, rng),
        Tensor::randn([1, BACKBONE_CH[2], 4, 4], 1.0, rng),
        Tensor::randn([1, BACKBONE_CH[3], 2, 2], 1.0, rng),
    ];
    let pyramid = [
        Tensor::randn([1, channels, 16, 16], 1.0, rng),
        Tensor::randn([1, channels, 8, 8], 1.0, rng),
        Tensor::randn([1, channels, 4, 4], 1.0, rng),
        Tensor::randn([1, channels, 2, 2], 1.0, rng),
    ];
    (backbone, pyramid)
}

/// Run the fusion path on a batch; returns (per-image routing gate, fused level).
fn run(
    params: &DrmParams,
    cfg: &DrmConfig,
    backbone: &[[Tensor; 4]],
    pyramid: &[[Tensor; 4]],
) -> aerialdet::Result<(Vec<f64>, Tensor)> {
    let mut g = Graph::new();
    let b = bind(&mut g, backbone)?;
    let p = bind(&mut g, pyramid)?;
    let vars = params.bind(&mut g);
    let fo = fusion_operation(&mut g, &b, &vars)?;
    let kernels = generate_dynamic_params(&mut g, fo, &vars, cfg)?;
    let fused = fuse_pyramid(&mut g, &p, &kernels, cfg)?;
    Ok((g.value(kernels.routing).data().to_vec(), g.value(fused).clone()))
}

fn main() -> aerialdet::Result<()> {
    let cfg = DrmConfig { channels: 8, fo_channels: 8, groups: 4 };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = DrmParams::init(&cfg, &BACKBONE_CH, &mut rng)?;

    let (bb_a, py_a) = random_image(&mut rng, cfg.channels);
    let (bb_b, py_b) = random_image(&mut rng, cfg.channels);

    // Image A alone.
    let (gates_solo, fused_solo) = run(&params, &cfg, &[bb_a.clone()], &[py_a.clone()])?;
    println!("solo batch         gate(A) = {:.6}", gates_solo[0]);
    println!("fused level shape: {:?}  (matches the finest pyramid level)", fused_solo.shape());

    // Image A next to a distinct image B: the blended kernel now contains
    // B's expert, so A's slice of the fused level moves.
    let (gates_ab, fused_ab) = run(&params, &cfg, &[bb_a.clone(), bb_b], &[py_a.clone(), py_b])?;
    let moved = fused_solo
        .data()
        .iter()
        .zip(fused_ab.batch_item(0).data())
        .map(|(s, d)| (s - d).abs())
        .fold(0.0_f64, f64::max);
    println!("batch with B       gate(A) = {:.6}  gate(B) = {:.6}", gates_ab[0], gates_ab[1]);
    println!("A's fused features moved by up to {moved:.3e} because B joined the batch");
    assert!(moved > 1e-9, "distinct companion must change the shared kernel");

    // Image A next to a copy of itself: both experts are A's own, so the
    // blend is a plain rescale and each slice equals... exactly the solo run?
    // No - the gates sum differently - but the two slices must equal each
    // other, and the gate stays the per-image value from the solo run.
    let (gates_aa, fused_aa) = run(&params, &cfg, &[bb_a.clone(), bb_a], &[py_a.clone(), py_a])?;
    assert_eq!(gates_aa[0], gates_solo[0], "gate depends only on the image itself");
    assert_eq!(gates_aa[0], gates_aa[1]);
    assert_eq!(fused_aa.batch_item(0).data(), fused_aa.batch_item(1).data());
    println!("duplicated batch   gate(A) = {:.6} twice; both output slices identical", gates_aa[0]);

    println!("routing gates are per-image; the fused kernel is per-batch");
    Ok(())
}
