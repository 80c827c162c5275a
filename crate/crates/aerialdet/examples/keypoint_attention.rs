//! Key-point attention: a point head scores and localizes candidate key
//! points on a feature map, the top-k cells become attention keys, and every
//! grid cell (query) is enhanced with a similarity-weighted blend of the key
//! features. Similarity mixes appearance (projected dot product) with
//! geometry (a sinusoidal embedding of the key-to-query displacement).
//!
//! Run with: cargo run --example keypoint_attention

use aerialdet::bvr::{attention_weights, bvr_head_forward, geometric_similarity, BvrConfig, BvrParams};
use aerialdet::numerics::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> aerialdet::Result<()> {
    let cfg = BvrConfig { channels: 8, attn_dim: 4, embed_dim: 8, top_k: 5, max_period: 1000.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let params = BvrParams::init(&cfg, &mut rng)?;

    let feature = Tensor::randn([1, cfg.channels, 6, 6], 1.0, &mut rng);
    let mut g = Graph::new();
    let f = g.leaf(feature.clone());
    let vars = params.bind(&mut g);
    let out = bvr_head_forward(&mut g, f, &vars, &cfg)?;

    // What the point head selected.
    let keys = &out.keys[0];
    println!("top-{} key points (cell -> refined position, corner score):", keys.len());
    for i in 0..keys.len() {
        let (cx, cy) = keys.cells[i];
        let (px, py) = keys.positions[i];
        println!("  ({cx}, {cy}) -> ({px:+.3}, {py:+.3})   score {:+.4}", keys.scores[i]);
    }

    // The attention rows used by the enhancement: one distribution over the
    // keys per query cell, each summing to one.
    let cells = vec![keys.cells.clone()];
    let weights = attention_weights(
        &feature,
        g.value(out.point.corner_offsets),
        &params,
        &cells,
        &cfg,
    )?;
    let mut worst = 0.0_f64;
    for row in &weights[0] {
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    println!("attention rows: {} queries x {} keys, max |sum - 1| = {worst:.2e}", weights[0].len(), keys.len());
    let sample = &weights[0][0];
    println!(
        "query (0,0) attends with weights [{}]",
        sample.iter().map(|w| format!("{w:.3}")).collect::<Vec<_>>().join(", ")
    );

    // The enhanced map keeps the input shape; the blend is added on top of
    // the original features.
    let enhanced = g.value(out.enhanced);
    println!("enhanced map shape {:?} (same as input)", enhanced.shape());
    let delta = feature
        .data()
        .iter()
        .zip(enhanced.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    println!("largest per-element change from the enhancement: {delta:.4}");

    // The geometric term embeds the key-to-query displacement with sin/cos
    // pairs at geometrically spaced periods, so it depends only on the
    // RELATIVE offset: shifting query and key together changes nothing.
    let gw = params.geo_w.data();
    let gb = params.geo_b.data()[0];
    let near = geometric_similarity(gw, gb, (1.0, 2.0), (3.0, 5.0), cfg.max_period)?;
    let far = geometric_similarity(gw, gb, (101.0, 202.0), (103.0, 205.0), cfg.max_period)?;
    assert_eq!(near, far, "same displacement, same geometric score");
    println!("geometric similarity is translation invariant: S((1,2)->(3,5)) = S((101,202)->(103,205)) = {near:+.4}");
    Ok(())
}
