//! One full detector pass: backbone, feature pyramid, the conditionally
//! fused extra level, key-point attention on every level, shared
//! anchor-free heads, and decoding into scored boxes.
//!
//! Run with: cargo run --example detector_forward

use aerialdet::detector::{decode_detections, detector_forward, DetectorConfig, DetectorParams};
use aerialdet::numerics::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> aerialdet::Result<()> {
    let cfg = DetectorConfig {
        channels: 16,
        classes: 5,
        k_max: 8,
        score_thresh: 0.3,
        ..DetectorConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = DetectorParams::init(&cfg, &mut rng)?;

    let size = 64;
    let image = Tensor::randn([1, 3, size, size], 1.0, &mut rng);
    let mut g = Graph::new();
    let image_var = g.leaf(image);
    let vars = params.bind(&mut g);
    let fwd = detector_forward(&mut g, image_var, &vars, &cfg)?;

    println!("backbone stages:");
    for (i, c) in fwd.backbone.iter().enumerate() {
        println!("  C{}  {:?}", i + 2, g.value(*c).shape());
    }
    println!("pyramid levels consumed by the heads:");
    for lv in &fwd.levels {
        let f = g.value(lv.feature).shape();
        let cls = g.value(lv.head.cls).shape();
        println!(
            "  {:<4} stride {:>2}  feature {:?}  cls {:?}",
            lv.name, lv.stride, f, cls
        );
    }
    if let Some(p2p) = fwd.p2_prime {
        println!(
            "the fused extra level shares the finest level's shape: {:?}",
            g.value(p2p).shape()
        );
    }
    if let Some(routing) = fwd.routing {
        println!("routing gate(s): {:?}", g.value(routing).data());
    }
    println!(
        "attention keys per level: {:?}",
        fwd.keys.iter().map(|per_image| per_image[0].len()).collect::<Vec<_>>()
    );

    // Head maps -> scored, clipped, per-class suppressed boxes. Random
    // weights rarely clear a 0.3 score, so this usually prints a handful.
    let levels = fwd.level_maps(&g);
    let decoded = decode_detections(&levels, (size, size), &cfg)?;
    println!("decoded {} boxes above score {}:", decoded[0].len(), cfg.score_thresh);
    for b in decoded[0].iter().take(8) {
        println!(
            "  class {}  score {:.3}  box ({:.1}, {:.1})..({:.1}, {:.1})",
            b.class, b.score, b.bbox.xmin, b.bbox.ymin, b.bbox.xmax, b.bbox.ymax
        );
    }
    Ok(())
}
