//! Overfit a small detector to a handful of synthetic scenes with momentum
//! SGD. Losses are per-location focal loss (classification), IoU loss
//! (box regression), and binary cross entropy (center-ness); the focal term
//! dominates at start and collapses quickly once the heads find the targets.
//!
//! Run with: cargo run --example micro_overfit

use aerialdet::detector::{
    evaluate_loss, micro_train, synthetic_dataset, DetectorConfig, DetectorParams, Sgd,
};
use aerialdet::numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() -> aerialdet::Result<()> {
    let cfg = DetectorConfig { channels: 8, classes: 5, k_max: 4, ..DetectorConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = DetectorParams::init(&cfg, &mut rng)?;
    let mut opt = Sgd::new(cfg.optimizer)?;

    // Scenes are colored rectangles on noise; labels are the rectangles.
    // Sides must be a multiple of 32 so the coarsest pyramid level is whole.
    let scenes = synthetic_dataset(4, 64, cfg.classes, 7)?;
    println!(
        "4 synthetic scenes, the first has {} object(s); optimizer lr {} momentum {}",
        scenes[0].objects.len(),
        cfg.optimizer.lr,
        cfg.optimizer.momentum
    );

    let batch = Tensor::stack_batch(&[scenes[0].image.clone(), scenes[1].image.clone()])?;
    let objs = vec![scenes[0].objects.clone(), scenes[1].objects.clone()];
    let initial = evaluate_loss(&params, &batch, &objs)?;
    println!(
        "initial  loss {:7.4} (cls {:.4}, box {:.4}, ctr {:.4})",
        initial.loss, initial.cls, initial.reg, initial.ctr
    );

    let steps = 30;
    let t0 = Instant::now();
    let trace = micro_train(&mut params, &mut opt, &scenes, steps)?;
    for (i, r) in trace.iter().enumerate() {
        if (i + 1) % 5 == 0 {
            println!(
                "step {:>3}  loss {:7.4} (cls {:.4}, box {:.4}, ctr {:.4})",
                i + 1,
                r.loss,
                r.cls,
                r.reg,
                r.ctr
            );
        }
    }
    let last = trace.last().expect("ran at least one step");
    println!(
        "{steps} steps in {:.1} s; loss fell to {:.1}% of the initial value",
        t0.elapsed().as_secs_f64(),
        100.0 * last.loss / initial.loss
    );
    assert!(last.loss < initial.loss, "training must reduce the loss");
    Ok(())
}
