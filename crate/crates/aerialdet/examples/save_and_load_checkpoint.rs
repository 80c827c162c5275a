//! Detector parameters persist as a single JSON checkpoint: the
//! configuration plus every named tensor. Loading validates shapes and
//! finiteness and restores each value bit-exactly.
//!
//! Run with: cargo run --example save_and_load_checkpoint

use aerialdet::detector::{load_checkpoint, save_checkpoint, DetectorConfig, DetectorParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> aerialdet::Result<()> {
    let cfg = DetectorConfig { channels: 8, classes: 4, k_max: 4, ..DetectorConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut params = DetectorParams::init(&cfg, &mut rng)?;

    let dir = std::env::temp_dir().join("aerialdet-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("detector.json");
    save_checkpoint(&path, &params)?;
    let bytes = std::fs::metadata(&path)?.len();
    println!("saved {} tensors to {} ({bytes} bytes)", params.named_mut().len(), path.display());

    let restored = load_checkpoint(&path)?;
    assert_eq!(restored.config, params.config);
    let mut restored = restored;
    for ((name_a, a), (_, b)) in params.named_mut().iter().zip(restored.named_mut().iter()) {
        assert_eq!(a.data(), b.data(), "{name_a} restored bit-exactly");
    }
    println!("round trip restored every parameter bit-exactly");

    // Corrupt checkpoints are rejected rather than silently misloaded.
    std::fs::write(dir.join("broken.json"), "{ definitely not a checkpoint")?;
    let err = load_checkpoint(&dir.join("broken.json")).unwrap_err();
    println!("corrupt file rejected with: {err}");
    Ok(())
}
