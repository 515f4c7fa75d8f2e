//! Save a layer to the binary checkpoint format and load it back: the
//! restored layer reproduces forward outputs bit for bit.
//!
//! Run with: cargo run --example checkpoint_roundtrip

use radargate::cli::{load_checkpoint, save_checkpoint};
use radargate::layer::GateMode;
use radargate::numkernel::Rng;
use radargate::train::{build_experiment, TrainConfig};

fn main() -> radargate::Result<()> {
    let cfg = TrainConfig {
        theta_r_factorized: true,
        mode: GateMode::Radar,
        ..TrainConfig::defaults(31)
    };
    let (layer, task) = build_experiment(&cfg, 0)?;
    let path = std::env::temp_dir().join("radargate_roundtrip.ckpt");

    save_checkpoint(&path, &layer, &Rng::new(cfg.seed), 0)?;
    let bytes = std::fs::metadata(&path)?.len();
    let (restored, _rng, _steps) = load_checkpoint(&path)?;

    let mut identical = true;
    for i in 0..task.len() {
        let a = layer.forward(task.x.row(i))?.y;
        let b = restored.forward(task.x.row(i))?.y;
        identical &= a == b;
    }
    println!("checkpoint: {bytes} bytes at {}", path.display());
    println!(
        "forward outputs on {} samples bitwise identical after reload: {identical}",
        task.len()
    );
    std::fs::remove_file(&path)?;
    Ok(())
}
