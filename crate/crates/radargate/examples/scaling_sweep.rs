//! Mini module-count scaling sweep on routing-mix tasks: the stretch-only
//! gate degrades as the expert count grows while the rotation-augmented gate
//! holds up, so the gap widens.
//!
//! Run with: cargo run --example scaling_sweep

use radargate::layer::GateMode;
use radargate::train::{train, TaskKind, TrainConfig};

fn main() -> radargate::Result<()> {
    println!(
        "{:>4} {:>14} {:>14} {:>10}",
        "n", "stretch_only", "radar", "gap"
    );
    for n in [5usize, 10, 20] {
        let mk = |mode| TrainConfig {
            n,
            k: 2,
            task: TaskKind::MultiTaskMix,
            clusters: (n / 2).max(1),
            task_size: 64,
            steps: 800,
            eval_every: 200,
            lr: 0.02,
            mode,
            ..TrainConfig::defaults(7)
        };
        let mut stretch = 0.0;
        let mut radar = 0.0;
        let reps = 3;
        for rep in 0..reps {
            stretch += train(&mk(GateMode::StretchOnly), rep)?.final_train_mse() / reps as f64;
            radar += train(&mk(GateMode::Radar), rep)?.final_train_mse() / reps as f64;
        }
        println!(
            "{n:>4} {stretch:>14.5} {radar:>14.5} {:>10.5}",
            stretch - radar
        );
    }
    Ok(())
}
