//! Cone geometry in action: certify that a target sits outside the hull of
//! the expert outputs (the hard limit of any weighted-sum gate), then sample
//! rotation parameters until the rotated hull reaches it.
//!
//! Run with: cargo run --example cone_escape

use radargate::geometry::{cone_project, escape_probe, in_cone};
use radargate::layer::GateMode;
use radargate::numkernel::Rng;
use radargate::train::{build_experiment, TaskKind, TrainConfig};

fn main() -> radargate::Result<()> {
    // the projection oracle on a hand-checkable instance
    let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let p = cone_project(&[1.0, 1.0], &v, 1e-12, 100_000)?;
    println!(
        "project (1,1) onto hull of (1,0),(0,1): point ({:.4}, {:.4}), distance {:.6}",
        p.point[0], p.point[1], p.distance
    );
    println!(
        "mean of the vertices is inside: {}",
        in_cone(&[0.5, 0.5], &v, 1e-6)?
    );

    // a generated out-of-cone task plus the sampling probe
    let cfg = TrainConfig {
        task: TaskKind::OutOfCone,
        task_size: 1,
        margin: 0.1,
        mode: GateMode::Radar,
        ..TrainConfig::defaults(3)
    };
    let (layer, task) = build_experiment(&cfg, 0)?;
    let x = task.x.row(0);
    let target = task.y.row(0);
    let mut rng = Rng::new(99);
    let probe = escape_probe(&layer, x, target, 200, &mut rng)?;
    println!(
        "\nout-of-cone target: base distance {:.5} (certified >= margin {})",
        probe.base_distance, cfg.margin
    );
    println!(
        "best rotated-hull distance over 200 sampled rotation parameters: {:.5}",
        probe.best_rotated_distance
    );
    println!("escape witnessed: {}", probe.succeeded(1e-9));
    Ok(())
}
