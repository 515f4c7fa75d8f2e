//! Walk one forward pass of the composed layer and print every intermediate:
//! expert outputs, rotation angles, rotated outputs, gate weights, and the
//! final combination.
//!
//! Run with: cargo run --example gate_anatomy

use radargate::gates::{RotationParams, StretchMode, StretchParams};
use radargate::layer::{GateMode, RadarLayer};
use radargate::lora::{FrozenBase, LoraBank};
use radargate::numkernel::{norm2, Mat, Rng};

fn main() -> radargate::Result<()> {
    let (n, d_in, d_out, r) = (3, 4, 4, 2);
    let mut rng = Rng::new(7);
    let bank = LoraBank::random(&mut rng, n, d_in, d_out, r, 1.0, 1.0)?;
    let base = FrozenBase::new(Mat::from_vec(
        d_in,
        d_out,
        (0..d_in * d_out).map(|_| rng.gaussian() * 0.3).collect(),
    )?);
    let theta_s = Mat::from_vec(
        n * d_out,
        n,
        (0..n * d_out * n).map(|_| rng.gaussian() * 0.3).collect(),
    )?;
    let theta_r = Mat::from_vec(
        d_out,
        d_out / 2,
        (0..d_out * d_out / 2)
            .map(|_| rng.gaussian() * 0.5)
            .collect(),
    )?;
    let layer = RadarLayer::new(
        base,
        bank,
        StretchParams::new(theta_s, StretchMode::ConcatProj, 1.0, 2)?,
        RotationParams::Full(theta_r),
        GateMode::Radar,
    )?;

    let x = rng.gaussian_vec(d_in);
    let trace = layer.forward(&x)?;
    let decision = trace.decision.as_ref().expect("gated mode");

    println!("input x             = {:?}", rounded(&x));
    for i in 0..n {
        println!(
            "expert {i}: v = {:?}  |v| = {:.4}",
            rounded(&trace.v[i]),
            norm2(&trace.v[i])
        );
    }
    println!("logits             = {:?}", rounded(&decision.logits));
    println!("softmax probs      = {:?}", rounded(&decision.probs));
    println!("selected experts   = {:?}", decision.selected);
    println!("gate weights g     = {:?}", rounded(&decision.g));
    for &i in &decision.selected {
        println!(
            "expert {i}: alpha = {:?}  rotated |v~| = {:.4} (norm preserved: {:.4})",
            rounded(&trace.alpha[i]),
            norm2(&trace.v_tilde[i]),
            norm2(&trace.v[i]),
        );
    }
    println!("output y           = {:?}", rounded(&trace.y));

    // the trace invariant: y is recomputable from its own fields
    let replay = trace.replay_y(&layer.base)?;
    let drift = trace
        .y
        .iter()
        .zip(&replay)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("replay drift       = {drift:.2e}");
    Ok(())
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}
