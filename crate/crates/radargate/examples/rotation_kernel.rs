//! The pairwise rotation kernel: element-wise application versus the dense
//! block-diagonal matrix, plus the isometry/composition/inverse identities.
//!
//! Run with: cargo run --example rotation_kernel

use radargate::gates::{apply_rotation, dense_rotation_matrix};
use radargate::numkernel::{norm2, vec_mat, vec_sub, Rng};

fn main() -> radargate::Result<()> {
    let mut rng = Rng::new(11);
    let d = 8;

    let v = rng.gaussian_vec(d);
    let alpha = rng.gaussian_vec(d / 2);
    let fast = apply_rotation(&v, &alpha)?;
    let dense = vec_mat(&v, &dense_rotation_matrix(&alpha))?;
    println!(
        "element-wise vs dense block-diagonal: max |diff| = {:.2e}",
        max_abs(&vec_sub(&fast, &dense))
    );
    println!(
        "isometry: |v| = {:.6}, |rotated| = {:.6}",
        norm2(&v),
        norm2(&fast)
    );

    let beta = rng.gaussian_vec(d / 2);
    let sum: Vec<f64> = alpha.iter().zip(&beta).map(|(a, b)| a + b).collect();
    let two_step = apply_rotation(&apply_rotation(&v, &alpha)?, &beta)?;
    let one_step = apply_rotation(&v, &sum)?;
    println!(
        "composition (angles add): max |diff| = {:.2e}",
        max_abs(&vec_sub(&two_step, &one_step))
    );

    let neg: Vec<f64> = alpha.iter().map(|a| -a).collect();
    let back = apply_rotation(&fast, &neg)?;
    println!(
        "inverse (rotate back):   max |diff| = {:.2e}",
        max_abs(&vec_sub(&back, &v))
    );

    // a quarter turn moves the first basis vector onto the second
    let turned = apply_rotation(&[1.0, 0.0], &[std::f64::consts::FRAC_PI_2])?;
    println!(
        "quarter turn of (1,0) = ({:.3}, {:.3})",
        turned[0], turned[1]
    );
    Ok(())
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}
