//! Convex-hull oracles for the reachable set of a weighted-sum gate.
//!
//! A stretch-only gate emits simplex weights, so its output (minus the frozen
//! base) lives in `H = { sum_i g_i v_i | g_i >= 0, sum g_i = 1 }`. The
//! certified distance from a target to `H` therefore lower-bounds any
//! stretch-only fit, and rotating the `v_i` can move `H` to cover targets
//! outside it. This module computes the projection (Frank-Wolfe with away
//! steps and exact line search on the quadratic), a membership test, and a
//! sampling probe that witnesses cone escape under random rotation parameters.

use crate::error::{Error, Result};
use crate::gates::{angles_from_relation, apply_rotation, RotationParams};
use crate::layer::RadarLayer;
use crate::numkernel::{axpy, dot, hadamard, norm2, vec_sub, Mat, Rng};

/// Projection of a target onto the simplex hull of a vector set.
#[derive(Clone, Debug)]
pub struct ConeProjection {
    /// Optimal simplex weights.
    pub g_star: Vec<f64>,
    /// `sum_i g*_i v_i`.
    pub point: Vec<f64>,
    /// `||target - point||_2`.
    pub distance: f64,
    pub iterations: usize,
    /// True when the duality gap certified `tol`, false on iteration cap.
    pub converged: bool,
}

/// Minimize `||target - sum_i g_i v_i||^2` over the simplex.
///
/// Frank-Wolfe with away steps: both directions use exact line search (the
/// objective is quadratic), and the standard FW duality gap is the stopping
/// certificate. Away steps restore linear convergence when the optimum sits
/// on a face, which plain FW zig-zags toward.
pub fn cone_project(
    target: &[f64],
    v: &[Vec<f64>],
    tol: f64,
    max_iter: usize,
) -> Result<ConeProjection> {
    if v.is_empty() {
        return Err(Error::InvalidArg("cone_project needs >= 1 vector".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArg(format!(
            "tol must be positive, got {tol}"
        )));
    }
    let d = target.len();
    if v.iter().any(|vi| vi.len() != d) {
        return Err(Error::ShapeMismatch {
            op: "cone_project",
            expected: format!("vectors of length {d}"),
            got: "mixed lengths".into(),
        });
    }
    let n = v.len();
    let mut g = vec![1.0 / n as f64; n];

    let point_of = |g: &[f64]| -> Vec<f64> {
        let mut p = vec![0.0; d];
        for (gi, vi) in g.iter().zip(v) {
            if *gi != 0.0 {
                axpy(&mut p, *gi, vi);
            }
        }
        p
    };

    let mut point = point_of(&g);
    let mut iterations = 0;
    let mut converged = false;

    for it in 0..max_iter {
        iterations = it;
        let residual = vec_sub(target, &point);
        // grad_i = -2 v_i . residual; scores drop the constant factor
        let scores: Vec<f64> = v.iter().map(|vi| dot(vi, &residual)).collect();
        let g_score = dot(&g, &scores);

        // Frank-Wolfe vertex: most aligned with the residual.
        let i_fw = argmax(&scores);
        let gap_fw = 2.0 * (scores[i_fw] - g_score);
        if gap_fw < tol {
            converged = true;
            break;
        }
        // Away vertex: worst active one.
        let i_aw = g
            .iter()
            .enumerate()
            .filter(|(_, &gi)| gi > 0.0)
            .min_by(|a, b| scores[a.0].partial_cmp(&scores[b.0]).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(i_fw);
        let gap_aw = 2.0 * (g_score - scores[i_aw]);

        // direction d = towards vertex (FW) or away from vertex, with the
        // step cap that keeps g feasible
        let (dir_idx, towards, gamma_max) = if gap_fw >= gap_aw {
            (i_fw, true, 1.0)
        } else {
            let gi = g[i_aw];
            if gi >= 1.0 {
                // singleton support and it is the worst vertex: FW step
                (i_fw, true, 1.0)
            } else {
                (i_aw, false, gi / (1.0 - gi))
            }
        };

        // p_dir = sum_i dir_i v_i with dir = sign (e_idx - g)
        let mut p_dir = v[dir_idx].clone();
        axpy(&mut p_dir, -1.0, &point);
        if !towards {
            for x in p_dir.iter_mut() {
                *x = -*x;
            }
        }
        let denom = dot(&p_dir, &p_dir);
        if denom <= 0.0 {
            converged = true;
            break;
        }
        let gamma = (dot(&residual, &p_dir) / denom).clamp(0.0, gamma_max);
        if gamma == 0.0 {
            converged = true;
            break;
        }

        if towards {
            // g <- (1 - gamma) g + gamma e_idx
            for gi in g.iter_mut() {
                *gi *= 1.0 - gamma;
            }
            g[dir_idx] += gamma;
        } else {
            // g <- (1 + gamma) g - gamma e_idx
            for gi in g.iter_mut() {
                *gi *= 1.0 + gamma;
            }
            g[dir_idx] -= gamma;
        }
        g_clip(&mut g);
        point = point_of(&g);
    }

    let residual = vec_sub(target, &point);
    Ok(ConeProjection {
        g_star: g,
        point,
        distance: norm2(&residual),
        iterations,
        converged,
    })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn g_clip(g: &mut [f64]) {
    // clean tiny negatives from floating-point drift and renormalize
    let mut sum = 0.0;
    for gi in g.iter_mut() {
        if *gi < 0.0 {
            *gi = 0.0;
        }
        sum += *gi;
    }
    if sum > 0.0 {
        for gi in g.iter_mut() {
            *gi /= sum;
        }
    }
}

/// Membership at tolerance: projection distance below `tol`.
pub fn in_cone(target: &[f64], v: &[Vec<f64>], tol: f64) -> Result<bool> {
    Ok(cone_project(target, v, (tol * tol).min(1e-9), 100_000)?.distance < tol)
}

/// Outcome of the rotation cone-escape probe.
#[derive(Clone, Debug)]
pub struct EscapeProbe {
    pub target: Vec<f64>,
    /// Distance from the target to the un-rotated hull.
    pub base_distance: f64,
    /// Best distance to a rotated hull over the sampled parameters.
    pub best_rotated_distance: f64,
    /// The sampled rotation parameter achieving the best distance.
    pub witness_theta_r: Mat,
}

impl EscapeProbe {
    pub fn succeeded(&self, tol: f64) -> bool {
        self.best_rotated_distance < self.base_distance - tol
    }
}

/// Sample random rotation parameters and measure how close the rotated hull
/// gets to a target that sits outside the un-rotated hull.
///
/// Entries of each sampled `theta_r` are uniform in `[-pi, pi]` scaled by the
/// inverse of the mean relation-vector norm at this input, which puts the
/// induced angles on the order of a full turn.
pub fn escape_probe(
    layer: &RadarLayer,
    x: &[f64],
    target: &[f64],
    samples: usize,
    rng: &mut Rng,
) -> Result<EscapeProbe> {
    let tol = 1e-9;
    let v = layer.bank.expert_outputs(x)?;
    let xw = layer.base.apply(x)?;
    let delta = vec_sub(target, &xw);
    let base = cone_project(&delta, &v, tol, 100_000)?;
    if base.distance <= 1e-6 {
        return Err(Error::InvalidArg(format!(
            "target is already inside the hull (distance {:.3e}); nothing to escape",
            base.distance
        )));
    }

    let d_out = layer.d_out();
    let mut v_total = vec![0.0; d_out];
    for vi in &v {
        axpy(&mut v_total, 1.0, vi);
    }
    let relations: Vec<Vec<f64>> = (0..layer.n())
        .map(|i| hadamard(&v[i], &vec_sub(&v_total, &v[i])))
        .collect::<Result<_>>()?;
    let mean_u_norm = relations.iter().map(|u| norm2(u)).sum::<f64>() / layer.n() as f64;
    let scale = std::f64::consts::PI / mean_u_norm.max(1e-12);

    let mut best_distance = base.distance;
    let mut witness = Mat::zeros(d_out, d_out / 2);
    for _ in 0..samples {
        let data: Vec<f64> = (0..d_out * d_out / 2)
            .map(|_| rng.range(-scale, scale))
            .collect();
        let theta = Mat::from_vec(d_out, d_out / 2, data)?;
        let params = RotationParams::Full(theta.clone());
        let rotated: Vec<Vec<f64>> = (0..layer.n())
            .map(|i| {
                let a = angles_from_relation(&params, &relations[i])?;
                apply_rotation(&v[i], &a)
            })
            .collect::<Result<_>>()?;
        let proj = cone_project(&delta, &rotated, tol, 100_000)?;
        if proj.distance < best_distance {
            best_distance = proj.distance;
            witness = theta;
        }
    }

    Ok(EscapeProbe {
        target: target.to_vec(),
        base_distance: base.distance,
        best_rotated_distance: best_distance,
        witness_theta_r: witness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::{StretchMode, StretchParams};
    use crate::layer::GateMode;
    use crate::lora::{FrozenBase, LoraBank, LoraModule};
    use crate::numkernel::Rng;

    #[test]
    fn singleton_hull() {
        let v = vec![vec![1.0, 2.0]];
        let p = cone_project(&[4.0, 6.0], &v, 1e-9, 1000).unwrap();
        assert!((p.g_star[0] - 1.0).abs() < 1e-12);
        assert!((p.distance - 5.0).abs() < 1e-9);
    }

    #[test]
    fn vertex_membership() {
        let v = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0, 0.0, 3.0],
        ];
        let p = cone_project(&[0.0, 2.0, 0.0], &v, 1e-12, 100_000).unwrap();
        assert!(p.distance < 1e-6, "distance {}", p.distance);
        assert!((p.g_star[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn midpoint_projection_matches_grid_oracle() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let target = [1.0, 1.0];
        let p = cone_project(&target, &v, 1e-12, 100_000).unwrap();

        // brute-force sweep of the 1-simplex at step 1e-4
        let mut best = f64::INFINITY;
        let mut w = 0.0;
        while w <= 1.0 {
            let pt = [w, 1.0 - w];
            let d = ((target[0] - pt[0]).powi(2) + (target[1] - pt[1]).powi(2)).sqrt();
            if d < best {
                best = d;
            }
            w += 1e-4;
        }
        assert!((p.distance - best).abs() < 1e-6);
        assert!((p.distance - 0.5f64.sqrt()).abs() < 1e-6);
        assert!((p.g_star[0] - 0.5).abs() < 1e-6);
        assert!((p.point[0] - 0.5).abs() < 1e-6 && (p.point[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn projection_beats_random_simplex_samples() {
        let mut rng = Rng::new(40);
        for case in 0..20 {
            let n = 1 + rng.below(6);
            let d = 2 + rng.below(6);
            let v: Vec<Vec<f64>> = (0..n).map(|_| rng.gaussian_vec(d)).collect();
            let target = rng.gaussian_vec(d);
            let p = cone_project(&target, &v, 1e-10, 100_000).unwrap();
            for _ in 0..2000 {
                let g = rng.simplex(n);
                let mut pt = vec![0.0; d];
                for (gi, vi) in g.iter().zip(&v) {
                    axpy(&mut pt, *gi, vi);
                }
                let dist = norm2(&vec_sub(&target, &pt));
                assert!(
                    p.distance <= dist + 1e-9,
                    "case {case}: {} > {dist}",
                    p.distance
                );
            }
        }
    }

    #[test]
    fn objective_monotone_under_iteration_caps() {
        // running longer never worsens the certified distance
        let mut rng = Rng::new(41);
        let v: Vec<Vec<f64>> = (0..5).map(|_| rng.gaussian_vec(4)).collect();
        let target = rng.gaussian_vec(4);
        let mut prev = f64::INFINITY;
        for cap in [1usize, 2, 5, 10, 50, 200, 1000] {
            let p = cone_project(&target, &v, 1e-14, cap).unwrap();
            assert!(p.distance <= prev + 1e-12);
            prev = p.distance;
        }
    }

    #[test]
    fn in_cone_cases() {
        let mut rng = Rng::new(42);
        let v: Vec<Vec<f64>> = (0..4).map(|_| rng.gaussian_vec(3)).collect();
        // centroid is inside
        let mut centroid = vec![0.0; 3];
        for vi in &v {
            axpy(&mut centroid, 0.25, vi);
        }
        assert!(in_cone(&centroid, &v, 1e-6).unwrap());

        // scaling a vertex leaves the simplex hull
        let ortho = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(!in_cone(&[2.0, 0.0], &ortho, 1e-6).unwrap());

        // mixture with a negative weight is outside
        let neg = [1.5 * 1.0 - 0.5 * 0.0, 1.5 * 0.0 - 0.5 * 1.0];
        assert!(!in_cone(&neg, &ortho, 1e-6).unwrap());
    }

    fn probe_layer() -> RadarLayer {
        // bank engineered so x = e_0 yields v_0 = (1, 0), v_1 = (0.9, 0.1)
        let a = Mat::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let b0 = Mat::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let b1 = Mat::from_vec(1, 2, vec![0.9, 0.1]).unwrap();
        let bank = LoraBank::new(vec![
            LoraModule::new(a.clone(), b0).unwrap(),
            LoraModule::new(a, b1).unwrap(),
        ])
        .unwrap();
        RadarLayer::new(
            FrozenBase::new(Mat::zeros(2, 2)),
            bank,
            StretchParams::new(Mat::zeros(4, 2), StretchMode::ConcatProj, 1.0, 2).unwrap(),
            RotationParams::zeros_full(2),
            GateMode::Radar,
        )
        .unwrap()
    }

    #[test]
    fn escape_probe_near_collinear_family() {
        let layer = probe_layer();
        let x = [1.0, 0.0];
        let target = [0.0, 1.0];
        // dense sweep over the single shared angle confirms the rotated hull
        // can reach the target
        let v = layer.bank.expert_outputs(&x).unwrap();
        let mut best_grid = f64::INFINITY;
        let mut a = -std::f64::consts::PI;
        while a <= std::f64::consts::PI {
            let rot: Vec<Vec<f64>> = v
                .iter()
                .map(|vi| apply_rotation(vi, &[a]).unwrap())
                .collect();
            let p = cone_project(&target, &rot, 1e-10, 100_000).unwrap();
            if p.distance < best_grid {
                best_grid = p.distance;
            }
            a += 1e-3;
        }
        assert!(best_grid < 1e-2, "grid best {best_grid}");

        let mut successes = 0;
        let trials = 20;
        for seed in 0..trials {
            let mut rng = Rng::new(seed);
            let probe = escape_probe(&layer, &x, &target, 200, &mut rng).unwrap();
            assert!(probe.base_distance > 0.9);
            if probe.succeeded(1e-9) && probe.best_rotated_distance < 0.1 {
                successes += 1;
            }
        }
        assert!(successes * 100 >= trials * 95, "{successes}/{trials}");
    }

    #[test]
    fn zero_rotation_sample_cannot_escape() {
        let layer = probe_layer();
        let x = [1.0, 0.0];
        let target = [0.0, 1.0];
        let mut rng = Rng::new(1);
        // zero samples: best stays at base
        let probe = escape_probe(&layer, &x, &target, 0, &mut rng).unwrap();
        assert_eq!(probe.base_distance, probe.best_rotated_distance);
        assert!(!probe.succeeded(1e-9));
    }

    #[test]
    fn in_hull_target_rejected() {
        let layer = probe_layer();
        let x = [1.0, 0.0];
        let mut rng = Rng::new(2);
        // the midpoint of the two expert outputs is inside the hull
        let target = [0.95, 0.05];
        assert!(escape_probe(&layer, &x, &target, 10, &mut rng).is_err());
    }

    #[test]
    fn single_expert_rotated_distance_is_norm_difference() {
        // circle geometry in 2-D: best over a dense angle grid equals the
        // norm gap between target and the lone vector
        let v1 = vec![0.8, 0.6];
        let target = [0.3, -1.1];
        let mut best = f64::INFINITY;
        let mut a = -std::f64::consts::PI;
        while a <= std::f64::consts::PI {
            let rv = apply_rotation(&v1, &[a]).unwrap();
            let p = cone_project(&target, &[rv], 1e-12, 1000).unwrap();
            if p.distance < best {
                best = p.distance;
            }
            a += 1e-4;
        }
        let expect = (norm2(&target) - norm2(&v1)).abs();
        assert!((best - expect).abs() < 1e-3, "{best} vs {expect}");
    }
}
