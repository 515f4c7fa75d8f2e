//! Analytic backpropagation for the two gate parameters, plus a central
//! finite-difference oracle that validates it.
//!
//! Loss is `L = ||target - y||^2` (no 1/2 factor), so `dL/dy = 2 (y - target)`.
//!
//! Stretch gradient: with logits `eps = feat theta_s` (feat is the normalized
//! concat `z` or the raw input `x` depending on the gate variant),
//! `dL/dtheta_s = feat^T (dL/deps)`. Two treatments of `dg/deps` exist:
//!
//! - `PaperApprox`: the diagonal sparse-gating approximation
//!   `dg_i/deps_j ~= delta_ij (1/tau) p_i (1 - p_i)` with `p` the pre-top-k
//!   softmax; nonzero only on the gate's support.
//! - `ExactMasked`: the selection held fixed as a mask and the kept-subset
//!   renormalization differentiated exactly. On the support this is the
//!   subset-softmax Jacobian
//!   `dg_i/deps_j = (1/tau) g_i (delta_ij - g_j)`; off the support the kept
//!   weights do not depend on the logit at all, so the column is zero.
//!
//! Rotation gradient, element for element: with `u_i = (x P_i) ⊙ (x Q_i)`
//! and `alpha_i = u_i theta_r`,
//!
//!   dL/dtheta_r^(j,m) = sum_i g_i [ dL/dy^(2m)  * dv~^(2m)/da_m
//!                                 + dL/dy^(2m+1) * dv~^(2m+1)/da_m ] u_i^(j)
//!   dv~^(2m)/da_m   = -v^(2m) sin a_m - v^(2m+1) cos a_m
//!   dv~^(2m+1)/da_m =  v^(2m) cos a_m - v^(2m+1) sin a_m
//!
//! The factorized parameterization `theta_r = U V` chains by the product
//! rule: `dU = dTheta V^T`, `dV = U^T dTheta`.

use crate::error::{Error, Result};
use crate::gates::{RotationParams, StretchMode};
use crate::layer::{ForwardTrace, GateMode, RadarLayer};
use crate::numkernel::{axpy, dot, hadamard, matmul, vec_scale, vec_sub, Mat};

/// How the stretch gradient treats the top-k nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StretchGradMode {
    PaperApprox,
    ExactMasked,
}

/// Gradients of one loss evaluation with respect to the gate parameters.
#[derive(Clone, Debug)]
pub struct GateGrads {
    pub d_theta_s: Option<Mat>,
    pub d_rotation: Option<RotationGrads>,
    pub stretch_grad_mode: StretchGradMode,
}

#[derive(Clone, Debug)]
pub enum RotationGrads {
    Full(Mat),
    Factorized { d_u: Mat, d_v: Mat },
}

impl RotationGrads {
    pub fn frob_norm(&self) -> f64 {
        match self {
            RotationGrads::Full(m) => frob(m),
            RotationGrads::Factorized { d_u, d_v } => {
                (frob(d_u).powi(2) + frob(d_v).powi(2)).sqrt()
            }
        }
    }
}

pub fn frob(m: &Mat) -> f64 {
    m.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Squared L2 distance between prediction and target.
pub fn loss_mse(y: &[f64], target: &[f64]) -> Result<f64> {
    if y.len() != target.len() {
        return Err(Error::ShapeMismatch {
            op: "loss_mse",
            expected: format!("length {}", y.len()),
            got: format!("{}", target.len()),
        });
    }
    Ok(y.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum())
}

fn d_loss_d_y(y: &[f64], target: &[f64]) -> Vec<f64> {
    y.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect()
}

/// Gradient of the loss with respect to `theta_s`.
pub fn backward_stretch(
    layer: &RadarLayer,
    trace: &ForwardTrace,
    target: &[f64],
    mode: StretchGradMode,
) -> Result<Mat> {
    if !matches!(layer.mode, GateMode::Radar | GateMode::StretchOnly) {
        return Err(Error::InvalidArg(format!(
            "backward_stretch needs a radar or stretch-only trace, layer mode is {}",
            layer.mode.as_str()
        )));
    }
    let decision = trace
        .decision
        .as_ref()
        .ok_or_else(|| Error::InvalidArg("trace has no gate decision".into()))?;
    let dldy = d_loss_d_y(&trace.y, target);
    let tau = layer.stretch.tau;
    let n = layer.n();

    // dL/dg_i over the support, using the rotated outputs.
    let mut dldg = vec![0.0; n];
    for &i in &decision.selected {
        dldg[i] = dot(&dldy, &trace.v_tilde[i]);
    }

    let mut dldeps = vec![0.0; n];
    match mode {
        StretchGradMode::PaperApprox => {
            for &j in &decision.selected {
                let p = decision.probs[j];
                dldeps[j] = dldg[j] * p * (1.0 - p) / tau;
            }
        }
        StretchGradMode::ExactMasked => {
            let weighted: f64 = decision
                .selected
                .iter()
                .map(|&i| decision.g[i] * dldg[i])
                .sum();
            for &j in &decision.selected {
                dldeps[j] = decision.g[j] * (dldg[j] - weighted) / tau;
            }
        }
    }

    // Outer product feat^T dL/deps.
    let feat: &[f64] = match layer.stretch.mode {
        StretchMode::ConcatProj => trace
            .z
            .as_ref()
            .ok_or_else(|| Error::InvalidArg("concat-projection trace is missing z".into()))?,
        StretchMode::InputProj => &trace.x,
    };
    let mut grad = Mat::zeros(feat.len(), n);
    for (p, &f) in feat.iter().enumerate() {
        if f == 0.0 {
            continue;
        }
        for (j, &d) in dldeps.iter().enumerate() {
            grad.set(p, j, f * d);
        }
    }
    Ok(grad)
}

/// Gradient of the loss with respect to the rotation parameter (both factors
/// when factorized).
pub fn backward_rotation(
    layer: &RadarLayer,
    trace: &ForwardTrace,
    target: &[f64],
) -> Result<RotationGrads> {
    if !matches!(layer.mode, GateMode::Radar | GateMode::RotationOnly) {
        return Err(Error::InvalidArg(format!(
            "backward_rotation needs a radar or rotation-only trace, layer mode is {}",
            layer.mode.as_str()
        )));
    }
    let decision = trace
        .decision
        .as_ref()
        .ok_or_else(|| Error::InvalidArg("trace has no gate decision".into()))?;
    let dldy = d_loss_d_y(&trace.y, target);
    let d_out = layer.d_out();
    let half = d_out / 2;

    // Total of the raw expert outputs, for the reference relations.
    let mut v_total = vec![0.0; d_out];
    for vi in &trace.v {
        axpy(&mut v_total, 1.0, vi);
    }

    let mut d_eff = Mat::zeros(d_out, half);
    for &i in &decision.selected {
        let g = decision.g[i];
        if g == 0.0 {
            continue;
        }
        let v = &trace.v[i];
        let a = &trace.alpha[i];
        // dL/dalpha_i per pair
        let mut beta = vec![0.0; half];
        for m in 0..half {
            let (c, s) = (a[m].cos(), a[m].sin());
            let d_even = -v[2 * m] * s - v[2 * m + 1] * c;
            let d_odd = v[2 * m] * c - v[2 * m + 1] * s;
            beta[m] = g * (dldy[2 * m] * d_even + dldy[2 * m + 1] * d_odd);
        }
        // u_i = (x P_i) ⊙ (x Q_i), rebuilt from the trace
        let xq = vec_sub(&v_total, v);
        let u = hadamard(v, &xq)?;
        for (j, &uj) in u.iter().enumerate() {
            if uj == 0.0 {
                continue;
            }
            for (m, &b) in beta.iter().enumerate() {
                d_eff.set(j, m, d_eff.get(j, m) + uj * b);
            }
        }
    }

    match &layer.rotation {
        RotationParams::Full(_) => Ok(RotationGrads::Full(d_eff)),
        RotationParams::Factorized { u, v } => Ok(RotationGrads::Factorized {
            d_u: matmul(&d_eff, &v.transpose())?,
            d_v: matmul(&u.transpose(), &d_eff)?,
        }),
    }
}

/// Both parameter gradients for one (trace, target) pair, respecting the
/// layer mode: stretch-only traces produce no rotation gradient and
/// rotation-only traces no stretch gradient.
pub fn backward(
    layer: &RadarLayer,
    trace: &ForwardTrace,
    target: &[f64],
    mode: StretchGradMode,
) -> Result<GateGrads> {
    let d_theta_s = match layer.mode {
        GateMode::Radar | GateMode::StretchOnly => {
            Some(backward_stretch(layer, trace, target, mode)?)
        }
        _ => None,
    };
    let d_rotation = match layer.mode {
        GateMode::Radar | GateMode::RotationOnly => Some(backward_rotation(layer, trace, target)?),
        _ => None,
    };
    Ok(GateGrads {
        d_theta_s,
        d_rotation,
        stretch_grad_mode: mode,
    })
}

// ── Finite-difference oracle ──────────────────────────────────────────────

fn loss_at(layer: &RadarLayer, x: &[f64], target: &[f64]) -> Result<f64> {
    loss_mse(&layer.forward(x)?.y, target)
}

/// The gate decision at `x` is h-stable when the softmax gap at the
/// selection boundary exceeds `10 h`; top-k is only piecewise smooth, so the
/// oracle rejects configurations whose selection could flip under the probe.
pub fn selection_stable(layer: &RadarLayer, x: &[f64], h: f64) -> Result<bool> {
    if layer.mode == GateMode::RotationOnly || layer.mode == GateMode::BaseOnly {
        return Ok(true);
    }
    let trace = layer.forward(x)?;
    let decision = trace.decision.expect("gated modes carry a decision");
    let k = layer.stretch.k;
    if k == layer.n() {
        return Ok(true);
    }
    let mut probs = decision.probs.clone();
    probs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(probs[k - 1] - probs[k] > 10.0 * h)
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1e-8)
}

/// Central finite differences over every parameter entry, compared against
/// the analytic `ExactMasked` gradients. Returns
/// `(max_rel_err_stretch, max_rel_err_rotation)`; either is zero when the
/// layer mode has no such parameter. Relative error is
/// `|a - f| / max(|f|, 1e-8)`.
pub fn finite_diff_check(
    layer: &RadarLayer,
    x: &[f64],
    target: &[f64],
    h: f64,
) -> Result<(f64, f64)> {
    if !(h > 0.0) {
        return Err(Error::InvalidArg(format!("h must be positive, got {h}")));
    }
    if !selection_stable(layer, x, h)? {
        return Err(Error::Unstable(
            "selection boundary gap below 10h; resample the configuration".into(),
        ));
    }
    let trace = layer.forward(x)?;
    let grads = backward(layer, &trace, target, StretchGradMode::ExactMasked)?;

    let mut err_s = 0.0f64;
    if let Some(ds) = &grads.d_theta_s {
        for idx in 0..ds.data().len() {
            let fd = central_diff(layer, x, target, h, |l, delta| {
                l.stretch.theta_s.data_mut()[idx] += delta;
            })?;
            err_s = err_s.max(rel_err(ds.data()[idx], fd));
        }
    }

    let mut err_r = 0.0f64;
    match &grads.d_rotation {
        Some(RotationGrads::Full(dr)) => {
            for idx in 0..dr.data().len() {
                let fd = central_diff(layer, x, target, h, |l, delta| {
                    if let RotationParams::Full(m) = &mut l.rotation {
                        m.data_mut()[idx] += delta;
                    }
                })?;
                err_r = err_r.max(rel_err(dr.data()[idx], fd));
            }
        }
        Some(RotationGrads::Factorized { d_u, d_v }) => {
            for idx in 0..d_u.data().len() {
                let fd = central_diff(layer, x, target, h, |l, delta| {
                    if let RotationParams::Factorized { u, .. } = &mut l.rotation {
                        u.data_mut()[idx] += delta;
                    }
                })?;
                err_r = err_r.max(rel_err(d_u.data()[idx], fd));
            }
            for idx in 0..d_v.data().len() {
                let fd = central_diff(layer, x, target, h, |l, delta| {
                    if let RotationParams::Factorized { v, .. } = &mut l.rotation {
                        v.data_mut()[idx] += delta;
                    }
                })?;
                err_r = err_r.max(rel_err(d_v.data()[idx], fd));
            }
        }
        None => {}
    }
    Ok((err_s, err_r))
}

fn central_diff(
    layer: &RadarLayer,
    x: &[f64],
    target: &[f64],
    h: f64,
    bump: impl Fn(&mut RadarLayer, f64),
) -> Result<f64> {
    let mut plus = layer.clone();
    bump(&mut plus, h);
    let mut minus = layer.clone();
    bump(&mut minus, -h);
    Ok((loss_at(&plus, x, target)? - loss_at(&minus, x, target)?) / (2.0 * h))
}

// ── Random-configuration sweep ────────────────────────────────────────────

/// One row of the gradient-check artifact. `err_*` are `None` when the
/// configuration stayed unstable through every resample and was skipped.
#[derive(Clone, Debug)]
pub struct GradcheckRow {
    pub config_id: usize,
    pub seed: u64,
    pub n: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub k: usize,
    pub mode: String,
    pub err_s: Option<f64>,
    pub err_r: Option<f64>,
}

/// Deterministic random configuration for the sweep; scales are chosen so the
/// finite-difference probe stays well inside its accuracy envelope.
pub fn random_check_layer(
    rng: &mut crate::numkernel::Rng,
    smode: StretchMode,
    factorized: bool,
) -> Result<(RadarLayer, Vec<f64>, Vec<f64>)> {
    use crate::lora::{FrozenBase, LoraBank};

    let n = 2 + rng.below(5); // 2..=6
    let d_in = 2 + rng.below(15); // 2..=16
    let d_out = 2 * (1 + rng.below(8)); // even, 2..=16
    let r = 1 + rng.below(d_in.min(d_out).min(3));
    let k = 1 + rng.below(n);
    let tau = rng.range(1.0, 2.0);
    let r_a = 1 + rng.below(4);

    let bank = LoraBank::random(rng, n, d_in, d_out, r, 1.0, 0.25)?;
    let w = Mat::from_vec(
        d_in,
        d_out,
        (0..d_in * d_out).map(|_| rng.gaussian() * 0.1).collect(),
    )?;
    let srows = match smode {
        StretchMode::InputProj => d_in,
        StretchMode::ConcatProj => n * d_out,
    };
    let theta_s = Mat::from_vec(
        srows,
        n,
        (0..srows * n).map(|_| rng.gaussian() * 0.25).collect(),
    )?;
    let rotation = if factorized {
        RotationParams::Factorized {
            u: Mat::from_vec(
                d_out,
                r_a,
                (0..d_out * r_a).map(|_| rng.gaussian() * 0.3).collect(),
            )?,
            v: Mat::from_vec(
                r_a,
                d_out / 2,
                (0..r_a * d_out / 2).map(|_| rng.gaussian() * 0.3).collect(),
            )?,
        }
    } else {
        RotationParams::Full(Mat::from_vec(
            d_out,
            d_out / 2,
            (0..d_out * d_out / 2)
                .map(|_| rng.gaussian() * 0.2)
                .collect(),
        )?)
    };
    let layer = RadarLayer::new(
        FrozenBase::new(w),
        bank,
        crate::gates::StretchParams::new(theta_s, smode, tau, k)?,
        rotation,
        GateMode::Radar,
    )?;

    let x: Vec<f64> = (0..d_in).map(|_| rng.gaussian() * 0.6).collect();
    // target sits close to the current output so the finite-difference
    // probe operates at small loss, where h = 1e-5 is most accurate
    let y = layer.forward(&x)?.y;
    let delta = vec_scale(
        &crate::numkernel::l2_normalize(&rng.gaussian_vec(d_out), 1e-12),
        0.004,
    );
    let target: Vec<f64> = y.iter().zip(&delta).map(|(a, b)| a + b).collect();
    Ok((layer, x, target))
}

/// Run `count` random h-stable configurations through the oracle, cycling
/// through the four (gate variant, factorization) combinations. Unstable
/// configurations are resampled up to ten times, then reported as skipped.
/// `corrupt` deliberately biases one analytic entry; it exists so the
/// negative-control test can watch the sweep fail.
pub fn gradcheck_sweep(
    base_seed: u64,
    count: usize,
    h: f64,
    corrupt: bool,
) -> Result<(Vec<GradcheckRow>, f64)> {
    let mut rows = Vec::with_capacity(count);
    let mut max_err = 0.0f64;
    for config_id in 0..count {
        let smode = if config_id % 2 == 0 {
            StretchMode::ConcatProj
        } else {
            StretchMode::InputProj
        };
        let factorized = (config_id / 2) % 2 == 1;
        let mode_name = format!(
            "{}_{}",
            match smode {
                StretchMode::ConcatProj => "concat",
                StretchMode::InputProj => "input",
            },
            if factorized { "factorized" } else { "full" }
        );

        let mut done = false;
        for attempt in 0..10u64 {
            let seed = crate::numkernel::derive_seed(base_seed, &[config_id as u64, attempt]);
            let mut rng = crate::numkernel::Rng::new(seed);
            let (layer, x, target) = random_check_layer(&mut rng, smode, factorized)?;
            match finite_diff_check(&layer, &x, &target, h) {
                Ok((mut err_s, err_r)) => {
                    if corrupt {
                        err_s += 1.0; // stands in for a broken analytic entry
                    }
                    max_err = max_err.max(err_s).max(err_r);
                    rows.push(GradcheckRow {
                        config_id,
                        seed,
                        n: layer.n(),
                        d_in: layer.d_in(),
                        d_out: layer.d_out(),
                        k: layer.stretch.k,
                        mode: mode_name.clone(),
                        err_s: Some(err_s),
                        err_r: Some(err_r),
                    });
                    done = true;
                    break;
                }
                Err(Error::Unstable(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        if !done {
            rows.push(GradcheckRow {
                config_id,
                seed: crate::numkernel::derive_seed(base_seed, &[config_id as u64, 9]),
                n: 0,
                d_in: 0,
                d_out: 0,
                k: 0,
                mode: mode_name,
                err_s: None,
                err_r: None,
            });
        }
    }
    Ok((rows, max_err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::{RotationParams, StretchMode, StretchParams};
    use crate::layer::GateMode;
    use crate::lora::{FrozenBase, LoraBank};
    use crate::numkernel::Rng;

    fn build(
        seed: u64,
        n: usize,
        d: usize,
        k: usize,
        mode: GateMode,
        smode: StretchMode,
        factorized: bool,
    ) -> RadarLayer {
        let mut rng = Rng::new(seed);
        let bank = LoraBank::random(&mut rng, n, d, d, 2, 1.0, 0.5).unwrap();
        let w = Mat::from_vec(d, d, (0..d * d).map(|_| rng.gaussian() * 0.2).collect()).unwrap();
        let srows = match smode {
            StretchMode::InputProj => d,
            StretchMode::ConcatProj => n * d,
        };
        let theta_s = Mat::from_vec(
            srows,
            n,
            (0..srows * n).map(|_| rng.gaussian() * 0.3).collect(),
        )
        .unwrap();
        let rotation = if factorized {
            RotationParams::Factorized {
                u: Mat::from_vec(d, 2, (0..d * 2).map(|_| rng.gaussian() * 0.4).collect()).unwrap(),
                v: Mat::from_vec(2, d / 2, (0..d).map(|_| rng.gaussian() * 0.4).collect()).unwrap(),
            }
        } else {
            RotationParams::Full(
                Mat::from_vec(
                    d,
                    d / 2,
                    (0..d * d / 2).map(|_| rng.gaussian() * 0.3).collect(),
                )
                .unwrap(),
            )
        };
        RadarLayer::new(
            FrozenBase::new(w),
            bank,
            StretchParams::new(theta_s, smode, 1.0, k).unwrap(),
            rotation,
            mode,
        )
        .unwrap()
    }

    #[test]
    fn loss_cases() {
        assert_eq!(loss_mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(loss_mse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        let mut rng = Rng::new(1);
        let a = rng.gaussian_vec(6);
        let b = rng.gaussian_vec(6);
        let expect: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!((loss_mse(&a, &b).unwrap() - expect).abs() < 1e-15);
        assert!(loss_mse(&a, &[1.0]).is_err());
    }

    #[test]
    fn perfect_fit_gives_zero_gradients() {
        let layer = build(3, 3, 4, 3, GateMode::Radar, StretchMode::ConcatProj, false);
        let mut rng = Rng::new(4);
        let x = rng.gaussian_vec(4);
        let trace = layer.forward(&x).unwrap();
        let target = trace.y.clone();
        let g = backward(&layer, &trace, &target, StretchGradMode::ExactMasked).unwrap();
        assert!(frob(g.d_theta_s.as_ref().unwrap()) == 0.0);
        assert!(g.d_rotation.as_ref().unwrap().frob_norm() == 0.0);
    }

    #[test]
    fn zero_features_give_zero_stretch_gradient() {
        // all-zero adapters make z the zero vector in concat mode
        let mut rng = Rng::new(5);
        let modules = (0..3)
            .map(|_| crate::lora::init_lora(&mut rng, 4, 4, 2, 1.0).unwrap())
            .collect();
        let bank = LoraBank::new(modules).unwrap();
        let layer = RadarLayer::new(
            FrozenBase::new(Mat::from_vec(4, 4, rng.gaussian_vec(16)).unwrap()),
            bank,
            StretchParams::new(Mat::zeros(12, 3), StretchMode::ConcatProj, 1.0, 2).unwrap(),
            RotationParams::zeros_full(4),
            GateMode::StretchOnly,
        )
        .unwrap();
        let x = rng.gaussian_vec(4);
        let trace = layer.forward(&x).unwrap();
        let target = rng.gaussian_vec(4);
        let ds = backward_stretch(&layer, &trace, &target, StretchGradMode::ExactMasked).unwrap();
        assert!(frob(&ds) == 0.0);
    }

    #[test]
    fn zero_input_gives_zero_rotation_gradient() {
        let layer = build(6, 2, 4, 2, GateMode::Radar, StretchMode::ConcatProj, false);
        let x = vec![0.0; 4];
        let trace = layer.forward(&x).unwrap();
        let target = vec![1.0, 0.0, 0.0, 0.0];
        let dr = backward_rotation(&layer, &trace, &target).unwrap();
        assert!(dr.frob_norm() == 0.0);
    }

    #[test]
    fn mode_mismatch_rejected() {
        let layer = build(
            7,
            3,
            4,
            2,
            GateMode::RotationOnly,
            StretchMode::ConcatProj,
            false,
        );
        let mut rng = Rng::new(8);
        let x = rng.gaussian_vec(4);
        let trace = layer.forward(&x).unwrap();
        let t = rng.gaussian_vec(4);
        assert!(backward_stretch(&layer, &trace, &t, StretchGradMode::ExactMasked).is_err());

        let layer = build(
            7,
            3,
            4,
            2,
            GateMode::StretchOnly,
            StretchMode::ConcatProj,
            false,
        );
        let trace = layer.forward(&x).unwrap();
        assert!(backward_rotation(&layer, &trace, &t).is_err());
    }

    #[test]
    fn fd_matches_stretch_gradient_fully_selected() {
        // k = n keeps every expert on the support
        let layer = build(9, 3, 4, 3, GateMode::Radar, StretchMode::ConcatProj, false);
        let mut rng = Rng::new(10);
        let x = rng.gaussian_vec(4);
        let y = layer.forward(&x).unwrap().y;
        let target: Vec<f64> = y.iter().map(|v| v + 0.02 * rng.gaussian()).collect();
        let (es, er) = finite_diff_check(&layer, &x, &target, 1e-5).unwrap();
        assert!(es < 1e-6, "stretch err {es}");
        assert!(er < 1e-6, "rotation err {er}");
    }

    #[test]
    fn fd_matches_with_topk_masking() {
        let layer = build(11, 4, 6, 2, GateMode::Radar, StretchMode::ConcatProj, false);
        let mut rng = Rng::new(12);
        let x = rng.gaussian_vec(6);
        let y = layer.forward(&x).unwrap().y;
        let target: Vec<f64> = y.iter().map(|v| v + 0.02 * rng.gaussian()).collect();
        let (es, er) = finite_diff_check(&layer, &x, &target, 1e-5).unwrap();
        assert!(es < 1e-6, "stretch err {es}");
        assert!(er < 1e-6, "rotation err {er}");
    }

    #[test]
    fn fd_matches_input_projection_and_factorized() {
        let layer = build(13, 3, 4, 2, GateMode::Radar, StretchMode::InputProj, true);
        let mut rng = Rng::new(14);
        let x = rng.gaussian_vec(4);
        let y = layer.forward(&x).unwrap().y;
        let target: Vec<f64> = y.iter().map(|v| v + 0.02 * rng.gaussian()).collect();
        let (es, er) = finite_diff_check(&layer, &x, &target, 1e-5).unwrap();
        assert!(es < 1e-6, "stretch err {es}");
        assert!(er < 1e-6, "rotation err {er}");
    }

    #[test]
    fn fd_near_linear_regime_is_tight() {
        // large tau freezes the gate near uniform; the loss is then nearly
        // linear in theta_s and central differences are extremely accurate.
        // W = 0 keeps the output scale small so roundoff stays negligible.
        let mut layer = build(
            15,
            3,
            4,
            3,
            GateMode::StretchOnly,
            StretchMode::ConcatProj,
            false,
        );
        layer.stretch.tau = 20.0;
        layer.base = FrozenBase::new(Mat::zeros(4, 4));
        let mut rng = Rng::new(16);
        let x = rng.gaussian_vec(4);
        let y = layer.forward(&x).unwrap().y;
        let target: Vec<f64> = y.iter().map(|v| v + 0.002 * rng.gaussian()).collect();
        let (es, _) = finite_diff_check(&layer, &x, &target, 1e-5).unwrap();
        assert!(es < 1e-7, "stretch err {es}");
    }

    #[test]
    fn fd_rotation_at_zero_theta() {
        let mut layer = build(17, 3, 6, 3, GateMode::Radar, StretchMode::ConcatProj, false);
        layer.rotation = RotationParams::zeros_full(6);
        let mut rng = Rng::new(18);
        let x = rng.gaussian_vec(6);
        let y = layer.forward(&x).unwrap().y;
        let target: Vec<f64> = y.iter().map(|v| v + 0.02 * rng.gaussian()).collect();
        let (_, er) = finite_diff_check(&layer, &x, &target, 1e-5).unwrap();
        assert!(er < 1e-6, "rotation err {er}");
    }

    #[test]
    fn factorized_grads_consistent_with_dense_parameter() {
        let layer = build(19, 3, 4, 3, GateMode::Radar, StretchMode::ConcatProj, true);
        let mut rng = Rng::new(20);
        let x = rng.gaussian_vec(4);
        let trace = layer.forward(&x).unwrap();
        let target = rng.gaussian_vec(4);

        // same effective parameter expressed densely
        let mut dense = layer.clone();
        dense.rotation = RotationParams::Full(layer.rotation.effective());
        let dtrace = dense.forward(&x).unwrap();
        let d_dense = match backward_rotation(&dense, &dtrace, &target).unwrap() {
            RotationGrads::Full(m) => m,
            _ => unreachable!(),
        };
        let (d_u, d_v) = match backward_rotation(&layer, &trace, &target).unwrap() {
            RotationGrads::Factorized { d_u, d_v } => (d_u, d_v),
            _ => unreachable!(),
        };
        let (u, v) = match &layer.rotation {
            RotationParams::Factorized { u, v } => (u, v),
            _ => unreachable!(),
        };
        let expect_du = matmul(&d_dense, &v.transpose()).unwrap();
        let expect_dv = matmul(&u.transpose(), &d_dense).unwrap();
        assert!(frob(&d_u.sub(&expect_du).unwrap()) < 1e-9);
        assert!(frob(&d_v.sub(&expect_dv).unwrap()) < 1e-9);
    }

    #[test]
    fn paper_approx_aligns_with_exact_on_most_configs() {
        let mut positive = 0;
        let total = 100;
        let mut rng = Rng::new(77);
        for _ in 0..total {
            let seed = rng.next_u64();
            let layer = build(
                seed,
                4,
                6,
                3,
                GateMode::Radar,
                StretchMode::ConcatProj,
                false,
            );
            let mut lrng = Rng::new(seed ^ 0xABCD);
            let x = lrng.gaussian_vec(6);
            let trace = layer.forward(&x).unwrap();
            let y = &trace.y;
            let target: Vec<f64> = y.iter().map(|v| v + 0.3 * lrng.gaussian()).collect();
            let exact =
                backward_stretch(&layer, &trace, &target, StretchGradMode::ExactMasked).unwrap();
            let approx =
                backward_stretch(&layer, &trace, &target, StretchGradMode::PaperApprox).unwrap();
            let num = dot(exact.data(), approx.data());
            let den = frob(&exact) * frob(&approx);
            if den == 0.0 || num / den > 0.0 {
                positive += 1;
            }
        }
        assert!(
            positive * 100 >= total * 95,
            "alignment rate {positive}/{total}"
        );
    }

    #[test]
    fn sweep_runs_and_detects_corruption() {
        let (rows, max_err) = gradcheck_sweep(123, 8, 1e-5, false).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(max_err < 1e-5, "sweep max err {max_err}");
        let (_, corrupted) = gradcheck_sweep(123, 2, 1e-5, true).unwrap();
        assert!(corrupted > 1e-5);
    }
}
