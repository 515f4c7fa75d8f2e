//! The two gating mechanisms.
//!
//! StretchGate: logits -> temperature softmax -> top-k renormalization ->
//! scalar weights `g_i` on the simplex. Two logit variants exist: the input
//! projection `eps = x theta_s` and the concat projection
//! `eps = l2_normalize(v_1 ++ ... ++ v_n) theta_s`.
//!
//! RotationGate: for expert i, the rotational control factor is
//! `alpha_i = (x P_i) ⊙ (x Q_i) theta_r` with `Q_i` the sum of every other
//! expert's composed matrix; `alpha_i` then drives a block-diagonal rotation
//! of `v_i` acting on dimension pairs `(2m, 2m+1)`:
//!
//!   v~^(2m)   = v^(2m) cos a_m - v^(2m+1) sin a_m
//!   v~^(2m+1) = v^(2m) sin a_m + v^(2m+1) cos a_m
//!
//! Angles are used as-is (no wrapping): each 2x2 block is orthogonal, so the
//! map is an isometry and angles add under composition.

use crate::error::{Error, Result};
use crate::numkernel::{hadamard, l2_normalize, matmul, softmax, vec_mat, Mat, EPS_NORM};

/// Where the stretch logits come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StretchMode {
    /// `eps = x theta_s`, `theta_s: d_in x n`.
    InputProj,
    /// `eps = l2_normalize(concat(v)) theta_s`, `theta_s: (n d_out) x n`.
    ConcatProj,
}

/// Learnable stretch-gate parameters plus routing hyperparameters.
#[derive(Clone, Debug)]
pub struct StretchParams {
    pub theta_s: Mat,
    pub mode: StretchMode,
    pub tau: f64,
    pub k: usize,
}

impl StretchParams {
    pub fn new(theta_s: Mat, mode: StretchMode, tau: f64, k: usize) -> Result<StretchParams> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArg(format!(
                "tau must be positive, got {tau}"
            )));
        }
        let n = theta_s.cols();
        if k == 0 || k > n {
            return Err(Error::InvalidArg(format!("k={k} outside [1, n={n}]")));
        }
        Ok(StretchParams {
            theta_s,
            mode,
            tau,
            k,
        })
    }

    pub fn n(&self) -> usize {
        self.theta_s.cols()
    }

    /// Check `theta_s` against the layer dimensions for this mode.
    pub fn validate_dims(&self, d_in: usize, d_out: usize, n: usize) -> Result<()> {
        let expected_rows = match self.mode {
            StretchMode::InputProj => d_in,
            StretchMode::ConcatProj => n * d_out,
        };
        if self.theta_s.rows() != expected_rows || self.theta_s.cols() != n {
            return Err(Error::ShapeMismatch {
                op: "StretchParams",
                expected: format!("{expected_rows}x{n}"),
                got: format!("{}x{}", self.theta_s.rows(), self.theta_s.cols()),
            });
        }
        Ok(())
    }
}

/// Learnable rotation-gate parameters: the effective projection has shape
/// `d_out x d_out/2`, stored dense or as a low-rank `U V` split.
#[derive(Clone, Debug)]
pub enum RotationParams {
    Full(Mat),
    Factorized { u: Mat, v: Mat },
}

impl RotationParams {
    pub fn zeros_full(d_out: usize) -> RotationParams {
        RotationParams::Full(Mat::zeros(d_out, d_out / 2))
    }

    pub fn zeros_factorized(d_out: usize, r_a: usize) -> RotationParams {
        RotationParams::Factorized {
            u: Mat::zeros(d_out, r_a),
            v: Mat::zeros(r_a, d_out / 2),
        }
    }

    pub fn is_factorized(&self) -> bool {
        matches!(self, RotationParams::Factorized { .. })
    }

    pub fn validate_dims(&self, d_out: usize) -> Result<()> {
        let (rows, cols) = match self {
            RotationParams::Full(m) => (m.rows(), m.cols()),
            RotationParams::Factorized { u, v } => {
                if u.cols() != v.rows() {
                    return Err(Error::ShapeMismatch {
                        op: "RotationParams",
                        expected: format!("V with {} rows", u.cols()),
                        got: format!("{}", v.rows()),
                    });
                }
                (u.rows(), v.cols())
            }
        };
        if rows != d_out || cols != d_out / 2 {
            return Err(Error::ShapeMismatch {
                op: "RotationParams",
                expected: format!("{d_out}x{}", d_out / 2),
                got: format!("{rows}x{cols}"),
            });
        }
        Ok(())
    }

    /// The dense `d_out x d_out/2` matrix: stored as-is, or `U V` collapsed.
    pub fn effective(&self) -> Mat {
        match self {
            RotationParams::Full(m) => m.clone(),
            RotationParams::Factorized { u, v } => {
                matmul(u, v).expect("factor shapes validated at construction")
            }
        }
    }
}

/// Result of one gate evaluation. `g` lives on the simplex with support
/// limited to `selected`.
#[derive(Clone, Debug)]
pub struct GateDecision {
    /// Raw logits eps (before temperature).
    pub logits: Vec<f64>,
    /// softmax(eps / tau) over all n experts.
    pub probs: Vec<f64>,
    /// Indices of the k kept experts, ascending.
    pub selected: Vec<usize>,
    /// Final weights: renormalized probs on `selected`, zero elsewhere.
    pub g: Vec<f64>,
}

impl GateDecision {
    /// Uniform weights over all experts (rotation-only ablation).
    pub fn uniform(n: usize) -> GateDecision {
        GateDecision {
            logits: vec![0.0; n],
            probs: vec![1.0 / n as f64; n],
            selected: (0..n).collect(),
            g: vec![1.0 / n as f64; n],
        }
    }
}

/// Stretch-gate logits for one input. `v` is only consulted in concat mode.
pub fn stretch_logits(params: &StretchParams, x: &[f64], v: &[Vec<f64>]) -> Result<Vec<f64>> {
    match params.mode {
        StretchMode::InputProj => vec_mat(x, &params.theta_s),
        StretchMode::ConcatProj => {
            let cat: Vec<f64> = v.iter().flat_map(|vi| vi.iter().copied()).collect();
            if cat.len() != params.theta_s.rows() {
                return Err(Error::ShapeMismatch {
                    op: "stretch_logits",
                    expected: format!("concat length {}", params.theta_s.rows()),
                    got: format!("{}", cat.len()),
                });
            }
            let z = l2_normalize(&cat, EPS_NORM);
            vec_mat(&z, &params.theta_s)
        }
    }
}

/// Temperature softmax followed by top-k renormalization. Ties at the
/// selection boundary break toward the lower index.
pub fn topk_gate(logits: &[f64], tau: f64, k: usize) -> Result<GateDecision> {
    let n = logits.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArg(format!("k={k} outside [1, n={n}]")));
    }
    let probs = softmax(logits, tau)?;
    let mut order: Vec<usize> = (0..n).collect();
    // sort by prob descending; equal probs keep index order (stable sort)
    order.sort_by(|&i, &j| probs[j].partial_cmp(&probs[i]).unwrap());
    let mut selected: Vec<usize> = order[..k].to_vec();
    selected.sort_unstable();

    // Renormalizing the kept probs equals a softmax over the kept logits;
    // computing it that way keeps g bitwise independent of dropped logits.
    let kept_logits: Vec<f64> = selected.iter().map(|&i| logits[i]).collect();
    let kept_probs = softmax(&kept_logits, tau)?;
    let mut g = vec![0.0; n];
    for (&i, &p) in selected.iter().zip(&kept_probs) {
        g[i] = p;
    }
    Ok(GateDecision {
        logits: logits.to_vec(),
        probs,
        selected,
        g,
    })
}

/// Rotational control factor for one expert, straight from the mechanism
/// definition: `hadamard(x P_i, x Q_i)` projected through the effective
/// rotation parameter.
pub fn rotation_angles(
    theta_r: &RotationParams,
    x: &[f64],
    p_i: &Mat,
    q_i: &Mat,
) -> Result<Vec<f64>> {
    let xp = vec_mat(x, p_i)?;
    let xq = vec_mat(x, q_i)?;
    let u = hadamard(&xp, &xq)?;
    angles_from_relation(theta_r, &u)
}

/// Same projection applied to an already-formed relation vector
/// `u = (x P_i) ⊙ (x Q_i)`. The factorized split is applied as two small
/// products rather than collapsing the dense parameter.
pub fn angles_from_relation(theta_r: &RotationParams, u: &[f64]) -> Result<Vec<f64>> {
    match theta_r {
        RotationParams::Full(m) => vec_mat(u, m),
        RotationParams::Factorized { u: uf, v: vf } => {
            let mid = vec_mat(u, uf)?;
            vec_mat(&mid, vf)
        }
    }
}

/// Apply the pairwise rotation. `v` has even length `d`, `alpha` has length
/// `d/2`; each pair `(2m, 2m+1)` rotates by `alpha[m]`.
pub fn apply_rotation(v: &[f64], alpha: &[f64]) -> Result<Vec<f64>> {
    if v.len() % 2 != 0 || alpha.len() != v.len() / 2 {
        return Err(Error::ShapeMismatch {
            op: "apply_rotation",
            expected: format!("even |v| with |alpha| = |v|/2, |v|={}", v.len()),
            got: format!("|alpha|={}", alpha.len()),
        });
    }
    let mut out = vec![0.0; v.len()];
    for (m, &a) in alpha.iter().enumerate() {
        let (c, s) = (a.cos(), a.sin());
        let (e, o) = (v[2 * m], v[2 * m + 1]);
        out[2 * m] = e * c - o * s;
        out[2 * m + 1] = e * s + o * c;
    }
    Ok(out)
}

/// Dense `d x d` block-diagonal rotation matrix for the given angles; the
/// element-wise kernel is checked against `v * R` built from this.
pub fn dense_rotation_matrix(alpha: &[f64]) -> Mat {
    let d = 2 * alpha.len();
    let mut r = Mat::zeros(d, d);
    for (m, &a) in alpha.iter().enumerate() {
        let (c, s) = (a.cos(), a.sin());
        // block laid out so that row-vector multiplication v * R matches the
        // element-wise pair map
        r.set(2 * m, 2 * m, c);
        r.set(2 * m, 2 * m + 1, s);
        r.set(2 * m + 1, 2 * m, -s);
        r.set(2 * m + 1, 2 * m + 1, c);
    }
    r
}

/// Dense effective rotation parameter (`U V` collapsed when factorized).
pub fn effective_theta_r(params: &RotationParams) -> Mat {
    params.effective()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoraBank;
    use crate::numkernel::{norm2, vec_sub};
    use proptest::prelude::*;
    // the proptest prelude also exports a `Rng` trait; ours wins by name
    use crate::numkernel::Rng;

    #[test]
    fn stretch_logits_zero_param_and_zero_v() {
        let p = StretchParams::new(Mat::zeros(4, 3), StretchMode::InputProj, 1.0, 2).unwrap();
        let eps = stretch_logits(&p, &[1.0, -2.0, 0.5, 3.0], &[]).unwrap();
        assert!(eps.iter().all(|&e| e == 0.0));

        // concat mode with all v_i = 0 hits the zero-vector guard
        let p = StretchParams::new(Mat::zeros(6, 3), StretchMode::ConcatProj, 1.0, 2).unwrap();
        let v = vec![vec![0.0; 2]; 3];
        let eps = stretch_logits(&p, &[0.0; 4], &v).unwrap();
        assert!(eps.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn stretch_logits_basis_vector_selects_row() {
        let theta = Mat::from_rows(vec![
            vec![1.0, 2.0, 3.0],
            vec![0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0],
        ])
        .unwrap();
        let p = StretchParams::new(theta, StretchMode::InputProj, 1.0, 1).unwrap();
        let eps = stretch_logits(&p, &[1.0, 0.0, 0.0], &[]).unwrap();
        assert_eq!(eps, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn topk_no_truncation_when_k_is_n() {
        let eps = vec![0.3, -1.0, 0.7];
        let d = topk_gate(&eps, 1.3, 3).unwrap();
        for (a, b) in d.g.iter().zip(&d.probs) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn topk_tie_break_lowest_index() {
        let d = topk_gate(&[0.0, 0.0, 0.0], 1.0, 2).unwrap();
        assert_eq!(d.selected, vec![0, 1]);
        assert!((d.g[0] - 0.5).abs() < 1e-15);
        assert!((d.g[1] - 0.5).abs() < 1e-15);
        assert_eq!(d.g[2], 0.0);
    }

    #[test]
    fn topk_renormalization_arithmetic() {
        // probs [0.5, 0.3, 0.2] from logits ln(p)
        let logits: Vec<f64> = [0.5f64, 0.3, 0.2].iter().map(|p| p.ln()).collect();
        let d = topk_gate(&logits, 1.0, 2).unwrap();
        assert_eq!(d.selected, vec![0, 1]);
        assert!((d.g[0] - 0.625).abs() < 1e-12);
        assert!((d.g[1] - 0.375).abs() < 1e-12);
        assert_eq!(d.g[2], 0.0);
    }

    #[test]
    fn rotation_angles_trivial_cases() {
        let mut rng = Rng::new(3);
        let bank = LoraBank::random(&mut rng, 2, 4, 4, 2, 1.0, 1.0).unwrap();
        let x = rng.gaussian_vec(4);

        let zero = RotationParams::zeros_full(4);
        let a = rotation_angles(&zero, &x, bank.composed(0), bank.ref_sum(0).unwrap()).unwrap();
        assert!(a.iter().all(|&v| v == 0.0));

        let theta = RotationParams::Full(Mat::from_vec(4, 2, rng.gaussian_vec(8)).unwrap());
        let a = rotation_angles(
            &theta,
            &[0.0; 4],
            bank.composed(0),
            bank.ref_sum(0).unwrap(),
        )
        .unwrap();
        assert!(a.iter().all(|&v| v == 0.0));

        // single expert: empty reference set kills the Hadamard
        let single = LoraBank::random(&mut rng, 1, 4, 4, 2, 1.0, 1.0).unwrap();
        let a =
            rotation_angles(&theta, &x, single.composed(0), single.ref_sum(0).unwrap()).unwrap();
        assert!(a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rotation_angles_match_dense_three_step_oracle() {
        let mut rng = Rng::new(17);
        let bank = LoraBank::random(&mut rng, 2, 4, 4, 2, 1.0, 1.0).unwrap();
        let x = rng.gaussian_vec(4);
        let theta = RotationParams::Full(Mat::from_vec(4, 2, rng.gaussian_vec(8)).unwrap());

        let got = rotation_angles(&theta, &x, bank.composed(0), bank.ref_sum(0).unwrap()).unwrap();

        // independent evaluation straight from the definition
        let xp = vec_mat(&x, bank.composed(0)).unwrap();
        let xq = vec_mat(&x, bank.ref_sum(0).unwrap()).unwrap();
        let had: Vec<f64> = xp.iter().zip(&xq).map(|(a, b)| a * b).collect();
        let expect = vec_mat(&had, &effective_theta_r(&theta)).unwrap();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_rotation_identity_and_quarter_turn() {
        let v = vec![0.3, -0.7, 1.1, 0.0];
        let same = apply_rotation(&v, &[0.0, 0.0]).unwrap();
        assert_eq!(same, v);

        let turned = apply_rotation(&[1.0, 0.0], &[std::f64::consts::FRAC_PI_2]).unwrap();
        assert!(turned[0].abs() < 1e-15);
        assert!((turned[1] - 1.0).abs() < 1e-15);

        assert!(apply_rotation(&[1.0, 0.0, 2.0], &[0.1]).is_err());
        assert!(apply_rotation(&[1.0, 0.0], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn elementwise_kernel_equals_dense_product() {
        let mut rng = Rng::new(29);
        for _ in 0..1000 {
            let d = 2 * (1 + rng.below(4));
            let v = rng.gaussian_vec(d);
            let alpha = rng.gaussian_vec(d / 2);
            let fast = apply_rotation(&v, &alpha).unwrap();
            let r = dense_rotation_matrix(&alpha);
            let slow = vec_mat(&v, &r).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn effective_theta_cases() {
        let m = Mat::from_vec(4, 2, (0..8).map(|i| i as f64).collect()).unwrap();
        let full = RotationParams::Full(m.clone());
        assert_eq!(effective_theta_r(&full), m);

        let fact = RotationParams::zeros_factorized(4, 3);
        assert!(effective_theta_r(&fact).max_abs() == 0.0);

        // r_a = d_out with U = I: effective equals V (matmul oracle)
        let v = Mat::from_vec(4, 2, (0..8).map(|i| i as f64 * 0.5).collect()).unwrap();
        let fact = RotationParams::Factorized {
            u: Mat::identity(4),
            v: v.clone(),
        };
        let eff = effective_theta_r(&fact);
        let oracle = matmul(&Mat::identity(4), &v).unwrap();
        assert_eq!(eff, oracle);
    }

    proptest! {
        #[test]
        fn gate_decision_simplex_invariant(seed in 0u64..400) {
            let mut rng = Rng::new(seed);
            let n = 1 + rng.below(8);
            let k = 1 + rng.below(n);
            let logits = rng.gaussian_vec(n);
            let tau = rng.range(0.05, 4.0);
            let d = topk_gate(&logits, tau, k).unwrap();
            prop_assert!(d.g.iter().all(|&g| g >= 0.0));
            prop_assert!((d.g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(d.g.iter().filter(|&&g| g != 0.0).count() <= k);
            for (i, &g) in d.g.iter().enumerate() {
                if !d.selected.contains(&i) {
                    prop_assert!(g == 0.0);
                }
            }
        }

        #[test]
        fn rotation_isometry_composition_inverse(seed in 0u64..400) {
            let mut rng = Rng::new(seed);
            let d = 2 * (1 + rng.below(6));
            let v = rng.gaussian_vec(d);
            let a = rng.gaussian_vec(d / 2);
            let b = rng.gaussian_vec(d / 2);

            let rv = apply_rotation(&v, &a).unwrap();
            let n0 = norm2(&v);
            prop_assert!((norm2(&rv) - n0).abs() <= 1e-12 * n0.max(1.0));

            let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let two_step = apply_rotation(&rv, &b).unwrap();
            let one_step = apply_rotation(&v, &ab).unwrap();
            let diff = norm2(&vec_sub(&two_step, &one_step));
            prop_assert!(diff <= 1e-12 * n0.max(1.0));

            let neg: Vec<f64> = a.iter().map(|x| -x).collect();
            let back = apply_rotation(&rv, &neg).unwrap();
            let diff = norm2(&vec_sub(&back, &v));
            prop_assert!(diff <= 1e-12 * n0.max(1.0));
        }
    }
}
