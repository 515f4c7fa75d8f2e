//! The composable layer: frozen base output plus gated (rotated, stretched)
//! expert outputs, with four ablation modes.
//!
//! Forward semantics per mode:
//! - `Radar`: v_i -> alpha_i -> v~_i for the gate's support, then
//!   `y = x W + sum g_i v~_i`.
//! - `StretchOnly`: rotation bypassed, `v~_i = v_i`.
//! - `RotationOnly`: rotation applied to every expert, `g_i = 1/n` (k ignored).
//! - `BaseOnly`: `y = x W`.
//!
//! Experts outside the gate's support carry zero weight, so their rotation is
//! never evaluated on the hot path; their trace entries hold the identity
//! (`v~_i = v_i`, `alpha_i = 0`). In the input-projection stretch ablation the
//! unselected `v_i` are not needed at all and are stored as zeros. Use
//! [`RadarLayer::rotated_outputs_all`] when a diagnostic wants every expert
//! rotated regardless of selection.

use crate::error::{Error, Result};
use crate::gates::{
    angles_from_relation, apply_rotation, topk_gate, GateDecision, RotationParams, StretchMode,
    StretchParams,
};
use crate::lora::{FrozenBase, LoraBank};
use crate::numkernel::{axpy, hadamard, l2_normalize, vec_mat, vec_sub, MacCounter, Mat, EPS_NORM};

/// Ablation mode of the layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Radar,
    StretchOnly,
    RotationOnly,
    BaseOnly,
}

impl GateMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GateMode::Radar => "radar",
            GateMode::StretchOnly => "stretch_only",
            GateMode::RotationOnly => "rotation_only",
            GateMode::BaseOnly => "base_only",
        }
    }
}

/// Frozen base + expert bank + gate parameters + mode.
#[derive(Clone, Debug)]
pub struct RadarLayer {
    pub base: FrozenBase,
    pub bank: LoraBank,
    pub stretch: StretchParams,
    pub rotation: RotationParams,
    pub mode: GateMode,
}

/// Every intermediate of one forward pass needed by the analytic backward.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub x: Vec<f64>,
    /// Per-expert raw outputs `v_i = x P_i`. Zero-filled for experts the
    /// active path never evaluated (input-projection stretch ablation).
    pub v: Vec<Vec<f64>>,
    /// Per-expert rotation angles; zeros where rotation did not run.
    pub alpha: Vec<Vec<f64>>,
    /// Per-expert rotated outputs; equals `v_i` where rotation did not run.
    pub v_tilde: Vec<Vec<f64>>,
    /// Normalized concatenation feeding the concat-projection logits.
    pub z: Option<Vec<f64>>,
    /// Gate decision; `None` only in base-only mode.
    pub decision: Option<GateDecision>,
    pub y: Vec<f64>,
}

impl ForwardTrace {
    /// Recompute `y` from the stored fields (trace self-consistency).
    pub fn replay_y(&self, base: &FrozenBase) -> Result<Vec<f64>> {
        let mut y = base.apply(&self.x)?;
        if let Some(d) = &self.decision {
            for &i in &d.selected {
                axpy(&mut y, d.g[i], &self.v_tilde[i]);
            }
        }
        Ok(y)
    }
}

impl RadarLayer {
    pub fn new(
        base: FrozenBase,
        bank: LoraBank,
        stretch: StretchParams,
        rotation: RotationParams,
        mode: GateMode,
    ) -> Result<RadarLayer> {
        let (d_in, d_out, n) = (bank.d_in(), bank.d_out(), bank.n());
        if base.d_in() != d_in || base.d_out() != d_out {
            return Err(Error::ShapeMismatch {
                op: "RadarLayer::new",
                expected: format!("base {d_in}x{d_out}"),
                got: format!("{}x{}", base.d_in(), base.d_out()),
            });
        }
        stretch.validate_dims(d_in, d_out, n)?;
        rotation.validate_dims(d_out)?;
        Ok(RadarLayer {
            base,
            bank,
            stretch,
            rotation,
            mode,
        })
    }

    pub fn n(&self) -> usize {
        self.bank.n()
    }

    pub fn d_in(&self) -> usize {
        self.bank.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.bank.d_out()
    }

    /// Single-input forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.forward_inner(x, None)
    }

    /// Forward pass that accumulates multiply-accumulate counts for the
    /// gating/adapter path (the frozen `x W` product is excluded by the cost
    /// model's convention).
    pub fn forward_counted(&self, x: &[f64], counter: &mut MacCounter) -> Result<ForwardTrace> {
        self.forward_inner(x, Some(counter))
    }

    /// Per-row forward over a batch; row order is preserved and each row
    /// gates independently.
    pub fn forward_batch(&self, xs: &Mat) -> Result<Vec<ForwardTrace>> {
        self.forward_batch_inner(xs, None)
    }

    pub fn forward_batch_counted(
        &self,
        xs: &Mat,
        counter: &mut MacCounter,
    ) -> Result<Vec<ForwardTrace>> {
        self.forward_batch_inner(xs, Some(counter))
    }

    fn forward_batch_inner(
        &self,
        xs: &Mat,
        mut counter: Option<&mut MacCounter>,
    ) -> Result<Vec<ForwardTrace>> {
        if xs.cols() != self.d_in() {
            return Err(Error::ShapeMismatch {
                op: "forward_batch",
                expected: format!("{} columns", self.d_in()),
                got: format!("{}", xs.cols()),
            });
        }
        (0..xs.rows())
            .map(|i| self.forward_inner(xs.row(i), counter.as_deref_mut()))
            .collect()
    }

    fn forward_inner(
        &self,
        x: &[f64],
        mut counter: Option<&mut MacCounter>,
    ) -> Result<ForwardTrace> {
        if x.len() != self.d_in() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                expected: format!("input of length {}", self.d_in()),
                got: format!("{}", x.len()),
            });
        }
        let n = self.n();
        let d_out = self.d_out();
        let xw = self.base.apply(x)?;

        if self.mode == GateMode::BaseOnly {
            return Ok(ForwardTrace {
                x: x.to_vec(),
                v: vec![vec![0.0; d_out]; n],
                alpha: vec![vec![0.0; d_out / 2]; n],
                v_tilde: vec![vec![0.0; d_out]; n],
                z: None,
                decision: None,
                y: xw,
            });
        }

        // Which experts the gate keeps decides how much of the pipeline runs.
        let needs_all_v = self.mode == GateMode::Radar
            || self.mode == GateMode::RotationOnly
            || self.stretch.mode == StretchMode::ConcatProj;

        let mut v: Vec<Vec<f64>> = vec![vec![0.0; d_out]; n];
        let mut computed_v = vec![false; n];
        let compute_v = |bank: &LoraBank,
                         i: usize,
                         v: &mut Vec<Vec<f64>>,
                         computed: &mut Vec<bool>,
                         counter: &mut Option<&mut MacCounter>|
         -> Result<()> {
            if !computed[i] {
                v[i] = bank.expert_output(i, x)?;
                computed[i] = true;
                if let Some(c) = counter.as_deref_mut() {
                    let m = bank.module(i);
                    c.record_vec_mat(m.d_in(), m.rank());
                    c.record_vec_mat(m.rank(), m.d_out());
                }
            }
            Ok(())
        };

        if needs_all_v {
            for i in 0..n {
                compute_v(&self.bank, i, &mut v, &mut computed_v, &mut counter)?;
            }
        }

        // Stretch logits and gate decision (uniform in rotation-only mode).
        let mut z = None;
        let decision = if self.mode == GateMode::RotationOnly {
            GateDecision::uniform(n)
        } else {
            let logits = match self.stretch.mode {
                StretchMode::InputProj => {
                    let eps = vec_mat(x, &self.stretch.theta_s)?;
                    if let Some(c) = counter.as_deref_mut() {
                        c.record_vec_mat(self.d_in(), n);
                    }
                    eps
                }
                StretchMode::ConcatProj => {
                    let cat: Vec<f64> = v.iter().flat_map(|vi| vi.iter().copied()).collect();
                    let zn = l2_normalize(&cat, EPS_NORM);
                    let eps = vec_mat(&zn, &self.stretch.theta_s)?;
                    if let Some(c) = counter.as_deref_mut() {
                        c.record_normalize(cat.len());
                        c.record_vec_mat(n * d_out, n);
                    }
                    z = Some(zn);
                    eps
                }
            };
            topk_gate(&logits, self.stretch.tau, self.stretch.k)?
        };

        // Lazy path: the input-projection stretch ablation only ever touches
        // the selected experts' outputs.
        if !needs_all_v {
            for &i in &decision.selected {
                compute_v(&self.bank, i, &mut v, &mut computed_v, &mut counter)?;
            }
        }

        // Rotation path over the gate's support.
        let mut alpha = vec![vec![0.0; d_out / 2]; n];
        let mut v_tilde = v.clone();
        if self.mode == GateMode::Radar || self.mode == GateMode::RotationOnly {
            let mut v_total = vec![0.0; d_out];
            for vi in &v {
                axpy(&mut v_total, 1.0, vi); // additions only, not counted
            }
            for &i in &decision.selected {
                let xq = vec_sub(&v_total, &v[i]);
                let u = hadamard(&v[i], &xq)?;
                let a = angles_from_relation(&self.rotation, &u)?;
                if let Some(c) = counter.as_deref_mut() {
                    c.record_hadamard(d_out);
                    match &self.rotation {
                        RotationParams::Full(_) => c.record_vec_mat(d_out, d_out / 2),
                        RotationParams::Factorized { u: uf, v: vf } => {
                            c.record_vec_mat(uf.rows(), uf.cols());
                            c.record_vec_mat(vf.rows(), vf.cols());
                        }
                    }
                    c.record_rotation(d_out);
                }
                v_tilde[i] = apply_rotation(&v[i], &a)?;
                alpha[i] = a;
            }
        }

        // y = x W + sum over support of g_i v~_i, ascending index order.
        let mut y = xw;
        for &i in &decision.selected {
            axpy(&mut y, decision.g[i], &v_tilde[i]);
            if let Some(c) = counter.as_deref_mut() {
                c.record_axpy(d_out);
            }
        }

        Ok(ForwardTrace {
            x: x.to_vec(),
            v,
            alpha,
            v_tilde,
            z,
            decision: Some(decision),
            y,
        })
    }

    /// Rotated outputs for every expert regardless of gate support, for
    /// diagnostics and visualization. Returns `(v, alpha, v_tilde)`.
    pub fn rotated_outputs_all(
        &self,
        x: &[f64],
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let v = self.bank.expert_outputs(x)?;
        let d_out = self.d_out();
        let mut v_total = vec![0.0; d_out];
        for vi in &v {
            axpy(&mut v_total, 1.0, vi);
        }
        let mut alpha = Vec::with_capacity(self.n());
        let mut v_tilde = Vec::with_capacity(self.n());
        for i in 0..self.n() {
            if self.mode == GateMode::StretchOnly || self.mode == GateMode::BaseOnly {
                alpha.push(vec![0.0; d_out / 2]);
                v_tilde.push(v[i].clone());
                continue;
            }
            let xq = vec_sub(&v_total, &v[i]);
            let u = hadamard(&v[i], &xq)?;
            let a = angles_from_relation(&self.rotation, &u)?;
            v_tilde.push(apply_rotation(&v[i], &a)?);
            alpha.push(a);
        }
        Ok((v, alpha, v_tilde))
    }
}

/// Mean pairwise cosine-similarity matrix of the rotated expert outputs over
/// a set of inputs, plus the mean absolute pairwise angle difference. These
/// are the exported "angular weight" diagnostics; the quantity is a
/// similarity readout, not a claim about any particular published figure.
pub fn angular_similarity(layer: &RadarLayer, xs: &Mat) -> Result<(Mat, Mat)> {
    let n = layer.n();
    let mut cos = Mat::zeros(n, n);
    let mut ang = Mat::zeros(n, n);
    let rows = xs.rows();
    for r in 0..rows {
        let (_v, alpha, v_tilde) = layer.rotated_outputs_all(xs.row(r))?;
        for i in 0..n {
            for j in 0..n {
                let ni = crate::numkernel::norm2(&v_tilde[i]);
                let nj = crate::numkernel::norm2(&v_tilde[j]);
                let c = if ni > EPS_NORM && nj > EPS_NORM {
                    crate::numkernel::dot(&v_tilde[i], &v_tilde[j]) / (ni * nj)
                } else {
                    0.0
                };
                cos.set(i, j, cos.get(i, j) + c / rows as f64);
                let mean_diff = alpha[i]
                    .iter()
                    .zip(&alpha[j])
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / alpha[i].len().max(1) as f64;
                ang.set(i, j, ang.get(i, j) + mean_diff / rows as f64);
            }
        }
    }
    Ok((cos, ang))
}
