//! Analytic FLOP/memory formulas for the two gate families, plus an
//! instrumented multiply-accumulate counter over the real forward path.
//!
//! With sequence length `L` and the rotation parameter split into factors of
//! size `d_in x r_a` and `r_a x d_in`:
//!
//!   O_s = L [ n d_in + k r (d_in + d_out) + k d_out ]
//!   O_r = L [ (2n + 2 r_a) d_in + k r (d_in + d_out) + k d_out ]
//!   M_s = n [ d_in + r (d_in + d_out) ] + L (n + k r)
//!   M_r = n [ (2 r_a + 1) d_in + r (d_in + d_out) ] + L (n + k r)
//!
//! Counting convention: MAC = 1 FLOP; additions inside accumulations are not
//! double-counted; divisions, comparisons, and transcendentals count zero;
//! the frozen `x W` product is excluded (the formulas only cost the
//! gating/adapter path). The analytic gate term `n d_in` corresponds to the
//! input-projection gate; the concat-projection gate costs `n (n d_out)` and
//! is outside the formulas' scope, so parity sweeps run the input projection.
//! The formulas are order-of-magnitude: the instrumented count of the real
//! pipeline lands within a constant bracket of them, and that bracket is the
//! testable claim.

use serde::Serialize;

use crate::error::Result;
use crate::gates::{RotationParams, StretchMode, StretchParams};
use crate::layer::{GateMode, RadarLayer};
use crate::lora::{FrozenBase, LoraBank};
use crate::numkernel::{MacCounter, Mat, Rng};

/// Symbols of the cost formulas.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CostParams {
    pub l: usize,
    pub n: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub r: usize,
    pub k: usize,
    pub r_a: usize,
}

impl CostParams {
    /// Mirror of the experiment defaults used by the parity claim.
    pub fn default_parity(d: usize) -> CostParams {
        CostParams {
            l: 2,
            n: 8,
            d_in: d,
            d_out: d,
            r: 8,
            k: 2,
            r_a: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    Stretch,
    Radar,
}

/// Exact evaluation of the computational-cost formula.
pub fn analytic_flops(p: &CostParams, which: GateKind) -> u64 {
    let (l, n, di, dn, r, k, ra) = dims(p);
    let shared = k * r * (di + dn) + k * dn;
    let gate = match which {
        GateKind::Stretch => n * di,
        GateKind::Radar => (2 * n + 2 * ra) * di,
    };
    (l * (gate + shared)) as u64
}

/// Exact evaluation of the memory-cost formula.
pub fn analytic_memory(p: &CostParams, which: GateKind) -> u64 {
    let (l, n, di, dn, r, k, ra) = dims(p);
    let params = match which {
        GateKind::Stretch => n * (di + r * (di + dn)),
        GateKind::Radar => n * ((2 * ra + 1) * di + r * (di + dn)),
    };
    (params + l * (n + k * r)) as u64
}

fn dims(p: &CostParams) -> (usize, usize, usize, usize, usize, usize, usize) {
    (p.l, p.n, p.d_in, p.d_out, p.r, p.k, p.r_a)
}

/// Limit of `O_r / O_s` as the width grows with `d_in = d_out`.
pub fn analytic_ratio_limit(p: &CostParams) -> f64 {
    let num = (2 * p.n + 2 * p.r_a + 2 * p.k * p.r + p.k) as f64;
    let den = (p.n + 2 * p.k * p.r + p.k) as f64;
    num / den
}

/// Multiply-accumulate count of the real forward path over a batch,
/// excluding the frozen base product.
pub fn counted_flops(layer: &RadarLayer, xs: &Mat) -> Result<u64> {
    let mut counter = MacCounter::new();
    layer.forward_batch_counted(xs, &mut counter)?;
    Ok(counter.total())
}

/// One row of the complexity artifact.
#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub d: usize,
    pub analytic_flops_stretch: u64,
    pub analytic_flops_radar: u64,
    pub counted_flops_stretch: u64,
    pub counted_flops_radar: u64,
    pub analytic_mem_stretch: u64,
    pub analytic_mem_radar: u64,
    /// `analytic_flops_radar / analytic_flops_stretch`.
    pub ratio: f64,
}

/// Build the input-projection layer the analytic formulas describe and
/// instrument it at each width. The rotation parameter is factorized at
/// rank `r_a`, matching the formulas' low-rank split.
pub fn parity_sweep(dims_list: &[usize], base: &CostParams, seed: u64) -> Result<Vec<CostReport>> {
    let mut out = Vec::with_capacity(dims_list.len());
    for &d in dims_list {
        let p = CostParams {
            d_in: d,
            d_out: d,
            ..*base
        };
        let mut rng = Rng::new(crate::numkernel::derive_seed(seed, &[d as u64]));
        let bank = LoraBank::random(&mut rng, p.n, d, d, p.r, 1.0, 1.0)?;
        let theta_s = Mat::from_vec(d, p.n, (0..d * p.n).map(|_| rng.gaussian() * 0.1).collect())?;
        let rotation = RotationParams::Factorized {
            u: Mat::from_vec(
                d,
                p.r_a,
                (0..d * p.r_a).map(|_| rng.gaussian() * 0.1).collect(),
            )?,
            v: Mat::from_vec(
                p.r_a,
                d / 2,
                (0..p.r_a * d / 2).map(|_| rng.gaussian() * 0.1).collect(),
            )?,
        };
        let stretch_layer = RadarLayer::new(
            FrozenBase::new(Mat::zeros(d, d)),
            bank,
            StretchParams::new(theta_s, StretchMode::InputProj, 1.0, p.k)?,
            rotation,
            GateMode::StretchOnly,
        )?;
        let mut radar_layer = stretch_layer.clone();
        radar_layer.mode = GateMode::Radar;

        let xs = Mat::from_vec(p.l, d, (0..p.l * d).map(|_| rng.gaussian()).collect())?;
        out.push(CostReport {
            d,
            analytic_flops_stretch: analytic_flops(&p, GateKind::Stretch),
            analytic_flops_radar: analytic_flops(&p, GateKind::Radar),
            counted_flops_stretch: counted_flops(&stretch_layer, &xs)?,
            counted_flops_radar: counted_flops(&radar_layer, &xs)?,
            analytic_mem_stretch: analytic_memory(&p, GateKind::Stretch),
            analytic_mem_radar: analytic_memory(&p, GateKind::Radar),
            ratio: analytic_flops(&p, GateKind::Radar) as f64
                / analytic_flops(&p, GateKind::Stretch) as f64,
        });
    }
    Ok(out)
}
