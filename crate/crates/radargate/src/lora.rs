//! Frozen bank of low-rank adapter pairs.
//!
//! Each expert is a pair `(A_i, B_i)` with `A_i: d_in x r`, `B_i: r x d_out`.
//! The bank caches the composed products `P_i = A_i B_i` and the leave-one-out
//! reference sums `Q_i = sum_{j != i} P_j`, stored as `(sum_j P_j) - P_i` so
//! memory stays linear in the number of experts. Nothing in here trains; the
//! matrices are frozen after construction.

use crate::error::{Error, Result};
use crate::numkernel::{matmul, vec_mat, vec_sub, Mat, Rng};

/// One frozen low-rank expert.
#[derive(Clone, Debug)]
pub struct LoraModule {
    a: Mat,
    b: Mat,
    rank: usize,
}

impl LoraModule {
    pub fn new(a: Mat, b: Mat) -> Result<LoraModule> {
        if a.cols() != b.rows() {
            return Err(Error::ShapeMismatch {
                op: "LoraModule::new",
                expected: format!("B with {} rows", a.cols()),
                got: format!("{}", b.rows()),
            });
        }
        let rank = a.cols();
        if rank > a.rows().min(b.cols()) {
            return Err(Error::InvalidArg(format!(
                "rank {rank} exceeds min(d_in={}, d_out={})",
                a.rows(),
                b.cols()
            )));
        }
        Ok(LoraModule { a, b, rank })
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn b(&self) -> &Mat {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn d_in(&self) -> usize {
        self.a.rows()
    }

    pub fn d_out(&self) -> usize {
        self.b.cols()
    }

    /// The composed product `A B` (`d_in x d_out`).
    pub fn compose(&self) -> Mat {
        matmul(&self.a, &self.b).expect("shapes validated at construction")
    }
}

/// Standard adapter initialization: `A` uniform in
/// `[-scale/sqrt(d_in), +scale/sqrt(d_in)]`, `B = 0`, so the adapter starts
/// as the zero map.
pub fn init_lora(
    rng: &mut Rng,
    d_in: usize,
    d_out: usize,
    r: usize,
    scale: f64,
) -> Result<LoraModule> {
    if d_out % 2 != 0 {
        return Err(Error::InvalidArg(format!(
            "d_out must be even for pairwise rotation, got {d_out}"
        )));
    }
    if r == 0 {
        return Err(Error::InvalidArg("rank must be >= 1".into()));
    }
    let bound = scale / (d_in as f64).sqrt();
    let a_data: Vec<f64> = (0..d_in * r).map(|_| rng.range(-bound, bound)).collect();
    let a = Mat::from_vec(d_in, r, a_data)?;
    let b = Mat::zeros(r, d_out);
    LoraModule::new(a, b)
}

/// Frozen pretrained weight the adapters sit beside.
#[derive(Clone, Debug)]
pub struct FrozenBase {
    w: Mat,
}

impl FrozenBase {
    pub fn new(w: Mat) -> FrozenBase {
        FrozenBase { w }
    }

    pub fn w(&self) -> &Mat {
        &self.w
    }

    pub fn d_in(&self) -> usize {
        self.w.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w.cols()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        vec_mat(x, &self.w)
    }
}

/// Frozen expert bank with cached composed and reference-sum matrices.
///
/// The dense caches materialize on first use: the forward path works through
/// the low-rank factors and never needs them, while the geometry oracles and
/// the per-expert relation definition do.
#[derive(Clone, Debug)]
pub struct LoraBank {
    modules: Vec<LoraModule>,
    caches: std::sync::OnceLock<BankCaches>,
}

#[derive(Clone, Debug)]
struct BankCaches {
    composed: Vec<Mat>,
    ref_sums: Vec<Mat>,
    total: Mat,
}

fn build_caches(modules: &[LoraModule]) -> BankCaches {
    let composed: Vec<Mat> = modules.iter().map(LoraModule::compose).collect();
    let mut total = Mat::zeros(modules[0].d_in(), modules[0].d_out());
    for p in &composed {
        total = total.add(p).expect("dimensions validated at construction");
    }
    let ref_sums = composed
        .iter()
        .map(|p| total.sub(p).expect("dimensions validated at construction"))
        .collect();
    BankCaches {
        composed,
        ref_sums,
        total,
    }
}

impl LoraBank {
    pub fn new(modules: Vec<LoraModule>) -> Result<LoraBank> {
        if modules.is_empty() {
            return Err(Error::InvalidArg("bank needs at least one expert".into()));
        }
        let d_in = modules[0].d_in();
        let d_out = modules[0].d_out();
        if d_out % 2 != 0 {
            return Err(Error::InvalidArg(format!(
                "d_out must be even for pairwise rotation, got {d_out}"
            )));
        }
        for (i, m) in modules.iter().enumerate() {
            if m.d_in() != d_in || m.d_out() != d_out {
                return Err(Error::ShapeMismatch {
                    op: "LoraBank::new",
                    expected: format!("{d_in}x{d_out} experts"),
                    got: format!("expert {i} is {}x{}", m.d_in(), m.d_out()),
                });
            }
        }
        Ok(LoraBank {
            modules,
            caches: std::sync::OnceLock::new(),
        })
    }

    /// Random bank with non-zero products, for experiments where the experts
    /// stand in for pretrained adapters. `A` entries are uniform in
    /// `+-a_scale/sqrt(d_in)`, `B` entries in `+-b_scale/sqrt(r)`.
    pub fn random(
        rng: &mut Rng,
        n: usize,
        d_in: usize,
        d_out: usize,
        r: usize,
        a_scale: f64,
        b_scale: f64,
    ) -> Result<LoraBank> {
        let mut modules = Vec::with_capacity(n);
        let a_bound = a_scale / (d_in as f64).sqrt();
        let b_bound = b_scale / (r as f64).sqrt();
        for _ in 0..n {
            let a_data: Vec<f64> = (0..d_in * r)
                .map(|_| rng.range(-a_bound, a_bound))
                .collect();
            let b_data: Vec<f64> = (0..r * d_out)
                .map(|_| rng.range(-b_bound, b_bound))
                .collect();
            modules.push(LoraModule::new(
                Mat::from_vec(d_in, r, a_data)?,
                Mat::from_vec(r, d_out, b_data)?,
            )?);
        }
        LoraBank::new(modules)
    }

    fn caches(&self) -> &BankCaches {
        self.caches.get_or_init(|| build_caches(&self.modules))
    }

    /// Replace one expert; the caches rebuild eagerly so the consistency
    /// invariant holds immediately after any edit.
    pub fn replace_module(&mut self, i: usize, m: LoraModule) -> Result<()> {
        if i >= self.n() {
            return Err(Error::InvalidArg(format!("expert index {i} out of range")));
        }
        if m.d_in() != self.d_in() || m.d_out() != self.d_out() {
            return Err(Error::ShapeMismatch {
                op: "LoraBank::replace_module",
                expected: format!("{}x{}", self.d_in(), self.d_out()),
                got: format!("{}x{}", m.d_in(), m.d_out()),
            });
        }
        self.modules[i] = m;
        self.caches = std::sync::OnceLock::new();
        let _ = self.caches();
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.modules.len()
    }

    pub fn d_in(&self) -> usize {
        self.modules[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.modules[0].d_out()
    }

    pub fn module(&self, i: usize) -> &LoraModule {
        &self.modules[i]
    }

    pub fn modules(&self) -> &[LoraModule] {
        &self.modules
    }

    /// Cached `P_i = A_i B_i`.
    pub fn composed(&self, i: usize) -> &Mat {
        &self.caches().composed[i]
    }

    /// Cached sum of all composed products.
    pub fn total_sum(&self) -> &Mat {
        &self.caches().total
    }

    /// `Q_i = sum_{j != i} P_j`, cached as `total - P_i`.
    pub fn ref_sum(&self, i: usize) -> Result<&Mat> {
        self.caches()
            .ref_sums
            .get(i)
            .ok_or_else(|| Error::InvalidArg(format!("expert index {i} out of range")))
    }

    /// Per-expert outputs `v_i = x P_i`, computed through the low-rank
    /// factors (`x A_i` then `(x A_i) B_i`).
    pub fn expert_outputs(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        (0..self.n()).map(|i| self.expert_output(i, x)).collect()
    }

    /// Single expert output via the low-rank two-step path.
    pub fn expert_output(&self, i: usize, x: &[f64]) -> Result<Vec<f64>> {
        let m = &self.modules[i];
        let xa = vec_mat(x, m.a())?;
        vec_mat(&xa, m.b())
    }

    /// `x Q_i` computed from cached per-expert outputs, as
    /// `(sum_j v_j) - v_i`; additions only.
    pub fn reference_output(v_all: &[Vec<f64>], v_total: &[f64], i: usize) -> Vec<f64> {
        vec_sub(v_total, &v_all[i])
    }
}
