//! Minimal deterministic dense linear algebra, random generation, and small
//! reduction utilities. Everything is `f64`, row-major, with left-to-right
//! accumulation so results are bitwise reproducible across runs and platforms.

use crate::error::{Error, Result};

/// Norm guard used wherever a vector may be exactly zero.
pub const EPS_NORM: f64 = 1e-12;

// ── Matrix ────────────────────────────────────────────────────────────────

/// Dense row-major matrix of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Mat {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from a row-major flat slice. Rejects length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Mat> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArg(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "Mat::from_vec",
                expected: format!("{} entries", rows * cols),
                got: format!("{}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Mat::from_vec".into()));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Mat> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArg("ragged rows in Mat::from_rows".into()));
        }
        Mat::from_vec(r, c, rows.into_iter().flatten().collect())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "Mat::add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "Mat::sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn zip_with(&self, other: &Mat, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op,
                expected: format!("{}x{}", self.rows, self.cols),
                got: format!("{}x{}", other.rows, other.cols),
            });
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

/// Standard matrix product with deterministic left-to-right accumulation.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            expected: format!("inner dim {}", a.cols),
            got: format!("{}", b.rows),
        });
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// Row vector times matrix: `x (1xd) * m (dxc) -> (1xc)`.
pub fn vec_mat(x: &[f64], m: &Mat) -> Result<Vec<f64>> {
    if x.len() != m.rows {
        return Err(Error::ShapeMismatch {
            op: "vec_mat",
            expected: format!("vector of length {}", m.rows),
            got: format!("{}", x.len()),
        });
    }
    let mut out = vec![0.0; m.cols];
    for (k, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let row = m.row(k);
        for (o, &mv) in out.iter_mut().zip(row) {
            *o += xv * mv;
        }
    }
    Ok(out)
}

// ── Vector operations ─────────────────────────────────────────────────────

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Element-wise product.
pub fn hadamard(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "hadamard",
            expected: format!("length {}", a.len()),
            got: format!("{}", b.len()),
        });
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| x * y).collect())
}

/// Temperature softmax with max-subtraction for stability.
pub fn softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArg(format!("softmax temperature {tau} <= 0")));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `v / max(||v||_2, eps)`; the zero vector maps to itself.
pub fn l2_normalize(v: &[f64], eps: f64) -> Vec<f64> {
    debug_assert!(eps > 0.0);
    let n = norm2(v).max(eps);
    v.iter().map(|&x| x / n).collect()
}

pub fn vec_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub fn vec_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn vec_scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|&x| x * s).collect()
}

/// `acc += s * v`, in place.
pub fn axpy(acc: &mut [f64], s: f64, v: &[f64]) {
    debug_assert_eq!(acc.len(), v.len());
    for (a, &x) in acc.iter_mut().zip(v) {
        *a += s * x;
    }
}

// ── Deterministic RNG ─────────────────────────────────────────────────────

/// SplitMix64 generator: 64-bit counter advanced by a fixed odd constant,
/// output is a bijective mix of the counter. Identical seeds give identical
/// streams on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    state: u64,
}

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix_hash(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng { seed, state: seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Raw generator state, exposed for checkpointing.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn restore(seed: u64, state: u64) -> Rng {
        Rng { seed, state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(SPLITMIX_GAMMA);
        splitmix_hash(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller (two uniforms per draw).
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1], keeps ln finite
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    /// Uniform draw from the (n-1)-simplex: normalized Exp(1) variates,
    /// which is the flat Dirichlet.
    pub fn simplex(&mut self, n: usize) -> Vec<f64> {
        let e: Vec<f64> = (0..n).map(|_| -(1.0 - self.uniform()).ln()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Independent child stream; `tag` separates streams drawn from one parent.
    pub fn derive(&self, tag: u64) -> Rng {
        Rng::new(splitmix_hash(self.seed ^ splitmix_hash(tag)))
    }
}

/// Stable mixing of run coordinates into a derived seed. Used by sweeps so
/// every row of a multi-run artifact is reproducible in isolation.
pub fn derive_seed(base: u64, words: &[u64]) -> u64 {
    let mut acc = splitmix_hash(base);
    for &w in words {
        acc = splitmix_hash(acc ^ w.wrapping_mul(SPLITMIX_GAMMA));
    }
    base ^ acc
}

// ── MAC counter ───────────────────────────────────────────────────────────

/// Multiply-accumulate counter threaded through the forward path.
///
/// Convention: one MAC = one FLOP; additions that belong to an accumulation
/// are not double-counted; pure additions/subtractions, comparisons, and
/// transcendental evaluations (exp, cos, sin, sqrt) count zero.
#[derive(Clone, Debug, Default)]
pub struct MacCounter {
    macs: u64,
}

impl MacCounter {
    pub fn new() -> MacCounter {
        MacCounter::default()
    }

    pub fn total(&self) -> u64 {
        self.macs
    }

    pub fn add(&mut self, n: u64) {
        self.macs += n;
    }

    /// `(m x k) * (k x n)` product.
    pub fn record_matmul(&mut self, m: usize, k: usize, n: usize) {
        self.macs += (m * k * n) as u64;
    }

    /// Row vector times matrix.
    pub fn record_vec_mat(&mut self, rows: usize, cols: usize) {
        self.macs += (rows * cols) as u64;
    }

    pub fn record_hadamard(&mut self, len: usize) {
        self.macs += len as u64;
    }

    /// Element-wise pairwise rotation: two multiplies per output element.
    pub fn record_rotation(&mut self, d_out: usize) {
        self.macs += 2 * d_out as u64;
    }

    /// One scaled vector accumulation (`acc += g * v`).
    pub fn record_axpy(&mut self, len: usize) {
        self.macs += len as u64;
    }

    /// L2 normalization: one square per entry plus one scale per entry.
    pub fn record_normalize(&mut self, len: usize) {
        self.macs += 2 * len as u64;
    }
}

// ── Jacobi eigendecomposition and PCA ─────────────────────────────────────

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns (eigenvalues, eigenvectors as columns), sorted descending.
pub fn jacobi_eigen(a: &Mat) -> Result<(Vec<f64>, Mat)> {
    if a.rows != a.cols {
        return Err(Error::ShapeMismatch {
            op: "jacobi_eigen",
            expected: "square matrix".into(),
            got: format!("{}x{}", a.rows, a.cols),
        });
    }
    let n = a.rows;
    let mut m = a.clone();
    let mut v = Mat::identity(n);
    let scale = m.max_abs().max(1e-300);
    let tol = 1e-14 * scale;

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(m.get(p, q).abs());
            }
        }
        if off < tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() < tol * 1e-2 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = 0.5 * (aqq - app) / apq;
                // stable tangent of the rotation angle
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m.get(i, p);
                    let miq = m.get(i, q);
                    m.set(i, p, c * mip - s * miq);
                    m.set(i, q, s * mip + c * miq);
                }
                for j in 0..n {
                    let mpj = m.get(p, j);
                    let mqj = m.get(q, j);
                    m.set(p, j, c * mpj - s * mqj);
                    m.set(q, j, s * mpj + c * mqj);
                }
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());
    let eigvals: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut eigvecs = Mat::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for i in 0..n {
            eigvecs.set(i, new_col, v.get(i, old_col));
        }
    }
    Ok((eigvals, eigvecs))
}

/// Project points onto their top-2 principal components.
///
/// Sign convention: each component's largest-magnitude loading is positive.
/// An all-identical point set degenerates to both coordinates zero.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    if points.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "pca_2d needs >= 2 points, got {}",
            points.len()
        )));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::InvalidArg("pca_2d points have unequal dims".into()));
    }
    let n = points.len() as f64;
    let mut mean = vec![0.0; d];
    for p in points {
        axpy(&mut mean, 1.0 / n, p);
    }
    let centered: Vec<Vec<f64>> = points.iter().map(|p| vec_sub(p, &mean)).collect();

    let mut cov = Mat::zeros(d, d);
    for p in &centered {
        for i in 0..d {
            for j in 0..d {
                let v = cov.get(i, j) + p[i] * p[j] / n;
                cov.set(i, j, v);
            }
        }
    }
    if cov.max_abs() < 1e-300 {
        return Ok(vec![(0.0, 0.0); points.len()]);
    }

    let (_vals, vecs) = jacobi_eigen(&cov)?;
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(2);
    for c in 0..2.min(d) {
        let mut axis: Vec<f64> = (0..d).map(|i| vecs.get(i, c)).collect();
        let lead = axis
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if axis[lead] < 0.0 {
            axis = vec_scale(&axis, -1.0);
        }
        axes.push(axis);
    }

    Ok(centered
        .iter()
        .map(|p| {
            let a = dot(p, &axes[0]);
            let b = if axes.len() > 1 {
                dot(p, &axes[1])
            } else {
                0.0
            };
            (a, b)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    // the proptest prelude also exports a `Rng` trait; ours wins by name
    use super::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_zero() {
        let m = Mat::from_rows(vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let i2 = Mat::identity(2);
        assert_eq!(matmul(&i2, &m).unwrap(), m);
        let z = Mat::zeros(2, 3);
        let m34 = Mat::from_vec(3, 4, (0..12).map(|v| v as f64).collect()).unwrap();
        let prod = matmul(&z, &m34).unwrap();
        assert!(prod.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_hand_expansion() {
        // [[1,2],[3,4]] x [[5],[6]] = [[17],[39]]
        let a = Mat::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Mat::from_rows(vec![vec![5.0], vec![6.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Mat::zeros(2, 3);
        let b = Mat::zeros(2, 3);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn hadamard_cases() {
        let a = vec![1.0, 2.0, 3.0];
        assert_eq!(hadamard(&a, &[1.0, 1.0, 1.0]).unwrap(), a);
        assert_eq!(hadamard(&a, &[0.0; 3]).unwrap(), vec![0.0; 3]);
        assert_eq!(
            hadamard(&a, &[4.0, 5.0, 6.0]).unwrap(),
            vec![4.0, 10.0, 18.0]
        );
        assert!(hadamard(&a, &[1.0]).is_err());
    }

    #[test]
    fn softmax_uniform_and_ratio() {
        let s = softmax(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for &p in &s {
            assert!(close(p, 1.0 / 3.0, 1e-15));
        }
        let s = softmax(&[7.5; 5], 0.37).unwrap();
        for &p in &s {
            assert!(close(p, 0.2, 1e-15));
        }
        // closed form: softmax([ln 2, 0]) = [2/3, 1/3]
        let s = softmax(&[2.0f64.ln(), 0.0], 1.0).unwrap();
        assert!(close(s[0], 2.0 / 3.0, 1e-15));
        assert!(close(s[1], 1.0 / 3.0, 1e-15));
        assert!(softmax(&[0.0], 0.0).is_err());
        assert!(softmax(&[0.0], -1.0).is_err());
    }

    #[test]
    fn l2_normalize_cases() {
        let v = l2_normalize(&[3.0, 4.0], EPS_NORM);
        assert!(close(v[0], 0.6, 1e-15) && close(v[1], 0.8, 1e-15));
        let u = l2_normalize(&v, EPS_NORM);
        assert!(close(u[0], v[0], 1e-15) && close(u[1], v[1], 1e-15));
        let z = l2_normalize(&[0.0, 0.0, 0.0], EPS_NORM);
        assert!(z.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rng_reproducible_and_distinct() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(8);
        assert_ne!(a.next_u64(), c.next_u64());
    }

    #[test]
    fn simplex_draws_sum_to_one() {
        let mut rng = Rng::new(11);
        for n in 1..6 {
            let g = rng.simplex(n);
            assert_eq!(g.len(), n);
            assert!(g.iter().all(|&x| x >= 0.0));
            assert!(close(g.iter().sum::<f64>(), 1.0, 1e-12));
        }
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // diag(5, 2, 1) conjugated by a rotation has the same eigenvalues
        let a = Mat::from_rows(vec![
            vec![3.5, -1.5, 0.0],
            vec![-1.5, 3.5, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let (vals, vecs) = jacobi_eigen(&a).unwrap();
        assert!(close(vals[0], 5.0, 1e-10));
        assert!(close(vals[1], 2.0, 1e-10));
        assert!(close(vals[2], 1.0, 1e-10));
        // columns are orthonormal
        for i in 0..3 {
            let col: Vec<f64> = (0..3).map(|r| vecs.get(r, i)).collect();
            assert!(close(norm2(&col), 1.0, 1e-10));
        }
    }

    #[test]
    fn pca_preserves_2d_distances() {
        let mut rng = Rng::new(3);
        let pts: Vec<Vec<f64>> = (0..6).map(|_| rng.gaussian_vec(2)).collect();
        let proj = pca_2d(&pts).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d_orig = norm2(&vec_sub(&pts[i], &pts[j]));
                let dx = proj[i].0 - proj[j].0;
                let dy = proj[i].1 - proj[j].1;
                assert!(close(d_orig, (dx * dx + dy * dy).sqrt(), 1e-9));
            }
        }
    }

    #[test]
    fn pca_collinear_second_axis_zero() {
        let dir = [1.0, -2.0, 0.5];
        let pts: Vec<Vec<f64>> = (0..5)
            .map(|i| dir.iter().map(|&d| d * i as f64).collect())
            .collect();
        let proj = pca_2d(&pts).unwrap();
        for (_, second) in proj {
            assert!(second.abs() < 1e-9);
        }
    }

    #[test]
    fn pca_reconstruction_error_is_trailing_eigenvalue_mass() {
        let mut rng = Rng::new(42);
        let pts: Vec<Vec<f64>> = (0..5).map(|_| rng.gaussian_vec(8)).collect();
        let proj = pca_2d(&pts).unwrap();
        // mean squared norm of centered points minus mean squared norm of
        // projections equals the sum of eigenvalues 3..d
        let n = pts.len() as f64;
        let d = 8;
        let mut mean = vec![0.0; d];
        for p in &pts {
            axpy(&mut mean, 1.0 / n, p);
        }
        let mut total = 0.0;
        let mut kept = 0.0;
        let mut cov = Mat::zeros(d, d);
        for (p, pr) in pts.iter().zip(&proj) {
            let c = vec_sub(p, &mean);
            total += dot(&c, &c) / n;
            kept += (pr.0 * pr.0 + pr.1 * pr.1) / n;
            for i in 0..d {
                for j in 0..d {
                    let v = cov.get(i, j) + c[i] * c[j] / n;
                    cov.set(i, j, v);
                }
            }
        }
        let (vals, _) = jacobi_eigen(&cov).unwrap();
        let trailing: f64 = vals[2..].iter().sum();
        assert!(close(total - kept, trailing, 1e-9));
    }

    #[test]
    fn pca_identical_points_degenerate_to_zero() {
        let pts = vec![vec![1.0, 2.0, 3.0]; 4];
        let proj = pca_2d(&pts).unwrap();
        assert!(proj.iter().all(|&(a, b)| a == 0.0 && b == 0.0));
    }

    #[test]
    fn derive_seed_is_order_sensitive() {
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_eq!(derive_seed(9, &[4, 5]), derive_seed(9, &[4, 5]));
    }

    proptest! {
        #[test]
        fn matmul_associativity(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let a = Mat::from_vec(3, 4, rng.gaussian_vec(12)).unwrap();
            let b = Mat::from_vec(4, 2, rng.gaussian_vec(8)).unwrap();
            let c = Mat::from_vec(2, 5, rng.gaussian_vec(10)).unwrap();
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.max_abs().max(1.0);
            let diff = left.sub(&right).unwrap().max_abs();
            prop_assert!(diff < 1e-9 * scale);
        }

        #[test]
        fn softmax_simplex_and_shift_invariance(seed in 0u64..500, shift in -50.0f64..50.0) {
            let mut rng = Rng::new(seed);
            let logits = rng.gaussian_vec(6);
            let tau = rng.range(0.1, 5.0);
            let p = softmax(&logits, tau).unwrap();
            prop_assert!(p.iter().all(|&x| x > 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|&v| v + shift).collect();
            let q = softmax(&shifted, tau).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn l2_normalize_unit_or_zero(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let v = rng.gaussian_vec(5);
            let n = norm2(&l2_normalize(&v, EPS_NORM));
            prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
        }
    }
}
