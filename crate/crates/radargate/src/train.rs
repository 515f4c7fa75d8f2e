//! Desk-scale optimization harness: synthetic task generators whose cone
//! geometry is certified by the projection oracle, SGD/Adam over the gate
//! parameters only (bank and base stay frozen), and deterministic training
//! runs that record loss curves, gradient norms, and angular diagnostics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gates::{RotationParams, StretchMode, StretchParams};
use crate::geometry::cone_project;
use crate::grads::{backward, frob, GateGrads, RotationGrads, StretchGradMode};
use crate::layer::{angular_similarity, ForwardTrace, GateMode, RadarLayer};
use crate::lora::{FrozenBase, LoraBank};
use crate::numkernel::{axpy, derive_seed, vec_scale, vec_sub, Mat, Rng};

const CONE_TOL: f64 = 1e-10;
const CONE_ITERS: usize = 100_000;

/// What kind of synthetic targets a task holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TaskKind {
    InCone,
    OutOfCone,
    MultiTaskMix,
}

/// A generated dataset plus the oracle-certified cone geometry per sample.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    /// Inputs, one row per sample.
    pub x: Mat,
    /// Targets, one row per sample.
    pub y: Mat,
    /// Distance from each target (minus the base output) to the un-rotated
    /// hull of that sample's expert outputs.
    pub cone_meta: Vec<f64>,
    /// Cluster index per sample; empty unless `MultiTaskMix`.
    pub cluster_id: Vec<usize>,
}

impl SyntheticTask {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean of the squared certified base distances: the stretch-only
    /// training floor for this task.
    pub fn mean_sq_base_distance(&self) -> f64 {
        self.cone_meta.iter().map(|d| d * d).sum::<f64>() / self.len().max(1) as f64
    }
}

/// Targets built as simplex mixtures of the expert outputs, optionally
/// perturbed by isotropic noise.
pub fn make_in_cone_task(
    rng: &mut Rng,
    base: &FrozenBase,
    bank: &LoraBank,
    n_samples: usize,
    noise: f64,
) -> Result<SyntheticTask> {
    if noise < 0.0 {
        return Err(Error::InvalidArg(format!(
            "noise must be >= 0, got {noise}"
        )));
    }
    let (d_in, d_out) = (bank.d_in(), bank.d_out());
    let mut xs = Vec::with_capacity(n_samples * d_in);
    let mut ys = Vec::with_capacity(n_samples * d_out);
    let mut meta = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x = rng.gaussian_vec(d_in);
        let v = bank.expert_outputs(&x)?;
        let g_star = rng.simplex(bank.n());
        let mut delta = vec![0.0; d_out];
        for (gi, vi) in g_star.iter().zip(&v) {
            axpy(&mut delta, *gi, vi);
        }
        if noise > 0.0 {
            let e = rng.gaussian_vec(d_out);
            axpy(&mut delta, noise, &e);
        }
        let target: Vec<f64> = base
            .apply(&x)?
            .iter()
            .zip(&delta)
            .map(|(a, b)| a + b)
            .collect();
        meta.push(cone_project(&delta, &v, CONE_TOL, CONE_ITERS)?.distance);
        xs.extend_from_slice(&x);
        ys.extend_from_slice(&target);
    }
    Ok(SyntheticTask {
        kind: TaskKind::InCone,
        x: Mat::from_vec(n_samples, d_in, xs)?,
        y: Mat::from_vec(n_samples, d_out, ys)?,
        cone_meta: meta,
        cluster_id: Vec::new(),
    })
}

/// A direction orthogonal to the affine span of the given points, or `None`
/// when the span already fills the space.
fn orthogonal_complement_direction(rng: &mut Rng, points: &[Vec<f64>]) -> Option<Vec<f64>> {
    let d = points[0].len();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for p in &points[1..] {
        let mut w = vec_sub(p, &points[0]);
        for b in &basis {
            let c = crate::numkernel::dot(&w, b);
            axpy(&mut w, -c, b);
        }
        let n = crate::numkernel::norm2(&w);
        if n > 1e-10 {
            basis.push(vec_scale(&w, 1.0 / n));
        }
    }
    if basis.len() >= d {
        return None;
    }
    for _ in 0..32 {
        let mut w = rng.gaussian_vec(d);
        for b in &basis {
            let c = crate::numkernel::dot(&w, b);
            axpy(&mut w, -c, b);
        }
        let n = crate::numkernel::norm2(&w);
        if n > 1e-6 {
            return Some(vec_scale(&w, 1.0 / n));
        }
    }
    None
}

/// Targets placed a certified `margin` outside each sample's hull: a random
/// hull point pushed along a direction orthogonal to the hull's affine span,
/// or along an exterior normal when the span is full-dimensional. Every
/// sample's distance is re-verified with the projection oracle.
pub fn make_out_of_cone_task(
    rng: &mut Rng,
    base: &FrozenBase,
    bank: &LoraBank,
    n_samples: usize,
    margin: f64,
) -> Result<SyntheticTask> {
    if !(margin > 0.0) {
        return Err(Error::InvalidArg(format!(
            "margin must be > 0, got {margin}"
        )));
    }
    let (d_in, d_out) = (bank.d_in(), bank.d_out());
    let mut xs = Vec::with_capacity(n_samples * d_in);
    let mut ys = Vec::with_capacity(n_samples * d_out);
    let mut meta = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut placed = false;
        for _attempt in 0..100 {
            let x = rng.gaussian_vec(d_in);
            let v = bank.expert_outputs(&x)?;
            let g0 = rng.simplex(bank.n());
            let mut p0 = vec![0.0; d_out];
            for (gi, vi) in g0.iter().zip(&v) {
                axpy(&mut p0, *gi, vi);
            }
            let delta = match orthogonal_complement_direction(rng, &v) {
                Some(u_hat) => {
                    let mut t = p0.clone();
                    axpy(&mut t, margin, &u_hat);
                    t
                }
                None => {
                    // full-dimensional hull: push out along the normal at the
                    // projection of a random exterior draw
                    let mut e = p0.clone();
                    let bump = rng.gaussian_vec(d_out);
                    axpy(&mut e, 1.0 + margin, &bump);
                    let proj = cone_project(&e, &v, CONE_TOL, CONE_ITERS)?;
                    if proj.distance <= 1e-9 {
                        continue;
                    }
                    let u_hat = vec_scale(&vec_sub(&e, &proj.point), 1.0 / proj.distance);
                    let mut t = proj.point.clone();
                    axpy(&mut t, margin, &u_hat);
                    t
                }
            };
            let check = cone_project(&delta, &v, CONE_TOL, CONE_ITERS)?;
            if check.distance < margin * (1.0 - 1e-6) {
                continue;
            }
            let target: Vec<f64> = base
                .apply(&x)?
                .iter()
                .zip(&delta)
                .map(|(a, b)| a + b)
                .collect();
            xs.extend_from_slice(&x);
            ys.extend_from_slice(&target);
            meta.push(check.distance);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Unstable(format!(
                "could not place a target {margin} outside the hull in 100 attempts"
            )));
        }
    }
    Ok(SyntheticTask {
        kind: TaskKind::OutOfCone,
        x: Mat::from_vec(n_samples, d_in, xs)?,
        y: Mat::from_vec(n_samples, d_out, ys)?,
        cone_meta: meta,
        cluster_id: Vec::new(),
    })
}

/// Contiguous balanced partition of `n` experts into `clusters` groups.
pub fn cluster_partition(n: usize, clusters: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(clusters);
    let mut start = 0;
    for c in 0..clusters {
        let size = n / clusters + usize::from(c < n % clusters);
        out.push((start..start + size).collect());
        start += size;
    }
    out
}

/// Each sample's target is a simplex mixture of ONE cluster's experts, so the
/// gate has to route. Cluster ids are recorded per sample.
pub fn make_multitask_mix(
    rng: &mut Rng,
    base: &FrozenBase,
    bank: &LoraBank,
    clusters: usize,
    n_samples: usize,
) -> Result<SyntheticTask> {
    let n = bank.n();
    if clusters == 0 || clusters > n {
        return Err(Error::InvalidArg(format!(
            "clusters={clusters} outside [1, n={n}]"
        )));
    }
    let parts = cluster_partition(n, clusters);
    let (d_in, d_out) = (bank.d_in(), bank.d_out());
    let mut xs = Vec::with_capacity(n_samples * d_in);
    let mut ys = Vec::with_capacity(n_samples * d_out);
    let mut meta = Vec::with_capacity(n_samples);
    let mut ids = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let c = rng.below(clusters);
        let members = &parts[c];
        let x = rng.gaussian_vec(d_in);
        let v = bank.expert_outputs(&x)?;
        let w = rng.simplex(members.len());
        let mut delta = vec![0.0; d_out];
        for (wi, &i) in w.iter().zip(members) {
            axpy(&mut delta, *wi, &v[i]);
        }
        let target: Vec<f64> = base
            .apply(&x)?
            .iter()
            .zip(&delta)
            .map(|(a, b)| a + b)
            .collect();
        meta.push(cone_project(&delta, &v, CONE_TOL, CONE_ITERS)?.distance);
        xs.extend_from_slice(&x);
        ys.extend_from_slice(&target);
        ids.push(c);
    }
    Ok(SyntheticTask {
        kind: TaskKind::MultiTaskMix,
        x: Mat::from_vec(n_samples, d_in, xs)?,
        y: Mat::from_vec(n_samples, d_out, ys)?,
        cone_meta: meta,
        cluster_id: ids,
    })
}

// ── Optimizers ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Algorithm {
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamSlot {
    fn update(&mut self, param: &mut [f64], grad: &[f64], lr: f64, t: usize) {
        if self.m.is_empty() {
            self.m = vec![0.0; param.len()];
            self.v = vec![0.0; param.len()];
        }
        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
        for i in 0..param.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Optimizer state over the gate parameters.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub t: usize,
    slot_s: AdamSlot,
    slot_r: AdamSlot,
    slot_r2: AdamSlot,
}

impl OptimState {
    pub fn new(algorithm: Algorithm, lr: f64) -> OptimState {
        OptimState {
            algorithm,
            lr,
            t: 0,
            slot_s: AdamSlot::default(),
            slot_r: AdamSlot::default(),
            slot_r2: AdamSlot::default(),
        }
    }

    fn apply(&mut self, which: usize, param: &mut [f64], grad: &[f64]) {
        match self.algorithm {
            Algorithm::Sgd => {
                for (p, &g) in param.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            Algorithm::Adam => {
                let slot = match which {
                    0 => &mut self.slot_s,
                    1 => &mut self.slot_r,
                    _ => &mut self.slot_r2,
                };
                slot.update(param, grad, self.lr, self.t);
            }
        }
    }
}

/// Mean gradient over a batch and one optimizer update of the gate
/// parameters. Returns the mean batch loss.
pub fn step(
    layer: &mut RadarLayer,
    opt: &mut OptimState,
    batch_x: &[&[f64]],
    batch_y: &[&[f64]],
) -> Result<f64> {
    if batch_x.is_empty() || batch_x.len() != batch_y.len() {
        return Err(Error::InvalidArg(
            "batch must be nonempty and aligned".into(),
        ));
    }
    if layer.mode == GateMode::BaseOnly {
        return Err(Error::InvalidArg(
            "base-only layers have no trainable gate parameters".into(),
        ));
    }
    let scale = 1.0 / batch_x.len() as f64;
    let mut loss = 0.0;
    let mut acc: Option<GateGrads> = None;
    for (x, y) in batch_x.iter().zip(batch_y) {
        let trace = layer.forward(x)?;
        loss += crate::grads::loss_mse(&trace.y, y)? * scale;
        let g = backward(layer, &trace, y, StretchGradMode::ExactMasked)?;
        acc = Some(match acc {
            None => g,
            Some(a) => accumulate(a, g)?,
        });
    }
    let grads = acc.expect("nonempty batch");

    if !loss.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    if let Some(ds) = &grads.d_theta_s {
        if !ds.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("stretch gradient".into()));
        }
    }

    opt.t += 1;
    if let Some(ds) = &grads.d_theta_s {
        let scaled: Vec<f64> = ds.data().iter().map(|g| g * scale).collect();
        opt.apply(0, layer.stretch.theta_s.data_mut(), &scaled);
    }
    match &grads.d_rotation {
        Some(RotationGrads::Full(dr)) => {
            let scaled: Vec<f64> = dr.data().iter().map(|g| g * scale).collect();
            if !scaled.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("rotation gradient".into()));
            }
            if let RotationParams::Full(m) = &mut layer.rotation {
                opt.apply(1, m.data_mut(), &scaled);
            }
        }
        Some(RotationGrads::Factorized { d_u, d_v }) => {
            let su: Vec<f64> = d_u.data().iter().map(|g| g * scale).collect();
            let sv: Vec<f64> = d_v.data().iter().map(|g| g * scale).collect();
            if !su.iter().all(|v| v.is_finite()) || !sv.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("rotation gradient".into()));
            }
            if let RotationParams::Factorized { u, v } = &mut layer.rotation {
                opt.apply(1, u.data_mut(), &su);
                opt.apply(2, v.data_mut(), &sv);
            }
        }
        None => {}
    }
    Ok(loss)
}

fn accumulate(mut a: GateGrads, b: GateGrads) -> Result<GateGrads> {
    a.d_theta_s = match (a.d_theta_s, b.d_theta_s) {
        (Some(x), Some(y)) => Some(x.add(&y)?),
        (x, None) => x,
        (None, y) => y,
    };
    a.d_rotation = match (a.d_rotation, b.d_rotation) {
        (Some(RotationGrads::Full(x)), Some(RotationGrads::Full(y))) => {
            Some(RotationGrads::Full(x.add(&y)?))
        }
        (
            Some(RotationGrads::Factorized { d_u: xu, d_v: xv }),
            Some(RotationGrads::Factorized { d_u: yu, d_v: yv }),
        ) => Some(RotationGrads::Factorized {
            d_u: xu.add(&yu)?,
            d_v: xv.add(&yv)?,
        }),
        (x, None) => x,
        (None, y) => y,
        _ => return Err(Error::InvalidArg("mixed rotation gradient kinds".into())),
    };
    Ok(a)
}

// ── Training runs ─────────────────────────────────────────────────────────

/// Everything one run needs; the snapshot is serialized into run artifacts.
#[derive(Clone, Debug, Serialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub n: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub r: usize,
    pub r_a: usize,
    pub theta_r_factorized: bool,
    pub k: usize,
    pub tau: f64,
    #[serde(serialize_with = "ser_mode")]
    pub mode: GateMode,
    #[serde(serialize_with = "ser_variant")]
    pub gate_variant: StretchMode,
    pub task: TaskKind,
    pub task_size: usize,
    pub margin: f64,
    pub noise: f64,
    pub clusters: usize,
    pub algorithm: Algorithm,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub eval_every: usize,
    /// The optimizer family is assumed, not quoted from anywhere; flagged in
    /// every run artifact.
    pub optimizer_assumed: bool,
}

fn ser_mode<S: serde::Serializer>(m: &GateMode, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(m.as_str())
}

fn ser_variant<S: serde::Serializer>(
    m: &StretchMode,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(match m {
        StretchMode::InputProj => "input_proj",
        StretchMode::ConcatProj => "concat_proj",
    })
}

impl TrainConfig {
    pub fn defaults(seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            n: 4,
            d_in: 8,
            d_out: 8,
            r: 2,
            r_a: 4,
            theta_r_factorized: false,
            k: 4,
            tau: 1.0,
            mode: GateMode::Radar,
            gate_variant: StretchMode::ConcatProj,
            task: TaskKind::OutOfCone,
            task_size: 16,
            margin: 0.1,
            noise: 0.0,
            clusters: 4,
            algorithm: Algorithm::Adam,
            lr: 1e-2,
            batch: 4,
            steps: 2000,
            eval_every: 100,
            optimizer_assumed: true,
        }
    }
}

/// One metric row; rows are appended at step 0, every `eval_every` steps,
/// and at the final step.
#[derive(Clone, Debug, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    /// MSE over the whole training set.
    pub train_mse: f64,
    pub grad_norm_s: f64,
    pub grad_norm_r: f64,
    /// `train_mse - mean(base_distance^2)`: how far above the stretch-only
    /// floor the run currently sits.
    pub cone_gap: f64,
}

/// Everything a finished run reports.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config: TrainConfig,
    /// Per-step mean batch loss.
    pub step_loss: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub floor: f64,
    pub final_angular_cos: Mat,
    pub final_angular_absdiff: Mat,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn final_train_mse(&self) -> f64 {
        self.evals.last().map(|e| e.train_mse).unwrap_or(f64::NAN)
    }
}

/// Derived seeds, documented so every artifact row reproduces in isolation:
/// the task (bank, base, data) comes from `derive_seed(seed, [0x7A5C, n, rep])`
/// — deliberately mode-independent so ablation modes compare on identical
/// tasks — and gate initialization from the same stream; the batch-shuffle
/// stream folds the mode in via `run_seed`.
pub fn task_seed(base_seed: u64, n: usize, rep: usize) -> u64 {
    derive_seed(base_seed, &[0x7A5C, n as u64, rep as u64])
}

/// Per-(n, mode, repetition) run seed recorded in sweep artifacts.
pub fn run_seed(base_seed: u64, n: usize, mode_index: usize, rep: usize) -> u64 {
    derive_seed(
        base_seed,
        &[0x5EED, n as u64, mode_index as u64, rep as u64],
    )
}

fn mode_index(mode: GateMode) -> usize {
    match mode {
        GateMode::Radar => 0,
        GateMode::StretchOnly => 1,
        GateMode::RotationOnly => 2,
        GateMode::BaseOnly => 3,
    }
}

/// Build the frozen pieces (bank, base, task) and the initial gate
/// parameters for a config. Theta_r starts at zero so a radar run's step-0
/// hypothesis is exactly the stretch-only one; theta_s starts small uniform.
pub fn build_experiment(cfg: &TrainConfig, rep: usize) -> Result<(RadarLayer, SyntheticTask)> {
    let tseed = task_seed(cfg.seed, cfg.n, rep);
    let mut rng = Rng::new(tseed);
    let bank = LoraBank::random(&mut rng, cfg.n, cfg.d_in, cfg.d_out, cfg.r, 1.0, 1.0)?;
    let w = Mat::from_vec(
        cfg.d_in,
        cfg.d_out,
        (0..cfg.d_in * cfg.d_out)
            .map(|_| rng.gaussian() / (cfg.d_in as f64).sqrt())
            .collect(),
    )?;
    let base = FrozenBase::new(w);

    let mut task_rng = rng.derive(1);
    let task = match cfg.task {
        TaskKind::InCone => {
            make_in_cone_task(&mut task_rng, &base, &bank, cfg.task_size, cfg.noise)?
        }
        TaskKind::OutOfCone => {
            make_out_of_cone_task(&mut task_rng, &base, &bank, cfg.task_size, cfg.margin)?
        }
        TaskKind::MultiTaskMix => {
            make_multitask_mix(&mut task_rng, &base, &bank, cfg.clusters, cfg.task_size)?
        }
    };

    let mut init_rng = rng.derive(2);
    let srows = match cfg.gate_variant {
        StretchMode::InputProj => cfg.d_in,
        StretchMode::ConcatProj => cfg.n * cfg.d_out,
    };
    let theta_s = Mat::from_vec(
        srows,
        cfg.n,
        (0..srows * cfg.n)
            .map(|_| init_rng.range(-1e-2, 1e-2))
            .collect(),
    )?;
    let rotation = if cfg.theta_r_factorized {
        RotationParams::zeros_factorized(cfg.d_out, cfg.r_a)
    } else {
        RotationParams::zeros_full(cfg.d_out)
    };
    let layer = RadarLayer::new(
        base,
        bank,
        StretchParams::new(theta_s, cfg.gate_variant, cfg.tau, cfg.k)?,
        rotation,
        cfg.mode,
    )?;
    Ok((layer, task))
}

fn eval_point(
    layer: &RadarLayer,
    task: &SyntheticTask,
    step_no: usize,
    floor: f64,
) -> Result<EvalPoint> {
    let mut mse = 0.0;
    let mut acc: Option<GateGrads> = None;
    let rows = task.len();
    for i in 0..rows {
        let trace: ForwardTrace = layer.forward(task.x.row(i))?;
        mse += crate::grads::loss_mse(&trace.y, task.y.row(i))? / rows as f64;
        if layer.mode != GateMode::BaseOnly {
            let g = backward(layer, &trace, task.y.row(i), StretchGradMode::ExactMasked)?;
            acc = Some(match acc {
                None => g,
                Some(a) => accumulate(a, g)?,
            });
        }
    }
    let (gs, gr) = match &acc {
        Some(g) => (
            g.d_theta_s
                .as_ref()
                .map(|m| frob(m) / rows as f64)
                .unwrap_or(0.0),
            g.d_rotation
                .as_ref()
                .map(|r| r.frob_norm() / rows as f64)
                .unwrap_or(0.0),
        ),
        None => (0.0, 0.0),
    };
    Ok(EvalPoint {
        step: step_no,
        train_mse: mse,
        grad_norm_s: gs,
        grad_norm_r: gr,
        cone_gap: mse - floor,
    })
}

/// Fixed-seed full training loop: task generation, epochs over shuffled
/// batches, periodic eval, record emission. Bitwise deterministic given the
/// config.
pub fn train(cfg: &TrainConfig, rep: usize) -> Result<RunRecord> {
    train_with_final(cfg, rep).map(|(record, _, _)| record)
}

/// Same loop, also handing back the trained layer and its task for
/// checkpointing or visualization.
pub fn train_with_final(
    cfg: &TrainConfig,
    rep: usize,
) -> Result<(RunRecord, RadarLayer, SyntheticTask)> {
    let start = std::time::Instant::now();
    let (mut layer, task) = build_experiment(cfg, rep)?;
    let floor = task.mean_sq_base_distance();
    let mut opt = OptimState::new(cfg.algorithm, cfg.lr);
    let mut shuffle_rng = Rng::new(run_seed(cfg.seed, cfg.n, mode_index(cfg.mode), rep));

    let mut record = RunRecord {
        config: cfg.clone(),
        step_loss: Vec::with_capacity(cfg.steps),
        evals: Vec::new(),
        floor,
        final_angular_cos: Mat::zeros(cfg.n.max(1), cfg.n.max(1)),
        final_angular_absdiff: Mat::zeros(cfg.n.max(1), cfg.n.max(1)),
        wall_time_s: 0.0,
    };
    record.evals.push(eval_point(&layer, &task, 0, floor)?);

    let mut order: Vec<usize> = (0..task.len()).collect();
    let mut cursor = order.len(); // force a shuffle on the first step
    for step_no in 1..=cfg.steps {
        let mut bx: Vec<&[f64]> = Vec::with_capacity(cfg.batch);
        let mut by: Vec<&[f64]> = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            if cursor >= order.len() {
                shuffle_rng.shuffle(&mut order);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            bx.push(task.x.row(idx));
            by.push(task.y.row(idx));
        }
        let loss = step(&mut layer, &mut opt, &bx, &by).map_err(|e| Error::TrainAborted {
            step: step_no,
            reason: e.to_string(),
        })?;
        record.step_loss.push(loss);
        if step_no % cfg.eval_every == 0 || step_no == cfg.steps {
            record
                .evals
                .push(eval_point(&layer, &task, step_no, floor)?);
        }
    }

    let (cos, ang) = angular_similarity(&layer, &task.x)?;
    record.final_angular_cos = cos;
    record.final_angular_absdiff = ang;
    record.wall_time_s = start.elapsed().as_secs_f64();
    Ok((record, layer, task))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::in_cone;

    fn bank_and_base(seed: u64, n: usize, d: usize) -> (FrozenBase, LoraBank) {
        let mut rng = Rng::new(seed);
        let bank = LoraBank::random(&mut rng, n, d, d, 2, 1.0, 1.0).unwrap();
        let w = Mat::from_vec(d, d, rng.gaussian_vec(d * d)).unwrap();
        (FrozenBase::new(w), bank)
    }

    #[test]
    fn in_cone_task_targets_are_in_cone() {
        let (base, bank) = bank_and_base(1, 3, 6);
        let mut rng = Rng::new(2);
        let task = make_in_cone_task(&mut rng, &base, &bank, 16, 0.0).unwrap();
        assert_eq!(task.len(), 16);
        for (i, &d) in task.cone_meta.iter().enumerate() {
            assert!(d < 1e-6, "sample {i} distance {d}");
            let delta = vec_sub(task.y.row(i), &base.apply(task.x.row(i)).unwrap());
            let v = bank.expert_outputs(task.x.row(i)).unwrap();
            assert!(in_cone(&delta, &v, 1e-6).unwrap());
        }
    }

    #[test]
    fn in_cone_single_expert_target_is_expert_output() {
        let (base, bank) = bank_and_base(3, 1, 4);
        let mut rng = Rng::new(4);
        let task = make_in_cone_task(&mut rng, &base, &bank, 4, 0.0).unwrap();
        for i in 0..task.len() {
            let v = bank.expert_outputs(task.x.row(i)).unwrap();
            let delta = vec_sub(task.y.row(i), &base.apply(task.x.row(i)).unwrap());
            for (a, b) in delta.iter().zip(&v[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_cone_targets_respect_margin() {
        let (base, bank) = bank_and_base(5, 4, 8);
        let mut rng = Rng::new(6);
        let task = make_out_of_cone_task(&mut rng, &base, &bank, 12, 0.1).unwrap();
        for &d in &task.cone_meta {
            assert!(d >= 0.1 * (1.0 - 1e-6), "distance {d}");
        }
        // n = 1: point hull, distance is exactly the margin
        let (base1, bank1) = bank_and_base(7, 1, 4);
        let task1 = make_out_of_cone_task(&mut rng, &base1, &bank1, 4, 0.5).unwrap();
        for &d in &task1.cone_meta {
            assert!((d - 0.5).abs() < 1e-6, "distance {d}");
        }
    }

    #[test]
    fn out_of_cone_full_dimensional_hull_branch() {
        // n > d_out forces the exterior-normal construction
        let (base, bank) = bank_and_base(8, 5, 2);
        let mut rng = Rng::new(9);
        let task = make_out_of_cone_task(&mut rng, &base, &bank, 8, 0.2).unwrap();
        for &d in &task.cone_meta {
            assert!(d >= 0.2 * (1.0 - 1e-6));
        }
    }

    #[test]
    fn multitask_mix_routes_by_cluster() {
        let (base, bank) = bank_and_base(10, 8, 8);
        let mut rng = Rng::new(11);
        let task = make_multitask_mix(&mut rng, &base, &bank, 4, 64).unwrap();
        let parts = cluster_partition(8, 4);
        let mut out_of_cluster_positive = 0;
        for i in 0..task.len() {
            let c = task.cluster_id[i];
            let v = bank.expert_outputs(task.x.row(i)).unwrap();
            let delta = vec_sub(task.y.row(i), &base.apply(task.x.row(i)).unwrap());
            // in-cone w.r.t. its own cluster
            let own: Vec<Vec<f64>> = parts[c].iter().map(|&j| v[j].clone()).collect();
            assert!(in_cone(&delta, &own, 1e-6).unwrap(), "sample {i}");
            // usually outside every other single cluster's hull
            let others: Vec<Vec<f64>> = (0..8)
                .filter(|j| !parts[c].contains(j))
                .map(|j| v[j].clone())
                .collect();
            let d = cone_project(&delta, &others, 1e-10, 100_000)
                .unwrap()
                .distance;
            if d > 1e-6 {
                out_of_cluster_positive += 1;
            }
        }
        assert!(out_of_cluster_positive * 10 >= task.len() * 9);
    }

    #[test]
    fn multitask_clusters_equal_n_is_pure_routing() {
        let (base, bank) = bank_and_base(12, 4, 4);
        let mut rng = Rng::new(13);
        let task = make_multitask_mix(&mut rng, &base, &bank, 4, 8).unwrap();
        for i in 0..task.len() {
            let c = task.cluster_id[i];
            let v = bank.expert_outputs(task.x.row(i)).unwrap();
            let delta = vec_sub(task.y.row(i), &base.apply(task.x.row(i)).unwrap());
            for (a, b) in delta.iter().zip(&v[c]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(make_multitask_mix(&mut rng, &base, &bank, 5, 4).is_err());
    }

    #[test]
    fn sgd_step_is_exact_update() {
        let cfg = TrainConfig {
            algorithm: Algorithm::Sgd,
            lr: 0.1,
            mode: GateMode::StretchOnly,
            ..TrainConfig::defaults(21)
        };
        let (mut layer, task) = build_experiment(&cfg, 0).unwrap();
        let before = layer.stretch.theta_s.clone();
        let trace = layer.forward(task.x.row(0)).unwrap();
        let g = crate::grads::backward_stretch(
            &layer,
            &trace,
            task.y.row(0),
            StretchGradMode::ExactMasked,
        )
        .unwrap();
        let mut opt = OptimState::new(Algorithm::Sgd, 0.1);
        let bx = [task.x.row(0)];
        let by = [task.y.row(0)];
        step(&mut layer, &mut opt, &bx, &by).unwrap();
        for i in 0..before.data().len() {
            let expect = before.data()[i] - 0.1 * g.data()[i];
            assert!((layer.stretch.theta_s.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let cfg = TrainConfig {
            algorithm: Algorithm::Sgd,
            mode: GateMode::StretchOnly,
            ..TrainConfig::defaults(22)
        };
        let (mut layer, task) = build_experiment(&cfg, 0).unwrap();
        // make the target equal the current output: perfect fit, zero grad
        let x = task.x.row(0).to_vec();
        let y = layer.forward(&x).unwrap().y;
        let before = layer.stretch.theta_s.clone();
        let mut opt = OptimState::new(Algorithm::Sgd, 0.5);
        let bx = [x.as_slice()];
        let by = [y.as_slice()];
        step(&mut layer, &mut opt, &bx, &by).unwrap();
        assert_eq!(layer.stretch.theta_s.data(), before.data());
    }

    #[test]
    fn adam_first_step_has_bias_corrected_magnitude() {
        // on the first step Adam moves each coordinate by about
        // lr * sign(g): m_hat/sqrt(v_hat) = g/|g| up to the epsilon guard
        let mut param = vec![1.0, -2.0, 0.5];
        let grad = vec![0.3, -0.7, 0.01];
        let mut slot = AdamSlot::default();
        let before = param.clone();
        slot.update(&mut param, &grad, 0.01, 1);
        for i in 0..3 {
            let expect = before[i]
                - 0.01 * grad[i]
                    / (grad[i] * grad[i])
                        .sqrt()
                        .max(ADAM_EPS)
                        .max(f64::MIN_POSITIVE);
            // epsilon makes the step fractionally smaller than lr * sign
            assert!((param[i] - expect).abs() < 1e-4, "{} vs {expect}", param[i]);
            assert!((param[i] - before[i]).abs() <= 0.01 + 1e-12);
        }
    }

    #[test]
    fn zero_steps_yields_initial_eval_only() {
        let cfg = TrainConfig {
            steps: 0,
            mode: GateMode::StretchOnly,
            ..TrainConfig::defaults(23)
        };
        let rec = train(&cfg, 0).unwrap();
        assert_eq!(rec.evals.len(), 1);
        assert!(rec.step_loss.is_empty());
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let cfg = TrainConfig {
            steps: 50,
            eval_every: 10,
            ..TrainConfig::defaults(24)
        };
        let a = train(&cfg, 0).unwrap();
        let b = train(&cfg, 0).unwrap();
        assert_eq!(a.step_loss, b.step_loss);
        let ea: Vec<f64> = a.evals.iter().map(|e| e.train_mse).collect();
        let eb: Vec<f64> = b.evals.iter().map(|e| e.train_mse).collect();
        assert_eq!(ea, eb);
    }

    #[test]
    fn radar_step0_loss_equals_stretch_only_step0() {
        let base_cfg = TrainConfig::defaults(25);
        let radar = train(
            &TrainConfig {
                steps: 0,
                mode: GateMode::Radar,
                ..base_cfg.clone()
            },
            0,
        )
        .unwrap();
        let stretch = train(
            &TrainConfig {
                steps: 0,
                mode: GateMode::StretchOnly,
                ..base_cfg
            },
            0,
        )
        .unwrap();
        assert_eq!(radar.evals[0].train_mse, stretch.evals[0].train_mse);
    }

    #[test]
    fn stretch_only_respects_cone_floor_and_in_cone_trains_down() {
        // out-of-cone: the eval MSE can never undercut the certified floor
        let cfg = TrainConfig {
            steps: 400,
            eval_every: 1,
            mode: GateMode::StretchOnly,
            ..TrainConfig::defaults(26)
        };
        let rec = train(&cfg, 0).unwrap();
        for e in &rec.evals {
            assert!(
                e.train_mse >= rec.floor - 1e-6,
                "step {} mse {}",
                e.step,
                e.train_mse
            );
        }

        // in-cone, k = n, 2 experts: the gate can fit nearly perfectly once
        // the concat features span enough directions (rank 8 here)
        let cfg = TrainConfig {
            n: 2,
            k: 2,
            r: 8,
            task: TaskKind::InCone,
            task_size: 8,
            steps: 2000,
            eval_every: 200,
            lr: 5e-2,
            mode: GateMode::StretchOnly,
            ..TrainConfig::defaults(27)
        };
        let rec = train(&cfg, 0).unwrap();
        let initial = rec.evals[0].train_mse;
        let fin = rec.final_train_mse();
        assert!(fin < 1e-3 * initial, "final {fin} vs initial {initial}");
    }
}
