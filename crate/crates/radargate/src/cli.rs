//! Experiment drivers and artifact emitters: flat key-value config files,
//! binary checkpoints, CSV/SVG outputs, and the five subcommands
//! (`gradcheck`, `train`, `scale-sweep`, `cone-demo`, `complexity`).
//!
//! Every driver is deterministic given (config, seed): artifacts are
//! byte-identical on repeat. Drivers flush all artifacts before reporting
//! their pass/fail status.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::costmodel::{analytic_memory, parity_sweep, CostParams, GateKind};
use crate::error::{Error, Result};
use crate::gates::{RotationParams, StretchMode, StretchParams};
use crate::geometry::{cone_project, escape_probe};
use crate::grads::gradcheck_sweep;
use crate::layer::{GateMode, RadarLayer};
use crate::lora::{FrozenBase, LoraBank, LoraModule};
use crate::numkernel::{pca_2d, vec_sub, Mat, Rng};
use crate::train::{self, Algorithm, TaskKind, TrainConfig};
use crate::viz;

// ── Experiment configuration ──────────────────────────────────────────────

/// Flat experiment configuration. Every key has a default; unknown keys are
/// rejected by name; all constraint violations are reported together.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Seeds for multi-run commands; defaults to `[seed]`.
    pub seeds: Vec<u64>,
    pub n: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub r: usize,
    pub r_a: usize,
    pub k: usize,
    pub tau: f64,
    pub mode: GateMode,
    /// Modes a training command runs; defaults to `[mode]`.
    pub modes: Vec<GateMode>,
    pub gate_variant: StretchMode,
    pub theta_r_factorized: bool,
    pub task: TaskKind,
    pub task_size: usize,
    pub margin: f64,
    pub noise: f64,
    /// 0 means "scale with the bank": max(1, n/2) clusters.
    pub clusters: usize,
    pub optimizer: Algorithm,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub eval_every: usize,
    pub n_list: Vec<usize>,
    pub d_list: Vec<usize>,
    pub probe_samples: usize,
    pub gradcheck_configs: usize,
    pub save_checkpoint: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            seeds: vec![],
            n: 4,
            d_in: 8,
            d_out: 8,
            r: 4,
            r_a: 4,
            k: 4,
            tau: 1.0,
            mode: GateMode::Radar,
            modes: vec![],
            gate_variant: StretchMode::ConcatProj,
            theta_r_factorized: false,
            task: TaskKind::OutOfCone,
            task_size: 8,
            margin: 0.1,
            noise: 0.0,
            clusters: 4,
            optimizer: Algorithm::Adam,
            lr: 0.03,
            batch: 4,
            steps: 2000,
            eval_every: 100,
            n_list: vec![5, 10, 20, 40],
            d_list: vec![64, 128, 256, 512, 1024, 2048, 4096],
            probe_samples: 200,
            gradcheck_configs: 100,
            save_checkpoint: false,
        }
    }
}

fn parse_mode(v: &str) -> std::result::Result<GateMode, String> {
    match v {
        "radar" => Ok(GateMode::Radar),
        "stretch_only" => Ok(GateMode::StretchOnly),
        "rotation_only" => Ok(GateMode::RotationOnly),
        "base_only" => Ok(GateMode::BaseOnly),
        other => Err(format!(
            "mode '{other}' not one of radar|stretch_only|rotation_only|base_only"
        )),
    }
}

impl ExperimentConfig {
    /// Parse a flat `key = value` file. `#` starts a comment. The full list
    /// of violations comes back in one error.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut issues: Vec<String> = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                issues.push(format!("line {}: expected 'key = value'", lineno + 1));
                continue;
            };
            let key = key.trim();
            let value = value.trim();
            let mut bad = |msg: String| issues.push(format!("{key}: {msg}"));
            match key {
                "seed" => match value.parse() {
                    Ok(v) => cfg.seed = v,
                    Err(_) => bad(format!("'{value}' is not a u64")),
                },
                "seeds" => match parse_list::<u64>(value) {
                    Ok(v) => cfg.seeds = v,
                    Err(e) => bad(e),
                },
                "n" => parse_into(value, &mut cfg.n, &mut bad),
                "d_in" => parse_into(value, &mut cfg.d_in, &mut bad),
                "d_out" => parse_into(value, &mut cfg.d_out, &mut bad),
                "r" => parse_into(value, &mut cfg.r, &mut bad),
                "r_a" => parse_into(value, &mut cfg.r_a, &mut bad),
                "k" => parse_into(value, &mut cfg.k, &mut bad),
                "tau" => parse_into(value, &mut cfg.tau, &mut bad),
                "mode" => match parse_mode(value) {
                    Ok(m) => cfg.mode = m,
                    Err(e) => bad(e),
                },
                "modes" => {
                    let mut modes = Vec::new();
                    for part in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                        match parse_mode(part) {
                            Ok(m) => modes.push(m),
                            Err(e) => bad(e),
                        }
                    }
                    cfg.modes = modes;
                }
                "gate_variant" => match value {
                    "input_proj" => cfg.gate_variant = StretchMode::InputProj,
                    "concat_proj" => cfg.gate_variant = StretchMode::ConcatProj,
                    other => bad(format!("'{other}' not one of input_proj|concat_proj")),
                },
                "theta_r_factorized" => match value.parse() {
                    Ok(v) => cfg.theta_r_factorized = v,
                    Err(_) => bad(format!("'{value}' is not a bool")),
                },
                "task" => match value {
                    "in_cone" => cfg.task = TaskKind::InCone,
                    "out_of_cone" => cfg.task = TaskKind::OutOfCone,
                    "multitask" => cfg.task = TaskKind::MultiTaskMix,
                    other => bad(format!(
                        "'{other}' not one of in_cone|out_of_cone|multitask"
                    )),
                },
                "task_size" => parse_into(value, &mut cfg.task_size, &mut bad),
                "margin" => parse_into(value, &mut cfg.margin, &mut bad),
                "noise" => parse_into(value, &mut cfg.noise, &mut bad),
                "clusters" => parse_into(value, &mut cfg.clusters, &mut bad),
                "optimizer" => match value {
                    "adam" => cfg.optimizer = Algorithm::Adam,
                    "sgd" => cfg.optimizer = Algorithm::Sgd,
                    other => bad(format!("'{other}' not one of adam|sgd")),
                },
                "lr" => parse_into(value, &mut cfg.lr, &mut bad),
                "batch" => parse_into(value, &mut cfg.batch, &mut bad),
                "steps" => parse_into(value, &mut cfg.steps, &mut bad),
                "eval_every" => parse_into(value, &mut cfg.eval_every, &mut bad),
                "n_list" => match parse_list::<usize>(value) {
                    Ok(v) => cfg.n_list = v,
                    Err(e) => bad(e),
                },
                "d_list" => match parse_list::<usize>(value) {
                    Ok(v) => cfg.d_list = v,
                    Err(e) => bad(e),
                },
                "probe_samples" => parse_into(value, &mut cfg.probe_samples, &mut bad),
                "gradcheck_configs" => parse_into(value, &mut cfg.gradcheck_configs, &mut bad),
                "save_checkpoint" => match value.parse() {
                    Ok(v) => cfg.save_checkpoint = v,
                    Err(_) => bad(format!("'{value}' is not a bool")),
                },
                other => issues.push(format!("unknown key '{other}'")),
            }
        }

        cfg.validate(&mut issues);
        if issues.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(issues))
        }
    }

    fn validate(&self, issues: &mut Vec<String>) {
        if self.n == 0 {
            issues.push("n: must be >= 1".into());
        }
        if self.d_in == 0 {
            issues.push("d_in: must be >= 1".into());
        }
        if self.d_out == 0 || self.d_out % 2 != 0 {
            issues.push(format!(
                "d_out: must be even and positive, got {}",
                self.d_out
            ));
        }
        if self.r == 0 || self.r > self.d_in.min(self.d_out) {
            issues.push(format!(
                "r: must lie in [1, min(d_in, d_out) = {}], got {}",
                self.d_in.min(self.d_out),
                self.r
            ));
        }
        if self.r_a == 0 || self.r_a > self.d_out {
            issues.push(format!(
                "r_a: must lie in [1, d_out = {}], got {}",
                self.d_out, self.r_a
            ));
        }
        if self.k == 0 || self.k > self.n {
            issues.push(format!(
                "k: must lie in [1, n = {}], got {}",
                self.n, self.k
            ));
        }
        if !(self.tau > 0.0) {
            issues.push(format!("tau: must be positive, got {}", self.tau));
        }
        if !(self.margin > 0.0) {
            issues.push(format!("margin: must be positive, got {}", self.margin));
        }
        if self.noise < 0.0 {
            issues.push(format!("noise: must be >= 0, got {}", self.noise));
        }
        if self.clusters > self.n {
            issues.push(format!(
                "clusters: must be <= n = {} (0 means n/2), got {}",
                self.n, self.clusters
            ));
        }
        if !(self.lr > 0.0) {
            issues.push(format!("lr: must be positive, got {}", self.lr));
        }
        if self.batch == 0 {
            issues.push("batch: must be >= 1".into());
        }
        if self.eval_every == 0 {
            issues.push("eval_every: must be >= 1".into());
        }
        if self.task_size == 0 {
            issues.push("task_size: must be >= 1".into());
        }
        for &d in &self.d_list {
            if d % 2 != 0 {
                issues.push(format!("d_list: widths must be even, got {d}"));
            }
        }
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::parse(&text)
    }

    /// Seeds a multi-run command iterates over.
    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// Modes a training command iterates over.
    pub fn mode_list(&self) -> Vec<GateMode> {
        if self.modes.is_empty() {
            vec![self.mode]
        } else {
            self.modes.clone()
        }
    }

    /// Cluster count for a bank of `n` experts (0 means scale as n/2).
    pub fn clusters_for(&self, n: usize) -> usize {
        if self.clusters == 0 {
            (n / 2).max(1)
        } else {
            self.clusters.min(n)
        }
    }

    pub fn to_train_config(&self, mode: GateMode, seed: u64, n: usize) -> TrainConfig {
        TrainConfig {
            seed,
            n,
            d_in: self.d_in,
            d_out: self.d_out,
            r: self.r,
            r_a: self.r_a,
            theta_r_factorized: self.theta_r_factorized,
            k: self.k.min(n),
            tau: self.tau,
            mode,
            gate_variant: self.gate_variant,
            task: self.task,
            task_size: self.task_size,
            margin: self.margin,
            noise: self.noise,
            clusters: self.clusters_for(n),
            algorithm: self.optimizer,
            lr: self.lr,
            batch: self.batch,
            steps: self.steps,
            eval_every: self.eval_every,
            optimizer_assumed: true,
        }
    }
}

fn parse_into<T: std::str::FromStr>(value: &str, slot: &mut T, bad: &mut impl FnMut(String)) {
    match value.parse() {
        Ok(v) => *slot = v,
        Err(_) => bad(format!("'{value}' cannot be parsed")),
    }
}

fn parse_list<T: std::str::FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("'{s}' cannot be parsed")))
        .collect()
}

// ── Checkpoints ───────────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"RGK1";
const CHECKPOINT_VERSION: u32 = 1;

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn new() -> ByteWriter {
        ByteWriter { buf: Vec::new() }
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn mat(&mut self, m: &Mat) {
        for &v in m.data() {
            self.f64(v);
        }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> ByteReader<'a> {
        ByteReader { buf, pos: 0 }
    }
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + len > self.buf.len() {
            return Err(Error::Checkpoint {
                offset: self.pos as u64,
                reason: format!(
                    "truncated while reading {what} ({} bytes available, {len} needed)",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn mat(&mut self, rows: usize, cols: usize, what: &str) -> Result<Mat> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64(what)?);
        }
        Mat::from_vec(rows, cols, data)
    }
}

fn mode_tag(m: GateMode) -> u32 {
    match m {
        GateMode::Radar => 0,
        GateMode::StretchOnly => 1,
        GateMode::RotationOnly => 2,
        GateMode::BaseOnly => 3,
    }
}

fn mode_from_tag(t: u32, offset: u64) -> Result<GateMode> {
    Ok(match t {
        0 => GateMode::Radar,
        1 => GateMode::StretchOnly,
        2 => GateMode::RotationOnly,
        3 => GateMode::BaseOnly,
        other => {
            return Err(Error::Checkpoint {
                offset,
                reason: format!("unknown mode tag {other}"),
            })
        }
    })
}

/// Serialize the full layer state plus RNG and step count. Little-endian
/// throughout; matrices appear in declared order (per-expert A then B, the
/// frozen base, theta_s, then the rotation parameter).
pub fn save_checkpoint(path: &Path, layer: &RadarLayer, rng: &Rng, step_count: u64) -> Result<()> {
    let mut w = ByteWriter::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(mode_tag(layer.mode));
    w.u32(match layer.stretch.mode {
        StretchMode::InputProj => 0,
        StretchMode::ConcatProj => 1,
    });
    w.u32(u32::from(layer.rotation.is_factorized()));
    let (n, d_in, d_out) = (layer.n(), layer.d_in(), layer.d_out());
    let r = layer.bank.module(0).rank();
    let r_a = match &layer.rotation {
        RotationParams::Factorized { u, .. } => u.cols(),
        RotationParams::Full(_) => 0,
    };
    for v in [n, d_in, d_out, r, r_a, layer.stretch.k] {
        w.u32(v as u32);
    }
    w.f64(layer.stretch.tau);
    w.u64(step_count);
    w.u64(rng.seed());
    w.u64(rng.state());
    for m in layer.bank.modules() {
        w.mat(m.a());
        w.mat(m.b());
    }
    w.mat(layer.base.w());
    w.mat(&layer.stretch.theta_s);
    match &layer.rotation {
        RotationParams::Full(m) => w.mat(m),
        RotationParams::Factorized { u, v } => {
            w.mat(u);
            w.mat(v);
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&w.buf)?;
    f.flush()?;
    Ok(())
}

/// Inverse of [`save_checkpoint`]; every structural problem is reported with
/// the byte offset where it was detected.
pub fn load_checkpoint(path: &Path) -> Result<(RadarLayer, Rng, u64)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = ByteReader::new(&bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            reason: format!("bad magic {magic:02x?}, expected {MAGIC:02x?}"),
        });
    }
    let version_at = r.pos as u64;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint {
            offset: version_at,
            reason: format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        });
    }
    let mode_at = r.pos as u64;
    let mode = mode_from_tag(r.u32("mode")?, mode_at)?;
    let variant = match r.u32("gate variant")? {
        0 => StretchMode::InputProj,
        _ => StretchMode::ConcatProj,
    };
    let factorized = r.u32("rotation kind")? != 0;
    let n = r.u32("n")? as usize;
    let d_in = r.u32("d_in")? as usize;
    let d_out = r.u32("d_out")? as usize;
    let rank = r.u32("r")? as usize;
    let r_a = r.u32("r_a")? as usize;
    let k = r.u32("k")? as usize;
    let tau = r.f64("tau")?;
    let step_count = r.u64("step count")?;
    let rng_seed = r.u64("rng seed")?;
    let rng_state = r.u64("rng state")?;

    let mut modules = Vec::with_capacity(n);
    for i in 0..n {
        let a = r.mat(d_in, rank, &format!("expert {i} A"))?;
        let b = r.mat(rank, d_out, &format!("expert {i} B"))?;
        modules.push(LoraModule::new(a, b)?);
    }
    let w = r.mat(d_in, d_out, "base W")?;
    let srows = match variant {
        StretchMode::InputProj => d_in,
        StretchMode::ConcatProj => n * d_out,
    };
    let theta_s = r.mat(srows, n, "theta_s")?;
    let rotation = if factorized {
        let u = r.mat(d_out, r_a, "rotation U")?;
        let v = r.mat(r_a, d_out / 2, "rotation V")?;
        RotationParams::Factorized { u, v }
    } else {
        RotationParams::Full(r.mat(d_out, d_out / 2, "theta_r")?)
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint {
            offset: r.pos as u64,
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }

    let layer = RadarLayer::new(
        FrozenBase::new(w),
        LoraBank::new(modules)?,
        StretchParams::new(theta_s, variant, tau, k)?,
        rotation,
        mode,
    )?;
    Ok((layer, Rng::restore(rng_seed, rng_state), step_count))
}

// ── Artifact helpers ──────────────────────────────────────────────────────

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut f = std::fs::File::create(&path)?;
    f.write_all(contents.as_bytes())?;
    f.flush()?;
    Ok(path)
}

/// Outcome of one driver: artifacts are already on disk when this returns.
#[derive(Clone, Debug)]
pub struct CmdOutcome {
    pub ok: bool,
    pub summary: String,
}

impl CmdOutcome {
    fn pass(summary: String) -> CmdOutcome {
        CmdOutcome { ok: true, summary }
    }
    fn fail(summary: String) -> CmdOutcome {
        CmdOutcome { ok: false, summary }
    }
}

fn mode_name(m: GateMode) -> &'static str {
    m.as_str()
}

// ── gradcheck ─────────────────────────────────────────────────────────────

/// Finite-difference validation sweep; writes `gradcheck.csv` and passes iff
/// the max relative error over all completed rows stays below 1e-5.
pub fn cmd_gradcheck(cfg: &ExperimentConfig, out: &Path) -> Result<CmdOutcome> {
    cmd_gradcheck_inner(cfg, out, false)
}

/// Negative-control hook: corrupts one analytic entry per row so the sweep
/// must fail. Exists for tests of the exit-status contract.
pub fn cmd_gradcheck_corrupted(cfg: &ExperimentConfig, out: &Path) -> Result<CmdOutcome> {
    cmd_gradcheck_inner(cfg, out, true)
}

fn cmd_gradcheck_inner(cfg: &ExperimentConfig, out: &Path, corrupt: bool) -> Result<CmdOutcome> {
    let (rows, max_err) = gradcheck_sweep(cfg.seed, cfg.gradcheck_configs, 1e-5, corrupt)?;
    let mut csv = String::from("config_id,seed,n,d_in,d_out,k,mode,max_rel_err_s,max_rel_err_r\n");
    let mut skipped = 0usize;
    for row in &rows {
        match (row.err_s, row.err_r) {
            (Some(es), Some(er)) => {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{:e},{:e}",
                    row.config_id, row.seed, row.n, row.d_in, row.d_out, row.k, row.mode, es, er
                );
            }
            _ => {
                skipped += 1;
                let _ = writeln!(
                    csv,
                    "{},{},,,,,{},skipped,skipped",
                    row.config_id, row.seed, row.mode
                );
            }
        }
    }
    write_file(out, "gradcheck.csv", &csv)?;
    let ok = max_err < 1e-5;
    let summary = format!(
        "gradcheck: {} configs, {} skipped, max relative error {max_err:.3e} ({})",
        rows.len(),
        skipped,
        if ok { "PASS" } else { "FAIL" }
    );
    Ok(if ok {
        CmdOutcome::pass(summary)
    } else {
        CmdOutcome::fail(summary)
    })
}

// ── train ─────────────────────────────────────────────────────────────────

fn run_csv(rec: &train::RunRecord) -> String {
    let mut csv = String::from("step,loss,grad_norm_s,grad_norm_r,cone_gap\n");
    for e in &rec.evals {
        let _ = writeln!(
            csv,
            "{},{:e},{:e},{:e},{:e}",
            e.step, e.train_mse, e.grad_norm_s, e.grad_norm_r, e.cone_gap
        );
    }
    csv
}

fn run_header_json(rec: &train::RunRecord) -> String {
    #[derive(serde::Serialize)]
    struct Header<'a> {
        config: &'a TrainConfig,
        floor: f64,
        final_train_mse: f64,
        final_angular_cos: Vec<Vec<f64>>,
        final_angular_mean_abs_angle_diff: Vec<Vec<f64>>,
        wall_time_s: f64,
    }
    let n = rec.final_angular_cos.rows();
    let to_rows = |m: &Mat| -> Vec<Vec<f64>> { (0..n).map(|i| m.row(i).to_vec()).collect() };
    serde_json::to_string_pretty(&Header {
        config: &rec.config,
        floor: rec.floor,
        final_train_mse: rec.final_train_mse(),
        final_angular_cos: to_rows(&rec.final_angular_cos),
        final_angular_mean_abs_angle_diff: to_rows(&rec.final_angular_absdiff),
        wall_time_s: rec.wall_time_s,
    })
    .expect("serializable header")
}

/// One training run per (seed, mode) pair; emits per-run CSV + JSON header
/// plus a cross-mode summary. Partial artifacts are kept when a run aborts.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<CmdOutcome> {
    let mut summary = String::from("seed,mode,floor,final_mse,status\n");
    let mut ok = true;
    let mut finals: Vec<(u64, GateMode, f64)> = Vec::new();
    for &seed in &cfg.seed_list() {
        for &mode in &cfg.mode_list() {
            let tc = cfg.to_train_config(mode, seed, cfg.n);
            match train::train_with_final(&tc, 0) {
                Ok((rec, trained, _task)) => {
                    let stem = format!("run_{}_{}", mode_name(mode), seed);
                    write_file(out, &format!("{stem}.csv"), &run_csv(&rec))?;
                    write_file(out, &format!("{stem}.json"), &run_header_json(&rec))?;
                    if cfg.save_checkpoint {
                        save_checkpoint(
                            &out.join(format!("{stem}.ckpt")),
                            &trained,
                            &Rng::new(seed),
                            tc.steps as u64,
                        )?;
                    }
                    let _ = writeln!(
                        summary,
                        "{seed},{},{:e},{:e},ok",
                        mode_name(mode),
                        rec.floor,
                        rec.final_train_mse()
                    );
                    finals.push((seed, mode, rec.final_train_mse()));
                }
                Err(e) => {
                    ok = false;
                    let _ = writeln!(summary, "{seed},{},,,aborted: {e}", mode_name(mode));
                }
            }
        }
    }
    write_file(out, "summary.csv", &summary)?;
    let mut text = format!("train: {} runs\n", finals.len());
    for (seed, mode, f) in &finals {
        let _ = writeln!(
            text,
            "  seed {seed} {}: final mse {f:.6e}",
            mode_name(*mode)
        );
    }
    Ok(if ok {
        CmdOutcome::pass(text)
    } else {
        CmdOutcome::fail(text)
    })
}

// ── scale-sweep ───────────────────────────────────────────────────────────

/// Fresh bank + routing-mix task per module count; both modes trained per
/// listed seed. The run seed folds (n, mode, repetition) so each CSV row is
/// independently reproducible; the task itself derives mode-independently so
/// ablations compare on identical data.
pub fn cmd_scale_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<CmdOutcome> {
    if cfg.n_list.is_empty() {
        return Err(Error::InvalidArg("n_list must be nonempty".into()));
    }
    let modes = if cfg.modes.is_empty() {
        vec![GateMode::StretchOnly, GateMode::Radar]
    } else {
        cfg.mode_list()
    };
    let mut csv = String::from("n,mode,seed,run_seed,floor,final_mse\n");
    let mut means: Vec<(usize, GateMode, f64)> = Vec::new();
    for (pos, &n) in cfg.n_list.iter().enumerate() {
        for &mode in &modes {
            let mut mean = 0.0;
            let seeds = cfg.seed_list();
            for &seed in &seeds {
                let mut tc = cfg.to_train_config(mode, seed, n);
                tc.task = TaskKind::MultiTaskMix;
                let rec = train::train(&tc, pos)?;
                let rs = train::run_seed(seed, n, mode_tag(mode) as usize, pos);
                let _ = writeln!(
                    csv,
                    "{n},{},{seed},{rs},{:e},{:e}",
                    mode_name(mode),
                    rec.floor,
                    rec.final_train_mse()
                );
                mean += rec.final_train_mse() / seeds.len() as f64;
            }
            means.push((n, mode, mean));
        }
    }
    write_file(out, "scale_sweep.csv", &csv)?;
    let mut text = String::from("scale-sweep mean final mse per (n, mode):\n");
    for (n, mode, m) in &means {
        let _ = writeln!(text, "  n={n} {}: {m:.6e}", mode_name(*mode));
    }
    Ok(CmdOutcome::pass(text))
}

// ── cone-demo ─────────────────────────────────────────────────────────────

/// Cone-escape demonstration: certify a target outside the un-rotated hull,
/// sample rotation parameters for an escape witness, train a radar gate on
/// the same geometry, and emit the CSV plus a two-panel scatter of the
/// expert outputs before/after rotation.
pub fn cmd_cone_demo(cfg: &ExperimentConfig, out: &Path) -> Result<CmdOutcome> {
    let tc = cfg.to_train_config(GateMode::Radar, cfg.seed, cfg.n);
    let (layer, task) = train::build_experiment(
        &TrainConfig {
            task: TaskKind::OutOfCone,
            task_size: 1,
            ..tc.clone()
        },
        0,
    )?;
    let x = task.x.row(0).to_vec();
    let target = task.y.row(0).to_vec();

    let mut rng = Rng::new(crate::numkernel::derive_seed(cfg.seed, &[0xC0DE]));
    let probe = escape_probe(&layer, &x, &target, cfg.probe_samples, &mut rng)?;
    let success = probe.succeeded(1e-9);

    let run_id = format!("{:016x}-{}", cfg.seed, cfg.n);
    let mut csv =
        String::from("run_id,n,d_out,base_distance,best_rotated_distance,samples,success\n");
    let _ = writeln!(
        csv,
        "{run_id},{},{},{:e},{:e},{},{}",
        cfg.n,
        cfg.d_out,
        probe.base_distance,
        probe.best_rotated_distance,
        cfg.probe_samples,
        success
    );
    write_file(out, "cone.csv", &csv)?;

    // train a radar gate against the same single-sample geometry
    let (trained_rec, trained_layer, _) = train::train_with_final(
        &TrainConfig {
            task: TaskKind::OutOfCone,
            task_size: 1,
            ..tc
        },
        0,
    )?;
    let trained_mse = trained_rec.final_train_mse();

    let (v, _alpha, v_tilde) = trained_layer.rotated_outputs_all(&x)?;
    let xw = layer.base.apply(&x)?;
    let delta = vec_sub(&target, &xw);
    let hull_point = cone_project(&delta, &v, 1e-10, 100_000)?.point;

    let mut cloud: Vec<Vec<f64>> = Vec::new();
    cloud.extend(v.iter().cloned());
    cloud.extend(v_tilde.iter().cloned());
    cloud.push(delta.clone());
    cloud.push(hull_point.clone());
    let flat = pca_2d(&cloud)?;
    let n = layer.n();
    let series = [
        viz::Series {
            label: "expert outputs",
            color: "#1f77b4",
            points: flat[..n].to_vec(),
            size: 4.0,
        },
        viz::Series {
            label: "rotated outputs",
            color: "#2ca02c",
            points: flat[n..2 * n].to_vec(),
            size: 4.0,
        },
        viz::Series {
            label: "target delta",
            color: "#d62728",
            points: vec![flat[2 * n]],
            size: 6.0,
        },
        viz::Series {
            label: "hull projection",
            color: "#9467bd",
            points: vec![flat[2 * n + 1]],
            size: 5.0,
        },
    ];
    let svg = viz::two_panel_scatter("expert outputs before/after rotation", &series);
    if !viz::roughly_well_formed(&svg) {
        return Err(Error::InvalidArg(
            "emitted SVG failed the well-formedness check".into(),
        ));
    }
    write_file(out, "cone.svg", &svg)?;

    let summary = format!(
        "cone-demo: base distance {:.4e}, best sampled {:.4e} (success: {success}), trained radar mse {:.4e}",
        probe.base_distance, probe.best_rotated_distance, trained_mse
    );
    Ok(CmdOutcome::pass(summary))
}

// ── complexity ────────────────────────────────────────────────────────────

/// Analytic/instrumented complexity sweep across widths.
pub fn cmd_complexity(cfg: &ExperimentConfig, out: &Path) -> Result<CmdOutcome> {
    if cfg.d_list.is_empty() {
        return Err(Error::InvalidArg("d_list must be nonempty".into()));
    }
    let base = CostParams {
        l: 2,
        n: cfg.n,
        d_in: cfg.d_in,
        d_out: cfg.d_out,
        r: cfg.r,
        k: cfg.k,
        r_a: cfg.r_a,
    };
    let reports = parity_sweep(&cfg.d_list, &base, cfg.seed)?;
    let mut csv = String::from("d,which,analytic_flops,counted_flops,analytic_mem,ratio\n");
    for rep in &reports {
        let p = CostParams {
            d_in: rep.d,
            d_out: rep.d,
            ..base
        };
        let _ = writeln!(
            csv,
            "{},stretch,{},{},{},{}",
            rep.d,
            rep.analytic_flops_stretch,
            rep.counted_flops_stretch,
            analytic_memory(&p, GateKind::Stretch),
            rep.ratio
        );
        let _ = writeln!(
            csv,
            "{},radar,{},{},{},{}",
            rep.d,
            rep.analytic_flops_radar,
            rep.counted_flops_radar,
            analytic_memory(&p, GateKind::Radar),
            rep.ratio
        );
    }
    write_file(out, "complexity.csv", &csv)?;
    let max_ratio = reports.iter().map(|r| r.ratio).fold(0.0f64, f64::max);
    Ok(CmdOutcome::pass(format!(
        "complexity: {} widths, analytic radar/stretch ratio max {max_ratio:.4}",
        reports.len()
    )))
}
