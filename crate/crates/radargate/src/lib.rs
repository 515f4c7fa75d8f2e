//! Composable gating over banks of frozen low-rank adapters.
//!
//! A layer output is `y = x W + sum_i g_i * v~_i` where `v_i = x A_i B_i` is
//! the i-th adapter's representation, `v~_i` is `v_i` rotated by input-dependent
//! pairwise angles (the rotation gate), and `g_i` are temperature-softmax
//! top-k weights (the stretch gate). The crate provides:
//!
//! - [`numkernel`]: deterministic dense kernels, seeded RNG, PCA.
//! - [`lora`]: the frozen adapter bank with cached composed/reference matrices.
//! - [`gates`]: stretch (magnitude) and rotation (angle) gating primitives.
//! - [`layer`]: the composed layer with ablation modes and full forward traces.
//! - [`grads`]: analytic parameter gradients plus a finite-difference oracle.
//! - [`geometry`]: simplex-hull projection (Frank-Wolfe) and cone-escape probes.
//! - [`train`]: synthetic tasks, SGD/Adam, deterministic training runs.
//! - [`costmodel`]: analytic FLOP/memory formulas and an instrumented counter.
//! - [`cli`]: config files, checkpoints, CSV/SVG artifacts, experiment drivers.
//!
//! Every public operation is deterministic given its inputs and seeds; see the
//! `examples/` directory for one runnable walkthrough per capability.
//!
//! ```
//! use radargate::layer::GateMode;
//! use radargate::numkernel::norm2;
//! use radargate::train::{build_experiment, TaskKind, TrainConfig};
//!
//! // a 4-expert layer plus a task whose targets sit a certified 0.1 outside
//! // the experts' hull -- the part of the space a stretch-only gate cannot reach
//! let cfg = TrainConfig {
//!     task: TaskKind::OutOfCone,
//!     margin: 0.1,
//!     mode: GateMode::Radar,
//!     ..TrainConfig::defaults(7)
//! };
//! let (layer, task) = build_experiment(&cfg, 0).unwrap();
//! let trace = layer.forward(task.x.row(0)).unwrap();
//!
//! // rotation preserves every expert's magnitude
//! for &i in &trace.decision.as_ref().unwrap().selected {
//!     let (a, b) = (norm2(&trace.v[i]), norm2(&trace.v_tilde[i]));
//!     assert!((a - b).abs() < 1e-12 * a.max(1.0));
//! }
//! assert!(task.cone_meta.iter().all(|&d| d >= 0.1 * (1.0 - 1e-6)));
//! ```

pub mod cli;
pub mod costmodel;
pub mod error;
pub mod gates;
pub mod geometry;
pub mod grads;
pub mod layer;
pub mod lora;
pub mod numkernel;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
