//! Multi-objective set-based adversarial attacks.
//!
//! This crate optimizes a *set* of adversarial perturbations against many
//! surrogate loss functions at once. The non-smooth best-per-loss /
//! worst-loss objective is replaced by nested log-sum-exp operators, which
//! makes the whole thing differentiable and lets a single momentum
//! projected-gradient loop (the APGD template) drive all losses together.
//! After an attack, a sparse-subset miner identifies which set members did
//! the work and which losses they maximized jointly.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: smooth max/min operators and a finite-difference oracle
//! - [`classifier`]: a small fully-connected model with analytic gradients
//! - [`losses`]: the eight surrogate losses behind one registry
//! - [`objective`]: scalarizations of the per-loss value matrix
//! - [`attack`]: the momentum projected-gradient loop with step halving
//! - [`miner`]: dominant-example selection and loss-synergy patterns
//! - [`harness`]: experiment driver, reports, and timing probe
//!
//! A narrative guide with runnable examples lives in `book/`; its code
//! blocks are compiled as doc-tests (see the [`guide`] module).
//!
//! ```
//! use mos_attack::attack::{mos_attack, AttackConfig};
//! use mos_attack::classifier::{train_toy, Dataset, TrainConfig};
//!
//! let data = Dataset::gaussian_blobs(7, 300, 2, 3, 0.08);
//! let mut train_cfg = TrainConfig::new(vec![2, 16, 3], 7);
//! train_cfg.epochs = 8;
//! let model = train_toy(&train_cfg, &data, false)?.weights;
//!
//! let mut cfg = AttackConfig::new(0.1);
//! cfg.k = 3;
//! cfg.n_iter = 20;
//! let outcome = mos_attack(&model, &data.points[0], &cfg)?;
//! assert!(outcome.trace.iter().all(|t| t.objective.is_finite()));
//! # Ok::<(), mos_attack::Error>(())
//! ```

pub mod attack;
pub mod classifier;
pub mod guide;
pub mod harness;
pub mod losses;
pub mod miner;
pub mod numerics;
pub mod objective;

use thiserror::Error;

/// Errors produced by any layer of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss {id} unsupported: {reason}")]
    UnsupportedLoss { id: u8, reason: String },
    #[error("numeric error in loss {id}: {detail}")]
    NumericLoss { id: u8, detail: String },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training failed: {0}")]
    TrainingFailure(String),
    #[error("miner failed: {0}")]
    Miner(String),
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
