//! End-to-end experiment driver: dataset generation, model training, attack
//! sweeps, success-rate tables, pattern-mining runs, and the gradient-cost
//! probe.
//!
//! Runs are deterministic: every attack run's seed is derived from the base
//! seed, the grid label, the point index, and the restart index, so parallel
//! and serial sweeps produce identical tables. Wall-time columns are the one
//! exception and are excluded from the determinism contract.
//!
//! On-disk artifacts per experiment:
//!
//! - `model.bin` — trained weights (versioned binary format)
//! - `results.csv` / `results.json` — one row per grid entry plus the clean
//!   error-rate row
//! - `traces/<label>.csv` — per-point, per-restart iterate traces
//!   (`point,restart,iteration,objective,objective_best,eta,success`)
//! - `loss_matrices/<label>.json` (and `.csv`) — per-point loss values at
//!   the best iterate of set attacks, the miner's input

use crate::attack::{apgd_single, mos_attack, AttackConfig, AttackOutcome};
use crate::classifier::{train_toy, ClassifierWeights, Dataset, LabeledPoint, TrainConfig};
use crate::losses::{self, LogitContext, LossId};
use crate::miner::{
    aggregate_patterns, extract_patterns, mine_dominant, normalize_losses, MinerConfig,
    PatternHistogram, PatternRecord,
};
use crate::objective::{grad_set_objective, LossMatrix, PerturbationSet};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Environment variable controlling the sweep worker count.
pub const WORKERS_ENV: &str = "MOS_WORKERS";

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn label_code(label: &str) -> u64 {
    // FNV-1a; stable across runs and platforms.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h = (h ^ *b as u64).wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Mix a base seed with stream identifiers.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut s = splitmix64(base);
    for &p in parts {
        s = splitmix64(s ^ p);
    }
    s
}

/// Synthetic dataset parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_train")]
    pub train_points: usize,
    #[serde(default = "d_eval")]
    pub eval_points: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_sigma")]
    pub sigma: f64,
}

fn d_seed() -> u64 {
    7
}
fn d_train() -> usize {
    1500
}
fn d_eval() -> usize {
    500
}
fn d_dim() -> usize {
    2
}
fn d_classes() -> usize {
    3
}
fn d_sigma() -> f64 {
    0.08
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: d_seed(),
            train_points: d_train(),
            eval_points: d_eval(),
            dim: d_dim(),
            classes: d_classes(),
            sigma: d_sigma(),
        }
    }
}

impl DatasetSpec {
    /// Training split (its own seed stream).
    pub fn train_set(&self) -> Dataset {
        Dataset::gaussian_blobs(
            derive_seed(self.seed, &[1]),
            self.train_points,
            self.dim,
            self.classes,
            self.sigma,
        )
    }

    /// Held-out evaluation split.
    pub fn eval_set(&self) -> Dataset {
        Dataset::gaussian_blobs(
            derive_seed(self.seed, &[2]),
            self.eval_points,
            self.dim,
            self.classes,
            self.sigma,
        )
    }
}

/// Model source: train from scratch or load a weight file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default = "m_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub adversarial: bool,
    #[serde(default = "d_seed")]
    pub train_seed: u64,
    #[serde(default = "m_epochs")]
    pub epochs: usize,
    #[serde(default = "m_step")]
    pub step_size: f64,
    #[serde(default = "m_batch")]
    pub batch_size: usize,
    /// When set, load this weight file instead of training.
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
}

fn m_hidden() -> Vec<usize> {
    vec![16]
}
fn m_epochs() -> usize {
    40
}
fn m_step() -> f64 {
    0.25
}
fn m_batch() -> usize {
    32
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: m_hidden(),
            adversarial: false,
            train_seed: d_seed(),
            epochs: m_epochs(),
            step_size: m_step(),
            batch_size: m_batch(),
            weights_path: None,
        }
    }
}

/// Attack parameters shared by every grid entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseAttackParams {
    pub epsilon: f64,
    #[serde(default)]
    pub eta0: Option<f64>,
    #[serde(default = "b_n_iter")]
    pub n_iter: usize,
    #[serde(default = "b_alpha")]
    pub alpha: f64,
    #[serde(default = "b_rho")]
    pub rho: f64,
    #[serde(default = "b_mu")]
    pub mu: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub early_stop: bool,
}

fn b_n_iter() -> usize {
    50
}
fn b_alpha() -> f64 {
    0.75
}
fn b_rho() -> f64 {
    0.75
}
fn b_mu() -> f64 {
    1.0
}

impl BaseAttackParams {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            eta0: None,
            n_iter: b_n_iter(),
            alpha: b_alpha(),
            rho: b_rho(),
            mu: b_mu(),
            seed: 0,
            early_stop: false,
        }
    }

    fn to_config(&self, losses: Vec<LossId>, k: usize, seed: u64) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            eta0: self.eta0,
            n_iter: self.n_iter,
            alpha: self.alpha,
            rho: self.rho,
            mu: self.mu,
            losses,
            k,
            seed,
            early_stop: self.early_stop,
        }
    }
}

/// One row of the attack grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttackSpec {
    /// Set attack over `losses` with `k` members; `restarts` independent
    /// reruns, best-of.
    Mos {
        #[serde(default)]
        label: Option<String>,
        k: usize,
        losses: Vec<LossId>,
        #[serde(default = "one")]
        restarts: usize,
    },
    /// Single-loss baseline.
    Single {
        #[serde(default)]
        label: Option<String>,
        loss: LossId,
        #[serde(default = "one")]
        restarts: usize,
    },
    /// Union over per-loss single attacks, each with `restarts` reruns; used
    /// for the best-of-all baseline and the upper-bound estimate.
    Ensemble {
        #[serde(default)]
        label: Option<String>,
        losses: Vec<LossId>,
        #[serde(default = "one")]
        restarts: usize,
    },
}

fn one() -> usize {
    1
}

impl AttackSpec {
    pub fn label(&self) -> String {
        match self {
            AttackSpec::Mos {
                label, k, losses, ..
            } => label
                .clone()
                .unwrap_or_else(|| format!("MOS-{}({k})", losses.len())),
            AttackSpec::Single {
                label,
                loss,
                restarts,
            } => label
                .clone()
                .unwrap_or_else(|| format!("APGD-{loss}({restarts})")),
            AttackSpec::Ensemble {
                label,
                losses,
                restarts,
            } => label
                .clone()
                .unwrap_or_else(|| format!("All-{}x{restarts}", losses.len())),
        }
    }

    fn k_or_restarts(&self) -> usize {
        match self {
            AttackSpec::Mos { k, .. } => *k,
            AttackSpec::Single { restarts, .. } | AttackSpec::Ensemble { restarts, .. } => {
                *restarts
            }
        }
    }
}

/// Full experiment description; this is the `attack` subcommand's config
/// file schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    pub attack: BaseAttackParams,
    #[serde(default)]
    pub grid: Vec<AttackSpec>,
    #[serde(default)]
    pub miner: MinerConfig,
    pub output_dir: PathBuf,
    #[serde(default = "yes")]
    pub write_traces: bool,
    #[serde(default = "yes")]
    pub write_loss_matrices: bool,
}

fn yes() -> bool {
    true
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub attack: String,
    pub k_or_restarts: usize,
    pub asr_percent: f64,
    pub mean_iterations_to_success: Option<f64>,
    pub wall_time_s: f64,
    pub numeric_failures: u64,
}

/// The experiment's summary table.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultsRow>,
}

impl ResultsTable {
    pub fn row(&self, attack: &str) -> Option<&ResultsRow> {
        self.rows.iter().find(|r| r.attack == attack)
    }

    /// Equality on everything except wall time, which is not deterministic.
    pub fn same_results(&self, other: &ResultsTable) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.attack == b.attack
                    && a.k_or_restarts == b.k_or_restarts
                    && a.asr_percent == b.asr_percent
                    && a.mean_iterations_to_success == b.mean_iterations_to_success
                    && a.numeric_failures == b.numeric_failures
            })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_to_err)?;
        w.write_record([
            "attack",
            "k_or_restarts",
            "asr_percent",
            "mean_iterations_to_success",
            "wall_time_s",
            "numeric_failures",
        ])
        .map_err(csv_to_err)?;
        for r in &self.rows {
            w.write_record([
                r.attack.clone(),
                r.k_or_restarts.to_string(),
                r.asr_percent.to_string(),
                r.mean_iterations_to_success
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
                r.wall_time_s.to_string(),
                r.numeric_failures.to_string(),
            ])
            .map_err(csv_to_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_to_err)?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_to_err)?;
            let offset = rec.position().map(|p| p.byte()).unwrap_or(0);
            let field = |i: usize| -> Result<&str> {
                rec.get(i).ok_or(Error::Parse {
                    offset,
                    detail: format!("missing column {i}"),
                })
            };
            let parse_f64 = |s: &str| -> Result<f64> {
                s.parse().map_err(|e| Error::Parse {
                    offset,
                    detail: format!("bad float {s:?}: {e}"),
                })
            };
            let mean = field(3)?;
            rows.push(ResultsRow {
                attack: field(0)?.to_string(),
                k_or_restarts: field(1)?.parse().map_err(|e| Error::Parse {
                    offset,
                    detail: format!("bad count: {e}"),
                })?,
                asr_percent: parse_f64(field(2)?)?,
                mean_iterations_to_success: if mean.is_empty() {
                    None
                } else {
                    Some(parse_f64(mean)?)
                },
                wall_time_s: parse_f64(field(4)?)?,
                numeric_failures: field(5)?.parse().map_err(|e| Error::Parse {
                    offset,
                    detail: format!("bad failure count: {e}"),
                })?,
            });
        }
        Ok(Self { rows })
    }
}

pub const LOSS_MATRIX_FORMAT: &str = "mos-loss-matrices";
pub const LOSS_MATRIX_VERSION: u32 = 1;

/// Loss-matrix artifact written for set attacks and consumed by the miner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossMatrixArtifact {
    pub format: String,
    pub version: u32,
    pub loss_ids: Vec<LossId>,
    pub k: usize,
    pub points: Vec<PointMatrix>,
}

/// One evaluated point's `m x K` loss values (rows follow `loss_ids`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointMatrix {
    pub index: usize,
    pub label: usize,
    pub values: Vec<Vec<f64>>,
}

impl LossMatrixArtifact {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json_pretty(self, path)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let art: LossMatrixArtifact =
            serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| Error::Parse {
                offset: 0,
                detail: e.to_string(),
            })?;
        if art.format != LOSS_MATRIX_FORMAT {
            return Err(Error::Parse {
                offset: 0,
                detail: format!("unexpected format tag {:?}", art.format),
            });
        }
        Ok(art)
    }

    /// CSV layout: `point,label,k` then one column per loss id; one row per
    /// `(point, member)` pair.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_to_err)?;
        let mut header = vec!["point".to_string(), "label".to_string(), "k".to_string()];
        header.extend(self.loss_ids.iter().map(|id| id.to_string()));
        w.write_record(&header).map_err(csv_to_err)?;
        for p in &self.points {
            for member in 0..self.k {
                let mut rec = vec![p.index.to_string(), p.label.to_string(), member.to_string()];
                for row in &p.values {
                    rec.push(row[member].to_string());
                }
                w.write_record(&rec).map_err(csv_to_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_to_err)?;
        let headers = r.headers().map_err(csv_to_err)?.clone();
        if headers.len() < 4
            || headers.get(0) != Some("point")
            || headers.get(1) != Some("label")
            || headers.get(2) != Some("k")
        {
            return Err(Error::Parse {
                offset: 0,
                detail: "expected header point,label,k,<loss ids...>".into(),
            });
        }
        let loss_ids: Vec<LossId> = headers
            .iter()
            .skip(3)
            .map(|h| {
                h.parse::<u8>()
                    .map_err(|e| Error::Parse {
                        offset: 0,
                        detail: format!("bad loss id {h:?}: {e}"),
                    })
                    .and_then(LossId::new)
            })
            .collect::<Result<_>>()?;
        let m = loss_ids.len();
        let mut points: Vec<PointMatrix> = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_to_err)?;
            let offset = rec.position().map(|p| p.byte()).unwrap_or(0);
            let bad = |d: String| Error::Parse { offset, detail: d };
            let index: usize = rec[0].parse().map_err(|e| bad(format!("point: {e}")))?;
            let label: usize = rec[1].parse().map_err(|e| bad(format!("label: {e}")))?;
            let member: usize = rec[2].parse().map_err(|e| bad(format!("k: {e}")))?;
            if points.last().map(|p| p.index) != Some(index) {
                points.push(PointMatrix {
                    index,
                    label,
                    values: vec![Vec::new(); m],
                });
            }
            let pm = points.last_mut().unwrap();
            if member != pm.values[0].len() {
                return Err(bad(format!("out-of-order member {member}")));
            }
            for (i, row) in pm.values.iter_mut().enumerate() {
                row.push(rec[3 + i].parse().map_err(|e| bad(format!("value: {e}")))?);
            }
        }
        let k = points.first().map(|p| p.values[0].len()).unwrap_or(0);
        Ok(Self {
            format: LOSS_MATRIX_FORMAT.to_string(),
            version: LOSS_MATRIX_VERSION,
            loss_ids,
            k,
            points,
        })
    }
}

/// Everything `run_experiment` produces in memory.
#[derive(Debug)]
pub struct ExperimentOutput {
    pub table: ResultsTable,
    pub model: ClassifierWeights,
    pub clean_accuracy: f64,
    pub output_dir: PathBuf,
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn csv_to_err(e: csv::Error) -> Error {
    Error::Parse {
        offset: e.position().map(|p| p.byte()).unwrap_or(0),
        detail: e.to_string(),
    }
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.parse().map_err(|e| {
            Error::InvalidArgument(format!("{WORKERS_ENV}={v:?} is not a worker count: {e}"))
        })?;
        if n > 0 {
            builder = builder.num_threads(n);
        }
    }
    builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

/// Per-point result of one grid entry.
struct PointResult {
    success: bool,
    iterations_to_success: Option<usize>,
    failures: u64,
    loss_values: Option<LossMatrix>,
    traces: Vec<(usize, Vec<crate::attack::TracePoint>)>,
}

fn summarize_point(
    outcomes: Vec<(usize, AttackOutcome)>,
    clean_wrong: bool,
    keep_matrix: bool,
) -> PointResult {
    let any_attack_success = outcomes.iter().any(|(_, o)| o.success);
    let iterations_to_success = if clean_wrong {
        Some(0)
    } else {
        outcomes
            .iter()
            .filter_map(|(_, o)| o.first_success.map(|s| s.iteration))
            .min()
    };
    PointResult {
        success: clean_wrong || any_attack_success,
        iterations_to_success,
        failures: outcomes.iter().filter(|(_, o)| o.failure.is_some()).count() as u64,
        loss_values: if keep_matrix {
            outcomes.first().and_then(|(_, o)| o.loss_values.clone())
        } else {
            None
        },
        traces: outcomes
            .into_iter()
            .map(|(restart, o)| (restart, o.trace))
            .collect(),
    }
}

fn run_grid_entry(
    spec: &AttackSpec,
    model: &ClassifierWeights,
    eval: &Dataset,
    clean_wrong: &[bool],
    base: &BaseAttackParams,
) -> Result<Vec<PointResult>> {
    let label = spec.label();
    let lcode = label_code(&label);
    eval.points
        .par_iter()
        .enumerate()
        .map(|(idx, point)| -> Result<PointResult> {
            let mut outcomes: Vec<(usize, AttackOutcome)> = Vec::new();
            match spec {
                AttackSpec::Mos {
                    k,
                    losses,
                    restarts,
                    ..
                } => {
                    for r in 0..*restarts {
                        let seed = derive_seed(base.seed, &[lcode, idx as u64, r as u64]);
                        let cfg = base.to_config(losses.clone(), *k, seed);
                        outcomes.push((r, mos_attack(model, point, &cfg)?));
                    }
                }
                AttackSpec::Single { loss, restarts, .. } => {
                    for r in 0..*restarts {
                        let seed = derive_seed(base.seed, &[lcode, idx as u64, r as u64]);
                        let cfg = base.to_config(vec![*loss], 1, seed);
                        outcomes.push((r, apgd_single(model, point, *loss, &cfg)?));
                    }
                }
                AttackSpec::Ensemble {
                    losses, restarts, ..
                } => {
                    for &loss in losses {
                        for r in 0..*restarts {
                            let seed = derive_seed(
                                base.seed,
                                &[lcode, idx as u64, u8::from(loss) as u64, r as u64],
                            );
                            let cfg = base.to_config(vec![loss], 1, seed);
                            outcomes.push((r, apgd_single(model, point, loss, &cfg)?));
                        }
                    }
                }
            }
            Ok(summarize_point(
                outcomes,
                clean_wrong[idx],
                matches!(spec, AttackSpec::Mos { .. }),
            ))
        })
        .collect()
}

fn write_traces(path: &Path, results: &[PointResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_to_err)?;
    w.write_record([
        "point",
        "restart",
        "iteration",
        "objective",
        "objective_best",
        "eta",
        "success",
    ])
    .map_err(csv_to_err)?;
    for (idx, pr) in results.iter().enumerate() {
        for (restart, trace) in &pr.traces {
            for t in trace {
                w.write_record([
                    idx.to_string(),
                    restart.to_string(),
                    t.iteration.to_string(),
                    t.objective.to_string(),
                    t.objective_best.to_string(),
                    t.eta.to_string(),
                    (t.success as u8).to_string(),
                ])
                .map_err(csv_to_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Train (or load) the model, run every grid entry over the held-out split,
/// and write all artifacts into `output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let eval = cfg.dataset.eval_set();

    let (model, clean_accuracy) = match &cfg.model.weights_path {
        Some(p) => {
            let m = ClassifierWeights::load(p)?;
            let acc = m.accuracy(&cfg.dataset.train_set())?;
            (m, acc)
        }
        None => {
            let train = cfg.dataset.train_set();
            let mut dims = vec![cfg.dataset.dim];
            dims.extend(&cfg.model.hidden);
            dims.push(cfg.dataset.classes);
            let tc = TrainConfig {
                layer_dims: dims,
                seed: cfg.model.train_seed,
                epochs: cfg.model.epochs,
                step_size: cfg.model.step_size,
                batch_size: cfg.model.batch_size,
                adversarial_epsilon: cfg.attack.epsilon,
                adversarial_steps: 10,
            };
            let out = train_toy(&tc, &train, cfg.model.adversarial)?;
            (out.weights, out.clean_accuracy)
        }
    };
    model.save(&cfg.output_dir.join("model.bin"))?;

    let clean_wrong: Vec<bool> = eval
        .points
        .iter()
        .map(|p| Ok(model.predict(&p.x)? != p.y))
        .collect::<Result<_>>()?;
    let clean_errors = clean_wrong.iter().filter(|&&b| b).count();

    let mut table = ResultsTable::default();
    table.rows.push(ResultsRow {
        attack: "clean".into(),
        k_or_restarts: 0,
        asr_percent: 100.0 * clean_errors as f64 / eval.points.len().max(1) as f64,
        mean_iterations_to_success: None,
        wall_time_s: 0.0,
        numeric_failures: 0,
    });

    let pool = worker_pool()?;
    for spec in &cfg.grid {
        let started = Instant::now();
        let results =
            pool.install(|| run_grid_entry(spec, &model, &eval, &clean_wrong, &cfg.attack))?;
        let wall = started.elapsed().as_secs_f64();

        let successes = results.iter().filter(|r| r.success).count();
        let iters: Vec<usize> = results
            .iter()
            .filter_map(|r| {
                if r.success {
                    r.iterations_to_success
                } else {
                    None
                }
            })
            .collect();
        let label = spec.label();
        table.rows.push(ResultsRow {
            attack: label.clone(),
            k_or_restarts: spec.k_or_restarts(),
            asr_percent: 100.0 * successes as f64 / eval.points.len().max(1) as f64,
            mean_iterations_to_success: if iters.is_empty() {
                None
            } else {
                Some(iters.iter().sum::<usize>() as f64 / iters.len() as f64)
            },
            wall_time_s: wall,
            numeric_failures: results.iter().map(|r| r.failures).sum(),
        });

        let safe = sanitize(&label);
        if cfg.write_traces {
            let dir = cfg.output_dir.join("traces");
            std::fs::create_dir_all(&dir)?;
            write_traces(&dir.join(format!("{safe}.csv")), &results)?;
        }
        if cfg.write_loss_matrices {
            if let AttackSpec::Mos { k, losses, .. } = spec {
                let dir = cfg.output_dir.join("loss_matrices");
                std::fs::create_dir_all(&dir)?;
                let artifact = LossMatrixArtifact {
                    format: LOSS_MATRIX_FORMAT.to_string(),
                    version: LOSS_MATRIX_VERSION,
                    loss_ids: losses.clone(),
                    k: *k,
                    points: results
                        .iter()
                        .enumerate()
                        .filter_map(|(idx, r)| {
                            r.loss_values.as_ref().map(|f| PointMatrix {
                                index: idx,
                                label: eval.points[idx].y,
                                values: (0..f.m()).map(|i| f.row(i).to_vec()).collect(),
                            })
                        })
                        .collect(),
                };
                artifact.write_json(&dir.join(format!("{safe}.json")))?;
                artifact.write_csv(&dir.join(format!("{safe}.csv")))?;
            }
        }
    }

    table.write_csv(&cfg.output_dir.join("results.csv"))?;
    write_json_pretty(&table, &cfg.output_dir.join("results.json"))?;

    Ok(ExperimentOutput {
        table,
        model,
        clean_accuracy,
        output_dir: cfg.output_dir.clone(),
    })
}

/// Mine synergy patterns from a loss-matrix artifact (`.json` or `.csv`).
pub fn run_miner(artifact_path: &Path, cfg: &MinerConfig) -> Result<PatternHistogram> {
    let artifact = match artifact_path.extension().and_then(|e| e.to_str()) {
        Some("csv") => LossMatrixArtifact::read_csv(artifact_path)?,
        _ => LossMatrixArtifact::read_json(artifact_path)?,
    };
    let pool = worker_pool()?;
    let records: Vec<PatternRecord> = pool.install(|| {
        artifact
            .points
            .par_iter()
            .map(|p| -> Result<PatternRecord> {
                let f = LossMatrix::from_rows(p.values.clone())?;
                let fbar = normalize_losses(&f);
                let beta = mine_dominant(&fbar, cfg)?;
                extract_patterns(&fbar, &beta, cfg)
            })
            .collect::<Result<_>>()
    })?;
    Ok(aggregate_patterns(&records, artifact.loss_ids.len()))
}

/// Pattern histogram serialized with its >= 1% filtered view.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatternReport {
    pub total: u64,
    pub all_losses_percent: f64,
    pub patterns: Vec<crate::miner::PatternCount>,
    /// Patterns accounting for at least 1% of dominant examples.
    pub filtered_1_percent: Vec<crate::miner::PatternCount>,
}

impl PatternReport {
    pub fn from_histogram(h: &PatternHistogram) -> Self {
        Self {
            total: h.total,
            all_losses_percent: h.all_losses_percent,
            patterns: h.patterns.clone(),
            filtered_1_percent: h.filtered(1.0).into_iter().cloned().collect(),
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json_pretty(self, path)
    }
}

/// One probe measurement: wall time of a set-objective gradient at set size
/// `k` versus `k` independent single-loss gradient steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeRow {
    pub k: usize,
    pub losses: usize,
    pub set_step_ms: f64,
    pub single_total_ms: f64,
    pub ratio: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Time one full set-objective gradient against `k` single-loss gradient
/// steps on the same model; monotonic-clock medians of 5 repeats, each
/// repeat amortized over a fixed inner batch so individual samples are well
/// above scheduler noise. The model is read-only throughout.
pub fn gradient_cost_probe(
    model: &ClassifierWeights,
    ks: &[usize],
    loss_ids: &[LossId],
) -> Result<Vec<ProbeRow>> {
    const REPEATS: usize = 5;
    const INNER: usize = 100;
    let dim = model.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let x: Vec<f64> = (0..dim).map(|_| rng.random_range(0.3..0.7)).collect();
    let point = LabeledPoint { x, y: 0 };
    let mu = 1.0;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == 0 {
            return Err(Error::InvalidArgument("probe needs k >= 1".into()));
        }
        let deltas: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dim).map(|_| rng.random_range(-0.1..0.1)).collect())
            .collect();
        let set = PerturbationSet::new(deltas.clone())?;

        let mut set_times = Vec::with_capacity(REPEATS);
        for _ in 0..REPEATS {
            let t = Instant::now();
            for _ in 0..INNER {
                let out = grad_set_objective(model, &point, &set, loss_ids, mu)?;
                std::hint::black_box(&out.grads);
            }
            set_times.push(t.elapsed().as_secs_f64() * 1e3 / INNER as f64);
        }

        let mut single_times = Vec::with_capacity(REPEATS);
        for _ in 0..REPEATS {
            let t = Instant::now();
            for _ in 0..INNER {
                for (i, delta) in deltas.iter().enumerate() {
                    let loss = loss_ids[i % loss_ids.len()];
                    let xk: Vec<f64> = point.x.iter().zip(delta).map(|(a, b)| a + b).collect();
                    let ctx = LogitContext::new(model.forward(&xk)?, point.y)?;
                    // A real single-loss attack step needs the value too
                    // (for best-so-far bookkeeping), so the fair baseline is
                    // the fused evaluation.
                    let (_, g) = losses::eval_loss_and_grad(loss, &ctx)?;
                    let grad = model.backward_input(&xk, &g)?;
                    std::hint::black_box(&grad);
                }
            }
            single_times.push(t.elapsed().as_secs_f64() * 1e3 / INNER as f64);
        }

        let set_ms = median(set_times);
        let single_ms = median(single_times);
        rows.push(ProbeRow {
            k,
            losses: loss_ids.len(),
            set_step_ms: set_ms,
            single_total_ms: single_ms,
            ratio: set_ms / single_ms,
        });
    }
    Ok(rows)
}

pub fn write_probe_csv(rows: &[ProbeRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_to_err)?;
    w.write_record(["k", "losses", "set_step_ms", "single_total_ms", "ratio"])
        .map_err(csv_to_err)?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.losses.to_string(),
            r.set_step_ms.to_string(),
            r.single_total_ms.to_string(),
            r.ratio.to_string(),
        ])
        .map_err(csv_to_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Merge several results tables into one CSV plus a plot-ready long-format
/// CSV (`source,attack,k_or_restarts,metric,value`).
pub fn merge_reports(inputs: &[PathBuf], merged_csv: &Path, long_csv: &Path) -> Result<()> {
    let mut merged = csv::Writer::from_path(merged_csv).map_err(csv_to_err)?;
    merged
        .write_record([
            "source",
            "attack",
            "k_or_restarts",
            "asr_percent",
            "mean_iterations_to_success",
            "wall_time_s",
            "numeric_failures",
        ])
        .map_err(csv_to_err)?;
    let mut long = csv::Writer::from_path(long_csv).map_err(csv_to_err)?;
    long.write_record(["source", "attack", "k_or_restarts", "metric", "value"])
        .map_err(csv_to_err)?;
    for input in inputs {
        let table = ResultsTable::read_csv(input)?;
        let source = input
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("results")
            .to_string();
        for r in &table.rows {
            merged
                .write_record([
                    source.clone(),
                    r.attack.clone(),
                    r.k_or_restarts.to_string(),
                    r.asr_percent.to_string(),
                    r.mean_iterations_to_success
                        .map(|v| v.to_string())
                        .unwrap_or_default(),
                    r.wall_time_s.to_string(),
                    r.numeric_failures.to_string(),
                ])
                .map_err(csv_to_err)?;
            let metrics = [
                ("asr_percent", Some(r.asr_percent)),
                ("mean_iterations_to_success", r.mean_iterations_to_success),
                ("wall_time_s", Some(r.wall_time_s)),
            ];
            for (name, value) in metrics {
                if let Some(v) = value {
                    long.write_record([
                        source.clone(),
                        r.attack.clone(),
                        r.k_or_restarts.to_string(),
                        name.to_string(),
                        v.to_string(),
                    ])
                    .map_err(csv_to_err)?;
                }
            }
        }
    }
    merged.flush()?;
    long.flush()?;
    Ok(())
}

/// Pretty-print any serializable value as JSON to `path`.
pub fn write_json_pretty<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Error::Parse {
        offset: 0,
        detail: e.to_string(),
    })?;
    f.flush()?;
    Ok(())
}
