//! `mos` — train toy classifiers, run multi-loss set attacks, mine loss
//! synergy patterns, probe gradient costs, and merge reports.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mos_attack::classifier::{train_toy, ClassifierWeights, Dataset, TrainConfig};
use mos_attack::harness::{
    gradient_cost_probe, merge_reports, run_experiment, run_miner, write_json_pretty,
    write_probe_csv, ExperimentConfig, PatternReport,
};
use mos_attack::losses::LossId;
use mos_attack::miner::MinerConfig;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "mos",
    about = "Multi-objective set-based adversarial attack toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load) a dataset and train a classifier to a weight file.
    Train(TrainArgs),
    /// Run an experiment config: train/load the model, sweep the attack
    /// grid, write results and artifacts.
    Attack(AttackArgs),
    /// Mine loss synergy patterns from a loss-matrix artifact.
    Mine(MineArgs),
    /// Compare the cost of one set-objective gradient step against
    /// independent single-loss steps.
    Probe(ProbeArgs),
    /// Merge results tables into a combined CSV and a plot-ready long CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Output weight file.
    #[arg(long)]
    out: PathBuf,
    /// Dataset seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of training points.
    #[arg(long, default_value_t = 1500)]
    points: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Blob noise level.
    #[arg(long, default_value_t = 0.08)]
    sigma: f64,
    /// Hidden layer widths, comma separated.
    #[arg(long, default_value = "16", value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 0.25)]
    step_size: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Train on PGD-perturbed batches.
    #[arg(long)]
    adversarial: bool,
    /// Perturbation budget for adversarial training.
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Load the training set from a CSV instead of generating blobs.
    #[arg(long)]
    from_dataset: Option<PathBuf>,
    /// Also write the generated dataset as CSV.
    #[arg(long)]
    export_dataset: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    /// Experiment config JSON.
    #[arg(long, required_unless_present = "emit_template")]
    config: Option<PathBuf>,
    /// Override the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Write a starter config to this path and exit.
    #[arg(long)]
    emit_template: Option<PathBuf>,
}

#[derive(Args)]
struct MineArgs {
    /// Loss-matrix artifact (.json or .csv).
    #[arg(long)]
    input: PathBuf,
    /// Output pattern report JSON.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Binarization threshold T.
    #[arg(long, default_value_t = 0.85)]
    threshold: f64,
    /// Contribution threshold C.
    #[arg(long, default_value_t = 0.75)]
    contribution: f64,
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
}

#[derive(Args)]
struct ProbeArgs {
    /// Weight file of the probed model.
    #[arg(long)]
    model: PathBuf,
    /// Set sizes to probe, comma separated.
    #[arg(long, default_value = "1,4,8", value_delimiter = ',')]
    k: Vec<usize>,
    /// Loss ids to include, comma separated.
    #[arg(long, default_value = "0,1,2,3,4,5,6,7", value_delimiter = ',')]
    losses: Vec<u8>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// results.csv files to merge.
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    inputs: Vec<PathBuf>,
    /// Merged wide-format CSV.
    #[arg(long)]
    out: PathBuf,
    /// Plot-ready long-format CSV.
    #[arg(long)]
    long: PathBuf,
}

fn parse_losses(ids: &[u8]) -> Result<Vec<LossId>> {
    ids.iter()
        .map(|&id| LossId::new(id).map_err(Into::into))
        .collect()
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let data = match &args.from_dataset {
        Some(path) => Dataset::from_csv(path)
            .with_context(|| format!("reading dataset {}", path.display()))?,
        None => Dataset::gaussian_blobs(args.seed, args.points, args.dim, args.classes, args.sigma),
    };
    if let Some(path) = &args.export_dataset {
        data.to_csv(path)?;
        println!("dataset: {} ({} points)", path.display(), data.points.len());
    }
    let mut dims = vec![data.dim];
    dims.extend(&args.hidden);
    dims.push(data.classes);
    let cfg = TrainConfig {
        layer_dims: dims,
        seed: args.seed,
        epochs: args.epochs,
        step_size: args.step_size,
        batch_size: args.batch_size,
        adversarial_epsilon: args.epsilon,
        adversarial_steps: 10,
    };
    let out = train_toy(&cfg, &data, args.adversarial)?;
    out.weights.save(&args.out)?;
    println!(
        "model: {} (clean accuracy {:.4}{})",
        args.out.display(),
        out.clean_accuracy,
        if args.adversarial {
            ", adversarial"
        } else {
            ""
        }
    );
    Ok(())
}

fn cmd_attack(args: AttackArgs) -> Result<()> {
    if let Some(path) = &args.emit_template {
        let template = ExperimentConfig {
            dataset: Default::default(),
            model: Default::default(),
            attack: mos_attack::harness::BaseAttackParams::new(0.1),
            grid: vec![
                mos_attack::harness::AttackSpec::Single {
                    label: None,
                    loss: LossId::new(0)?,
                    restarts: 1,
                },
                mos_attack::harness::AttackSpec::Mos {
                    label: None,
                    k: 5,
                    losses: LossId::ALL.to_vec(),
                    restarts: 1,
                },
            ],
            miner: MinerConfig::default(),
            output_dir: PathBuf::from("results"),
            write_traces: true,
            write_loss_matrices: true,
        };
        write_json_pretty(&template, path)?;
        println!("template: {}", path.display());
        return Ok(());
    }
    let config = args.config.expect("clap enforces --config");
    let raw = std::fs::read_to_string(&config)
        .with_context(|| format!("reading config {}", config.display()))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&raw).context("parsing experiment config")?;
    if let Some(dir) = args.output_dir {
        cfg.output_dir = dir;
    }
    let out = run_experiment(&cfg)?;
    println!(
        "model clean accuracy {:.4}; results in {}",
        out.clean_accuracy,
        out.output_dir.display()
    );
    for r in &out.table.rows {
        let iters = r
            .mean_iterations_to_success
            .map(|v| format!("{v:.2}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:>20}  k/restarts {:>2}  ASR {:>6.2}%  mean-iters {:>6}  wall {:.2}s",
            r.attack, r.k_or_restarts, r.asr_percent, iters, r.wall_time_s
        );
    }
    Ok(())
}

fn cmd_mine(args: MineArgs) -> Result<()> {
    let cfg = MinerConfig {
        lambda: args.lambda,
        binarize_threshold: args.threshold,
        contribution_threshold: args.contribution,
        mu: args.mu,
        ..MinerConfig::default()
    };
    let histogram = run_miner(&args.input, &cfg)?;
    let report = PatternReport::from_histogram(&histogram);
    report.write_json(&args.out)?;
    println!(
        "{} dominant examples, {:.1}% touch every loss; report: {}",
        report.total,
        report.all_losses_percent,
        args.out.display()
    );
    for p in &report.filtered_1_percent {
        println!("  {:>12}  {:>6}  {:>6.2}%", p.key, p.count, p.percent);
    }
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    if args.k.is_empty() {
        bail!("need at least one set size");
    }
    let model = ClassifierWeights::load(&args.model)?;
    let losses = parse_losses(&args.losses)?;
    let rows = gradient_cost_probe(&model, &args.k, &losses)?;
    write_probe_csv(&rows, &args.out)?;
    println!("probe ({} losses): {}", losses.len(), args.out.display());
    for r in &rows {
        println!(
            "  K={:<2} set {:.3} ms vs {} singles {:.3} ms  ratio {:.3}",
            r.k, r.set_step_ms, r.k, r.single_total_ms, r.ratio
        );
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    merge_reports(&args.inputs, &args.out, &args.long)?;
    println!(
        "merged {} tables into {} and {}",
        args.inputs.len(),
        args.out.display(),
        args.long.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => cmd_train(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Mine(args) => cmd_mine(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Report(args) => cmd_report(args),
    }
}
