//! `ael`: train, evaluate, and ablate adaptive equalization runs on the
//! synthetic benchmark.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use ael_core::config::RunConfig;
use ael_core::dataset::generate_train_val;
use ael_core::synth::SceneConfig;
use ael_core::trainer::{
    evaluate_checkpoint, render_report, resume, run_ablation, table4_rows, train, AblationRow,
    Split,
};

#[derive(Parser)]
#[command(
    name = "ael",
    version,
    about = "Semi-supervised segmentation training with confidence-bank-driven equalization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (full pipeline, baseline, or any component subset).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Run a component-flag ablation grid.
    Ablate(AblateArgs),
    /// Print the human-readable report of a run directory.
    Report(ReportArgs),
    /// Synthetic dataset tooling.
    #[command(subcommand)]
    Synthdata(SynthCommand),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single keys, e.g. `--set loss.gamma=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.set)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for checkpoints, metrics, and logs.
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint instead of starting fresh (the embedded
    /// config drives the run; --config/--set are rejected).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root; defaults to the checkpoint's `data.dir`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split to score.
    #[arg(long, default_value = "val")]
    split: String,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Seeds per grid row (consecutive, starting at the config seed).
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Use the full 8-row component grid.
    #[arg(long)]
    table4: bool,
    /// Extra grid rows as comma-separated flags (`dr,aes`; `none` = baseline).
    #[arg(long = "row", value_name = "FLAGS")]
    rows: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run or ablation output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Generate a train/val dataset of procedural scenes.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Dataset root; splits land in `<out>/train` and `<out>/val`.
    #[arg(long)]
    out: PathBuf,
    /// Number of training scenes.
    #[arg(long)]
    count: usize,
    /// Master seed of the dataset.
    #[arg(long)]
    seed: u64,
    /// Number of validation scenes (default: count / 4, at least 1).
    #[arg(long)]
    val_count: Option<usize>,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    /// Square scene side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 1.5)]
    tail_exponent: f64,
    #[arg(long, default_value_t = 3)]
    shapes_min: usize,
    #[arg(long, default_value_t = 6)]
    shapes_max: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Report(args) => cmd_report(args),
        Command::Synthdata(SynthCommand::Generate(args)) => cmd_generate(args),
    }
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let result = if let Some(checkpoint) = &args.resume {
        if args.config.config.is_some() || !args.config.set.is_empty() {
            bail!("--resume uses the checkpoint's embedded config; drop --config/--set");
        }
        resume(checkpoint, &args.out).context("resume failed")?
    } else {
        let cfg = args.config.resolve()?;
        train(&cfg, &args.out).context("training failed")?
    };
    println!(
        "done: {} steps, mIoU {:.4}, mIoU_tail {:.4} -> {}",
        result.metrics.steps,
        result.metrics.eval.miou,
        result.metrics.eval.miou_tail,
        result.out_dir.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let split = Split::parse(&args.split)?;
    let report = evaluate_checkpoint(&args.checkpoint, args.data.as_deref(), split)?;
    for (c, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("class {c:>3}: IoU {v:.4}"),
            None => println!("class {c:>3}: absent"),
        }
    }
    println!("mIoU {:.4}   mIoU_tail {:.4}", report.miou, report.miou_tail);
    if let Some(path) = &args.json {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let cfg = args.config.resolve()?;
    let mut rows: Vec<AblationRow> = Vec::new();
    if args.table4 {
        rows.extend(table4_rows());
    }
    for spec in &args.rows {
        rows.push(AblationRow::parse(spec)?);
    }
    let cells = run_ablation(&cfg, &rows, args.seeds, &args.out)?;
    println!("{} grid rows -> {}", cells.len(), args.out.join("table4.csv").display());
    let report = render_report(&args.out)?;
    print!("{report}");
    Ok(())
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    print!("{}", render_report(&args.out)?);
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<()> {
    let cfg = SceneConfig {
        classes: args.classes,
        height: args.size,
        width: args.size,
        tail_exponent: args.tail_exponent,
        shapes_min: args.shapes_min,
        shapes_max: args.shapes_max,
        color_noise_sigma: args.noise_sigma,
    };
    let val_count = args.val_count.unwrap_or((args.count / 4).max(1));
    generate_train_val(&args.out, &cfg, args.count, val_count, args.seed)?;
    println!(
        "wrote {} train + {} val scenes under {}",
        args.count,
        val_count,
        args.out.display()
    );
    Ok(())
}
