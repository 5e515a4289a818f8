use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pta_core::data_synth::{generate_dataset, save_dataset, DataConfig};
use pta_core::eval_report::{emit_report, read_metrics_csv, MetricsRow};
use pta_core::plot::plot_report;
use pta_core::trainer::{
    build_specs, dump_latents, run_ablation, run_training, ExperimentConfig, TrainState,
};
use pta_core::{PtaError, Result};

#[derive(Parser)]
#[command(name = "pta", version, about = "Meta-weighted modality fusion with diffusion feature distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset operations.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train one variant under one seed.
    Train(TrainArgs),
    /// Train all three variants across a seed range and collect metrics.
    Ablate(AblateArgs),
    /// Aggregate per-run metrics into report tables.
    Report(ReportArgs),
    /// Render charts from a report table.
    Plot(PlotArgs),
    /// Export teacher/student/refined latents for inspection.
    DumpLatents(DumpLatentsArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Generate a dataset and persist it as manifest + f32 blobs.
    Gen(DataGenArgs),
}

#[derive(Args)]
struct DataGenArgs {
    /// Experiment config, or a bare dataset config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Continue from `state.json` in the output directory if present.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Inclusive range `a..b` or comma-separated list.
    #[arg(long, default_value = "0..4")]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding one subdirectory per run, each with a metrics.csv.
    #[arg(long)]
    runs: PathBuf,
    #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Report table (.csv or .json).
    #[arg(long)]
    report: PathBuf,
    /// Optional runs directory for weight-trajectory charts.
    #[arg(long)]
    runs: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpLatentsArgs {
    /// A run directory containing state.json.
    #[arg(long)]
    run: PathBuf,
    /// Comma-separated modality subset; defaults to all modalities.
    #[arg(long)]
    subset: Option<String>,
    #[arg(long, default_value_t = 16)]
    limit: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Accepts either a full experiment config or a bare dataset config.
fn load_data_config(path: &Path) -> Result<DataConfig> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("data").is_some() {
        let cfg: ExperimentConfig = serde_json::from_value(value)?;
        Ok(cfg.data)
    } else {
        Ok(serde_json::from_value(value)?)
    }
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let parse_one = |s: &str| -> Result<u64> {
        s.trim()
            .parse()
            .map_err(|e| PtaError::invalid(format!("bad seed '{s}': {e}")))
    };
    if let Some((a, b)) = text.split_once("..") {
        let (lo, hi) = (parse_one(a)?, parse_one(b)?);
        if lo > hi {
            return Err(PtaError::invalid(format!("empty seed range '{text}'")));
        }
        Ok((lo..=hi).collect())
    } else {
        text.split(',').map(parse_one).collect()
    }
}

fn collect_run_metrics(runs: &Path) -> Result<Vec<MetricsRow>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(runs)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("metrics.csv").exists())
        .collect();
    if dirs.is_empty() {
        return Err(PtaError::NotFound(format!(
            "no run directories with metrics.csv under {}",
            runs.display()
        )));
    }
    dirs.sort();
    let mut rows = Vec::new();
    for d in dirs {
        rows.extend(read_metrics_csv(&d.join("metrics.csv"))?);
    }
    rows.sort_by(|a, b| {
        (&a.variant, a.seed, a.subset.len(), &a.subset)
            .cmp(&(&b.variant, b.seed, b.subset.len(), &b.subset))
    });
    Ok(rows)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Data(DataCommand::Gen(args)) => {
            let config = load_data_config(&args.config)?;
            let dataset = generate_dataset(&config)?;
            save_dataset(&dataset, &args.out)?;
            println!(
                "wrote {} samples ({} train / {} val / {} test) to {}",
                dataset.n_samples(),
                dataset.train.len(),
                dataset.val.len(),
                dataset.test.len(),
                args.out.display()
            );
        }
        Command::Train(args) => {
            let config = ExperimentConfig::load(&args.config)?;
            let out = run_training(&config, args.seed, &args.out, args.resume)?;
            println!(
                "trained variant {} for {} steps; final weights {:?}",
                config.train.variant.as_str(),
                out.state.global_step,
                out.state.meta.weights()
            );
            println!("artifacts in {}", args.out.display());
        }
        Command::Ablate(args) => {
            let config = ExperimentConfig::load(&args.config)?;
            let seeds = parse_seeds(&args.seeds)?;
            let rows = run_ablation(&config, &seeds, Some(&args.out))?;
            pta_core::eval_report::write_metrics_csv(&args.out.join("metrics.csv"), &rows)?;
            println!(
                "ran {} (variant, seed) jobs; {} metric rows under {}",
                3 * seeds.len(),
                rows.len(),
                args.out.display()
            );
        }
        Command::Report(args) => {
            let rows = collect_run_metrics(&args.runs)?;
            emit_report(&args.out, &rows)?;
            let primary = match args.format.as_str() {
                "json" => args.out.join("table.json"),
                _ => args.out.join("table.csv"),
            };
            println!("aggregated {} rows into {}", rows.len(), primary.display());
        }
        Command::Plot(args) => {
            let summary = plot_report(&args.report, args.runs.as_deref(), &args.out)?;
            for f in summary.bar_files.iter().chain(&summary.trajectory_files) {
                println!("wrote {}", f.display());
            }
            for s in &summary.skipped {
                eprintln!("warning: skipped trajectory for {s}");
            }
        }
        Command::DumpLatents(args) => {
            let state = TrainState::load(&args.run.join("state.json"))?;
            let dataset = generate_dataset(&state.config.data)?;
            let specs = build_specs(&state.config, &dataset)?;
            let subset: Vec<String> = match &args.subset {
                Some(s) => s.split(',').map(|m| m.trim().to_string()).collect(),
                None => specs.modality_order.clone(),
            };
            let bundles = dump_latents(&state, &specs, &dataset.test, &subset, args.limit)?;
            std::fs::write(&args.out, serde_json::to_string_pretty(&bundles)?)?;
            println!("wrote {} latent bundles to {}", bundles.len(), args.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
