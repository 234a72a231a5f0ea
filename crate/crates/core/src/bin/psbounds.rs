use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use psbounds::bounds::{OutcomeRange, RangePolicy};
use psbounds::data::{load_frame, FrameSchema, StudyFrame};
use psbounds::report::{
    analyze, load_grid, overlap_report, render_overlap, render_table, to_json, write_file, write_sweep_outputs,
    AnalysisOptions,
};
use psbounds::simulation::run_sweep_timed;
use psbounds::stratification::StrataRule;

#[derive(Parser)]
#[command(name = "psbounds", version, about = "Bounds on population treatment effects from a sampled study")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the sampling propensity model and report unstratified and stratified bounds.
    Analyze(AnalyzeArgs),
    /// Run a simulation grid and write sweep tables.
    Simulate(SimulateArgs),
    /// Report the overlap of sample and population propensity scores.
    Overlap(OverlapArgs),
}

#[derive(Args)]
struct FrameArgs {
    /// CSV with columns id, z, w, y and the covariates.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated covariate columns (default: every other column).
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    #[arg(long, default_value = "id")]
    id_column: String,
    #[arg(long, default_value = "z")]
    z_column: String,
    #[arg(long, default_value = "w")]
    w_column: String,
    #[arg(long, default_value = "y")]
    y_column: String,
    /// Penalize the propensity model instead of failing on separation.
    #[arg(long)]
    ridge: bool,
}

impl FrameArgs {
    fn load(&self) -> anyhow::Result<StudyFrame> {
        let schema = FrameSchema {
            id: self.id_column.clone(),
            z: self.z_column.clone(),
            w: self.w_column.clone(),
            y: self.y_column.clone(),
            covariates: self.covariates.clone(),
        };
        load_frame(&self.data, &schema).with_context(|| format!("loading {}", self.data.display()))
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    frame: FrameArgs,
    /// Known outcome range as LO:HI.
    #[arg(long, allow_hyphen_values = true)]
    range: OutcomeRange,
    #[arg(long, default_value_t = 5)]
    kmax: usize,
    #[arg(long, default_value_t = 1)]
    min_treated: usize,
    #[arg(long, default_value_t = 1)]
    min_control: usize,
    #[arg(long, default_value_t = RangePolicy::StratumEmpirical)]
    policy: RangePolicy,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Grid file (JSON or TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides every design point's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct OverlapArgs {
    #[command(flatten)]
    frame: FrameArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_json(path: &Path, json: String) -> anyhow::Result<()> {
    write_file(path, &(json + "\n"))?;
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> anyhow::Result<()> {
    let frame = args.frame.load()?;
    let options = AnalysisOptions {
        range: args.range,
        rule: StrataRule {
            k_max: args.kmax,
            min_treated: args.min_treated,
            min_control: args.min_control,
        },
        policy: args.policy,
        ridge: args.frame.ridge,
    };
    let report = analyze(&frame, &options)?;
    if let Some(out) = &args.out {
        write_json(out, to_json(&report)?)?;
    }
    print!("{}", render_table(&report));
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let mut grid = load_grid(&args.config)?;
    if let Some(seed) = args.seed {
        grid.seed = Some(seed);
        for point in &mut grid.points {
            point.seed = seed;
        }
    }
    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let (result, timing) = run_sweep_timed(&grid.points, workers)?;
    write_sweep_outputs(&result, grid.seed, &timing, &args.out)?;

    let failed = result.failed_points().count();
    println!(
        "{} design points, {} failed, {:.1}s on {} workers; outputs in {}",
        result.points.len(),
        failed,
        timing.elapsed_seconds,
        workers,
        args.out.display()
    );
    for p in result.failed_points() {
        eprintln!(
            "design point {} failed ({} replications): {}",
            p.index,
            p.failures,
            p.failure_reasons.first().map_or("", String::as_str)
        );
    }
    if result.success_share() < 0.9 {
        anyhow::bail!("only {:.0}% of design points succeeded", 100.0 * result.success_share());
    }
    Ok(())
}

fn cmd_overlap(args: OverlapArgs) -> anyhow::Result<()> {
    let frame = args.frame.load()?;
    let stat = overlap_report(&frame, args.frame.ridge)?;
    if let Some(out) = &args.out {
        write_json(out, to_json(&stat)?)?;
    }
    print!("{}", render_overlap(&stat));
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.downcast_ref::<psbounds::Error>().map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Overlap(args) => cmd_overlap(args),
    };
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
