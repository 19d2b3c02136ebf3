use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use pmbtrack::experiments::{
    preset, run_experiment, write_outputs, ExperimentConfig, GridContext, TraceRequest, PRESETS,
};

#[derive(Parser)]
#[command(name = "pmbtrack", version, about = "Poisson/multi-Bernoulli tracking experiments")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo experiment and write per-variant CSVs and a manifest.
    Run(RunArgs),
    /// Precompute the grid transition kernel into the cache directory.
    KernelBuild(SourceArgs),
    /// List the built-in presets, or print one as a TOML config.
    Presets {
        /// Print this preset's full configuration.
        #[arg(long)]
        show: Option<String>,
    },
}

#[derive(Args)]
struct SourceArgs {
    /// Built-in scenario.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    preset: Option<String>,
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where transition kernels are cached.
    #[arg(long, default_value = ".pmbtrack-cache")]
    kernel_cache: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Restrict to these variants (repeatable).
    #[arg(long)]
    variant: Vec<String>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write the run-0 track log of each variant.
    #[arg(long)]
    track_log: bool,
    /// Also write run-0 intensity heatmaps at these times (repeatable).
    #[arg(long = "heatmap-at")]
    heatmap_at: Vec<u32>,
}

fn load(source: &SourceArgs) -> pmbtrack::Result<ExperimentConfig> {
    match (&source.preset, &source.config) {
        (Some(name), _) => preset(name),
        (None, Some(path)) => ExperimentConfig::load(path),
        (None, None) => unreachable!("clap requires one source"),
    }
}

fn grid_context(config: &ExperimentConfig, cache: &Path) -> pmbtrack::Result<Option<GridContext>> {
    if !config.uses_grid() {
        return Ok(None);
    }
    let start = Instant::now();
    let ctx = GridContext::prepare(config, Some(cache))?;
    log::info!(
        "kernel ready ({} cells, {} entries) in {:.1?}",
        ctx.kernel.n_cells(),
        ctx.kernel.nnz(),
        start.elapsed()
    );
    Ok(Some(ctx))
}

fn run(args: RunArgs) -> pmbtrack::Result<()> {
    let mut config = load(&args.source)?;
    config.select_variants(&args.variant)?;
    if let Some(runs) = args.runs {
        config.runs = runs;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let grid = grid_context(&config, &args.source.kernel_cache)?;
    let request = TraceRequest {
        track_log: args.track_log,
        heatmap_times: args.heatmap_at,
    };
    let start = Instant::now();
    let table = run_experiment(&config, grid.as_ref(), &request)?;
    log::info!("{} runs finished in {:.1?}", config.runs, start.elapsed());
    for path in write_outputs(&config, &table, &args.out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn kernel_build(source: SourceArgs) -> pmbtrack::Result<()> {
    let config = load(&source)?;
    let req = config.kernel_request();
    let start = Instant::now();
    let kernel = req.load_or_build(&source.kernel_cache)?;
    log::info!("{} entries in {:.1?}", kernel.nnz(), start.elapsed());
    println!("{}", req.cache_path(&source.kernel_cache).display());
    Ok(())
}

fn presets(show: Option<String>) -> pmbtrack::Result<()> {
    match show {
        Some(name) => print!("{}", preset(&name)?.to_toml_string()?),
        None => {
            for name in PRESETS {
                let cfg = preset(name)?;
                let variants: Vec<_> = cfg.variants.iter().map(|v| v.name.as_str()).collect();
                println!("{name}\t{} steps\t{}", cfg.scenario.duration, variants.join(" "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::KernelBuild(source) => kernel_build(source),
        Command::Presets { show } => presets(show),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
