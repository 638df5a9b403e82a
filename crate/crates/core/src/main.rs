use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, LevelFilter};

use osumcs::glm::GlmFamily;
use osumcs::harness::{self, ExperimentConfig, OutputFormat, RealDataConfig, RunSettings};
use osumcs::scenarios::{Design, ScenarioSpec};
use osumcs::{Error, Method};

#[derive(Parser, Debug)]
#[command(name = "osumcs", version, about = "Surrogate-assisted optimal subsampling experiments")]
struct Cli {
    /// Print progress information.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte-Carlo sweep over a simulation scenario.
    Simulate(SimulateArgs),
    /// Subsampling experiment on a numeric CSV file.
    Realdata(RealdataArgs),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, value_delimiter = ',', default_value = "osumcs,osumc,unif")]
    methods: Vec<String>,
    #[arg(long = "n-grid", value_delimiter = ',', default_value = "1000,1500,2000")]
    n_grid: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    n0: usize,
    #[arg(long, default_value_t = 50)]
    reps: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "csv")]
    format: String,
    /// `off` reports the inverse-probability-weighted estimate without the
    /// surrogate correction.
    #[arg(long, default_value = "on")]
    augment: String,
    /// Worker threads for replications (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    family: Option<String>,
    #[arg(long = "N", default_value_t = 20_000)]
    big_n: usize,
    /// N = 100000 and n from 1000 to 2000 in steps of 100.
    #[arg(long = "full-scale")]
    full_scale: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct RealdataArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long = "train-size", default_value_t = 19_000)]
    train_size: usize,
    /// Response column name (default: last column).
    #[arg(long)]
    response: Option<String>,
    /// Do not prepend an intercept column.
    #[arg(long = "no-intercept")]
    no_intercept: bool,
    #[command(flatten)]
    common: Common,
}

fn settings(c: &Common, full_scale: bool) -> Result<(RunSettings, OutputFormat), Error> {
    let methods = c.methods.iter().map(|m| m.parse()).collect::<Result<Vec<Method>, _>>()?;
    let n_grid = if full_scale { (1000..=2000).step_by(100).collect() } else { c.n_grid.clone() };
    let augment = match c.augment.to_ascii_lowercase().as_str() {
        "on" => true,
        "off" => false,
        other => return Err(Error::Config(format!("--augment expects on|off, got '{other}'"))),
    };
    let mut s = RunSettings::new(methods, n_grid, c.n0, c.reps, c.seed);
    s.augment = augment;
    s.workers = c.workers;
    Ok((s, c.format.parse()?))
}

fn is_config(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::Dimension(_))
}

fn simulate(a: &SimulateArgs) -> Result<(), Error> {
    let design: Design = a.scenario.parse()?;
    let family = a.family.as_deref().map(str::parse::<GlmFamily>).transpose()?;
    let big_n = if a.full_scale { 100_000 } else { a.big_n };
    let (settings, format) = settings(&a.common, a.full_scale)?;
    let config = ExperimentConfig {
        scenario: ScenarioSpec::new(design, family, big_n),
        settings,
    };
    config.validate()?;
    info!("simulating {design} with N = {big_n}");
    let rows = harness::run_sweep(&config)?;
    harness::emit_results(&rows, format, &a.common.out)
}

fn realdata(a: &RealdataArgs) -> Result<(), Error> {
    let (settings, format) = settings(&a.common, false)?;
    let data = harness::read_real_data(&a.csv, a.response.as_deref(), !a.no_intercept)?;
    info!("read {} rows, {} features", data.y.len(), data.x.ncols());
    let config = RealDataConfig {
        train_size: a.train_size,
        settings,
    };
    let rows = harness::real_data_mode(&data, &config)?;
    harness::emit_results(&rows, format, &a.common.out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { LevelFilter::Info } else { LevelFilter::Warn })
        .init();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Realdata(a) => realdata(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config(&e) { 1 } else { 2 })
        }
    }
}
