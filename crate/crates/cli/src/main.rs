use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use finslerlab_cli::commands::run;
use finslerlab_cli::report::{emit, Format};
use finslerlab_cli::spec::ExperimentSpec;
use finslerlab_cli::{configure_threads, CliError};

#[derive(Parser)]
#[command(name = "finslerlab", version, about = "Numerical experiments on Finsler and Riemannian scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Binet-Legendre metric of the fiber norm at a point
    Bl(Args),
    /// Check that parallel transport preserves the Finsler field
    Berwald(Args),
    /// Holonomy decomposition at a point
    Holonomy(Args),
    /// Fried metric distance bounds for point pairs
    Fried(Args),
    /// Per-point splitting diagnostics on a product scene
    Split(Args),
    /// Validate a scene and print its normalized form
    CheckScene(Args),
    /// Run the full acceptance battery
    Suite(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Built-in name, `name(key=value, ...)`, or a path to a .scene file
    #[arg(long)]
    scene: Option<String>,
    /// Comma-separated coordinates
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    point: Option<Vec<f64>>,
    /// Second point (fried)
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    y: Option<Vec<f64>>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Sample count: paths, point pairs, scan points or Monte Carlo samples
    #[arg(long)]
    samples: Option<usize>,
    /// Binet-Legendre integrator: lattice, monte-carlo or radial
    #[arg(long)]
    backend: Option<String>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Output file (stdout when absent)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn spec_of(cli: Cli) -> ExperimentSpec {
    let (name, a) = match cli.command {
        Command::Bl(a) => ("bl", a),
        Command::Berwald(a) => ("berwald", a),
        Command::Holonomy(a) => ("holonomy", a),
        Command::Fried(a) => ("fried", a),
        Command::Split(a) => ("split", a),
        Command::CheckScene(a) => ("check-scene", a),
        Command::Suite(a) => ("suite", a),
    };
    ExperimentSpec {
        command: name.into(),
        scene: a.scene,
        point: a.point,
        y: a.y,
        seed: a.seed,
        tol: a.tol,
        resolution: a.resolution,
        samples: a.samples,
        backend: a.backend,
        format: a.format,
        out: a.out,
    }
}

fn execute(spec: &ExperimentSpec) -> Result<bool, CliError> {
    configure_threads()?;
    let report = run(spec)?;
    emit(&report, spec.format, spec.out.as_deref())?;
    for c in report.failures() {
        eprintln!("FAIL {}: value {:?}, tolerance {}", c.name, c.value, c.tolerance);
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let spec = spec_of(cli);
    match execute(&spec) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
