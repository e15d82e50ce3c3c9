// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, ValueEnum};

use sdemoments::odeint::Method;
use sdemoments_cli::config::SchemeKind;
use sdemoments_cli::{parse_bounds, run, CliError, Overrides, RunConfig, Subcommand};

/// Gaussian moment propagation for SDEs, with sampling and grid baselines.
#[derive(Parser, Debug)]
#[command(name = "sdemoments", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    flags: Flags,
}

#[derive(clap::Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Propagate mean and covariance with the linearized or matched moment ODEs.
    Propagate,
    /// Euler–Maruyama ensemble and its empirical moments.
    Sample,
    /// Evolve a density on a finite-difference grid.
    FpkGrid,
    /// Fit a GP vector field and dump it on a query grid.
    GpFit,
    /// Accuracy and timing comparison on independent Beneš SDEs.
    BenchBenes,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum MethodArg {
    Euler,
    Rk4,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SchemeArg {
    Linearized,
    Matched,
}

/// One parsed `--bounds` value. The alias stops clap from treating it as a repeated flag.
type AxisBounds = Vec<[f64; 2]>;

#[derive(Args, Debug)]
struct Flags {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for CSV artifacts and manifest.json.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap (1 runs sequentially).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Timed runs (and KL repeats for bench-benes) after one discarded warm-up.
    #[arg(long, global = true)]
    repeats: Option<usize>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    t0: Option<f64>,
    #[arg(long, global = true)]
    t1: Option<f64>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, global = true, value_enum)]
    scheme: Option<SchemeArg>,
    /// Ensemble size for sample.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Also write every sample path to paths.csv.
    #[arg(long, global = true)]
    dump_paths: bool,
    /// Grid bounds as lo:hi[,lo:hi].
    #[arg(long, global = true, allow_hyphen_values = true, value_parser = parse_bounds)]
    bounds: Option<AxisBounds>,
    /// Nodes per grid axis.
    #[arg(long, global = true)]
    points: Option<usize>,
    /// Evolution time for fpk-grid.
    #[arg(long, global = true)]
    t: Option<f64>,
    /// Dimensions for bench-benes, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long, global = true)]
    horizon: Option<f64>,
    /// Euler–Maruyama step for bench-benes (defaults to --dt).
    #[arg(long, global = true)]
    em_dt: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cmd = match cli.command {
        Command::Propagate => Subcommand::Propagate,
        Command::Sample => Subcommand::Sample,
        Command::FpkGrid => Subcommand::FpkGrid,
        Command::GpFit => Subcommand::GpFit,
        Command::BenchBenes => Subcommand::BenchBenes,
    };
    let f = cli.flags;
    let overrides = Overrides {
        out: f.out,
        seed: f.seed,
        threads: f.threads,
        repeats: f.repeats,
        t0: f.t0,
        t1: f.t1,
        dt: f.dt,
        method: f.method.map(|m| match m {
            MethodArg::Euler => Method::Euler,
            MethodArg::Rk4 => Method::Rk4,
        }),
        scheme: f.scheme.map(|s| match s {
            SchemeArg::Linearized => SchemeKind::Linearized,
            SchemeArg::Matched => SchemeKind::Matched,
        }),
        n: f.n,
        dump_paths: f.dump_paths,
        bounds: f.bounds,
        points: f.points,
        t: f.t,
        dims: f.dims,
        horizon: f.horizon,
        em_dt: f.em_dt,
    };
    let result = (|| -> Result<_, CliError> {
        let mut cfg = match &f.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        overrides.apply(cmd, &mut cfg);
        let manifest = run(cmd, &cfg)?;
        Ok((cfg.out, manifest.artifacts))
    })();
    match result {
        Ok((out, artifacts)) => {
            for a in artifacts {
                println!("{}", out.join(a).display());
            }
            println!("{}", out.join("manifest.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("sdemoments {}: {e}", cmd.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
