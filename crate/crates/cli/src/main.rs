use anyhow::{bail, Context, Result};
use bspde_cli::config::ExperimentConfig;
use bspde_cli::report::{write_records, OutputFormat, RunRecord};
use bspde_cli::runner;
use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "bspde",
    about = "Backward stochastic PDE laboratory: non-local-in-time boundary conditions \
             on scenario trees, with duality and Monte Carlo cross-checks",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Experiment configuration (TOML). Required by every subcommand except
    /// check-all, where it only supplies the experiment id.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for result files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override the random seed used for sampled inputs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap the worker thread count (single-threaded runs produce identical
    /// numbers).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the configured non-local problem and report residuals and norms.
    Solve,
    /// Assemble Q and report its spectrum.
    Spectrum,
    /// Duality-identity gaps over random data pairs.
    Duality,
    /// Monte Carlo verification: exit bound, martingale mean, nu_2.
    McVerify,
    /// Perturb Gamma by (1+eps) over a grid and report solvability.
    SweepEps,
    /// Periodic solve with the per-leaf boundary defect.
    Periodic,
    /// Self-convergence orders of the deterministic benchmark.
    Convergence,
    /// Run the fixed verification battery.
    CheckAll,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => {}
        Ok(false) => std::process::exit(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    let config = match &cli.config {
        Some(p) => Some(ExperimentConfig::from_path(p)?),
        None => None,
    };
    let requires_config = !matches!(cli.cmd, Cmd::CheckAll);
    let cfg = match (&config, requires_config) {
        (Some(c), _) => Some(c),
        (None, false) => None,
        (None, true) => bail!("this subcommand needs --config <path>"),
    };
    let seed_shift = cli.seed.unwrap_or(0);

    let (name, records): (&str, Vec<RunRecord>) = match cli.cmd {
        Cmd::Solve => ("solve", runner::run_solve(cfg.unwrap(), seed_shift)?),
        Cmd::Spectrum => ("spectrum", runner::run_spectrum(cfg.unwrap())?),
        Cmd::Duality => ("duality", runner::run_duality(cfg.unwrap(), seed_shift)?),
        Cmd::McVerify => (
            "mc_verify",
            runner::run_mc_verify(cfg.unwrap(), cli.seed, &cli.out)?,
        ),
        Cmd::SweepEps => (
            "sweep_eps",
            runner::run_sweep_eps(cfg.unwrap(), seed_shift)?,
        ),
        Cmd::Periodic => ("periodic", runner::run_periodic(cfg.unwrap(), seed_shift)?),
        Cmd::Convergence => ("convergence", runner::run_convergence(cfg.unwrap())?),
        Cmd::CheckAll => {
            let (id, hash) = config
                .as_ref()
                .map(|c| (c.experiment.id.clone(), c.hash()))
                .unwrap_or_else(|| ("check-all".to_string(), "none".to_string()));
            ("check_all", runner::run_check_all(&id, &hash))
        }
    };

    let format = match cli.format {
        FormatArg::Csv => OutputFormat::Csv,
        FormatArg::Json => OutputFormat::Json,
    };
    let path = write_records(&cli.out, name, &records, format)?;

    let mut all_pass = true;
    for r in &records {
        if let Some(pass) = r.pass {
            all_pass &= pass;
            println!(
                "{} {}: value {:.6e} (tolerance {:.3e}) [{}ms] {}",
                if pass { "PASS" } else { "FAIL" },
                r.check,
                r.value,
                r.tolerance.unwrap_or(f64::NAN),
                r.wall_ms,
                r.detail
            );
        }
    }
    println!("wrote {}", path.display());
    Ok(all_pass)
}
