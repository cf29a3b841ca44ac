use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use alrgmm::config::{simulated_x_columns, RunConfig};
use alrgmm::data::Dataset;
use alrgmm::dgmm::{diagnose_orthogonality, estimate, DiagnosticReport};
use alrgmm::simulation::{generate, monte_carlo, write_replications_csv};
use alrgmm::{Error, Result};

#[derive(Parser)]
#[command(name = "alrgmm", version, about = "Automatic locally robust GMM with generated regressors")]
struct Cli {
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set h.lambda_scale=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Run seed; takes precedence over the config and `--set`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut config = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(s) = self.seed {
            config.seed = s;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the target on a CSV dataset and write a JSON report.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Omit wall-clock timings so reports are byte-for-byte reproducible.
        #[arg(long)]
        no_timing: bool,
    },
    /// Draw one dataset from the configured design and write it as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Sample size; overrides `simulation.n`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Repeat simulate-then-estimate and summarize bias, spread and coverage.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        /// Directory receiving `summary.json` and `replications.csv`.
        #[arg(long)]
        out_dir: PathBuf,
        /// Replication count; overrides `simulation.replications`.
        #[arg(long)]
        replications: Option<usize>,
        /// Sample size per replication; overrides `simulation.n`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Finite-difference orthogonality check at the true nuisances of a simulated design.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Sample size; overrides `simulation.n`.
        #[arg(long)]
        n: Option<usize>,
        /// Perturbation sizes.
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1")]
        taus: Vec<f64>,
        /// JSON report path; the slope table always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn write_json<T: serde::Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let mut w = writer(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn print_diagnostic(report: &DiagnosticReport) {
    println!(
        "{:<12} {:<10} {:>6} {:>8} {:>11} {:>11} {:>10}  pass",
        "direction", "atom", "tau", "sign", "slope_m", "slope_psi", "se_psi"
    );
    for r in &report.rows {
        let sign = r.sign.map(|s| format!("{s:?}").to_lowercase()).unwrap_or_else(|| "-".into());
        println!(
            "{:<12} {:<10} {:>6} {:>8} {:>11.5} {:>11.5} {:>10.5}  {}",
            format!("{:?}", r.direction).to_lowercase(),
            r.atom,
            r.tau,
            sign,
            r.slope_m,
            r.slope_psi,
            r.se_psi,
            if r.pass { "yes" } else { "NO" }
        );
    }
    println!(
        "literal: {}  flipped: {}  verdict: {}",
        if report.pass_literal { "pass" } else { "fail" },
        if report.pass_flipped { "pass" } else { "fail" },
        format!("{:?}", report.verdict).to_lowercase()
    );
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Estimate {
            data,
            common,
            out,
            no_timing,
        } => {
            let run = common.load()?;
            let columns = run.resolved_x_columns()?;
            let config = run.estimator(columns.len())?;
            let dataset = Dataset::from_csv(&data, &columns, run.resolved_mode())?;
            let mut report = estimate(&dataset, &config, run.seed)?;
            if no_timing {
                report.timing = None;
            }
            write_json(&report, out.as_deref())
        }
        Command::Simulate { common, out, n } => {
            let run = common.load()?;
            let sim = run.simulation();
            let simulated = generate(&sim.dgp, n.unwrap_or(sim.n), run.seed)?;
            let mut w = writer(Some(&out))?;
            simulated.dataset.write_csv(&mut w)?;
            w.flush()?;
            eprintln!(
                "wrote {} rows to {} (theta0 = {}, x columns = {})",
                simulated.dataset.len(),
                out.display(),
                simulated.theta0,
                simulated_x_columns(&sim.dgp).join(",")
            );
            Ok(())
        }
        Command::Montecarlo {
            common,
            out_dir,
            replications,
            n,
        } => {
            let run = common.load()?;
            let sim = run.simulation();
            let config = run.estimator_for(&sim.dgp)?;
            let (summary, records) = monte_carlo(
                &sim.dgp,
                n.unwrap_or(sim.n),
                replications.unwrap_or(sim.replications),
                &config,
                run.seed,
            )?;
            std::fs::create_dir_all(&out_dir)?;
            write_json(&summary, Some(&out_dir.join("summary.json")))?;
            write_replications_csv(&records, BufWriter::new(File::create(out_dir.join("replications.csv"))?))?;
            eprintln!(
                "bias {:.5}  sd {:.5}  coverage {}  plug-in bias {:.5}  failures {}",
                summary.bias,
                summary.sd,
                summary.coverage.map(|c| format!("{c:.3}")).unwrap_or_else(|| "undefined".into()),
                summary.plugin_bias,
                summary.failures
            );
            Ok(())
        }
        Command::Diagnose { common, n, taus, out } => {
            let run = common.load()?;
            let sim = run.simulation();
            let config = run.estimator_for(&sim.dgp)?;
            let simulated = generate(&sim.dgp, n.unwrap_or(sim.n), run.seed)?;
            let report = diagnose_orthogonality(&simulated.dataset, &config, simulated.oracle.as_ref(), &taus, run.seed)?;
            print_diagnostic(&report);
            if out.is_some() {
                write_json(&report, out.as_deref())?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
