use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sphere_core::config::{ExperimentConfig, Suite};
use sphere_core::diag::{diagnose, DiagOptions};
use sphere_core::entk::SlqConfig;
use sphere_core::verify::{run_verify, Fault};
use sphere_core::{io, runner, Error};

const EXIT_VERIFY_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const THREADS_ENV: &str = "SPHERE_LAB_THREADS";

#[derive(Parser)]
#[command(name = "sphere-lab", version, about = "Spectral diagnostics and SPHERE regularization for mixture-of-experts networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the property suites and print a pass/fail table.
    Verify {
        /// Only run suites whose name contains this substring.
        #[arg(long)]
        filter: Option<String>,
        /// Print the table as JSON.
        #[arg(long)]
        json: bool,
        /// Inject a known defect; used to check that the suites can fail.
        #[arg(long, hide = true)]
        inject_fault: Option<Fault>,
    },
    /// Train every arm and seed of an experiment config.
    Run {
        /// TOML or JSON experiment config.
        config: PathBuf,
        /// Override the config's suite (`supervised` or `ppo-toy`).
        #[arg(long)]
        suite: Option<Suite>,
        /// Parallel seed jobs; capped by SPHERE_LAB_THREADS.
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory [default: runs/<config stem>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Spectral report of a checkpoint on a probe batch.
    Diag {
        checkpoint: PathBuf,
        /// Tensor JSON with one probe input per row.
        probe: PathBuf,
        /// Skip everything that materializes the Jacobian.
        #[arg(long)]
        slq_only: bool,
        #[arg(long, default_value_t = SlqConfig::default().num_probes)]
        slq_probes: usize,
        #[arg(long, default_value_t = SlqConfig::default().lanczos_steps)]
        lanczos_steps: usize,
        #[arg(long, default_value_t = 0)]
        slq_seed: u64,
    },
}

fn thread_cap() -> Result<Option<usize>, Error> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(None),
    }
}

fn resolve_jobs(requested: Option<usize>, cap: Option<usize>) -> usize {
    let default = std::thread::available_parallelism().map_or(1, |n| n.get());
    let jobs = requested.unwrap_or(default).max(1);
    cap.map_or(jobs, |c| jobs.min(c))
}

fn input_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::Format(_) | Error::Io(_) | Error::Json(_))
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if input_error(&e) { EXIT_CONFIG } else { EXIT_VERIFY_FAILED })
}

fn cmd_verify(filter: Option<&str>, json: bool, fault: Option<Fault>) -> ExitCode {
    let checks = run_verify(filter, fault);
    if checks.is_empty() {
        eprintln!("error: no suite matches `{}`", filter.unwrap_or_default());
        return ExitCode::from(EXIT_CONFIG);
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&checks).expect("checks serialize"));
    } else {
        let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        for c in &checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            println!(
                "{status}  {:width$}  cases={:<5} worst={:.3e} tol={:.0e} {}",
                c.name, c.cases, c.worst, c.tolerance, c.note
            );
        }
        let failed = checks.iter().filter(|c| !c.passed).count();
        println!("{} passed, {failed} failed", checks.len() - failed);
    }
    if checks.iter().all(|c| c.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VERIFY_FAILED)
    }
}

fn default_out_dir(config: &Path) -> PathBuf {
    let stem = config.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    PathBuf::from("runs").join(stem)
}

fn cmd_run(config: &Path, suite: Option<Suite>, jobs: usize, out: Option<PathBuf>) -> Result<(), Error> {
    let started = io::unix_now();
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = suite {
        cfg.suite = s;
    }
    cfg.validate()?;
    let dir = out.unwrap_or_else(|| default_out_dir(config));
    let outcome = runner::run_experiment(&cfg, jobs)?;
    runner::write_outputs(&outcome, config, &dir, jobs, started)?;
    for arm in &outcome.summary.arms {
        println!(
            "{:<20} success {:.3} ± {:.3}  end r_e {:.2} ± {:.2}  aborted {}",
            arm.name,
            arm.mean_success.mean,
            arm.mean_success.std,
            arm.end_re_k.mean,
            arm.end_re_k.std,
            arm.aborted.len()
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_diag(checkpoint: &Path, probe: &Path, opts: &DiagOptions) -> Result<(), Error> {
    let model = io::load_checkpoint(checkpoint)?;
    let probe = io::load_tensor(probe)?;
    let report = diagnose(&model, &probe, opts)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cap = match thread_cap() {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let threads = resolve_jobs(None, cap);
    // Ignored if a pool already exists; only the global default is affected.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    let result = match cli.command {
        Command::Verify { filter, json, inject_fault } => return cmd_verify(filter.as_deref(), json, inject_fault),
        Command::Run { config, suite, jobs, out } => cmd_run(&config, suite, resolve_jobs(jobs, cap), out),
        Command::Diag { checkpoint, probe, slq_only, slq_probes, lanczos_steps, slq_seed } => {
            let slq = SlqConfig { num_probes: slq_probes, lanczos_steps, seed: slq_seed, ..SlqConfig::default() };
            cmd_diag(&checkpoint, &probe, &DiagOptions { slq_only, slq, ..DiagOptions::default() })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jobs_respect_cap() {
        assert_eq!(resolve_jobs(Some(8), Some(2)), 2);
        assert_eq!(resolve_jobs(Some(1), Some(4)), 1);
        assert_eq!(resolve_jobs(Some(0), None), 1);
        assert!(resolve_jobs(None, Some(1)) == 1);
    }

    #[test]
    fn default_output_uses_config_stem() {
        assert_eq!(default_out_dir(Path::new("configs/reference.toml")), PathBuf::from("runs/reference"));
    }
}
