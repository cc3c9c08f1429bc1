use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sbfl::aggregate::Formulation;
use sbfl::harness::config::{self, ExperimentConfig, MseGridConfig, OracleConfig, SeedSpec};
use sbfl::harness::{self as h, run};
use sbfl::{Error, Result};

#[derive(Parser)]
#[command(name = "sbfl", about = "Bayesian one-bit federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured algorithm on every seed.
    Train(Common),
    /// Compare MSE quadrature, closed forms and Monte Carlo on a grid.
    MseVerify(Common),
    /// Check the running average of the squared gradient norm against the bound.
    BoundCheck(Common),
    /// Rounds-to-threshold over a (gamma, delta, algorithm) grid.
    Sweep(Common),
    /// Genie-aided posterior mean against the elementwise estimator.
    Oracle(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `30`, `5..10` or `1,4,9`.
    #[arg(long)]
    seeds: Option<SeedSpec>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds run concurrently; defaults to every core.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    mode: Option<Formulation>,
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let path = self.config.as_ref().ok_or_else(|| Error::Config {
            key: "--config".into(),
            message: "this command needs a configuration file".into(),
        })?;
        let mut c: ExperimentConfig = config::load(path)?;
        if let Some(s) = &self.seeds {
            c.seeds = s.clone();
        }
        if let Some(o) = &self.out {
            c.output.dir = o.clone();
        }
        if let Some(m) = self.mode {
            c.training.formulation = m;
        }
        c.validate()?;
        Ok(c)
    }

    fn optional<T: serde::de::DeserializeOwned + Default>(&self) -> Result<T> {
        match &self.config {
            Some(p) => config::load(p),
            None => Ok(T::default()),
        }
    }
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(a) => {
            let out = h::cmd_train(&a.experiment()?, a.jobs)?;
            for r in &out.aggregate {
                println!(
                    "{:<16} seeds {:>3} diverged {:>3} final loss {} excess {}",
                    r.algorithm,
                    r.seeds,
                    r.diverged,
                    fmt_opt(r.mean_final_loss, r.std_final_loss),
                    fmt_opt(r.mean_excess_loss, r.std_excess_loss)
                );
            }
            Ok(true)
        }
        Command::MseVerify(a) => {
            let mut c: MseGridConfig = a.optional()?;
            if let Some(o) = &a.out {
                c.output.dir = o.clone();
            }
            let rows = h::cmd_mse_verify(&c, a.mode.unwrap_or_default())?;
            let mut ok = true;
            for r in &rows {
                let pass = r.quadrature_matches_mc && r.blmmse_matches_mc && r.mmse_not_worse;
                ok &= pass;
                println!(
                    "nu={:<4} h={:<4} s2={:<8e} quad={:.6} mc={:.6}±{:.1e} blmmse cf={:.6} literal cf={:.6} mc={:.6} {}",
                    r.nu,
                    r.h,
                    r.sigma2,
                    r.quadrature,
                    r.mc_mmse,
                    r.mc_mmse_stderr,
                    r.blmmse_closed_form_corrected,
                    r.blmmse_closed_form_paper_literal,
                    r.mc_blmmse_corrected,
                    if pass { "ok" } else { "MISMATCH" }
                );
            }
            Ok(ok)
        }
        Command::BoundCheck(a) => {
            let (_, check) = h::cmd_bound_check(&a.experiment()?, a.jobs)?;
            let v = check.violations();
            println!(
                "{} rounds checked, {} violations ({} against the bound with the step-size-corrected noise term)",
                check.rows.len(),
                v,
                check.violations_corrected()
            );
            Ok(v == 0)
        }
        Command::Sweep(a) => {
            let c = a.experiment()?;
            let out = h::cmd_sweep(&c, a.jobs)?;
            print!("{}", run::render_sweep(&out.aggregate));
            Ok(true)
        }
        Command::Oracle(a) => {
            let mut c: OracleConfig = a.optional()?;
            if let Some(o) = &a.out {
                c.output.dir = o.clone();
            }
            let rows = h::cmd_oracle(&c)?;
            let worst = rows.iter().map(|r| r.max_abs_deviation).fold(0.0, f64::max);
            println!("{} points, max |genie - sbfl| = {worst:.3e}", rows.len());
            Ok(true)
        }
    }
}

fn fmt_opt(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
        _ => "-".into(),
    }
}

fn error_record(e: &Error) -> serde_json::Value {
    let kind = match e {
        Error::InvalidInput(_) => "invalid_input",
        Error::NumericalFailure { .. } => "numerical_failure",
        Error::Capability(_) => "capability",
        Error::Diverged { .. } => "diverged",
        Error::Config { .. } => "config",
        Error::Io(_) => "io",
    };
    let mut v = serde_json::json!({ "error": kind, "message": e.to_string() });
    if let Error::Config { key, .. } = e {
        v["key"] = key.clone().into();
    }
    v
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::from(2)
        }
    }
}
