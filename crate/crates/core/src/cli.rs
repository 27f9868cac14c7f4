//! Command-line front end. Exit codes: 0 all checks pass, 1 a check failed,
//! 2 usage, config or runtime error.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::experiment::{emit_outputs, run_experiment, Command, ExperimentConfig, Format};
use crate::inverse_flow::InverseMethod;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "bsipde", version, about = "Stochastic flows, BSDE regression and backward stochastic integro-PDE checks")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON config file, or a manifest from an earlier run.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true, value_name = "PATH")]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<FormatArg>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Study step counts, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub levels: Option<Vec<usize>>,
    /// Catalog problem name.
    #[arg(long, global = true)]
    pub problem: Option<String>,
    /// Suppress the per-check lines on stdout.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MethodArg {
    Grid,
    Sipde,
    Backward,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Forward flow on the initial mesh.
    Simulate,
    /// Inverse flow at the query points.
    Invert {
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Regression BSDE from the configured initial point.
    Bsde,
    /// Composed random-field triple on the query points.
    Compose {
        /// Amplitude `a` of a perturbation `a sin(x)` added to `p`.
        #[arg(long)]
        perturb: Option<f64>,
    },
    /// Galerkin system from the named catalog.
    Galerkin {
        #[arg(long)]
        system: Option<String>,
    },
    #[command(subcommand)]
    Verify(VerifyCmd),
    /// Inverse-identity and residual orders over the configured levels.
    Convergence,
    /// List problems, systems and check cases.
    Catalog,
}

#[derive(Debug, Subcommand)]
pub enum VerifyCmd {
    Wentzell,
    Residual {
        #[arg(long)]
        perturb: Option<f64>,
    },
    Energy {
        #[arg(long)]
        system: Option<String>,
    },
    Flow,
}

impl Cli {
    /// Config after applying flags on top of the file (or defaults).
    pub fn resolve(&self) -> crate::Result<(ExperimentConfig, Command)> {
        let g = &self.global;
        let mut cfg = match &g.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {$( if let Some(v) = g.$flag.clone() { cfg.$field = v; } )*};
        }
        set!(seed => seed, paths => paths, steps => steps, out_dir => out_dir, problem => problem, levels => levels);
        if let Some(f) = g.format {
            cfg.format = match f {
                FormatArg::Csv => Format::Csv,
                FormatArg::Json => Format::Json,
            };
        }
        if g.workers.is_some() {
            cfg.workers = g.workers;
        }
        let command = match &self.command {
            Cmd::Simulate => Command::Simulate,
            Cmd::Invert { method } => {
                if let Some(m) = method {
                    cfg.inverse_method = match m {
                        MethodArg::Grid => InverseMethod::GridInversion,
                        MethodArg::Sipde => InverseMethod::Sipde,
                        MethodArg::Backward => InverseMethod::BackwardSde,
                    };
                }
                Command::Invert
            }
            Cmd::Bsde => Command::Bsde,
            Cmd::Compose { perturb } => {
                cfg.perturbation = perturb.unwrap_or(cfg.perturbation);
                Command::Compose
            }
            Cmd::Galerkin { system } => {
                cfg.system = system.clone().unwrap_or(cfg.system);
                Command::Galerkin
            }
            Cmd::Verify(VerifyCmd::Wentzell) => Command::VerifyWentzell,
            Cmd::Verify(VerifyCmd::Residual { perturb }) => {
                cfg.perturbation = perturb.unwrap_or(cfg.perturbation);
                Command::VerifyResidual
            }
            Cmd::Verify(VerifyCmd::Energy { system }) => {
                cfg.system = system.clone().unwrap_or(cfg.system);
                Command::VerifyEnergy
            }
            Cmd::Verify(VerifyCmd::Flow) => Command::VerifyFlow,
            Cmd::Convergence => Command::Convergence,
            Cmd::Catalog => Command::Catalog,
        };
        Ok((cfg, command))
    }
}

/// Parse `args`, run, write artifacts and report. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_PASS };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    let result = cli.resolve().and_then(|(cfg, command)| {
        let run = run_experiment(&cfg, command)?;
        emit_outputs(&cfg, &run)?;
        Ok((cfg, run))
    });
    match result {
        Ok((cfg, run)) => {
            let s = &run.summary;
            if !cli.global.quiet {
                if s.command == Command::Catalog {
                    for row in run.tables.iter().flat_map(|t| &t.rows) {
                        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
                        let _ = writeln!(out, "{}", cells.join("  "));
                    }
                }
                for c in &s.checks {
                    let tag = if c.pass { "PASS" } else { "FAIL" };
                    let _ = writeln!(out, "{tag} {} {:e} {} {:e}", c.name, c.statistic, c.relation, c.tolerance);
                }
                let _ = writeln!(out, "artifacts in {}", cfg.out_dir.display());
            }
            if s.pass {
                EXIT_PASS
            } else {
                EXIT_CHECK_FAILED
            }
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_ERROR
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(args: &[&str]) -> (ExperimentConfig, Command) {
        Cli::try_parse_from(args).unwrap().resolve().unwrap()
    }

    #[test]
    fn flags_override_defaults() {
        let (cfg, cmd) = resolve(&["bsipde", "--seed", "9", "--paths", "7", "invert", "--method", "backward", "--format", "json"]);
        assert_eq!((cfg.seed, cfg.paths, cfg.format), (9, 7, Format::Json));
        assert_eq!(cfg.inverse_method, InverseMethod::BackwardSde);
        assert_eq!(cmd, Command::Invert);
    }

    #[test]
    fn verify_subcommands_parse() {
        assert_eq!(resolve(&["bsipde", "verify", "wentzell"]).1, Command::VerifyWentzell);
        let (cfg, cmd) = resolve(&["bsipde", "verify", "energy", "--system", "heat"]);
        assert_eq!((cfg.system.as_str(), cmd), ("heat", Command::VerifyEnergy));
    }

    #[test]
    fn usage_errors_exit_two() {
        let (mut o, mut e) = (vec![], vec![]);
        assert_eq!(run(["bsipde", "frobnicate"], &mut o, &mut e), EXIT_ERROR);
        assert_eq!(run(["bsipde", "--steps", "0", "catalog"], &mut o, &mut e), EXIT_ERROR);
        assert!(String::from_utf8_lossy(&e).contains("`steps`"));
    }
}
