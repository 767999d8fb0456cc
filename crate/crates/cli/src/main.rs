use std::fs::File;
use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use edgereach::analysis::{condition_audit, propagate_error_check, TabularMdp, TabularRollout};
use edgereach::harness::{self, HarnessError};
use edgereach::{substream, ExperimentConfig, ReplayBuffer};
use serde_json::json;

#[derive(Parser)]
#[command(name = "edgereach", version, about = "Edge-of-reach offline model-based RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `--set agent.n_critics=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        match &self.config {
            Some(path) => ExperimentConfig::load(path, &self.overrides),
            None => ExperimentConfig::default().with_overrides(&self.overrides),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and print its summary.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run one experiment per value of a config field.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dotted config path to vary.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Per-update wall-clock for several critic-ensemble sizes.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long = "n", value_delimiter = ',', default_values_t = vec![2, 10, 100])]
        n_critics: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        updates: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Write the CSV behind one figure from a run directory.
    EmitPlotdata {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        figure: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diagnostics on buffers, tabular MDPs and the value oracle.
    Audit {
        #[command(subcommand)]
        kind: AuditKind,
    },
    /// Print the effective config as TOML.
    PrintConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Subcommand)]
enum AuditKind {
    /// Count next states with no buffer state within `eps`.
    Conditions {
        #[arg(long)]
        buffer: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
    },
    /// Error propagation along a rollout of a random tabular MDP.
    Propagation {
        #[arg(long, default_value_t = 20)]
        states: usize,
        #[arg(long, default_value_t = 3)]
        actions: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        #[arg(long, default_value_t = 0.99)]
        gamma: f64,
        #[arg(long, default_value_t = 200)]
        sweeps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-step CSV output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the value oracle for a config and write it as dense CSV.
    Oracle {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Failure {
    kind: String,
    message: String,
    details: Vec<String>,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure {
            kind: e.kind().to_string(),
            details: e.details(),
            message: e.to_string(),
        }
    }
}

fn failure(kind: &str, message: impl ToString) -> Failure {
    Failure {
        kind: kind.to_string(),
        message: message.to_string(),
        details: Vec::new(),
    }
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("output serializes")
}

fn execute(cmd: Command) -> Result<String, Failure> {
    match cmd {
        Command::Run { config } => {
            let cfg = config.load()?;
            Ok(pretty(&harness::run(&cfg)?))
        }
        Command::Sweep { config, axis, values } => {
            let cfg = config.load()?;
            let points = harness::sweep(&cfg, &axis, &values)?;
            Ok(pretty(&points))
        }
        Command::Bench {
            config,
            n_critics,
            updates,
            repeats,
        } => {
            let cfg = config.load()?;
            Ok(pretty(&harness::timing_bench(&cfg, &n_critics, updates, repeats)?))
        }
        Command::EmitPlotdata { run, figure, out } => {
            let path = harness::emit_plotdata(&run, &figure, out.as_deref())?;
            Ok(pretty(&json!({ "figure": figure, "path": path })))
        }
        Command::PrintConfig { config } => Ok(config.load()?.to_toml()),
        Command::Audit { kind } => audit(kind),
    }
}

fn audit(kind: AuditKind) -> Result<String, Failure> {
    match kind {
        AuditKind::Conditions { buffer, eps } => {
            let file = File::open(&buffer).map_err(|e| failure("io", format!("{}: {e}", buffer.display())))?;
            let buf = ReplayBuffer::read_csv(BufReader::new(file)).map_err(|e| failure("csv", e))?;
            let report =
                condition_audit(&buf, eps, None, &mut substream(0, "audit")).map_err(|e| failure("analysis", e))?;
            Ok(pretty(&report))
        }
        AuditKind::Propagation {
            states,
            actions,
            k,
            epsilon,
            delta,
            gamma,
            sweeps,
            seed,
            out,
        } => {
            if states == 0 || actions == 0 || k == 0 || !(0.0..1.0).contains(&gamma) {
                return Err(failure(
                    "invalid_config",
                    "states, actions and k must be positive and gamma in [0, 1)",
                ));
            }
            let mut rng = substream(seed, "audit");
            let mdp = TabularMdp::random(states, actions, gamma, &mut rng);
            let rollout = TabularRollout::random(&mdp, k, &mut rng)
                .ok_or_else(|| failure("analysis", "could not draw a rollout with distinct pairs"))?;
            let report =
                propagate_error_check(&mdp, &rollout, epsilon, delta, sweeps, &mut rng).map_err(|e| failure("analysis", e))?;
            if let Some(path) = out {
                let file = File::create(&path).map_err(|e| failure("io", format!("{}: {e}", path.display())))?;
                report.write_csv(file).map_err(|e| failure("csv", e))?;
            }
            Ok(pretty(&report))
        }
        AuditKind::Oracle { config, out } => {
            let cfg = config.load()?;
            cfg.validate()?;
            let grid = harness::oracle_for(&cfg.env, &cfg.analysis.dp)?;
            let file = File::create(&out).map_err(|e| failure("io", format!("{}: {e}", out.display())))?;
            grid.write_csv(std::io::BufWriter::new(file)).map_err(|e| failure("io", e))?;
            Ok(pretty(&json!({
                "path": out,
                "max_value": grid.max_value(),
                "iterations": grid.iterations,
                "residual": grid.residual,
                "nodes": grid.values.len(),
            })))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = write!(std::io::stdout(), "{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let f = failure("usage", e.to_string().trim());
            eprintln!("{}", json!({ "error": f.kind, "message": f.message, "details": f.details }));
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(out) => {
            let _ = writeln!(std::io::stdout(), "{out}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", json!({ "error": f.kind, "message": f.message, "details": f.details }));
            ExitCode::FAILURE
        }
    }
}
