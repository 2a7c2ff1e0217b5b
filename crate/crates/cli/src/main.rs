//! `rld`: experiment driver for federated route-leak detection.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, TopologySource};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "rld", version, about = "Federated route-leak detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load or synthesize a topology and print its summary.
    Ingest(CommonArgs),
    /// Build the group's client datasets and distribution reports.
    GenTriples(CommonArgs),
    /// Train and evaluate one method, or all of them.
    Train(TrainArgs),
    /// Malicious-triple coverage of each deployment strategy.
    Deploy(DeployArgs),
    /// Evaluate the training cost model for a parameter file.
    Cost(CostArgs),
    /// Verify the ledger of an FL run directory and replay its model.
    Audit(AuditArgs),
}

#[derive(Debug, Clone, Args)]
struct CommonArgs {
    /// Experiment configuration (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CAIDA as-rel file, optionally gzipped.
    #[arg(long, conflicts_with = "synthetic")]
    topology: Option<PathBuf>,
    /// Synthetic topology, e.g. `n=400,seed=1`.
    #[arg(long)]
    synthetic: Option<String>,
    /// Client group preset (1-4).
    #[arg(long)]
    group: Option<u8>,
    /// Total samples across the group's clients; 0 keeps the preset sizes.
    #[arg(long)]
    scale: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to a fresh directory under the output root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root for default run directories.
    #[arg(long, env = "RLD_OUT_DIR", default_value = "runs")]
    out_root: PathBuf,
    /// Run every loop sequentially.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// fl, central, single:<k>, ml-random, ml-0, ml-1 or all.
    #[arg(long, default_value = "fl")]
    mode: String,
    /// Global rounds.
    #[arg(long)]
    ge: Option<usize>,
    /// Local epochs per round.
    #[arg(long)]
    ce: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// size or uniform FedAvg weighting.
    #[arg(long)]
    weighting: Option<String>,
}

#[derive(Debug, Args)]
struct DeployArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated strategies: peer, customer, provider.
    #[arg(long, default_value = "peer,customer,provider")]
    strategy: String,
    /// Comma-separated deployment rates in [0, 1].
    #[arg(long, default_value = "0.01,0.02,0.04,0.06,0.08,0.1,0.2,0.4,0.6,0.8,1.0")]
    rates: String,
}

#[derive(Debug, Args)]
struct CostArgs {
    /// Cost parameter file (JSON).
    #[arg(long)]
    params: PathBuf,
    /// Charge consensus and storage once per round.
    #[arg(long)]
    per_round: bool,
    /// Also write `cost.json` into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AuditArgs {
    /// Directory written by `train --mode fl`.
    #[arg(long)]
    run: PathBuf,
}

impl CommonArgs {
    fn experiment(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = &self.topology {
            cfg.topology = TopologySource::File { path: p.clone() };
        }
        if let Some(s) = &self.synthetic {
            cfg.topology = TopologySource::parse_synthetic(s)?;
        }
        if let Some(g) = self.group {
            cfg.group = g;
        }
        if let Some(s) = self.scale {
            cfg.group_scale = (s > 0).then_some(s);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.sequential {
            cfg.fl.execution = rld_core::Execution::Sequential;
        }
        Ok(cfg.normalized())
    }

    fn run_dir(&self, command: &str, cfg: &ExperimentConfig) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| self.out_root.join(format!("{command}-{}", cfg.fingerprint())))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest(c) => {
            let cfg = c.experiment()?;
            commands::ingest(&cfg, c.out.as_deref())
        }
        Command::GenTriples(c) => {
            let cfg = c.experiment()?;
            commands::gen_triples(&cfg, &c.run_dir("gen-triples", &cfg))
        }
        Command::Train(t) => {
            let mut cfg = t.common.experiment()?;
            if let Some(v) = t.ge {
                cfg.fl.global_epochs = v;
            }
            if let Some(v) = t.ce {
                cfg.fl.local_epochs = v;
            }
            if let Some(v) = t.lr {
                cfg.model.learning_rate = v;
            }
            if let Some(v) = t.batch {
                cfg.model.batch_size = v;
            }
            if let Some(w) = &t.weighting {
                cfg.fl.weighting = match w.as_str() {
                    "size" => rld_core::fedlearn::Weighting::SizeProportional,
                    "uniform" => rld_core::fedlearn::Weighting::Uniform,
                    _ => return Err(CliError::Usage(format!("--weighting must be size or uniform, got {w:?}"))),
                };
            }
            let mode = commands::Mode::parse(&t.mode)?;
            let dir = t.common.run_dir(&format!("train-{}", t.mode.replace(':', "")), &cfg);
            commands::train(&cfg, mode, &dir)
        }
        Command::Deploy(d) => {
            let cfg = d.common.experiment()?;
            let strategies = commands::parse_strategies(&d.strategy)?;
            let rates = commands::parse_rates(&d.rates)?;
            commands::deploy(&cfg, &strategies, &rates, &d.common.run_dir("deploy", &cfg))
        }
        Command::Cost(c) => commands::cost(&c.params, c.per_round, c.out.as_deref()),
        Command::Audit(a) => commands::audit(&a.run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rld: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
