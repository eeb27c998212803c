use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use mpsl_cli::config::{ExperimentConfig, TransportKind};
use mpsl_cli::run::{self, Launcher, Split};
use mpsl_core::analysis::Method;
use mpsl_core::model::Preset;

#[derive(Parser)]
#[command(name = "mpsl", version, about = "Multimodal parallel split learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `outputs.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run this seed only.
    #[arg(long)]
    seed: Option<u64>,
    /// Transport between server and clients.
    #[arg(long, value_enum)]
    transport: Option<TransportKind>,
    /// Drive in-process clients from the server thread (deterministic).
    #[arg(long)]
    sequential: bool,
}

impl RunArgs {
    fn load(&self) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.training.seeds = vec![s];
        }
        if let Some(t) = self.transport {
            cfg.transport.kind = t;
            cfg.transport.sequential = false;
        }
        if self.sequential {
            cfg.transport.sequential = true;
        }
        if let Some(o) = &self.out {
            cfg.outputs.dir = o.clone();
        }
        cfg.validate()?;
        let out = cfg.outputs.dir.clone();
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every configured seed and write metrics, checkpoints and a summary.
    Train(RunArgs),
    /// Run the configured sweep into a long-format CSV.
    Sweep(RunArgs),
    /// Analytical parameter, FLOP and communication costs at full scale.
    Cost {
        #[arg(long, value_delimiter = ',', default_value = "Ti,S,B,L,H")]
        presets: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "mpsl,fedavg,fedclip")]
        methods: Vec<String>,
        #[arg(long, default_value = "cost.csv")]
        out: PathBuf,
    },
    /// Write embeddings of a checkpointed model to CSV.
    ExportEmbeddings {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic dataset and its client partition.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Client process of a TCP run.
    #[command(hide = true)]
    Client {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        id: u32,
        #[arg(long)]
        connect: String,
        #[arg(long, default_value_t = 30_000)]
        patience_ms: u64,
    },
}

fn launcher() -> Launcher {
    Launcher { exe: std::env::current_exe().ok() }
}

fn execute(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::Train(args) => {
            let (cfg, out) = args.load()?;
            run::train(&cfg, &out, &launcher())?;
            println!("results in {}", out.display());
        }
        Cmd::Sweep(args) => {
            let (cfg, out) = args.load()?;
            let path = run::sweep(&cfg, &out, &launcher())?;
            println!("sweep results in {}", path.display());
        }
        Cmd::Cost { presets, methods, out } => {
            let presets = presets.iter().map(|p| Preset::parse(p)).collect::<Result<Vec<_>, _>>()?;
            let methods = methods.iter().map(|m| Method::parse(m)).collect::<Result<Vec<_>, _>>()?;
            let rows = run::cost(&presets, &methods, &out)?;
            println!("{:<6} {:<8} {:>14} {:>12} {:>12} {:>12} {:>12}", "preset", "method", "client_params", "client_GF", "server_GF", "up_MB/ep", "down_MB/ep");
            for r in &rows {
                println!(
                    "{:<6} {:<8} {:>14} {:>12.3} {:>12.3} {:>12.3} {:>12.3}",
                    r.preset, r.method, r.client_params, r.client_gflops, r.server_gflops, r.up_mb_per_epoch, r.down_mb_per_epoch
                );
            }
        }
        Cmd::ExportEmbeddings { config, checkpoint, seed, split, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let n = run::embeddings(&cfg, seed, &checkpoint, split, &out)?;
            println!("wrote {n} embedding rows to {}", out.display());
        }
        Cmd::GenData { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = run::gen_data(&cfg, seed, &out)?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Cmd::Client { config, seed, id, connect, patience_ms } => {
            let cfg = ExperimentConfig::load(&config)?;
            let patience = std::time::Duration::from_millis(patience_ms);
            run::run_remote_client(&cfg, seed, id, &connect, patience).with_context(|| format!("client {id}"))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(run::exit_code(&e))
        }
    }
}
