use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::sync::Arc;
use std::time::Duration;

use mpsl_core::analysis::{
    client_trainable_params, cost_report, cost_row, export_embeddings, write_cost_csv, CommScenario, CostRow, Method,
};
use mpsl_core::baselines::{run_centralized, run_fedavg_sequential, run_fedavg_threaded, serve_fedavg, FedAvgClient};
use mpsl_core::data::{export_dataset, generate, write_partition_csv, Dataset};
use mpsl_core::model::{load_checkpoint, save_checkpoint, Preset, Reassembly, SplitModel};
use mpsl_core::protocol::{
    accept_links, run_client, run_mpsl_sequential, run_mpsl_threaded, serve_mpsl, Federation, MpslClient, RunOptions,
    TrainedArtifacts,
};
use mpsl_core::transport::{tcp_listen, TcpEndpoint};
use mpsl_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{value_label, ExperimentConfig, RunSpec, TransportKind, TransportSection};

/// Where client processes for TCP runs come from.
#[derive(Clone, Debug, Default)]
pub struct Launcher {
    /// The `mpsl` executable; `None` disables spawning.
    pub exe: Option<PathBuf>,
}

/// The outcome of one seed.
#[derive(Debug)]
pub struct SeedRun {
    pub spec: RunSpec,
    pub artifacts: TrainedArtifacts,
    pub rounds_per_epoch: u32,
}

impl SeedRun {
    pub fn final_loss(&self) -> f64 {
        self.artifacts.log.records().last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn metric_name(&self) -> String {
        self.artifacts.log.records().iter().rev().find(|r| r.metric_value.is_some()).map_or_else(String::new, |r| r.metric_name.clone())
    }

    pub fn final_metric(&self) -> f64 {
        self.artifacts.log.last_metric().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Serialize)]
struct Version<'a> {
    tool: &'a str,
    version: &'a str,
    config_sha256: String,
    seeds: Vec<u64>,
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    seed: u64,
    method: String,
    rounds: u32,
    rounds_per_epoch: u32,
    final_loss: f64,
    metric_name: String,
    metric_value: f64,
    up_mb_per_epoch: f64,
    down_mb_per_epoch: f64,
}

#[derive(Debug, Serialize)]
struct SweepRow {
    axis: String,
    value: String,
    seed: u64,
    method: String,
    rounds: u32,
    rounds_per_epoch: u32,
    final_loss: f64,
    metric_name: String,
    metric_value: f64,
    client_trainable_params: usize,
    up_mb_per_epoch: f64,
    down_mb_per_epoch: f64,
}

/// Mean and half-range of a sample.
pub fn mean_range(xs: &[f64]) -> (f64, f64) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, (hi - lo) / 2.0)
}

fn run_options(t: &TransportSection, wall_clock: bool) -> RunOptions {
    RunOptions {
        timeout: (t.timeout_ms > 0).then(|| Duration::from_millis(t.timeout_ms)),
        wall_clock,
        ..RunOptions::default()
    }
}

/// Trains one seed. TCP runs write `config.toml` into `dir` first so
/// that client processes resolve the same experiment.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path, launcher: &Launcher) -> Result<SeedRun> {
    let spec = cfg.run_spec(seed)?;
    let data = Arc::new(generate(&spec.data)?);
    let opts = run_options(&cfg.transport, cfg.outputs.wall_clock);
    let init = SplitModel::init(&spec.model)?;
    let t = &cfg.transport;
    log::info!("seed {seed}: {} for {} rounds", spec.method, spec.training.rounds);
    if spec.method == Method::Centralized {
        let artifacts = run_centralized(&init, &spec.training, &data, &opts)?;
        let rpe = (data.train.len() / spec.training.global_batch).max(1) as u32;
        return Ok(SeedRun { spec, artifacts, rounds_per_epoch: rpe });
    }
    let fed = Federation::new(&spec.model, &spec.training, data)?;
    let rpe = match spec.method {
        Method::Mpsl => fed.rounds_per_epoch(),
        _ => 1,
    };
    let artifacts = match (spec.method, t.sequential, t.kind) {
        (Method::Mpsl, true, _) => run_mpsl_sequential(&fed, &init, &opts)?,
        (Method::FedAvg, true, _) => run_fedavg_sequential(&fed, &init, &opts)?,
        (Method::Mpsl, false, TransportKind::Channel) => run_mpsl_threaded(&fed, &init, &opts)?,
        (Method::FedAvg, false, TransportKind::Channel) => run_fedavg_threaded(&fed, &init, &opts)?,
        (_, false, TransportKind::Tcp) => {
            fs::create_dir_all(dir).map_err(io(dir))?;
            let cfg_path = dir.join("config.toml");
            fs::write(&cfg_path, seed_config(cfg, &spec).to_toml()).map_err(io(&cfg_path))?;
            serve_tcp(&fed, &init, &spec, t, &opts, &cfg_path, launcher)?
        }
        (m, _, _) => return Err(Error::Config(format!("method `{m}` cannot be trained"))),
    };
    Ok(SeedRun { spec, artifacts, rounds_per_epoch: rpe })
}

fn serve_tcp(
    fed: &Federation,
    init: &SplitModel,
    spec: &RunSpec,
    t: &TransportSection,
    opts: &RunOptions,
    cfg_path: &Path,
    launcher: &Launcher,
) -> Result<TrainedArtifacts> {
    let listener = tcp_listen(&t.address)?;
    let addr = listener.local_addr().map_err(|e| Error::Transport(e.to_string()))?.to_string();
    let mut children = Vec::new();
    match (&launcher.exe, t.spawn_clients) {
        (Some(exe), true) => {
            for id in 0..fed.num_clients() {
                let child = Command::new(exe)
                    .arg("client")
                    .arg("--config")
                    .arg(cfg_path)
                    .args(["--seed", &spec.seed.to_string(), "--id", &id.to_string(), "--connect", &addr])
                    .spawn()
                    .map_err(|e| Error::Transport(format!("spawning client {id}: {e}")))?;
                children.push(child);
            }
        }
        _ => log::info!("listening on {addr}; waiting for {} clients", fed.num_clients()),
    }
    let served = accept_links(&listener, fed.num_clients()).and_then(|links| match spec.method {
        Method::FedAvg => serve_fedavg(fed, init, links, opts),
        _ => serve_mpsl(fed, init, links, opts),
    });
    if served.is_err() {
        for c in &mut children {
            let _ = c.kill();
        }
    }
    let waited = wait_clients(children);
    let art = served?;
    waited?;
    Ok(art)
}

fn wait_clients(children: Vec<Child>) -> Result<()> {
    for (id, mut c) in children.into_iter().enumerate() {
        let status = c.wait().map_err(|e| Error::Transport(format!("client {id}: {e}")))?;
        if !status.success() {
            return Err(Error::Transport(format!("client process {id} exited with {status}")));
        }
    }
    Ok(())
}

/// Body of a client process in a TCP run; `patience` bounds the time spent
/// retrying the first connection.
pub fn run_remote_client(cfg: &ExperimentConfig, seed: u64, id: u32, addr: &str, patience: Duration) -> Result<()> {
    let spec = cfg.run_spec(seed)?;
    let data = Arc::new(generate(&spec.data)?);
    let fed = Federation::new(&spec.model, &spec.training, data)?;
    let init = SplitModel::init(&spec.model)?;
    let mut ep = TcpEndpoint::connect(addr, patience)?;
    match spec.method {
        Method::Mpsl => run_client(&mut MpslClient::new(&fed, id, init.head())?, &mut ep),
        Method::FedAvg => run_client(&mut FedAvgClient::new(&fed, id, &init)?, &mut ep),
        m => Err(Error::Config(format!("method `{m}` has no client role"))),
    }
}

/// The single-seed, fully resolved form of `cfg`.
pub fn seed_config(cfg: &ExperimentConfig, spec: &RunSpec) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.model = spec.model.clone();
    c.data = spec.data.clone();
    c.training.seeds = vec![spec.seed];
    c.sweep = None;
    c
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, json + "\n").map_err(io(path))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let err = |e: csv::Error| Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e.to_string()) };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(io(path))
}

fn write_version(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let text = cfg.to_toml();
    write_json(
        path,
        &Version {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect(),
            seeds: cfg.training.seeds.clone(),
        },
    )
}

/// Measured and modelled communication for one run.
fn run_cost(run: &SeedRun) -> Result<(CostRow, Option<(f64, f64)>)> {
    let spec = &run.spec;
    let preset = spec.model.preset.map_or("custom", Preset::name);
    let batches = match spec.method {
        Method::Centralized => vec![spec.training.global_batch],
        _ => mpsl_core::protocol::allocate_batches(spec.training.global_batch, spec.training.num_clients)?,
    };
    let mut scenario = CommScenario::new(batches, spec.model.text_len);
    scenario.wire = spec.model.precision.dtype();
    let row = cost_row(&spec.model, preset, spec.method, &scenario, run.rounds_per_epoch as f64)?;
    let measured = match run.artifacts.ledger.report(run.rounds_per_epoch as f64) {
        Ok(r) => Some((r.uplink_mb, r.downlink_mb)),
        Err(_) => None,
    };
    Ok((row, measured))
}

/// Writes metrics, resolved config, checkpoints, cost and version files
/// for one seed into `dir`.
pub fn write_seed_outputs(cfg: &ExperimentConfig, run: &SeedRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let art = &run.artifacts;
    let seed_cfg = seed_config(cfg, &run.spec);
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, seed_cfg.to_toml()).map_err(io(&cfg_path))?;
    write_version(&dir.join("version.json"), &seed_cfg)?;
    art.log.save(&dir.join("metrics.csv"))?;
    let model_cfg = &run.spec.model;
    if !art.heads.is_empty() {
        save_checkpoint(&dir.join("server.ckpt"), model_cfg, &art.server)?;
        for (n, h) in art.heads.iter().enumerate() {
            save_checkpoint(&dir.join(format!("head-{n}.ckpt")), model_cfg, h)?;
        }
    }
    let model = art.reassemble(Reassembly::FedAvg)?;
    save_checkpoint(&dir.join("model.ckpt"), model_cfg, &model.params)?;
    let (row, measured) = run_cost(run)?;
    write_cost_csv(&dir.join("cost.csv"), &[row])?;
    if let Some((up, down)) = measured {
        write_json(
            &dir.join("ledger.json"),
            &serde_json::json!({
                "uplink_mb_per_epoch": up,
                "downlink_mb_per_epoch": down,
                "combined_mb_per_epoch": up + down,
                "rounds_per_epoch": run.rounds_per_epoch,
                "total_uplink_bytes": art.ledger.total_by(mpsl_core::transport::Direction::Uplink),
                "total_downlink_bytes": art.ledger.total_by(mpsl_core::transport::Direction::Downlink),
            }),
        )?;
    }
    Ok(())
}

fn summary_row(run: &SeedRun) -> Result<SummaryRow> {
    let (row, measured) = run_cost(run)?;
    let (up, down) = measured.unwrap_or((row.up_mb_per_epoch, row.down_mb_per_epoch));
    Ok(SummaryRow {
        seed: run.spec.seed,
        method: run.spec.method.to_string(),
        rounds: run.spec.training.rounds,
        rounds_per_epoch: run.rounds_per_epoch,
        final_loss: run.final_loss(),
        metric_name: run.metric_name(),
        metric_value: run.final_metric(),
        up_mb_per_epoch: up,
        down_mb_per_epoch: down,
    })
}

/// `train`: one run per seed under `out/seed-<s>/` plus a summary.
pub fn train(cfg: &ExperimentConfig, out: &Path, launcher: &Launcher) -> Result<Vec<SeedRun>> {
    fs::create_dir_all(out).map_err(io(out))?;
    let resolved = out.join("resolved_config.toml");
    fs::write(&resolved, cfg.to_toml()).map_err(io(&resolved))?;
    write_version(&out.join("version.json"), cfg)?;
    let mut runs = Vec::new();
    for &seed in &cfg.training.seeds {
        let dir = out.join(format!("seed-{seed}"));
        let run = train_seed(cfg, seed, &dir, launcher)?;
        write_seed_outputs(cfg, &run, &dir)?;
        runs.push(run);
    }
    let rows = runs.iter().map(summary_row).collect::<Result<Vec<_>>>()?;
    write_rows(&out.join("summary.csv"), &rows)?;
    let metrics: Vec<f64> = rows.iter().map(|r| r.metric_value).collect();
    let losses: Vec<f64> = rows.iter().map(|r| r.final_loss).collect();
    let (m, mr) = mean_range(&metrics);
    let (l, lr) = mean_range(&losses);
    println!(
        "{} over {} seed(s): {} = {m:.4} ± {mr:.4}, final loss = {l:.4} ± {lr:.4}",
        cfg.training.method,
        rows.len(),
        rows.first().map_or("", |r| r.metric_name.as_str()),
    );
    Ok(runs)
}

/// `sweep`: every axis value times every seed, in sequence, collected into
/// a long-format `sweep.csv`.
pub fn sweep(cfg: &ExperimentConfig, out: &Path, launcher: &Launcher) -> Result<PathBuf> {
    let s = cfg.sweep.clone().ok_or_else(|| Error::Config("sweep needs a [sweep] section".into()))?;
    fs::create_dir_all(out).map_err(io(out))?;
    let resolved = out.join("resolved_config.toml");
    fs::write(&resolved, cfg.to_toml()).map_err(io(&resolved))?;
    write_version(&out.join("version.json"), cfg)?;
    let mut rows = Vec::new();
    for v in &s.values {
        let label = value_label(v);
        let point = cfg.with_axis_value(s.axis, v)?;
        for &seed in &point.training.seeds {
            let dir = out.join(format!("{}-{label}", s.axis.name())).join(format!("seed-{seed}"));
            let run = train_seed(&point, seed, &dir, launcher)?;
            write_seed_outputs(&point, &run, &dir)?;
            let sr = summary_row(&run)?;
            log::info!("{}={label} seed {seed}: {} = {:.4}", s.axis.name(), sr.metric_name, sr.metric_value);
            rows.push(SweepRow {
                axis: s.axis.name().into(),
                value: label.clone(),
                seed,
                method: sr.method,
                rounds: sr.rounds,
                rounds_per_epoch: sr.rounds_per_epoch,
                final_loss: sr.final_loss,
                metric_name: sr.metric_name,
                metric_value: sr.metric_value,
                client_trainable_params: client_trainable_params(&run.spec.model, run.spec.method),
                up_mb_per_epoch: sr.up_mb_per_epoch,
                down_mb_per_epoch: sr.down_mb_per_epoch,
            });
        }
    }
    let path = out.join("sweep.csv");
    write_rows(&path, &rows)?;
    Ok(path)
}

/// `cost`: analytical rows at full scale, preset-major.
pub fn cost(presets: &[Preset], methods: &[Method], out: &Path) -> Result<Vec<CostRow>> {
    let rows = cost_report(presets, methods)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    write_cost_csv(out, &rows)?;
    Ok(rows)
}

/// `gen-data`: the seed's dataset plus its client partition.
pub fn gen_data(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<Dataset> {
    let spec = cfg.run_spec(seed)?;
    let data = generate(&spec.data)?;
    export_dataset(&data, out)?;
    let fed = Federation::new(&spec.model, &spec.training, Arc::new(data.clone()))?;
    write_partition_csv(&out.join("partition.csv"), &fed.partition, &data.train, &data.labels)?;
    Ok(data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
}

/// `export-embeddings`: embeddings of a checkpointed model on the seed's
/// data split.
pub fn embeddings(cfg: &ExperimentConfig, seed: u64, checkpoint: &Path, split: Split, out: &Path) -> Result<usize> {
    let spec = cfg.run_spec(seed)?;
    let params = load_checkpoint(checkpoint, &spec.model)?;
    let model = SplitModel { config: spec.model.clone(), params };
    let data = generate(&spec.data)?;
    let idx = match split {
        Split::Train => &data.train,
        Split::Test => &data.test,
    };
    export_embeddings(&model, &data, idx, out)
}

/// Exit code for a failure: 2 configuration, 3 runtime, 4 transport.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Partition(_) => 2,
                Error::Transport(_) | Error::Decode { .. } => 4,
                _ => 3,
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 2;
        }
    }
    3
}
