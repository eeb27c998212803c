use std::path::{Path, PathBuf};

use mpsl_core::analysis::Method;
use mpsl_core::data::SyntheticSpec;
use mpsl_core::model::{Fusion, ModelConfig};
use mpsl_core::protocol::TrainingConfig;
use mpsl_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// A complete experiment description, read from TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    /// Synthetic generator settings; task, modalities and input shapes are
    /// always taken from `model`.
    #[serde(default)]
    pub data: SyntheticSpec,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub transport: TransportSection,
    #[serde(default)]
    pub outputs: OutputSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub method: Method,
    /// One run per seed; the seed drives data generation, the partition,
    /// batch order and initialisation.
    pub seeds: Vec<u64>,
    pub num_clients: usize,
    pub rounds: u32,
    pub global_batch: usize,
    pub head_lr: f64,
    pub server_lr: f64,
    pub momentum: f64,
    pub alpha: f64,
    pub local_epochs: usize,
    pub eval_every: u32,
    pub max_retries: u32,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        Self {
            method: Method::Mpsl,
            seeds: vec![0, 1, 2],
            num_clients: t.num_clients,
            rounds: t.rounds,
            global_batch: t.global_batch,
            head_lr: t.head_lr,
            server_lr: t.server_lr,
            momentum: t.momentum,
            alpha: t.alpha,
            local_epochs: t.local_epochs,
            eval_every: t.eval_every,
            max_retries: t.max_retries,
        }
    }
}

impl TrainingSection {
    pub fn for_seed(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            num_clients: self.num_clients,
            rounds: self.rounds,
            global_batch: self.global_batch,
            head_lr: self.head_lr,
            server_lr: self.server_lr,
            momentum: self.momentum,
            alpha: self.alpha,
            local_epochs: self.local_epochs,
            eval_every: self.eval_every,
            max_retries: self.max_retries,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    /// In-process channels.
    #[default]
    Channel,
    /// Loopback or network TCP; clients run as separate processes.
    Tcp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportSection {
    pub kind: TransportKind,
    /// Listen address of the TCP server; port 0 picks a free port.
    pub address: String,
    /// Run in-process clients on the server thread (deterministic).
    pub sequential: bool,
    /// Launch one client process per client for TCP runs.
    pub spawn_clients: bool,
    /// Per-frame receive timeout in milliseconds; 0 waits forever.
    pub timeout_ms: u64,
}

impl Default for TransportSection {
    fn default() -> Self {
        Self {
            kind: TransportKind::Channel,
            address: "127.0.0.1:0".into(),
            sequential: false,
            spawn_clients: true,
            timeout_ms: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Record wall-clock time per round (makes CSVs non-reproducible).
    pub wall_clock: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/experiment"), wall_clock: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Batch,
    Blocks,
    Depth,
    Fusion,
    Clients,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Batch => "batch",
            SweepAxis::Blocks => "blocks",
            SweepAxis::Depth => "depth",
            SweepAxis::Fusion => "fusion",
            SweepAxis::Clients => "clients",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    /// Integers for batch, blocks, depth and clients; "early"/"late" for
    /// fusion.
    pub values: Vec<toml::Value>,
}

/// Everything one seed's run needs, fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub method: Method,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: SyntheticSpec,
    pub training: TrainingConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        ExperimentConfig::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.training.method, Method::Mpsl | Method::FedAvg | Method::Centralized) {
            return Err(Error::Config(format!(
                "training.method `{}` is not trainable (expected mpsl, fedavg or centralized)",
                self.training.method
            )));
        }
        if self.training.seeds.is_empty() {
            return Err(Error::Config("training.seeds must list at least one seed".into()));
        }
        let first = self.run_spec(self.training.seeds[0])?;
        first.training.validate()?;
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep.values must not be empty".into()));
            }
            for v in &s.values {
                self.with_axis_value(s.axis, v)?;
            }
        }
        Ok(())
    }

    /// The resolved model, data and training settings for one seed.
    pub fn run_spec(&self, seed: u64) -> Result<RunSpec> {
        let mut model = self.model.clone();
        model.init_seed = seed;
        let model = model.resolved()?;
        let mut data = self.data.clone().matching(&model);
        data.seed = seed;
        data.validate()?;
        Ok(RunSpec { method: self.training.method, seed, model, data, training: self.training.for_seed(seed) })
    }

    /// A copy with one sweep axis set to `value`.
    pub fn with_axis_value(&self, axis: SweepAxis, value: &toml::Value) -> Result<ExperimentConfig> {
        let bad = || Error::Config(format!("sweep value {value} does not fit axis `{}`", axis.name()));
        let int = || value.as_integer().filter(|&v| v >= 0).map(|v| v as usize).ok_or_else(bad);
        let mut c = self.clone();
        c.sweep = None;
        match axis {
            SweepAxis::Batch => c.training.global_batch = int()?,
            SweepAxis::Blocks => c.model.freeze_first_k = int()?,
            SweepAxis::Clients => c.training.num_clients = int()?,
            SweepAxis::Depth => {
                if c.model.preset.is_some() {
                    return Err(Error::Config("a depth sweep needs model.preset unset".into()));
                }
                c.model.depth = int()?;
            }
            SweepAxis::Fusion => {
                c.model.fusion = match value.as_str() {
                    Some("early") => Fusion::Early,
                    Some("late") => Fusion::Late,
                    _ => return Err(bad()),
                }
            }
        }
        c.run_spec(c.training.seeds[0])?.training.validate()?;
        Ok(c)
    }
}

/// Display form of a sweep value for paths and CSV cells.
pub fn value_label(value: &toml::Value) -> String {
    match value {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_document() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c.training.seeds, vec![0, 1, 2]);
        assert_eq!(c.training.method, Method::Mpsl);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let err = ExperimentConfig::parse("[training]\nrounds = 3\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = ExperimentConfig::parse("[modle]\n").unwrap_err();
        assert!(err.to_string().contains("modle"), "{err}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let text = "[model]\nfusion = \"late\"\n[training]\nmethod = \"fedavg\"\nseeds = [4]\n[sweep]\naxis = \"batch\"\nvalues = [4, 8]\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(ExperimentConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn fedclip_is_not_a_training_method() {
        assert!(ExperimentConfig::parse("[training]\nmethod = \"fedclip\"\n").is_err());
    }

    #[test]
    fn sweep_values_are_type_checked() {
        let c = ExperimentConfig::default();
        assert!(c.with_axis_value(SweepAxis::Fusion, &toml::Value::String("late".into())).is_ok());
        assert!(c.with_axis_value(SweepAxis::Fusion, &toml::Value::Integer(1)).is_err());
        assert!(c.with_axis_value(SweepAxis::Batch, &toml::Value::String("8".into())).is_err());
        assert_eq!(c.with_axis_value(SweepAxis::Batch, &toml::Value::Integer(16)).unwrap().training.global_batch, 16);
    }

    #[test]
    fn seed_drives_every_stream() {
        let s = ExperimentConfig::default().run_spec(7).unwrap();
        assert_eq!((s.model.init_seed, s.data.seed, s.training.seed), (7, 7, 7));
    }
}
