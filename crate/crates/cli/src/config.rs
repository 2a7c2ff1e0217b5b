use std::path::{Path, PathBuf};

use rld_core::fedlearn::FlConfig;
use rld_core::ledger::LogicalClock;
use rld_core::neuralnet::{sha256, ModelConfig};
use rld_core::topology::{generate_synthetic_topology, read_as_rel_file, AsGraph, SyntheticParams};
use rld_core::tripledata::GroupPreset;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Where the AS graph comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TopologySource {
    File { path: PathBuf },
    Synthetic { nodes: usize, seed: u64, params: SyntheticParams },
}

impl Default for TopologySource {
    fn default() -> Self {
        TopologySource::Synthetic { nodes: 400, seed: 1, params: SyntheticParams::default() }
    }
}

impl TopologySource {
    /// Parses `n=400,seed=1[,core=4,max_providers=3,multihoming=0.2,peer_rate=0.7,peer_tail=1.2]`.
    pub fn parse_synthetic(spec: &str) -> Result<Self, CliError> {
        let mut nodes = None;
        let mut seed = 0;
        let mut params = SyntheticParams::default();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("expected key=value in --synthetic, got {part:?}")))?;
            match k {
                "n" | "nodes" => nodes = Some(value(k, v)?),
                "seed" => seed = value(k, v)?,
                "core" => params.core_size = value(k, v)?,
                "max_providers" => params.max_providers = value(k, v)?,
                "multihoming" => params.multihoming = value(k, v)?,
                "peer_rate" => params.peer_rate = value(k, v)?,
                "peer_tail" => params.peer_tail = value(k, v)?,
                _ => return Err(CliError::Usage(format!("unknown --synthetic key {k:?}"))),
            }
        }
        let nodes = nodes.ok_or_else(|| CliError::Usage("--synthetic needs n=<nodes>".into()))?;
        Ok(TopologySource::Synthetic { nodes, seed, params })
    }

    pub fn load(&self) -> Result<AsGraph, CliError> {
        match self {
            TopologySource::File { path } => read_as_rel_file(path).map_err(|e| CliError::data(format!("{}: {e}", path.display()))),
            TopologySource::Synthetic { nodes, seed, params } => {
                generate_synthetic_topology(*seed, *nodes, *params).map_err(|e| CliError::data(e.to_string()))
            }
        }
    }
}

fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| CliError::Usage(format!("invalid value for {key}: {v:?}")))
}

/// Everything needed to re-run an experiment. The master seed drives client
/// selection, model initialization, shuffling and ledger keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub topology: TopologySource,
    pub group: u8,
    /// Total samples across the group's clients after rescaling the preset.
    /// `None` keeps the preset's original sizes.
    pub group_scale: Option<usize>,
    /// ASes whose local data would exceed this many samples are never chosen
    /// as clients.
    pub max_client_samples: usize,
    pub model: ModelConfig,
    pub fl: FlConfig,
    pub clock: LogicalClock,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            topology: TopologySource::default(),
            group: 1,
            group_scale: Some(4100),
            max_client_samples: 2_000_000,
            model: ModelConfig::default(),
            fl: FlConfig::default(),
            clock: LogicalClock::default(),
            seed: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }

    /// Copies the master seed into the model and FL settings.
    pub fn normalized(mut self) -> Self {
        self.model.seed = self.seed;
        self.fl.seed = self.seed;
        self
    }

    pub fn preset(&self) -> Result<GroupPreset, CliError> {
        let preset = GroupPreset::builtin(self.group)
            .ok_or_else(|| CliError::Usage(format!("group must be 1, 2, 3 or 4, got {}", self.group)))?;
        Ok(match self.group_scale {
            Some(total) => preset.scaled_to(total),
            None => preset,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Short digest naming the default run directory.
    pub fn fingerprint(&self) -> String {
        hex::encode(&sha256(self.to_json().as_bytes())[..4])
    }
}
