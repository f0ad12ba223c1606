//! Experiment configuration: one TOML file with `[workload]`, `[train]`,
//! `[cost]`, and `[run]` sections. Unknown fields are rejected; command-line
//! flags override scalar fields only.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use nestpipe_core::dbp::TrainMode;
use nestpipe_core::timing::CostModel;
use nestpipe_core::types::TrainConfig;
use nestpipe_core::workload::WorkloadConfig;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Dataset file; defaults to `<out_dir>/dataset.jsonl`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub verify: bool,
    #[serde(default = "default_sweep")]
    pub sweep_workers: Vec<usize>,
}

fn default_mode() -> String {
    "nestpipe".into()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_sweep() -> Vec<usize> {
    vec![128, 256, 512, 1024, 1536]
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            out_dir: default_out_dir(),
            dataset: None,
            verify: false,
            sweep_workers: default_sweep(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub workload: WorkloadConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default)]
    pub run: RunSection,
}

/// Scalar overrides from command-line flags.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub mode: Option<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub verify: bool,
    pub exact_order: bool,
    pub sweep_workers: Option<Vec<usize>>,
}

#[derive(Debug)]
pub enum ConfigLoadError {
    Io(String),
    Invalid(String),
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigLoadError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ConfigLoadError::Io(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| ConfigLoadError::Invalid(e.to_string()))?;

        if let Some(mode) = &overrides.mode {
            cfg.run.mode = mode.clone();
        }
        if let Some(seed) = overrides.seed {
            cfg.train.seed = seed;
            cfg.workload.seed = seed;
        }
        if let Some(out) = &overrides.out_dir {
            cfg.run.out_dir = out.clone();
        }
        if overrides.verify {
            cfg.run.verify = true;
        }
        if overrides.exact_order {
            cfg.train.exact_order_mode = true;
        }
        if let Some(sweep) = &overrides.sweep_workers {
            cfg.run.sweep_workers = sweep.clone();
        }

        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigLoadError> {
        self.workload
            .validate()
            .map_err(|e| ConfigLoadError::Invalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigLoadError::Invalid(e.to_string()))?;
        self.cost.validate().map_err(ConfigLoadError::Invalid)?;
        if self.workload.vocab_size != self.train.vocab_size {
            return Err(ConfigLoadError::Invalid(format!(
                "field `vocab_size` differs between sections: workload {} vs train {}",
                self.workload.vocab_size, self.train.vocab_size
            )));
        }
        if self.run.mode.parse::<ModeArg>().is_err() {
            return Err(ConfigLoadError::Invalid(format!(
                "field `mode`: unknown mode `{}`",
                self.run.mode
            )));
        }
        if self.run.sweep_workers.is_empty() || self.run.sweep_workers.contains(&0) {
            return Err(ConfigLoadError::Invalid(
                "field `sweep_workers`: need at least one positive worker count".into(),
            ));
        }
        Ok(())
    }

    pub fn mode(&self) -> TrainMode {
        self.run.mode.parse::<ModeArg>().expect("validated").0
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.run
            .dataset
            .clone()
            .unwrap_or_else(|| self.run.out_dir.join("dataset.jsonl"))
    }
}

/// Newtype so mode parsing can be used with `str::parse`.
pub struct ModeArg(pub TrainMode);

impl std::str::FromStr for ModeArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrainMode::parse(s)
            .map(ModeArg)
            .ok_or_else(|| format!("unknown mode `{s}` (expected one of sync-baseline, dbp-only, fwp-only, nestpipe, unsafe-six-stage)"))
    }
}

/// Parse `--sweep workers=a,b,c`.
pub fn parse_sweep(spec: &str) -> Result<Vec<usize>, String> {
    let rest = spec
        .strip_prefix("workers=")
        .ok_or_else(|| format!("sweep spec `{spec}` must look like workers=128,256"))?;
    let mut out = Vec::new();
    for part in rest.split(',') {
        let value: usize = part
            .trim()
            .parse()
            .map_err(|_| format!("sweep spec `{spec}`: `{part}` is not a worker count"))?;
        if value == 0 {
            return Err(format!(
                "sweep spec `{spec}`: worker count must be positive"
            ));
        }
        out.push(value);
    }
    if out.is_empty() {
        return Err(format!("sweep spec `{spec}` has no worker counts"));
    }
    Ok(out)
}
