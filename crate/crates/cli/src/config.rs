//! Run configuration: JSON file merged over a preset, with flag overrides.
//! The merged effective config is persisted into every output directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use mddlab_core::data::DomainShiftSpec;
use mddlab_core::evaluation::AblationSpec;
use mddlab_core::{AdaptConfig, PretrainConfig, UNetConfig};

use crate::CliError;

/// Stream offset separating weight initialization from data sampling.
const INIT_STREAM: u64 = 0x1224;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: UNetConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub shift: DomainShiftSpec,
    /// Synthetic volumes per domain.
    pub n_source: usize,
    pub n_target: usize,
    pub geometry_seed: u64,
    /// Weight-initialization seed, kept on its own RNG stream so that the
    /// init draw is decorrelated from data sampling.
    pub init_seed: u64,
    /// Seeds for multi-run experiments; the first one drives single runs.
    pub seeds: Vec<u64>,
    /// Ablation grid; defaults to the standard table for the model depth.
    pub ablation: Option<AblationSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: UNetConfig::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            shift: DomainShiftSpec::desk_benchmark(0x5EED),
            n_source: 20,
            n_target: 20,
            geometry_seed: 0,
            init_seed: INIT_STREAM,
            seeds: vec![0],
            ablation: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Laptop-scale profile: 64x64 images, depth 4, 8 pretrain epochs.
    Desk,
    /// Full-scale profile mirroring the reference training regime.
    Paper,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => RunConfig::default(),
            Preset::Desk => RunConfig {
                model: UNetConfig::desk(),
                pretrain: PretrainConfig {
                    epochs: 8,
                    ..PretrainConfig::default()
                },
                adapt: AdaptConfig {
                    max_epochs: 5,
                    ..AdaptConfig::default()
                },
                n_source: 64,
                n_target: 16,
                seeds: vec![0, 1, 2, 3, 4],
                ..RunConfig::default()
            },
        }
    }

    /// Propagate one run seed into every seeded component, each on its own
    /// stream offset.
    pub fn apply_seed(&mut self, seed: u64) {
        self.geometry_seed = seed;
        self.init_seed = seed.wrapping_add(INIT_STREAM);
        self.pretrain.seed = seed;
        self.adapt.seed = seed;
        self.shift.seed = seed.wrapping_add(0x5EED);
        self.seeds = vec![seed];
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.pretrain.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.adapt.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.shift.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.n_source == 0 || self.n_target == 0 {
            return Err(CliError::Config("n_source and n_target must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must be non-empty".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(())
    }
}

/// Recursively overlay `over` onto `base`: objects merge key-wise, anything
/// else is replaced. This lets config files state only the fields they change
/// without clobbering preset values.
fn merge_json(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Build the effective config: preset (or paper defaults), overlaid with the
/// config file when given, then the seed flag / `MDDLAB_SEED`.
pub fn load_config(
    preset: Option<Preset>,
    config_path: Option<&Path>,
    seed_flag: Option<u64>,
) -> Result<RunConfig, CliError> {
    let base = RunConfig::preset(preset.unwrap_or(Preset::Paper));
    let mut cfg = match config_path {
        None => base,
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let over: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let mut merged =
                serde_json::to_value(&base).map_err(|e| CliError::Config(e.to_string()))?;
            merge_json(&mut merged, over);
            serde_json::from_value(merged)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
    };
    let default_seed = cfg.seeds.first().copied().unwrap_or(0);
    match seed_flag {
        Some(s) => cfg.apply_seed(s),
        None => {
            let s = mddlab_core::adaptation::seed_from_env(default_seed);
            if s != default_seed {
                cfg.apply_seed(s);
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
