pub mod ablate;
pub mod eval;
pub mod export_attn;
pub mod gradcheck;
pub mod pairs;
pub mod synth;
pub mod train;

use crate::ConfigOverrides;
use pcnet_core::training::TrainConfig;
use pcnet_core::{Error, Result};

/// Builds the resolved configuration: defaults, then the config file, then
/// `--set` pairs, then the typed flags (latest wins).
pub fn resolve_config(overrides: &ConfigOverrides) -> Result<TrainConfig> {
    let mut config = match &overrides.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            TrainConfig::from_text(&text)?
        }
        None => TrainConfig::default(),
    };
    apply_overrides(&mut config, overrides)?;
    Ok(config)
}

pub fn apply_overrides(config: &mut TrainConfig, overrides: &ConfigOverrides) -> Result<()> {
    for pair in &overrides.sets {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects KEY=VALUE, got '{}'", pair))
        })?;
        config.set(key.trim(), value.trim())?;
    }
    if let Some(v) = overrides.epochs {
        config.epochs = v;
    }
    if let Some(v) = overrides.seed {
        config.seed = v;
    }
    if let Some(v) = overrides.lambda {
        config.lambda = v;
    }
    if let Some(v) = overrides.epsilon {
        config.epsilon = v;
    }
    if let Some(v) = &overrides.precision {
        config.set("precision", v)?;
    }
    if let Some(v) = &overrides.metric {
        config.set("metric", v)?;
    }
    if let Some(v) = &overrides.strategy {
        config.set("strategy", v)?;
    }
    if let Some(v) = &overrides.architecture {
        config.set("architecture", v)?;
    }
    if let Some(v) = &overrides.representation {
        config.set("representation", v)?;
    }
    if let Some(v) = &overrides.objective {
        config.set("objective", v)?;
    }
    if let Some(v) = overrides.classes_per_batch {
        config.classes_per_batch = v;
    }
    if let Some(v) = overrides.images_per_class {
        config.images_per_class = v;
    }
    config.validate()
}
