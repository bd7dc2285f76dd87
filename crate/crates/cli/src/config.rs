use std::path::Path;

use p4gs_core::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Reads a TOML config, or the type's defaults when no file is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairgenConfig {
    pub lq: TrainConfig,
    pub hq: TrainConfig,
}

impl Default for PairgenConfig {
    fn default() -> Self {
        PairgenConfig {
            lq: TrainConfig {
                budget_range: Some([250, 500]),
                ..TrainConfig::default()
            },
            hq: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilizeConfig {
    /// Validity threshold on the warped previous frame.
    pub tau: f64,
    pub pyramid_levels: usize,
    pub unsharp_radius: usize,
    pub unsharp_amount: f64,
}

impl Default for StabilizeConfig {
    fn default() -> Self {
        StabilizeConfig {
            tau: 0.1,
            pyramid_levels: 5,
            unsharp_radius: 2,
            unsharp_amount: 0.5,
        }
    }
}

/// Rendering options shared by `render` and `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub background: [f64; 3],
    /// Set for models whose colors were trained in linear space.
    pub linear_colors: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            background: [0.0; 3],
            linear_colors: false,
        }
    }
}
