use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use segsteer_core::adapt::AdaptConfig;
use segsteer_core::raster::TileSpec;

use crate::error::CliError;

pub const PORT_ENV: &str = "SEGSTEER_PORT";
pub const DEFAULT_PORT: u16 = 8080;

/// Settings for `serve`, loadable from a JSON file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Every subdirectory holding a model manifest is registered.
    pub registry_root: Option<PathBuf>,
    /// Sessions are persisted here and recovered on start-up.
    pub session_root: Option<PathBuf>,
    /// Web client assets served under `/`.
    pub static_dir: Option<PathBuf>,
    pub port: Option<u16>,
    /// Defaults for `POST /sessions/{id}/adapt`.
    pub adapt: AdaptConfig,
    /// Images larger than the tile are processed tile by tile.
    pub tiling: Option<TileSpec>,
}

impl ServiceConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }
}

/// Port precedence: environment, then flag, then config file, then default.
pub fn resolve_port(flag: Option<u16>, config: &ServiceConfig) -> Result<u16, CliError> {
    if let Ok(v) = std::env::var(PORT_ENV) {
        return v
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("{PORT_ENV}={v:?} is not a port number")));
    }
    Ok(flag.or(config.port).unwrap_or(DEFAULT_PORT))
}
