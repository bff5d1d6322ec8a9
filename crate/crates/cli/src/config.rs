use std::path::Path;

use colde::objectives::LossWeights;
use colde::refine::RefineConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{read_text, CliError, CliResult};

/// What `config init` writes and `--weights` reads. A file holding only the
/// loss weights is accepted too.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub weights: LossWeights,
    pub refine: RefineConfig,
}

pub fn parse_config(text: &str) -> Result<ConfigFile, String> {
    let value: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let sectioned = value
        .as_object()
        .is_some_and(|m| m.contains_key("weights") || m.contains_key("refine"));
    let cfg = if sectioned {
        serde_json::from_value(value).map_err(|e| e.to_string())?
    } else {
        ConfigFile {
            weights: serde_json::from_value(value).map_err(|e| e.to_string())?,
            ..ConfigFile::default()
        }
    };
    cfg.weights.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>) -> CliResult<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => parse_config(&read_text(p)?).map_err(|e| CliError::new("malformed_config", format!("{}: {e}", p.display()))),
    }
}
