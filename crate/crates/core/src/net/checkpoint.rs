//! Versioned JSON checkpoint holding the network parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::NetParams;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "sfp-checkpoint";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u16,
    params: NetParams,
}

pub fn checkpoint_to_string(params: &NetParams) -> Result<String> {
    let env = Envelope { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, params: params.clone() };
    serde_json::to_string(&env).map_err(|e| Error::InvalidInput(e.to_string()))
}

pub fn checkpoint_from_str(text: &str) -> Result<NetParams> {
    let env: Envelope = serde_json::from_str(text).map_err(|e| Error::Corrupt(format!("checkpoint: {e}")))?;
    if env.format != CHECKPOINT_FORMAT {
        return Err(Error::Corrupt(format!("not a checkpoint (format `{}`)", env.format)));
    }
    if env.version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: env.version, expected: CHECKPOINT_VERSION });
    }
    env.params.validate().map_err(|e| Error::Corrupt(format!("checkpoint: {e}")))?;
    Ok(env.params)
}

pub fn save_checkpoint(params: &NetParams, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NetParams> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}
