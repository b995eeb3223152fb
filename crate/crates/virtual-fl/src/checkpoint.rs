//! Versioned on-disk snapshots of training state: the server's factor
//! collection plus every client's private posterior. JSON with
//! shortest-round-trip float formatting, so every `f64` survives a
//! save/load cycle bit-exactly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::refinement::{ClientState, ServerState};

/// Current snapshot format version.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed checkpoint: {source}")]
    Malformed {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: unsupported checkpoint version {found} (supported: {supported})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },
}

/// A complete training snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

impl Checkpoint {
    pub fn new(server: ServerState, clients: Vec<ClientState>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            server,
            clients,
        }
    }
}

/// Writes the snapshot as pretty-printed JSON.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), CheckpointError> {
    let text = serde_json::to_string_pretty(checkpoint).map_err(|source| {
        CheckpointError::Malformed {
            path: path.to_path_buf(),
            source,
        }
    })?;
    std::fs::write(path, text).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a snapshot back, rejecting unknown format versions.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let checkpoint: Checkpoint =
        serde_json::from_str(&text).map_err(|source| CheckpointError::Malformed {
            path: path.to_path_buf(),
            source,
        })?;
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            path: path.to_path_buf(),
            found: checkpoint.version,
            supported: CHECKPOINT_VERSION,
        });
    }
    Ok(checkpoint)
}
