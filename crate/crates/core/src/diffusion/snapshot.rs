use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::denoiser::{DenoiserArch, DenoiserNet};
use super::schedule::NoiseSchedule;
use crate::concepts::ConceptTable;
use crate::error::{Error, Result};
use crate::numgrad::checkpoint;
use crate::util;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    /// `base` or `unlearn:<method>`.
    pub origin: String,
    pub steps: usize,
    pub seed: u64,
    pub loss_digest: String,
    /// Id of the snapshot this one was derived from.
    #[serde(default)]
    pub parent: Option<String>,
}

/// Sidecar document stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotSidecar {
    pub arch: DenoiserArch,
    pub timesteps: usize,
    pub x0_clip: Option<f64>,
    pub schedule_hash: String,
    pub table_hash: String,
    pub checkpoint_hash: String,
    pub meta: SnapshotMeta,
}

/// A denoiser together with the schedule and concept table it was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub net: DenoiserNet,
    pub schedule: NoiseSchedule,
    pub table_hash: String,
    pub meta: SnapshotMeta,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    checkpoint.with_file_name(name)
}

impl ModelSnapshot {
    pub fn new(
        net: DenoiserNet,
        schedule: NoiseSchedule,
        table: &ConceptTable,
        meta: SnapshotMeta,
    ) -> Self {
        Self {
            net,
            schedule,
            table_hash: table.content_hash(),
            meta,
        }
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.net.params)
    }

    /// Short content id of the parameters.
    pub fn id(&self) -> String {
        util::sha256_hex(&self.checkpoint_bytes())[..16].to_string()
    }

    pub fn sidecar(&self) -> SnapshotSidecar {
        SnapshotSidecar {
            arch: self.net.arch.clone(),
            timesteps: self.schedule.steps(),
            x0_clip: self.schedule.x0_clip(),
            schedule_hash: self.schedule.content_hash(),
            table_hash: self.table_hash.clone(),
            checkpoint_hash: util::sha256_hex(&self.checkpoint_bytes()),
            meta: self.meta.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.net.params, path)?;
        let side = serde_json::to_string_pretty(&self.sidecar()).expect("sidecar serializes");
        util::write_atomic(&sidecar_path(path), side.as_bytes())
    }

    /// Loads a checkpoint and its sidecar, verifying the table, schedule and payload hashes.
    pub fn load(path: &Path, table: &ConceptTable) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                producer: "train-base",
            });
        }
        let side_path = sidecar_path(path);
        let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let side: SnapshotSidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", side_path.display())))?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let found = util::sha256_hex(&bytes);
        if found != side.checkpoint_hash {
            return Err(Error::HashMismatch {
                what: path.display().to_string(),
                expected: side.checkpoint_hash,
                found,
            });
        }
        let table_hash = table.content_hash();
        if table_hash != side.table_hash {
            return Err(Error::HashMismatch {
                what: "concept table".into(),
                expected: side.table_hash,
                found: table_hash,
            });
        }
        let schedule = NoiseSchedule::cosine(side.timesteps)?.with_x0_clip(side.x0_clip)?;
        if schedule.content_hash() != side.schedule_hash {
            return Err(Error::HashMismatch {
                what: "noise schedule".into(),
                expected: side.schedule_hash,
                found: schedule.content_hash(),
            });
        }
        let params = checkpoint::decode(&bytes)?;
        let net = DenoiserNet::from_params(side.arch, params)?;
        Ok(Self {
            net,
            schedule,
            table_hash,
            meta: side.meta,
        })
    }
}
