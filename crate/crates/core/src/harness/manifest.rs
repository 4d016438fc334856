use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::util;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Record of one output directory: the config that produced it, a hash of every file in
/// it, and how long each command took. Timings are excluded from `manifest_hash`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub artifacts: Vec<ArtifactEntry>,
    pub manifest_hash: String,
    /// Wall-clock seconds per command, most recent run of each.
    pub timings: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct Hashed<'a> {
    tool_version: &'a str,
    config: &'a RunConfig,
    artifacts: &'a [ArtifactEntry],
}

/// The output directory is where the run lives, not what it is, so it is left out.
fn hash_of(tool_version: &str, config: &RunConfig, artifacts: &[ArtifactEntry]) -> String {
    let config = RunConfig {
        output: Default::default(),
        ..config.clone()
    };
    let doc = Hashed {
        tool_version,
        config: &config,
        artifacts,
    };
    util::sha256_hex(
        serde_json::to_string(&doc)
            .expect("manifest serializes")
            .as_bytes(),
    )
}

fn is_temporary(name: &str) -> bool {
    name.starts_with('.') && name.ends_with(".tmp")
}

/// Hashes every file under `dir` except the manifest itself and in-flight temporaries.
pub fn scan_artifacts(dir: &Path) -> Result<Vec<ArtifactEntry>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(dir)
            .expect("walk stays below its root");
        let name = entry.file_name().to_string_lossy();
        if rel == Path::new(MANIFEST_FILE) || is_temporary(&name) {
            continue;
        }
        let bytes = std::fs::read(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        let path = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        out.push(ArtifactEntry {
            path,
            sha256: util::sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

impl ExperimentManifest {
    pub fn build(config: &RunConfig, dir: &Path, timings: BTreeMap<String, f64>) -> Result<Self> {
        let tool_version = format!("unlearn-forge {}", env!("CARGO_PKG_VERSION"));
        let artifacts = scan_artifacts(dir)?;
        let manifest_hash = hash_of(&tool_version, config, &artifacts);
        Ok(Self {
            tool_version,
            config: config.clone(),
            artifacts,
            manifest_hash,
            timings,
        })
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Re-scans `dir` and rewrites the manifest, keeping earlier timings of other
    /// commands. Always the last file a command writes.
    pub fn update(config: &RunConfig, dir: &Path, command: &str, seconds: f64) -> Result<Self> {
        let mut timings = match Self::load(dir) {
            Ok(Some(m)) => m.timings,
            _ => BTreeMap::new(),
        };
        timings.insert(command.to_string(), seconds);
        let m = Self::build(config, dir, timings)?;
        util::write_atomic(&dir.join(MANIFEST_FILE), m.to_json().as_bytes())?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Recomputes the hash from the listed entries and checks every file against disk.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let expected = hash_of(&self.tool_version, &self.config, &self.artifacts);
        if expected != self.manifest_hash {
            return Err(Error::HashMismatch {
                what: "manifest".into(),
                expected,
                found: self.manifest_hash.clone(),
            });
        }
        let on_disk = scan_artifacts(dir)?;
        for (listed, found) in self.artifacts.iter().zip(&on_disk) {
            if listed != found {
                return Err(Error::HashMismatch {
                    what: listed.path.clone(),
                    expected: listed.sha256.clone(),
                    found: found.sha256.clone(),
                });
            }
        }
        if on_disk.len() != self.artifacts.len() {
            return Err(Error::Config(format!(
                "manifest lists {} artifacts, directory holds {}",
                self.artifacts.len(),
                on_disk.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timings_do_not_affect_the_hash() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("a")).unwrap();
        std::fs::write(dir.path().join("a/x.csv"), "1,2\n").unwrap();
        let cfg = RunConfig::default();
        let m1 = ExperimentManifest::update(&cfg, dir.path(), "gen-data", 1.0).unwrap();
        let m2 = ExperimentManifest::update(&cfg, dir.path(), "gen-data", 9.0).unwrap();
        assert_eq!(m1.manifest_hash, m2.manifest_hash);
        assert_eq!(m2.artifacts.len(), 1);
        assert_eq!(m2.artifacts[0].path, "a/x.csv");
        m2.verify(dir.path()).unwrap();
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x.csv"), "1").unwrap();
        let m = ExperimentManifest::update(&RunConfig::default(), dir.path(), "c", 0.0).unwrap();
        std::fs::write(dir.path().join("x.csv"), "2").unwrap();
        assert!(matches!(
            m.verify(dir.path()),
            Err(Error::HashMismatch { .. })
        ));
        std::fs::write(dir.path().join("x.csv"), "1").unwrap();
        std::fs::write(dir.path().join("y.csv"), "orphan").unwrap();
        assert!(m.verify(dir.path()).is_err());
    }

    #[test]
    fn config_changes_the_hash() {
        let dir = tempfile::tempdir().unwrap();
        let a =
            ExperimentManifest::build(&RunConfig::default(), dir.path(), BTreeMap::new()).unwrap();
        let mut cfg = RunConfig::default();
        cfg.eval.seed = 99;
        let b = ExperimentManifest::build(&cfg, dir.path(), BTreeMap::new()).unwrap();
        assert_ne!(a.manifest_hash, b.manifest_hash);
        cfg.eval.seed = RunConfig::default().eval.seed;
        cfg.output = "elsewhere".into();
        let c = ExperimentManifest::build(&cfg, dir.path(), BTreeMap::new()).unwrap();
        assert_eq!(a.manifest_hash, c.manifest_hash);
    }
}
