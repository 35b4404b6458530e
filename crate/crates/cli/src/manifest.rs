//! Content-addressed record of what each stage produced.
//!
//! The manifest holds no timestamps or host details, so identical configs
//! reproduce it byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    /// Hash of the config, the stage options and the stage's input hashes.
    pub fingerprint: String,
    /// Artifact name → SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_sha256: String,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| CliError::artifact(&path, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(&tmp, text).map_err(|e| CliError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))
    }

    /// Stage that produced `artifact`, if recorded.
    pub fn producer_of(&self, artifact: &str) -> Option<&str> {
        self.stages
            .iter()
            .find(|(_, r)| r.outputs.contains_key(artifact))
            .map(|(s, _)| s.as_str())
    }

    /// True when every recorded output of `stage` is on disk with its recorded hash.
    pub fn outputs_intact(&self, stage: &str, dir: &Path) -> bool {
        let Some(rec) = self.stages.get(stage) else {
            return false;
        };
        !rec.outputs.is_empty()
            && rec
                .outputs
                .iter()
                .all(|(name, h)| hash_file(&dir.join(name)).is_ok_and(|got| &got == h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip_and_intact_check() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), "x\n1\n").unwrap();
        let mut m = Manifest {
            schema_version: 1,
            config_sha256: "c".into(),
            ..Manifest::default()
        };
        m.stages.insert(
            "eval".into(),
            StageRecord {
                fingerprint: "f".into(),
                outputs: BTreeMap::from([("a.csv".into(), hash_file(&dir.path().join("a.csv")).unwrap())]),
            },
        );
        m.save(dir.path()).unwrap();
        let back = Manifest::load(dir.path()).unwrap().unwrap();
        assert_eq!(back, m);
        assert!(back.outputs_intact("eval", dir.path()));
        assert_eq!(back.producer_of("a.csv"), Some("eval"));
        std::fs::write(dir.path().join("a.csv"), "x\n2\n").unwrap();
        assert!(!back.outputs_intact("eval", dir.path()));
        assert!(!back.outputs_intact("dknn", dir.path()));
        assert!(Manifest::load(&dir.path().join("missing")).unwrap().is_none());
    }

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
