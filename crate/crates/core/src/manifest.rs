//! Run manifests written next to every generated artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the canonical TOML rendering of the resolved configuration.
    pub config_digest: String,
    #[serde(with = "seed_text")]
    pub seed: u64,
    pub tool_version: String,
    pub timestamp: String,
}

/// Serde adapter that writes a `u64` seed as a decimal string, since TOML
/// integers stop at `i64::MAX`. Reading accepts either form.
pub mod seed_text {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(seed: &u64, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(seed)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<u64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Int(v) => Ok(v),
            Raw::Text(t) => t.parse().map_err(de::Error::custom),
        }
    }
}

/// Stable digest of a resolved configuration.
pub fn config_digest<T: Serialize>(resolved: &T) -> Result<String> {
    let canonical = toml::to_string(resolved)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

impl RunManifest {
    pub fn new<T: Serialize>(command: &str, resolved: &T, seed: u64) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config_digest: config_digest(resolved)?,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        })
    }

    /// `<artifact>.manifest.toml`.
    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut name = artifact.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.toml");
        artifact.with_file_name(name)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the manifest beside `artifact` and returns its path.
    pub fn write_beside(&self, artifact: &Path) -> Result<PathBuf> {
        let path = Self::path_for(artifact);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Cfg {
        beta2: f64,
        q: f64,
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = config_digest(&Cfg {
            beta2: -0.431,
            q: 0.5,
        })
        .unwrap();
        assert_eq!(
            a,
            config_digest(&Cfg {
                beta2: -0.431,
                q: 0.5
            })
            .unwrap()
        );
        assert_ne!(
            a,
            config_digest(&Cfg {
                beta2: -0.431,
                q: 0.6
            })
            .unwrap()
        );
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("trial.csv");
        let m = RunManifest::new("simulate", &Cfg { beta2: 1.0, q: 0.0 }, 7).unwrap();
        let path = m.write_beside(&artifact).unwrap();
        assert_eq!(path.file_name().unwrap(), "trial.csv.manifest.toml");
        let back: RunManifest = toml::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(chrono::DateTime::parse_from_rfc3339(&back.timestamp).is_ok());
    }

    #[test]
    fn seeds_above_i64_max_survive() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("trial.csv");
        let m = RunManifest::new("simulate", &Cfg { beta2: 1.0, q: 0.0 }, u64::MAX).unwrap();
        let text = std::fs::read_to_string(m.write_beside(&artifact).unwrap()).unwrap();
        assert!(text.contains("seed = \"18446744073709551615\""));
        let back: RunManifest = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, u64::MAX);
        let legacy: RunManifest =
            toml::from_str(&text.replace("\"18446744073709551615\"", "12")).unwrap();
        assert_eq!(legacy.seed, 12);
    }
}
