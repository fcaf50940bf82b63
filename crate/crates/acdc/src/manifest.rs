//! Run manifests: a JSON record of every setting a command resolved, written
//! next to its outputs so the exact run can be replayed later.
//!
//! Manifests store fully resolved values (inline model configuration,
//! concrete dataset choice, seeds), never "auto" placeholders, and list
//! output files relative to the output directory so a replay into a fresh
//! directory is byte-for-byte comparable.

use crate::counts::FlopConvention;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scalar::Precision;
use crate::sharing::SharingScheme;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Concrete dataset selection after any auto-detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Mnist {
        dir: String,
        train: bool,
        limit: usize,
    },
    SyntheticDigits {
        n: usize,
        seed: u64,
    },
    SyntheticBlobs {
        n: usize,
        size: usize,
        seed: u64,
    },
}

/// Everything needed to replay one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ManifestCommand {
    Count {
        model: ModelConfig,
        scheme: SharingScheme,
    },
    Flops {
        model: ModelConfig,
        scheme: SharingScheme,
        input: [usize; 3],
        batch: usize,
        convention: FlopConvention,
    },
    Train {
        model: ModelConfig,
        scheme: SharingScheme,
        precision: Precision,
        drop_rate: f64,
        train: TrainConfig,
        dataset: DatasetSpec,
        test_dataset: Option<DatasetSpec>,
    },
    Eval {
        checkpoint: String,
        dataset: DatasetSpec,
        batch: usize,
    },
    Rank {
        checkpoint: String,
        dataset: DatasetSpec,
        batch: usize,
        threshold: f64,
    },
    Cam {
        checkpoint: String,
        dataset: DatasetSpec,
        index: usize,
        class: Option<usize>,
        clip_negative: bool,
    },
    Sweep {
        model: ModelConfig,
        precision: Precision,
        scheme_kind: String,
        m_grid: Vec<usize>,
        s_grid: Vec<Option<usize>>,
        drop_grid: Vec<f64>,
        train: TrainConfig,
        dataset: DatasetSpec,
        test_dataset: DatasetSpec,
    },
}

/// Manifest written alongside command outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub library: String,
    #[serde(flatten)]
    pub command: ManifestCommand,
    /// Files the run produced, relative to its output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: ManifestCommand, outputs: Vec<String>) -> Self {
        RunManifest {
            library: crate::VERSION.to_string(),
            command,
            outputs,
        }
    }
}

/// Writes `manifest.json` into `dir` and returns its path.
pub fn save_manifest(manifest: &RunManifest, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(manifest)
        .map_err(|e| Error::io(format!("manifest encode: {e}")))?;
    json.push(b'\n');
    std::fs::write(&path, json)?;
    Ok(path)
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::config(format!("{}: manifest decode: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::preset;
    use crate::sharing::{SchemeKind, SharingScheme};

    fn sample() -> RunManifest {
        RunManifest::new(
            ManifestCommand::Train {
                model: preset("toy-4layer").unwrap(),
                scheme: SharingScheme {
                    kind: SchemeKind::Net,
                    m: 8,
                    s: None,
                },
                precision: Precision::F64,
                drop_rate: 0.1,
                train: TrainConfig::default(),
                dataset: DatasetSpec::SyntheticDigits { n: 100, seed: 4 },
                test_dataset: None,
            },
            vec!["metrics.csv".into(), "model.ckpt".into()],
        )
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample();
        let path = save_manifest(&m, dir.path()).unwrap();
        assert!(path.ends_with(MANIFEST_FILE));
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(m, loaded);
    }

    #[test]
    fn rewriting_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m = sample();
        let p1 = save_manifest(&m, d1.path()).unwrap();
        let p2 = save_manifest(&load_manifest(&p1).unwrap(), d2.path()).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn unknown_command_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        std::fs::write(&path, br#"{"library":"0","command":"explode","outputs":[]}"#).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
