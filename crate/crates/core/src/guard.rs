//! Checks for pipeline mistakes that silently change what a checkpoint is:
//! loading the wrong adapter, overwriting an export directory with a
//! different run, and evaluating under a different chat template than the
//! one used for training.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chat_template::{contains_think_open, TemplateId};
use crate::tensor_store::{read_store, StoreError, TensorStore};

pub const HASH_ALGORITHM: &str = "sha256";
pub const MANIFEST_FILE: &str = "merge_manifest.json";
pub const EXPORT_FILE: &str = "model.safetensors";
const CHECKPOINT_EXT: &str = "safetensors";

/// Content digest of a store's canonical serialization.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fingerprint {
    /// Lowercase hex SHA-256.
    pub digest: String,
    pub name_count: usize,
    /// Sum of tensor data bytes.
    pub total_bytes: u64,
}

pub fn fingerprint(store: &TensorStore) -> Fingerprint {
    Fingerprint {
        digest: hex::encode(Sha256::digest(store.to_bytes())),
        name_count: store.len(),
        total_bytes: store.data_len(),
    }
}

pub fn fingerprint_file(path: impl AsRef<Path>) -> Result<Fingerprint, StoreError> {
    Ok(fingerprint(&read_store(path)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for Decoding {
    /// The stochastic evaluation preset (Temp 0.6, Top-p 0.8).
    fn default() -> Self {
        Decoding {
            temperature: 0.6,
            top_p: 0.8,
        }
    }
}

/// Record of what went into an export. Written beside the checkpoint as
/// [`MANIFEST_FILE`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub base_fp: Fingerprint,
    pub adapter_fps: BTreeMap<String, Fingerprint>,
    pub merge_weights: BTreeMap<String, f64>,
    pub template_id: String,
    pub decoding: Decoding,
    pub created_at: String,
    pub tool_version: String,
    pub hash_algorithm: String,
    /// Fingerprint of the exported checkpoint, filled in after writing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub export_fp: Option<Fingerprint>,
}

/// The fields that define a run. Timestamps and the export fingerprint are
/// outputs, not inputs, so they are left out.
#[derive(Serialize)]
struct ManifestIdentity<'a> {
    base_fp: &'a Fingerprint,
    adapter_fps: &'a BTreeMap<String, Fingerprint>,
    merge_weights: &'a BTreeMap<String, f64>,
    template_id: &'a str,
    decoding: &'a Decoding,
    tool_version: &'a str,
    hash_algorithm: &'a str,
}

impl RunManifest {
    pub fn new(
        base_fp: Fingerprint,
        adapters: BTreeMap<String, (Fingerprint, f64)>,
        template_id: impl Into<String>,
        decoding: Decoding,
        created_at: DateTime<Utc>,
    ) -> Self {
        let mut adapter_fps = BTreeMap::new();
        let mut merge_weights = BTreeMap::new();
        for (name, (fp, w)) in adapters {
            adapter_fps.insert(name.clone(), fp);
            merge_weights.insert(name, w);
        }
        RunManifest {
            base_fp,
            adapter_fps,
            merge_weights,
            template_id: template_id.into(),
            decoding,
            created_at: created_at.to_rfc3339_opts(SecondsFormat::Secs, true),
            tool_version: crate::lora::TOOL_VERSION.to_string(),
            hash_algorithm: HASH_ALGORITHM.to_string(),
            export_fp: None,
        }
    }

    /// Digest of the run-defining fields.
    pub fn digest(&self) -> String {
        let id = ManifestIdentity {
            base_fp: &self.base_fp,
            adapter_fps: &self.adapter_fps,
            merge_weights: &self.merge_weights,
            template_id: &self.template_id,
            decoding: &self.decoding,
            tool_version: &self.tool_version,
            hash_algorithm: &self.hash_algorithm,
        };
        let json = serde_json::to_vec(&id).expect("manifest identity serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn is_consistent(&self) -> bool {
        self.adapter_fps.keys().eq(self.merge_weights.keys())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<RunManifest, GuardError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GuardError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| GuardError::BadManifest {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn write_manifest(dir: impl AsRef<Path>, manifest: &RunManifest) -> Result<PathBuf, GuardError> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()).map_err(|e| GuardError::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, thiserror::Error)]
pub enum GuardError {
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unreadable manifest {path}: {reason}")]
    BadManifest { path: String, reason: String },
}

impl GuardError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        GuardError::IoFailure {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Finding {
    Clean,
    /// The directory holds an export from a different run.
    OverwriteRisk {
        existing_digest: String,
        current_digest: String,
    },
    /// Checkpoints are present but there is no readable manifest for them.
    StaleManifest { checkpoints: Vec<String>, reason: String },
    /// The manifest matches but the checkpoint on disk is not the one it
    /// recorded.
    ExportModified {
        file: String,
        recorded_digest: String,
        actual_digest: String,
    },
    TemplateMismatch { train: String, eval: String },
    /// Think blocks in generations evaluated under the no-think template.
    ThinkLeakage { count: usize, sampled: usize },
}

impl Finding {
    pub fn is_clean(&self) -> bool {
        matches!(self, Finding::Clean)
    }
}

pub fn all_clean(findings: &[Finding]) -> bool {
    findings.iter().all(Finding::is_clean)
}

/// Inspects an export directory before writing `manifest`'s run into it.
/// Never modifies the directory.
pub fn check_export_dir(dir: impl AsRef<Path>, manifest: &RunManifest) -> Result<Vec<Finding>, GuardError> {
    let dir = dir.as_ref();
    if !dir.exists() {
        return Ok(vec![Finding::Clean]);
    }
    let mut checkpoints = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| GuardError::io(dir, e))? {
        let path = entry.map_err(|e| GuardError::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == CHECKPOINT_EXT) {
            checkpoints.push(path.file_name().expect("file").to_string_lossy().into_owned());
        }
    }
    checkpoints.sort();

    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Ok(if checkpoints.is_empty() {
            vec![Finding::Clean]
        } else {
            vec![Finding::StaleManifest {
                checkpoints,
                reason: format!("no {MANIFEST_FILE}"),
            }]
        });
    }
    let existing = match read_manifest(&manifest_path) {
        Ok(m) => m,
        Err(GuardError::BadManifest { reason, .. }) => {
            return Ok(vec![Finding::StaleManifest { checkpoints, reason }]);
        }
        Err(e) => return Err(e),
    };
    let (existing_digest, current_digest) = (existing.digest(), manifest.digest());
    if existing_digest != current_digest {
        return Ok(vec![Finding::OverwriteRisk {
            existing_digest,
            current_digest,
        }]);
    }
    let mut findings = Vec::new();
    if let Some(recorded) = &existing.export_fp {
        let export = dir.join(EXPORT_FILE);
        if export.is_file() {
            let actual = match fingerprint_file(&export) {
                Ok(fp) => fp.digest,
                Err(e) => format!("unreadable: {e}"),
            };
            if actual != recorded.digest {
                findings.push(Finding::ExportModified {
                    file: EXPORT_FILE.to_string(),
                    recorded_digest: recorded.digest.clone(),
                    actual_digest: actual,
                });
            }
        }
    }
    if findings.is_empty() {
        findings.push(Finding::Clean);
    }
    Ok(findings)
}

/// Compares train/eval template ids and scans sampled generations for
/// think blocks that should not appear under the no-think template.
pub fn lint_templates<S: AsRef<str>>(train_template: &str, eval_template: &str, generations: &[S]) -> Vec<Finding> {
    let mut findings = Vec::new();
    if train_template != eval_template {
        findings.push(Finding::TemplateMismatch {
            train: train_template.to_string(),
            eval: eval_template.to_string(),
        });
    }
    if eval_template.parse::<TemplateId>() == Ok(TemplateId::NoThink) {
        let count = generations.iter().filter(|g| contains_think_open(g.as_ref())).count();
        if count > 0 {
            findings.push(Finding::ThinkLeakage {
                count,
                sampled: generations.len(),
            });
        }
    }
    if findings.is_empty() {
        findings.push(Finding::Clean);
    }
    findings
}
