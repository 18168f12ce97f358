//! LoRA deltas and weighted merging into a base checkpoint.
//!
//! An adapter module `m` holds a pair `(A, B)` with `A: r × d_in` and
//! `B: d_out × r`. Its dense update is `ΔW = (alpha / r) · B · A`. A merge
//! with entries `(adapter_i, w_i)` replaces every targeted base tensor `W`
//! with `W + Σ w_i · ΔW_i`.
//!
//! All arithmetic is F32. Entries are summed in adapter-name order so the
//! result does not depend on how the spec lists them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guard;
use crate::tensor_store::{read_store, write_store, Dtype, StoreError, Tensor, TensorStore};

pub const DEFAULT_TARGET_SUFFIX: &str = ".weight";
pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f64 = 16.0;
pub const TOOL_VERSION: &str = concat!("mergecheck ", env!("CARGO_PKG_VERSION"));

/// Metadata keys written into merged checkpoints.
pub mod provenance {
    pub const LABEL: &str = "mergecheck.label";
    pub const ENTRIES: &str = "mergecheck.entries";
    pub const OUTPUT_DTYPE: &str = "mergecheck.output_dtype";
    pub const TOOL_VERSION: &str = "mergecheck.tool_version";
}

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("merge spec has no entries")]
    EmptySpec,
    #[error("adapter {adapter:?} has no module {module:?}")]
    UnknownModule { adapter: String, module: String },
    #[error("module {module:?} targets base tensor {tensor:?}, which does not exist")]
    MissingBaseTensor { module: String, tensor: String },
    #[error("shape mismatch for {name:?}: {detail}")]
    ShapeMismatch { name: String, detail: String },
    #[error("invalid adapter {adapter:?}: {reason}")]
    InvalidAdapter { adapter: String, reason: String },
    #[error("adapter name {0:?} appears more than once")]
    DuplicateAdapter(String),
    #[error("weight for adapter {adapter:?} is not finite: {weight}")]
    NonFiniteWeight { adapter: String, weight: f64 },
    #[error("invalid merge spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, MergeError>;

/// Row-major dense F32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    fn from_tensor(name: &str, t: &Tensor) -> std::result::Result<Self, String> {
        match *t.shape() {
            [rows, cols] => Ok(Matrix::new(rows, cols, t.to_f32_vec())),
            ref other => Err(format!("{name} must be 2-D, has shape {other:?}")),
        }
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(vec![self.rows, self.cols], &self.data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// `r × d_in`
    pub a: Matrix,
    /// `d_out × r`
    pub b: Matrix,
}

/// Sidecar configuration stored next to adapter weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub r: usize,
    pub lora_alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub name: String,
    pub rank: usize,
    pub alpha: f64,
    pub modules: BTreeMap<String, LoraPair>,
}

impl LoraAdapter {
    pub fn new(
        name: impl Into<String>,
        rank: usize,
        alpha: f64,
        modules: BTreeMap<String, LoraPair>,
    ) -> Result<Self> {
        let adapter = LoraAdapter {
            name: name.into(),
            rank,
            alpha,
            modules,
        };
        adapter.validate()?;
        Ok(adapter)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| MergeError::InvalidAdapter {
            adapter: self.name.clone(),
            reason,
        };
        if self.name.is_empty() {
            return Err(bad("empty adapter name".into()));
        }
        if self.rank == 0 {
            return Err(bad("rank must be at least 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(bad(format!("alpha must be positive, got {}", self.alpha)));
        }
        for (module, pair) in &self.modules {
            if pair.a.rows != self.rank || pair.b.cols != self.rank {
                return Err(MergeError::ShapeMismatch {
                    name: module.clone(),
                    detail: format!(
                        "A is {}x{} and B is {}x{} but rank is {}",
                        pair.a.rows, pair.a.cols, pair.b.rows, pair.b.cols, self.rank
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn scaling(&self) -> f32 {
        (self.alpha / self.rank as f64) as f32
    }

    /// Builds an adapter from `{module}.lora_A` / `{module}.lora_B` tensors.
    /// A trailing `.weight` on those names is accepted.
    pub fn from_store(store: &TensorStore, config: &LoraConfig, fallback_name: &str) -> Result<Self> {
        let name = config.name.clone().unwrap_or_else(|| fallback_name.to_string());
        let bad = |reason: String| MergeError::InvalidAdapter {
            adapter: name.clone(),
            reason,
        };
        let mut a_parts = BTreeMap::new();
        let mut b_parts = BTreeMap::new();
        for (tensor_name, t) in store.iter() {
            let base = tensor_name.strip_suffix(".weight").unwrap_or(tensor_name);
            let (module, slot) = if let Some(m) = base.strip_suffix(".lora_A") {
                (m, &mut a_parts)
            } else if let Some(m) = base.strip_suffix(".lora_B") {
                (m, &mut b_parts)
            } else {
                return Err(bad(format!("unexpected tensor {tensor_name:?}")));
            };
            let m = Matrix::from_tensor(tensor_name, t).map_err(&bad)?;
            if slot.insert(module.to_string(), m).is_some() {
                return Err(bad(format!("duplicate tensor for module {module:?}")));
            }
        }
        let mut modules = BTreeMap::new();
        for (module, a) in a_parts {
            let b = b_parts
                .remove(&module)
                .ok_or_else(|| bad(format!("module {module:?} has lora_A but no lora_B")))?;
            modules.insert(module, LoraPair { a, b });
        }
        if let Some(module) = b_parts.keys().next() {
            return Err(bad(format!("module {module:?} has lora_B but no lora_A")));
        }
        LoraAdapter::new(name, config.r, config.lora_alpha, modules)
    }

    pub fn to_store(&self) -> TensorStore {
        let mut store = TensorStore::new();
        for (module, pair) in &self.modules {
            store
                .insert(format!("{module}.lora_A"), pair.a.to_tensor())
                .expect("module names are valid tensor names");
            store
                .insert(format!("{module}.lora_B"), pair.b.to_tensor())
                .expect("module names are valid tensor names");
        }
        store
    }

    pub fn config(&self) -> LoraConfig {
        LoraConfig {
            r: self.rank,
            lora_alpha: self.alpha,
            name: Some(self.name.clone()),
        }
    }

    /// Content fingerprint of the adapter weights plus its config.
    pub fn fingerprint(&self) -> guard::Fingerprint {
        let mut store = self.to_store();
        let cfg = serde_json::to_string(&self.config()).expect("config serializes");
        store.metadata_mut().insert("lora_config".into(), cfg);
        guard::fingerprint(&store)
    }

    /// Writes weights to `path` and the config to [`sidecar_path`].
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_store(&self.to_store(), path)?;
        let sidecar = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.config()).expect("config serializes");
        fs::write(&sidecar, json + "\n").map_err(|e| StoreError::io(&sidecar, e))?;
        Ok(())
    }

    /// Loads an adapter from a weights file or a directory.
    ///
    /// A directory must contain `adapter_model.safetensors`; the config is
    /// `adapter_config.json` beside it. For a file `x.safetensors` the
    /// config is `x.json`, falling back to `adapter_config.json` in the same
    /// directory. Without any config the rank is taken from the `A` shapes
    /// and alpha defaults to [`DEFAULT_ALPHA`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let weights = if path.is_dir() {
            path.join("adapter_model.safetensors")
        } else {
            path.to_path_buf()
        };
        let store = read_store(&weights)?;
        let fallback_name = if path.is_dir() {
            path.file_name()
        } else {
            path.file_stem()
        }
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "adapter".into());

        let candidates = [
            sidecar_path(&weights),
            weights.with_file_name("adapter_config.json"),
        ];
        let config = match candidates.iter().find(|p| p.is_file()) {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| StoreError::io(p, e))?;
                serde_json::from_str::<LoraConfig>(&text).map_err(|e| MergeError::InvalidAdapter {
                    adapter: fallback_name.clone(),
                    reason: format!("bad config {}: {e}", p.display()),
                })?
            }
            None => {
                let rank = store
                    .iter()
                    .find(|(n, _)| n.contains(".lora_A"))
                    .and_then(|(_, t)| t.shape().first().copied())
                    .unwrap_or(DEFAULT_RANK);
                warn!(
                    "no adapter config next to {}; assuming r={rank}, lora_alpha={DEFAULT_ALPHA}",
                    weights.display()
                );
                LoraConfig {
                    r: rank,
                    lora_alpha: DEFAULT_ALPHA,
                    name: None,
                }
            }
        };
        LoraAdapter::from_store(&store, &config, &fallback_name)
    }
}

/// `x.safetensors` → `x.json`.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

/// Name of the base tensor an adapter module targets.
pub fn target_name(module: &str, suffix: &str) -> String {
    format!("{module}{suffix}")
}

/// Dense update `(alpha / r) · B · A` for one module.
pub fn compute_delta(adapter: &LoraAdapter, module: &str) -> Result<Matrix> {
    let pair = adapter.modules.get(module).ok_or_else(|| MergeError::UnknownModule {
        adapter: adapter.name.clone(),
        module: module.to_string(),
    })?;
    let (a, b) = (&pair.a, &pair.b);
    if b.cols != a.rows {
        return Err(MergeError::ShapeMismatch {
            name: module.to_string(),
            detail: format!("B is {}x{} but A is {}x{}", b.rows, b.cols, a.rows, a.cols),
        });
    }
    let scale = adapter.scaling();
    let mut out = Matrix::zeros(b.rows, a.cols);
    for i in 0..b.rows {
        let row = &mut out.data[i * a.cols..(i + 1) * a.cols];
        for k in 0..b.cols {
            let bik = b.get(i, k);
            if bik == 0.0 {
                continue;
            }
            let a_row = &a.data[k * a.cols..(k + 1) * a.cols];
            for (o, &akj) in row.iter_mut().zip(a_row) {
                *o += bik * akj;
            }
        }
        for o in row.iter_mut() {
            *o *= scale;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeEntry {
    pub adapter: LoraAdapter,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeSpec {
    pub entries: Vec<MergeEntry>,
    pub output_dtype: Dtype,
    pub label: String,
    /// Appended to a module name to find its base tensor.
    pub target_suffix: String,
}

impl MergeSpec {
    pub fn new(entries: Vec<MergeEntry>, output_dtype: Dtype, label: impl Into<String>) -> Self {
        MergeSpec {
            entries,
            output_dtype,
            label: label.into(),
            target_suffix: DEFAULT_TARGET_SUFFIX.to_string(),
        }
    }

    /// Checks the entry list and returns it sorted by adapter name.
    pub fn sorted_entries(&self) -> Result<Vec<&MergeEntry>> {
        if self.entries.is_empty() {
            return Err(MergeError::EmptySpec);
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.adapter.name.as_str()) {
                return Err(MergeError::DuplicateAdapter(e.adapter.name.clone()));
            }
            if !e.weight.is_finite() {
                return Err(MergeError::NonFiniteWeight {
                    adapter: e.adapter.name.clone(),
                    weight: e.weight,
                });
            }
        }
        let mut sorted: Vec<&MergeEntry> = self.entries.iter().collect();
        sorted.sort_by(|x, y| x.adapter.name.cmp(&y.adapter.name));
        Ok(sorted)
    }

    pub fn weights(&self) -> BTreeMap<String, f64> {
        self.entries
            .iter()
            .map(|e| (e.adapter.name.clone(), e.weight))
            .collect()
    }
}

/// On-disk merge spec document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeSpecFile {
    pub entries: Vec<MergeSpecFileEntry>,
    pub output_dtype: Dtype,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_suffix: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeSpecFileEntry {
    pub adapter: PathBuf,
    pub weight: f64,
}

/// Reads a merge spec and loads its adapters. Relative adapter paths are
/// resolved against the spec file's directory.
pub fn load_merge_spec(path: impl AsRef<Path>) -> Result<MergeSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    let doc: MergeSpecFile = serde_json::from_str(&text)
        .map_err(|e| MergeError::InvalidSpec(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let entries = doc
        .entries
        .iter()
        .map(|e| {
            let p = if e.adapter.is_absolute() {
                e.adapter.clone()
            } else {
                dir.join(&e.adapter)
            };
            Ok(MergeEntry {
                adapter: LoraAdapter::load(p)?,
                weight: e.weight,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MergeSpec {
        entries,
        output_dtype: doc.output_dtype,
        label: doc.label,
        target_suffix: doc.target_suffix.unwrap_or_else(|| DEFAULT_TARGET_SUFFIX.to_string()),
    })
}

/// Expected F32 values `W + Σ w_i ΔW_i` for every targeted base tensor,
/// before any output cast.
pub fn merged_targets(base: &TensorStore, spec: &MergeSpec) -> Result<BTreeMap<String, Vec<f32>>> {
    let entries = spec.sorted_entries()?;
    let mut acc: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for entry in entries {
        let adapter = &entry.adapter;
        adapter.validate()?;
        let w = entry.weight as f32;
        for module in adapter.modules.keys() {
            let name = target_name(module, &spec.target_suffix);
            let base_t = base.get(&name).ok_or_else(|| MergeError::MissingBaseTensor {
                module: module.clone(),
                tensor: name.clone(),
            })?;
            let delta = compute_delta(adapter, module)?;
            if base_t.shape() != [delta.rows, delta.cols] {
                return Err(MergeError::ShapeMismatch {
                    name: name.clone(),
                    detail: format!(
                        "base is {:?}, delta from {:?} is [{}, {}]",
                        base_t.shape(),
                        adapter.name,
                        delta.rows,
                        delta.cols
                    ),
                });
            }
            let values = acc.entry(name).or_insert_with(|| base_t.to_f32_vec());
            for (v, d) in values.iter_mut().zip(&delta.data) {
                *v += w * d;
            }
        }
    }
    Ok(acc)
}

/// Merges `spec` into `base`, returning a complete checkpoint.
///
/// Targeted tensors are cast to `spec.output_dtype`; all others are copied
/// unchanged. Provenance (adapter fingerprints, weights, tool version) is
/// recorded in the store metadata.
pub fn apply_merge(base: &TensorStore, spec: &MergeSpec) -> Result<TensorStore> {
    for e in &spec.entries {
        if !(0.0..=1.0).contains(&e.weight) {
            warn!(
                "weight {} for adapter {:?} is outside [0, 1]; treating it as task-vector arithmetic",
                e.weight, e.adapter.name
            );
        }
    }
    let targets = merged_targets(base, spec)?;
    let mut out = base.clone();
    let mut overflowed = 0;
    for (name, values) in targets {
        let shape = base.get(&name).expect("target exists").shape().to_vec();
        let cast = Tensor::from_f32_as(shape, &values, spec.output_dtype);
        overflowed += cast.overflowed;
        out.insert(name, cast.tensor)?;
    }
    if overflowed > 0 {
        warn!("{overflowed} merged values overflowed {} and saturated", spec.output_dtype);
    }
    record_provenance(&mut out, spec);
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ProvenanceEntry {
    pub name: String,
    pub weight: f64,
    pub fingerprint: String,
}

fn record_provenance(store: &mut TensorStore, spec: &MergeSpec) {
    let mut entries: Vec<ProvenanceEntry> = spec
        .entries
        .iter()
        .map(|e| ProvenanceEntry {
            name: e.adapter.name.clone(),
            weight: e.weight,
            fingerprint: e.adapter.fingerprint().digest,
        })
        .collect();
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    let meta = store.metadata_mut();
    meta.insert(provenance::LABEL.into(), spec.label.clone());
    meta.insert(
        provenance::ENTRIES.into(),
        serde_json::to_string(&entries).expect("entries serialize"),
    );
    meta.insert(provenance::OUTPUT_DTYPE.into(), spec.output_dtype.to_string());
    meta.insert(provenance::TOOL_VERSION.into(), TOOL_VERSION.into());
}

/// Provenance entries recorded by [`apply_merge`], if present.
pub fn read_provenance(store: &TensorStore) -> Option<Vec<ProvenanceEntry>> {
    serde_json::from_str(store.metadata().get(provenance::ENTRIES)?).ok()
}
