//! Numerical checks on exported checkpoints.
//!
//! * [`verify_merge`] compares a candidate against `base + Σ w_i ΔW_i`.
//! * [`infer_mix_weights`] recovers the weights actually present by least
//!   squares over the adapter deltas.
//! * [`classify_checkpoint`] scores named hypotheses (base, single
//!   adapters, the declared mix) and picks the closest one.

pub mod solve;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lora::{compute_delta, merged_targets, target_name, LoraAdapter, MergeError, MergeSpec, DEFAULT_TARGET_SUFFIX};
use crate::tensor_store::{Dtype, TensorStore};

/// Floor on the relative-error denominator.
pub const REL_DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("tensor names differ: missing from candidate {missing:?}, unexpected in candidate {extra:?}")]
    NameSetMismatch { missing: Vec<String>, extra: Vec<String> },
    #[error("shape mismatch for {name:?}: base {base:?}, candidate {candidate:?}")]
    ShapeMismatch {
        name: String,
        base: Vec<usize>,
        candidate: Vec<usize>,
    },
    #[error("no candidate adapters given")]
    NoAdapters,
    #[error("adapter name {0:?} appears more than once")]
    DuplicateAdapter(String),
    #[error("no hypotheses given")]
    NoHypotheses,
    #[error("hypothesis label {0:?} appears more than once")]
    DuplicateHypothesis(String),
    #[error("hypothesis {label:?} weights unknown adapter {adapter:?}")]
    UnknownAdapter { label: String, adapter: String },
    #[error(transparent)]
    Merge(#[from] MergeError),
}

pub type Result<T> = std::result::Result<T, AuditError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub abs: f64,
    pub rel: f64,
}

impl Tolerances {
    pub const F32: Tolerances = Tolerances { abs: 1e-5, rel: 1e-4 };
    /// One part in 128.
    pub const BF16: Tolerances = Tolerances {
        abs: 1e-5,
        rel: 1.0 / 128.0,
    };
    /// One part in 1024.
    pub const F16: Tolerances = Tolerances {
        abs: 1e-5,
        rel: 1.0 / 1024.0,
    };

    pub fn for_dtype(dtype: Dtype) -> Self {
        match dtype {
            Dtype::F32 => Self::F32,
            Dtype::BF16 => Self::BF16,
            Dtype::F16 => Self::F16,
        }
    }

    /// Profile for the lowest-precision dtype among the candidate tensors.
    pub fn for_candidate(candidate: &TensorStore) -> Self {
        candidate
            .iter()
            .map(|(_, t)| Self::for_dtype(t.dtype()))
            .fold(Self::F32, |acc, t| if t.rel > acc.rel { t } else { acc })
    }
}

impl Default for Tolerances {
    fn default() -> Self {
        Self::F32
    }
}

/// Named tolerance profile: `f32`, `bf16` or `f16`.
impl FromStr for Tolerances {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "f32" => Ok(Self::F32),
            "bf16" => Ok(Self::BF16),
            "f16" => Ok(Self::F16),
            other => Err(format!("unknown tolerance profile {other:?} (expected f32, bf16 or f16)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorErrors {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub mean_abs_err: f64,
    /// Whether any adapter module targets this tensor.
    pub targeted: bool,
}

impl TensorErrors {
    pub fn within(&self, tol: &Tolerances) -> bool {
        self.max_abs_err <= tol.abs || self.max_rel_err <= tol.rel
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "Pass",
            Verdict::Fail => "Fail",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub label: String,
    pub per_tensor: BTreeMap<String, TensorErrors>,
    pub tolerance_abs: f64,
    pub tolerance_rel: f64,
    pub verdict: Verdict,
    pub failing_tensors: Vec<String>,
}

fn check_layout(base: &TensorStore, candidate: &TensorStore) -> Result<()> {
    let b: BTreeSet<&str> = base.names().collect();
    let c: BTreeSet<&str> = candidate.names().collect();
    if b != c {
        return Err(AuditError::NameSetMismatch {
            missing: b.difference(&c).map(|s| s.to_string()).collect(),
            extra: c.difference(&b).map(|s| s.to_string()).collect(),
        });
    }
    for (name, bt) in base.iter() {
        let ct = candidate.get(name).expect("same name set");
        if bt.shape() != ct.shape() {
            return Err(AuditError::ShapeMismatch {
                name: name.to_string(),
                base: bt.shape().to_vec(),
                candidate: ct.shape().to_vec(),
            });
        }
    }
    Ok(())
}

fn error_stats(expected: &[f32], actual: &[f32], targeted: bool) -> TensorErrors {
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut sum_abs = 0.0f64;
    for (&e, &a) in expected.iter().zip(actual) {
        let (e, a) = (e as f64, a as f64);
        let mut abs = (a - e).abs();
        if abs.is_nan() {
            abs = if a == e { 0.0 } else { f64::INFINITY };
        }
        let rel = abs / e.abs().max(REL_DENOM_FLOOR);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
        sum_abs += abs;
    }
    TensorErrors {
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        mean_abs_err: if expected.is_empty() {
            0.0
        } else {
            sum_abs / expected.len() as f64
        },
        targeted,
    }
}

/// Checks every tensor of `candidate` against the F32 recomputation of
/// `base + Σ w_i ΔW_i`. Untargeted tensors are compared against the base.
/// A tensor passes when its max absolute error is within `tol.abs` or its
/// max relative error is within `tol.rel`.
pub fn verify_merge(
    base: &TensorStore,
    spec: &MergeSpec,
    candidate: &TensorStore,
    tol: Tolerances,
) -> Result<VerifyReport> {
    check_layout(base, candidate)?;
    let expected = merged_targets(base, spec)?;
    let mut per_tensor = BTreeMap::new();
    let mut failing = Vec::new();
    for (name, bt) in base.iter() {
        let actual = candidate.get(name).expect("checked").to_f32_vec();
        let stats = match expected.get(name) {
            Some(exp) => error_stats(exp, &actual, true),
            None => error_stats(&bt.to_f32_vec(), &actual, false),
        };
        if !stats.within(&tol) {
            failing.push(name.to_string());
        }
        per_tensor.insert(name.to_string(), stats);
    }
    Ok(VerifyReport {
        label: spec.label.clone(),
        per_tensor,
        tolerance_abs: tol.abs,
        tolerance_rel: tol.rel,
        verdict: if failing.is_empty() {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
        failing_tensors: failing,
    })
}

/// A named set of mixture weights to test a checkpoint against. Adapters
/// not listed have weight zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub label: String,
    pub weights: BTreeMap<String, f64>,
}

impl Hypothesis {
    pub fn new(label: impl Into<String>, weights: impl IntoIterator<Item = (String, f64)>) -> Self {
        Hypothesis {
            label: label.into(),
            weights: weights.into_iter().collect(),
        }
    }

    pub fn base() -> Self {
        Hypothesis::new("base", [])
    }

    /// `"{name}-only"` at weight 1.
    pub fn adapter_only(name: &str) -> Self {
        Hypothesis::new(format!("{name}-only"), [(name.to_string(), 1.0)])
    }

    pub fn from_spec(spec: &MergeSpec) -> Self {
        Hypothesis::new(spec.label.clone(), spec.weights())
    }

    fn nonzero(&self) -> usize {
        self.weights.values().filter(|w| **w != 0.0).count()
    }
}

/// Base only, each adapter alone at weight 1, and the declared spec if any.
pub fn default_hypotheses(adapters: &[LoraAdapter], declared: Option<&MergeSpec>) -> Vec<Hypothesis> {
    let mut hs = vec![Hypothesis::base()];
    hs.extend(adapters.iter().map(|a| Hypothesis::adapter_only(&a.name)));
    if let Some(spec) = declared {
        let h = Hypothesis::from_spec(spec);
        if !hs.iter().any(|x| x.label == h.label) {
            hs.push(h);
        }
    }
    hs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    /// Adapter names in the order used by `per_tensor_weights`.
    pub adapters: Vec<String>,
    pub inferred_weights: BTreeMap<String, f64>,
    pub residual_rms: f64,
    pub per_tensor_weights: BTreeMap<String, Vec<f64>>,
    /// Delta vectors were (nearly) linearly dependent; weights are the
    /// minimum-norm pseudo-inverse solution.
    pub degenerate: bool,
    pub condition_estimate: f64,
    pub n_elements: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_hypothesis: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hypothesis_residuals: BTreeMap<String, f64>,
}

/// Per-tensor difference `candidate − base` and the matching adapter
/// deltas, flattened to f64.
struct Block {
    name: String,
    diff: Vec<f64>,
    deltas: Vec<Option<Vec<f64>>>,
}

/// Differences and deltas over all targeted tensors.
pub struct DeltaBasis {
    adapters: Vec<String>,
    blocks: Vec<Block>,
}

impl DeltaBasis {
    pub fn build(
        base: &TensorStore,
        adapters: &[LoraAdapter],
        candidate: &TensorStore,
        target_suffix: &str,
    ) -> Result<Self> {
        if adapters.is_empty() {
            return Err(AuditError::NoAdapters);
        }
        let mut seen = BTreeSet::new();
        for a in adapters {
            if !seen.insert(a.name.as_str()) {
                return Err(AuditError::DuplicateAdapter(a.name.clone()));
            }
            a.validate()?;
        }
        check_layout(base, candidate)?;

        let mut by_tensor: BTreeMap<String, Vec<Option<Vec<f64>>>> = BTreeMap::new();
        for (i, adapter) in adapters.iter().enumerate() {
            for module in adapter.modules.keys() {
                let name = target_name(module, target_suffix);
                let bt = base.get(&name).ok_or_else(|| MergeError::MissingBaseTensor {
                    module: module.clone(),
                    tensor: name.clone(),
                })?;
                let delta = compute_delta(adapter, module)?;
                if bt.shape() != [delta.rows, delta.cols] {
                    return Err(MergeError::ShapeMismatch {
                        name,
                        detail: format!(
                            "base is {:?}, delta from {:?} is [{}, {}]",
                            bt.shape(),
                            adapter.name,
                            delta.rows,
                            delta.cols
                        ),
                    }
                    .into());
                }
                let slot = by_tensor.entry(name).or_insert_with(|| vec![None; adapters.len()]);
                slot[i] = Some(delta.data.iter().map(|&v| v as f64).collect());
            }
        }
        let blocks = by_tensor
            .into_iter()
            .map(|(name, deltas)| {
                let b = base.get(&name).expect("checked").to_f32_vec();
                let c = candidate.get(&name).expect("checked").to_f32_vec();
                let diff = c.iter().zip(&b).map(|(&c, &b)| c as f64 - b as f64).collect();
                Block { name, diff, deltas }
            })
            .collect();
        Ok(DeltaBasis {
            adapters: adapters.iter().map(|a| a.name.clone()).collect(),
            blocks,
        })
    }

    pub fn n_elements(&self) -> usize {
        self.blocks.iter().map(|b| b.diff.len()).sum()
    }

    fn normal_equations<'a>(&self, blocks: impl Iterator<Item = &'a Block>) -> (Vec<f64>, Vec<f64>) {
        let k = self.adapters.len();
        let mut g = vec![0.0; k * k];
        let mut rhs = vec![0.0; k];
        for block in blocks {
            for i in 0..k {
                let Some(di) = &block.deltas[i] else { continue };
                rhs[i] += dot(di, &block.diff);
                for j in i..k {
                    let Some(dj) = &block.deltas[j] else { continue };
                    let v = dot(di, dj);
                    g[i * k + j] += v;
                    if i != j {
                        g[j * k + i] += v;
                    }
                }
            }
        }
        (g, rhs)
    }

    /// RMS of `diff − Σ w_i Δ_i` over all targeted elements, with weights in
    /// adapter order.
    pub fn residual_rms(&self, weights: &[f64]) -> f64 {
        let n = self.n_elements();
        if n == 0 {
            return 0.0;
        }
        let mut sum = 0.0;
        for block in &self.blocks {
            for (e, d) in block.diff.iter().enumerate() {
                let mut r = *d;
                for (w, delta) in weights.iter().zip(&block.deltas) {
                    if let Some(delta) = delta {
                        r -= w * delta[e];
                    }
                }
                sum += r * r;
            }
        }
        (sum / n as f64).sqrt()
    }

    /// Joint least-squares solve plus one solve per tensor.
    pub fn attribute(&self) -> AttributionReport {
        let (g, rhs) = self.normal_equations(self.blocks.iter());
        let joint = solve::solve_normal_equations(&g, &rhs);
        let per_tensor_weights = self
            .blocks
            .iter()
            .map(|b| {
                let (g, rhs) = self.normal_equations(std::iter::once(b));
                (b.name.clone(), solve::solve_normal_equations(&g, &rhs).x)
            })
            .collect();
        AttributionReport {
            adapters: self.adapters.clone(),
            inferred_weights: self.adapters.iter().cloned().zip(joint.x.iter().copied()).collect(),
            residual_rms: self.residual_rms(&joint.x),
            per_tensor_weights,
            degenerate: joint.degenerate,
            condition_estimate: joint.condition,
            n_elements: self.n_elements(),
            best_hypothesis: None,
            hypothesis_residuals: BTreeMap::new(),
        }
    }

    fn weights_for(&self, h: &Hypothesis) -> Result<Vec<f64>> {
        if let Some(unknown) = h.weights.keys().find(|k| !self.adapters.contains(k)) {
            return Err(AuditError::UnknownAdapter {
                label: h.label.clone(),
                adapter: unknown.clone(),
            });
        }
        Ok(self
            .adapters
            .iter()
            .map(|a| h.weights.get(a).copied().unwrap_or(0.0))
            .collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `min_w ‖vec(candidate − base) − Σ w_i vec(ΔW_i)‖₂` jointly over
/// every targeted tensor.
pub fn infer_mix_weights(
    base: &TensorStore,
    adapters: &[LoraAdapter],
    candidate: &TensorStore,
) -> Result<AttributionReport> {
    Ok(DeltaBasis::build(base, adapters, candidate, DEFAULT_TARGET_SUFFIX)?.attribute())
}

/// Scores each hypothesis by the residual RMS of `candidate` against it and
/// picks the smallest. Ties go to the hypothesis with fewer nonzero
/// weights, then to the lexicographically smaller label.
pub fn classify_checkpoint(
    base: &TensorStore,
    adapters: &[LoraAdapter],
    candidate: &TensorStore,
    hypotheses: &[Hypothesis],
) -> Result<AttributionReport> {
    classify_with_suffix(base, adapters, candidate, hypotheses, DEFAULT_TARGET_SUFFIX)
}

pub fn classify_with_suffix(
    base: &TensorStore,
    adapters: &[LoraAdapter],
    candidate: &TensorStore,
    hypotheses: &[Hypothesis],
    target_suffix: &str,
) -> Result<AttributionReport> {
    if hypotheses.is_empty() {
        return Err(AuditError::NoHypotheses);
    }
    let mut labels = BTreeSet::new();
    for h in hypotheses {
        if !labels.insert(h.label.as_str()) {
            return Err(AuditError::DuplicateHypothesis(h.label.clone()));
        }
    }
    let basis = DeltaBasis::build(base, adapters, candidate, target_suffix)?;
    let mut report = basis.attribute();
    let mut scored = Vec::with_capacity(hypotheses.len());
    for h in hypotheses {
        let residual = basis.residual_rms(&basis.weights_for(h)?);
        report.hypothesis_residuals.insert(h.label.clone(), residual);
        scored.push((residual, h.nonzero(), h.label.as_str()));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(b.2)));
    report.best_hypothesis = Some(scored[0].2.to_string());
    Ok(report)
}
