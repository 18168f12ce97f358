//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use mergecheck::lora::{LoraAdapter, LoraPair, Matrix, MergeEntry, MergeSpec};
use mergecheck::tensor_store::{Dtype, Tensor, TensorStore};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Targeted modules of the synthetic base: (module, rows, cols).
pub fn random_layout(rng: &mut ChaCha8Rng, n_targets: usize) -> Vec<(String, usize, usize)> {
    (0..n_targets)
        .map(|i| {
            (
                format!("layers.{i}.proj"),
                rng.gen_range(2..=16),
                rng.gen_range(2..=16),
            )
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Base with a `.weight` tensor per targeted module plus two untargeted
/// tensors (a norm vector and an embedding-like matrix).
pub fn random_base(rng: &mut ChaCha8Rng, layout: &[(String, usize, usize)]) -> TensorStore {
    let mut store = TensorStore::new();
    for (module, rows, cols) in layout {
        let t = Tensor::from_f32(vec![*rows, *cols], &uniform(rng, rows * cols, -1.0, 1.0));
        store.insert(format!("{module}.weight"), t).unwrap();
    }
    let n = rng.gen_range(2..=16);
    store
        .insert("norm.weight", Tensor::from_f32(vec![n], &uniform(rng, n, 0.5, 1.5)))
        .unwrap();
    let (r, c) = (rng.gen_range(2..=16), rng.gen_range(2..=16));
    store
        .insert("embed.tokens", Tensor::from_f32(vec![r, c], &uniform(rng, r * c, -1.0, 1.0)))
        .unwrap();
    store
}

pub fn random_adapter(
    rng: &mut ChaCha8Rng,
    name: &str,
    layout: &[(String, usize, usize)],
    rank: usize,
) -> LoraAdapter {
    let modules: BTreeMap<String, LoraPair> = layout
        .iter()
        .map(|(module, rows, cols)| {
            let a = Matrix::new(rank, *cols, uniform(rng, rank * cols, -0.5, 0.5));
            let b = Matrix::new(*rows, rank, uniform(rng, rows * rank, -0.5, 0.5));
            (module.clone(), LoraPair { a, b })
        })
        .collect();
    LoraAdapter::new(name, rank, 2.0 * rank as f64, modules).unwrap()
}

pub fn spec(entries: &[(&LoraAdapter, f64)], label: &str) -> MergeSpec {
    MergeSpec::new(
        entries
            .iter()
            .map(|(a, w)| MergeEntry {
                adapter: (*a).clone(),
                weight: *w,
            })
            .collect(),
        Dtype::F32,
        label,
    )
}

/// Scalar-loop reference: `W[i][j] + Σ_a w_a · (α_a / r_a) · Σ_k B[i][k] A[k][j]`
/// evaluated in f64 straight from the factor matrices.
pub fn oracle_merge(base: &TensorStore, entries: &[(&LoraAdapter, f64)]) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for (name, t) in base.iter() {
        let mut vals: Vec<f64> = t.to_f32_vec().iter().map(|&v| v as f64).collect();
        if let Some(module) = name.strip_suffix(".weight") {
            for (adapter, w) in entries {
                let Some(pair) = adapter.modules.get(module) else { continue };
                let cols = t.shape()[1];
                let scale = adapter.alpha / adapter.rank as f64;
                for i in 0..t.shape()[0] {
                    for j in 0..cols {
                        let mut acc = 0.0f64;
                        for k in 0..adapter.rank {
                            acc += pair.b.data[i * adapter.rank + k] as f64 * pair.a.data[k * cols + j] as f64;
                        }
                        vals[i * cols + j] += w * scale * acc;
                    }
                }
            }
        }
        out.insert(name.to_string(), vals);
    }
    out
}

/// Store whose targeted tensors are `base + Σ w ΔW` from the oracle, in F32.
pub fn oracle_store(base: &TensorStore, entries: &[(&LoraAdapter, f64)]) -> TensorStore {
    let mut store = TensorStore::new();
    for (name, vals) in oracle_merge(base, entries) {
        let shape = base.get(&name).unwrap().shape().to_vec();
        let f: Vec<f32> = vals.iter().map(|&v| v as f32).collect();
        store.insert(name, Tensor::from_f32(shape, &f)).unwrap();
    }
    store
}

pub fn max_abs_diff(store: &TensorStore, oracle: &BTreeMap<String, Vec<f64>>) -> f64 {
    let mut worst = 0.0f64;
    for (name, expected) in oracle {
        let got = store.get(name).expect("tensor present").to_f32_vec();
        for (g, e) in got.iter().zip(expected) {
            worst = worst.max((*g as f64 - e).abs());
        }
    }
    worst
}

/// Random store with mixed dtypes, shapes and metadata.
pub fn random_store(rng: &mut ChaCha8Rng) -> TensorStore {
    let mut store = TensorStore::new();
    let n = rng.gen_range(0..6);
    for i in 0..n {
        let dtype = [Dtype::F32, Dtype::F16, Dtype::BF16][rng.gen_range(0..3)];
        let rank = rng.gen_range(0..3);
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(0..5)).collect();
        let numel: usize = shape.iter().product();
        let data: Vec<u8> = (0..numel * dtype.size()).map(|_| rng.gen()).collect();
        let name = format!("t{}.{}", rng.gen_range(0..1000), i);
        store.insert(name, Tensor::new(dtype, shape, data).unwrap()).unwrap();
    }
    if rng.gen_bool(0.5) {
        store
            .metadata_mut()
            .insert("format".into(), format!("pt-{}", rng.gen_range(0..100)));
    }
    store
}

/// Writes a two-adapter CLI fixture (base, pt/sft adapters, spec) into `dir`.
pub fn write_cli_fixture(dir: &Path, seed: u64, weights: (f64, f64), label: &str) {
    let mut r = rng(seed);
    let layout = random_layout(&mut r, 4);
    let base = random_base(&mut r, &layout);
    let pt = random_adapter(&mut r, "pt", &layout, 2);
    let sft = random_adapter(&mut r, "sft", &layout, 2);
    mergecheck::tensor_store::write_store(&base, dir.join("base.safetensors")).unwrap();
    pt.save(dir.join("pt.safetensors")).unwrap();
    sft.save(dir.join("sft.safetensors")).unwrap();
    write_spec(dir, "spec.json", weights, label);
}

pub fn write_spec(dir: &Path, file: &str, (w_pt, w_sft): (f64, f64), label: &str) {
    let doc = serde_json::json!({
        "entries": [
            {"adapter": "pt.safetensors", "weight": w_pt},
            {"adapter": "sft.safetensors", "weight": w_sft}
        ],
        "output_dtype": "F32",
        "label": label
    });
    std::fs::write(dir.join(file), serde_json::to_string_pretty(&doc).unwrap()).unwrap();
}
pub mod oracle;
