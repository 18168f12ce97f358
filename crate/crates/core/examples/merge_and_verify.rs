//! Builds a tiny base checkpoint and two adapters, merges them at
//! 0.3/0.7, writes everything to disk and verifies the export.
//!
//!     cargo run --example merge_and_verify -- /tmp/mergecheck-demo
//!
//! The output directory can then be fed to the CLI, e.g.
//! `mergecheck verify --base base.safetensors --spec spec.json --candidate merged.safetensors`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use mergecheck::audit::{verify_merge, Tolerances};
use mergecheck::lora::{apply_merge, load_merge_spec, read_provenance, LoraAdapter, LoraPair, Matrix};
use mergecheck::tensor_store::{read_store, write_store, Dtype, Tensor, TensorStore};

fn ramp(n: usize, scale: f32, phase: f32) -> Vec<f32> {
    (0..n).map(|i| ((i as f32 + phase) * 0.37).sin() * scale).collect()
}

fn adapter(name: &str, phase: f32) -> LoraAdapter {
    let mut modules = BTreeMap::new();
    for (module, rows, cols) in [("layers.0.q_proj", 8, 8), ("layers.0.v_proj", 8, 8)] {
        let a = Matrix::new(2, cols, ramp(2 * cols, 0.1, phase));
        let b = Matrix::new(rows, 2, ramp(rows * 2, 0.1, phase + 1.0));
        modules.insert(module.to_string(), LoraPair { a, b });
    }
    LoraAdapter::new(name, 2, 4.0, modules).expect("valid adapter")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("mergecheck-demo"));
    std::fs::create_dir_all(&dir)?;

    let mut base = TensorStore::new();
    base.insert("layers.0.q_proj.weight", Tensor::from_f32(vec![8, 8], &ramp(64, 1.0, 0.0)))?;
    base.insert("layers.0.v_proj.weight", Tensor::from_f32(vec![8, 8], &ramp(64, 1.0, 3.0)))?;
    base.insert("norm.weight", Tensor::from_f32(vec![8], &[1.0; 8]))?;
    write_store(&base, dir.join("base.safetensors"))?;

    adapter("pt", 0.5).save(dir.join("pt.safetensors"))?;
    adapter("sft", 2.0).save(dir.join("sft.safetensors"))?;
    std::fs::write(
        dir.join("spec.json"),
        r#"{
  "entries": [
    {"adapter": "pt.safetensors", "weight": 0.3},
    {"adapter": "sft.safetensors", "weight": 0.7}
  ],
  "output_dtype": "BF16",
  "label": "pt0.3-sft0.7"
}
"#,
    )?;

    let spec = load_merge_spec(dir.join("spec.json"))?;
    let merged = apply_merge(&base, &spec)?;
    write_store(&merged, dir.join("merged.safetensors"))?;

    let candidate = read_store(dir.join("merged.safetensors"))?;
    assert_eq!(candidate.get("layers.0.q_proj.weight").unwrap().dtype(), Dtype::BF16);
    let report = verify_merge(&base, &spec, &candidate, Tolerances::for_candidate(&candidate))?;
    println!("{}: {}", report.label, report.verdict);
    for (name, e) in &report.per_tensor {
        println!("  {name:<24} max_abs={:.2e} max_rel={:.2e}", e.max_abs_err, e.max_rel_err);
    }
    for p in read_provenance(&candidate).unwrap_or_default() {
        println!("  provenance: {} w={} {}", p.name, p.weight, &p.fingerprint[..16]);
    }
    println!("fixtures written to {}", dir.display());
    Ok(())
}
