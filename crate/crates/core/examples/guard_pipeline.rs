//! Shows the export-directory guard refusing to overwrite another run's
//! checkpoint, and the template lint catching think-block leakage.

use std::collections::BTreeMap;

use chrono::{TimeZone, Utc};
use mergecheck::guard::{check_export_dir, fingerprint, lint_templates, write_manifest, Decoding, RunManifest};
use mergecheck::tensor_store::{write_store, Tensor, TensorStore};

fn manifest(base: &TensorStore, weight: f64) -> RunManifest {
    let adapter_fp = fingerprint(base); // stand-in; any fingerprint works here
    RunManifest::new(
        fingerprint(base),
        BTreeMap::from([("sft".to_string(), (adapter_fp, weight))]),
        "qwen3_nothink",
        Decoding::default(),
        Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap(),
    )
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile_dir();
    let mut base = TensorStore::new();
    base.insert("w", Tensor::from_f32(vec![2], &[0.5, -0.5]))?;

    let first = manifest(&base, 0.7);
    println!("empty dir: {:?}", check_export_dir(&dir, &first)?);
    std::fs::create_dir_all(&dir)?;
    write_store(&base, dir.join("model.safetensors"))?;
    write_manifest(&dir, &first)?;
    println!("same run again: {:?}", check_export_dir(&dir, &first)?);
    println!("different run: {:?}", check_export_dir(&dir, &manifest(&base, 1.0))?);

    let gens = ["Rest and fluids.", "<think>maybe flu?</think>Rest.", "Take ibuprofen."];
    println!("lint: {:?}", lint_templates("qwen3", "qwen3_nothink", &gens));
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("mergecheck-guard-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}
