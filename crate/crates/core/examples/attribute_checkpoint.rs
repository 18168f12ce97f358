//! Recovers the mixture weights hidden in a checkpoint and shows how a
//! "declared 0.3/0.7, actually SFT-only" export gets caught.

use std::collections::BTreeMap;

use mergecheck::audit::{classify_checkpoint, default_hypotheses, infer_mix_weights};
use mergecheck::lora::{apply_merge, LoraAdapter, LoraPair, Matrix, MergeEntry, MergeSpec};
use mergecheck::tensor_store::{Dtype, Tensor, TensorStore};

fn wave(n: usize, freq: f32) -> Vec<f32> {
    (0..n).map(|i| (i as f32 * freq).cos() * 0.2).collect()
}

fn adapter(name: &str, freq: f32) -> LoraAdapter {
    let a = Matrix::new(2, 6, wave(12, freq));
    let b = Matrix::new(6, 2, wave(12, freq * 1.7));
    let modules = BTreeMap::from([("mlp.up".to_string(), LoraPair { a, b })]);
    LoraAdapter::new(name, 2, 16.0, modules).unwrap()
}

fn spec(entries: &[(&LoraAdapter, f64)], label: &str) -> MergeSpec {
    let entries = entries
        .iter()
        .map(|(a, w)| MergeEntry {
            adapter: (*a).clone(),
            weight: *w,
        })
        .collect();
    MergeSpec::new(entries, Dtype::F32, label)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut base = TensorStore::new();
    base.insert("mlp.up.weight", Tensor::from_f32(vec![6, 6], &wave(36, 0.9)))?;
    let pt = adapter("pt", 0.31);
    let sft = adapter("sft", 0.77);
    let adapters = [pt.clone(), sft.clone()];

    let declared = spec(&[(&pt, 0.3), (&sft, 0.7)], "pt0.3-sft0.7");
    let honest = apply_merge(&base, &declared)?;
    let report = infer_mix_weights(&base, &adapters, &honest)?;
    println!("honest export: weights {:?}, residual {:.1e}", report.inferred_weights, report.residual_rms);

    // The pipeline bug: only the SFT adapter made it into the export.
    let sft_only = apply_merge(&base, &spec(&[(&sft, 1.0)], "oops"))?;
    let hyps = default_hypotheses(&adapters, Some(&declared));
    let report = classify_checkpoint(&base, &adapters, &sft_only, &hyps)?;
    println!("suspicious export:");
    for (label, res) in &report.hypothesis_residuals {
        println!("  {label:<14} residual {res:.2e}");
    }
    println!("  best match: {}", report.best_hypothesis.as_deref().unwrap_or("?"));
    Ok(())
}
