//! Checks an evaluation set for overlap with the training corpus.

use mergecheck::text_eval::leakage_audit;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let train = [
        "A cough lasting more than three weeks should be evaluated by a doctor, who may order a chest radiograph and sputum tests.",
        "For a mild cold, rest, drink fluids and use saline nasal spray.",
    ];
    let eval = [
        "My father says a cough lasting more than three weeks should be evaluated by a doctor who may order tests. Is that true?",
        "For a mild cold, rest, drink fluids and use saline nasal spray.",
        "How long does a sprained ankle take to heal?",
    ];
    for n in [8, 13] {
        let report = leakage_audit(&train, &eval, n)?;
        println!(
            "n={n}: {} of {} eval texts contaminated ({} exact duplicates)",
            report.contaminated_eval, report.n_eval, report.exact_dups
        );
        for ex in &report.examples {
            println!("  eval #{}: {:?}", ex.eval_id, ex.matched);
        }
    }
    Ok(())
}
