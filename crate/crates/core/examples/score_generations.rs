//! Scores a handful of generations both on raw text and on the
//! think-stripped answer, and prints the comparison table.

use std::collections::BTreeMap;

use mergecheck::text_eval::{evaluate, render_table, EvalOptions, EvalRecord, ScoreOn};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let records = vec![
        EvalRecord::new(
            "1",
            "<think>common advice</think> Rest and drink plenty of fluids.",
            "Rest and drink plenty of fluids.",
        ),
        EvalRecord::new(
            "2",
            "Yes, ibuprofen can reduce a fever in most adults.",
            "Ibuprofen can lower a fever in most adults.",
        ),
        EvalRecord::new("3", "I can't help with that request.", "I cannot prescribe medication."),
    ];
    let mut mcq = EvalRecord::new("4", "The answer is B", "");
    mcq.options = Some(BTreeMap::from([
        ("A".to_string(), "Heart".to_string()),
        ("B".to_string(), "Kidney".to_string()),
    ]));
    mcq.gold_letter = Some("B".into());

    let mut reports = Vec::new();
    for (label, on) in [("raw text", ScoreOn::RawText), ("stripped answer", ScoreOn::StrippedAnswer)] {
        let opts = EvalOptions {
            scored_on: on,
            label: label.into(),
            refusal_markers: Some(vec!["can't help".into(), "cannot prescribe".into()]),
            ..EvalOptions::default()
        };
        reports.push(evaluate(&records, &opts)?);
    }
    // Multiple-choice accuracy is only reported for sets where every
    // record has a gold letter, so score the MCQ set on its own.
    let opts = EvalOptions {
        label: "mcq".into(),
        ..EvalOptions::default()
    };
    reports.push(evaluate(&[mcq], &opts)?);
    print!("{}", render_table(&reports));
    Ok(())
}
