//! Surface metrics over generation/reference pairs.
//!
//! Tokenization for every metric: Unicode NFC, lowercase, split on
//! whitespace, then strip leading/trailing ASCII punctuation from each token
//! (tokens that become empty are dropped).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::chat_template::{strip_think, THINK_OPEN};
use crate::guard::Decoding;

pub const TOKENIZER_ID: &str = "nfc+lower+whitespace+strip-ascii-punct";
pub const DEFAULT_LEAK_WINDOW: usize = 13;
pub const DEFAULT_REFUSAL_MARKERS: [&str; 6] = [
    "i cannot",
    "i can't",
    "i won't",
    "unable to help",
    "cannot assist",
    "refuse",
];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("record {id:?} has no gold letter")]
    MissingGold { id: String },
    #[error("invalid record {id:?}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("n-gram window must be at least 1")]
    InvalidWindow,
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub fn tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().collect::<String>().to_lowercase();
    normalized
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// One evaluation row. `predict`/`label` are accepted as aliases for
/// `generation`/`reference`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub prompt: String,
    #[serde(alias = "predict")]
    pub generation: String,
    #[serde(default, alias = "label")]
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_letter: Option<String>,
}

impl EvalRecord {
    pub fn new(id: impl Into<String>, generation: impl Into<String>, reference: impl Into<String>) -> Self {
        EvalRecord {
            id: id.into(),
            prompt: String::new(),
            generation: generation.into(),
            reference: reference.into(),
            options: None,
            gold_letter: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| EvalError::InvalidRecord {
            id: self.id.clone(),
            reason,
        };
        if let Some(opts) = &self.options {
            if let Some(k) = opts.keys().find(|k| !is_option_letter(k)) {
                return Err(bad(format!("option key {k:?} is not a single letter A-E")));
            }
        }
        if let Some(gold) = &self.gold_letter {
            match &self.options {
                Some(opts) if opts.contains_key(gold) => {}
                Some(_) => return Err(bad(format!("gold letter {gold:?} is not among the options"))),
                None => return Err(bad("gold letter without options".into())),
            }
        }
        Ok(())
    }

    /// The text that gets scored.
    pub fn hypothesis(&self, on: ScoreOn) -> String {
        match on {
            ScoreOn::RawText => self.generation.clone(),
            ScoreOn::StrippedAnswer => strip_think(&self.generation).answer,
        }
    }
}

fn is_option_letter(k: &str) -> bool {
    matches!(k.as_bytes(), [b'A'..=b'E'])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScoreOn {
    RawText,
    #[default]
    StrippedAnswer,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Matches of `hyp` n-grams clipped by their count in `reference`.
fn clipped_overlap(hyp: &HashMap<&[String], usize>, reference: &HashMap<&[String], usize>) -> usize {
    hyp.iter()
        .map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0)))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// 0–100.
    pub score: f64,
    /// Pooled modified precision per order 1–4.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Corpus BLEU-4 over (hypothesis, reference) pairs.
///
/// Clipped n-gram matches and totals are pooled over the corpus before
/// taking precisions. Without smoothing, any zero precision gives 0. With
/// smoothing, orders 2–4 use `(matches + 1) / (total + 1)`.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(pairs: &[(H, R)], smoothing: bool) -> Result<BleuScore> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in pairs {
        let h = tokenize(h.as_ref());
        let r = tokenize(r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            matches[n - 1] += clipped_overlap(&hc, &rc);
            totals[n - 1] += hc.values().sum::<usize>();
        }
    }
    let mut precisions = [0.0; 4];
    for i in 0..4 {
        precisions[i] = if smoothing && i > 0 {
            (matches[i] + 1) as f64 / (totals[i] + 1) as f64
        } else if totals[i] == 0 {
            0.0
        } else {
            matches[i] as f64 / totals[i] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if hyp_len == 0 || precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Corpus BLEU-4 of the records, unsmoothed.
pub fn bleu4(records: &[EvalRecord], on: ScoreOn) -> Result<f64> {
    let pairs: Vec<(String, &str)> = records
        .iter()
        .map(|r| (r.hypothesis(on), r.reference.as_str()))
        .collect();
    Ok(corpus_bleu(&pairs, false)?.score)
}

/// Precision, recall and F1, each on a 0–100 scale.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(overlap: usize, hyp_total: usize, ref_total: usize) -> Self {
        let p = if hyp_total == 0 {
            0.0
        } else {
            overlap as f64 / hyp_total as f64
        };
        let r = if ref_total == 0 {
            0.0
        } else {
            overlap as f64 / ref_total as f64
        };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Prf {
            precision: 100.0 * p,
            recall: 100.0 * r,
            f1: 100.0 * f,
        }
    }
}

/// ROUGE-N with overlap clipped by the reference multiset.
pub fn rouge_n(hyp: &str, reference: &str, n: usize) -> Prf {
    let (h, r) = (tokenize(hyp), tokenize(reference));
    let hc = ngram_counts(&h, n);
    let rc = ngram_counts(&r, n);
    Prf::from_counts(
        clipped_overlap(&hc, &rc),
        hc.values().sum(),
        rc.values().sum(),
    )
}

/// ROUGE-L from the longest common token subsequence.
pub fn rouge_l(hyp: &str, reference: &str) -> Prf {
    let (h, r) = (tokenize(hyp), tokenize(reference));
    Prf::from_counts(lcs_len(&h, &r), h.len(), r.len())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Picks the answered option letter from a generation.
///
/// On the think-stripped answer: (1) the first option letter standing alone
/// as a word (so "Both A and B" gives A); otherwise (2) the option whose
/// full text appears case-insensitively, if exactly one does.
pub fn mc_extract(generation: &str, options: &BTreeMap<String, String>) -> Option<String> {
    let answer = strip_think(generation).answer;
    let chars: Vec<char> = answer.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_ascii_uppercase() || !options.contains_key(c.encode_utf8(&mut [0; 4]) as &str) {
            continue;
        }
        let before_ok = i == 0 || !chars[i - 1].is_alphanumeric();
        let after_ok = chars.get(i + 1).map_or(true, |n| !n.is_alphanumeric() && *n != '\'');
        if before_ok && after_ok {
            return Some(c.to_string());
        }
    }
    let lower = answer.to_lowercase();
    let mut hits = options
        .iter()
        .filter(|(_, text)| !text.trim().is_empty() && lower.contains(&text.to_lowercase()))
        .map(|(k, _)| k.clone());
    match (hits.next(), hits.next()) {
        (Some(k), None) => Some(k),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McScore {
    pub accuracy: f64,
    pub correct: usize,
    pub unanswered: usize,
    pub n: usize,
}

/// Fraction of records whose extracted letter equals the gold letter. A
/// failed extraction counts as wrong.
pub fn mc_accuracy(records: &[EvalRecord]) -> Result<McScore> {
    if records.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let (mut correct, mut unanswered) = (0, 0);
    for r in records {
        r.validate()?;
        let gold = r.gold_letter.as_ref().ok_or_else(|| EvalError::MissingGold { id: r.id.clone() })?;
        let options = r.options.as_ref().expect("validated");
        match mc_extract(&r.generation, options) {
            Some(letter) if &letter == gold => correct += 1,
            Some(_) => {}
            None => unanswered += 1,
        }
    }
    Ok(McScore {
        accuracy: correct as f64 / records.len() as f64,
        correct,
        unanswered,
        n: records.len(),
    })
}

fn normalize_for_markers(text: &str) -> String {
    text.to_lowercase().replace('\u{2019}', "'")
}

/// Fraction of think-stripped answers containing at least one marker
/// (case-insensitive substring).
pub fn refusal_rate<S: AsRef<str>>(records: &[EvalRecord], markers: &[S]) -> Result<f64> {
    if records.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let markers: Vec<String> = markers.iter().map(|m| normalize_for_markers(m.as_ref())).collect();
    let flagged = records
        .iter()
        .filter(|r| {
            let answer = normalize_for_markers(&strip_think(&r.generation).answer);
            markers.iter().any(|m| !m.is_empty() && answer.contains(m.as_str()))
        })
        .count();
    Ok(flagged as f64 / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakExample {
    pub eval_id: String,
    /// Normalized matching n-gram, or the whole normalized text for an
    /// exact duplicate shorter than the window.
    pub matched: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakReport {
    pub n: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub exact_dups: usize,
    pub contaminated_eval: usize,
    pub contamination_fraction: f64,
    pub examples: Vec<LeakExample>,
}

/// Train/eval overlap audit with eval ids taken from positions.
pub fn leakage_audit<T: AsRef<str>, E: AsRef<str>>(train: &[T], eval: &[E], n: usize) -> Result<LeakReport> {
    let labeled: Vec<(String, &str)> = eval
        .iter()
        .enumerate()
        .map(|(i, e)| (i.to_string(), e.as_ref()))
        .collect();
    leakage_audit_labeled(train, &labeled, n)
}

/// An eval text is an exact duplicate when its normalized token sequence
/// equals some train text's, and contaminated when it is an exact duplicate
/// or shares at least one normalized `n`-token window with any train text.
pub fn leakage_audit_labeled<T: AsRef<str>, I: AsRef<str>, E: AsRef<str>>(
    train: &[T],
    eval: &[(I, E)],
    n: usize,
) -> Result<LeakReport> {
    if n == 0 {
        return Err(EvalError::InvalidWindow);
    }
    if train.is_empty() || eval.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let train_tokens: Vec<Vec<String>> = train.iter().map(|t| tokenize(t.as_ref())).collect();
    let whole: HashSet<&[String]> = train_tokens
        .iter()
        .filter(|t| !t.is_empty())
        .map(Vec::as_slice)
        .collect();
    let windows: HashSet<&[String]> = train_tokens
        .iter()
        .filter(|t| t.len() >= n)
        .flat_map(|t| t.windows(n))
        .collect();

    let (mut exact_dups, mut contaminated) = (0, 0);
    let mut examples = Vec::new();
    for (id, text) in eval {
        let tokens = tokenize(text.as_ref());
        let is_dup = !tokens.is_empty() && whole.contains(tokens.as_slice());
        let hit = if tokens.len() >= n {
            tokens.windows(n).find(|w| windows.contains(w))
        } else {
            None
        };
        if is_dup {
            exact_dups += 1;
        }
        if is_dup || hit.is_some() {
            contaminated += 1;
            examples.push(LeakExample {
                eval_id: id.as_ref().to_string(),
                matched: hit.unwrap_or(tokens.as_slice()).join(" "),
            });
        }
    }
    Ok(LeakReport {
        n,
        n_train: train.len(),
        n_eval: eval.len(),
        exact_dups,
        contaminated_eval: contaminated,
        contamination_fraction: contaminated as f64 / eval.len() as f64,
        examples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub scored_on: ScoreOn,
    pub bleu_smoothing: bool,
    /// Score refusals with these markers when set.
    pub refusal_markers: Option<Vec<String>>,
    pub label: String,
    pub split: Option<String>,
    pub template: Option<String>,
    pub decoding: Option<Decoding>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            scored_on: ScoreOn::StrippedAnswer,
            bleu_smoothing: false,
            refusal_markers: None,
            label: "run".into(),
            split: None,
            template: None,
            decoding: None,
        }
    }
}

/// Corpus-level scores for one run. BLEU-4 is pooled over the corpus;
/// ROUGE values are means of per-record F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoding: Option<Decoding>,
    pub bleu4: f64,
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    #[serde(rename = "rougeL_f")]
    pub rouge_l_f: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_unanswered: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refusal_rate: Option<f64>,
    /// Generations containing a think-open marker.
    pub think_blocks: usize,
    pub n_records: usize,
    pub scored_on: ScoreOn,
    pub tokenizer: String,
    pub bleu_smoothing: bool,
}

/// Scores a corpus. Multiple-choice accuracy is reported only when every
/// record carries a gold letter.
pub fn evaluate(records: &[EvalRecord], opts: &EvalOptions) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    for r in records {
        r.validate()?;
    }
    let hyps: Vec<String> = records.iter().map(|r| r.hypothesis(opts.scored_on)).collect();
    let pairs: Vec<(&str, &str)> = hyps
        .iter()
        .zip(records)
        .map(|(h, r)| (h.as_str(), r.reference.as_str()))
        .collect();
    let bleu = corpus_bleu(&pairs, opts.bleu_smoothing)?;
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&str, &str) -> Prf| pairs.iter().map(|(h, r)| f(h, r).f1).sum::<f64>() / n;
    let mc = if records.iter().all(|r| r.gold_letter.is_some()) {
        Some(mc_accuracy(records)?)
    } else {
        None
    };
    let refusal = match &opts.refusal_markers {
        Some(markers) => Some(refusal_rate(records, markers)?),
        None => None,
    };
    Ok(MetricReport {
        label: opts.label.clone(),
        split: opts.split.clone(),
        template: opts.template.clone(),
        decoding: opts.decoding,
        bleu4: bleu.score,
        rouge1_f: mean(&|h, r| rouge_n(h, r, 1)),
        rouge2_f: mean(&|h, r| rouge_n(h, r, 2)),
        rouge_l_f: mean(&|h, r| rouge_l(h, r)),
        mc_accuracy: mc.map(|m| m.accuracy),
        mc_unanswered: mc.map(|m| m.unanswered),
        refusal_rate: refusal,
        think_blocks: records.iter().filter(|r| r.generation.contains(THINK_OPEN)).count(),
        n_records: records.len(),
        scored_on: opts.scored_on,
        tokenizer: TOKENIZER_ID.into(),
        bleu_smoothing: opts.bleu_smoothing,
    })
}

/// Aligned comparison table, one row per report, in the column order
/// Setting, Temp, Top-p, BLEU-4, R-1, R-2, R-L (plus MC-Acc and Refusal
/// when any report has them).
pub fn render_table(reports: &[MetricReport]) -> String {
    let with_mc = reports.iter().any(|r| r.mc_accuracy.is_some());
    let with_refusal = reports.iter().any(|r| r.refusal_rate.is_some());
    let mut header = vec!["Setting", "Temp", "Top-p", "BLEU-4", "R-1", "R-2", "R-L"];
    if with_mc {
        header.push("MC-Acc");
    }
    if with_refusal {
        header.push("Refusal");
    }
    let opt = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |v| format!("{v:.digits$}"));
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let setting = match (&r.template, &r.split) {
                (Some(t), Some(s)) => format!("{} [{t}, {s}]", r.label),
                (Some(t), None) => format!("{} [{t}]", r.label),
                (None, Some(s)) => format!("{} [{s}]", r.label),
                (None, None) => r.label.clone(),
            };
            let mut row = vec![
                setting,
                opt(r.decoding.map(|d| d.temperature), 1),
                opt(r.decoding.map(|d| d.top_p), 1),
                format!("{:.2}", r.bleu4),
                format!("{:.2}", r.rouge1_f),
                format!("{:.2}", r.rouge2_f),
                format!("{:.2}", r.rouge_l_f),
            ];
            if with_mc {
                row.push(opt(r.mc_accuracy, 3));
            }
            if with_refusal {
                row.push(opt(r.refusal_rate, 3));
            }
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|row| row[c].chars().count())
                .chain(std::iter::once(header[c].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let mut s = String::new();
        for (c, cell) in cells.iter().enumerate() {
            if c == 0 {
                let _ = write!(s, "{:<w$}", cell, w = widths[0]);
            } else {
                let _ = write!(s, "  {:>w$}", cell, w = widths[c]);
            }
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(header.clone(), &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(rule.iter().map(String::as_str).collect(), &mut out);
    for row in &rows {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}
