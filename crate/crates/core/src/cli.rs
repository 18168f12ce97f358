//! Command-line front end. The binary only parses arguments and calls
//! [`run`]; everything else lives here so it can be driven from tests.
//!
//! Exit codes: 0 success / Clean / Pass, 2 Fail or any finding, 3
//! structural and I/O errors.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::audit::{self, default_hypotheses, AuditError, AttributionReport, Tolerances, Verdict, VerifyReport};
use crate::chat_template::{render, Message, TemplateError, TemplateId, UnknownTemplate};
use crate::guard::{
    self, all_clean, check_export_dir, fingerprint, lint_templates, Decoding, Finding, GuardError, RunManifest,
    EXPORT_FILE,
};
use crate::lora::{apply_merge, load_merge_spec, LoraAdapter, MergeError};
use crate::tensor_store::{read_store, write_store, StoreError};
use crate::text_eval::{
    evaluate, leakage_audit_labeled, render_table, EvalError, EvalOptions, EvalRecord, MetricReport, ScoreOn,
    DEFAULT_LEAK_WINDOW, DEFAULT_REFUSAL_MARKERS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FINDING: i32 = 2;
pub const EXIT_STRUCTURAL: i32 = 3;

/// Environment variable naming the default tolerance profile.
pub const TOLERANCE_ENV: &str = "MERGECHECK_TOLERANCE";

#[derive(Debug, Parser)]
#[command(name = "mergecheck", version, about = "Merge, verify and audit LoRA adapter exports")]
pub struct RunConfig {
    /// Emit machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,

    /// JSON file with default option values; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge adapters into a base checkpoint and export it with a manifest.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        /// Export directory.
        #[arg(long)]
        out: PathBuf,
        /// Chat template the export is meant to be evaluated with.
        #[arg(long)]
        template: Option<String>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_p: Option<f64>,
        /// Manifest timestamp (RFC 3339). Defaults to SOURCE_DATE_EPOCH, then now.
        #[arg(long)]
        created_at: Option<String>,
        /// Write even if the export directory belongs to another run.
        #[arg(long)]
        force: bool,
    },
    /// Check an exported checkpoint against base + Σ wᵢ·ΔWᵢ.
    Verify {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        #[command(flatten)]
        tol: ToleranceArgs,
    },
    /// Infer the mixture weights present in a checkpoint and name the closest hypothesis.
    Attribute {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        /// Candidate adapter (repeatable). Defaults to the spec's adapters.
        #[arg(long = "adapter")]
        adapters: Vec<PathBuf>,
        /// Declared merge spec, added as a hypothesis.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Print the content fingerprint of a tensor file.
    Fingerprint { file: PathBuf },
    /// Check train/eval template ids and sampled generations for think leakage.
    Lint {
        #[arg(long)]
        train_template: String,
        #[arg(long)]
        eval_template: String,
        #[arg(long)]
        generations: Option<PathBuf>,
    },
    /// Score a JSONL file of evaluation records.
    Eval {
        #[arg(long)]
        records: PathBuf,
        /// Score raw generations instead of think-stripped answers.
        #[arg(long)]
        raw: bool,
        /// Add-one smoothing for BLEU orders 2–4.
        #[arg(long)]
        smooth: bool,
        /// Also compute the refusal rate.
        #[arg(long)]
        refusal: bool,
        /// Refusal marker (repeatable); replaces the default list.
        #[arg(long = "marker")]
        markers: Vec<String>,
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        template: Option<String>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_p: Option<f64>,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect train/eval overlap by exact match and shared n-grams.
    LeakAudit {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Join metric reports into one comparison table.
    Report {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Parse a trainer JSONL log into loss points.
    IngestLog {
        #[arg(long, value_enum)]
        stage: Stage,
        file: PathBuf,
    },
    /// Render conversations with a chat template to JSONL prompts.
    Render {
        #[arg(long)]
        messages: PathBuf,
        #[arg(long)]
        template: Option<String>,
        #[arg(long)]
        no_generation_prompt: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct ToleranceArgs {
    #[arg(long)]
    pub tol_abs: Option<f64>,
    #[arg(long)]
    pub tol_rel: Option<f64>,
    /// Tolerance profile: f32, bf16 or f16. Defaults to the candidate's dtype.
    #[arg(long, env = TOLERANCE_ENV)]
    pub profile: Option<String>,
}

/// Defaults read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDefaults {
    pub tol_abs: Option<f64>,
    pub tol_rel: Option<f64>,
    pub tolerance_profile: Option<String>,
    pub template: Option<String>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub leak_window: Option<usize>,
    pub refusal_markers: Option<Vec<String>>,
    pub split: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
pub enum Stage {
    #[value(name = "PT", alias = "pt")]
    PT,
    #[value(name = "SFT", alias = "sft")]
    SFT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogSplit {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogPoint {
    pub stage: Stage,
    pub epoch: f64,
    pub split: LogSplit,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub points: Vec<TrainLogPoint>,
    /// Non-blank lines that carried no usable loss.
    pub skipped: usize,
}

impl TrainingLog {
    pub fn last(&self, split: LogSplit) -> Option<&TrainLogPoint> {
        self.points.iter().rev().find(|p| p.split == split)
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Guard(#[from] GuardError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    UnknownTemplate(#[from] UnknownTemplate),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: no valid lines ({skipped} skipped)")]
    NoValidLines { path: String, skipped: usize },
    #[error("{path}:{line}: {reason}")]
    BadInput { path: String, line: usize, reason: String },
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::IoFailure {
        path: path.display().to_string(),
        source,
    }
}

/// Reads trainer JSONL records: `{"epoch", "loss"}` gives a train point,
/// `{"epoch", "eval_loss"}` an eval point. Lines without a usable loss are
/// counted in [`TrainingLog::skipped`].
pub fn parse_training_log(path: impl AsRef<Path>, stage: Stage) -> Result<TrainingLog, CliError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut points = Vec::new();
    let mut skipped = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parsed = serde_json::from_str::<Value>(line).ok();
        let obj = parsed.as_ref().and_then(Value::as_object);
        let epoch = obj
            .and_then(|o| o.get("epoch"))
            .and_then(Value::as_f64)
            .filter(|e| e.is_finite() && *e >= 0.0);
        let mut found = false;
        if let (Some(obj), Some(epoch)) = (obj, epoch) {
            for (key, split) in [("loss", LogSplit::Train), ("eval_loss", LogSplit::Eval)] {
                if let Some(loss) = obj.get(key).and_then(Value::as_f64).filter(|l| l.is_finite()) {
                    points.push(TrainLogPoint {
                        stage,
                        epoch,
                        split,
                        loss,
                    });
                    found = true;
                }
            }
        }
        if !found {
            skipped += 1;
        }
    }
    if points.is_empty() {
        return Err(CliError::NoValidLines {
            path: path.display().to_string(),
            skipped,
        });
    }
    Ok(TrainingLog { points, skipped })
}

/// Runs a command against the process's stdout/stderr.
pub fn run(config: RunConfig) -> i32 {
    let stdout = io::stdout();
    let stderr = io::stderr();
    run_with_output(config, &mut stdout.lock(), &mut stderr.lock())
}

/// Runs a command, writing machine output to `out` and diagnostics to `err`.
pub fn run_with_output(config: RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match execute(&config) {
        Ok(outcome) => {
            if let Some(msg) = &outcome.diagnostic {
                let _ = writeln!(err, "{msg}");
            }
            if out.write_all(outcome.stdout.as_bytes()).is_err() {
                return EXIT_STRUCTURAL;
            }
            outcome.code
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_STRUCTURAL
        }
    }
}

struct Outcome {
    code: i32,
    stdout: String,
    diagnostic: Option<String>,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Outcome {
            code: EXIT_OK,
            stdout,
            diagnostic: None,
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn load_defaults(path: Option<&Path>) -> Result<ConfigDefaults, CliError> {
    let Some(path) = path else {
        return Ok(ConfigDefaults::default());
    };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::BadInput {
        path: path.display().to_string(),
        line: e.line(),
        reason: e.to_string(),
    })
}

fn execute(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let defaults = load_defaults(cfg.config.as_deref())?;
    let json = cfg.json;
    match &cfg.command {
        Command::Merge {
            base,
            spec,
            out,
            template,
            temperature,
            top_p,
            created_at,
            force,
        } => {
            let template = template
                .clone()
                .or(defaults.template.clone())
                .unwrap_or_else(|| TemplateId::NoThink.to_string());
            let decoding = decoding_from(*temperature, *top_p, &defaults);
            let created_at = resolve_created_at(created_at.as_deref())?;
            cmd_merge(base, spec, out, template, decoding, created_at, *force, json)
        }
        Command::Verify {
            base,
            spec,
            candidate,
            tol,
        } => cmd_verify(base, spec, candidate, tol, &defaults, json),
        Command::Attribute {
            base,
            candidate,
            adapters,
            spec,
        } => cmd_attribute(base, candidate, adapters, spec.as_deref(), json),
        Command::Fingerprint { file } => {
            let fp = guard::fingerprint_file(file)?;
            Ok(Outcome::ok(if json {
                to_json(&fp)
            } else {
                format!(
                    "{}  {}\ntensors: {}\ndata bytes: {}\n",
                    fp.digest,
                    file.display(),
                    fp.name_count,
                    fp.total_bytes
                )
            }))
        }
        Command::Lint {
            train_template,
            eval_template,
            generations,
        } => {
            let gens = match generations {
                Some(p) => read_generations(p)?,
                None => Vec::new(),
            };
            let findings = lint_templates(train_template, eval_template, &gens);
            Ok(findings_outcome(&findings, json))
        }
        Command::Eval {
            records,
            raw,
            smooth,
            refusal,
            markers,
            label,
            split,
            template,
            temperature,
            top_p,
            out,
        } => {
            let recs = read_records(records)?;
            let markers = if !markers.is_empty() {
                Some(markers.clone())
            } else if *refusal {
                Some(
                    defaults
                        .refusal_markers
                        .clone()
                        .unwrap_or_else(|| DEFAULT_REFUSAL_MARKERS.iter().map(|s| s.to_string()).collect()),
                )
            } else {
                None
            };
            let decoding = (temperature.is_some() || top_p.is_some() || defaults.temperature.is_some())
                .then(|| decoding_from(*temperature, *top_p, &defaults));
            let opts = EvalOptions {
                scored_on: if *raw {
                    ScoreOn::RawText
                } else {
                    ScoreOn::StrippedAnswer
                },
                bleu_smoothing: *smooth,
                refusal_markers: markers,
                label: label.clone().unwrap_or_else(|| file_label(records)),
                split: split.clone().or(defaults.split.clone()),
                template: template.clone().or(defaults.template.clone()),
                decoding,
            };
            let report = evaluate(&recs, &opts)?;
            if let Some(path) = out {
                fs::write(path, to_json(&report)).map_err(io_err(path))?;
            }
            Ok(Outcome::ok(if json {
                to_json(&report)
            } else {
                render_table(std::slice::from_ref(&report))
            }))
        }
        Command::LeakAudit { train, eval, n } => {
            let n = n.or(defaults.leak_window).unwrap_or(DEFAULT_LEAK_WINDOW);
            let train_texts: Vec<String> = read_texts(train)?.into_iter().map(|(_, t)| t).collect();
            let eval_texts = read_texts(eval)?;
            let report = leakage_audit_labeled(&train_texts, &eval_texts, n)?;
            let code = if report.contaminated_eval == 0 {
                EXIT_OK
            } else {
                EXIT_FINDING
            };
            let stdout = if json {
                to_json(&report)
            } else {
                let mut s = format!(
                    "window: {} tokens\ntrain texts: {}\neval texts: {}\nexact duplicates: {}\ncontaminated: {} ({:.2}%)\n",
                    report.n,
                    report.n_train,
                    report.n_eval,
                    report.exact_dups,
                    report.contaminated_eval,
                    100.0 * report.contamination_fraction
                );
                for ex in &report.examples {
                    s.push_str(&format!("  {}: {}\n", ex.eval_id, ex.matched));
                }
                s
            };
            Ok(Outcome {
                code,
                stdout,
                diagnostic: None,
            })
        }
        Command::Report { inputs } => {
            let reports = inputs
                .iter()
                .map(|p| {
                    let text = fs::read_to_string(p).map_err(io_err(p))?;
                    serde_json::from_str::<MetricReport>(&text).map_err(|e| CliError::BadInput {
                        path: p.display().to_string(),
                        line: e.line(),
                        reason: e.to_string(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Outcome::ok(if json {
                to_json(&reports)
            } else {
                render_table(&reports)
            }))
        }
        Command::IngestLog { stage, file } => {
            let log = parse_training_log(file, *stage)?;
            Ok(Outcome::ok(if json {
                to_json(&log)
            } else {
                let fmt = |p: Option<&TrainLogPoint>| {
                    p.map_or("-".to_string(), |p| format!("{:.4} (epoch {:.1})", p.loss, p.epoch))
                };
                format!(
                    "stage: {:?}\npoints: {}\nskipped lines: {}\nfinal train loss: {}\nfinal eval loss: {}\n",
                    stage,
                    log.points.len(),
                    log.skipped,
                    fmt(log.last(LogSplit::Train)),
                    fmt(log.last(LogSplit::Eval))
                )
            }))
        }
        Command::Render {
            messages,
            template,
            no_generation_prompt,
            out,
        } => {
            let template: TemplateId = template
                .clone()
                .or(defaults.template.clone())
                .unwrap_or_else(|| TemplateId::NoThink.to_string())
                .parse()?;
            let convs = read_conversations(messages)?;
            let mut lines = String::new();
            for conv in &convs {
                let prompt = render(conv, template, !no_generation_prompt)?;
                lines.push_str(&serde_json::json!({ "prompt": prompt }).to_string());
                lines.push('\n');
            }
            match out {
                Some(path) => {
                    fs::write(path, &lines).map_err(io_err(path))?;
                    Ok(Outcome::ok(format!("wrote {} prompts to {}\n", convs.len(), path.display())))
                }
                None => Ok(Outcome::ok(lines)),
            }
        }
    }
}

fn decoding_from(temperature: Option<f64>, top_p: Option<f64>, defaults: &ConfigDefaults) -> Decoding {
    let d = Decoding::default();
    Decoding {
        temperature: temperature.or(defaults.temperature).unwrap_or(d.temperature),
        top_p: top_p.or(defaults.top_p).unwrap_or(d.top_p),
    }
}

fn resolve_created_at(flag: Option<&str>) -> Result<DateTime<Utc>, CliError> {
    if let Some(s) = flag {
        return DateTime::parse_from_rfc3339(s)
            .map(|d| d.with_timezone(&Utc))
            .map_err(|e| CliError::Usage(format!("bad --created-at {s:?}: {e}")));
    }
    if let Ok(epoch) = std::env::var("SOURCE_DATE_EPOCH") {
        let secs: i64 = epoch
            .trim()
            .parse()
            .map_err(|e| CliError::Usage(format!("bad SOURCE_DATE_EPOCH {epoch:?}: {e}")))?;
        return Utc
            .timestamp_opt(secs, 0)
            .single()
            .ok_or_else(|| CliError::Usage(format!("SOURCE_DATE_EPOCH {secs} out of range")));
    }
    Ok(Utc::now())
}

fn file_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

#[allow(clippy::too_many_arguments)]
fn cmd_merge(
    base_path: &Path,
    spec_path: &Path,
    out: &Path,
    template: String,
    decoding: Decoding,
    created_at: DateTime<Utc>,
    force: bool,
    json: bool,
) -> Result<Outcome, CliError> {
    let base = read_store(base_path)?;
    let spec = load_merge_spec(spec_path)?;
    let adapters: BTreeMap<String, (guard::Fingerprint, f64)> = spec
        .entries
        .iter()
        .map(|e| (e.adapter.name.clone(), (e.adapter.fingerprint(), e.weight)))
        .collect();
    let mut manifest = RunManifest::new(fingerprint(&base), adapters, template, decoding, created_at);

    let findings = check_export_dir(out, &manifest)?;
    if !all_clean(&findings) && !force {
        let mut outcome = findings_outcome(&findings, json);
        outcome.diagnostic = Some(format!(
            "refusing to write into {}: it holds another run's export (use --force to overwrite)",
            out.display()
        ));
        return Ok(outcome);
    }

    let merged = apply_merge(&base, &spec)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let export = out.join(EXPORT_FILE);
    write_store(&merged, &export)?;
    manifest.export_fp = Some(fingerprint(&merged));
    let manifest_path = guard::write_manifest(out, &manifest)?;

    Ok(Outcome::ok(if json {
        to_json(&manifest)
    } else {
        let fp = manifest.export_fp.as_ref().expect("set above");
        let weights: Vec<String> = manifest
            .merge_weights
            .iter()
            .map(|(k, w)| format!("{k}={w}"))
            .collect();
        format!(
            "merged {} ({}) into {}\nexport: {}\nmanifest: {}\nrun digest: {}\n",
            spec.label,
            weights.join(", "),
            export.display(),
            fp.digest,
            manifest_path.display(),
            manifest.digest()
        )
    }))
}

fn resolve_tolerances(
    args: &ToleranceArgs,
    defaults: &ConfigDefaults,
    candidate: &crate::tensor_store::TensorStore,
) -> Result<Tolerances, CliError> {
    let profile = args.profile.clone().or(defaults.tolerance_profile.clone());
    let base = match profile {
        Some(p) => p.parse::<Tolerances>().map_err(CliError::Usage)?,
        None => Tolerances::for_candidate(candidate),
    };
    Ok(Tolerances {
        abs: args.tol_abs.or(defaults.tol_abs).unwrap_or(base.abs),
        rel: args.tol_rel.or(defaults.tol_rel).unwrap_or(base.rel),
    })
}

fn cmd_verify(
    base_path: &Path,
    spec_path: &Path,
    candidate_path: &Path,
    tol: &ToleranceArgs,
    defaults: &ConfigDefaults,
    json: bool,
) -> Result<Outcome, CliError> {
    let base = read_store(base_path)?;
    let spec = load_merge_spec(spec_path)?;
    let candidate = read_store(candidate_path)?;
    let tolerances = resolve_tolerances(tol, defaults, &candidate)?;
    let report = audit::verify_merge(&base, &spec, &candidate, tolerances)?;
    let code = match report.verdict {
        Verdict::Pass => EXIT_OK,
        Verdict::Fail => EXIT_FINDING,
    };
    Ok(Outcome {
        code,
        stdout: if json { to_json(&report) } else { verify_text(&report) },
        diagnostic: None,
    })
}

fn verify_text(r: &VerifyReport) -> String {
    let width = r.per_tensor.keys().map(|k| k.len()).max().unwrap_or(6).max(6);
    let mut s = format!(
        "{}: {} (tol_abs={:e}, tol_rel={:e})\n{:<width$}  {:>12}  {:>12}  {:>12}\n",
        r.label, r.verdict, r.tolerance_abs, r.tolerance_rel, "tensor", "max_abs", "max_rel", "mean_abs"
    );
    for (name, e) in &r.per_tensor {
        let mark = if r.failing_tensors.contains(name) { "  FAIL" } else { "" };
        s.push_str(&format!(
            "{:<width$}  {:>12.3e}  {:>12.3e}  {:>12.3e}{mark}\n",
            name, e.max_abs_err, e.max_rel_err, e.mean_abs_err
        ));
    }
    s
}

fn cmd_attribute(
    base_path: &Path,
    candidate_path: &Path,
    adapter_paths: &[PathBuf],
    spec_path: Option<&Path>,
    json: bool,
) -> Result<Outcome, CliError> {
    let base = read_store(base_path)?;
    let candidate = read_store(candidate_path)?;
    let spec = spec_path.map(load_merge_spec).transpose()?;
    let adapters: Vec<LoraAdapter> = if adapter_paths.is_empty() {
        match &spec {
            Some(s) => s.entries.iter().map(|e| e.adapter.clone()).collect(),
            None => return Err(CliError::Usage("attribute needs --adapter or --spec".into())),
        }
    } else {
        adapter_paths.iter().map(LoraAdapter::load).collect::<Result<_, _>>()?
    };
    let suffix = spec
        .as_ref()
        .map(|s| s.target_suffix.clone())
        .unwrap_or_else(|| crate::lora::DEFAULT_TARGET_SUFFIX.to_string());
    let hypotheses = default_hypotheses(&adapters, spec.as_ref());
    let report = audit::classify_with_suffix(&base, &adapters, &candidate, &hypotheses, &suffix)?;
    let mismatch = spec
        .as_ref()
        .is_some_and(|s| report.best_hypothesis.as_deref() != Some(s.label.as_str()));
    Ok(Outcome {
        code: if mismatch { EXIT_FINDING } else { EXIT_OK },
        stdout: if json { to_json(&report) } else { attribution_text(&report) },
        diagnostic: mismatch.then(|| {
            format!(
                "checkpoint looks like {:?}, not the declared spec",
                report.best_hypothesis.as_deref().unwrap_or("?")
            )
        }),
    })
}

fn attribution_text(r: &AttributionReport) -> String {
    let mut s = String::from("inferred weights:\n");
    for name in &r.adapters {
        s.push_str(&format!("  {name}: {:.6}\n", r.inferred_weights[name]));
    }
    s.push_str(&format!(
        "residual rms: {:.3e} over {} elements\n",
        r.residual_rms, r.n_elements
    ));
    if r.degenerate {
        s.push_str("warning: adapter deltas are nearly linearly dependent; weights are a minimum-norm solution\n");
    }
    if !r.hypothesis_residuals.is_empty() {
        s.push_str("hypotheses (residual rms):\n");
        for (label, res) in &r.hypothesis_residuals {
            let mark = if r.best_hypothesis.as_deref() == Some(label) { "  <- best" } else { "" };
            s.push_str(&format!("  {label}: {res:.3e}{mark}\n"));
        }
    }
    s
}

fn findings_outcome(findings: &[Finding], json: bool) -> Outcome {
    let code = if all_clean(findings) {
        EXIT_OK
    } else {
        EXIT_FINDING
    };
    let stdout = if json {
        to_json(&findings)
    } else {
        findings.iter().map(describe_finding).collect::<Vec<_>>().join("\n") + "\n"
    };
    Outcome {
        code,
        stdout,
        diagnostic: None,
    }
}

fn describe_finding(f: &Finding) -> String {
    match f {
        Finding::Clean => "Clean".into(),
        Finding::OverwriteRisk {
            existing_digest,
            current_digest,
        } => format!("OverwriteRisk: directory holds run {existing_digest}, current run is {current_digest}"),
        Finding::StaleManifest { checkpoints, reason } => {
            format!("StaleManifest: {} ({reason})", checkpoints.join(", "))
        }
        Finding::ExportModified {
            file,
            recorded_digest,
            actual_digest,
        } => format!("ExportModified: {file} is {actual_digest}, manifest recorded {recorded_digest}"),
        Finding::TemplateMismatch { train, eval } => {
            format!("TemplateMismatch: trained with {train}, evaluating with {eval}")
        }
        Finding::ThinkLeakage { count, sampled } => {
            format!("ThinkLeakage: {count} of {sampled} generations contain a think block")
        }
    }
}

fn nonblank_lines(path: &Path) -> Result<Vec<(usize, String)>, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn bad_line(path: &Path, line: usize, reason: impl Into<String>) -> CliError {
    CliError::BadInput {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

/// JSONL evaluation records; a missing id becomes the line number.
pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>, CliError> {
    nonblank_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            let mut r: EvalRecord = serde_json::from_str(&line).map_err(|e| bad_line(path, n, e.to_string()))?;
            if r.id.is_empty() {
                r.id = n.to_string();
            }
            Ok(r)
        })
        .collect()
}

/// Generations from JSONL objects (`generation` or `predict`), JSON
/// strings, or plain text lines.
fn read_generations(path: &Path) -> Result<Vec<String>, CliError> {
    Ok(nonblank_lines(path)?
        .into_iter()
        .map(|(_, line)| match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(o)) => o
                .get("generation")
                .or_else(|| o.get("predict"))
                .and_then(Value::as_str)
                .map(str::to_string)
                .unwrap_or(line),
            Ok(Value::String(s)) => s,
            _ => line,
        })
        .collect())
}

/// Texts for the leakage audit. A JSON object contributes all its string
/// fields (sorted by key, newline-joined) and its `id` if present; a JSON
/// string or plain line is used as is. Ids default to line numbers.
fn read_texts(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    Ok(nonblank_lines(path)?
        .into_iter()
        .map(|(n, line)| match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(o)) => {
                let id = o.get("id").and_then(Value::as_str).map(str::to_string);
                let mut fields: Vec<(&String, &str)> = o
                    .iter()
                    .filter(|(k, _)| k.as_str() != "id")
                    .filter_map(|(k, v)| v.as_str().map(|s| (k, s)))
                    .collect();
                fields.sort();
                let text = fields.iter().map(|(_, s)| *s).collect::<Vec<_>>().join("\n");
                (id.unwrap_or_else(|| n.to_string()), text)
            }
            Ok(Value::String(s)) => (n.to_string(), s),
            _ => (n.to_string(), line),
        })
        .collect())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ConversationLine {
    Wrapped { messages: Vec<Message> },
    Bare(Vec<Message>),
}

fn read_conversations(path: &Path) -> Result<Vec<Vec<Message>>, CliError> {
    nonblank_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            match serde_json::from_str::<ConversationLine>(&line).map_err(|e| bad_line(path, n, e.to_string()))? {
                ConversationLine::Wrapped { messages } | ConversationLine::Bare(messages) => Ok(messages),
            }
        })
        .collect()
}
