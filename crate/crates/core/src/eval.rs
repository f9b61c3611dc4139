//! Evaluation: teacher-forced greedy decoding, task metrics, normalized
//! improvement, and best-teacher deviations.
//!
//! The prompt is the rendered example up to and including `=`; the model
//! decodes greedily until EOS or 128 new tokens. Categorical tasks score
//! accuracy, numeric tasks mean absolute error. An output that fails to
//! parse counts as incorrect (categorical) or is assigned the error a
//! median-of-the-set predictor would make on that row (numeric); either way
//! it is tallied in `parse_failures`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Condition;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tasks::{parse_example, Answer, ParsedExample, TaskKind};
use crate::tokenizer::{Tokenizer, BOS, EOS, PAD};

pub const MAX_NEW_TOKENS: usize = 128;

/// Numeric error floor before logs in the normalized-improvement formula.
pub const ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    AbsError,
}

impl MetricKind {
    pub fn for_task(task: TaskKind) -> Self {
        if task.is_categorical() {
            MetricKind::Accuracy
        } else {
            MetricKind::AbsError
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub condition: Condition,
    pub n: u64,
    pub metric: MetricKind,
    pub value: f64,
    pub parse_failures: u64,
}

fn answer_value(a: &Answer) -> Option<f64> {
    match a {
        Answer::Num(v) => Some(*v as f64),
        _ => None,
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Scores pre-computed completions against parsed eval rows. `outputs[i]` is
/// the raw decoded text the model produced after the prompt of row `i`.
pub fn evaluate_rows(
    rows: &[ParsedExample],
    outputs: &[String],
    condition: Condition,
) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    assert_eq!(rows.len(), outputs.len());
    let task = rows[0].kind;
    let metric = MetricKind::for_task(task);

    let mut failures = 0u64;
    let value = match metric {
        MetricKind::Accuracy => {
            let mut correct = 0u64;
            for (row, out) in rows.iter().zip(outputs) {
                let truth = row.answer.as_ref().expect("eval rows carry answers");
                match parse_completion(task, &row.ids, out) {
                    Some(got) if got == *truth => correct += 1,
                    Some(_) => {}
                    None => failures += 1,
                }
            }
            correct as f64 / rows.len() as f64
        }
        MetricKind::AbsError => {
            let mut truths: Vec<f64> = rows
                .iter()
                .map(|r| answer_value(r.answer.as_ref().unwrap()).expect("numeric task"))
                .collect();
            let mut sorted = truths.clone();
            sorted.sort_by(f64::total_cmp);
            let med = median(&sorted);
            let mut total = 0.0;
            for (i, (row, out)) in rows.iter().zip(outputs).enumerate() {
                match parse_completion(task, &row.ids, out).and_then(|a| answer_value(&a)) {
                    Some(pred) => total += (pred - truths[i]).abs(),
                    None => {
                        failures += 1;
                        total += (truths[i] - med).abs();
                    }
                }
            }
            truths.clear();
            total / rows.len() as f64
        }
    };

    Ok(EvalReport {
        task,
        condition,
        n: rows.len() as u64,
        metric,
        value,
        parse_failures: failures,
    })
}

/// Re-parses prompt + completion through the strict grammar; any deviation is
/// a parse failure (None).
fn parse_completion(task: TaskKind, ids: &[u16], completion: &str) -> Option<Answer> {
    let prompt = crate::tasks::render_example(task, ids, dummy_answer(task)).ok()?;
    let eq = prompt.find('=')?;
    let full = format!("{}{}", &prompt[..=eq], completion);
    match parse_example(&full) {
        Ok(ParsedExample { answer: Some(a), kind, ids: parsed_ids }) => {
            if kind == task && parsed_ids == ids {
                Some(a)
            } else {
                None
            }
        }
        _ => None,
    }
}

fn dummy_answer(task: TaskKind) -> Answer {
    match task {
        TaskKind::Compass => Answer::Dir(crate::tasks::CompassDir::N),
        TaskKind::Inside | TaskKind::Crossing => Answer::Flag(true),
        _ => Answer::Num(0),
    }
}

/// Decodes generated token ids into text; BOS/PAD or unknown ids in the
/// content make the row unusable (None), which callers count as a failure.
fn decode_generated(tok: &Tokenizer, ids: &[u32]) -> Option<String> {
    let mut content = Vec::new();
    for &id in ids {
        if id == EOS {
            break;
        }
        if id == BOS || id == PAD {
            return None;
        }
        content.push(id);
    }
    let mut with_eos = content;
    with_eos.push(EOS);
    tok.decode(&with_eos).ok()
}

/// Full evaluation of one model on one eval file.
pub fn evaluate(
    model: &Model<f32>,
    tok: &Tokenizer,
    lines: &[String],
    condition: Condition,
) -> Result<EvalReport> {
    if lines.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let mut rows = Vec::with_capacity(lines.len());
    let mut prompts = Vec::with_capacity(lines.len());
    for line in lines {
        let parsed = parse_example(line).map_err(Error::Parse)?;
        if parsed.answer.is_none() {
            return Err(Error::EmptyEvalSet);
        }
        let eq = line.find('=').expect("parsed examples contain '='");
        prompts.push(tok.encode_prefix(&line[..=eq])?);
        rows.push(parsed);
    }
    let generated = model.generate_batch(&prompts, MAX_NEW_TOKENS)?;
    let outputs: Vec<String> = generated
        .iter()
        .map(|ids| decode_generated(tok, ids).unwrap_or_else(|| "\u{0}".to_string()))
        .collect();
    evaluate_rows(&rows, &outputs, condition)
}

/// Normalized improvement.
///
/// Error-based (lower is better):
/// `NI = log(baseline_atlantis / error) / log(baseline_atlantis / baseline_standard)`
///
/// Accuracy-based (higher is better):
/// `NI = (accuracy - baseline_atlantis) / (baseline_standard - baseline_atlantis)`
///
/// 0 means no improvement over the pre-fine-tune atlantis baseline, 1 means
/// matching standard-city performance; values can slightly exceed 1.
pub fn normalized_improvement(
    value: f64,
    baseline_atlantis: f64,
    baseline_standard: f64,
    kind: MetricKind,
) -> Result<f64> {
    let degenerate = |task: &str| Error::DegenerateBaselines {
        task: task.into(),
        atlantis: baseline_atlantis,
        standard: baseline_standard,
    };
    match kind {
        MetricKind::AbsError => {
            if !(baseline_atlantis > baseline_standard) {
                return Err(degenerate("error-based"));
            }
            if baseline_standard <= 0.0 || baseline_atlantis <= 0.0 {
                return Err(degenerate("error-based"));
            }
            let err = value.max(ERROR_FLOOR);
            Ok((baseline_atlantis / err).ln() / (baseline_atlantis / baseline_standard).ln())
        }
        MetricKind::Accuracy => {
            if !(baseline_standard > baseline_atlantis) {
                return Err(degenerate("accuracy-based"));
            }
            Ok((value - baseline_atlantis) / (baseline_standard - baseline_atlantis))
        }
    }
}

/// Deviation from the best-teacher expectation:
/// `NI(Dj u Dk) - max(NI(Dj), NI(Dk))`. Negative values flag combinations
/// that perform worse than their best single-task component.
pub fn best_teacher_deviation(ni_pair: f64, ni_j: f64, ni_k: f64) -> f64 {
    ni_pair - ni_j.max(ni_k)
}

/// Per-lineage baselines: the pretrained model evaluated on standard and
/// atlantis eval sets, keyed `task/condition`. These two numbers anchor every
/// NI computed for that lineage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub values: BTreeMap<String, f64>,
}

impl Baselines {
    pub fn key(task: TaskKind, condition: Condition) -> String {
        format!("{}/{}", task.name(), condition.name())
    }

    pub fn insert(&mut self, report: &EvalReport) {
        self.values
            .insert(Self::key(report.task, report.condition), report.value);
    }

    pub fn get(&self, task: TaskKind, condition: Condition) -> Option<f64> {
        self.values.get(&Self::key(task, condition)).copied()
    }

    pub fn ni_for(&self, task: TaskKind, value: f64) -> Result<f64> {
        let ba = self
            .get(task, Condition::Atlantis)
            .ok_or_else(|| Error::MissingArtifact(format!("baseline {}/atlantis", task.name()).into()))?;
        let bs = self
            .get(task, Condition::Standard)
            .ok_or_else(|| Error::MissingArtifact(format!("baseline {}/standard", task.name()).into()))?;
        normalized_improvement(value, ba, bs, MetricKind::for_task(task))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("baselines: {e}")))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("baselines: {e}")))
    }
}

/// Evaluates the pretrained checkpoint on every provided eval set, producing
/// the baselines reused by all downstream NI computations. Idempotent: same
/// model and sets give byte-identical output.
pub fn baseline_pass(
    model: &Model<f32>,
    tok: &Tokenizer,
    eval_sets: &[(TaskKind, Condition, Vec<String>)],
) -> Result<(Baselines, Vec<EvalReport>)> {
    let mut baselines = Baselines::default();
    let mut reports = Vec::new();
    for (task, condition, lines) in eval_sets {
        let report = evaluate(model, tok, lines, *condition)?;
        debug_assert_eq!(report.task, *task);
        baselines.insert(&report);
        reports.push(report);
    }
    Ok((baselines, reports))
}

/// Normalized-improvement table: one row per fine-tune recipe, one column per
/// evaluated task.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct NITable {
    pub rows: Vec<NIRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NIRow {
    pub recipe: String,
    pub ni: BTreeMap<String, f64>,
}

impl NITable {
    pub fn to_csv(&self) -> String {
        let mut tasks: Vec<&str> = TaskKind::ALL.iter().map(|t| t.name()).collect();
        tasks.retain(|t| self.rows.iter().any(|r| r.ni.contains_key(*t)));
        let mut out = String::from("recipe");
        for t in &tasks {
            out.push(',');
            out.push_str(t);
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.recipe);
            for t in &tasks {
                out.push(',');
                if let Some(v) = row.ni.get(*t) {
                    out.push_str(&format!("{v:.6}"));
                }
            }
            out.push('\n');
        }
        out
    }
}
