//! Answer parsing, per-sample scoring and per-cell accuracy tables.

use std::collections::{BTreeMap, HashMap};
use std::sync::LazyLock;

use async_trait::async_trait;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::{Format, PreferenceSample, Task};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("free-form scoring needs an answer judge; none configured")]
    JudgeRequired,
    #[error("answer judge failed: {0}")]
    Judge(String),
    #[error("prediction for {prediction} scored against sample {sample}")]
    Mismatch { sample: String, prediction: String },
}

/// Normalized answer for one format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsedAnswer {
    /// 0-based option index.
    Choice(usize),
    YesNo(bool),
    Sequence(Vec<u64>),
    Text(String),
}

/// Raw prediction line as read from a predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPrediction {
    pub sample_id: String,
    pub raw_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub raw_text: String,
    pub parsed: Option<ParsedAnswer>,
}

impl Prediction {
    pub fn parse(raw: &RawPrediction, format: Format) -> Self {
        Prediction {
            sample_id: raw.sample_id.clone(),
            raw_text: raw.raw_text.clone(),
            parsed: parse_answer(&raw.raw_text, format),
        }
    }
}

static MC_PATTERNS: LazyLock<Vec<Regex>> = LazyLock::new(|| {
    [
        r"\(([A-Z])\)",
        r"(?i:answer|option)(?:\s+is)?\s*[:\-]?\s*\(?([A-Z])\b",
        r"^\s*([A-Z])\s*(?:[).:]|$)",
        r"\b([A-Z])\b",
    ]
    .iter()
    .map(|p| Regex::new(p).expect("valid pattern"))
    .collect()
});
static STANDALONE_NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(\d+)\b").unwrap());
static INTEGER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").unwrap());
static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[A-Za-z]+").unwrap());

/// Format-specific normalization; `None` when nothing usable is found.
///
/// Multiple choice accepts a letter (`A` is option 0) or a 1-based number.
pub fn parse_answer(raw: &str, format: Format) -> Option<ParsedAnswer> {
    match format {
        Format::MultipleChoice => {
            for re in MC_PATTERNS.iter() {
                if let Some(c) = re.captures(raw) {
                    let letter = c[1].as_bytes()[0];
                    return Some(ParsedAnswer::Choice((letter - b'A') as usize));
                }
            }
            let n: usize = STANDALONE_NUMBER.captures(raw)?[1].parse().ok()?;
            n.checked_sub(1).map(ParsedAnswer::Choice)
        }
        Format::BinaryChoice => WORD.find_iter(raw).find_map(|w| match w.as_str().to_ascii_lowercase().as_str() {
            "yes" | "true" => Some(ParsedAnswer::YesNo(true)),
            "no" | "false" => Some(ParsedAnswer::YesNo(false)),
            _ => None,
        }),
        Format::OrderList => {
            let seq: Vec<u64> = INTEGER.find_iter(raw).filter_map(|m| m.as_str().parse().ok()).collect();
            (!seq.is_empty()).then_some(ParsedAnswer::Sequence(seq))
        }
        Format::FreeForm => {
            let t = raw.trim();
            (!t.is_empty()).then(|| ParsedAnswer::Text(t.to_string()))
        }
    }
}

/// Decides whether a free-form prediction matches the gold caption.
#[async_trait]
pub trait AnswerJudge: Send + Sync {
    async fn matches(&self, question: &str, gold: &str, predicted: &str) -> Result<bool, EvalError>;
}

/// 1 when the prediction is correct for the sample's chosen context, else 0.
pub async fn score(
    sample: &PreferenceSample,
    prediction: &Prediction,
    judge: Option<&dyn AnswerJudge>,
) -> Result<u8, EvalError> {
    if prediction.sample_id != sample.sample_id {
        return Err(EvalError::Mismatch { sample: sample.sample_id.clone(), prediction: prediction.sample_id.clone() });
    }
    if sample.format == Format::FreeForm && judge.is_none() {
        return Err(EvalError::JudgeRequired);
    }
    let Some(parsed) = &prediction.parsed else { return Ok(0) };
    let correct = match (sample.format, parsed) {
        (Format::FreeForm, ParsedAnswer::Text(t)) => {
            judge.expect("checked above").matches(&sample.question, &sample.chosen_answer, t).await?
        }
        (format, p) => parse_answer(&sample.chosen_answer, format).as_ref() == Some(p),
    };
    Ok(u8::from(correct))
}

/// `100 * count / total` rounded half-up to one decimal, computed on integers.
pub fn percent_1dp(count: usize, total: usize) -> f64 {
    assert!(total > 0, "percentage of an empty total");
    let tenths = (count as u128 * 2000 + total as u128) / (2 * total as u128);
    tenths as f64 / 10.0
}

/// Rounds half away from zero to one decimal.
pub fn round_1dp(x: f64) -> f64 {
    // The nudge keeps values like 36.85 stored as 36.8499.. on the upper side.
    let scaled = x * 10.0;
    (scaled + scaled.signum() * 1e-9).round() / 10.0
}

/// Table column order: temporal FF, OL, BC then action FF, MC, BC.
pub const REPORT_CELLS: [(Task, Format); 6] = [
    (Task::TemporalOrdering, Format::FreeForm),
    (Task::TemporalOrdering, Format::OrderList),
    (Task::TemporalOrdering, Format::BinaryChoice),
    (Task::ActionRecognition, Format::FreeForm),
    (Task::ActionRecognition, Format::MultipleChoice),
    (Task::ActionRecognition, Format::BinaryChoice),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAccuracy {
    pub task: Task,
    pub format: Format,
    pub correct: usize,
    pub total: usize,
    /// Percent with one decimal; absent for an empty cell.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<CellAccuracy>,
    /// Unweighted mean over populated cells, one decimal.
    pub avg: Option<f64>,
    #[serde(default)]
    pub unparseable: usize,
    #[serde(default)]
    pub missing_predictions: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn cell(&self, task: Task, format: Format) -> Option<&CellAccuracy> {
        self.cells.iter().find(|c| c.task == task && c.format == format)
    }
}

/// Unweighted mean of the populated cells, rounded to one decimal.
pub fn average_of_cells(cells: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = cells.iter().flatten().copied().collect();
    if present.is_empty() {
        return None;
    }
    Some(round_1dp(present.iter().sum::<f64>() / present.len() as f64))
}

/// Per-cell accuracy over `(task, format, score)` triples.
///
/// The average uses unrounded cell accuracies; empty cells are reported as
/// absent and left out of the average with a warning.
pub fn aggregate(scores: &[(Task, Format, u8)]) -> EvalReport {
    let mut counts: BTreeMap<(Task, Format), (usize, usize)> = BTreeMap::new();
    for &(t, f, s) in scores {
        let e = counts.entry((t, f)).or_default();
        e.0 += usize::from(s > 0);
        e.1 += 1;
    }
    let mut warnings = Vec::new();
    let mut cells = Vec::new();
    let mut exact = Vec::new();
    for (task, format) in REPORT_CELLS {
        let (correct, total) = counts.get(&(task, format)).copied().unwrap_or((0, 0));
        let accuracy = (total > 0).then(|| percent_1dp(correct, total));
        if total == 0 {
            warnings.push(format!("no samples for {}/{}; excluded from average", task.as_str(), format.as_str()));
        } else {
            exact.push(Some(100.0 * correct as f64 / total as f64));
        }
        cells.push(CellAccuracy { task, format, correct, total, accuracy });
    }
    for w in &warnings {
        tracing::warn!("{w}");
    }
    EvalReport { cells, avg: average_of_cells(&exact), unparseable: 0, missing_predictions: 0, warnings }
}

/// Scores every manifest sample. Samples without a prediction count as wrong.
pub async fn evaluate(
    samples: &[PreferenceSample],
    predictions: &[RawPrediction],
    judge: Option<&dyn AnswerJudge>,
) -> Result<EvalReport, EvalError> {
    let by_id: HashMap<&str, &RawPrediction> = predictions.iter().map(|p| (p.sample_id.as_str(), p)).collect();
    let known: std::collections::HashSet<&str> = samples.iter().map(|s| s.sample_id.as_str()).collect();
    let unknown = predictions.iter().filter(|p| !known.contains(p.sample_id.as_str())).count();
    let mut scores = Vec::with_capacity(samples.len());
    let (mut missing, mut unparseable) = (0, 0);
    for s in samples {
        let score_value = match by_id.get(s.sample_id.as_str()) {
            None => {
                missing += 1;
                if s.format == Format::FreeForm && judge.is_none() {
                    return Err(EvalError::JudgeRequired);
                }
                0
            }
            Some(raw) => {
                let p = Prediction::parse(raw, s.format);
                if p.parsed.is_none() {
                    unparseable += 1;
                }
                score(s, &p, judge).await?
            }
        };
        scores.push((s.task, s.format, score_value));
    }
    let mut report = aggregate(&scores);
    report.missing_predictions = missing;
    report.unparseable = unparseable;
    if missing > 0 {
        let w = format!("{missing} samples had no prediction and were scored as wrong");
        tracing::warn!("{w}");
        report.warnings.push(w);
    }
    if unknown > 0 {
        let w = format!("{unknown} predictions reference unknown sample ids and were ignored");
        tracing::warn!("{w}");
        report.warnings.push(w);
    }
    Ok(report)
}
