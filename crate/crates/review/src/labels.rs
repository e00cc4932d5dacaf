//! Review labels, the append-only label log, consensus and aggregation.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use forge_core::evalharness::percent_1dp;
use forge_core::model::Format;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewLabel {
    Good,
    Wrong,
    Ambiguous,
    BadQuality,
}

impl ReviewLabel {
    pub const ALL: [ReviewLabel; 4] =
        [ReviewLabel::Good, ReviewLabel::Wrong, ReviewLabel::Ambiguous, ReviewLabel::BadQuality];

    pub fn as_str(self) -> &'static str {
        match self {
            ReviewLabel::Good => "good",
            ReviewLabel::Wrong => "wrong",
            ReviewLabel::Ambiguous => "ambiguous",
            ReviewLabel::BadQuality => "bad_quality",
        }
    }

    pub fn parse(s: &str) -> Option<ReviewLabel> {
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub sample_id: String,
    pub evaluator: String,
    pub label: ReviewLabel,
    pub noted_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: malformed label record: {source}")]
    Malformed { path: PathBuf, line: usize, source: serde_json::Error },
}

/// Latest record per (sample_id, evaluator).
pub type LabelTable = BTreeMap<(String, String), ReviewRecord>;

/// Append-only JSONL log of every submitted label.
#[derive(Debug)]
pub struct LabelLog {
    path: PathBuf,
    file: File,
}

impl LabelLog {
    /// Opens (creating if needed) and replays the log.
    ///
    /// A final line without a trailing newline is the remains of a write that
    /// never returned success, so it is dropped instead of rejected.
    pub fn open(path: &Path) -> Result<(LabelLog, LabelTable), LogError> {
        let io = |source| LogError::Io { path: path.to_path_buf(), source };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let mut table = LabelTable::new();
        let mut valid_len = 0u64;
        if path.exists() {
            let mut reader = BufReader::new(File::open(path).map_err(io)?);
            let mut line = String::new();
            let mut n = 0;
            loop {
                line.clear();
                let read = reader.read_line(&mut line).map_err(io)?;
                if read == 0 {
                    break;
                }
                n += 1;
                if !line.ends_with('\n') {
                    tracing::warn!(path = %path.display(), line = n, "dropping torn trailing label record");
                    break;
                }
                valid_len += read as u64;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: ReviewRecord = serde_json::from_str(&line).map_err(|source| LogError::Malformed {
                    path: path.to_path_buf(),
                    line: n,
                    source,
                })?;
                table.insert((rec.sample_id.clone(), rec.evaluator.clone()), rec);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        if file.metadata().map_err(io)?.len() != valid_len {
            file.set_len(valid_len).map_err(io)?;
        }
        Ok((LabelLog { path: path.to_path_buf(), file }, table))
    }

    /// Appends one record and syncs it to disk before returning.
    pub fn append(&mut self, rec: &ReviewRecord) -> Result<(), LogError> {
        let io = |source| LogError::Io { path: self.path.clone(), source };
        let mut line = serde_json::to_vec(rec).expect("records serialize");
        line.push(b'\n');
        self.file.write_all(&line).map_err(io)?;
        self.file.sync_data().map_err(io)
    }
}

/// Plurality label; a tie for the top count is ambiguous.
pub fn consensus(labels: &[ReviewLabel]) -> Option<ReviewLabel> {
    let mut counts: BTreeMap<ReviewLabel, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(*l).or_default() += 1;
    }
    let top = *counts.values().max()?;
    let leaders: Vec<ReviewLabel> = counts.iter().filter(|(_, c)| **c == top).map(|(l, _)| *l).collect();
    Some(if leaders.len() == 1 { leaders[0] } else { ReviewLabel::Ambiguous })
}

/// Consensus label of every sample that has at least one record.
pub fn consensus_by_sample(table: &LabelTable) -> BTreeMap<String, ReviewLabel> {
    let mut by_sample: BTreeMap<String, Vec<ReviewLabel>> = BTreeMap::new();
    for ((sample, _), rec) in table {
        by_sample.entry(sample.clone()).or_default().push(rec.label);
    }
    by_sample.into_iter().filter_map(|(s, ls)| consensus(&ls).map(|c| (s, c))).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub good: usize,
    pub wrong: usize,
    pub ambiguous: usize,
    pub bad_quality: usize,
}

impl LabelCounts {
    pub fn add(&mut self, l: ReviewLabel) {
        *self.slot(l) += 1;
    }

    fn slot(&mut self, l: ReviewLabel) -> &mut usize {
        match l {
            ReviewLabel::Good => &mut self.good,
            ReviewLabel::Wrong => &mut self.wrong,
            ReviewLabel::Ambiguous => &mut self.ambiguous,
            ReviewLabel::BadQuality => &mut self.bad_quality,
        }
    }

    pub fn total(&self) -> usize {
        self.good + self.wrong + self.ambiguous + self.bad_quality
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelPercents {
    pub good: f64,
    pub wrong: f64,
    pub ambiguous: f64,
    pub bad_quality: f64,
}

impl LabelPercents {
    /// Each label rounded independently to one decimal; rows need not sum to 100.
    pub fn from_counts(c: &LabelCounts) -> Option<Self> {
        let t = c.total();
        (t > 0).then(|| LabelPercents {
            good: percent_1dp(c.good, t),
            wrong: percent_1dp(c.wrong, t),
            ambiguous: percent_1dp(c.ambiguous, t),
            bad_quality: percent_1dp(c.bad_quality, t),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatStats {
    pub format: Format,
    /// Distinct labelled samples of this format.
    pub labeled: usize,
    /// Samples of this format in the served manifest.
    pub available: usize,
    pub counts: LabelCounts,
    pub percent: Option<LabelPercents>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewAggregate {
    pub formats: Vec<FormatStats>,
    pub labeled_samples: usize,
    pub records: usize,
    pub evaluators: Vec<String>,
    pub consensus: BTreeMap<String, ReviewLabel>,
}

/// Counts consensus labels per format. `format_of` maps sample ids to their
/// format; records for unknown samples are ignored.
pub fn aggregate(table: &LabelTable, format_of: &BTreeMap<String, Format>) -> ReviewAggregate {
    let consensus: BTreeMap<String, ReviewLabel> =
        consensus_by_sample(table).into_iter().filter(|(s, _)| format_of.contains_key(s)).collect();
    let formats = Format::ALL
        .iter()
        .map(|&f| {
            let mut counts = LabelCounts::default();
            for (s, l) in &consensus {
                if format_of[s] == f {
                    counts.add(*l);
                }
            }
            FormatStats {
                format: f,
                labeled: counts.total(),
                available: format_of.values().filter(|g| **g == f).count(),
                counts,
                percent: LabelPercents::from_counts(&counts),
            }
        })
        .collect();
    let mut evaluators: Vec<String> = table.keys().map(|(_, e)| e.clone()).collect();
    evaluators.sort();
    evaluators.dedup();
    ReviewAggregate {
        formats,
        labeled_samples: consensus.len(),
        records: table.keys().filter(|(s, _)| format_of.contains_key(s)).count(),
        evaluators,
        consensus,
    }
}
