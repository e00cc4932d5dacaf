//! Line-delimited sample manifests with `split.json` / `stats.json` sidecars.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{Format, PreferenceKind, PreferenceSample, Task};

pub const SPLIT_FILE: &str = "split.json";
pub const STATS_FILE: &str = "stats.json";

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Parse { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{path}: invalid split file: {source}")]
    Split { path: PathBuf, source: serde_json::Error },
    #[error("duplicate sample_id {0}")]
    DuplicateId(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Holdout,
}

/// Samples in insertion order plus their split assignment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    samples: Vec<PreferenceSample>,
    ids: HashSet<String>,
    pub split: BTreeMap<String, Split>,
}

impl DatasetManifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, sample: PreferenceSample, split: Split) -> Result<(), ManifestError> {
        if !self.ids.insert(sample.sample_id.clone()) {
            return Err(ManifestError::DuplicateId(sample.sample_id));
        }
        self.split.insert(sample.sample_id.clone(), split);
        self.samples.push(sample);
        Ok(())
    }

    pub fn samples(&self) -> &[PreferenceSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn contains(&self, sample_id: &str) -> bool {
        self.ids.contains(sample_id)
    }

    pub fn split_of(&self, sample_id: &str) -> Option<Split> {
        self.split.get(sample_id).copied()
    }

    /// Ids of samples without a split entry.
    pub fn uncovered(&self) -> Vec<&str> {
        self.samples.iter().filter(|s| !self.split.contains_key(&s.sample_id)).map(|s| s.sample_id.as_str()).collect()
    }

    /// New manifest holding the samples accepted by `keep`, order preserved.
    pub fn filtered(&self, mut keep: impl FnMut(&PreferenceSample, Option<Split>) -> bool) -> Self {
        let mut out = DatasetManifest::new();
        for s in &self.samples {
            let split = self.split_of(&s.sample_id);
            if keep(s, split) {
                out.ids.insert(s.sample_id.clone());
                if let Some(sp) = split {
                    out.split.insert(s.sample_id.clone(), sp);
                }
                out.samples.push(s.clone());
            }
        }
        out
    }

    pub fn stats(&self) -> StatsTable {
        manifest_stats(&self.samples)
    }

    /// Writes `path` plus `split.json` and `stats.json` beside it.
    ///
    /// An existing `split.json` in the same directory is merged rather than
    /// replaced so a train and a holdout manifest can share one sidecar.
    pub fn write(&self, path: &Path) -> Result<(), ManifestError> {
        let mut writer = ManifestWriter::create(path)?;
        for s in &self.samples {
            writer.append(s)?;
        }
        writer.finish()?;

        let dir = sidecar_dir(path);
        let split_path = dir.join(SPLIT_FILE);
        let mut split = read_split(&split_path)?.unwrap_or_default();
        split.extend(self.split.iter().map(|(k, v)| (k.clone(), *v)));
        write_json_atomic(&split_path, &split)?;
        write_json_atomic(&dir.join(STATS_FILE), &self.stats())
    }

    /// Reads the JSONL file and, when present, the `split.json` beside it.
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let mut m = DatasetManifest::new();
        for sample in read_samples(path)? {
            if !m.ids.insert(sample.sample_id.clone()) {
                return Err(ManifestError::DuplicateId(sample.sample_id));
            }
            m.samples.push(sample);
        }
        if let Some(split) = read_split(&sidecar_dir(path).join(SPLIT_FILE))? {
            m.split = split.into_iter().filter(|(id, _)| m.ids.contains(id)).collect();
        }
        Ok(m)
    }
}

fn sidecar_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn read_split(path: &Path) -> Result<Option<BTreeMap<String, Split>>, ManifestError> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|source| ManifestError::Split { path: path.to_path_buf(), source }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(path)(e)),
    }
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), ManifestError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Streams a JSONL manifest, reporting the 1-based line of any bad record.
pub fn read_samples(path: &Path) -> Result<Vec<PreferenceSample>, ManifestError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = serde_json::from_str(&line).map_err(|source| ManifestError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(sample);
    }
    Ok(out)
}

/// Single-writer appender: one compact JSON object per line.
pub struct ManifestWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl ManifestWriter {
    pub fn create(path: &Path) -> Result<Self, ManifestError> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(ManifestWriter { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn append_to(path: &Path) -> Result<Self, ManifestError> {
        let file = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        Ok(ManifestWriter { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn append(&mut self, sample: &PreferenceSample) -> Result<(), ManifestError> {
        serde_json::to_writer(&mut self.out, sample).expect("serializable");
        self.out.write_all(b"\n").map_err(io_err(&self.path))
    }

    pub fn finish(mut self) -> Result<(), ManifestError> {
        self.out.flush().map_err(io_err(&self.path))?;
        self.out.get_ref().sync_all().map_err(io_err(&self.path))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellStats {
    pub task: Task,
    pub format: Format,
    pub t_pref: usize,
    pub v_pref: usize,
    pub total: usize,
}

/// Per-(task, format) counts with kind totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsTable {
    pub cells: Vec<CellStats>,
    pub task_totals: BTreeMap<Task, usize>,
    pub total: usize,
    pub t_pref: usize,
    pub v_pref: usize,
    pub v_pref_fraction: f64,
    pub t_pref_fraction: f64,
}

impl StatsTable {
    pub fn cell(&self, task: Task, format: Format) -> Option<&CellStats> {
        self.cells.iter().find(|c| c.task == task && c.format == format)
    }

    pub fn task_total(&self, task: Task) -> usize {
        self.task_totals.get(&task).copied().unwrap_or(0)
    }
}

pub fn manifest_stats(samples: &[PreferenceSample]) -> StatsTable {
    let mut cells: BTreeMap<(Task, Format), (usize, usize)> = BTreeMap::new();
    for task in Task::ALL {
        for &format in task.formats() {
            cells.insert((task, format), (0, 0));
        }
    }
    for s in samples {
        let e = cells.entry((s.task, s.format)).or_default();
        match s.kind {
            PreferenceKind::TPref => e.0 += 1,
            PreferenceKind::VPref => e.1 += 1,
        }
    }
    // Reporting order: task, then the task's own format order.
    let order = |t: Task, f: Format| {
        let pos = t.formats().iter().position(|&x| x == f).unwrap_or(usize::MAX);
        (t, pos, f)
    };
    let mut cells: Vec<CellStats> = cells
        .into_iter()
        .map(|((task, format), (t, v))| CellStats { task, format, t_pref: t, v_pref: v, total: t + v })
        .collect();
    cells.sort_by_key(|c| order(c.task, c.format));

    let mut task_totals = BTreeMap::new();
    for c in &cells {
        *task_totals.entry(c.task).or_insert(0) += c.total;
    }
    let t_pref: usize = cells.iter().map(|c| c.t_pref).sum();
    let v_pref: usize = cells.iter().map(|c| c.v_pref).sum();
    let total = t_pref + v_pref;
    let frac = |n: usize| if total == 0 { 0.0 } else { n as f64 / total as f64 };
    StatsTable {
        cells,
        task_totals,
        total,
        t_pref,
        v_pref,
        v_pref_fraction: frac(v_pref),
        t_pref_fraction: frac(t_pref),
    }
}

/// `12919` -> `12,919`.
pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl fmt::Display for StatsTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<20} {:<16} {:>9} {:>9} {:>9}", "task", "format", "t_pref", "v_pref", "total")?;
        for c in &self.cells {
            writeln!(
                f,
                "{:<20} {:<16} {:>9} {:>9} {:>9}",
                c.task.as_str(),
                c.format.as_str(),
                thousands(c.t_pref),
                thousands(c.v_pref),
                thousands(c.total)
            )?;
        }
        for (task, n) in &self.task_totals {
            writeln!(f, "{:<20} {:<16} {:>9} {:>9} {:>9}", task.as_str(), "(all)", "", "", thousands(*n))?;
        }
        writeln!(
            f,
            "{:<20} {:<16} {:>9} {:>9} {:>9}",
            "total",
            "",
            thousands(self.t_pref),
            thousands(self.v_pref),
            thousands(self.total)
        )?;
        write!(f, "kind ratio: v_pref {:.3} / t_pref {:.3}", self.v_pref_fraction, self.t_pref_fraction)
    }
}
