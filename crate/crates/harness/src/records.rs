//! Run-record CSV files: one row per training episode, streamed to disk.
//!
//! The column set is fixed by [`COLUMNS`]; its version lives in a JSON sidecar
//! (`<file>.meta.json`) so the header stays the first line of the CSV.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::HarnessError;

pub const SCHEMA: &str = "startsel.run-record";
pub const SCHEMA_VERSION: u32 = 1;

pub const COLUMNS: [&str; 14] = [
    "env_id",
    "strategy",
    "seed",
    "env_step",
    "episode",
    "eval_mean_reward",
    "eval_std_reward",
    "episodes_in_eval",
    "selection_branch",
    "selection_overhead_ms",
    "episode_return",
    "noise_kind",
    "noise_level",
    "wall_ms",
];

/// Columns that hold wall-clock measurements.
pub const TIMING_COLUMNS: [&str; 2] = ["selection_overhead_ms", "wall_ms"];

/// Reals are written with 17 significant digits so they parse back exactly.
pub fn fmt_real(v: f64) -> String {
    if v.is_finite() {
        let s = format!("{v:.16e}");
        // keep plain zero readable
        if v == 0.0 && v.is_sign_positive() {
            "0".to_string()
        } else {
            s
        }
    } else if v.is_nan() {
        "NaN".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

fn parse_real(s: &str, col: &str) -> Result<f64, HarnessError> {
    s.parse::<f64>()
        .map_err(|_| HarnessError::Records(format!("column {col}: `{s}` is not a number")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub env_id: String,
    pub strategy: String,
    pub seed: u64,
    pub env_step: u64,
    pub episode: u64,
    pub eval_mean_reward: Option<f64>,
    pub eval_std_reward: Option<f64>,
    pub episodes_in_eval: Option<u64>,
    pub selection_branch: String,
    pub selection_overhead_ms: f64,
    pub episode_return: f64,
    pub noise_kind: String,
    pub noise_level: f64,
    pub wall_ms: f64,
}

impl RunRow {
    pub fn to_record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(fmt_real).unwrap_or_default();
        vec![
            self.env_id.clone(),
            self.strategy.clone(),
            self.seed.to_string(),
            self.env_step.to_string(),
            self.episode.to_string(),
            opt(self.eval_mean_reward),
            opt(self.eval_std_reward),
            self.episodes_in_eval.map(|v| v.to_string()).unwrap_or_default(),
            self.selection_branch.clone(),
            fmt_real(self.selection_overhead_ms),
            fmt_real(self.episode_return),
            self.noise_kind.clone(),
            fmt_real(self.noise_level),
            fmt_real(self.wall_ms),
        ]
    }

    pub fn from_record(rec: &csv::StringRecord) -> Result<Self, HarnessError> {
        if rec.len() != COLUMNS.len() {
            return Err(HarnessError::Records(format!(
                "row has {} fields, expected {}",
                rec.len(),
                COLUMNS.len()
            )));
        }
        let int = |i: usize| {
            rec[i]
                .parse::<u64>()
                .map_err(|_| HarnessError::Records(format!("column {}: `{}` is not an integer", COLUMNS[i], &rec[i])))
        };
        let real = |i: usize| parse_real(&rec[i], COLUMNS[i]);
        let opt_real = |i: usize| if rec[i].is_empty() { Ok(None) } else { real(i).map(Some) };
        Ok(Self {
            env_id: rec[0].to_string(),
            strategy: rec[1].to_string(),
            seed: int(2)?,
            env_step: int(3)?,
            episode: int(4)?,
            eval_mean_reward: opt_real(5)?,
            eval_std_reward: opt_real(6)?,
            episodes_in_eval: if rec[7].is_empty() { None } else { Some(int(7)?) },
            selection_branch: rec[8].to_string(),
            selection_overhead_ms: real(9)?,
            episode_return: real(10)?,
            noise_kind: rec[11].to_string(),
            noise_level: real(12)?,
            wall_ms: real(13)?,
        })
    }

    /// Record with the wall-clock columns blanked, for reproducibility checks.
    pub fn without_timing(&self) -> Vec<String> {
        let mut r = self.to_record();
        for col in TIMING_COLUMNS {
            let i = COLUMNS.iter().position(|c| *c == col).expect("timing column");
            r[i].clear();
        }
        r
    }
}

#[derive(Debug, Serialize)]
struct Meta<'a, C: Serialize> {
    schema: &'static str,
    version: u32,
    columns: &'a [&'a str],
    config: &'a C,
}

pub fn meta_path(csv: &Path) -> PathBuf {
    let mut name = csv.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    csv.with_file_name(name)
}

/// Streams rows to a CSV file, flushing after each row.
pub struct RecordWriter {
    inner: csv::Writer<File>,
    path: PathBuf,
}

impl RecordWriter {
    /// Create `path` (and its sidecar describing `config`) and write the header.
    pub fn create<C: Serialize>(path: &Path, config: &C) -> Result<Self, HarnessError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let meta = Meta {
            schema: SCHEMA,
            version: SCHEMA_VERSION,
            columns: &COLUMNS,
            config,
        };
        fs::write(meta_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
        let mut inner = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)?;
        inner.write_record(COLUMNS)?;
        inner.flush()?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, row: &RunRow) -> Result<(), HarnessError> {
        self.inner.write_record(row.to_record())?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_records(path: &Path) -> Result<Vec<RunRow>, HarnessError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader.headers()?.clone();
    if header.iter().ne(COLUMNS.iter().copied()) {
        return Err(HarnessError::Records(format!(
            "{}: header does not match the run-record columns",
            path.display()
        )));
    }
    reader
        .records()
        .map(|r| RunRow::from_record(&r?))
        .collect()
}

/// Concatenate run files into `out`, ordered by (strategy, seed) and then by
/// file order within a run.
pub fn merge_records(inputs: &[PathBuf], out: &Path) -> Result<usize, HarnessError> {
    let mut rows = Vec::new();
    for p in inputs {
        rows.extend(read_records(p)?);
    }
    rows.sort_by(|a, b| (&a.strategy, a.seed).cmp(&(&b.strategy, b.seed)));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(out)?;
    w.write_record(COLUMNS)?;
    for r in &rows {
        w.write_record(r.to_record())?;
    }
    w.flush()?;
    Ok(rows.len())
}

/// Per-epoch selector log written next to a gp-condition run.
pub struct SelectionLog {
    file: File,
}

pub const SELECTION_COLUMNS: [&str; 13] = [
    "episode",
    "env_step",
    "epoch",
    "branch",
    "max_variance",
    "state",
    "score_min",
    "score_mean",
    "score_max",
    "degenerate",
    "metric_ms",
    "fit_ms",
    "predict_ms",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionEntry {
    pub episode: u64,
    pub env_step: u64,
    pub epoch: usize,
    pub branch: String,
    pub max_variance: f64,
    pub state: Vec<f64>,
    pub score_min: f64,
    pub score_mean: f64,
    pub score_max: f64,
    pub degenerate: bool,
    pub metric_ms: f64,
    pub fit_ms: f64,
    pub predict_ms: f64,
}

impl SelectionLog {
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        let mut file = File::create(path)?;
        writeln!(file, "{}", SELECTION_COLUMNS.join(","))?;
        Ok(Self { file })
    }

    pub fn write(&mut self, e: &SelectionEntry) -> Result<(), HarnessError> {
        let state: Vec<String> = e.state.iter().map(|v| fmt_real(*v)).collect();
        writeln!(
            self.file,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            e.episode,
            e.env_step,
            e.epoch,
            e.branch,
            fmt_real(e.max_variance),
            state.join(";"),
            fmt_real(e.score_min),
            fmt_real(e.score_mean),
            fmt_real(e.score_max),
            e.degenerate,
            fmt_real(e.metric_ms),
            fmt_real(e.fit_ms),
            fmt_real(e.predict_ms),
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64) -> RunRow {
        RunRow {
            env_id: "pendulum-v1".into(),
            strategy: "default".into(),
            seed: 3,
            env_step: step,
            episode: step / 200,
            eval_mean_reward: (step % 400 == 0).then_some(-1234.567_890_123_456_7),
            eval_std_reward: (step % 400 == 0).then_some(0.1 + 0.2),
            episodes_in_eval: (step % 400 == 0).then_some(100),
            selection_branch: "canonical".into(),
            selection_overhead_ms: 0.0,
            episode_return: -std::f64::consts::PI * 1e5,
            noise_kind: "none".into(),
            noise_level: 0.0,
            wall_ms: 12.345,
        }
    }

    #[test]
    fn reals_round_trip_exactly() {
        for v in [0.1 + 0.2, -1e-300, 123456.789, f64::MAX, 5e-324, -0.0] {
            assert_eq!(fmt_real(v).parse::<f64>().unwrap().to_bits(), v.to_bits(), "{v}");
        }
        assert!(fmt_real(f64::NAN).parse::<f64>().unwrap().is_nan());
    }

    #[test]
    fn rows_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        let rows: Vec<RunRow> = (1..=4).map(|i| row(i * 200)).collect();
        let mut w = RecordWriter::create(&path, &"cfg").unwrap();
        for r in &rows {
            w.write(r).unwrap();
        }
        drop(w);
        assert_eq!(read_records(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("env_id,strategy,seed,env_step"));
        assert!(!text.contains('\r'));
        let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(meta_path(&path)).unwrap()).unwrap();
        assert_eq!(meta["version"], 1);
    }

    #[test]
    fn header_only_file_is_empty_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        drop(RecordWriter::create(&path, &()).unwrap());
        assert!(read_records(&path).unwrap().is_empty());
    }

    #[test]
    fn merge_orders_by_strategy_then_seed() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for (strategy, seed) in [("gp-condition", 1), ("default", 2), ("default", 1)] {
            let p = dir.path().join(format!("{strategy}_{seed}.csv"));
            let mut w = RecordWriter::create(&p, &()).unwrap();
            let mut r = row(200);
            r.strategy = strategy.into();
            r.seed = seed;
            w.write(&r).unwrap();
            paths.push(p);
        }
        let out = dir.path().join("all.csv");
        assert_eq!(merge_records(&paths, &out).unwrap(), 3);
        let keys: Vec<(String, u64)> = read_records(&out).unwrap().into_iter().map(|r| (r.strategy, r.seed)).collect();
        assert_eq!(
            keys,
            vec![("default".into(), 1), ("default".into(), 2), ("gp-condition".into(), 1)]
        );
    }
}
