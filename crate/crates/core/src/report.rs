//! Aggregation of finished runs and CSV/JSON artifacts.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::mean_std;
use crate::train::{AblationTable, RunRecord, TrainMode};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeSummary {
    pub mode: TrainMode,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub rows: Vec<ModeSummary>,
    /// `mean(sage) - mean(sage_flipped)`, when both are present.
    pub delta: Option<f64>,
    pub warnings: Vec<String>,
}

impl Summary {
    pub fn mean_of(&self, mode: TrainMode) -> Option<f64> {
        self.rows.iter().find(|r| r.mode == mode).map(|r| r.mean)
    }
}

pub fn summarize(records: &[RunRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::invalid("runs", "no completed runs found"));
    }
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for mode in TrainMode::ALL {
        let a: Vec<f64> = records.iter().filter(|r| r.mode == mode).map(|r| r.final_auroc).collect();
        if a.is_empty() {
            continue;
        }
        if a.len() == 1 {
            warnings.push(format!("{mode}: single run, std reported as 0"));
        }
        let (mean, std) = mean_std(&a);
        rows.push(ModeSummary {
            mode,
            runs: a.len(),
            mean,
            std,
        });
    }
    let mut s = Summary {
        rows,
        delta: None,
        warnings,
    };
    s.delta = match (s.mean_of(TrainMode::Sage), s.mean_of(TrainMode::SageFlipped)) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    Ok(s)
}

/// Every `runs/<mode>/<seed>/record.json` below `runs_dir`, sorted by mode then seed.
pub fn collect_records(runs_dir: &Path) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for mode in TrainMode::ALL {
        let dir = runs_dir.join(mode.as_str());
        if !dir.is_dir() {
            continue;
        }
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path().join("record.json");
            if path.is_file() {
                out.push(read_record(&path)?);
            }
        }
    }
    out.sort_by(|a, b| (a.mode, a.seed).cmp(&(b.mode, b.seed)));
    Ok(out)
}

pub fn write_record(record: &RunRecord, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(record)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_record(path: &Path) -> Result<RunRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Serialize)]
struct SummaryCsvRow {
    mode: TrainMode,
    runs: usize,
    mean: f64,
    std: f64,
    delta: Option<f64>,
}

/// Columns `mode, runs, mean, std, delta`; `delta` is filled on the `sage` row only.
pub fn write_summary_csv(summary: &Summary, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &summary.rows {
        w.serialize(SummaryCsvRow {
            mode: r.mode,
            runs: r.runs,
            mean: r.mean,
            std: r.std,
            delta: if r.mode == TrainMode::Sage { summary.delta } else { None },
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn format_summary(summary: &Summary) -> String {
    let mut s = format!("{:<14} {:>4}  {:>8}  {:>8}\n", "mode", "runs", "mean", "std");
    for r in &summary.rows {
        s += &format!("{:<14} {:>4}  {:>8.4}  {:>8.4}\n", r.mode.as_str(), r.runs, r.mean, r.std);
    }
    if let Some(d) = summary.delta {
        s += &format!("delta (sage - sage_flipped): {d:+.4}\n");
    }
    s
}

/// `<axis>_runs.csv` (axis_value, seed, auroc) and `<axis>_summary.csv` (axis_value, mean, std).
pub fn write_ablation(table: &AblationTable, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let axis = table.axis.as_str();
    let raw = dir.join(format!("{axis}_runs.csv"));
    let mut w = csv::Writer::from_path(&raw)?;
    for r in &table.runs {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&raw, e))?;
    let agg = dir.join(format!("{axis}_summary.csv"));
    let mut w = csv::Writer::from_path(&agg)?;
    for r in &table.rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&agg, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossReport;
    use crate::train::{EpochRecord, RunSnapshot, TrainSetup};

    fn record(mode: TrainMode, seed: u64, auroc: f64) -> RunRecord {
        RunRecord {
            mode,
            seed,
            epochs: vec![EpochRecord {
                epoch: 0,
                lr: 0.005,
                loss: LossReport::default(),
                test_auroc: auroc,
            }],
            final_auroc: auroc,
            config: RunSnapshot {
                mode,
                seed,
                inverted_saliency: mode == TrainMode::SageFlipped,
                setup: TrainSetup::default(),
                dataset: None,
            },
        }
    }

    #[test]
    fn three_modes_with_delta() {
        let mut recs = Vec::new();
        for seed in 0..5 {
            recs.push(record(TrainMode::BaselineXent, seed, 0.5));
            recs.push(record(TrainMode::Sage, seed, 0.75 + seed as f64 * 0.0625));
            recs.push(record(TrainMode::SageFlipped, seed, 0.625));
        }
        let s = summarize(&recs).unwrap();
        assert_eq!(s.rows.len(), 3);
        assert!(s.warnings.is_empty());
        assert_eq!(s.mean_of(TrainMode::Sage), Some(0.875));
        assert_eq!(s.delta, Some(0.875 - 0.625));
        assert_eq!(s.rows[0].std, 0.0);
    }

    #[test]
    fn single_seed_warns() {
        let s = summarize(&[record(TrainMode::Sage, 0, 0.8)]).unwrap();
        assert_eq!(s.rows[0].std, 0.0);
        assert_eq!(s.warnings.len(), 1);
        assert_eq!(s.delta, None);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let runs = dir.path().join("runs");
        for (mode, seed) in [(TrainMode::Sage, 1), (TrainMode::Sage, 0), (TrainMode::SageFlipped, 0)] {
            let d = runs.join(mode.as_str()).join(seed.to_string());
            fs::create_dir_all(&d).unwrap();
            write_record(&record(mode, seed, 0.7), &d.join("record.json")).unwrap();
        }
        let recs = collect_records(&runs).unwrap();
        assert_eq!(recs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![0, 1, 0]);
        let s = summarize(&recs).unwrap();
        let csv_path = dir.path().join("summary.csv");
        write_summary_csv(&s, &csv_path).unwrap();
        let text = fs::read_to_string(csv_path).unwrap();
        assert!(text.starts_with("mode,runs,mean,std,delta\nsage,2,"), "{text}");
    }
}
