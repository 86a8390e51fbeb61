use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::specdec::speedup;

/// Relative slack allowed when re-deriving speedup from a loaded row.
pub const SPEEDUP_TOLERANCE: f64 = 1e-6;

/// Exact CSV header, in order.
pub const CSV_COLUMNS: [&str; 7] = ["label", "cd", "hd", "scr", "step_latency_ms", "speedup", "seq_latency_s"];

/// One configuration's means over the evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub cd: f64,
    pub hd: f64,
    pub scr: f64,
    pub step_latency_ms: f64,
    pub speedup: f64,
    pub seq_latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub title: String,
    /// Row whose step latency every speedup is measured against.
    pub baseline: String,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn new(title: impl Into<String>, baseline: impl Into<String>) -> Self {
        BenchReport {
            title: title.into(),
            baseline: baseline.into(),
            rows: Vec::new(),
        }
    }

    pub fn row(&self, label: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    fn baseline_row(&self) -> Result<&BenchRow> {
        self.row(&self.baseline)
            .ok_or_else(|| Error::State(format!("report `{}` lacks baseline row `{}`", self.title, self.baseline)))
    }

    /// Every row's speedup must equal SCR times the baseline/row step ratio.
    pub fn check(&self) -> Result<()> {
        let base = self.baseline_row()?.step_latency_ms;
        for r in &self.rows {
            let want = speedup(r.scr, base, r.step_latency_ms);
            if !((r.speedup - want).abs() <= SPEEDUP_TOLERANCE * want.abs().max(1.0)) {
                return Err(Error::State(format!(
                    "row `{}`: speedup {} but SCR and latencies give {want}",
                    r.label, r.speedup
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            w.write_record(CSV_COLUMNS)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::State(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::State(e.to_string()))
    }

    /// Parses CSV rows; `title` and `baseline` are not stored in the table.
    pub fn from_csv(text: &str, title: &str, baseline: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != CSV_COLUMNS {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected columns {}, got {}", CSV_COLUMNS.join(","), header.join(",")),
            });
        }
        let rows = r.deserialize().collect::<std::result::Result<Vec<BenchRow>, _>>()?;
        let report = BenchReport {
            title: title.into(),
            baseline: baseline.into(),
            rows,
        };
        report.check()?;
        Ok(report)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: BenchReport = serde_json::from_str(text)?;
        report.check()?;
        Ok(report)
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{} (speedup vs `{}`)\n", self.title, self.baseline);
        s.push_str(&format!(
            "{:<18} {:>8} {:>8} {:>7} {:>10} {:>8} {:>9}\n",
            "label", "cd", "hd", "scr", "step_ms", "speedup", "seq_s"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<18} {:>8.4} {:>8.4} {:>7.3} {:>10.3} {:>8.3} {:>9.3}\n",
                r.label, r.cd, r.hd, r.scr, r.step_latency_ms, r.speedup, r.seq_latency_s
            ));
        }
        s
    }

    /// Writes `<stem>.csv`, `<stem>.json` and `<stem>.txt` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [("csv", self.to_csv()?), ("json", self.to_json()?), ("txt", self.summary())] {
            let p = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Loads `<stem>.json`, checking speedups.
    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let p = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Self::from_json(&text)
    }
}
