use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    BackboneSampled,
    HeadVerified,
}

/// One loop iteration: accepted tokens at positions `s+1 ..= s_star`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    pub s: usize,
    pub s_star: usize,
    pub tokens: Vec<u32>,
    pub provenance: Vec<Provenance>,
    /// Backbone probability of each accepted token.
    pub p0: Vec<f32>,
    pub wall_us: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub pts_fallback: bool,
}

impl Iteration {
    pub fn accepted(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub iterations: Vec<Iteration>,
    /// Whether EOS ended the sequence (false when `max_len` was hit).
    pub terminated: bool,
}

/// Iterations discarded before taking the latency median.
pub const WARMUP_ITERATIONS: usize = 5;

impl DecodeTrace {
    pub fn steps(&self) -> usize {
        self.iterations.len()
    }

    pub fn tokens(&self) -> usize {
        self.iterations.iter().map(Iteration::accepted).sum()
    }

    pub fn scr(&self) -> Option<f64> {
        (self.steps() > 0).then(|| self.tokens() as f64 / self.steps() as f64)
    }

    pub fn total_wall_s(&self) -> f64 {
        self.iterations.iter().map(|i| i.wall_us).sum::<f64>() * 1e-6
    }

    /// Median iteration wall time after warm-up, in milliseconds.
    pub fn median_step_ms(&self) -> Option<f64> {
        let skip = if self.steps() > WARMUP_ITERATIONS {
            WARMUP_ITERATIONS
        } else {
            0
        };
        let mut t: Vec<f64> = self.iterations[skip..].iter().map(|i| i.wall_us).collect();
        if t.is_empty() {
            return None;
        }
        t.sort_by(f64::total_cmp);
        let n = t.len();
        let mid = if n % 2 == 1 {
            t[n / 2]
        } else {
            0.5 * (t[n / 2 - 1] + t[n / 2])
        };
        Some(mid * 1e-3)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        for it in &self.iterations {
            serde_json::to_writer(&mut w, it)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tokens: usize,
    pub steps: usize,
    pub scr: f64,
    pub step_latency_ms: f64,
    pub baseline_step_latency_ms: f64,
    pub speedup: f64,
    pub seq_latency_s: f64,
}

/// `SCR · baseline / step` latency ratio.
pub fn speedup(scr: f64, baseline_ms: f64, step_ms: f64) -> f64 {
    scr * baseline_ms / step_ms
}

/// Aggregates speculative traces against baseline traces.
///
/// SCR is total tokens over total steps; step latency is the mean over
/// sequences of each sequence's median; sequence latency is the mean total
/// wall time.
pub fn compute_metrics(traces: &[DecodeTrace], baseline: &[DecodeTrace]) -> Result<MetricsReport> {
    let tokens: usize = traces.iter().map(DecodeTrace::tokens).sum();
    let steps: usize = traces.iter().map(DecodeTrace::steps).sum();
    if steps == 0 || baseline.iter().map(DecodeTrace::steps).sum::<usize>() == 0 {
        return Err(Error::Degenerate("metrics need at least one decoding step".into()));
    }
    let scr = tokens as f64 / steps as f64;
    let step = mean_median_ms(traces);
    let base = mean_median_ms(baseline);
    Ok(MetricsReport {
        tokens,
        steps,
        scr,
        step_latency_ms: step,
        baseline_step_latency_ms: base,
        speedup: speedup(scr, base, step),
        seq_latency_s: traces.iter().map(DecodeTrace::total_wall_s).sum::<f64>() / traces.len() as f64,
    })
}

pub fn mean_median_ms(traces: &[DecodeTrace]) -> f64 {
    let m: Vec<f64> = traces.iter().filter_map(DecodeTrace::median_step_ms).collect();
    m.iter().sum::<f64>() / m.len().max(1) as f64
}
