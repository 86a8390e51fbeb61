use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a drafted candidate is judged against the backbone distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Acceptance {
    /// Accept while `p0(x) > delta`.
    Threshold { delta: f32 },
    /// Accept while `x` is among the `k` most probable tokens.
    TopK { k: usize },
}

impl Default for Acceptance {
    fn default() -> Self {
        Acceptance::Threshold { delta: 0.5 }
    }
}

impl fmt::Display for Acceptance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Acceptance::Threshold { delta } => write!(f, "threshold:{delta}"),
            Acceptance::TopK { k } => write!(f, "top_ka:{k}"),
        }
    }
}

impl FromStr for Acceptance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("acceptance must be threshold:<delta> or top_ka:<k>, got '{s}'"));
        let (kind, val) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "threshold" => Ok(Acceptance::Threshold {
                delta: val.parse().map_err(|_| bad())?,
            }),
            "top_ka" => Ok(Acceptance::TopK {
                k: val.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

impl Acceptance {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Acceptance::Threshold { delta } if !(0.0..1.0).contains(&delta) => {
                Err(Error::Config(format!("delta {delta} outside [0, 1)")))
            }
            Acceptance::TopK { k: 0 } => Err(Error::Config("K_a must be at least 1".into())),
            _ => Ok(()),
        }
    }

    pub fn accepts(&self, row: &[f32], token: u32) -> bool {
        let t = token as usize;
        match *self {
            Acceptance::Threshold { delta } => row[t] > delta,
            Acceptance::TopK { k } => rank(row, t) < k,
        }
    }
}

/// Zero-based rank of `t` by descending probability, lower id first on ties.
pub fn rank(row: &[f32], t: usize) -> usize {
    let p = row[t];
    row.iter()
        .enumerate()
        .filter(|&(i, &q)| q > p || (q == p && i < t))
        .count()
}

/// Number of leading candidates accepted; `probs` row `j` scores `candidates[j]`.
pub fn verify(probs: &[&[f32]], candidates: &[u32], rule: &Acceptance) -> usize {
    candidates
        .iter()
        .zip(probs)
        .take_while(|(&c, row)| rule.accepts(row, c))
        .count()
}

/// Sampling scheme for the drafted window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Strategy {
    Independent,
    /// Probability-tree sampling over the top-`k` tokens of each head row.
    Pts { k: usize, prune: f64 },
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy::Independent
    }
}

pub const DEFAULT_PRUNE: f64 = 1e-5;

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Independent => f.write_str("independent"),
            Strategy::Pts { k, prune } => write!(f, "pts:{k}:{prune}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("strategy must be independent or pts:<k>[:<prune>], got '{s}'"));
        let mut parts = s.split(':');
        match parts.next() {
            Some("independent") if parts.next().is_none() => Ok(Strategy::Independent),
            Some("pts") => {
                let k = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                let prune = match parts.next() {
                    Some(p) => p.parse().map_err(|_| bad())?,
                    None => DEFAULT_PRUNE,
                };
                if parts.next().is_some() {
                    return Err(bad());
                }
                Ok(Strategy::Pts { k, prune })
            }
            _ => Err(bad()),
        }
    }
}

impl Strategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Strategy::Pts { k, prune } if k == 0 || !(prune >= 0.0) => {
                Err(Error::Config(format!("PTS needs K_s ≥ 1 and prune ≥ 0, got {k}, {prune}")))
            }
            _ => Ok(()),
        }
    }
}
