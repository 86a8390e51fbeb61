use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Model;
use crate::par::{self, Parallelism};
use crate::specdec::rank;
use crate::tensor::Tensor;

use super::data::Example;
use super::loss::shifted_labels;

/// Accuracy of one output; head 0 is the backbone's next-token projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAccuracy {
    pub head: usize,
    pub top1: f64,
    pub top5: f64,
    pub ce: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEval {
    pub rows: Vec<HeadAccuracy>,
}

impl HeadEval {
    pub fn backbone(&self) -> &HeadAccuracy {
        &self.rows[0]
    }

    pub fn head(&self, d: usize) -> Option<&HeadAccuracy> {
        self.rows.get(d)
    }

    pub fn draft_heads(&self) -> &[HeadAccuracy] {
        &self.rows[1..]
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    hit1: usize,
    hit5: usize,
    nll: f64,
    count: usize,
}

fn tally(probs: &Tensor, labels: &[Option<u32>]) -> Tally {
    let mut t = Tally::default();
    for (r, l) in labels.iter().enumerate() {
        if let Some(y) = *l {
            let row = probs.row(r);
            let k = rank(row, y as usize);
            t.hit1 += usize::from(k == 0);
            t.hit5 += usize::from(k < 5);
            t.nll -= (row[y as usize].max(1e-30) as f64).ln();
            t.count += 1;
        }
    }
    t
}

/// Top-1 / top-5 accuracy and mean CE of the backbone and every draft head,
/// each scored against the token its offset predicts.
pub fn evaluate_heads(model: &Model, examples: &[Example], mode: Parallelism) -> Result<HeadEval> {
    let heads = model.heads.len();
    let per = par::map(examples, mode, |_, e| -> Result<Vec<Tally>> {
        if e.tokens.len() > model.cfg.max_len || e.tokens.len() < 2 {
            return Ok(vec![Tally::default(); heads + 1]);
        }
        let prep = model.prepare(&model.encode_condition(&e.cloud())?)?;
        let mut cache = model.new_cache();
        let out = model.backbone_forward(&e.tokens, &mut cache, &prep)?;
        let rows = e.tokens.len();
        let mut t = vec![tally(&out.probs, &shifted_labels(&e.tokens, 0, rows))];
        for d in 1..=heads {
            let probs = model.head_forward(d, &out.hidden, &prep)?;
            t.push(tally(&probs, &shifted_labels(&e.tokens, d, rows)));
        }
        Ok(t)
    });
    let mut sums = vec![Tally::default(); heads + 1];
    for t in per {
        for (s, x) in sums.iter_mut().zip(t?) {
            s.hit1 += x.hit1;
            s.hit5 += x.hit5;
            s.nll += x.nll;
            s.count += x.count;
        }
    }
    let frac = |a: usize, n: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
    Ok(HeadEval {
        rows: sums
            .iter()
            .enumerate()
            .map(|(head, s)| HeadAccuracy {
                head,
                top1: frac(s.hit1, s.count),
                top5: frac(s.hit5, s.count),
                ce: if s.count == 0 { 0.0 } else { s.nll / s.count as f64 },
                count: s.count,
            })
            .collect(),
    })
}
