use log::warn;

use crate::model::predicted_position;
use crate::tensor::Tensor;

pub fn head_weight(base: f32, d: usize) -> f32 {
    base.powi(d as i32)
}

/// `Σ_d base^d · losses[d−1]`.
pub fn mhd_loss(losses: &[f64], base: f32) -> f64 {
    losses
        .iter()
        .enumerate()
        .map(|(i, l)| head_weight(base, i + 1) as f64 * l)
        .sum()
}

/// Label of every hidden row for output `head` (0 is the backbone).
pub fn shifted_labels(tokens: &[u32], head: usize, rows: usize) -> Vec<Option<u32>> {
    (0..rows)
        .map(|s| tokens.get(predicted_position(s, head)).copied())
        .collect()
}

pub fn labelled(labels: &[Option<u32>]) -> usize {
    labels.iter().filter(|l| l.is_some()).count()
}

/// Mean `−ln p[label]` over rows that carry a label.
pub fn head_loss(probs: &Tensor, labels: &[Option<u32>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (r, l) in labels.iter().enumerate().take(probs.rows()) {
        if let Some(y) = l {
            total -= (probs.row(r)[*y as usize] as f64).ln();
            n += 1;
        }
    }
    if n == 0 {
        warn!("head loss over an empty label mask");
        return 0.0;
    }
    total / n as f64
}
