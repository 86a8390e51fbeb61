use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mesh::Vocabulary;

/// Turns a backbone or head row into the distribution actually sampled.
///
/// SOS and PAD are never sampled. Temperature ≤ 0 means greedy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    pub temperature: f32,
    pub top_k: Option<usize>,
    pub banned: Vec<u32>,
}

impl Sampler {
    pub fn new(vocab: &Vocabulary, temperature: f32, top_k: Option<usize>) -> Self {
        Sampler {
            temperature,
            top_k,
            banned: vec![vocab.sos(), vocab.pad()],
        }
    }

    /// Normalized sampling distribution for `row`.
    pub fn dist(&self, row: &[f32]) -> Vec<f64> {
        let mut w: Vec<f64> = row.iter().map(|&p| (p as f64).max(0.0)).collect();
        for &b in &self.banned {
            if let Some(x) = w.get_mut(b as usize) {
                *x = 0.0;
            }
        }
        let max = w.iter().copied().fold(0.0, f64::max);
        if !(max > 0.0) || self.temperature <= 0.0 {
            let best = argmax_f64(&w, &self.banned);
            let mut one = vec![0.0; w.len()];
            one[best] = 1.0;
            return one;
        }
        let inv_t = 1.0 / self.temperature as f64;
        if inv_t != 1.0 {
            for x in w.iter_mut() {
                *x = (*x / max).powf(inv_t);
            }
        }
        if let Some(k) = self.top_k {
            if k < w.len() {
                for i in top_indices(&w, w.len()).into_iter().skip(k) {
                    w[i] = 0.0;
                }
            }
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        w
    }

    pub fn sample<R: Rng>(&self, row: &[f32], rng: &mut R) -> u32 {
        draw(&self.dist(row), rng) as u32
    }
}

fn argmax_f64(w: &[f64], banned: &[u32]) -> usize {
    let mut best = None;
    for (i, &x) in w.iter().enumerate() {
        if banned.contains(&(i as u32)) {
            continue;
        }
        match best {
            Some((_, bx)) if x <= bx => {}
            _ => best = Some((i, x)),
        }
    }
    best.map_or(0, |b| b.0)
}

/// Indices of the `k` largest entries, descending, lower index first on ties.
pub fn top_indices(w: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Inverse-CDF draw from a normalized distribution.
pub fn draw<R: Rng>(dist: &[f64], rng: &mut R) -> usize {
    let u = rng.gen::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// One token per distribution, drawn independently.
pub fn resample_independent<R: Rng>(dists: &[Vec<f64>], rng: &mut R) -> Vec<u32> {
    dists.iter().map(|d| draw(d, rng) as u32).collect()
}

/// Root-to-leaf paths through the top-`k` tokens of each row with their
/// product weights; prefixes weighing less than `prune` are cut.
pub fn pts_paths(dists: &[Vec<f64>], k: usize, prune: f64) -> Vec<(Vec<u32>, f64)> {
    let layers: Vec<Vec<(u32, f64)>> = dists
        .iter()
        .map(|d| {
            top_indices(d, k)
                .into_iter()
                .filter(|&i| d[i] > 0.0)
                .map(|i| (i as u32, d[i]))
                .collect()
        })
        .collect();
    let mut paths: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 1.0)];
    for layer in &layers {
        let mut next = Vec::with_capacity(paths.len() * layer.len());
        for (prefix, w) in &paths {
            for &(t, m) in layer {
                let nw = w * m;
                if nw < prune {
                    continue;
                }
                let mut p = prefix.clone();
                p.push(t);
                next.push((p, nw));
            }
        }
        paths = next;
        if paths.is_empty() {
            break;
        }
    }
    paths
}

/// Samples a path proportional to its weight; `None` when every path was pruned.
pub fn resample_pts<R: Rng>(dists: &[Vec<f64>], k: usize, prune: f64, rng: &mut R) -> Option<Vec<u32>> {
    if dists.is_empty() {
        return Some(Vec::new());
    }
    let paths = pts_paths(dists, k, prune);
    let total: f64 = paths.iter().map(|p| p.1).sum();
    if paths.is_empty() || !(total > 0.0) {
        return None;
    }
    let weights: Vec<f64> = paths.iter().map(|p| p.1 / total).collect();
    Some(paths[draw(&weights, rng)].0.clone())
}
