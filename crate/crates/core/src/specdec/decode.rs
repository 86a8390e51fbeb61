use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Vocabulary;
use crate::model::{Condition, KvCache, Model, PreparedCondition};

use super::rules::{verify, Acceptance, Strategy};
use super::sampling::{resample_independent, resample_pts, Sampler};
use super::trace::{DecodeTrace, Iteration, Provenance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Draft heads used per step; 0 reduces to one token per forward.
    pub draft_heads: usize,
    pub acceptance: Acceptance,
    pub strategy: Strategy,
    /// Applies to sampled rows only, never to verification.
    pub temperature: f32,
    pub top_k: Option<usize>,
    /// Defaults to the model's limit.
    pub max_len: Option<usize>,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            draft_heads: 4,
            acceptance: Acceptance::default(),
            strategy: Strategy::default(),
            temperature: 1.0,
            top_k: None,
            max_len: None,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        self.acceptance.validate()?;
        self.strategy.validate()?;
        if self.draft_heads > model.heads.len() {
            return Err(Error::Config(format!(
                "decode uses {} draft heads, model has {}",
                self.draft_heads,
                model.heads.len()
            )));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {} must be ≥ 0", self.temperature)));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        let limit = self.max_len(model);
        if limit < 2 || limit > model.cfg.max_len {
            return Err(Error::Config(format!(
                "max_len {limit} outside 2..={}",
                model.cfg.max_len
            )));
        }
        Ok(())
    }

    pub fn max_len(&self, model: &Model) -> usize {
        self.max_len.unwrap_or(model.cfg.max_len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// SOS, body, and EOS when the sequence terminated.
    pub tokens: Vec<u32>,
    pub trace: DecodeTrace,
}

/// Truncates `cache` to `len` positions.
pub fn rollback_cache(cache: &mut KvCache, len: usize) -> Result<()> {
    cache.rollback(len)
}

fn ensure_synced(cache: &KvCache, seq: &[u32]) -> Result<()> {
    if cache.len() + 1 != seq.len() {
        return Err(Error::State(format!(
            "cache holds {} positions for a prefix of {}",
            cache.len(),
            seq.len()
        )));
    }
    Ok(())
}

/// Multi-head speculative decoding.
///
/// Each iteration forwards `[x_s, candidates]`, accepts the leading
/// candidates that pass the rule, rolls the cache back to the accepted
/// prefix, samples `x_{s*}` from the backbone row at `s* − 1` and drafts
/// new candidates from the heads evaluated on that same hidden row.
pub fn decode(model: &Model, cond: &Condition, cfg: &DecodeConfig) -> Result<DecodeOutput> {
    let prep = model.prepare(cond)?;
    decode_prepared(model, &prep, cfg)
}

pub fn decode_prepared(model: &Model, prep: &PreparedCondition, cfg: &DecodeConfig) -> Result<DecodeOutput> {
    cfg.validate(model)?;
    let vocab = Vocabulary::new(model.cfg.bins)?;
    let eos = vocab.eos();
    let sampler = Sampler::new(&vocab, cfg.temperature, cfg.top_k);
    let max_len = cfg.max_len(model);
    let d = cfg.draft_heads;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache = model.new_cache();
    let mut seq = vec![vocab.sos()];
    let mut cands: Vec<u32> = (0..d).map(|_| rng.gen_range(0..vocab.bins)).collect();
    let mut trace = DecodeTrace::default();

    loop {
        let s = seq.len() - 1;
        let room = max_len - 1 - s;
        if room == 0 {
            break;
        }
        ensure_synced(&cache, &seq)?;
        let t0 = Instant::now();
        let d_eff = d.min(room - 1);
        let mut window = Vec::with_capacity(d_eff + 1);
        window.push(seq[s]);
        window.extend_from_slice(&cands[..d_eff]);
        let out = model.backbone_forward(&window, &mut cache, prep)?;
        let rows: Vec<&[f32]> = (0..d_eff).map(|j| out.probs.row(j)).collect();
        let n_acc = verify(&rows, &cands[..d_eff], &cfg.acceptance);

        let mut it = Iteration {
            s,
            s_star: s,
            tokens: Vec::with_capacity(n_acc + 1),
            provenance: Vec::with_capacity(n_acc + 1),
            p0: Vec::with_capacity(n_acc + 1),
            wall_us: 0.0,
            pts_fallback: false,
        };
        let mut finished = false;
        for (j, &t) in cands[..n_acc].iter().enumerate() {
            it.tokens.push(t);
            it.provenance.push(Provenance::HeadVerified);
            it.p0.push(out.probs.row(j)[t as usize]);
            if t == eos {
                finished = true;
                break;
            }
        }
        if !finished {
            rollback_cache(&mut cache, s + 1 + n_acc)?;
            let row = out.probs.row(n_acc);
            let x = sampler.sample(row, &mut rng);
            it.tokens.push(x);
            it.provenance.push(Provenance::BackboneSampled);
            it.p0.push(row[x as usize]);
            finished = x == eos;
            if !finished && d > 0 {
                let h = out.hidden.row_tensor(n_acc);
                let mut dists = Vec::with_capacity(d);
                for head in 1..=d {
                    let p = model.head_forward(head, &h, prep)?;
                    dists.push(sampler.dist(p.row(0)));
                }
                cands = match cfg.strategy {
                    Strategy::Independent => resample_independent(&dists, &mut rng),
                    Strategy::Pts { k, prune } => match resample_pts(&dists, k, prune, &mut rng) {
                        Some(path) => path,
                        None => {
                            it.pts_fallback = true;
                            log::debug!("all PTS paths pruned at s={s}; sampling independently");
                            resample_independent(&dists, &mut rng)
                        }
                    },
                };
            }
        }
        seq.extend_from_slice(&it.tokens);
        it.s_star = s + it.tokens.len();
        it.wall_us = t0.elapsed().as_secs_f64() * 1e6;
        trace.iterations.push(it);
        if finished {
            trace.terminated = true;
            break;
        }
    }
    Ok(DecodeOutput { tokens: seq, trace })
}

/// Classic loop: one forward, one sampled token.
pub fn vanilla_decode(model: &Model, cond: &Condition, cfg: &DecodeConfig) -> Result<DecodeOutput> {
    let prep = model.prepare(cond)?;
    vanilla_decode_prepared(model, &prep, cfg)
}

pub fn vanilla_decode_prepared(model: &Model, prep: &PreparedCondition, cfg: &DecodeConfig) -> Result<DecodeOutput> {
    let cfg = DecodeConfig {
        draft_heads: 0,
        ..cfg.clone()
    };
    cfg.validate(model)?;
    let vocab = Vocabulary::new(model.cfg.bins)?;
    let sampler = Sampler::new(&vocab, cfg.temperature, cfg.top_k);
    let max_len = cfg.max_len(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache = model.new_cache();
    let mut seq = vec![vocab.sos()];
    let mut trace = DecodeTrace::default();
    while seq.len() < max_len {
        let s = seq.len() - 1;
        let t0 = Instant::now();
        let out = model.backbone_forward(&seq[s..], &mut cache, prep)?;
        let row = out.probs.row(0);
        let x = sampler.sample(row, &mut rng);
        seq.push(x);
        trace.iterations.push(Iteration {
            s,
            s_star: s + 1,
            tokens: vec![x],
            provenance: vec![Provenance::BackboneSampled],
            p0: vec![row[x as usize]],
            wall_us: t0.elapsed().as_secs_f64() * 1e6,
            pts_fallback: false,
        });
        if x == vocab.eos() {
            trace.terminated = true;
            break;
        }
    }
    Ok(DecodeOutput { tokens: seq, trace })
}

/// Backbone probability of every token after the first, from one fresh pass.
pub fn replay_probabilities(model: &Model, cond: &Condition, tokens: &[u32]) -> Result<Vec<f32>> {
    if tokens.len() < 2 {
        return Ok(Vec::new());
    }
    let prep = model.prepare(cond)?;
    let mut cache = model.new_cache();
    let out = model.backbone_forward(&tokens[..tokens.len() - 1], &mut cache, &prep)?;
    Ok((1..tokens.len())
        .map(|i| out.probs.row(i - 1)[tokens[i] as usize])
        .collect())
}

/// Head-verified tokens whose replayed backbone probability fails the rule.
pub fn provenance_violations(model: &Model, cond: &Condition, out: &DecodeOutput, rule: &Acceptance) -> Result<usize> {
    let prep = model.prepare(cond)?;
    let mut cache = model.new_cache();
    let toks = &out.tokens;
    if toks.len() < 2 {
        return Ok(0);
    }
    let replay = model.backbone_forward(&toks[..toks.len() - 1], &mut cache, &prep)?;
    let mut pos = 1;
    let mut bad = 0;
    for it in &out.trace.iterations {
        for (&t, prov) in it.tokens.iter().zip(&it.provenance) {
            if *prov == Provenance::HeadVerified && !rule.accepts(replay.probs.row(pos - 1), t) {
                bad += 1;
            }
            pos += 1;
        }
    }
    Ok(bad)
}
