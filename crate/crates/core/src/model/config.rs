use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    CrossAttention,
    Mlp,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::CrossAttention => "cross_attention",
            HeadKind::Mlp => "mlp",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_attention" | "cross-attention" => Ok(HeadKind::CrossAttention),
            "mlp" => Ok(HeadKind::Mlp),
            _ => Err(Error::Config(format!("unknown head kind '{s}'"))),
        }
    }
}

/// Which backbone linear maps receive adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LoraTargets {
    /// Every attention, cross-attention and feed-forward matrix plus the output projection.
    #[default]
    All,
    /// Attention output, cross-attention output, second feed-forward matrix and the output projection.
    Outputs,
}

impl fmt::Display for LoraTargets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LoraTargets::All => "all",
            LoraTargets::Outputs => "outputs",
        })
    }
}

impl FromStr for LoraTargets {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(LoraTargets::All),
            "outputs" => Ok(LoraTargets::Outputs),
            _ => Err(Error::Config(format!("unknown LoRA target set '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: usize,
    pub d_model: usize,
    pub attn_heads: usize,
    pub ffn: usize,
    /// Coordinate bins; vocabulary is `bins + 3`.
    pub bins: u32,
    pub max_len: usize,
    pub draft_heads: usize,
    pub head_kind: HeadKind,
    pub cond_points: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 4,
            d_model: 128,
            attn_heads: 4,
            ffn: 512,
            bins: 128,
            max_len: 1856,
            draft_heads: 4,
            head_kind: HeadKind::CrossAttention,
            cond_points: 256,
        }
    }
}

pub const MODEL_KEYS: [&str; 9] = [
    "blocks",
    "d_model",
    "attn_heads",
    "ffn",
    "bins",
    "max_len",
    "draft_heads",
    "head_kind",
    "cond_points",
];

impl ModelConfig {
    pub fn vocab(&self) -> usize {
        self.bins as usize + 3
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks == 0 || self.d_model == 0 || self.ffn == 0 || self.cond_points == 0 {
            return bad("blocks, d_model, ffn and cond_points must be positive".into());
        }
        if self.attn_heads == 0 || self.d_model % self.attn_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.attn_heads
            ));
        }
        if self.bins < 2 {
            return bad("need at least 2 bins".into());
        }
        if self.max_len < 11 {
            return bad(format!("max_len {} cannot hold one triangle", self.max_len));
        }
        Ok(())
    }

    /// Reads keys under `prefix` (e.g. `"model."`), starting from defaults.
    pub fn from_kv(kv: &KvMap, prefix: &str) -> Result<Self> {
        let mut c = ModelConfig::default();
        let k = |s: &str| format!("{prefix}{s}");
        kv.read_into(&k("blocks"), &mut c.blocks)?;
        kv.read_into(&k("d_model"), &mut c.d_model)?;
        kv.read_into(&k("attn_heads"), &mut c.attn_heads)?;
        kv.read_into(&k("ffn"), &mut c.ffn)?;
        kv.read_into(&k("bins"), &mut c.bins)?;
        kv.read_into(&k("max_len"), &mut c.max_len)?;
        kv.read_into(&k("draft_heads"), &mut c.draft_heads)?;
        kv.read_into(&k("head_kind"), &mut c.head_kind)?;
        kv.read_into(&k("cond_points"), &mut c.cond_points)?;
        c.validate()?;
        Ok(c)
    }

    pub fn write_kv(&self, kv: &mut KvMap, prefix: &str) {
        kv.set(format!("{prefix}blocks"), self.blocks);
        kv.set(format!("{prefix}d_model"), self.d_model);
        kv.set(format!("{prefix}attn_heads"), self.attn_heads);
        kv.set(format!("{prefix}ffn"), self.ffn);
        kv.set(format!("{prefix}bins"), self.bins);
        kv.set(format!("{prefix}max_len"), self.max_len);
        kv.set(format!("{prefix}draft_heads"), self.draft_heads);
        kv.set(format!("{prefix}head_kind"), self.head_kind);
        kv.set(format!("{prefix}cond_points"), self.cond_points);
    }

    pub fn to_text(&self) -> String {
        let mut kv = KvMap::default();
        self.write_kv(&mut kv, "");
        kv.to_text()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvMap::parse(text)?;
        kv.reject_unknown(&MODEL_KEYS)?;
        Self::from_kv(&kv, "")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let c = ModelConfig {
            d_model: 64,
            head_kind: HeadKind::Mlp,
            ..Default::default()
        };
        assert_eq!(ModelConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(c.vocab(), 131);
    }

    #[test]
    fn rejects_bad() {
        assert!(ModelConfig::parse("d_model = 130\n").is_err());
        assert!(ModelConfig::parse("colour = red\n").is_err());
        assert!(ModelConfig::parse("head_kind = rnn\n").is_err());
    }
}
