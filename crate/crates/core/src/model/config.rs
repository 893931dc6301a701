use serde::{Deserialize, Serialize};

use crate::error::{CovarError, Result};
use crate::nn::linear_size;
use crate::toyworld::{ACTION_DIM, TOKEN_LEN};

/// How the two branches exchange information inside a block pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AttentionMode {
    /// Joint attention over both streams with per-modality q/k/v.
    #[default]
    Bridge,
    /// Joint attention over both streams with one shared q/k/v set.
    #[serde(rename = "SELF")]
    SelfAttn,
    /// Per-modality self-attention, then video↔action cross-attention.
    Cross,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionDecoder {
    #[default]
    Unet,
    Mlp,
}

impl std::str::FromStr for AttentionMode {
    type Err = CovarError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BRIDGE" => Ok(Self::Bridge),
            "SELF" => Ok(Self::SelfAttn),
            "CROSS" => Ok(Self::Cross),
            _ => Err(CovarError::Config(format!("unknown attention mode {s:?}"))),
        }
    }
}

impl std::str::FromStr for ActionDecoder {
    type Err = CovarError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "UNET" => Ok(Self::Unet),
            "MLP" => Ok(Self::Mlp),
            _ => Err(CovarError::Config(format!("unknown action decoder {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub heads: usize,
    pub block_pairs: usize,
    pub patch_size: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub action_dim: usize,
    pub vocab_size: usize,
    pub text_len: usize,
    pub attention_mode: AttentionMode,
    pub action_decoder: ActionDecoder,
    pub video_branch_enabled: bool,
    /// Bridge attention runs in every `bridge_interval`-th block pair; the
    /// others use per-modality self-attention.
    pub bridge_interval: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            heads: 4,
            block_pairs: 4,
            patch_size: 8,
            frames: 8,
            height: 32,
            width: 32,
            action_dim: ACTION_DIM,
            vocab_size: 32,
            text_len: TOKEN_LEN,
            attention_mode: AttentionMode::Bridge,
            action_decoder: ActionDecoder::Unet,
            video_branch_enabled: true,
            bridge_interval: 1,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.hidden_dim;
        let bad = |m: String| Err(CovarError::Config(m));
        if c == 0 || self.heads == 0 || c % self.heads != 0 {
            return bad(format!("hidden_dim {c} must be a positive multiple of heads {}", self.heads));
        }
        if c % 8 != 0 {
            return bad(format!("hidden_dim {c} must be a multiple of 8 for the space-time encoding"));
        }
        if self.patch_size == 0 || self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return bad(format!(
                "frame {}×{} is not divisible by patch_size {}",
                self.height, self.width, self.patch_size
            ));
        }
        if self.frames == 0 || self.action_dim == 0 || self.text_len == 0 || self.vocab_size == 0 {
            return bad("frames, action_dim, text_len and vocab_size must be positive".into());
        }
        if self.action_decoder == ActionDecoder::Unet && self.frames < 4 {
            return bad(format!("the UNet action decoder needs at least 4 frames, got {}", self.frames));
        }
        if self.bridge_interval == 0 || self.mlp_ratio == 0 {
            return bad("bridge_interval and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    pub fn video_tokens(&self) -> usize {
        let (hp, wp) = self.grid();
        self.frames * hp * wp
    }

    /// Action steps plus the prepended conditioning token.
    pub fn action_tokens(&self) -> usize {
        self.frames + 1
    }

    /// Adaptive-norm sublayers per branch and block pair.
    pub(crate) fn sublayers(&self) -> usize {
        if self.video_branch_enabled && self.attention_mode == AttentionMode::Cross {
            4
        } else {
            3
        }
    }

    /// Closed-form parameter count for this configuration.
    pub fn param_count(&self) -> usize {
        let (c, l, p) = (self.hidden_dim, self.action_dim, self.patch_dim());
        let f = self.mlp_ratio * c;
        let lin = |a, b| linear_size(a, b, true);
        let mut n = 2 * lin(c, c) + self.vocab_size * c + lin(p, c) + lin(l, c) + lin(c, c);
        if self.video_branch_enabled {
            n += lin(c, 2 * c) + lin(c, p);
        }
        n += lin(c, 2 * c);
        n += match self.action_decoder {
            ActionDecoder::Unet => {
                lin(3 * c, 2 * c) + lin(6 * c, 4 * c) + lin(12 * c, 4 * c) + lin(18 * c, 2 * c)
                    + lin(9 * c, c)
                    + lin(c, l)
            }
            ActionDecoder::Mlp => lin(c, c) + lin(c, l),
        };
        let branches = if self.video_branch_enabled { 2 } else { 1 };
        let per_branch = lin(c, self.sublayers() * 3 * c) + 4 * lin(c, c) + lin(c, f) + lin(f, c);
        let attn = if !self.video_branch_enabled {
            4 * lin(c, c)
        } else {
            match self.attention_mode {
                AttentionMode::SelfAttn => 3 * lin(c, c) + 2 * lin(c, c),
                AttentionMode::Bridge => 6 * lin(c, c) + 2 * lin(c, c),
                AttentionMode::Cross => 6 * lin(c, c) + 2 * lin(c, c) + 8 * lin(c, c),
            }
        };
        n + self.block_pairs * (branches * per_branch + attn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.video_tokens(), 128);
        assert_eq!(c.action_tokens(), 9);
    }

    #[test]
    fn guards() {
        let mut c = ModelConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.heads = 4;
        c.patch_size = 5;
        assert!(c.validate().is_err());
        c.patch_size = 8;
        c.frames = 3;
        assert!(c.validate().is_err());
        c.action_decoder = ActionDecoder::Mlp;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn mode_names_round_trip() {
        for (m, s) in [
            (AttentionMode::Bridge, "\"BRIDGE\""),
            (AttentionMode::SelfAttn, "\"SELF\""),
            (AttentionMode::Cross, "\"CROSS\""),
        ] {
            assert_eq!(serde_json::to_string(&m).unwrap(), s);
            assert_eq!(serde_json::from_str::<AttentionMode>(s).unwrap(), m);
        }
        assert_eq!("self".parse::<AttentionMode>().unwrap(), AttentionMode::SelfAttn);
    }
}
