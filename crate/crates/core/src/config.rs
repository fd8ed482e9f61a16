//! Model dimensions.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub channels: usize,
    pub d_embed: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Extent of the learned positional table, in patches.
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Patches per LLM image token; must be a perfect square.
    pub merge_factor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_llm: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_seq: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReasonerConfig {
    pub dropout: f64,
    pub init_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub lm: LmConfig,
    pub lora: LoraConfig,
    pub reasoner: ReasonerConfig,
    /// Vertical resolution images are resized to.
    pub image_height: usize,
    pub image_width: usize,
}

impl ModelConfig {
    /// Desk-scale default.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                patch_size: 6,
                channels: 3,
                d_embed: 32,
                blocks: 2,
                heads: 4,
                mlp_ratio: 4,
                grid_rows: 6,
                grid_cols: 6,
                merge_factor: 4,
            },
            lm: LmConfig {
                vocab: 512,
                d_llm: 64,
                blocks: 4,
                heads: 4,
                mlp_ratio: 4,
                max_seq: 128,
            },
            lora: LoraConfig {
                rank: 4,
                alpha: 8.0,
            },
            reasoner: ReasonerConfig {
                dropout: 0.1,
                init_std: 0.02,
            },
            image_height: 36,
            image_width: 36,
        }
    }

    /// Smallest two-pass configuration (`T = 4` image tokens) used for
    /// exhaustive gradient checks.
    pub fn micro() -> Self {
        Self {
            encoder: EncoderConfig {
                patch_size: 6,
                channels: 3,
                d_embed: 8,
                blocks: 1,
                heads: 2,
                mlp_ratio: 2,
                grid_rows: 4,
                grid_cols: 4,
                merge_factor: 4,
            },
            lm: LmConfig {
                vocab: 512,
                d_llm: 8,
                blocks: 1,
                heads: 2,
                mlp_ratio: 2,
                max_seq: 128,
            },
            lora: LoraConfig {
                rank: 4,
                alpha: 8.0,
            },
            reasoner: ReasonerConfig {
                dropout: 0.1,
                init_std: 0.02,
            },
            image_height: 24,
            image_width: 24,
        }
    }

    pub fn merge_window(&self) -> usize {
        (self.encoder.merge_factor as f64).sqrt().round() as usize
    }

    /// Patches for a default-sized image.
    pub fn patches(&self) -> usize {
        (self.image_height / self.encoder.patch_size) * (self.image_width / self.encoder.patch_size)
    }

    /// LLM image tokens for a default-sized image.
    pub fn image_tokens(&self) -> usize {
        self.patches() / self.encoder.merge_factor
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let l = &self.lm;
        let w = self.merge_window();
        if w * w != e.merge_factor || w == 0 {
            return Err(config(format!("merge factor {} is not a perfect square", e.merge_factor)));
        }
        if !e.d_embed.is_multiple_of(e.heads) {
            return Err(config("encoder heads must divide d_embed"));
        }
        if !l.d_llm.is_multiple_of(l.heads) {
            return Err(config("LM heads must divide d_llm"));
        }
        if e.d_embed < 2 || l.d_llm < 2 {
            return Err(config("widths must be at least 2"));
        }
        if !self.image_height.is_multiple_of(e.patch_size) || !self.image_width.is_multiple_of(e.patch_size) {
            return Err(config("image size must be a multiple of the patch size"));
        }
        let (rows, cols) = (self.image_height / e.patch_size, self.image_width / e.patch_size);
        if rows % w != 0 || cols % w != 0 {
            return Err(config("patch grid must be divisible by the merge window"));
        }
        if rows > e.grid_rows || cols > e.grid_cols {
            return Err(config("image exceeds the positional table"));
        }
        if l.vocab < crate::lm::vocab::Vocab::standard().len() {
            return Err(config("vocabulary smaller than the synthetic word list"));
        }
        if !(0.0..1.0).contains(&self.reasoner.dropout) {
            return Err(config("reasoner dropout outside [0, 1)"));
        }
        if self.lora.rank == 0 {
            return Err(config("LoRA rank must be positive"));
        }
        Ok(())
    }

    /// Hash of the backbone-defining dimensions. Checkpoints from runs that
    /// differ only in training hyperparameters share it.
    pub fn hash(&self) -> u64 {
        let mut dims = self.clone();
        dims.reasoner = ReasonerConfig {
            dropout: 0.0,
            init_std: 0.0,
        };
        let canonical = serde_json::to_string(&dims).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::micro().validate().unwrap();
        assert_eq!(ModelConfig::toy().image_tokens(), 9);
        assert_eq!(ModelConfig::micro().image_tokens(), 4);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ModelConfig::toy();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.lm.d_llm = 32;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn non_square_merge_rejected() {
        let mut c = ModelConfig::toy();
        c.encoder.merge_factor = 2;
        assert!(c.validate().is_err());
    }
}
