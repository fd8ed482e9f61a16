//! Two-pass training and inference, sweeps, checkpoint merging and the
//! ablation matrix.

pub mod ablation;
pub mod checkpoint;
pub mod eval;
pub mod forward;
pub mod gradcheck;
pub mod metrics;
pub mod sweep;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::lm::Ordering;
use crate::reasoner::ReasonerMode;

pub use forward::{forward, infer, prepare, Inference, Prepared};
pub use train::{pretrain, pretrain_eval_loss, pretrain_frames, pretrain_init, Frames, PretrainConfig, StepReport, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FullMethod,
    /// Second pass sees only the reasoned image.
    NoOriginalImage,
    /// Hint goes straight to the unmerger.
    NoMlp,
    /// Full method, both images before the prompt.
    ImageFirst,
    /// Full method, prompt before both images.
    PromptFirst,
    /// Single pass over the same image encoding twice.
    DuplicateImageBaseline,
    /// Single pass, single image.
    PlainBaseline,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::FullMethod,
        Variant::NoOriginalImage,
        Variant::NoMlp,
        Variant::ImageFirst,
        Variant::PromptFirst,
        Variant::DuplicateImageBaseline,
        Variant::PlainBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FullMethod => "full_method",
            Variant::NoOriginalImage => "no_original_image",
            Variant::NoMlp => "no_mlp",
            Variant::ImageFirst => "image_first",
            Variant::PromptFirst => "prompt_first",
            Variant::DuplicateImageBaseline => "duplicate_image_baseline",
            Variant::PlainBaseline => "plain_baseline",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown variant {name:?}")))
    }

    pub fn is_two_pass(self) -> bool {
        !matches!(self, Variant::DuplicateImageBaseline | Variant::PlainBaseline)
    }

    pub fn keeps_original(self) -> bool {
        self != Variant::NoOriginalImage
    }

    pub fn reasoner_mode(self) -> ReasonerMode {
        if self == Variant::NoMlp {
            ReasonerMode::Identity
        } else {
            ReasonerMode::GatedMlp
        }
    }

    /// Ordering pinned by the variant, else `default`.
    pub fn ordering(self, default: Ordering) -> Ordering {
        match self {
            Variant::ImageFirst => Ordering::ImageFirst,
            Variant::PromptFirst => Ordering::PromptFirst,
            _ => default,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from `lr` to zero over `steps`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub variant: Variant,
    pub lora: bool,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub steps: usize,
    pub seed: u64,
    pub ordering: Ordering,
    pub max_answer_tokens: usize,
    pub checkpoint_every: usize,
}

impl PipelineConfig {
    pub fn new(model: ModelConfig, variant: Variant, seed: u64) -> Self {
        Self {
            model,
            variant,
            lora: true,
            lr: 1e-3,
            schedule: LrSchedule::Cosine,
            steps: 500,
            seed,
            ordering: Ordering::ImageFirst,
            max_answer_tokens: 16,
            checkpoint_every: 200,
        }
    }

    /// Learning rate of update `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = (step as f64 / self.steps.max(1) as f64).min(1.0);
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn ordering(&self) -> Ordering {
        self.variant.ordering(self.ordering)
    }

    /// LoRA runs in the first pass only, so single-pass variants never use it.
    pub fn uses_lora(&self) -> bool {
        self.lora && self.variant.is_two_pass()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::from_name(v.name()).unwrap(), v);
        }
        assert!(Variant::from_name("stage1").is_err());
    }

    #[test]
    fn full_method_defaults_to_image_first() {
        let c = PipelineConfig::new(ModelConfig::toy(), Variant::FullMethod, 0);
        assert_eq!(c.ordering(), Ordering::ImageFirst);
        let mut p = c.clone();
        p.variant = Variant::PromptFirst;
        assert_eq!(p.ordering(), Ordering::PromptFirst);
        assert_eq!(Variant::NoMlp.reasoner_mode(), ReasonerMode::Identity);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let mut c = PipelineConfig::new(ModelConfig::toy(), Variant::FullMethod, 0);
        c.steps = 100;
        assert_eq!(c.lr_at(0), c.lr);
        assert!((c.lr_at(50) - 0.5 * c.lr).abs() < 1e-15);
        assert!(c.lr_at(100).abs() < 1e-15);
        c.schedule = LrSchedule::Constant;
        assert_eq!(c.lr_at(77), c.lr);
    }
}
