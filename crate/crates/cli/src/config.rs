//! Flat run configuration. Every key is optional except `seed`, which may
//! also come from `--seed`. Unknown keys are an error.

use std::path::{Path, PathBuf};

use lvlm_core::datasets::{GridSpec, TaskMix};
use lvlm_core::lm::Ordering;
use lvlm_core::pipeline::eval::{Benchmark, EvalConfig};
use lvlm_core::pipeline::{LrSchedule, PipelineConfig, PretrainConfig, Variant};
use lvlm_core::ModelConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Micro,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mix {
    Vqa,
    All,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,

    pub model: Preset,
    pub d_llm: Option<usize>,
    pub lm_blocks: Option<usize>,
    pub d_embed: Option<usize>,
    pub encoder_blocks: Option<usize>,
    pub lora_rank: Option<usize>,
    pub dropout: Option<f64>,

    pub variant: Variant,
    pub lora: bool,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub sweep: bool,
    pub steps: usize,
    pub ordering: Ordering,
    pub max_answer_tokens: usize,
    pub checkpoint_every: usize,
    pub merge_weight: f64,
    pub parallel: bool,

    pub out: Option<PathBuf>,
    pub train_path: Option<PathBuf>,
    pub validation_path: Option<PathBuf>,
    pub captions_path: Option<PathBuf>,
    pub mcq_path: Option<PathBuf>,
    pub backbone_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,

    pub benchmarks: Vec<Benchmark>,
    pub episodes: usize,
    pub start_distance: Option<f64>,
    pub max_steps: usize,
    pub events: usize,

    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub pretrain_warmup: usize,
    pub multi_image: bool,

    pub train_size: usize,
    pub validation_size: usize,
    pub task_mix: Mix,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::new(ModelConfig::toy(), Variant::FullMethod, 0);
        let pre = PretrainConfig::default();
        let ev = EvalConfig::default();
        let grid = GridSpec::default();
        Self {
            seed: None,
            model: Preset::Toy,
            d_llm: None,
            lm_blocks: None,
            d_embed: None,
            encoder_blocks: None,
            lora_rank: None,
            dropout: None,
            variant: p.variant,
            lora: p.lora,
            lr: p.lr,
            schedule: p.schedule,
            sweep: false,
            steps: p.steps,
            ordering: p.ordering,
            max_answer_tokens: p.max_answer_tokens,
            checkpoint_every: p.checkpoint_every,
            merge_weight: 0.5,
            parallel: true,
            out: None,
            train_path: None,
            validation_path: None,
            captions_path: None,
            mcq_path: None,
            backbone_path: None,
            checkpoint_path: None,
            benchmarks: Benchmark::ALL.to_vec(),
            episodes: ev.episodes,
            start_distance: ev.start_distance,
            max_steps: ev.max_steps,
            events: ev.events,
            pretrain_steps: pre.steps,
            pretrain_lr: pre.lr,
            pretrain_batch: pre.batch,
            pretrain_warmup: pre.warmup,
            multi_image: pre.multi_image,
            train_size: 512,
            validation_size: 64,
            task_mix: Mix::Vqa,
            min_objects: grid.min_objects,
            max_objects: grid.max_objects,
        }
    }
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub variant: Option<String>,
    pub sweep: bool,
    pub benchmark: Option<String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {}", e.message())))
    }

    /// Reads `path` (or starts from defaults), applies `ov` and checks the
    /// result. Relative paths in the file resolve against its directory.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                let mut c = Self::parse(&text)?;
                if let Some(dir) = p.parent() {
                    c.resolve_paths(dir);
                }
                c
            }
            None => Self::default(),
        };
        if ov.seed.is_some() {
            cfg.seed = ov.seed;
        }
        if ov.out.is_some() {
            cfg.out = ov.out.clone();
        }
        if let Some(v) = &ov.variant {
            cfg.variant = Variant::from_name(v).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        cfg.sweep |= ov.sweep;
        if let Some(b) = &ov.benchmark {
            cfg.benchmarks = vec![Benchmark::from_name(b).map_err(|e| CliError::Usage(e.to_string()))?];
        }
        if cfg.seed.is_none() {
            return Err(CliError::Usage("a seed is required (config key `seed` or --seed)".into()));
        }
        cfg.model_config()?;
        if !(0.0..=1.0).contains(&cfg.merge_weight) {
            return Err(CliError::Usage(format!("merge_weight {} outside [0, 1]", cfg.merge_weight)));
        }
        if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
            return Err(CliError::Usage(format!("lr must be positive, got {}", cfg.lr)));
        }
        if cfg.checkpoint_every == 0 {
            return Err(CliError::Usage("checkpoint_every must be positive".into()));
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        for p in [
            &mut self.out,
            &mut self.train_path,
            &mut self.validation_path,
            &mut self.captions_path,
            &mut self.mcq_path,
            &mut self.backbone_path,
            &mut self.checkpoint_path,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("checked in load")
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("an output directory is required (config key `out` or --out)".into()))
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let mut m = match self.model {
            Preset::Toy => ModelConfig::toy(),
            Preset::Micro => ModelConfig::micro(),
        };
        if let Some(v) = self.d_llm {
            m.lm.d_llm = v;
        }
        if let Some(v) = self.lm_blocks {
            m.lm.blocks = v;
        }
        if let Some(v) = self.d_embed {
            m.encoder.d_embed = v;
        }
        if let Some(v) = self.encoder_blocks {
            m.encoder.blocks = v;
        }
        if let Some(v) = self.lora_rank {
            m.lora.rank = v;
        }
        if let Some(v) = self.dropout {
            m.reasoner.dropout = v;
        }
        m.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(m)
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, CliError> {
        Ok(PipelineConfig {
            lora: self.lora,
            lr: self.lr,
            schedule: self.schedule,
            steps: self.steps,
            ordering: self.ordering,
            max_answer_tokens: self.max_answer_tokens,
            checkpoint_every: self.checkpoint_every,
            ..PipelineConfig::new(self.model_config()?, self.variant, self.seed())
        })
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            lr: self.pretrain_lr,
            batch: self.pretrain_batch,
            seed: self.seed(),
            multi_image: self.multi_image,
            warmup: self.pretrain_warmup,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            episodes: self.episodes,
            start_distance: self.start_distance,
            max_steps: self.max_steps,
            events: self.events,
        }
    }

    pub fn mix(&self) -> TaskMix {
        match self.task_mix {
            Mix::Vqa => TaskMix::VQA_ONLY,
            Mix::All => TaskMix::ALL,
        }
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            ..GridSpec::default()
        }
    }
}
