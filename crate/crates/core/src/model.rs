//! The assembled vision-language model: encoder, projector, LM, and the
//! optional feedback path (reasoner, unmerger, LoRA).

use crate::config::ModelConfig;
use crate::error::Result;
use crate::lm::LanguageModel;
use crate::numerics::Scalar;
use crate::params::ParamStore;
use crate::reasoner::Reasoner;
use crate::rng::SeedStream;
use crate::vision::VisionEncoder;

/// Randomly initialized encoder, projector and LM.
pub fn init_backbone<T: Scalar>(cfg: &ModelConfig, seeds: &SeedStream) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    VisionEncoder::register(&mut store, cfg, &mut seeds.child("encoder").rng())?;
    LanguageModel::register(&mut store, cfg, &mut seeds.child("lm").rng())?;
    Ok(store)
}

/// Adds the reasoner, the unmerger and (optionally) LoRA adapters to a
/// backbone store.
pub fn init_feedback<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, seeds: &SeedStream, lora: bool) -> Result<()> {
    Reasoner::register(store, cfg, &mut seeds.child("reasoner").rng())?;
    if lora {
        LanguageModel::inject_lora(store, cfg, &mut seeds.child("lora").rng())?;
    }
    Ok(())
}

/// Parameter handles for every component present in a store.
#[derive(Clone, Debug)]
pub struct Vlm {
    pub cfg: ModelConfig,
    pub encoder: VisionEncoder,
    pub lm: LanguageModel,
    pub reasoner: Option<Reasoner>,
}

impl Vlm {
    pub fn attach<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let reasoner = if store.id("reasoner.w_g").is_some() {
            Some(Reasoner::attach(store, cfg)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            encoder: VisionEncoder::attach(store, cfg)?,
            lm: LanguageModel::attach(store, cfg)?,
            reasoner,
        })
    }
}
