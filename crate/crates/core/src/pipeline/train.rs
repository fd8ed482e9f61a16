//! Optimizer loop for the feedback path and for backbone pretraining.

use std::collections::BTreeMap;

use crate::config::ModelConfig;
use crate::datasets::Sample;
use crate::error::{Error, Result};
use crate::lm::{set_trainable_partition, LoraMode, Ordering, PartitionReport, SequenceLayout};
use crate::model::{init_backbone, init_feedback, Vlm};
use crate::numerics::{AdamW, AdamWConfig, Graph, Scalar, Var};
use crate::params::{ParamGroup, ParamStore};
use crate::reasoner::ReasonerMode;
use crate::rng::SeedStream;
use crate::vision::ImageGrid;

use super::checkpoint::Checkpoint;

use super::forward::forward;
use super::PipelineConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    /// L2 norm of each trainable group's gradient.
    pub grad_norms: BTreeMap<ParamGroup, f64>,
}

/// Reasoner training state over a frozen backbone.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub cfg: PipelineConfig,
    pub vlm: Vlm,
    pub store: ParamStore<T>,
    pub opt: AdamW<T>,
    pub partition: PartitionReport,
    pub step: u64,
    seeds: SeedStream,
}

impl<T: Scalar> Trainer<T> {
    /// Adds feedback parameters to `backbone` (unless already present) and
    /// freezes everything else.
    pub fn new(mut backbone: ParamStore<T>, cfg: PipelineConfig) -> Result<Self> {
        let seeds = SeedStream::new(cfg.seed);
        if backbone.id("reasoner.w_g").is_none() {
            init_feedback(&mut backbone, &cfg.model, &seeds.child("init"), cfg.lora)?;
        }
        let partition = set_trainable_partition(&mut backbone);
        // Groups the variant never reads stay frozen.
        let bypassed = cfg.variant.reasoner_mode() == ReasonerMode::Identity;
        let lora = cfg.uses_lora();
        backbone.set_trainable(|g| match g {
            ParamGroup::Reasoner => !bypassed,
            ParamGroup::Lora => lora,
            g => !g.is_backbone(),
        });
        let vlm = Vlm::attach(&backbone, &cfg.model)?;
        Ok(Self {
            opt: AdamW::new(AdamWConfig::with_lr(cfg.lr)),
            cfg,
            vlm,
            store: backbone,
            partition,
            step: 0,
            seeds,
        })
    }

    /// Freezes every parameter; steps then only measure the loss.
    pub fn freeze_all(&mut self) {
        self.store.set_trainable(|_| false);
    }

    /// One update from one sample. Single-pass variants have nothing to
    /// train and only report the loss.
    pub fn train_step(&mut self, sample: &Sample) -> Result<StepReport> {
        let mut rng = self.seeds.child("dropout").index(self.step).rng();
        let mut g = Graph::new();
        let f = forward(&self.vlm, &self.store, &mut g, sample, &self.cfg, true, &mut rng)?;
        let loss = g.item(f.loss).as_f64();
        if !loss.is_finite() {
            let diagnostics = match &f.prepared.trace {
                Some(t) => format!(
                    "gate mean {:.4} min {:.4} max {:.4}, reasoner output rms {:.4e}",
                    t.gate_mean, t.gate_min, t.gate_max, t.out_rms
                ),
                None => "no reasoner in this variant".into(),
            };
            return Err(Error::NonFinite {
                step: self.step,
                diagnostics,
            });
        }
        let mut grad_norms = BTreeMap::new();
        let trains = self.cfg.variant.is_two_pass() && !self.store.trainable_ids().is_empty();
        if trains {
            let grads = g.backward(f.loss)?;
            for id in self.store.trainable_ids() {
                if let Some(gr) = self.store.grad(&grads, id) {
                    let sq: f64 = gr.iter().map(|x| x.as_f64().powi(2)).sum();
                    *grad_norms.entry(self.store.entry(id).group).or_insert(0.0) += sq;
                }
            }
            for v in grad_norms.values_mut() {
                *v = v.sqrt();
            }
            self.store.accumulate_grads(&grads);
            self.opt.config.lr = self.cfg.lr_at(self.step);
            self.store.apply_adamw(&mut self.opt)?;
        }
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss,
            grad_norms,
        })
    }

    /// Dropout-free loss on one sample.
    pub fn eval_loss(&self, sample: &Sample) -> Result<f64> {
        let mut g = Graph::new();
        let mut rng = SeedStream::new(0).rng();
        let f = forward(&self.vlm, &self.store, &mut g, sample, &self.cfg, false, &mut rng)?;
        Ok(g.item(f.loss).as_f64())
    }

    pub fn mean_eval_loss(&self, samples: &[Sample]) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            total += self.eval_loss(s)?;
        }
        Ok(total / samples.len().max(1) as f64)
    }

    /// `steps` updates cycling through `samples` in order.
    pub fn run(&mut self, samples: &[Sample], steps: usize, mut on_step: impl FnMut(&StepReport)) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Dataset("no training samples".into()));
        }
        for _ in 0..steps {
            let i = (self.step as usize) % samples.len();
            let r = self.train_step(&samples[i])?;
            on_step(&r);
        }
        Ok(())
    }
}

impl Trainer<f32> {
    /// Continues from `ckpt`, optimizer state and step count included.
    pub fn resume(ckpt: &Checkpoint, cfg: PipelineConfig) -> Result<Self> {
        let store = ckpt.to_store(&cfg.model, false)?;
        let mut t = Self::new(store, cfg)?;
        if let Some(opt) = ckpt.restore_optimizer(&t.store)? {
            t.opt = opt;
        }
        t.step = ckpt.step;
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Samples averaged per update.
    pub batch: usize,
    pub seed: u64,
    /// Cycle samples through one-frame, repeated-frame and
    /// earlier-plus-current-frame layouts in both orderings instead of the
    /// one-frame layout alone.
    pub multi_image: bool,
    /// Linear warmup length in updates; cosine decay to a tenth of `lr`
    /// follows.
    pub warmup: usize,
}

impl PretrainConfig {
    /// Learning rate of update `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = ((step + 1) as f64 / self.warmup.max(1) as f64).min(1.0);
        let progress = step as f64 / self.steps.max(1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * warm * (0.1 + 0.9 * cosine)
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 2e-3,
            batch: 4,
            seed: 0,
            multi_image: true,
            warmup: 100,
        }
    }
}

/// Image arrangement of one pretraining sample. Labels always describe the
/// last image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frames {
    Single,
    /// The current frame twice.
    Repeated,
    /// An unrelated earlier frame, then the current one.
    Earlier,
}

/// Frames and ordering of the `i`-th pretraining sample.
pub fn pretrain_frames(i: usize, multi_image: bool) -> (Frames, Ordering) {
    if !multi_image {
        return (Frames::Single, Ordering::ImageFirst);
    }
    let frames = [Frames::Single, Frames::Repeated, Frames::Earlier][i % 3];
    let ordering = [Ordering::ImageFirst, Ordering::PromptFirst][(i / 3) % 2];
    (frames, ordering)
}

/// Loss of one backbone pretraining sample; `earlier` supplies the first
/// image of [`Frames::Earlier`].
pub fn pretrain_loss<T: Scalar>(
    vlm: &Vlm,
    ps: &ParamStore<T>,
    g: &mut Graph<T>,
    sample: &Sample,
    earlier: &ImageGrid,
    frames: Frames,
    order: Ordering,
) -> Result<Var> {
    let enc = &vlm.encoder;
    let encode = |g: &mut Graph<T>, img: &ImageGrid| -> Result<Var> {
        let pe = enc.embed_patches(ps, g, img)?;
        let f = enc.encode(ps, g, &pe, None)?;
        Ok(enc.merge_patches(ps, g, f)?.values)
    };
    let current = encode(g, &sample.image)?;
    let t = g.shape(current)[0];
    let (layout, images) = match frames {
        Frames::Single => (SequenceLayout::single(order, t, &sample.query, &sample.labels), vec![current]),
        Frames::Repeated => (
            SequenceLayout::pass2(order, t, &sample.query, &sample.labels, true),
            vec![current, current],
        ),
        Frames::Earlier => {
            let first = encode(g, earlier)?;
            (
                SequenceLayout::pass2(order, t, &sample.query, &sample.labels, true),
                vec![first, current],
            )
        }
    };
    let h = vlm.lm.hidden(ps, g, &layout, &images, LoraMode::Disabled)?;
    let (start, targets) = layout.targets()?;
    let logits = vlm.lm.logits(ps, g, h, start, targets.len())?;
    let targets: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
    g.softmax_ce(logits, &targets, &vec![true; targets.len()])
}

/// Backbone `pretrain` starts from.
pub fn pretrain_init<T: Scalar>(model: &ModelConfig, pc: &PretrainConfig) -> Result<ParamStore<T>> {
    init_backbone(model, &SeedStream::new(pc.seed).child("backbone"))
}

/// Mean one-image loss over `samples`, no dropout.
pub fn pretrain_eval_loss<T: Scalar>(model: &ModelConfig, ps: &ParamStore<T>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Dataset("no held-out samples".into()));
    }
    let vlm = Vlm::attach(ps, model)?;
    let mut total = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let loss = pretrain_loss(&vlm, ps, &mut g, s, &s.image, Frames::Single, Ordering::ImageFirst)?;
        total += g.item(loss).as_f64();
    }
    Ok(total / samples.len() as f64)
}

/// Joint training of encoder, projector and LM, without the feedback path.
/// Returns the backbone and the per-update mean training loss.
pub fn pretrain<T: Scalar>(model: &ModelConfig, samples: &[Sample], pc: &PretrainConfig) -> Result<(ParamStore<T>, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Dataset("no pretraining samples".into()));
    }
    if pc.batch == 0 {
        return Err(Error::Config("pretraining batch must be positive".into()));
    }
    let mut store: ParamStore<T> = pretrain_init(model, pc)?;
    store.set_trainable(|g| g.is_backbone());
    let vlm = Vlm::attach(&store, model)?;
    let mut opt = AdamW::new(AdamWConfig::with_lr(pc.lr));
    let mut losses = Vec::with_capacity(pc.steps);
    let scale = T::of(1.0 / pc.batch as f64);
    let n = samples.len();
    let mut cursor = 0;
    for step in 0..pc.steps {
        let mut total = 0.0;
        for _ in 0..pc.batch {
            let s = &samples[cursor % n];
            let earlier = &samples[(cursor + n - 1) % n].image;
            let (frames, order) = pretrain_frames(cursor, pc.multi_image);
            cursor += 1;
            let mut g = Graph::new();
            let loss = pretrain_loss(&vlm, &store, &mut g, s, earlier, frames, order)?;
            let l = g.item(loss).as_f64();
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    step: step as u64,
                    diagnostics: "backbone pretraining diverged".into(),
                });
            }
            total += l;
            let loss = g.scale(loss, scale);
            store.accumulate_grads(&g.backward(loss)?);
        }
        opt.config.lr = pc.lr_at(step);
        store.apply_adamw(&mut opt)?;
        losses.push(total / pc.batch as f64);
    }
    store.set_trainable(|_| false);
    Ok((store, losses))
}
