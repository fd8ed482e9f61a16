//! Graph construction for one sample.
//!
//! Two-pass variants: encode the image, run the LM over
//! `[IMG][<img_sep>][query]` (LoRA on when present), take the final-norm
//! hidden rows of the image span as the hint, map it through the reasoner
//! and unmerger to a patch-embedding delta, re-encode `patches + delta`, and
//! run the base LM over the prediction layout. The loss is taken from that
//! last pass only.

use rand::Rng;

use crate::datasets::Sample;
use crate::error::{contract, Result};
use crate::lm::{LanguageModel, LoraMode, SequenceLayout};
use crate::model::Vlm;
use crate::numerics::{Graph, Scalar, Var};
use crate::params::ParamStore;
use crate::reasoner::ReasonerTrace;

use super::{PipelineConfig, Variant};

/// Everything up to (not including) the prediction pass.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// Image token blocks for the prediction layout's spans, in order.
    pub images: Vec<Var>,
    pub pass1_layout: Option<SequenceLayout>,
    pub pass1_features: Option<Var>,
    pub hint: Option<Var>,
    /// Reasoner output fed to the unmerger.
    pub reasoned: Option<Var>,
    pub delta: Option<Var>,
    pub pass2_features: Option<Var>,
    pub trace: Option<ReasonerTrace>,
}

/// Layout of the prediction pass for `variant`.
pub fn prediction_layout(cfg: &PipelineConfig, t: usize, query: &[u32], labels: &[u32]) -> SequenceLayout {
    let order = cfg.ordering();
    match cfg.variant {
        Variant::PlainBaseline => SequenceLayout::single(order, t, query, labels),
        Variant::DuplicateImageBaseline => SequenceLayout::pass2(order, t, query, labels, true),
        v => SequenceLayout::pass2(order, t, query, labels, v.keeps_original()),
    }
}

pub fn prepare<T: Scalar>(
    vlm: &Vlm,
    ps: &ParamStore<T>,
    g: &mut Graph<T>,
    sample: &Sample,
    cfg: &PipelineConfig,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Prepared> {
    let enc = &vlm.encoder;
    let pe = enc.embed_patches(ps, g, &sample.image)?;
    let features = enc.encode(ps, g, &pe, None)?;
    let tokens = enc.merge_patches(ps, g, features)?;
    let mut out = Prepared {
        images: Vec::new(),
        pass1_layout: None,
        pass1_features: None,
        hint: None,
        reasoned: None,
        delta: None,
        pass2_features: None,
        trace: None,
    };
    match cfg.variant {
        Variant::PlainBaseline => out.images = vec![tokens.values],
        Variant::DuplicateImageBaseline => out.images = vec![tokens.values, tokens.values],
        variant => {
            let reasoner = vlm
                .reasoner
                .as_ref()
                .ok_or_else(|| contract("two-pass variant without reasoner parameters"))?;
            let layout1 = SequenceLayout::pass1(cfg.ordering(), tokens.num_tokens, &sample.query);
            let lora = if cfg.uses_lora() && vlm.lm.has_lora() {
                LoraMode::Enabled
            } else {
                LoraMode::Disabled
            };
            let h1 = vlm.lm.hidden(ps, g, &layout1, &[tokens.values], lora)?;
            let z = LanguageModel::extract_hint(g, h1, &layout1)?;
            let (r, trace) = reasoner.reason(ps, g, z, variant.reasoner_mode(), training, rng)?;
            let delta = reasoner.unmerge(ps, g, r, pe.num_patches)?;
            let features2 = enc.encode(ps, g, &pe, Some(delta))?;
            let tokens2 = enc.merge_patches(ps, g, features2)?;
            out.images = if variant.keeps_original() {
                vec![tokens.values, tokens2.values]
            } else {
                vec![tokens2.values]
            };
            out.pass1_layout = Some(layout1);
            out.pass1_features = Some(features);
            out.hint = Some(z);
            out.reasoned = Some(r);
            out.delta = Some(delta);
            out.pass2_features = Some(features2);
            out.trace = Some(trace);
        }
    }
    Ok(out)
}

/// The prediction pass. It has no adapter switch: this pass always runs
/// the base LM.
pub fn prediction_hidden<T: Scalar>(
    vlm: &Vlm,
    ps: &ParamStore<T>,
    g: &mut Graph<T>,
    layout: &SequenceLayout,
    images: &[Var],
) -> Result<Var> {
    vlm.lm.hidden(ps, g, layout, images, LoraMode::Disabled)
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub loss: Var,
    pub layout: SequenceLayout,
    pub prepared: Prepared,
}

/// Full training graph for one sample: mean cross-entropy over the answer
/// tokens and the closing `<eos>`.
pub fn forward<T: Scalar>(
    vlm: &Vlm,
    ps: &ParamStore<T>,
    g: &mut Graph<T>,
    sample: &Sample,
    cfg: &PipelineConfig,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Forward> {
    if sample.labels.is_empty() {
        return Err(contract("training sample without labels"));
    }
    let prepared = prepare(vlm, ps, g, sample, cfg, training, rng)?;
    let t = g.shape(prepared.images[0])[0];
    let layout = prediction_layout(cfg, t, &sample.query, &sample.labels);
    let h = prediction_hidden(vlm, ps, g, &layout, &prepared.images)?;
    let (start, targets) = layout.targets()?;
    let logits = vlm.lm.logits(ps, g, h, start, targets.len())?;
    let targets: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
    let mask = vec![true; targets.len()];
    let loss = g.softmax_ce(logits, &targets, &mask)?;
    Ok(Forward { loss, layout, prepared })
}

/// Answer tokens and first-pass diagnostics from [`infer`].
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub tokens: Vec<u32>,
    pub text: String,
    pub trace: Option<ReasonerTrace>,
    /// RMS of the patch-embedding delta.
    pub delta_rms: Option<f64>,
    pub layout: SequenceLayout,
}

/// Dropout-free two-pass (or baseline) prediction with greedy decoding.
pub fn infer<T: Scalar>(vlm: &Vlm, ps: &ParamStore<T>, sample: &Sample, cfg: &PipelineConfig) -> Result<Inference> {
    let mut g = Graph::new();
    // Inference never draws randomness; the stream only satisfies the signature.
    let mut rng = crate::rng::SeedStream::new(0).rng();
    let prepared = prepare(vlm, ps, &mut g, sample, cfg, false, &mut rng)?;
    let t = g.shape(prepared.images[0])[0];
    let layout = prediction_layout(cfg, t, &sample.query, &[]);
    let images: Vec<_> = prepared.images.iter().map(|&v| g.tensor(v)).collect();
    let tokens = vlm
        .lm
        .greedy_decode(ps, &layout, &images, LoraMode::Disabled, cfg.max_answer_tokens)?;
    let delta_rms = prepared.delta.map(|d| {
        let v = g.value(d);
        (v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    });
    Ok(Inference {
        text: crate::lm::Vocab::standard().decode_answer(&tokens),
        tokens,
        trace: prepared.trace,
        delta_rms,
        layout,
    })
}
