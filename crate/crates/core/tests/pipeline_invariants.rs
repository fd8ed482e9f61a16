use lvlm_core::datasets::{gen_sample, gen_samples, Sample, TaskMix, TaskTag};
use lvlm_core::lm::{LanguageModel, LoraMode, SequenceLayout};
use lvlm_core::model::{init_backbone, Vlm};
use lvlm_core::numerics::{Graph, Tensor, Var};
use lvlm_core::params::{ParamGroup, ParamStore};
use lvlm_core::pipeline::checkpoint::Checkpoint;
use lvlm_core::pipeline::forward::{forward, prediction_hidden, prediction_layout, prepare};
use lvlm_core::pipeline::gradcheck::gradcheck_store;
use lvlm_core::pipeline::{PipelineConfig, Trainer, Variant};
use lvlm_core::rng::SeedStream;
use lvlm_core::ModelConfig;

fn micro_sample(seed: u64) -> Sample {
    let cfg = ModelConfig::micro();
    gen_sample(&SeedStream::new(seed), TaskTag::Vqa, cfg.image_height).unwrap()
}

fn generic_store(seed: u64) -> ParamStore<f64> {
    gradcheck_store(&ModelConfig::micro(), &SeedStream::new(seed)).unwrap()
}

fn cfg(variant: Variant) -> PipelineConfig {
    PipelineConfig::new(ModelConfig::micro(), variant, 3)
}

fn param_grad_norms(store: &ParamStore<f64>, g: &Graph<f64>, loss: Var) -> Vec<(String, ParamGroup, Option<f64>)> {
    let grads = g.backward(loss).unwrap();
    store
        .ids()
        .map(|id| {
            let e = store.entry(id);
            let norm = store
                .grad(&grads, id)
                .map(|gr| gr.iter().map(|x| x * x).sum::<f64>().sqrt());
            (e.name.clone(), e.group, norm)
        })
        .collect()
}

fn backbone_bits(store: &ParamStore<f32>) -> Vec<(String, Vec<u32>)> {
    store
        .entries()
        .iter()
        .filter(|e| e.group.is_backbone())
        .map(|e| (e.name.clone(), e.tensor.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

#[test]
fn gradients_reach_every_feedback_tensor() {
    let store = generic_store(1);
    let vlm = Vlm::attach(&store, &store_cfg()).unwrap();
    let c = cfg(Variant::FullMethod);
    let mut g = Graph::new();
    let mut rng = SeedStream::new(0).rng();
    let f = forward(&vlm, &store, &mut g, &micro_sample(2), &c, false, &mut rng).unwrap();
    for (name, group, norm) in param_grad_norms(&store, &g, f.loss) {
        if group.is_backbone() {
            assert!(norm.is_none(), "frozen {name} received a gradient");
        } else {
            assert!(norm.unwrap_or(0.0) > 0.0, "{name} received no gradient");
        }
    }
}

fn store_cfg() -> ModelConfig {
    ModelConfig::micro()
}

/// Rebuilding the prediction pass by hand reproduces the training loss, and
/// a zero-weighted loss leaves every gradient at zero.
#[test]
fn loss_comes_only_from_the_prediction_pass() {
    let store = generic_store(4);
    let vlm = Vlm::attach(&store, &store_cfg()).unwrap();
    let c = cfg(Variant::FullMethod);
    let sample = micro_sample(5);

    let mut g = Graph::new();
    let f = forward(&vlm, &store, &mut g, &sample, &c, false, &mut SeedStream::new(0).rng()).unwrap();

    let mut g2 = Graph::new();
    let p = prepare(&vlm, &store, &mut g2, &sample, &c, false, &mut SeedStream::new(0).rng()).unwrap();
    let t = g2.shape(p.images[0])[0];
    let layout = prediction_layout(&c, t, &sample.query, &sample.labels);
    let h = prediction_hidden(&vlm, &store, &mut g2, &layout, &p.images).unwrap();
    let (start, targets) = layout.targets().unwrap();
    let logits = vlm.lm.logits(&store, &mut g2, h, start, targets.len()).unwrap();
    let targets: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
    let ce = g2.softmax_ce(logits, &targets, &vec![true; targets.len()]).unwrap();
    assert_eq!(g.item(f.loss).to_bits(), g2.item(ce).to_bits());

    let zeroed = g.scale(f.loss, 0.0);
    for (name, _, norm) in param_grad_norms(&store, &g, zeroed) {
        assert!(norm.unwrap_or(0.0) == 0.0, "{name} has gradient without a prediction loss");
    }
}

/// Cutting the graph at the delta removes every feedback gradient, LoRA's
/// included: the only route from the loss back to them is the re-encoding.
#[test]
fn feedback_gradients_flow_only_through_the_reencoding() {
    let store = generic_store(6);
    let mcfg = store_cfg();
    let vlm = Vlm::attach(&store, &mcfg).unwrap();
    let c = cfg(Variant::FullMethod);
    let sample = micro_sample(7);
    let mut g = Graph::<f64>::new();
    let mut rng = SeedStream::new(0).rng();
    let enc = &vlm.encoder;
    let pe = enc.embed_patches(&store, &mut g, &sample.image).unwrap();
    let feats = enc.encode(&store, &mut g, &pe, None).unwrap();
    let tokens = enc.merge_patches(&store, &mut g, feats).unwrap();
    let layout1 = SequenceLayout::pass1(c.ordering(), tokens.num_tokens, &sample.query);
    let h1 = vlm.lm.hidden(&store, &mut g, &layout1, &[tokens.values], LoraMode::Enabled).unwrap();
    let z = LanguageModel::extract_hint(&mut g, h1, &layout1).unwrap();
    let reasoner = vlm.reasoner.as_ref().unwrap();
    let (r, _) = reasoner.reason(&store, &mut g, z, Variant::FullMethod.reasoner_mode(), false, &mut rng).unwrap();
    let delta = reasoner.unmerge(&store, &mut g, r, pe.num_patches).unwrap();
    let cut = g.tensor(delta);
    let cut = g.constant(&cut);
    let feats2 = enc.encode(&store, &mut g, &pe, Some(cut)).unwrap();
    let tokens2 = enc.merge_patches(&store, &mut g, feats2).unwrap();
    let layout = prediction_layout(&c, tokens.num_tokens, &sample.query, &sample.labels);
    let h = prediction_hidden(&vlm, &store, &mut g, &layout, &[tokens.values, tokens2.values]).unwrap();
    let (start, targets) = layout.targets().unwrap();
    let logits = vlm.lm.logits(&store, &mut g, h, start, targets.len()).unwrap();
    let targets: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
    let loss = g.softmax_ce(logits, &targets, &vec![true; targets.len()]).unwrap();
    for (name, group, norm) in param_grad_norms(&store, &g, loss) {
        if !group.is_backbone() {
            assert!(norm.unwrap_or(0.0) == 0.0, "{name} reached without the delta path");
        }
    }
}

#[test]
fn adapters_change_the_hint_but_not_the_prediction_pass() {
    let with = generic_store(8);
    let mut without = with.clone();
    for id in without.ids_in(ParamGroup::Lora) {
        let n = without.get(id).numel();
        without.get_mut(id).data_mut().copy_from_slice(&vec![0.0; n]);
    }
    let c = cfg(Variant::FullMethod);
    let sample = micro_sample(9);
    let hint = |store: &ParamStore<f64>| {
        let vlm = Vlm::attach(store, &store_cfg()).unwrap();
        let mut g = Graph::new();
        let p = prepare(&vlm, store, &mut g, &sample, &c, false, &mut SeedStream::new(0).rng()).unwrap();
        (g.value(p.hint.unwrap()).to_vec(), p.images.iter().map(|&v| g.tensor(v)).collect::<Vec<_>>())
    };
    let (h_with, images) = hint(&with);
    let (h_without, _) = hint(&without);
    assert_ne!(h_with, h_without);

    let pass2 = |store: &ParamStore<f64>| {
        let vlm = Vlm::attach(store, &store_cfg()).unwrap();
        let mut g = Graph::new();
        let imgs: Vec<Var> = images.iter().map(|t| g.constant(t)).collect();
        let t = images[0].shape()[0];
        let layout = prediction_layout(&c, t, &sample.query, &sample.labels);
        let h = prediction_hidden(&vlm, store, &mut g, &layout, &imgs).unwrap();
        g.value(h).iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(pass2(&with), pass2(&without));
}

#[test]
fn disabled_adapters_match_a_model_without_adapters_after_training() {
    let mcfg = ModelConfig::micro();
    let backbone: ParamStore<f32> = init_backbone(&mcfg, &SeedStream::new(10)).unwrap();
    let train = gen_samples(&SeedStream::new(11), 4, TaskMix::VQA_ONLY, mcfg.image_height).unwrap();
    let mut t = Trainer::new(backbone.clone(), PipelineConfig { steps: 30, ..cfg(Variant::FullMethod) }).unwrap();
    t.run(&train, 30, |_| {}).unwrap();
    let lora_moved = t
        .store
        .ids_in(ParamGroup::Lora)
        .into_iter()
        .any(|id| t.store.get(id).data().iter().any(|&x| x != 0.0));
    assert!(lora_moved);

    let hidden = |store: &ParamStore<f32>, mode| {
        let vlm = Vlm::attach(store, &mcfg).unwrap();
        let mut g = Graph::new();
        let s = &train[0];
        let pe = vlm.encoder.embed_patches(store, &mut g, &s.image).unwrap();
        let f = vlm.encoder.encode(store, &mut g, &pe, None).unwrap();
        let tok = vlm.encoder.merge_patches(store, &mut g, f).unwrap();
        let layout = SequenceLayout::pass1(c_order(), tok.num_tokens, &s.query);
        let h = vlm.lm.hidden(store, &mut g, &layout, &[tok.values], mode).unwrap();
        g.value(h).iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(hidden(&t.store, LoraMode::Disabled), hidden(&backbone, LoraMode::Disabled));
    assert_ne!(hidden(&t.store, LoraMode::Enabled), hidden(&backbone, LoraMode::Disabled));
}

fn c_order() -> lvlm_core::lm::Ordering {
    cfg(Variant::FullMethod).ordering()
}

#[test]
fn backbone_is_bitwise_frozen_through_training() {
    let mcfg = ModelConfig::micro();
    let backbone: ParamStore<f32> = init_backbone(&mcfg, &SeedStream::new(12)).unwrap();
    let before = backbone_bits(&backbone);
    let train = gen_samples(&SeedStream::new(13), 6, TaskMix::VQA_ONLY, mcfg.image_height).unwrap();
    for v in Variant::ALL {
        let mut t = Trainer::new(backbone.clone(), PipelineConfig { steps: 25, ..cfg(v) }).unwrap();
        t.run(&train, 25, |_| {}).unwrap();
        assert!(backbone_bits(&t.store) == before, "{} moved the backbone", v.name());
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let mcfg = ModelConfig::micro();
    let backbone: ParamStore<f32> = init_backbone(&mcfg, &SeedStream::new(14)).unwrap();
    let train = gen_samples(&SeedStream::new(15), 5, TaskMix::VQA_ONLY, mcfg.image_height).unwrap();
    let run = || {
        let mut t = Trainer::new(backbone.clone(), PipelineConfig { steps: 20, ..cfg(Variant::FullMethod) }).unwrap();
        let mut losses = Vec::new();
        t.run(&train, 20, |r| losses.push(r.loss.to_bits())).unwrap();
        (Checkpoint::from_store(&t.store, &mcfg, t.step, Some(&t.opt)).to_bytes(), losses)
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_save_load_save_is_bitwise() {
    let mcfg = ModelConfig::micro();
    let backbone: ParamStore<f32> = init_backbone(&mcfg, &SeedStream::new(16)).unwrap();
    let train = gen_samples(&SeedStream::new(17), 3, TaskMix::VQA_ONLY, mcfg.image_height).unwrap();
    let mut t = Trainer::new(backbone, PipelineConfig { steps: 5, ..cfg(Variant::FullMethod) }).unwrap();
    t.run(&train, 5, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    Checkpoint::from_store(&t.store, &mcfg, t.step, Some(&t.opt)).save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let mcfg = ModelConfig::micro();
    let backbone: ParamStore<f32> = init_backbone(&mcfg, &SeedStream::new(20)).unwrap();
    let train = gen_samples(&SeedStream::new(21), 3, TaskMix::VQA_ONLY, mcfg.image_height).unwrap();
    let c = PipelineConfig { steps: 12, ..cfg(Variant::FullMethod) };
    let mut full = Trainer::new(backbone.clone(), c.clone()).unwrap();
    full.run(&train, 12, |_| {}).unwrap();

    let mut first = Trainer::new(backbone, c.clone()).unwrap();
    first.run(&train, 5, |_| {}).unwrap();
    let ckpt = Checkpoint::from_bytes(&Checkpoint::from_store(&first.store, &mcfg, first.step, Some(&first.opt)).to_bytes());
    let mut second = Trainer::resume(&ckpt.unwrap(), c).unwrap();
    second.run(&train, 7, |_| {}).unwrap();
    assert_eq!(
        Checkpoint::from_store(&full.store, &mcfg, full.step, Some(&full.opt)).to_bytes(),
        Checkpoint::from_store(&second.store, &mcfg, second.step, Some(&second.opt)).to_bytes()
    );
}

#[test]
fn zero_output_feedback_reencodes_the_original_image() {
    let mut store = generic_store(18);
    lvlm_core::reasoner::zero_output(&mut store).unwrap();
    let vlm = Vlm::attach(&store, &store_cfg()).unwrap();
    let mut g = Graph::new();
    let p = prepare(&vlm, &store, &mut g, &micro_sample(19), &cfg(Variant::FullMethod), true, &mut SeedStream::new(1).rng())
        .unwrap();
    assert!(g.value(p.delta.unwrap()).iter().all(|&x| x == 0.0));
    let a: Tensor<f64> = g.tensor(p.images[0]);
    let b: Tensor<f64> = g.tensor(p.images[1]);
    assert!(a.bits_eq(&b));
}
