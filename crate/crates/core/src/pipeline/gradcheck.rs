//! Finite-difference check of the whole two-pass loss with respect to every
//! feedback-path parameter.

use crate::config::ModelConfig;
use crate::datasets::{gen_sample, TaskTag};
use crate::error::Result;
use crate::model::{init_backbone, init_feedback, Vlm};
use crate::numerics::{central_differences, rel_error};
use crate::numerics::{Graph, Scalar, Tensor};
use crate::params::ParamStore;
use crate::rng::SeedStream;

use super::forward::forward;
use super::{PipelineConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
    /// `(analytic, numeric)` at the worst coordinate.
    pub worst: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FullGradReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub loss: f64,
}

impl FullGradReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Store for gradient checks. Every matrix, backbone included, is drawn
/// from `N(0, 1/fan_in)` so that each path carries an O(1) signal; this
/// includes the unmerger and LoRA up-projections that training starts at
/// zero.
pub fn gradcheck_store<T: Scalar>(cfg: &ModelConfig, seeds: &SeedStream) -> Result<ParamStore<T>> {
    let mut store: ParamStore<T> = init_backbone(cfg, &seeds.child("backbone"))?;
    init_feedback(&mut store, cfg, &seeds.child("feedback"), true)?;
    crate::lm::set_trainable_partition(&mut store);
    let mut rng = seeds.child("randomize").rng();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        if shape.len() != 2 {
            continue;
        }
        let t = Tensor::<T>::randn(&shape, 1.0 / (shape[1] as f64).sqrt(), &mut rng);
        store.get_mut(id).data_mut().copy_from_slice(t.data());
    }
    Ok(store)
}

/// Central-difference step of [`full_graph_check`].
pub const FD_STEP: f64 = 3e-5;
/// Relative-error denominators are floored at this fraction of the tensor's
/// largest analytic gradient.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Compares the analytic gradient of the training loss, computed in `T`
/// (dropout active, mask fixed by the seed), with central differences of the
/// same loss evaluated in `f64` at the `T`-rounded parameters.
pub fn full_graph_check<T: Scalar>(seed: u64, eps: f64, scale_floor: f64) -> Result<FullGradReport> {
    let model = ModelConfig::micro();
    let seeds = SeedStream::new(seed);
    let store: ParamStore<T> = gradcheck_store::<f64>(&model, &seeds)?.cast();
    let reference: ParamStore<f64> = store.cast();
    let vlm = Vlm::attach(&store, &model)?;
    let cfg = PipelineConfig::new(model.clone(), Variant::FullMethod, seed);
    let sample = gen_sample(&seeds.child("sample"), TaskTag::Vqa, model.image_height)?;
    let dropout = seeds.child("dropout");

    let mut g = Graph::new();
    let f = forward(&vlm, &store, &mut g, &sample, &cfg, true, &mut dropout.rng())?;
    let loss = g.item(f.loss).as_f64();
    let grads = g.backward(f.loss)?;

    let loss_of = |ps: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let f = forward(&vlm, ps, &mut g, &sample, &cfg, true, &mut dropout.rng())?;
        Ok(g.item(f.loss))
    };
    let mut tensors = Vec::new();
    let mut scratch = reference.clone();
    for id in store.trainable_ids() {
        let numel = store.get(id).numel();
        let analytic: Vec<f64> = match store.grad(&grads, id) {
            Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; numel],
        };
        let mut values = reference.get(id).data().to_vec();
        let numeric = central_differences(&mut values, eps, |v| {
            scratch.get_mut(id).data_mut().copy_from_slice(v);
            loss_of(&scratch)
        })?;
        scratch.get_mut(id).data_mut().copy_from_slice(reference.get(id).data());
        let max_abs_grad = analytic.iter().fold(0.0, |m: f64, a| m.max(a.abs()));
        let floor = scale_floor * max_abs_grad;
        let errors: Vec<f64> = analytic.iter().zip(&numeric).map(|(&a, &n)| rel_error(a, n, floor)).collect();
        let max_rel_error = errors.iter().copied().fold(0.0, nan_max);
        let k = errors.iter().position(|&e| e == max_rel_error || e.is_nan()).unwrap_or(0);
        tensors.push(TensorCheck {
            name: store.entry(id).name.clone(),
            numel,
            max_rel_error,
            max_abs_grad,
            worst: (analytic[k], numeric[k]),
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, nan_max);
    Ok(FullGradReport {
        tensors,
        max_rel_error,
        loss,
    })
}

fn nan_max(m: f64, e: f64) -> f64 {
    if m.is_nan() || e.is_nan() {
        f64::NAN
    } else {
        m.max(e)
    }
}
