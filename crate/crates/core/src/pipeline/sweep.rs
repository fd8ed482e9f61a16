//! Learning-rate sweep and top-2 interpolation merge.

use crate::datasets::Sample;
use crate::error::{Error, Result};
use crate::parallel::{self, Parallelism};
use crate::params::ParamStore;
use crate::rng::SeedStream;

use super::checkpoint::{merge_checkpoints, Checkpoint};
use super::train::Trainer;
use super::PipelineConfig;

pub const SWEEP_ARMS: usize = 7;

/// `10^(-2 - i/2)` for `i` in `0..7`, so 1e-2 down to 1e-5.
pub fn sweep_learning_rates() -> [f64; SWEEP_ARMS] {
    std::array::from_fn(|i| {
        if i % 2 == 0 {
            // Whole powers are spelled out so the endpoints are exact.
            [1e-2, 1e-3, 1e-4, 1e-5][i / 2]
        } else {
            10f64.powf(-2.0 - 0.5 * i as f64)
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArmStatus {
    Completed,
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub index: usize,
    pub lr: f64,
    pub seed: u64,
    pub status: ArmStatus,
    /// `(step, loss)` for every update.
    pub losses: Vec<(u64, f64)>,
    /// Mean dropout-free loss on the validation split; lower is better.
    pub validation_loss: Option<f64>,
    pub store: Option<ParamStore<f32>>,
}

impl ArmResult {
    pub fn completed(&self) -> bool {
        self.status == ArmStatus::Completed
    }
}

/// Seed of arm `i`, derived from the base seed.
pub fn arm_seed(base: u64, i: usize) -> u64 {
    SeedStream::new(base).child("sweep-arm").index(i as u64).key()
}

/// Trains one arm per sweep learning rate from the same backbone. A diverged
/// arm is reported as failed and the others still run.
pub fn lr_sweep(
    backbone: &ParamStore<f32>,
    base: &PipelineConfig,
    train: &[Sample],
    validation: &[Sample],
    mode: Parallelism,
) -> Vec<ArmResult> {
    let lrs = sweep_learning_rates();
    parallel::map(mode, &lrs, |i, &lr| {
        let cfg = PipelineConfig {
            lr,
            seed: arm_seed(base.seed, i),
            ..base.clone()
        };
        let mut result = ArmResult {
            index: i,
            lr,
            seed: cfg.seed,
            status: ArmStatus::Completed,
            losses: Vec::new(),
            validation_loss: None,
            store: None,
        };
        let run = (|| {
            let mut t = Trainer::new(backbone.clone(), cfg.clone())?;
            t.run(train, cfg.steps, |r| result.losses.push((r.step, r.loss)))?;
            let v = t.mean_eval_loss(validation)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step: t.step,
                    diagnostics: "validation loss is not finite".into(),
                });
            }
            Ok((v, t.store))
        })();
        match run {
            Ok((v, store)) => {
                result.validation_loss = Some(v);
                result.store = Some(store);
            }
            Err(e) => result.status = ArmStatus::Failed(e.to_string()),
        }
        result
    })
}

/// Indices of the two completed arms with the lowest validation loss, best
/// first; ties go to the lower index.
pub fn top_two(results: &[ArmResult]) -> Result<Vec<usize>> {
    let mut ok: Vec<(f64, usize)> = results
        .iter()
        .filter(|r| r.completed())
        .filter_map(|r| r.validation_loss.map(|v| (v, r.index)))
        .collect();
    if ok.is_empty() {
        return Err(Error::Merge("every sweep arm failed".into()));
    }
    ok.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ok.iter().take(2).map(|&(_, i)| i).collect())
}

/// Equal-weight merge of the two best arms (a single survivor is returned
/// unchanged).
pub fn merge_top_two(results: &[ArmResult], cfg: &PipelineConfig) -> Result<(Checkpoint, Vec<usize>)> {
    let best = top_two(results)?;
    let ckpt = |i: usize| -> Result<Checkpoint> {
        let r = results
            .iter()
            .find(|r| r.index == i)
            .ok_or_else(|| Error::Merge(format!("no arm {i}")))?;
        let store = r.store.as_ref().ok_or_else(|| Error::Merge(format!("arm {i} kept no parameters")))?;
        Ok(Checkpoint::from_store(store, &cfg.model, r.losses.len() as u64, None))
    };
    let a = ckpt(best[0])?;
    let merged = match best.get(1) {
        Some(&j) => merge_checkpoints(&a, &ckpt(j)?, 0.5)?,
        None => a,
    };
    Ok((merged, best))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_log_spaced_rates() {
        let lrs = sweep_learning_rates();
        assert_eq!(lrs.len(), 7);
        assert_eq!(lrs[0], 1e-2);
        assert_eq!(lrs[6], 1e-5);
        for w in lrs.windows(2) {
            assert!((w[1] / w[0] - 10f64.powf(-0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn top_two_skips_failed_arms() {
        let arm = |index, v: Option<f64>| ArmResult {
            index,
            lr: 0.0,
            seed: 0,
            status: if v.is_some() { ArmStatus::Completed } else { ArmStatus::Failed("nan".into()) },
            losses: vec![],
            validation_loss: v,
            store: None,
        };
        let rs = vec![arm(0, None), arm(1, Some(0.5)), arm(2, Some(0.2)), arm(3, Some(0.5))];
        assert_eq!(top_two(&rs).unwrap(), vec![2, 1]);
        assert!(top_two(&[arm(0, None)]).is_err());
    }
}
