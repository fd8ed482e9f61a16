//! Navigation, multiple-choice and description benchmarks.

use serde::{Deserialize, Serialize};

use crate::datasets::{build_mcq, describe_sample, gen_captions, mcq_sample, overlap_f1, score_mcq, Caption, McqItem, Sample, TaskTag};
use crate::error::{Error, Result};
use crate::lm::Vocab;
use crate::model::Vlm;
use crate::navsim::{run_episode, sample_episode, EpisodeResult, NavState, NavWorld, DEFAULT_MAX_STEPS};
use crate::parallel::{self, Parallelism};
use crate::params::ParamStore;
use crate::rng::SeedStream;

use super::forward::infer;
use super::metrics::MetricRecord;
use super::PipelineConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Navigate,
    Mcq,
    Describe,
}

impl Benchmark {
    pub const ALL: [Benchmark; 3] = [Benchmark::Navigate, Benchmark::Mcq, Benchmark::Describe];

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Navigate => "navigate",
            Benchmark::Mcq => "mcq",
            Benchmark::Describe => "describe",
        }
    }

    /// Name of the aggregate this benchmark reports.
    pub fn metric(self) -> &'static str {
        match self {
            Benchmark::Navigate => "mean_final_distance",
            Benchmark::Mcq => "accuracy",
            Benchmark::Describe => "overlap_f1",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown benchmark {name:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Starting distance of each episode; drawn from `[2, 8]` when unset.
    pub start_distance: Option<f64>,
    pub max_steps: usize,
    /// Annotated events for the caption benchmarks (two items each).
    pub events: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 8,
            start_distance: None,
            max_steps: DEFAULT_MAX_STEPS,
            events: 188,
        }
    }
}

/// Episodes, captions and MCQ items for one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalData {
    pub episodes: Vec<(NavState, NavWorld)>,
    pub captions: Vec<Caption>,
    pub mcq: Vec<McqItem>,
}

impl EvalData {
    pub fn generate(seeds: &SeedStream, cfg: &EvalConfig) -> Result<Self> {
        let episodes = (0..cfg.episodes)
            .map(|i| sample_episode(&seeds.child("episodes").index(i as u64), cfg.start_distance, cfg.max_steps))
            .collect();
        let captions = gen_captions(cfg.events, &seeds.child("captions"));
        let mcq = build_mcq(&captions, &seeds.child("mcq"))?;
        Ok(Self {
            episodes,
            captions,
            mcq,
        })
    }
}

/// Model as a navigation policy: render, decode greedily, return the raw text.
pub fn model_episode(
    vlm: &Vlm,
    ps: &ParamStore<f32>,
    cfg: &PipelineConfig,
    start: NavState,
    world: &NavWorld,
) -> Result<EpisodeResult> {
    let vocab = Vocab::standard();
    run_episode(start, world, cfg.model.image_height, |obs| {
        let sample = Sample {
            image: obs.image.clone(),
            query: vocab.encode(&obs.instruction),
            labels: Vec::new(),
            task: TaskTag::Navigate,
            correct: None,
        };
        Ok(infer(vlm, ps, &sample, cfg)?.text)
    })
}

/// Every episode of `data`, in order.
pub fn navigate_episodes(
    vlm: &Vlm,
    ps: &ParamStore<f32>,
    cfg: &PipelineConfig,
    data: &EvalData,
    mode: Parallelism,
) -> Result<Vec<EpisodeResult>> {
    if data.episodes.is_empty() {
        return Err(Error::Dataset("no navigation episodes".into()));
    }
    parallel::map(mode, &data.episodes, |_, (s, w)| model_episode(vlm, ps, cfg, *s, w))
        .into_iter()
        .collect()
}

pub fn mean_final_distance(episodes: &[EpisodeResult]) -> f64 {
    episodes.iter().map(|e| e.final_distance).sum::<f64>() / episodes.len().max(1) as f64
}

/// Mean final distance over the episodes.
pub fn eval_navigate(vlm: &Vlm, ps: &ParamStore<f32>, cfg: &PipelineConfig, data: &EvalData, mode: Parallelism) -> Result<f64> {
    Ok(mean_final_distance(&navigate_episodes(vlm, ps, cfg, data, mode)?))
}

/// Share of items whose decoded option letter is correct.
pub fn eval_mcq(vlm: &Vlm, ps: &ParamStore<f32>, cfg: &PipelineConfig, data: &EvalData, mode: Parallelism) -> Result<f64> {
    if data.mcq.is_empty() {
        return Err(Error::Dataset("no multiple-choice items".into()));
    }
    let size = cfg.model.image_height;
    let hits = parallel::map(mode, &data.mcq, |_, item| -> Result<bool> {
        let s = mcq_sample(item, &data.captions, size)?;
        Ok(score_mcq(&infer(vlm, ps, &s, cfg)?.text, item))
    });
    let mut correct = 0;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / data.mcq.len() as f64)
}

/// Mean token-overlap F1 of generated descriptions.
pub fn eval_describe(vlm: &Vlm, ps: &ParamStore<f32>, cfg: &PipelineConfig, data: &EvalData, mode: Parallelism) -> Result<f64> {
    if data.captions.is_empty() {
        return Err(Error::Dataset("no captions".into()));
    }
    let size = cfg.model.image_height;
    let scores = parallel::map(mode, &data.captions, |_, c| -> Result<f64> {
        let s = describe_sample(c, &data.captions, size)?;
        Ok(overlap_f1(&infer(vlm, ps, &s, cfg)?.text, &c.text))
    });
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / data.captions.len() as f64)
}

pub fn eval_benchmark(
    b: Benchmark,
    vlm: &Vlm,
    ps: &ParamStore<f32>,
    cfg: &PipelineConfig,
    data: &EvalData,
    mode: Parallelism,
) -> Result<f64> {
    match b {
        Benchmark::Navigate => eval_navigate(vlm, ps, cfg, data, mode),
        Benchmark::Mcq => eval_mcq(vlm, ps, cfg, data, mode),
        Benchmark::Describe => eval_describe(vlm, ps, cfg, data, mode),
    }
}

/// One record per benchmark; a failing benchmark yields `Err` in its slot
/// without stopping the others.
pub fn evaluate(
    vlm: &Vlm,
    ps: &ParamStore<f32>,
    cfg: &PipelineConfig,
    data: &EvalData,
    benchmarks: &[Benchmark],
    step: u64,
    mode: Parallelism,
) -> Vec<(Benchmark, Result<MetricRecord>)> {
    benchmarks
        .iter()
        .map(|&b| {
            let r = eval_benchmark(b, vlm, ps, cfg, data, mode)
                .map(|v| MetricRecord::new(cfg.variant.name(), b.name(), b.metric(), v, step, cfg.seed));
            (b, r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_names() {
        for b in Benchmark::ALL {
            assert_eq!(Benchmark::from_name(b.name()).unwrap(), b);
        }
        assert_eq!(Benchmark::Describe.metric(), "overlap_f1");
    }

    #[test]
    fn eval_data_sizes() {
        let d = EvalData::generate(&SeedStream::new(4), &EvalConfig::default()).unwrap();
        assert_eq!(d.mcq.len(), 376);
        assert_eq!(d.captions.len(), 376);
        assert_eq!(d.episodes.len(), 8);
    }
}
