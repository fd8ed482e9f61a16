//! Synthetic training and evaluation data.

pub mod io;
pub mod mcq;
pub mod scene;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Vocab;
use crate::navsim::{oracle_action, render_observation, sample_episode, NavState, NavWorld};
use crate::rng::SeedStream;
use crate::vision::ImageGrid;

pub use mcq::{build_mcq, gen_captions, score_mcq, Caption, McqItem, Position, TargetPerson};
pub use scene::{gen_scene, GridSpec, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskTag {
    Vqa,
    Mcq,
    Describe,
    Navigate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageGrid,
    pub query: Vec<u32>,
    pub labels: Vec<u32>,
    pub task: TaskTag,
    /// Correct option for MCQ samples.
    pub correct: Option<usize>,
}

impl Sample {
    pub fn from_text(image: ImageGrid, query: &str, labels: &str, task: TaskTag, correct: Option<usize>) -> Result<Self> {
        let v = Vocab::standard();
        for text in [query, labels] {
            if !v.contains_all(text) {
                return Err(Error::Dataset(format!("text outside vocabulary: {text:?}")));
            }
        }
        Ok(Self {
            image,
            query: v.encode(query),
            labels: v.encode(labels),
            task,
            correct,
        })
    }
}

/// Token-bag F1 between two texts after lowercasing. This is a lexical
/// proxy, reported as `overlap_f1`.
pub fn overlap_f1(generated: &str, reference: &str) -> f64 {
    let bag = |s: &str| -> Vec<String> { s.split_whitespace().map(str::to_lowercase).collect() };
    let (g, mut r) = (bag(generated), bag(reference));
    if g.is_empty() || r.is_empty() {
        return 0.0;
    }
    let (ng, nr) = (g.len() as f64, r.len() as f64);
    let mut common = 0usize;
    for t in &g {
        if let Some(i) = r.iter().position(|x| x == t) {
            r.swap_remove(i);
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let (p, rc) = (common as f64 / ng, common as f64 / nr);
    2.0 * p * rc / (p + rc)
}

pub fn vqa_sample(scene: &Scene) -> Result<Sample> {
    Sample::from_text(scene.image.clone(), &scene.question, &scene.answer, TaskTag::Vqa, None)
}

/// The frame for the event a caption belongs to.
pub fn event_frame(captions: &[Caption], event_id: usize, size: usize) -> Result<ImageGrid> {
    let of = |p: Position| {
        captions
            .iter()
            .find(|c| c.event_id == event_id && c.position == p)
            .map(|c| c.text.as_str())
    };
    match (of(Position::Left), of(Position::Right)) {
        (Some(l), Some(r)) => Ok(mcq::render_event(l, r, size)),
        _ => Err(Error::Dataset(format!("event {event_id} lacks a left and a right caption"))),
    }
}

pub fn mcq_sample(item: &McqItem, captions: &[Caption], size: usize) -> Result<Sample> {
    let c = captions
        .get(item.caption_id)
        .ok_or_else(|| Error::Dataset(format!("caption {} missing", item.caption_id)))?;
    let frame = event_frame(captions, c.event_id, size)?;
    Sample::from_text(frame, &item.prompt(), item.answer_letter(), TaskTag::Mcq, Some(item.correct))
}

pub fn describe_sample(caption: &Caption, captions: &[Caption], size: usize) -> Result<Sample> {
    let frame = event_frame(captions, caption.event_id, size)?;
    let query = format!("describe the {} person .", caption.position.word());
    Sample::from_text(frame, &query, &caption.text, TaskTag::Describe, None)
}

pub fn nav_sample(state: &NavState, world: &NavWorld, size: usize) -> Result<Sample> {
    let (image, instruction) = render_observation(state, world, size);
    Sample::from_text(image, &instruction, &oracle_action(state).to_json(), TaskTag::Navigate, None)
}

/// Share of each task in a generated mix, in quarters of the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMix {
    pub vqa: u32,
    pub mcq: u32,
    pub describe: u32,
    pub navigate: u32,
}

impl TaskMix {
    pub const VQA_ONLY: TaskMix = TaskMix {
        vqa: 1,
        mcq: 0,
        describe: 0,
        navigate: 0,
    };
    pub const ALL: TaskMix = TaskMix {
        vqa: 3,
        mcq: 1,
        describe: 1,
        navigate: 1,
    };

    fn pick(&self, r: u32) -> TaskTag {
        let mut r = r;
        for (w, t) in [
            (self.vqa, TaskTag::Vqa),
            (self.mcq, TaskTag::Mcq),
            (self.describe, TaskTag::Describe),
            (self.navigate, TaskTag::Navigate),
        ] {
            if r < w {
                return t;
            }
            r -= w;
        }
        TaskTag::Vqa
    }

    fn total(&self) -> u32 {
        self.vqa + self.mcq + self.describe + self.navigate
    }
}

/// `n` samples drawn from `mix`, each from its own substream.
pub fn gen_samples(seeds: &SeedStream, n: usize, mix: TaskMix, size: usize) -> Result<Vec<Sample>> {
    gen_samples_with(seeds, n, mix, GridSpec::default(), size)
}

/// [`gen_samples`] with explicit scene knobs for the VQA share.
pub fn gen_samples_with(seeds: &SeedStream, n: usize, mix: TaskMix, grid: GridSpec, size: usize) -> Result<Vec<Sample>> {
    if mix.total() == 0 {
        return Err(Error::Config("empty task mix".into()));
    }
    (0..n)
        .map(|i| {
            let s = seeds.index(i as u64);
            let task = mix.pick(s.child("task").rng().random_range(0..mix.total()));
            if task == TaskTag::Vqa {
                vqa_sample(&gen_scene(&s.child("scene"), grid, size)?)
            } else {
                gen_sample(&s, task, size)
            }
        })
        .collect()
}

pub fn gen_sample(seeds: &SeedStream, task: TaskTag, size: usize) -> Result<Sample> {
    match task {
        TaskTag::Vqa => vqa_sample(&gen_scene(&seeds.child("scene"), GridSpec::default(), size)?),
        TaskTag::Mcq | TaskTag::Describe => {
            // A small caption pool so each frame has a left and a right person.
            let captions = gen_captions(8, &seeds.child("captions"));
            let mut rng = seeds.child("pick").rng();
            let idx = rng.random_range(0..captions.len());
            if task == TaskTag::Describe {
                describe_sample(&captions[idx], &captions, size)
            } else {
                let items = build_mcq(&captions, &seeds.child("mcq"))?;
                mcq_sample(&items[idx], &captions, size)
            }
        }
        TaskTag::Navigate => {
            let (start, world) = sample_episode(&seeds.child("episode"), None, 50);
            // Start mid-episode so every action kind shows up in the labels.
            let mut s = start;
            let k = seeds.child("prefix").rng().random_range(0..30);
            for _ in 0..k {
                s = s.step(Some(oracle_action(&s)))?;
            }
            nav_sample(&s, &world, size)
        }
    }
}
