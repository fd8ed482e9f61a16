//! Every variant trained from the same backbone and seed, then scored on
//! every benchmark.

use crate::datasets::Sample;
use crate::error::Result;
use crate::lm::ImageSource;
use crate::numerics::Graph;
use crate::parallel::{self, Parallelism};
use crate::params::{ParamGroup, ParamStore};
use crate::reasoner::ReasonerMode;
use crate::rng::SeedStream;

use super::eval::{evaluate, Benchmark, EvalData};
use super::forward::{prediction_layout, prepare};
use super::metrics::MetricRecord;
use super::train::Trainer;
use super::{PipelineConfig, Variant};

/// What one variant actually did on a probe sample after training.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantCheck {
    pub variant: Variant,
    /// Image spans of the prediction layout, in order.
    pub pass2_sources: Vec<ImageSource>,
    /// Reasoner mode seen by the trace; `None` for single-pass variants.
    pub reasoner_mode: Option<ReasonerMode>,
    /// The unmerger consumed the hint node itself and its values are unchanged.
    pub reasoner_passthrough: Option<bool>,
    /// Reasoner tensors are bitwise equal to their initial values.
    pub reasoner_untouched: Option<bool>,
}

impl VariantCheck {
    /// Violations of the variant's structural contract.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let v = self.variant.name();
        match self.variant {
            Variant::NoOriginalImage => {
                if self.pass2_sources != [ImageSource::Reasoned] {
                    out.push(format!("{v}: prediction spans {:?}", self.pass2_sources));
                }
            }
            Variant::NoMlp => {
                if self.reasoner_mode != Some(ReasonerMode::Identity) || self.reasoner_passthrough != Some(true) {
                    out.push(format!("{v}: reasoner is not the identity"));
                }
                if self.reasoner_untouched != Some(true) {
                    out.push(format!("{v}: reasoner weights moved"));
                }
            }
            Variant::PlainBaseline => {
                if self.pass2_sources.len() != 1 || self.reasoner_mode.is_some() {
                    out.push(format!("{v}: not a single-image single pass"));
                }
            }
            Variant::DuplicateImageBaseline => {
                if self.pass2_sources.len() != 2 || self.reasoner_mode.is_some() {
                    out.push(format!("{v}: not a two-image single pass"));
                }
            }
            _ => {
                if self.pass2_sources != [ImageSource::Original, ImageSource::Reasoned] {
                    out.push(format!("{v}: prediction spans {:?}", self.pass2_sources));
                }
                if self.reasoner_mode != Some(ReasonerMode::GatedMlp) {
                    out.push(format!("{v}: reasoner not in gated mode"));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct AblationReport {
    /// One record per (variant, benchmark) that completed, in variant then
    /// benchmark order.
    pub records: Vec<MetricRecord>,
    pub checks: Vec<VariantCheck>,
    /// `(variant, benchmark or "train", message)` for everything that failed.
    pub failures: Vec<(Variant, String, String)>,
}

impl AblationReport {
    pub fn violations(&self) -> Vec<String> {
        self.checks.iter().flat_map(VariantCheck::violations).collect()
    }
}

fn reasoner_tensors(store: &ParamStore<f32>) -> Vec<Vec<u32>> {
    store
        .ids_in(ParamGroup::Reasoner)
        .into_iter()
        .map(|id| store.get(id).data().iter().map(|x| x.to_bits()).collect())
        .collect()
}

fn probe(trainer: &Trainer<f32>, sample: &Sample, initial: &[Vec<u32>]) -> Result<VariantCheck> {
    let cfg = &trainer.cfg;
    let mut g = Graph::new();
    let mut rng = SeedStream::new(0).rng();
    let p = prepare(&trainer.vlm, &trainer.store, &mut g, sample, cfg, false, &mut rng)?;
    let t = g.shape(p.images[0])[0];
    let layout = prediction_layout(cfg, t, &sample.query, &sample.labels);
    let passthrough = match (p.hint, p.reasoned) {
        (Some(h), Some(r)) => Some(h == r && g.value(h) == g.value(r)),
        _ => None,
    };
    let two_pass = cfg.variant.is_two_pass();
    Ok(VariantCheck {
        variant: cfg.variant,
        pass2_sources: layout.spans().iter().map(|s| s.source).collect(),
        reasoner_mode: p.trace.map(|t| t.mode),
        reasoner_passthrough: passthrough,
        reasoner_untouched: two_pass.then(|| reasoner_tensors(&trainer.store) == initial),
    })
}

struct VariantOutcome {
    records: Vec<MetricRecord>,
    check: Option<VariantCheck>,
    failures: Vec<(Variant, String, String)>,
}

fn run_variant(
    backbone: &ParamStore<f32>,
    cfg: PipelineConfig,
    train: &[Sample],
    data: &EvalData,
    benchmarks: &[Benchmark],
) -> VariantOutcome {
    let variant = cfg.variant;
    let mut out = VariantOutcome {
        records: Vec::new(),
        check: None,
        failures: Vec::new(),
    };
    let trained = (|| {
        let mut t = Trainer::new(backbone.clone(), cfg.clone())?;
        let initial = reasoner_tensors(&t.store);
        if variant.is_two_pass() {
            t.run(train, cfg.steps, |_| {})?;
        }
        let check = probe(&t, &train[0], &initial)?;
        Ok::<_, crate::Error>((t, check))
    })();
    let trainer = match trained {
        Ok((t, check)) => {
            out.check = Some(check);
            t
        }
        Err(e) => {
            out.failures.push((variant, "train".into(), e.to_string()));
            return out;
        }
    };
    let steps = trainer.step;
    for (b, r) in evaluate(
        &trainer.vlm,
        &trainer.store,
        &cfg,
        data,
        benchmarks,
        steps,
        Parallelism::Sequential,
    ) {
        match r {
            Ok(rec) => out.records.push(rec),
            Err(e) => out.failures.push((variant, b.name().into(), e.to_string())),
        }
    }
    out
}

/// Trains and evaluates all seven variants. Single-pass variants have no
/// trainable path and are evaluated as loaded. Variants run in parallel; a
/// failing variant only loses its own rows.
pub fn run_ablation_matrix(
    backbone: &ParamStore<f32>,
    base: &PipelineConfig,
    train: &[Sample],
    data: &EvalData,
    mode: Parallelism,
) -> AblationReport {
    let mut report = AblationReport::default();
    if train.is_empty() {
        for v in Variant::ALL {
            report.failures.push((v, "train".into(), "no training samples".into()));
        }
        return report;
    }
    let outcomes = parallel::map(mode, &Variant::ALL, |_, &variant| {
        let cfg = PipelineConfig {
            variant,
            ..base.clone()
        };
        run_variant(backbone, cfg, train, data, &Benchmark::ALL)
    });
    for o in outcomes {
        report.records.extend(o.records);
        report.checks.extend(o.check);
        report.failures.extend(o.failures);
    }
    report
}
