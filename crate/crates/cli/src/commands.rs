use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use lvlm_core::datasets::io::{read_captions, read_mcq, read_samples, write_captions, write_mcq, write_samples};
use lvlm_core::datasets::{gen_samples_with, Sample};
use lvlm_core::navsim::write_trace;
use lvlm_core::parallel::Parallelism;
use lvlm_core::pipeline::checkpoint::{merge_checkpoints, Checkpoint};
use lvlm_core::pipeline::eval::{eval_benchmark, mean_final_distance, navigate_episodes, Benchmark, EvalData};
use lvlm_core::pipeline::gradcheck::{full_graph_check, FullGradReport, FD_STEP, SCALE_FLOOR};
use lvlm_core::pipeline::metrics::{write_metrics, MetricRecord};
use lvlm_core::pipeline::sweep::{lr_sweep, merge_top_two, ArmStatus};
use lvlm_core::pipeline::ablation::run_ablation_matrix;
use lvlm_core::pipeline::{pretrain, pretrain_eval_loss, pretrain_init, PipelineConfig, Trainer};
use lvlm_core::params::ParamStore;
use lvlm_core::rng::SeedStream;
use lvlm_core::{Error, ModelConfig};
use serde_json::json;

use crate::config::RunConfig;
use crate::CliError;

pub const F32_TOLERANCE: f64 = 1e-3;
pub const F64_TOLERANCE: f64 = 1e-5;

fn mode(cfg: &RunConfig) -> Parallelism {
    if cfg.parallel {
        Parallelism::Rayon
    } else {
        Parallelism::Sequential
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.out_dir()?.to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn existing<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    let p = path
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("`{key}` is not set")))?;
    if !p.is_file() {
        return Err(CliError::Usage(format!("{key}: {} does not exist", p.display())));
    }
    Ok(p)
}

fn load_samples(path: &Option<PathBuf>, key: &str) -> Result<Vec<Sample>, CliError> {
    let p = existing(path, key)?;
    let samples = read_samples(BufReader::new(File::open(p)?))?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!("{key}: {} holds no samples", p.display())));
    }
    Ok(samples)
}

fn load_checkpoint(path: &Option<PathBuf>, key: &str) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::load(existing(path, key)?)?)
}

/// Parameters of `ckpt`, refusing a checkpoint built for other dimensions.
fn checkpoint_store(ckpt: &Checkpoint, model: &ModelConfig) -> Result<ParamStore<f32>, CliError> {
    ckpt.to_store(model, false).map_err(|e| CliError::Usage(e.to_string()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?))
}

/// Caption and MCQ files from the config when given, otherwise generated
/// from the seed. Navigation episodes always come from the seed.
fn eval_data(cfg: &RunConfig) -> Result<EvalData, CliError> {
    let mut data = EvalData::generate(&SeedStream::new(cfg.seed()).child("eval"), &cfg.eval())?;
    match (&cfg.captions_path, &cfg.mcq_path) {
        (None, None) => {}
        (Some(_), Some(_)) => {
            data.captions = read_captions(BufReader::new(File::open(existing(&cfg.captions_path, "captions_path")?)?))?;
            data.mcq = read_mcq(BufReader::new(File::open(existing(&cfg.mcq_path, "mcq_path")?)?))?;
        }
        _ => return Err(CliError::Usage("captions_path and mcq_path must be given together".into())),
    }
    Ok(data)
}

pub fn datagen(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let model = cfg.model_config()?;
    let root = SeedStream::new(cfg.seed()).child("datagen");
    let size = model.image_height;
    let train = gen_samples_with(&root.child("train"), cfg.train_size, cfg.mix(), cfg.grid(), size)?;
    let validation = gen_samples_with(&root.child("validation"), cfg.validation_size, cfg.mix(), cfg.grid(), size)?;
    let data = EvalData::generate(&SeedStream::new(cfg.seed()).child("eval"), &cfg.eval())?;
    let mut w = create(&out.join("train.jsonl"))?;
    write_samples(&mut w, &train)?;
    w.flush()?;
    let mut w = create(&out.join("validation.jsonl"))?;
    write_samples(&mut w, &validation)?;
    w.flush()?;
    let mut w = create(&out.join("captions.jsonl"))?;
    write_captions(&mut w, &data.captions)?;
    w.flush()?;
    let mut w = create(&out.join("mcq.jsonl"))?;
    write_mcq(&mut w, &data.mcq)?;
    w.flush()?;
    eprintln!(
        "wrote {} train, {} validation, {} captions, {} mcq items to {}",
        train.len(),
        validation.len(),
        data.captions.len(),
        data.mcq.len(),
        out.display()
    );
    Ok(())
}

pub fn pretrain_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let train = load_samples(&cfg.train_path, "train_path")?;
    let held_out = match &cfg.validation_path {
        Some(_) => Some(load_samples(&cfg.validation_path, "validation_path")?),
        None => None,
    };
    let out = out_dir(cfg)?;
    let model = cfg.model_config()?;
    let pc = cfg.pretrain();
    let seed = cfg.seed();
    let mut records = Vec::new();
    let before = match &held_out {
        Some(h) => Some(pretrain_eval_loss(&model, &pretrain_init::<f32>(&model, &pc)?, h)?),
        None => None,
    };
    let (store, losses) = pretrain::<f32>(&model, &train, &pc)?;
    for (i, l) in losses.iter().enumerate() {
        records.push(MetricRecord::new("backbone", "pretrain", "train_loss", *l, i as u64 + 1, seed));
    }
    let after = match &held_out {
        Some(h) => Some(pretrain_eval_loss(&model, &store, h)?),
        None => None,
    };
    if let (Some(b), Some(a)) = (before, after) {
        records.push(MetricRecord::new("backbone", "pretrain", "heldout_loss_initial", b, 0, seed));
        records.push(MetricRecord::new("backbone", "pretrain", "heldout_loss", a, pc.steps as u64, seed));
    }
    Checkpoint::from_store(&store, &model, pc.steps as u64, None).save(&out.join("backbone.ckpt"))?;
    write_metrics(&out.join("metrics.jsonl"), &records)?;
    if let (Some(b), Some(a)) = (before, after) {
        eprintln!("held-out loss {b:.4} -> {a:.4}");
        if a >= b {
            return Err(CliError::Check(format!("held-out loss did not improve ({b:.4} -> {a:.4})")));
        }
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let model = cfg.model_config()?;
    let backbone = checkpoint_store(&load_checkpoint(&cfg.backbone_path, "backbone_path")?, &model)?;
    let train = load_samples(&cfg.train_path, "train_path")?;
    let validation = match &cfg.validation_path {
        Some(_) => Some(load_samples(&cfg.validation_path, "validation_path")?),
        None => None,
    };
    let pcfg = cfg.pipeline()?;
    if cfg.sweep {
        let validation = validation.ok_or_else(|| CliError::Usage("--sweep needs validation_path".into()))?;
        return sweep(cfg, &pcfg, &backbone, &train, &validation);
    }
    let out = out_dir(cfg)?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut t = Trainer::new(backbone, pcfg.clone())?;
    let variant = pcfg.variant.name();
    let mut records = Vec::new();
    while (t.step as usize) < pcfg.steps {
        let chunk = pcfg.checkpoint_every.min(pcfg.steps - t.step as usize);
        t.run(&train, chunk, |r| {
            records.push(MetricRecord::new(variant, "train", "loss", r.loss, r.step, pcfg.seed))
        })?;
        Checkpoint::from_store(&t.store, &model, t.step, Some(&t.opt))
            .save(&ckpt_dir.join(format!("step_{:06}.ckpt", t.step)))?;
    }
    if let Some(v) = &validation {
        records.push(MetricRecord::new(variant, "validation", "loss", t.mean_eval_loss(v)?, t.step, pcfg.seed));
    }
    Checkpoint::from_store(&t.store, &model, t.step, Some(&t.opt)).save(&out.join("final.ckpt"))?;
    write_metrics(&out.join("metrics.jsonl"), &records)?;
    Ok(())
}

fn sweep(
    cfg: &RunConfig,
    pcfg: &PipelineConfig,
    backbone: &ParamStore<f32>,
    train: &[Sample],
    validation: &[Sample],
) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let arm_dir = out.join("arms");
    fs::create_dir_all(&arm_dir)?;
    let arms = lr_sweep(backbone, pcfg, train, validation, mode(cfg));
    let variant = pcfg.variant.name();
    let mut records = Vec::new();
    let mut w = create(&out.join("sweep.jsonl"))?;
    for a in &arms {
        let (status, error) = match &a.status {
            ArmStatus::Completed => ("completed", None),
            ArmStatus::Failed(e) => ("failed", Some(e.clone())),
        };
        let rec = json!({
            "index": a.index,
            "lr": a.lr,
            "seed": a.seed,
            "status": status,
            "error": error,
            "steps": a.losses.len(),
            "final_train_loss": a.losses.last().map(|l| l.1),
            "validation_loss": a.validation_loss,
        });
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
        if let (Some(store), Some(v)) = (&a.store, a.validation_loss) {
            let steps = a.losses.len() as u64;
            Checkpoint::from_store(store, &pcfg.model, steps, None).save(&arm_dir.join(format!("arm_{}.ckpt", a.index)))?;
            records.push(MetricRecord::new(variant, "validation", &format!("loss_arm_{}", a.index), v, steps, a.seed));
        }
    }
    w.flush()?;
    let (merged, best) = merge_top_two(&arms, pcfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    let t = Trainer::new(checkpoint_store(&merged, &pcfg.model)?, pcfg.clone())?;
    records.push(MetricRecord::new(variant, "validation", "loss_merged", t.mean_eval_loss(validation)?, merged.step, pcfg.seed));
    merged.save(&out.join("merged.ckpt"))?;
    write_metrics(&out.join("metrics.jsonl"), &records)?;
    eprintln!("merged arms {best:?}");
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let model = cfg.model_config()?;
    let key = if cfg.checkpoint_path.is_some() { "checkpoint_path" } else { "backbone_path" };
    let path = if cfg.checkpoint_path.is_some() { &cfg.checkpoint_path } else { &cfg.backbone_path };
    let ckpt = load_checkpoint(path, key)?;
    let store = checkpoint_store(&ckpt, &model)?;
    let data = eval_data(cfg)?;
    let out = out_dir(cfg)?;
    let pcfg = cfg.pipeline()?;
    let t = Trainer::new(store, pcfg.clone())?;
    let mut records = Vec::new();
    let mut failed = Vec::new();
    for &b in &cfg.benchmarks {
        let value = match b {
            Benchmark::Navigate => navigate_episodes(&t.vlm, &t.store, &pcfg, &data, mode(cfg)).and_then(|eps| {
                let dir = out.join("traces");
                fs::create_dir_all(&dir)?;
                for (i, e) in eps.iter().enumerate() {
                    let mut w = BufWriter::new(File::create(dir.join(format!("episode_{i:03}.jsonl")))?);
                    write_trace(&mut w, &e.trace)?;
                    w.flush()?;
                }
                Ok(mean_final_distance(&eps))
            }),
            _ => eval_benchmark(b, &t.vlm, &t.store, &pcfg, &data, mode(cfg)),
        };
        match value {
            Ok(v) => {
                eprintln!("{} {} = {v:.4}", b.name(), b.metric());
                records.push(MetricRecord::new(pcfg.variant.name(), b.name(), b.metric(), v, ckpt.step, pcfg.seed));
            }
            Err(e) => {
                eprintln!("{} failed: {e}", b.name());
                failed.push(b.name());
            }
        }
    }
    write_metrics(&out.join("metrics.jsonl"), &records)?;
    if !failed.is_empty() {
        return Err(CliError::Runtime(format!("benchmarks failed: {}", failed.join(", "))));
    }
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let model = cfg.model_config()?;
    let backbone = checkpoint_store(&load_checkpoint(&cfg.backbone_path, "backbone_path")?, &model)?;
    let train = load_samples(&cfg.train_path, "train_path")?;
    let data = eval_data(cfg)?;
    let out = out_dir(cfg)?;
    let report = run_ablation_matrix(&backbone, &cfg.pipeline()?, &train, &data, mode(cfg));
    write_metrics(&out.join("ablation.jsonl"), &report.records)?;
    let mut w = create(&out.join("checks.jsonl"))?;
    for c in &report.checks {
        let rec = json!({
            "variant": c.variant.name(),
            "pass2_sources": c.pass2_sources.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>(),
            "reasoner_mode": c.reasoner_mode.map(|m| format!("{m:?}")),
            "reasoner_passthrough": c.reasoner_passthrough,
            "reasoner_untouched": c.reasoner_untouched,
            "violations": c.violations(),
        });
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut problems = report.violations();
    for (v, stage, msg) in &report.failures {
        problems.push(format!("{} {stage}: {msg}", v.name()));
    }
    eprintln!("{} ablation rows", report.records.len());
    if !problems.is_empty() {
        return Err(CliError::Check(problems.join("; ")));
    }
    Ok(())
}

pub fn merge(cfg: &RunConfig, a: &Path, b: &Path) -> Result<(), CliError> {
    let a = load_checkpoint(&Some(a.to_path_buf()), "first checkpoint")?;
    let b = load_checkpoint(&Some(b.to_path_buf()), "second checkpoint")?;
    let merged = merge_checkpoints(&a, &b, cfg.merge_weight).map_err(|e| match e {
        Error::Merge(m) => CliError::Check(m),
        e => CliError::from(e),
    })?;
    merged.save(&out_dir(cfg)?.join("merged.ckpt"))?;
    Ok(())
}

fn report_json(r: &FullGradReport) -> serde_json::Value {
    json!({
        "max_rel_error": r.max_rel_error,
        "loss": r.loss,
        "tensors": r.tensors.iter().map(|t| json!({
            "name": t.name,
            "numel": t.numel,
            "max_rel_error": t.max_rel_error,
            "max_abs_grad": t.max_abs_grad,
        })).collect::<Vec<_>>(),
    })
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let r32 = full_graph_check::<f32>(cfg.seed(), FD_STEP, SCALE_FLOOR)?;
    let r64 = full_graph_check::<f64>(cfg.seed(), FD_STEP, SCALE_FLOOR)?;
    let summary = json!({ "f32": report_json(&r32), "f64": report_json(&r64) });
    fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&summary)?)?;
    eprintln!(
        "max relative error: f32 {:.3e} (limit {F32_TOLERANCE:e}), f64 {:.3e} (limit {F64_TOLERANCE:e})",
        r32.max_rel_error, r64.max_rel_error
    );
    let ok32 = r32.max_rel_error < F32_TOLERANCE;
    let ok64 = r64.max_rel_error < F64_TOLERANCE;
    if !(ok32 && ok64) {
        let worst = if ok32 { r64.worst() } else { r32.worst() };
        let name = worst.map(|t| t.name.as_str()).unwrap_or("?");
        return Err(CliError::Check(format!("gradient check failed, worst tensor {name}")));
    }
    Ok(())
}
