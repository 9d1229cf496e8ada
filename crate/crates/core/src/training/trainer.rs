use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{adam_step, clip_global_norm, lr_schedule, AdamState, BatchSampler, TrainConfig};
use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::evaluation::eval_image_speech;
use crate::model::{
    contrastive_loss, read_checkpoint, write_checkpoint, CascadedConfig, CascadedModel, Checkpoint, ModelKind, Mode,
    ParallelConfig, ParallelModel, ParamSet, SpeechModel,
};
use crate::rng::derive_seed;
use crate::teachers::{CaptionSample, Dataset, TeacherBundle};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
const METRICS_LOG: &str = "metrics.jsonl";
const EVAL_LOG: &str = "eval.jsonl";
const INIT_STREAM: u64 = 41;

/// One optimizer step: the loss and logit scale are measured before the
/// update, `lr` is the rate the update used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub temperature: f64,
}

/// Dev retrieval after `step` optimizer steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub speech_to_image_r1: f64,
    pub image_to_speech_r1: f64,
    pub best: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory receiving `checkpoints/` and `logs/`; nothing is written
    /// when unset.
    pub run_dir: Option<PathBuf>,
    /// Continue from `checkpoints/last.ckpt` in the run directory.
    pub resume: bool,
    /// Stop once this many optimizer steps have been taken in total, as an
    /// interrupted run would.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SpeechModel,
    /// Parameters at the best dev speech→image recall@1.
    pub best_model: SpeechModel,
    pub best_dev_recall: f64,
    pub best_step: u64,
    pub history: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

struct Paths {
    checkpoints: PathBuf,
    logs: PathBuf,
}

impl Paths {
    fn new(run: &Path) -> Result<Self> {
        let p = Self {
            checkpoints: run.join("checkpoints"),
            logs: run.join("logs"),
        };
        for d in [&p.checkpoints, &p.logs] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(p)
    }
}

pub fn init_model(config: &TrainConfig, teachers: &TeacherBundle) -> Result<SpeechModel> {
    let seed = derive_seed(config.seed, &[INIT_STREAM]);
    Ok(match config.model {
        ModelKind::Parallel => SpeechModel::Parallel(ParallelModel::new(ParallelConfig::for_teachers(teachers), seed)?),
        ModelKind::Cascaded => {
            let mut c = CascadedConfig::for_teachers(teachers, config.keywords);
            c.batchnorm = config.batchnorm;
            SpeechModel::Cascaded(CascadedModel::new(c, teachers, seed)?)
        }
    })
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::format("log record", e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format("log record", e.to_string())))
        .collect()
}

fn image_matrix(samples: &[&CaptionSample]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.image_embedding()).collect();
    Tensor::from_rows(&rows)
}

/// Contrastive training of the configured head on `train`, with dev
/// retrieval every `eval_every` steps and at the end.
pub fn train(
    config: &TrainConfig,
    train: &Dataset,
    dev: &Dataset,
    teachers: &TeacherBundle,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    train.check_compatible(teachers)?;
    dev.check_compatible(teachers)?;
    let teacher_checksum = teachers.checksum();
    let sampler = BatchSampler::new(train, config.batch_size, config.seed)?;
    let paths = options.run_dir.as_deref().map(Paths::new).transpose()?;

    let mut model = init_model(config, teachers)?;
    let mut adam = AdamState::new(model.params());
    let mut start = 0u64;
    let mut best_model = model.clone();
    let mut best_dev_recall = f64::NEG_INFINITY;
    let mut best_step = 0u64;
    let mut history: Vec<StepRecord> = Vec::new();
    let mut evals: Vec<EvalRecord> = Vec::new();

    if options.resume {
        let p = paths
            .as_ref()
            .ok_or_else(|| Error::Configuration("resume requires a run directory".into()))?;
        let last = read_checkpoint(p.checkpoints.join(LAST_CHECKPOINT))?;
        if last.model.kind() != config.model {
            return Err(Error::Configuration(format!(
                "checkpoint holds a {} model but the config asks for {}",
                last.model.kind(),
                config.model
            )));
        }
        last.model.check_teachers(teachers)?;
        start = last.step;
        model = last.model;
        adam = last
            .optimizer
            .ok_or_else(|| Error::format("checkpoint", "resume needs optimizer state"))?;
        if let Some(r) = last.best_dev_recall {
            let best = read_checkpoint(p.checkpoints.join(BEST_CHECKPOINT))?;
            best_model = best.model;
            best_dev_recall = r;
            best_step = best.step;
        }
        history = read_jsonl::<StepRecord>(&p.logs.join(METRICS_LOG))?;
        history.retain(|r| r.step < start);
        evals = read_jsonl::<EvalRecord>(&p.logs.join(EVAL_LOG))?;
        evals.retain(|r| r.step <= start);
    }

    let stop = options.stop_after.unwrap_or(config.total_steps).min(config.total_steps);
    for step in start..stop {
        let lr = lr_schedule(step + 1, config.warmup_steps, config.total_steps, config.peak_lr, config.floor_lr)?;
        let batch: Vec<&CaptionSample> = sampler.batch(step).into_iter().map(|i| &train.samples[i]).collect();

        let mut g = Graph::new();
        let bound = model.params().bind(&mut g, true);
        let forward = model.forward(&mut g, &bound, &batch, teachers, Mode::Train)?;
        let images = g.constant(image_matrix(&batch)?);
        let loss = contrastive_loss(&mut g, forward.embeddings, images, bound.var("log_temperature"))?;
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("training loss at step {step} (last good checkpoint kept)"),
            });
        }
        let grads = g.backward(loss)?;
        let mut grad_set = ParamSet::new();
        for (name, var) in bound.iter() {
            let t = match grads.get(var) {
                Some(t) => t.clone(),
                None => Tensor::zeros(g.value(var).shape()),
            };
            grad_set.insert(name, t);
        }
        if let Some(c) = config.clip_norm {
            clip_global_norm(&mut grad_set, c);
        }
        history.push(StepRecord {
            step,
            lr,
            loss: loss_value,
            temperature: model.temperature(),
        });
        adam_step(model.params_mut(), &grad_set, &mut adam, config.adam(lr))?;
        model.commit(&forward);
        model.clamp_temperature();

        let done = step + 1;
        if done % config.eval_every == 0 || done == config.total_steps {
            let report = eval_image_speech(&model, dev, teachers)?;
            let r1 = report.speech_to_image().recall_at(1);
            let improved = r1 > best_dev_recall;
            if improved {
                best_dev_recall = r1;
                best_step = done;
                best_model = model.clone();
            }
            evals.push(EvalRecord {
                step: done,
                speech_to_image_r1: r1,
                image_to_speech_r1: report.image_to_speech().recall_at(1),
                best: improved,
            });
            if let Some(p) = &paths {
                if improved {
                    write_checkpoint(
                        p.checkpoints.join(BEST_CHECKPOINT),
                        &Checkpoint {
                            model: model.clone(),
                            step: done,
                            best_dev_recall: Some(r1),
                            optimizer: None,
                        },
                    )?;
                }
                write_checkpoint(
                    p.checkpoints.join(LAST_CHECKPOINT),
                    &Checkpoint {
                        model: model.clone(),
                        step: done,
                        best_dev_recall: Some(best_dev_recall),
                        optimizer: Some(adam.clone()),
                    },
                )?;
                write_jsonl(&p.logs.join(METRICS_LOG), &history)?;
                write_jsonl(&p.logs.join(EVAL_LOG), &evals)?;
            }
        }
    }

    debug_assert_eq!(teachers.checksum(), teacher_checksum, "teacher bundle is frozen");
    Ok(TrainOutcome {
        model,
        best_model,
        best_dev_recall,
        best_step,
        history,
        evals,
    })
}
