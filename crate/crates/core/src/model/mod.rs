//! Trainable speech heads on top of the frozen teachers.
//!
//! Both heads read the `L + 1` teacher feature layers through a learned
//! softmax weighting and a single transformer encoder layer. The parallel
//! head projects one CLS output straight into the text embedding space; the
//! cascaded head turns `K` CLS outputs into subword keywords and lets the
//! frozen text encoder embed them.

mod batchnorm;
mod cascaded;
mod checkpoint;
mod layers;
mod loss;
mod parallel;
mod params;
pub mod vq;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use batchnorm::{batchnorm_match, BatchNormTarget, Mode, RunningStats, BATCHNORM_MOMENTUM};
pub use cascaded::{
    encode_cascaded, encode_cascaded_cls, CascadedConfig, CascadedModel, CascadedOutput, ClsOutput,
    CASCADED_HEADS, DEFAULT_KEYWORDS, VQ_TEMPERATURE,
};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use layers::{bind_encoder_layer, ffn_parameter_count, init_encoder_layer, weighted_layer_sum};
pub use loss::contrastive_loss;
pub use parallel::{encode_parallel, ParallelConfig, ParallelModel, PARALLEL_HEADS};
pub use params::{Bound, ParamSet};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::teachers::{CaptionSample, TeacherBundle};

pub const CLS_INIT_SCALE: f64 = 0.02;
/// `ln(1 / 0.07)`.
pub const INITIAL_LOG_TEMPERATURE: f64 = 2.659_260_036_932_778_4;
/// `ln(100)`: the logit scale never exceeds 100.
pub const MAX_LOG_TEMPERATURE: f64 = 4.605_170_185_988_091;

/// Samples per graph when embedding a corpus.
const EMBED_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Parallel,
    Cascaded,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Parallel => "parallel",
            ModelKind::Cascaded => "cascaded",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(ModelKind::Parallel),
            "cascaded" => Ok(ModelKind::Cascaded),
            other => Err(Error::Configuration(format!(
                "unknown model kind {other:?} (expected parallel or cascaded)"
            ))),
        }
    }
}

/// Either speech head.
#[derive(Debug, Clone, PartialEq)]
pub enum SpeechModel {
    Parallel(ParallelModel),
    Cascaded(CascadedModel),
}

/// Graph outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub embeddings: Var,
    pub keywords: Option<Vec<Vec<usize>>>,
    pub attention: Vec<Var>,
    pub running: Option<RunningStats>,
}

/// Detached eval-mode outputs for a list of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub vectors: Vec<Vec<f64>>,
    /// Cascaded only: `K` keyword indices per sample.
    pub keywords: Option<Vec<Vec<usize>>>,
    /// Cascaded only: `K × (K + T)` attention weights per sample.
    pub attention: Vec<Tensor>,
}

impl SpeechModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            SpeechModel::Parallel(_) => ModelKind::Parallel,
            SpeechModel::Cascaded(_) => ModelKind::Cascaded,
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            SpeechModel::Parallel(m) => m.params(),
            SpeechModel::Cascaded(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            SpeechModel::Parallel(m) => m.params_mut(),
            SpeechModel::Cascaded(m) => m.params_mut(),
        }
    }

    pub fn as_cascaded(&self, op: &'static str) -> Result<&CascadedModel> {
        match self {
            SpeechModel::Cascaded(m) => Ok(m),
            SpeechModel::Parallel(_) => Err(Error::ModelKind {
                op,
                expected: "cascaded",
                actual: "parallel",
            }),
        }
    }

    pub fn log_temperature(&self) -> f64 {
        self.params().get("log_temperature").expect("every head has a temperature").item()
    }

    /// Logit scale `exp(log_temperature)`.
    pub fn temperature(&self) -> f64 {
        self.log_temperature().exp()
    }

    pub fn clamp_temperature(&mut self) {
        let t = self.params_mut().get_mut("log_temperature").expect("every head has a temperature");
        let v = &mut t.data_mut()[0];
        if *v > MAX_LOG_TEMPERATURE {
            *v = MAX_LOG_TEMPERATURE;
        }
    }

    /// Softmax of the layer logits.
    pub fn layer_weights(&self) -> Vec<f64> {
        let logits = self.params().get("layer_logits").expect("every head weights layers").data();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    pub fn check_teachers(&self, teachers: &TeacherBundle) -> Result<()> {
        match self {
            SpeechModel::Cascaded(m) => m.check_teachers(teachers),
            SpeechModel::Parallel(m) => {
                let c = m.config();
                if c.feature_layers != teachers.feature_layers()
                    || c.d_audio != teachers.d_audio()
                    || c.d_text != teachers.d_text()
                {
                    return Err(Error::Configuration(
                        "parallel model dimensions differ from the teacher bundle".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Runs the head on `samples` with parameters already bound as `b`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        samples: &[&CaptionSample],
        teachers: &TeacherBundle,
        mode: Mode,
    ) -> Result<Forward> {
        match self {
            SpeechModel::Parallel(m) => Ok(Forward {
                embeddings: encode_parallel(g, m, b, samples)?,
                keywords: None,
                attention: Vec::new(),
                running: None,
            }),
            SpeechModel::Cascaded(m) => {
                let out = encode_cascaded(g, m, b, samples, teachers, mode)?;
                Ok(Forward {
                    embeddings: out.embeddings,
                    keywords: Some(out.keywords),
                    attention: out.cls.attention,
                    running: out.cls.running,
                })
            }
        }
    }

    /// Stores running statistics produced by a training-mode forward pass.
    pub fn commit(&mut self, forward: &Forward) {
        if let (SpeechModel::Cascaded(m), Some(stats)) = (self, &forward.running) {
            m.set_running_stats(stats.clone());
        }
    }

    /// Eval-mode embeddings, keywords and attention maps for `samples`.
    pub fn embed(&self, teachers: &TeacherBundle, samples: &[&CaptionSample]) -> Result<Embedded> {
        let mut out = Embedded {
            vectors: Vec::with_capacity(samples.len()),
            keywords: matches!(self, SpeechModel::Cascaded(_)).then(Vec::new),
            attention: Vec::new(),
        };
        for chunk in samples.chunks(EMBED_CHUNK) {
            let mut g = Graph::new();
            let b = self.params().bind(&mut g, false);
            let f = self.forward(&mut g, &b, chunk, teachers, Mode::Eval)?;
            let e = g.value(f.embeddings);
            out.vectors.extend((0..e.rows()).map(|r| e.row(r).to_vec()));
            if let (Some(all), Some(k)) = (out.keywords.as_mut(), f.keywords) {
                all.extend(k);
            }
            out.attention.extend(f.attention.iter().map(|&a| g.value(a).clone()));
        }
        Ok(out)
    }
}

/// The `L + 1` feature layers of a sample as graph constants.
pub(crate) fn sample_features(g: &mut Graph, sample: &CaptionSample) -> Result<Vec<Var>> {
    if sample.frames() == 0 {
        return Err(Error::DegenerateInput {
            op: "speech encoder",
            detail: format!("caption of image {} has no frames", sample.image_id),
        });
    }
    Ok(sample.layer_tensors().into_iter().map(|t| g.constant(t)).collect())
}

pub(crate) fn check_layout(expected: &ParamSet, actual: &ParamSet, what: &'static str) -> Result<()> {
    if expected.same_layout(actual) {
        return Ok(());
    }
    Err(Error::format(
        what,
        format!("expected entries {:?}, found {:?}", expected.names(), actual.names()),
    ))
}
