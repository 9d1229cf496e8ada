use super::batchnorm::{batchnorm_match, BatchNormTarget, Mode, RunningStats};
use super::layers::{bind_encoder_layer, init_encoder_layer, layer_weights};
use super::params::{Bound, ParamSet};
use super::vq::quantize;
use super::{check_layout, sample_features, CLS_INIT_SCALE, INITIAL_LOG_TEMPERATURE};
use crate::diffcore::nn::transformer_encoder_layer;
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, seeded};
use crate::teachers::{CaptionSample, TeacherBundle};

pub const CASCADED_HEADS: usize = 1;
pub const DEFAULT_KEYWORDS: usize = 8;
pub const VQ_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct CascadedConfig {
    /// Number of teacher feature layers, `L + 1`.
    pub feature_layers: usize,
    pub d_audio: usize,
    pub d_text: usize,
    pub vocab: usize,
    pub keywords: usize,
    pub heads: usize,
    pub tau: f64,
    /// When false the projected CLS outputs go to quantization as they are.
    pub batchnorm: bool,
}

impl CascadedConfig {
    pub fn for_teachers(t: &TeacherBundle, keywords: usize) -> Self {
        Self {
            feature_layers: t.feature_layers(),
            d_audio: t.d_audio(),
            d_text: t.d_text(),
            vocab: t.vocab(),
            keywords,
            heads: CASCADED_HEADS,
            tau: VQ_TEMPERATURE,
            batchnorm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_layers == 0 || self.d_audio == 0 || self.d_text == 0 || self.vocab == 0 {
            return Err(Error::Configuration("model dimensions must be positive".into()));
        }
        if self.keywords == 0 {
            return Err(Error::Configuration("keyword count K must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Configuration(format!("VQ temperature must be positive, got {}", self.tau)));
        }
        if self.heads == 0 || self.d_audio % self.heads != 0 {
            return Err(Error::Configuration(format!(
                "audio width {} is not divisible by {} heads",
                self.d_audio, self.heads
            )));
        }
        Ok(())
    }
}

/// Keyword speech encoder: `K` CLS outputs are matched to the subword
/// embedding statistics, snapped to their nearest subword embeddings and read
/// by the frozen text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadedModel {
    config: CascadedConfig,
    params: ParamSet,
    /// `bn.running_mean`, `bn.running_var`, `bn.target_mean`, `bn.target_var`.
    buffers: ParamSet,
}

/// CLS stage output. `z` stacks the `K` rows of each sample: `B·K × D_t`.
#[derive(Debug, Clone)]
pub struct ClsOutput {
    pub z: Var,
    /// Per sample, the `K × (K + T)` attention weights of the single head.
    pub attention: Vec<Var>,
    /// Running statistics after folding in this batch (training mode).
    pub running: Option<RunningStats>,
}

#[derive(Debug, Clone)]
pub struct CascadedOutput {
    pub embeddings: Var,
    pub cls: ClsOutput,
    pub similarity: Var,
    /// `B` rows of `K` keyword indices.
    pub keywords: Vec<Vec<usize>>,
}

impl CascadedModel {
    pub fn new(config: CascadedConfig, teachers: &TeacherBundle, seed: u64) -> Result<Self> {
        let (mean, var) = teachers.subword_statistics();
        Self::with_targets(config, mean, var, seed)
    }

    fn with_targets(config: CascadedConfig, mean: Vec<f64>, var: Vec<f64>, seed: u64) -> Result<Self> {
        config.validate()?;
        if mean.len() != config.d_text || var.len() != config.d_text {
            return Err(Error::Configuration("target statistics width differs from D_t".into()));
        }
        let (k, da, dt) = (config.keywords, config.d_audio, config.d_text);
        let mut rng = seeded(seed);
        let mut p = ParamSet::new();
        p.insert("layer_logits", Tensor::zeros(&[config.feature_layers]));
        p.insert("cls", normal_tensor(&mut rng, &[k, da], CLS_INIT_SCALE));
        init_encoder_layer(&mut p, &mut rng, da, false);
        p.insert("projection", normal_tensor(&mut rng, &[da, dt], 1.0 / (da as f64).sqrt()));
        if config.batchnorm {
            p.insert("bn.gain", Tensor::filled(&[dt], 1.0));
            p.insert("bn.bias", Tensor::zeros(&[dt]));
        }
        p.insert("log_temperature", Tensor::scalar(INITIAL_LOG_TEMPERATURE));

        let running = RunningStats::new(dt);
        let mut buffers = ParamSet::new();
        buffers.insert("bn.running_mean", Tensor::vector(running.mean));
        buffers.insert("bn.running_var", Tensor::vector(running.var));
        buffers.insert("bn.target_mean", Tensor::vector(mean));
        buffers.insert("bn.target_var", Tensor::vector(var));
        Ok(Self {
            config,
            params: p,
            buffers,
        })
    }

    pub fn from_parts(config: CascadedConfig, params: ParamSet, buffers: ParamSet) -> Result<Self> {
        let d = config.d_text;
        let reference = Self::with_targets(config, vec![0.0; d], vec![1.0; d], 0)?;
        check_layout(&reference.params, &params, "cascaded model parameters")?;
        check_layout(&reference.buffers, &buffers, "cascaded model buffers")?;
        Ok(Self {
            config: reference.config,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &CascadedConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamSet {
        &self.buffers
    }

    pub fn running_stats(&self) -> RunningStats {
        RunningStats {
            mean: self.buffer("bn.running_mean").to_vec(),
            var: self.buffer("bn.running_var").to_vec(),
        }
    }

    pub fn set_running_stats(&mut self, stats: RunningStats) {
        self.buffers.insert("bn.running_mean", Tensor::vector(stats.mean));
        self.buffers.insert("bn.running_var", Tensor::vector(stats.var));
    }

    pub fn target_statistics(&self) -> (&[f64], &[f64]) {
        (self.buffer("bn.target_mean"), self.buffer("bn.target_var"))
    }

    fn buffer(&self, name: &str) -> &[f64] {
        self.buffers.get(name).expect("buffer layout checked on construction").data()
    }

    /// Fails unless the frozen targets are the statistics of this teacher's
    /// subword table.
    pub fn check_teachers(&self, teachers: &TeacherBundle) -> Result<()> {
        let (mean, var) = teachers.subword_statistics();
        let (tm, tv) = self.target_statistics();
        if teachers.vocab() != self.config.vocab
            || teachers.feature_layers() != self.config.feature_layers
            || teachers.d_audio() != self.config.d_audio
            || tm != mean.as_slice()
            || tv != var.as_slice()
        {
            return Err(Error::Configuration(
                "cascaded model was built for a different teacher bundle".into(),
            ));
        }
        Ok(())
    }

    /// Projected (and, by default, batch-norm matched) CLS outputs.
    pub fn forward_cls(&self, g: &mut Graph, b: &Bound, features: &[Vec<Var>], mode: Mode) -> Result<ClsOutput> {
        if features.is_empty() {
            return Err(Error::DegenerateInput {
                op: "encode_cascaded_cls",
                detail: "empty batch".into(),
            });
        }
        let k = self.config.keywords;
        if mode == Mode::Train && self.config.batchnorm && features.len() * k < 2 {
            return Err(Error::BatchTooSmall {
                op: "encode_cascaded_cls",
                required: 2,
                actual: features.len() * k,
            });
        }
        let weights = layer_weights(g, self.config.feature_layers, b.var("layer_logits"))?;
        let enc = bind_encoder_layer(b, false);
        let cls = b.var("cls");
        let mut pooled = Vec::with_capacity(features.len());
        let mut attention = Vec::with_capacity(features.len());
        for layers in features {
            let x = g.weighted_sum(weights, layers)?;
            let seq = g.concat_rows(&[cls, x])?;
            let out = transformer_encoder_layer(g, seq, &enc, self.config.heads, false, k)?;
            pooled.push(out.output);
            attention.push(out.weights[0]);
        }
        let pooled = g.concat_rows(&pooled)?;
        let projected = g.matmul(pooled, b.var("projection"))?;
        if !self.config.batchnorm {
            return Ok(ClsOutput {
                z: projected,
                attention,
                running: None,
            });
        }
        let (tm, tv) = self.target_statistics();
        let target = BatchNormTarget {
            mean: tm,
            var: tv,
            gain: b.var("bn.gain"),
            bias: b.var("bn.bias"),
        };
        let mut running = self.running_stats();
        let z = batchnorm_match(g, projected, target, &mut running, mode)?;
        Ok(ClsOutput {
            z,
            attention,
            running: (mode == Mode::Train).then_some(running),
        })
    }

    /// Unit embeddings `B×D_t` of the `K` straight-through keywords per
    /// sample, read by the frozen text encoder.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        features: &[Vec<Var>],
        teachers: &TeacherBundle,
        mode: Mode,
    ) -> Result<CascadedOutput> {
        let cls = self.forward_cls(g, b, features, mode)?;
        let q = quantize(g, cls.z, teachers.subword_table(), self.config.tau)?;
        let embeddings = teachers.text_encode_groups(g, q.keywords, self.config.keywords)?;
        let keywords = q
            .indices
            .chunks(self.config.keywords)
            .map(<[usize]>::to_vec)
            .collect();
        Ok(CascadedOutput {
            embeddings,
            cls,
            similarity: q.similarity,
            keywords,
        })
    }
}

pub fn encode_cascaded_cls(
    g: &mut Graph,
    model: &CascadedModel,
    b: &Bound,
    batch: &[&CaptionSample],
    mode: Mode,
) -> Result<ClsOutput> {
    let features = batch
        .iter()
        .map(|s| sample_features(g, s))
        .collect::<Result<Vec<_>>>()?;
    model.forward_cls(g, b, &features, mode)
}

pub fn encode_cascaded(
    g: &mut Graph,
    model: &CascadedModel,
    b: &Bound,
    batch: &[&CaptionSample],
    teachers: &TeacherBundle,
    mode: Mode,
) -> Result<CascadedOutput> {
    let features = batch
        .iter()
        .map(|s| sample_features(g, s))
        .collect::<Result<Vec<_>>>()?;
    model.forward(g, b, &features, teachers, mode)
}
