use super::layers::{bind_encoder_layer, init_encoder_layer, layer_weights};
use super::params::{Bound, ParamSet};
use super::{check_layout, sample_features, CLS_INIT_SCALE, INITIAL_LOG_TEMPERATURE};
use crate::diffcore::nn::transformer_encoder_layer;
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, seeded};
use crate::teachers::{CaptionSample, TeacherBundle};

pub const PARALLEL_HEADS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelConfig {
    /// Number of teacher feature layers, `L + 1`.
    pub feature_layers: usize,
    pub d_audio: usize,
    pub d_text: usize,
    pub heads: usize,
}

impl ParallelConfig {
    pub fn for_teachers(t: &TeacherBundle) -> Self {
        Self {
            feature_layers: t.feature_layers(),
            d_audio: t.d_audio(),
            d_text: t.d_text(),
            heads: PARALLEL_HEADS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_layers == 0 || self.d_audio == 0 || self.d_text == 0 {
            return Err(Error::Configuration("model dimensions must be positive".into()));
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

/// Utterance-level speech encoder: one CLS token summarizes the weighted
/// teacher features and is projected into the text embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelModel {
    config: ParallelConfig,
    params: ParamSet,
}

impl ParallelModel {
    pub fn new(config: ParallelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut p = ParamSet::new();
        p.insert("layer_logits", Tensor::zeros(&[config.feature_layers]));
        p.insert("cls", normal_tensor(&mut rng, &[1, config.d_audio], CLS_INIT_SCALE));
        init_encoder_layer(&mut p, &mut rng, config.d_audio, true);
        let s = 1.0 / (config.d_audio as f64).sqrt();
        p.insert("projection", normal_tensor(&mut rng, &[config.d_audio, config.d_text], s));
        p.insert("log_temperature", Tensor::scalar(INITIAL_LOG_TEMPERATURE));
        Ok(Self { config, params: p })
    }

    pub fn from_params(config: ParallelConfig, params: ParamSet) -> Result<Self> {
        let reference = Self::new(config, 0)?;
        check_layout(&reference.params, &params, "parallel model parameters")?;
        Ok(Self { config: reference.config, params })
    }

    pub fn config(&self) -> &ParallelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Unit embeddings `B×D_t` for per-sample feature stacks, each holding
    /// `L + 1` matrices of `T×D_a`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, features: &[Vec<Var>]) -> Result<Var> {
        if features.is_empty() {
            return Err(Error::DegenerateInput {
                op: "encode_parallel",
                detail: "empty batch".into(),
            });
        }
        let weights = layer_weights(g, self.config.feature_layers, b.var("layer_logits"))?;
        let enc = bind_encoder_layer(b, true);
        let cls = b.var("cls");
        let mut pooled = Vec::with_capacity(features.len());
        for layers in features {
            let x = g.weighted_sum(weights, layers)?;
            let seq = g.concat_rows(&[cls, x])?;
            let out = transformer_encoder_layer(g, seq, &enc, self.config.heads, true, 1)?;
            pooled.push(out.output);
        }
        let pooled = g.concat_rows(&pooled)?;
        let projected = g.matmul(pooled, b.var("projection"))?;
        g.l2_normalize(projected)
    }
}

/// Binds `batch` as constants and runs [`ParallelModel::forward`].
pub fn encode_parallel(g: &mut Graph, model: &ParallelModel, b: &Bound, batch: &[&CaptionSample]) -> Result<Var> {
    let features = batch
        .iter()
        .map(|s| sample_features(g, s))
        .collect::<Result<Vec<_>>>()?;
    model.forward(g, b, &features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{check_gradients, GradCheckConfig};
    use crate::model::layers::ffn_parameter_count;

    fn small_config() -> ParallelConfig {
        ParallelConfig {
            feature_layers: 3,
            d_audio: 8,
            d_text: 4,
            heads: 2,
        }
    }

    fn random_features(seed: u64, lens: &[usize], cfg: &ParallelConfig) -> Vec<Vec<Tensor>> {
        let mut rng = seeded(seed);
        lens.iter()
            .map(|&t| (0..cfg.feature_layers).map(|_| normal_tensor(&mut rng, &[t, cfg.d_audio], 1.0)).collect())
            .collect()
    }

    fn run(model: &ParallelModel, feats: &[Vec<Tensor>]) -> Tensor {
        let mut g = Graph::new();
        let b = model.params.bind(&mut g, false);
        let vars: Vec<Vec<Var>> = feats
            .iter()
            .map(|s| s.iter().map(|t| g.constant(t.clone())).collect())
            .collect();
        let y = model.forward(&mut g, &b, &vars).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn unit_rows_and_shape() {
        let cfg = small_config();
        let model = ParallelModel::new(cfg.clone(), 1).unwrap();
        let y = run(&model, &random_features(2, &[3, 5, 2], &cfg));
        assert_eq!(y.shape(), &[3, 4]);
        for r in 0..3 {
            let n: f64 = y.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let cfg = small_config();
        let model = ParallelModel::new(cfg.clone(), 3).unwrap();
        let feats = random_features(4, &[3, 5, 2], &cfg);
        let y = run(&model, &feats);
        let swapped = vec![feats[2].clone(), feats[0].clone(), feats[1].clone()];
        let z = run(&model, &swapped);
        assert_eq!(z.row(0), y.row(2));
        assert_eq!(z.row(1), y.row(0));
        assert_eq!(z.row(2), y.row(1));
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let cfg = small_config();
        let model = ParallelModel::new(cfg.clone(), 5).unwrap();
        let feats = random_features(6, &[4, 4], &cfg);
        assert_eq!(run(&model, &feats), run(&model, &feats));
    }

    #[test]
    fn empty_batch_and_layer_mismatch() {
        let cfg = small_config();
        let model = ParallelModel::new(cfg.clone(), 1).unwrap();
        let mut g = Graph::new();
        let b = model.params.bind(&mut g, false);
        assert!(matches!(model.forward(&mut g, &b, &[]), Err(Error::DegenerateInput { .. })));
        let short: Vec<Var> = (0..2).map(|_| g.constant(Tensor::zeros(&[2, 8]))).collect();
        assert!(model.forward(&mut g, &b, &[short]).is_err());
    }

    #[test]
    fn default_heads_and_ffn_parameter_count() {
        let cfg = ParallelConfig {
            feature_layers: 5,
            d_audio: 32,
            d_text: 16,
            heads: PARALLEL_HEADS,
        };
        let model = ParallelModel::new(cfg, 0).unwrap();
        let attention = 4 * (32 * 32 + 32) + 2 * 32;
        let expected = 5 + 32 + attention + ffn_parameter_count(32) + 32 * 16 + 1;
        assert_eq!(model.params.value_count(), expected);
        assert!((model.params.get("log_temperature").unwrap().item().exp() - 1.0 / 0.07).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_gradient() {
        let cfg = small_config();
        let model = ParallelModel::new(cfg.clone(), 7).unwrap();
        let feats = random_features(8, &[4, 6], &cfg);
        let names: Vec<String> = model.params.names().iter().map(|s| s.to_string()).collect();
        let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
        let w = normal_tensor(&mut seeded(9), &[2, 4], 1.0);
        let report = check_gradients(
            &inputs,
            |g, v| {
                let b = Bound::from_pairs(names.iter().cloned().zip(v.iter().copied()).collect());
                let vars: Vec<Vec<Var>> = feats
                    .iter()
                    .map(|s| s.iter().map(|t| g.constant(t.clone())).collect())
                    .collect();
                let y = model.forward(g, &b, &vars)?;
                let w = g.constant(w.clone());
                let prod = g.mul(y, w)?;
                Ok(g.sum(prod))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", &report.failures[..report.failures.len().min(5)]);
    }
}
