use super::params::{Bound, ParamSet};
use crate::diffcore::nn::{EncoderLayerVars, FeedForwardVars};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, Rng};

const ATTENTION_WEIGHTS: [&str; 4] = ["wq", "wk", "wv", "wo"];

/// Learnable convex combination of hidden layers:
/// `Σ_l softmax(layer_logits)_l · features_l`.
pub fn weighted_layer_sum(g: &mut Graph, features: &[Var], layer_logits: Var) -> Result<Var> {
    let weights = layer_weights(g, features.len(), layer_logits)?;
    g.weighted_sum(weights, features)
}

/// Softmax of the layer logits, checked against the feature layer count.
pub(crate) fn layer_weights(g: &mut Graph, layers: usize, layer_logits: Var) -> Result<Var> {
    let n = g.value(layer_logits).len();
    if n != layers {
        return Err(Error::Dimension {
            op: "weighted_layer_sum",
            left: vec![n],
            right: vec![layers],
        });
    }
    g.softmax(layer_logits, 1.0)
}

/// Adds `encoder.*` entries for one encoder layer of width `d`.
pub fn init_encoder_layer(params: &mut ParamSet, rng: &mut Rng, d: usize, with_ffn: bool) {
    let s = 1.0 / (d as f64).sqrt();
    for w in ATTENTION_WEIGHTS {
        params.insert(format!("encoder.{w}"), normal_tensor(rng, &[d, d], s));
        params.insert(format!("encoder.b{}", &w[1..]), Tensor::zeros(&[d]));
    }
    params.insert("encoder.ln1_gain", Tensor::filled(&[d], 1.0));
    params.insert("encoder.ln1_bias", Tensor::zeros(&[d]));
    if with_ffn {
        let hidden = 4 * d;
        params.insert("encoder.ffn_w1", normal_tensor(rng, &[d, hidden], s));
        params.insert("encoder.ffn_b1", Tensor::zeros(&[hidden]));
        params.insert("encoder.ffn_w2", normal_tensor(rng, &[hidden, d], 1.0 / (hidden as f64).sqrt()));
        params.insert("encoder.ffn_b2", Tensor::zeros(&[d]));
        params.insert("encoder.ln2_gain", Tensor::filled(&[d], 1.0));
        params.insert("encoder.ln2_bias", Tensor::zeros(&[d]));
    }
}

/// Scalar count of the feed-forward sublayer: two affine maps through a
/// `4d` hidden width plus the second layer norm.
pub fn ffn_parameter_count(d: usize) -> usize {
    let hidden = 4 * d;
    d * hidden + hidden + hidden * d + d + 2 * d
}

pub fn bind_encoder_layer(b: &Bound, with_ffn: bool) -> EncoderLayerVars {
    EncoderLayerVars {
        wq: b.var("encoder.wq"),
        bq: b.var("encoder.bq"),
        wk: b.var("encoder.wk"),
        bk: b.var("encoder.bk"),
        wv: b.var("encoder.wv"),
        bv: b.var("encoder.bv"),
        wo: b.var("encoder.wo"),
        bo: b.var("encoder.bo"),
        ln1_gain: b.var("encoder.ln1_gain"),
        ln1_bias: b.var("encoder.ln1_bias"),
        ffn: with_ffn.then(|| FeedForwardVars {
            w1: b.var("encoder.ffn_w1"),
            b1: b.var("encoder.ffn_b1"),
            w2: b.var("encoder.ffn_w2"),
            b2: b.var("encoder.ffn_b2"),
            ln2_gain: b.var("encoder.ln2_gain"),
            ln2_bias: b.var("encoder.ln2_bias"),
        }),
    }
}
