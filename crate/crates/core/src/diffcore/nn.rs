//! Post-norm transformer encoder layer built from graph primitives.
//!
//! Both entry points take a `queries` count: outputs are produced only for
//! the first `queries` positions while keys and values span the whole
//! sequence. With `queries == T` this is the ordinary layer; CLS-style
//! readouts that only consume the leading positions can skip the rest, and
//! the rows they do get are identical to the full computation.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Graph handles for one encoder layer's parameters.
#[derive(Debug, Clone)]
pub struct EncoderLayerVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ffn: Option<FeedForwardVars>,
}

#[derive(Debug, Clone)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `queries × d` output rows.
    pub output: Var,
    /// One `queries × T` attention weight matrix per head.
    pub weights: Vec<Var>,
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Scaled dot-product self-attention with `heads` heads over `x[T×d]`,
/// evaluated for the first `queries` positions.
pub fn multi_head_attention(
    g: &mut Graph,
    x: Var,
    p: &EncoderLayerVars,
    heads: usize,
    queries: usize,
) -> Result<AttentionOutput> {
    let xv = g.value(x);
    let (t, d) = (xv.rows(), xv.cols());
    if heads == 0 || d % heads != 0 {
        return Err(Error::Configuration(format!(
            "model width {d} is not divisible by {heads} attention heads"
        )));
    }
    if queries == 0 || queries > t {
        return Err(Error::Parameter(format!(
            "query count {queries} must be in [1, {t}]"
        )));
    }
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let xq = if queries == t { x } else { g.slice_rows(x, 0, queries)? };
    let q = affine(g, xq, p.wq, p.bq)?;
    let k = affine(g, x, p.wk, p.bk)?;
    let v = affine(g, x, p.wv, p.bv)?;

    let mut head_outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * head_dim, head_dim)?,
                g.slice_cols(k, h * head_dim, head_dim)?,
                g.slice_cols(v, h * head_dim, head_dim)?,
            )
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores, 1.0)?;
        head_outputs.push(g.matmul(attn, vh)?);
        weights.push(attn);
    }
    let concat = if heads == 1 {
        head_outputs[0]
    } else {
        g.concat_cols(&head_outputs)?
    };
    let output = affine(g, concat, p.wo, p.bo)?;
    Ok(AttentionOutput { output, weights })
}

/// Attention sublayer with residual and layer norm, optionally followed by a
/// GELU feed-forward sublayer with its own residual and layer norm.
pub fn transformer_encoder_layer(
    g: &mut Graph,
    x: Var,
    p: &EncoderLayerVars,
    heads: usize,
    with_ffn: bool,
    queries: usize,
) -> Result<AttentionOutput> {
    if with_ffn != p.ffn.is_some() {
        return Err(Error::Configuration(format!(
            "with_ffn={with_ffn} but feed-forward parameters are {}",
            if p.ffn.is_some() { "present" } else { "absent" }
        )));
    }
    let attn = multi_head_attention(g, x, p, heads, queries)?;
    let t = g.value(x).rows();
    let residual = if queries == t { x } else { g.slice_rows(x, 0, queries)? };
    let h = g.add(residual, attn.output)?;
    let mut h = g.layer_norm(h, p.ln1_gain, p.ln1_bias)?;
    if let Some(f) = &p.ffn {
        let inner = affine(g, h, f.w1, f.b1)?;
        let inner = g.gelu(inner);
        let out = affine(g, inner, f.w2, f.b2)?;
        let sum = g.add(h, out)?;
        h = g.layer_norm(sum, f.ln2_gain, f.ln2_bias)?;
    }
    Ok(AttentionOutput {
        output: h,
        weights: attn.weights,
    })
}
