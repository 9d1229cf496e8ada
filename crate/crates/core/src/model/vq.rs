//! Cosine vector quantization onto the frozen subword table.
//!
//! The keyword for each normalized CLS row is the table row with the highest
//! cosine similarity. Its forward value is that exact row, while gradients
//! flow through the temperature-softmax mixture of all rows.

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Similarities `s[n, v] = cos(z_n, E_v)` for `z[N×D_t]` against the table.
pub fn vq_similarity(g: &mut Graph, z: Var, table: &Tensor) -> Result<Var> {
    let e = g.constant(table.clone());
    g.cosine_similarity_matrix(z, e)
}

/// Row-wise argmax over `s[N×V]` (lowest index wins ties) and the selected
/// table rows. Carries no gradient.
pub fn vq_hard(s: &Tensor, table: &Tensor) -> Result<(Vec<usize>, Tensor)> {
    if s.cols() != table.rows() {
        return Err(Error::Dimension {
            op: "vq_hard",
            left: s.shape().to_vec(),
            right: table.shape().to_vec(),
        });
    }
    let indices: Vec<usize> = (0..s.rows()).map(|r| argmax(s.row(r))).collect();
    let rows: Vec<&[f64]> = indices.iter().map(|&i| table.row(i)).collect();
    Ok((indices, Tensor::from_rows(&rows)?))
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `softmax(s / tau) · E`: the differentiable mixture of table rows.
pub fn vq_soft(g: &mut Graph, s: Var, tau: f64, table: &Tensor) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("VQ temperature must be positive, got {tau}")));
    }
    let w = g.softmax(s, tau)?;
    let e = g.constant(table.clone());
    g.matmul(w, e)
}

/// Straight-through keyword: value of `hard`, gradient of `soft`.
pub fn vq_straight_through(g: &mut Graph, hard: Var, soft: Var) -> Result<Var> {
    g.straight_through(hard, soft)
}

/// Output of [`quantize`].
#[derive(Debug, Clone)]
pub struct Quantized {
    pub similarity: Var,
    pub indices: Vec<usize>,
    pub hard: Var,
    pub soft: Var,
    pub keywords: Var,
}

/// Full quantization path for `z[N×D_t]`.
pub fn quantize(g: &mut Graph, z: Var, table: &Tensor, tau: f64) -> Result<Quantized> {
    let similarity = vq_similarity(g, z, table)?;
    let (indices, hard_rows) = vq_hard(g.value(similarity), table)?;
    let hard = g.constant(hard_rows);
    let soft = vq_soft(g, similarity, tau, table)?;
    let keywords = vq_straight_through(g, hard, soft)?;
    Ok(Quantized {
        similarity,
        indices,
        hard,
        soft,
        keywords,
    })
}
