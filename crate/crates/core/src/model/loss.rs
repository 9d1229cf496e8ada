use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};

/// Symmetric InfoNCE over a batch of paired unit embeddings.
///
/// Logits are cosine similarities scaled by `exp(log_temperature)`; the loss
/// averages cross-entropy over rows (speech → image) and over columns
/// (image → speech), with matched pairs on the diagonal.
pub fn contrastive_loss(g: &mut Graph, speech: Var, image: Var, log_temperature: Var) -> Result<Var> {
    let b = g.value(speech).rows();
    if b < 2 {
        return Err(Error::BatchTooSmall {
            op: "contrastive_loss",
            required: 2,
            actual: b,
        });
    }
    if g.value(image).rows() != b {
        return Err(Error::Dimension {
            op: "contrastive_loss",
            left: g.value(speech).shape().to_vec(),
            right: g.value(image).shape().to_vec(),
        });
    }
    let cos = g.cosine_similarity_matrix(speech, image)?;
    let scale = g.exp(log_temperature);
    let logits = g.scale_by(cos, scale)?;
    let targets: Vec<usize> = (0..b).collect();
    let forward = g.cross_entropy_rows(logits, &targets)?;
    let transposed = g.transpose(logits)?;
    let backward = g.cross_entropy_rows(transposed, &targets)?;
    let total = g.add(forward, backward)?;
    Ok(g.scale(total, 0.5))
}
