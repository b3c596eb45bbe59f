use candle_core::Tensor;

use crate::error::{contract, Result};
use crate::nn::sigmoid;

/// Floor applied inside the logarithms of the cross-entropy term.
pub const LOG_EPS: f64 = 1e-7;
/// Added to both sides of the soft-Jaccard ratio so empty masks stay finite.
pub const JACCARD_SMOOTH: f64 = 1e-9;

/// Pixel-mean binary cross-entropy on probabilities with clipped logs.
pub fn cross_entropy(p: &Tensor, g: &Tensor) -> Result<Tensor> {
    let ln_p = p.maximum(LOG_EPS)?.log()?;
    let ln_q = p.affine(-1.0, 1.0)?.maximum(LOG_EPS)?.log()?;
    let ce = ((g * ln_p)? + (g.affine(-1.0, 1.0)? * ln_q)?)?;
    Ok(ce.mean_all()?.neg()?)
}

/// `Σpg / (Σp + Σg − Σpg)` per sample of a `(B, ...)` batch.
pub fn soft_jaccard(p: &Tensor, g: &Tensor) -> Result<Tensor> {
    let b = p.dim(0)?;
    let p = p.reshape((b, ()))?;
    let g = g.reshape((b, ()))?;
    let inter = (&p * &g)?.sum(1)?;
    let union = ((p.sum(1)? + g.sum(1)?)? - &inter)?;
    Ok(((inter + JACCARD_SMOOTH)? / (union + JACCARD_SMOOTH)?)?)
}

/// `CE(p, g) + (1 − J(p, g))`, with the Jaccard term averaged over the batch.
pub fn lstn_loss_from_probs(p: &Tensor, g: &Tensor) -> Result<Tensor> {
    contract!(p.dims() == g.dims(), "prediction {:?} vs target {:?}", p.dims(), g.dims());
    let j = soft_jaccard(p, g)?.mean_all()?;
    Ok((cross_entropy(p, g)? + j.affine(-1.0, 1.0)?)?)
}

pub fn lstn_loss(logits: &Tensor, g: &Tensor) -> Result<Tensor> {
    lstn_loss_from_probs(&sigmoid(logits)?, g)
}
