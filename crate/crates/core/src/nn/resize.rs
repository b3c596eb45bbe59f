//! Differentiable bilinear resizing, expressed as two matrix products so that
//! gradients need nothing beyond matmul.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::device;

/// `(out_len, in_len)` bilinear interpolation matrix with half-pixel centres.
pub fn interpolation_matrix(out_len: usize, in_len: usize) -> Result<Tensor> {
    let mut m = vec![0f64; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[o * in_len + i0] += 1.0 - frac;
        m[o * in_len + i1] += frac;
    }
    Ok(Tensor::from_vec(m, (out_len, in_len), &device())?)
}

/// Resizes a `(B, C, H, W)` map to `(B, C, out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ry = interpolation_matrix(out_h, h)?;
    let rx_t = interpolation_matrix(out_w, w)?.t()?;
    let flat = x.reshape((b * c, h, w))?;
    let y = ry.broadcast_matmul(&flat)?.broadcast_matmul(&rx_t)?;
    Ok(y.reshape((b, c, out_h, out_w))?)
}
