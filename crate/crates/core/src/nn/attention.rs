//! Scaled dot-product attention over token sequences, dense or restricted to
//! a square spatial window.
//!
//! Queries are `(B, Nq, C)`, keys `(B, Nk, C)`, values `(B, Nk, Cv)`; with `h`
//! heads the channels split into `h` groups and the score scale is
//! `1/sqrt(C/h)`.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::device;

/// Logit assigned to out-of-window slots. Large enough that `exp` underflows
/// to exactly zero in `f64`.
const MASKED: f64 = -1e30;

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if c % heads != 0 {
        return Err(Error::Contract(format!("{c} channels do not split into {heads} heads")));
    }
    Ok(x.reshape((b, n, heads, c / heads))?.transpose(1, 2)?.contiguous()?)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, n, d) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, n, h * d))?)
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

/// Attention weights `(B, heads, Nq, Nk)`.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize) -> Result<Tensor> {
    let (_, _, c) = q.dims3()?;
    let (_, _, ck) = k.dims3()?;
    if c != ck {
        return Err(Error::Contract(format!("query width {c} != key width {ck}")));
    }
    let scale = 1.0 / ((c / heads) as f64).sqrt();
    let qh = split_heads(q, heads)?;
    let kh = split_heads(k, heads)?;
    let logits = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? * scale)?;
    softmax_last(&logits)
}

/// Every query attends to every key.
pub fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let w = attention_weights(q, k, heads)?;
    let vh = split_heads(v, heads)?;
    merge_heads(&w.matmul(&vh)?)
}

/// For each query cell of an `h × w` grid, the key cells of the `size × size`
/// window centred on it. Slots outside the grid are padding.
#[derive(Debug, Clone)]
pub struct WindowTable {
    pub grid: (usize, usize),
    pub size: usize,
    /// Slots per query after clipping the radius to the grid extent.
    pub slots: usize,
    /// `grid.0 * grid.1 * slots` key indices; padding points at the query itself.
    pub indices: Vec<u32>,
    /// Whether each slot lies inside the grid.
    pub valid: Vec<bool>,
}

impl WindowTable {
    pub fn new(grid: (usize, usize), size: usize) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::Config(format!(
                "short-term window must be a positive odd size, got {size}"
            )));
        }
        let (gh, gw) = grid;
        // slots further than the grid extent can never be valid
        let radius = (size / 2).min(gh.max(gw).saturating_sub(1));
        let side = 2 * radius + 1;
        let slots = side * side;
        let mut indices = Vec::with_capacity(gh * gw * slots);
        let mut valid = Vec::with_capacity(gh * gw * slots);
        let r = radius as isize;
        for py in 0..gh as isize {
            for px in 0..gw as isize {
                let own = (py as usize * gw + px as usize) as u32;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (ny, nx) = (py + dy, px + dx);
                        if ny >= 0 && nx >= 0 && (ny as usize) < gh && (nx as usize) < gw {
                            indices.push((ny as usize * gw + nx as usize) as u32);
                            valid.push(true);
                        } else {
                            indices.push(own);
                            valid.push(false);
                        }
                    }
                }
            }
        }
        Ok(Self {
            grid,
            size,
            slots,
            indices,
            valid,
        })
    }

    pub fn queries(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Gathers keys per window: `(B, heads, N, d)` → `(B, heads, N, S, d)`.
fn gather_windows(x: &Tensor, table: &WindowTable) -> Result<Tensor> {
    let (b, h, n, d) = x.dims4()?;
    let idx = Tensor::from_slice(&table.indices, table.indices.len(), &device())?;
    Ok(x.index_select(&idx, 2)?.reshape((b, h, n, table.slots, d))?)
}

/// Windowed attention weights `(B, heads, N, S)`, aligned with `table`.
pub fn windowed_attention_weights(
    q: &Tensor,
    k: &Tensor,
    heads: usize,
    table: &WindowTable,
) -> Result<Tensor> {
    let (_, nq, c) = q.dims3()?;
    let (_, nk, ck) = k.dims3()?;
    if nq != table.queries() || nk != table.queries() || c != ck {
        return Err(Error::Contract(format!(
            "windowed attention on {:?} grid got {nq} queries, {nk} keys",
            table.grid
        )));
    }
    let scale = 1.0 / ((c / heads) as f64).sqrt();
    let qh = split_heads(q, heads)?.unsqueeze(3)?; // (B, H, N, 1, d)
    let kw = gather_windows(&split_heads(k, heads)?, table)?; // (B, H, N, S, d)
    let logits = (kw.broadcast_mul(&qh)?.sum(D::Minus1)? * scale)?;
    let bias: Vec<f64> = table
        .valid
        .iter()
        .map(|&ok| if ok { 0.0 } else { MASKED })
        .collect();
    let bias = Tensor::from_vec(bias, (nq, table.slots), &device())?;
    softmax_last(&logits.broadcast_add(&bias)?)
}

/// Each query attends only to keys of the `size × size` window around its own
/// grid position, clipped at the borders.
pub fn windowed_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    table: &WindowTable,
) -> Result<Tensor> {
    let w = windowed_attention_weights(q, k, heads, table)?.unsqueeze(4)?; // (B, H, N, S, 1)
    let vw = gather_windows(&split_heads(v, heads)?, table)?; // (B, H, N, S, dv)
    merge_heads(&vw.broadcast_mul(&w)?.sum(3)?)
}
