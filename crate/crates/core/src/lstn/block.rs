//! Long short-term attention block.
//!
//! For input tokens `x` of the current frame:
//!
//! ```text
//! f̃  = LN2(x + Wo·SA(LN1(x)))
//! q  = φ(f̃)
//! f_l = Attn(q, k_long, v_long)            dense
//! f_s = Attn_w(q, k_short, v_short)        w × w window
//! z  = f̃ + f_l + f_s
//! out = z + W2·GELU(GN(W1·LN3(z)))
//! ```
//!
//! Memory entries are `k = φ(f̃)` and `v = ψ(f̃ + MaskConv(M))`, with the same
//! `φ` used for queries and keys.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, GroupNorm, Linear};

use super::memory::MemoryEntry;
use super::LstnConfig;
use crate::error::{contract, Result};
use crate::nn::attention::{dense_attention, windowed_attention, WindowTable};
use crate::nn::{device, gelu, pad_to_multiple, to_tokens, LayerNorm, ParamBuilder};

/// Strided convolutions taking a `(B, 1, H, W)` mask to the `H/16 × W/16` grid.
pub struct MaskConv {
    down1: Conv2d,
    down2: Conv2d,
}

impl MaskConv {
    fn new(pb: &ParamBuilder, cfg: &LstnConfig) -> Result<Self> {
        Ok(Self {
            down1: pb.pp("down1").conv2d(1, cfg.skip_channels(), 4, 4, 0)?,
            down2: pb.pp("down2").conv2d(cfg.skip_channels(), cfg.channels, 4, 4, 0)?,
        })
    }

    /// Mask features as tokens `(B, N, C)`.
    pub fn forward(&self, mask: &Tensor) -> Result<Tensor> {
        let x = pad_to_multiple(mask, 16)?;
        let x = gelu(&self.down1.forward(&x)?)?;
        Ok(to_tokens(&self.down2.forward(&x)?)?)
    }
}

pub struct LstBlock {
    norm1: LayerNorm,
    sa_q: Linear,
    sa_k: Linear,
    sa_v: Linear,
    sa_out: Linear,
    norm2: LayerNorm,
    phi: Linear,
    psi: Linear,
    mask_conv: MaskConv,
    norm3: LayerNorm,
    fc1: Linear,
    group_norm: GroupNorm,
    fc2: Linear,
    heads: usize,
    positional: bool,
    long_term: bool,
    short_term: bool,
}

impl LstBlock {
    pub(super) fn new(pb: &ParamBuilder, cfg: &LstnConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            norm1: pb.pp("norm1").layer_norm(c)?,
            sa_q: pb.pp("self_attn.q").linear(c, c)?,
            sa_k: pb.pp("self_attn.k").linear(c, c)?,
            sa_v: pb.pp("self_attn.v").linear(c, c)?,
            sa_out: pb.pp("self_attn.out").linear(c, c)?,
            norm2: pb.pp("norm2").layer_norm(c)?,
            phi: pb.pp("phi").linear(c, c)?,
            psi: pb.pp("psi").linear(c, c)?,
            mask_conv: MaskConv::new(&pb.pp("mask_conv"), cfg)?,
            norm3: pb.pp("norm3").layer_norm(c)?,
            fc1: pb.pp("mlp.fc1").linear(c, 2 * c)?,
            group_norm: pb.pp("mlp.group_norm").group_norm(2 * c)?,
            fc2: pb.pp("mlp.fc2").linear(2 * c, c)?,
            heads: cfg.heads,
            positional: cfg.positional_encoding,
            long_term: cfg.long_term,
            short_term: cfg.short_term,
        })
    }

    /// `f̃` for tokens `(B, N, C)` laid out on `grid`.
    pub fn self_attend(&self, x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let qk = if self.positional {
            let (_, _, c) = x.dims3()?;
            h.broadcast_add(&sinusoidal_2d(grid, c)?)?
        } else {
            h.clone()
        };
        let a = dense_attention(
            &self.sa_q.forward(&qk)?,
            &self.sa_k.forward(&qk)?,
            &self.sa_v.forward(&h)?,
            self.heads,
        )?;
        Ok(self.norm2.forward(&(x + self.sa_out.forward(&a)?)?)?)
    }

    /// `φ(f̃)`, used both as the query of the current frame and as the key of a
    /// memory entry.
    pub fn project_key(&self, refined: &Tensor) -> Result<Tensor> {
        Ok(self.phi.forward(refined)?)
    }

    pub fn memory_entry(
        &self,
        refined: &Tensor,
        mask: &Tensor,
        frame: usize,
        grid: (usize, usize),
    ) -> Result<MemoryEntry> {
        let m = self.mask_conv.forward(mask)?;
        contract!(
            m.dims() == refined.dims(),
            "mask features {:?} do not match frame features {:?}",
            m.dims(),
            refined.dims()
        );
        Ok(MemoryEntry {
            frame,
            key: self.project_key(refined)?,
            value: self.psi.forward(&(refined + m)?)?,
            grid,
        })
    }

    pub fn long_term_attention(&self, q: &Tensor, long: &MemoryEntry) -> Result<Tensor> {
        dense_attention(q, &long.key, &long.value, self.heads)
    }

    pub fn short_term_attention(
        &self,
        q: &Tensor,
        short: &MemoryEntry,
        table: &WindowTable,
    ) -> Result<Tensor> {
        contract!(short.grid == table.grid, "short-term entry grid {:?} != {:?}", short.grid, table.grid);
        windowed_attention(q, &short.key, &short.value, self.heads, table)
    }

    /// Adds the memory readouts to `f̃` and applies the MLP.
    pub fn aggregate(
        &self,
        refined: &Tensor,
        long: &MemoryEntry,
        short: &MemoryEntry,
        table: &WindowTable,
    ) -> Result<Tensor> {
        let q = self.project_key(refined)?;
        let mut z = refined.clone();
        if self.long_term {
            z = (z + self.long_term_attention(&q, long)?)?;
        }
        if self.short_term {
            z = (z + self.short_term_attention(&q, short, table)?)?;
        }
        let h = self.fc1.forward(&self.norm3.forward(&z)?)?;
        let h = self.group_norm.forward(&h.transpose(1, 2)?.contiguous()?)?;
        let h = gelu(&h.transpose(1, 2)?.contiguous()?)?;
        Ok((z + self.fc2.forward(&h)?)?)
    }

    /// Returns the block output and `f̃`.
    pub fn forward(
        &self,
        x: &Tensor,
        long: &MemoryEntry,
        short: &MemoryEntry,
        table: &WindowTable,
    ) -> Result<(Tensor, Tensor)> {
        let refined = self.self_attend(x, table.grid)?;
        let out = self.aggregate(&refined, long, short, table)?;
        Ok((out, refined))
    }
}

/// `(1, H·W, C)` sinusoidal encoding: the first half of the channels encodes
/// the row, the second half the column.
pub fn sinusoidal_2d(grid: (usize, usize), channels: usize) -> Result<Tensor> {
    let (h, w) = grid;
    let half = channels / 2;
    let mut pe = vec![0f64; h * w * channels];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * channels;
            for (offset, pos) in [(0, y), (half, x)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    pe[base + offset + 2 * i] = (pos as f64 * freq).sin();
                    pe[base + offset + 2 * i + 1] = (pos as f64 * freq).cos();
                }
            }
        }
    }
    Ok(Tensor::from_vec(pe, (1, h * w, channels), &device())?)
}
