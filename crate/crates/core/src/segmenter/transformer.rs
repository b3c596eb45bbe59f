//! Two-way transformer of the mask decoder: prompt tokens and image tokens
//! attend to each other in alternation.

use candle_core::{Module, Tensor};
use candle_nn::Linear;

use crate::error::Result;
use crate::nn::attention::dense_attention;
use crate::nn::{gelu, LayerNorm, ParamBuilder};

pub(super) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: pb.pp("q_proj").linear(dim, dim)?,
            k: pb.pp("k_proj").linear(dim, dim)?,
            v: pb.pp("v_proj").linear(dim, dim)?,
            out: pb.pp("out_proj").linear(dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let o = dense_attention(
            &self.q.forward(q)?,
            &self.k.forward(k)?,
            &self.v.forward(v)?,
            self.heads,
        )?;
        Ok(self.out.forward(&o)?)
    }
}

pub(super) struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(pb: &ParamBuilder, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| pb.pp(format!("layers.{i}")).linear(d[0], d[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = gelu(&x)?;
            }
        }
        Ok(x)
    }
}

struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    token_to_image: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    image_to_token: Attention,
    norm4: LayerNorm,
    skip_first_pe: bool,
}

impl TwoWayBlock {
    fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        query_pe: &Tensor,
        key_pe: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let queries = if self.skip_first_pe {
            self.self_attn.forward(queries, queries, queries)?
        } else {
            let q = (queries + query_pe)?;
            (queries + self.self_attn.forward(&q, &q, queries)?)?
        };
        let queries = self.norm1.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = (keys + key_pe)?;
        let queries = (&queries + self.token_to_image.forward(&q, &k, keys)?)?;
        let queries = self.norm2.forward(&queries)?;

        let queries = (&queries + self.mlp.forward(&queries)?)?;
        let queries = self.norm3.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let keys = (keys + self.image_to_token.forward(&k, &q, &queries)?)?;
        let keys = self.norm4.forward(&keys)?;
        Ok((queries, keys))
    }
}

pub(super) struct TwoWayTransformer {
    blocks: Vec<TwoWayBlock>,
    final_attn: Attention,
    norm_final: LayerNorm,
}

impl TwoWayTransformer {
    pub fn new(pb: &ParamBuilder, dim: usize, depth: usize, heads: usize) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| {
                let b = pb.pp(format!("layers.{i}"));
                Ok(TwoWayBlock {
                    self_attn: Attention::new(&b.pp("self_attn"), dim, heads)?,
                    norm1: b.pp("norm1").layer_norm(dim)?,
                    token_to_image: Attention::new(&b.pp("cross_attn_token_to_image"), dim, heads)?,
                    norm2: b.pp("norm2").layer_norm(dim)?,
                    mlp: Mlp::new(&b.pp("mlp"), &[dim, 2 * dim, dim])?,
                    norm3: b.pp("norm3").layer_norm(dim)?,
                    image_to_token: Attention::new(&b.pp("cross_attn_image_to_token"), dim, heads)?,
                    norm4: b.pp("norm4").layer_norm(dim)?,
                    skip_first_pe: i == 0,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            final_attn: Attention::new(&pb.pp("final_attn_token_to_image"), dim, heads)?,
            norm_final: pb.pp("norm_final_attn").layer_norm(dim)?,
        })
    }

    /// `tokens (1, Nt, C)`, `image (1, N, C)`, `image_pe (1, N, C)`; returns
    /// updated `(tokens, image)`.
    pub fn forward(
        &self,
        tokens: &Tensor,
        image: &Tensor,
        image_pe: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let mut queries = tokens.clone();
        let mut keys = image.clone();
        for block in &self.blocks {
            (queries, keys) = block.forward(&queries, &keys, tokens, image_pe)?;
        }
        let q = (&queries + tokens)?;
        let k = (&keys + image_pe)?;
        let queries = (&queries + self.final_attn.forward(&q, &k, &keys)?)?;
        Ok((self.norm_final.forward(&queries)?, keys))
    }
}
