//! A compact promptable segmenter with the SAM block layout.
//!
//! * image encoder: two stride-4 patch convolutions and a channel LayerNorm,
//!   giving a `C × S/16 × S/16` embedding;
//! * prompt encoder: random Fourier positional encoding of box corners plus
//!   learned corner-type embeddings, and a dense positional grid;
//! * mask decoder: one output token, a two-way transformer, ×4 transposed
//!   convolution upscaling and a hypernetwork head.
//!
//! The encoders are frozen; only the mask decoder is trained.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::path::Path;

use candle_core::{Module, Tensor, Var};
use candle_nn::{Conv2d, ConvTranspose2d, VarMap};
use image::imageops::FilterType;
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transformer::{Mlp, TwoWayTransformer};
use super::{normalize_boxes, ImageEmbedding, PromptEmbedding, ResizeTransform, Segmenter, PATCH};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ParamBlock};
use crate::data_io::RunConfig;
use crate::error::{Error, Result};
use crate::nn::resize::resize_bilinear;
use crate::nn::{checksum, device, gelu, image_to_tensor, layer_norm_2d, Init, LayerNorm, ParamBuilder, DTYPE};
use crate::prompt_gen::BoxPrompt;

pub const BLOCK_IMAGE_ENCODER: &str = "image_encoder";
pub const BLOCK_PROMPT_ENCODER: &str = "prompt_encoder";
pub const BLOCK_MASK_DECODER: &str = "mask_decoder";
const MODEL_KIND: &str = "segmenter";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    /// Side `S` of the square input canvas; a multiple of 16.
    pub input_size: usize,
    /// Embedding channels `C`.
    pub channels: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub seed: u64,
}

impl SegmenterConfig {
    /// 1024 input, 256 × 64 × 64 embedding.
    pub fn reference() -> Self {
        Self {
            input_size: 1024,
            channels: 256,
            decoder_depth: 2,
            heads: 1,
            seed: 0,
        }
    }

    pub fn toy(input_size: usize, channels: usize) -> Self {
        Self {
            input_size,
            channels,
            ..Self::reference()
        }
    }

    pub fn from_run_config(cfg: &RunConfig) -> Self {
        Self {
            input_size: cfg.segmenter_input_size,
            channels: cfg.segmenter_channels,
            decoder_depth: cfg.segmenter_decoder_depth,
            heads: 1,
            seed: cfg.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || self.input_size % PATCH != 0 {
            return bad(format!("segmenter input size {} is not a positive multiple of {PATCH}", self.input_size));
        }
        if self.channels < 4 || self.channels % 2 != 0 {
            return bad(format!("segmenter channels {} must be even and at least 4", self.channels));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!("{} heads do not divide {} channels", self.heads, self.channels));
        }
        if self.decoder_depth == 0 {
            return bad("decoder depth must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input_size / PATCH
    }

    fn hidden(&self) -> usize {
        (self.channels / 4).max(2)
    }

    fn upscale_channels(&self) -> (usize, usize) {
        ((self.channels / 4).max(2), (self.channels / 8).max(2))
    }
}

struct ImageEncoder {
    patch1: Conv2d,
    patch2: Conv2d,
    norm: LayerNorm,
}

impl ImageEncoder {
    fn new(pb: &ParamBuilder, cfg: &SegmenterConfig) -> Result<Self> {
        Ok(Self {
            patch1: pb.pp("patch1").conv2d(3, cfg.hidden(), 4, 4, 0)?,
            patch2: pb.pp("patch2").conv2d(cfg.hidden(), cfg.channels, 4, 4, 0)?,
            norm: pb.pp("neck_norm").layer_norm(cfg.channels)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = gelu(&self.patch1.forward(x)?)?;
        let x = self.patch2.forward(&x)?;
        Ok(layer_norm_2d(&self.norm, &x)?)
    }
}

struct PromptEncoder {
    gaussian: Tensor,
    corner_embed: [Tensor; 2],
    no_mask_embed: Tensor,
}

impl PromptEncoder {
    fn new(pb: &ParamBuilder, cfg: &SegmenterConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            gaussian: pb.get(&[2, c / 2], "pe_gaussian", Init::Normal(1.0))?,
            corner_embed: [
                pb.get(&[c], "corner_embed.0", Init::Normal(1.0))?,
                pb.get(&[c], "corner_embed.1", Init::Normal(1.0))?,
            ],
            no_mask_embed: pb.get(&[c], "no_mask_embed", Init::Normal(1.0))?,
        })
    }

    /// `(N, 2)` `(x, y)` coordinates normalized to `[0, 1]` → `(N, C)`.
    fn positional(&self, coords: &Tensor) -> Result<Tensor> {
        let c = ((coords * 2.0)? - 1.0)?;
        let proj = (c.matmul(&self.gaussian)? * (2.0 * PI))?;
        Ok(Tensor::cat(&[proj.sin()?, proj.cos()?], 1)?)
    }

    /// `(1, g·g, C)` encoding of the embedding-grid cell centres, row-major.
    fn dense_pe(&self, g: usize) -> Result<Tensor> {
        let mut xy = Vec::with_capacity(2 * g * g);
        for y in 0..g {
            for x in 0..g {
                xy.push((x as f64 + 0.5) / g as f64);
                xy.push((y as f64 + 0.5) / g as f64);
            }
        }
        let coords = Tensor::from_vec(xy, (g * g, 2), &device())?;
        Ok(self.positional(&coords)?.unsqueeze(0)?)
    }

    fn encode_box(&self, transform: &ResizeTransform, b: &BoxPrompt) -> Result<Tensor> {
        let s = transform.input_size as f64;
        let c = transform.box_to_input(b).map(|v| v / s);
        let coords = Tensor::from_vec(c.to_vec(), (2, 2), &device())?;
        let pe = self.positional(&coords)?;
        let types = Tensor::stack(&self.corner_embed, 0)?;
        Ok((pe + types)?.unsqueeze(0)?)
    }
}

struct MaskDecoder {
    output_token: Tensor,
    transformer: TwoWayTransformer,
    upscale1: ConvTranspose2d,
    upscale_norm: LayerNorm,
    upscale2: ConvTranspose2d,
    hypernetwork: Mlp,
}

impl MaskDecoder {
    fn new(pb: &ParamBuilder, cfg: &SegmenterConfig) -> Result<Self> {
        let c = cfg.channels;
        let (u1, u2) = cfg.upscale_channels();
        Ok(Self {
            output_token: pb.get(&[1, 1, c], "output_token", Init::Normal(1.0))?,
            transformer: TwoWayTransformer::new(&pb.pp("transformer"), c, cfg.decoder_depth, cfg.heads)?,
            upscale1: pb.pp("upscale1").conv_transpose2d(c, u1, 2, 2)?,
            upscale_norm: pb.pp("upscale_norm").layer_norm(u1)?,
            upscale2: pb.pp("upscale2").conv_transpose2d(u1, u2, 2, 2)?,
            hypernetwork: Mlp::new(&pb.pp("hypernetwork"), &[c, c, c, u2])?,
        })
    }

    /// Low-resolution logits `(1, 1, 4g, 4g)` for one box.
    fn forward(
        &self,
        features: &Tensor,
        dense_pe: &Tensor,
        sparse: &Tensor,
        no_mask: &Tensor,
    ) -> Result<Tensor> {
        let (_, c, h, w) = features.dims4()?;
        let tokens = Tensor::cat(&[&self.output_token, sparse], 1)?;
        let src = features.broadcast_add(&no_mask.reshape((1, c, 1, 1))?)?;
        let src = crate::nn::to_tokens(&src)?;
        let (tokens, src) = self.transformer.forward(&tokens, &src, dense_pe)?;
        let src = crate::nn::from_tokens(&src, h, w)?;
        let up = self.upscale1.forward(&src)?;
        let up = gelu(&layer_norm_2d(&self.upscale_norm, &up)?)?;
        let up = gelu(&self.upscale2.forward(&up)?)?;
        let (_, cu, uh, uw) = up.dims4()?;
        let hyper = self.hypernetwork.forward(&tokens.narrow(1, 0, 1)?)?; // (1, 1, cu)
        let masks = hyper.matmul(&up.reshape((1, cu, uh * uw))?)?;
        Ok(masks.reshape((1, 1, uh, uw))?)
    }
}

pub struct SamLite {
    config: SegmenterConfig,
    image_encoder: ImageEncoder,
    prompt_encoder: PromptEncoder,
    mask_decoder: MaskDecoder,
    image_vars: VarMap,
    prompt_vars: VarMap,
    decoder_vars: VarMap,
}

impl SamLite {
    pub fn new(config: SegmenterConfig) -> Result<Self> {
        config.validate()?;
        let rng = RefCell::new(ChaCha8Rng::seed_from_u64(config.seed));
        let (image_vars, prompt_vars, decoder_vars) = (VarMap::new(), VarMap::new(), VarMap::new());
        let image_encoder =
            ImageEncoder::new(&ParamBuilder::new(&image_vars, &rng).pp(BLOCK_IMAGE_ENCODER), &config)?;
        let prompt_encoder =
            PromptEncoder::new(&ParamBuilder::new(&prompt_vars, &rng).pp(BLOCK_PROMPT_ENCODER), &config)?;
        let mask_decoder =
            MaskDecoder::new(&ParamBuilder::new(&decoder_vars, &rng).pp(BLOCK_MASK_DECODER), &config)?;
        Ok(Self {
            config,
            image_encoder,
            prompt_encoder,
            mask_decoder,
            image_vars,
            prompt_vars,
            decoder_vars,
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    pub fn blocks(&self) -> [ParamBlock<'_>; 3] {
        [
            ParamBlock { name: BLOCK_IMAGE_ENCODER, vars: &self.image_vars, frozen: true },
            ParamBlock { name: BLOCK_PROMPT_ENCODER, vars: &self.prompt_vars, frozen: true },
            ParamBlock { name: BLOCK_MASK_DECODER, vars: &self.decoder_vars, frozen: false },
        ]
    }

    pub fn decoder_vars(&self) -> &VarMap {
        &self.decoder_vars
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.decoder_vars.all_vars()
    }

    /// Digest of the frozen encoder blocks.
    pub fn frozen_checksum(&self) -> Result<u64> {
        Ok(checksum(&self.image_vars)? ^ checksum(&self.prompt_vars)?.rotate_left(1))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, MODEL_KIND, &serde_json::to_value(self.config)?, &self.blocks())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_model(MODEL_KIND)?;
        let config: SegmenterConfig = serde_json::from_value(ck.config.clone())?;
        let model = Self::new(config)?;
        for block in model.blocks() {
            ck.restore_into(block.vars)?;
        }
        Ok(model)
    }

    /// Prompt-encoder output for normalized boxes.
    pub fn encode_prompts(&self, transform: &ResizeTransform, boxes: &[BoxPrompt]) -> Result<PromptEmbedding> {
        let boxes = normalize_boxes(boxes, transform.original)?;
        let sparse = boxes
            .iter()
            .map(|b| self.prompt_encoder.encode_box(transform, b))
            .collect::<Result<_>>()?;
        Ok(PromptEmbedding { boxes, sparse })
    }

    /// Upsamples decoder logits to the canvas, drops the padding, and resizes
    /// to the original image size.
    fn postprocess(&self, low: &Tensor, t: &ResizeTransform) -> Result<Tensor> {
        let s = t.input_size;
        let x = resize_bilinear(low, s, s)?;
        let x = x.narrow(2, 0, t.resized.0)?.narrow(3, 0, t.resized.1)?;
        let x = resize_bilinear(&x, t.original.0, t.original.1)?;
        Ok(x.squeeze(0)?.squeeze(0)?)
    }
}

impl Segmenter for SamLite {
    fn encode_image(&self, image: &RgbImage) -> Result<ImageEmbedding> {
        let (h, w) = (image.height() as usize, image.width() as usize);
        let transform = ResizeTransform::new((h, w), self.config.input_size)?;
        let (rh, rw) = transform.resized;
        let x = if (rh, rw) == (h, w) {
            image_to_tensor(image)?
        } else {
            image_to_tensor(&image::imageops::resize(image, rw as u32, rh as u32, FilterType::Triangle))?
        };
        let (ph, pw) = transform.padding();
        let x = x.unsqueeze(0)?.pad_with_zeros(2, 0, ph)?.pad_with_zeros(3, 0, pw)?;
        let features = self.image_encoder.forward(&x.to_dtype(DTYPE)?)?.detach();
        Ok(ImageEmbedding { features, transform })
    }

    fn predict_logits(&self, embedding: &ImageEmbedding, boxes: &[BoxPrompt]) -> Result<Tensor> {
        let prompts = self.encode_prompts(&embedding.transform, boxes)?;
        let dense_pe = self.prompt_encoder.dense_pe(self.config.grid())?;
        let mut merged: Option<Tensor> = None;
        for sparse in &prompts.sparse {
            let low = self.mask_decoder.forward(
                &embedding.features,
                &dense_pe,
                sparse,
                &self.prompt_encoder.no_mask_embed,
            )?;
            let logits = self.postprocess(&low, &embedding.transform)?;
            merged = Some(match merged {
                None => logits,
                Some(m) => m.maximum(&logits)?,
            });
        }
        Ok(merged.expect("normalized prompts are never empty"))
    }
}
