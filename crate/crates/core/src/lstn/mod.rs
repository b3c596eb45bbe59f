//! Long short-term propagation network.
//!
//! A frame is encoded to stride-16 tokens, refined by a stack of
//! [`LstBlock`]s that read the memory bank, and decoded to mask logits with
//! a stride-4 skip connection. Frame indices are 0-based; the seed frame's
//! entries fill both the long-term and the short-term slot.

mod block;
mod loss;
mod memory;
mod train;

use std::cell::RefCell;
use std::path::Path;

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, VarMap};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ParamBlock};
use crate::data_io::{RunConfig, ShadowMask};
use crate::error::{contract, Error, Result};
use crate::nn::attention::WindowTable;
use crate::nn::resize::resize_bilinear;
use crate::nn::{device, gelu, image_to_tensor, pad_to_multiple, sigmoid, to_tokens, from_tokens, ParamBuilder, DTYPE};

pub use block::{sinusoidal_2d, LstBlock, MaskConv};
pub use loss::{cross_entropy, lstn_loss, lstn_loss_from_probs, soft_jaccard};
pub use memory::{FrameMemory, MemoryBank, MemoryEntry, MemoryStats};
pub use train::{train_lstn, TrainConfig, TrainLog, TrainRecord};

pub const STRIDE: usize = 16;
pub const BLOCK_ENCODER: &str = "encoder";
pub const BLOCK_LST: &str = "lst";
pub const BLOCK_DECODER: &str = "decoder";
const MODEL_KIND: &str = "lstn";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstnConfig {
    pub channels: usize,
    pub blocks: usize,
    pub window: usize,
    pub heads: usize,
    pub positional_encoding: bool,
    pub long_term: bool,
    pub short_term: bool,
    pub seed: u64,
}

impl Default for LstnConfig {
    fn default() -> Self {
        Self::from_run_config(&RunConfig::default())
    }
}

impl LstnConfig {
    pub fn from_run_config(cfg: &RunConfig) -> Self {
        Self {
            channels: cfg.lstn_channels,
            blocks: cfg.lst_blocks,
            window: cfg.short_window_w,
            heads: cfg.attention_heads,
            positional_encoding: cfg.positional_encoding,
            long_term: cfg.long_term,
            short_term: cfg.short_term,
            seed: cfg.seed,
        }
    }

    pub fn toy(channels: usize, blocks: usize) -> Self {
        Self {
            channels,
            blocks,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.window == 0 || self.window % 2 == 0 {
            return bad(format!("short-term window must be a positive odd size, got {}", self.window));
        }
        if self.blocks == 0 {
            return bad("at least one long short-term block is required".into());
        }
        if self.channels < 4 || self.channels % 4 != 0 {
            return bad(format!("channels {} must be a positive multiple of 4", self.channels));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!("{} heads do not divide {} channels", self.heads, self.channels));
        }
        Ok(())
    }

    pub fn skip_channels(&self) -> usize {
        (self.channels / 4).max(4)
    }
}

/// `⌈h/16⌉ × ⌈w/16⌉`.
pub fn feature_grid(size: (usize, usize)) -> (usize, usize) {
    (size.0.div_ceil(STRIDE), size.1.div_ceil(STRIDE))
}

struct FrameEncoder {
    stem: Conv2d,
    body: Conv2d,
    proj: Conv2d,
}

impl FrameEncoder {
    fn new(pb: &ParamBuilder, cfg: &LstnConfig) -> Result<Self> {
        let (c, s) = (cfg.channels, cfg.skip_channels());
        Ok(Self {
            stem: pb.pp("stem").conv2d(3, s, 4, 4, 0)?,
            body: pb.pp("body").conv2d(s, c, 4, 4, 0)?,
            proj: pb.pp("proj").conv2d(c, c, 1, 1, 0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = pad_to_multiple(x, STRIDE)?;
        let skip = gelu(&self.stem.forward(&x)?)?;
        let f = self.proj.forward(&gelu(&self.body.forward(&skip)?)?)?;
        Ok((f, skip))
    }
}

struct MaskHead {
    top: Conv2d,
    lateral: Conv2d,
    smooth: Conv2d,
    out: Conv2d,
}

impl MaskHead {
    fn new(pb: &ParamBuilder, cfg: &LstnConfig) -> Result<Self> {
        let (c, s) = (cfg.channels, cfg.skip_channels());
        Ok(Self {
            top: pb.pp("top").conv2d(c, s, 1, 1, 0)?,
            lateral: pb.pp("lateral").conv2d(s, s, 1, 1, 0)?,
            smooth: pb.pp("smooth").conv2d(s, s, 3, 1, 1)?,
            out: pb.pp("out").conv2d(s, 1, 1, 1, 0)?,
        })
    }

    fn forward(&self, f: &Tensor, skip: &Tensor, size: (usize, usize)) -> Result<Tensor> {
        let (_, _, sh, sw) = skip.dims4()?;
        let p = (resize_bilinear(&self.top.forward(f)?, sh, sw)? + self.lateral.forward(skip)?)?;
        let p = gelu(&self.smooth.forward(&p)?)?;
        let logits = resize_bilinear(&self.out.forward(&p)?, 4 * sh, 4 * sw)?;
        Ok(logits.narrow(2, 0, size.0)?.narrow(3, 0, size.1)?)
    }
}

/// Encoder output for a batch of frames.
#[derive(Debug, Clone)]
pub struct FrameFeature {
    /// `(B, H_f·W_f, C)`.
    pub tokens: Tensor,
    /// Stride-4 skip features `(B, C_s, 4H_f, 4W_f)`.
    pub skip: Tensor,
    pub grid: (usize, usize),
    pub size: (usize, usize),
}

impl FrameFeature {
    /// `(B, C, H_f, W_f)`.
    pub fn map(&self) -> Result<Tensor> {
        Ok(from_tokens(&self.tokens, self.grid.0, self.grid.1)?)
    }
}

/// Result of running the blocks and decoder on one frame.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// `(B, 1, H, W)`.
    pub logits: Tensor,
    /// `f̃` of every block.
    pub refined: Vec<Tensor>,
    pub grid: (usize, usize),
}

pub struct Lstn {
    config: LstnConfig,
    encoder: FrameEncoder,
    blocks: Vec<LstBlock>,
    head: MaskHead,
    encoder_vars: VarMap,
    block_vars: VarMap,
    head_vars: VarMap,
}

impl Lstn {
    pub fn new(config: LstnConfig) -> Result<Self> {
        config.validate()?;
        let rng = RefCell::new(ChaCha8Rng::seed_from_u64(config.seed));
        let (encoder_vars, block_vars, head_vars) = (VarMap::new(), VarMap::new(), VarMap::new());
        let encoder = FrameEncoder::new(&ParamBuilder::new(&encoder_vars, &rng).pp(BLOCK_ENCODER), &config)?;
        let pb = ParamBuilder::new(&block_vars, &rng).pp(BLOCK_LST);
        let blocks = (0..config.blocks)
            .map(|i| LstBlock::new(&pb.pp(i.to_string()), &config))
            .collect::<Result<_>>()?;
        let head = MaskHead::new(&ParamBuilder::new(&head_vars, &rng).pp(BLOCK_DECODER), &config)?;
        Ok(Self {
            config,
            encoder,
            blocks,
            head,
            encoder_vars,
            block_vars,
            head_vars,
        })
    }

    pub fn config(&self) -> &LstnConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[LstBlock] {
        &self.blocks
    }

    pub fn param_blocks(&self) -> [ParamBlock<'_>; 3] {
        [
            ParamBlock { name: BLOCK_ENCODER, vars: &self.encoder_vars, frozen: false },
            ParamBlock { name: BLOCK_LST, vars: &self.block_vars, frozen: false },
            ParamBlock { name: BLOCK_DECODER, vars: &self.head_vars, frozen: false },
        ]
    }

    /// Parameters initialised from a pretrained backbone.
    pub fn pretrained_vars(&self) -> &VarMap {
        &self.encoder_vars
    }

    /// Parameters trained from scratch: blocks and decoder.
    pub fn scratch_vars(&self) -> Vec<candle_core::Var> {
        let mut v = self.block_vars.all_vars();
        v.extend(self.head_vars.all_vars());
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, MODEL_KIND, &serde_json::to_value(self.config)?, &self.param_blocks())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_model(MODEL_KIND)?;
        let config: LstnConfig = serde_json::from_value(ck.config.clone())?;
        let model = Self::new(config)?;
        for block in model.param_blocks() {
            ck.restore_into(block.vars)?;
        }
        Ok(model)
    }

    /// Same weights, with long/short readouts toggled.
    pub fn with_components(&self, long_term: bool, short_term: bool) -> Result<Self> {
        let config = LstnConfig { long_term, short_term, ..self.config };
        let model = Self::new(config)?;
        for (dst, src) in model.param_blocks().iter().zip(self.param_blocks().iter()) {
            let src = src.vars.data().lock().unwrap();
            for (name, var) in dst.vars.data().lock().unwrap().iter() {
                var.set(src[name].as_tensor())?;
            }
        }
        Ok(model)
    }

    /// Encodes normalized frames `(B, 3, H, W)`.
    pub fn encode(&self, frames: &Tensor) -> Result<FrameFeature> {
        let (_, c, h, w) = frames.dims4()?;
        contract!(c == 3, "expected 3-channel frames, got {c}");
        let (f, skip) = self.encoder.forward(frames)?;
        Ok(FrameFeature {
            tokens: to_tokens(&f)?,
            skip,
            grid: feature_grid((h, w)),
            size: (h, w),
        })
    }

    pub fn encode_image(&self, image: &RgbImage) -> Result<FrameFeature> {
        self.encode(&image_to_tensor(image)?.unsqueeze(0)?)
    }

    fn window_table(&self, grid: (usize, usize)) -> Result<WindowTable> {
        WindowTable::new(grid, self.config.window)
    }

    pub fn decode(&self, tokens: &Tensor, feature: &FrameFeature) -> Result<Tensor> {
        let f = from_tokens(tokens, feature.grid.0, feature.grid.1)?;
        self.head.forward(&f, &feature.skip, feature.size)
    }

    /// Memory of a frame whose mask `(B, 1, H, W)` is known. Each block
    /// reads its own freshly written entry.
    pub fn memorize_seed(&self, feature: &FrameFeature, mask: &Tensor, frame: usize) -> Result<FrameMemory> {
        let table = self.window_table(feature.grid)?;
        let mut x = feature.tokens.clone();
        let mut entries = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let refined = block.self_attend(&x, feature.grid)?;
            let entry = block.memory_entry(&refined, mask, frame, feature.grid)?;
            x = block.aggregate(&refined, &entry, &entry, &table)?;
            entries.push(entry);
        }
        Ok(FrameMemory { frame, entries })
    }

    /// Initializes a bank from the seed frame and its mask.
    pub fn seed(&self, frames: &Tensor, mask: &Tensor, frame: usize) -> Result<MemoryBank> {
        let feature = self.encode(frames)?;
        let memory = self.memorize_seed(&feature, mask, frame)?;
        let mut bank = MemoryBank::new();
        bank.write_long_term(memory.clone())?;
        bank.write_short_term(memory);
        Ok(bank)
    }

    /// Runs the blocks against the bank and decodes mask logits.
    pub fn predict(&self, frames: &Tensor, bank: &mut MemoryBank) -> Result<Prediction> {
        let feature = self.encode(frames)?;
        self.predict_feature(&feature, bank)
    }

    pub fn predict_feature(&self, feature: &FrameFeature, bank: &mut MemoryBank) -> Result<Prediction> {
        let long = bank.long_term()?;
        let short = bank.short_term()?;
        contract!(
            long.entries.len() == self.blocks.len() && short.entries.len() == self.blocks.len(),
            "memory bank holds {} entries for {} blocks",
            long.entries.len(),
            self.blocks.len()
        );
        contract!(
            long.entries[0].grid == feature.grid,
            "frame grid {:?} does not match memory grid {:?}",
            feature.grid,
            long.entries[0].grid
        );
        let table = self.window_table(feature.grid)?;
        let mut x = feature.tokens.clone();
        let mut refined = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (out, r) = block.forward(&x, &long.entries[i], &short.entries[i], &table)?;
            refined.push(r);
            x = out;
        }
        bank.note_reads(self.config.long_term, self.config.short_term);
        Ok(Prediction {
            logits: self.decode(&x, feature)?,
            refined,
            grid: feature.grid,
        })
    }

    /// Overwrites the short-term slot with the just-predicted frame.
    pub fn commit(&self, bank: &mut MemoryBank, pred: &Prediction, mask: &Tensor, frame: usize) -> Result<()> {
        let entries = self
            .blocks
            .iter()
            .zip(&pred.refined)
            .map(|(b, r)| b.memory_entry(r, mask, frame, pred.grid))
            .collect::<Result<_>>()?;
        bank.write_short_term(FrameMemory { frame, entries });
        Ok(())
    }

    /// Predicts frame `frame` and stores it as short-term memory; returns the
    /// probability mask `(B, 1, H, W)`.
    pub fn step(&self, frames: &Tensor, bank: &mut MemoryBank, frame: usize) -> Result<Tensor> {
        let pred = self.predict(frames, bank)?;
        let prob = sigmoid(&pred.logits)?.detach();
        self.commit(bank, &pred, &prob, frame)?;
        Ok(prob)
    }

    pub fn seed_image(&self, image: &RgbImage, mask: &ShadowMask, frame: usize) -> Result<MemoryBank> {
        contract!(
            mask.shape() == (image.height() as usize, image.width() as usize),
            "seed mask {:?} does not match frame {}x{}",
            mask.shape(),
            image.height(),
            image.width()
        );
        self.seed(&image_to_tensor(image)?.unsqueeze(0)?, &mask_tensor(mask)?, frame)
    }

    pub fn step_image(&self, image: &RgbImage, bank: &mut MemoryBank, frame: usize) -> Result<ShadowMask> {
        let prob = self.step(&image_to_tensor(image)?.unsqueeze(0)?, bank, frame)?;
        ShadowMask::from_tensor(&prob.squeeze(0)?.squeeze(0)?)
    }
}

/// `(1, 1, H, W)` tensor of mask values.
pub fn mask_tensor(mask: &ShadowMask) -> Result<Tensor> {
    Ok(mask.to_tensor(DTYPE, &device())?.unsqueeze(0)?.unsqueeze(0)?)
}

#[cfg(test)]
mod tests;
