//! Clip-based training of the propagation network.

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use image::imageops::FilterType;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{lstn_loss, Lstn};
use crate::data_io::{RunConfig, ShadowMask, VideoSequence};
use crate::error::{contract, Result};
use crate::nn::{device, image_to_tensor, sigmoid, DTYPE};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub clip_length: usize,
    pub crop_size: usize,
    /// Smallest crop side as a fraction of the shorter frame side.
    pub crop_scale_min: f64,
    pub lr_pretrained: f64,
    pub lr_scratch: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::from_run_config(&RunConfig::default())
    }
}

impl TrainConfig {
    pub fn from_run_config(cfg: &RunConfig) -> Self {
        Self {
            steps: cfg.steps,
            batch_size: cfg.batch_size,
            clip_length: cfg.clip_length,
            crop_size: cfg.crop_size,
            crop_scale_min: cfg.crop_scale_min,
            lr_pretrained: cfg.lr_pretrained,
            lr_scratch: cfg.lr_scratch,
            weight_decay: cfg.weight_decay,
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub lr_pretrained: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect()
    }
}

fn crop_image(img: &RgbImage, y0: u32, x0: u32, side: u32, out: u32) -> RgbImage {
    let c = image::imageops::crop_imm(img, x0, y0, side, side).to_image();
    if side == out {
        c
    } else {
        image::imageops::resize(&c, out, out, FilterType::Triangle)
    }
}

fn crop_mask(m: &ShadowMask, y0: usize, x0: usize, side: usize, out: usize) -> ShadowMask {
    ShadowMask::binary_from_fn(out, out, |y, x| {
        let sy = y0 + ((y as f64 + 0.5) * side as f64 / out as f64) as usize;
        let sx = x0 + ((x as f64 + 0.5) * side as f64 / out as f64) as usize;
        m.is_set(sy.min(y0 + side - 1), sx.min(x0 + side - 1))
    })
}

/// One batch: `frames[t]` is `(B, 3, S, S)`, `masks[t]` is `(B, 1, S, S)`.
struct Batch {
    frames: Vec<Tensor>,
    masks: Vec<Tensor>,
}

fn sample_batch(
    videos: &[&VideoSequence],
    len: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let s = cfg.crop_size;
    let mut frames = vec![Vec::new(); len];
    let mut masks = vec![Vec::new(); len];
    for _ in 0..cfg.batch_size {
        let v = videos[rng.random_range(0..videos.len())];
        let start = rng.random_range(0..=v.len() - len);
        let (h, w) = v.resolution();
        let short = h.min(w);
        let lo = ((short as f64 * cfg.crop_scale_min).round() as usize).clamp(1, short);
        let side = rng.random_range(lo..=short);
        let y0 = rng.random_range(0..=h - side);
        let x0 = rng.random_range(0..=w - side);
        let gt = v.gt_masks().expect("checked by caller");
        for t in 0..len {
            let img = crop_image(v.frame(start + t), y0 as u32, x0 as u32, side as u32, s as u32);
            frames[t].push(image_to_tensor(&img)?);
            let m = crop_mask(&gt[start + t], y0, x0, side, s);
            masks[t].push(m.to_tensor(DTYPE, &device())?.unsqueeze(0)?);
        }
    }
    Ok(Batch {
        frames: frames.iter().map(|f| Tensor::stack(f, 0)).collect::<candle_core::Result<_>>()?,
        masks: masks.iter().map(|m| Tensor::stack(m, 0)).collect::<candle_core::Result<_>>()?,
    })
}

/// Clip loss: the first frame seeds the memory with its ground truth, every
/// later frame is predicted, and its predicted probabilities become the
/// short-term memory for the next one. Losses are averaged over predicted frames.
pub fn clip_loss(model: &Lstn, frames: &[Tensor], masks: &[Tensor]) -> Result<Tensor> {
    contract!(frames.len() >= 2, "a training clip needs at least two frames");
    let mut bank = model.seed(&frames[0], &masks[0], 0)?;
    let mut total: Option<Tensor> = None;
    for t in 1..frames.len() {
        let pred = model.predict(&frames[t], &mut bank)?;
        let loss = lstn_loss(&pred.logits, &masks[t])?;
        let prob = sigmoid(&pred.logits)?.detach();
        model.commit(&mut bank, &pred, &prob, t)?;
        total = Some(match total {
            None => loss,
            Some(acc) => (acc + loss)?,
        });
    }
    Ok((total.expect("at least one predicted frame") / (frames.len() - 1) as f64)?)
}

/// AdamW with decoupled weight decay; the encoder uses `lr_pretrained`, the
/// blocks and decoder use `lr_scratch`.
pub fn train_lstn(model: &mut Lstn, videos: &[VideoSequence], cfg: &TrainConfig) -> Result<TrainLog> {
    contract!(!videos.is_empty(), "training needs at least one video");
    for v in videos {
        contract!(v.gt_masks().is_some(), "video {} has no ground truth", v.id());
    }
    let usable: Vec<&VideoSequence> = videos.iter().filter(|v| v.len() >= 2).collect();
    contract!(!usable.is_empty(), "training needs a video with at least two frames");
    contract!(cfg.batch_size > 0 && cfg.crop_size > 0, "batch size and crop size must be positive");
    let len = cfg.clip_length.min(usable.iter().map(|v| v.len()).min().unwrap());

    let params = |lr| ParamsAdamW {
        lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut opt_pre = AdamW::new(model.pretrained_vars().all_vars(), params(cfg.lr_pretrained))?;
    let mut opt_scratch = AdamW::new(model.scratch_vars(), params(cfg.lr_scratch))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    for step in 1..=cfg.steps {
        let batch = sample_batch(&usable, len, cfg, &mut rng)?;
        let loss = clip_loss(model, &batch.frames, &batch.masks)?;
        let grads = loss.backward()?;
        opt_pre.step(&grads)?;
        opt_scratch.step(&grads)?;
        let record = TrainRecord {
            step,
            loss: loss.to_scalar::<f64>()?,
            lr: cfg.lr_scratch,
            lr_pretrained: cfg.lr_pretrained,
        };
        log::debug!("train step {step}: loss {:.6}", record.loss);
        log.records.push(record);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_mask_identity_and_scaling() {
        let m = ShadowMask::binary_from_fn(8, 8, |y, x| y < 4 && x >= 2);
        assert_eq!(crop_mask(&m, 0, 0, 8, 8), m);
        let half = crop_mask(&m, 0, 0, 8, 4);
        assert_eq!(half, ShadowMask::binary_from_fn(4, 4, |y, x| y < 2 && x >= 1));
    }

    #[test]
    fn default_schedule() {
        let c = TrainConfig::default();
        assert_eq!((c.steps, c.batch_size, c.crop_size), (50000, 16, 465));
        assert_eq!((c.lr_pretrained, c.lr_scratch, c.weight_decay), (2e-5, 2e-4, 0.07));
    }
}
