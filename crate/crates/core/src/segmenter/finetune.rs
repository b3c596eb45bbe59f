//! Mask-decoder fine-tuning with box prompts derived from ground truth.

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{SamLite, Segmenter};
use crate::data_io::{MaskKind, RunConfig, ShadowMask};
use crate::error::{contract, Result};
use crate::nn::{device, DTYPE};
use crate::prompt_gen::{extract_boxes, perturb_boxes};

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub min_region_area: usize,
    pub max_boxes: usize,
    pub box_perturbation: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::from_run_config(&RunConfig::default())
    }
}

impl FinetuneConfig {
    pub fn from_run_config(cfg: &RunConfig) -> Self {
        Self {
            epochs: cfg.finetune_epochs,
            lr: cfg.finetune_lr,
            min_region_area: cfg.min_region_area,
            max_boxes: cfg.max_boxes,
            box_perturbation: cfg.box_perturbation,
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FinetuneLog {
    pub epochs: Vec<EpochRecord>,
}

impl FinetuneLog {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect()
    }
}

/// Mean binary cross-entropy between logits and a `{0, 1}` target of the same shape.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    // max(x, 0) - x·y + ln(1 + e^{-|x|})
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let loss = ((logits.relu()? - (logits * target)?)? + softplus)?;
    Ok(loss.mean_all()?)
}

/// Trains the mask decoder with Adam; encoder blocks stay untouched.
/// Image embeddings are computed once since the encoder is frozen.
pub fn finetune(
    model: &mut SamLite,
    samples: &[(RgbImage, ShadowMask)],
    cfg: &FinetuneConfig,
) -> Result<FinetuneLog> {
    contract!(!samples.is_empty(), "fine-tuning needs at least one sample");
    let mut cached = Vec::with_capacity(samples.len());
    for (i, (img, gt)) in samples.iter().enumerate() {
        contract!(gt.kind() == MaskKind::Binary, "sample {i}: ground truth must be binary");
        contract!(
            gt.shape() == (img.height() as usize, img.width() as usize),
            "sample {i}: mask {:?} does not match image {}x{}",
            gt.shape(),
            img.height(),
            img.width()
        );
        cached.push((model.encode_image(img)?, gt.to_tensor(DTYPE, &device())?));
    }

    let mut opt = AdamW::new(
        model.trainable_vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = FinetuneLog::default();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let gt = &samples[i].1;
            let boxes = extract_boxes(gt, cfg.min_region_area, cfg.max_boxes)?;
            let boxes = perturb_boxes(&boxes, gt.shape(), cfg.box_perturbation, &mut rng);
            let (emb, target) = &cached[i];
            let loss = bce_with_logits(&model.predict_logits(emb, &boxes)?, target)?;
            total += loss.to_scalar::<f64>()?;
            opt.backward_step(&loss)?;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: total / samples.len() as f64,
        };
        log::info!("finetune epoch {epoch}: loss {:.6}", record.mean_loss);
        log.epochs.push(record);
    }
    Ok(log)
}
