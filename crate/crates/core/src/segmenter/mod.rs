//! Promptable single-image shadow segmentation.
//!
//! A segmenter splits into an image encoder, a prompt encoder, and a mask
//! decoder. Images are resized so their longest side equals the input size
//! `S`, then zero-padded at the bottom and right to `S × S`; the image
//! embedding is a `C × S/16 × S/16` grid.

mod adapter;
mod finetune;
mod transformer;
mod toy;

use candle_core::Tensor;
use image::RgbImage;

use crate::data_io::ShadowMask;
use crate::error::{contract, Result};
use crate::prompt_gen::BoxPrompt;

pub use adapter::{load_adapted, AdapterManifest};
pub use finetune::{bce_with_logits, finetune, EpochRecord, FinetuneConfig, FinetuneLog};
pub use toy::{SamLite, SegmenterConfig, BLOCK_IMAGE_ENCODER, BLOCK_MASK_DECODER, BLOCK_PROMPT_ENCODER};

/// Output stride of the image encoder.
pub const PATCH: usize = 16;

/// Longest-side rescale and bottom/right padding into an `S × S` canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResizeTransform {
    pub original: (usize, usize),
    pub resized: (usize, usize),
    pub input_size: usize,
}

impl ResizeTransform {
    pub fn new(original: (usize, usize), input_size: usize) -> Result<Self> {
        let (h, w) = original;
        contract!(h > 0 && w > 0, "zero-sized image {h}x{w}");
        let scale = input_size as f64 / h.max(w) as f64;
        let resized = (
            ((h as f64 * scale).round() as usize).clamp(1, input_size),
            ((w as f64 * scale).round() as usize).clamp(1, input_size),
        );
        Ok(Self {
            original,
            resized,
            input_size,
        })
    }

    pub fn scale_y(&self) -> f64 {
        self.resized.0 as f64 / self.original.0 as f64
    }

    pub fn scale_x(&self) -> f64 {
        self.resized.1 as f64 / self.original.1 as f64
    }

    /// Padding added below and to the right of the resized image.
    pub fn padding(&self) -> (usize, usize) {
        (
            self.input_size - self.resized.0,
            self.input_size - self.resized.1,
        )
    }

    /// Box corners as pixel centres in input-canvas coordinates
    /// `[x0, y0, x1, y1]`.
    pub fn box_to_input(&self, b: &BoxPrompt) -> [f64; 4] {
        let (sx, sy) = (self.scale_x(), self.scale_y());
        [
            (b.x_min as f64 + 0.5) * sx,
            (b.y_min as f64 + 0.5) * sy,
            (b.x_max as f64 + 0.5) * sx,
            (b.y_max as f64 + 0.5) * sy,
        ]
    }

    pub fn box_from_input(&self, c: [f64; 4]) -> BoxPrompt {
        let (sx, sy) = (self.scale_x(), self.scale_y());
        let (h, w) = self.original;
        let px = |v: f64, s: f64, n: usize| ((v / s - 0.5).round().max(0.0) as usize).min(n - 1);
        let (x0, x1) = (px(c[0], sx, w), px(c[2], sx, w));
        let (y0, y1) = (px(c[1], sy, h), px(c[3], sy, h));
        BoxPrompt {
            x_min: x0.min(x1),
            y_min: y0.min(y1),
            x_max: x0.max(x1),
            y_max: y0.max(y1),
        }
    }

    /// Box corners in embedding-grid units.
    pub fn box_to_embedding(&self, b: &BoxPrompt) -> [f64; 4] {
        self.box_to_input(b).map(|v| v / PATCH as f64)
    }

    pub fn box_from_embedding(&self, c: [f64; 4]) -> BoxPrompt {
        self.box_from_input(c.map(|v| v * PATCH as f64))
    }
}

/// Encoder output for one image together with the transform that produced it.
#[derive(Debug, Clone)]
pub struct ImageEmbedding {
    /// `(1, C, S/16, S/16)`.
    pub features: Tensor,
    pub transform: ResizeTransform,
}

impl ImageEmbedding {
    /// `(C, H_e, W_e)`.
    pub fn shape(&self) -> Result<(usize, usize, usize)> {
        let (_, c, h, w) = self.features.dims4()?;
        Ok((c, h, w))
    }

    pub fn original_size(&self) -> (usize, usize) {
        self.transform.original
    }
}

/// Box prompts after normalization, encoded as two corner tokens per box.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    pub boxes: Vec<BoxPrompt>,
    /// One `(1, 2, C)` tensor per box: positional encoding plus corner-type embedding.
    pub sparse: Vec<Tensor>,
}

impl PromptEmbedding {
    pub fn box_count(&self) -> usize {
        self.boxes.len()
    }
}

/// Replaces an empty prompt by the whole-image box and validates the rest.
pub fn normalize_boxes(boxes: &[BoxPrompt], size: (usize, usize)) -> Result<Vec<BoxPrompt>> {
    if boxes.is_empty() {
        return Ok(vec![BoxPrompt::whole_image(size.0, size.1)]);
    }
    for b in boxes {
        b.validate(size.0, size.1)?;
    }
    Ok(boxes.to_vec())
}

pub trait Segmenter: Send + Sync {
    fn encode_image(&self, image: &RgbImage) -> Result<ImageEmbedding>;

    /// Mask logits `(H, W)` at the original image resolution, merged over
    /// boxes by elementwise maximum.
    fn predict_logits(&self, embedding: &ImageEmbedding, boxes: &[BoxPrompt]) -> Result<Tensor>;

    fn predict_mask(&self, image: &RgbImage, boxes: &[BoxPrompt]) -> Result<ShadowMask> {
        let embedding = self.encode_image(image)?;
        self.predict_from_embedding(&embedding, boxes)
    }

    fn predict_from_embedding(
        &self,
        embedding: &ImageEmbedding,
        boxes: &[BoxPrompt],
    ) -> Result<ShadowMask> {
        let logits = self.predict_logits(embedding, boxes)?;
        let mask = ShadowMask::from_tensor(&crate::nn::sigmoid(&logits)?)?;
        if !mask.values().iter().any(|&p| p >= 0.5) {
            log::warn!("segmenter predicted no shadow region; emitting an all-zero mask");
        }
        Ok(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transform_geometry() {
        let t = ResizeTransform::new((48, 64), 1024).unwrap();
        assert_eq!(t.resized, (768, 1024));
        assert_eq!(t.padding(), (256, 0));
        assert!(ResizeTransform::new((0, 5), 64).is_err());
    }

    #[test]
    fn box_round_trip_within_one_pixel() {
        for (orig, s) in [((37, 91), 64), ((480, 640), 1024), ((5, 3), 64)] {
            let t = ResizeTransform::new(orig, s).unwrap();
            let b = BoxPrompt::new(1, 2, orig.1 - 1, orig.0 - 2).unwrap();
            for back in [t.box_from_input(t.box_to_input(&b)), t.box_from_embedding(t.box_to_embedding(&b))] {
                for (a, c) in back.as_array().iter().zip(b.as_array()) {
                    assert!(a.abs_diff(c) <= 1, "{orig:?}: {back} vs {b}");
                }
            }
        }
    }

    #[test]
    fn empty_prompt_becomes_whole_image() {
        let n = normalize_boxes(&[], (10, 20)).unwrap();
        assert_eq!(n, vec![BoxPrompt::whole_image(10, 20)]);
        let bad = BoxPrompt { x_min: 0, y_min: 0, x_max: 20, y_max: 3 };
        assert!(normalize_boxes(&[bad], (10, 20)).is_err());
    }
}
