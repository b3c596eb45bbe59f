//! Synthetic shadow videos: a dark elliptical blob drifting over a textured
//! background, with exact ground truth.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_io::{ShadowMask, VideoSequence};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct BlobVideo {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Blob semi-axes `(ry, rx)` in pixels.
    pub radii: (f64, f64),
    /// Centre of the blob in the first frame.
    pub start: (f64, f64),
    /// Displacement per frame `(dy, dx)`.
    pub velocity: (f64, f64),
    /// Shadow darkening factor in `(0, 1)`.
    pub darkening: f64,
    pub seed: u64,
}

impl BlobVideo {
    pub fn new(height: usize, width: usize, frames: usize) -> Self {
        let (h, w) = (height as f64, width as f64);
        Self {
            height,
            width,
            frames,
            radii: (h * 0.2, w * 0.25),
            start: (h * 0.45, w * 0.35),
            velocity: (h * 0.02, w * 0.04),
            darkening: 0.35,
            seed: 0,
        }
    }

    pub fn with_velocity(mut self, dy: f64, dx: f64) -> Self {
        self.velocity = (dy, dx);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn inside(&self, t: usize, y: usize, x: usize) -> bool {
        let cy = self.start.0 + self.velocity.0 * t as f64;
        let cx = self.start.1 + self.velocity.1 * t as f64;
        let dy = (y as f64 + 0.5 - cy) / self.radii.0;
        let dx = (x as f64 + 0.5 - cx) / self.radii.1;
        dy * dy + dx * dx <= 1.0
    }

    pub fn mask(&self, t: usize) -> ShadowMask {
        ShadowMask::binary_from_fn(self.height, self.width, |y, x| self.inside(t, y, x))
    }

    pub fn frame(&self, t: usize, background: &RgbImage) -> RgbImage {
        let mut img = background.clone();
        for (x, y, p) in img.enumerate_pixels_mut() {
            if self.inside(t, y as usize, x as usize) {
                *p = Rgb(p.0.map(|c| (c as f64 * self.darkening).round() as u8));
            }
        }
        img
    }

    /// Smooth colour gradient with mild per-pixel noise; fixed across frames.
    pub fn background(&self) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (h, w) = (self.height.max(1) as f64, self.width.max(1) as f64);
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (fy, fx) = (y as f64 / h, x as f64 / w);
            let base = [190.0 + 40.0 * fx, 170.0 + 50.0 * fy, 150.0 + 30.0 * (1.0 - fx)];
            Rgb(base.map(|b| (b + rng.random_range(-12.0..12.0f64)).clamp(0.0, 255.0) as u8))
        })
    }

    pub fn build(&self, id: &str) -> Result<VideoSequence> {
        let bg = self.background();
        let frames = (0..self.frames).map(|t| self.frame(t, &bg)).collect();
        let masks = (0..self.frames).map(|t| self.mask(t)).collect();
        let names = (0..self.frames).map(|t| format!("{t:05}.png")).collect();
        VideoSequence::new(id, names, frames, Some(masks))
    }
}
