use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, ImageReader, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Probability,
    Binary,
}

/// A per-frame shadow map, stored row-major.
///
/// Binary masks hold exactly `0.0` or `1.0`; probability masks hold values in
/// `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowMask {
    height: usize,
    width: usize,
    values: Vec<f32>,
    kind: MaskKind,
    threshold_used: Option<f32>,
}

impl ShadowMask {
    pub fn probability(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        check_len(height, width, values.len())?;
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!(
                "probability value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            kind: MaskKind::Probability,
            threshold_used: None,
        })
    }

    pub fn binary(height: usize, width: usize, foreground: Vec<bool>) -> Result<Self> {
        check_len(height, width, foreground.len())?;
        Ok(Self {
            height,
            width,
            values: foreground
                .into_iter()
                .map(|b| if b { 1.0 } else { 0.0 })
                .collect(),
            kind: MaskKind::Binary,
            threshold_used: None,
        })
    }

    pub fn zeros(height: usize, width: usize, kind: MaskKind) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
            kind,
            threshold_used: None,
        }
    }

    /// Binary mask built from a predicate over `(y, x)`.
    pub fn binary_from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(if f(y, x) { 1.0 } else { 0.0 });
            }
        }
        Self {
            height,
            width,
            values,
            kind: MaskKind::Binary,
            threshold_used: None,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn threshold_used(&self) -> Option<f32> {
        self.threshold_used
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Foreground test. Only meaningful on binary masks.
    pub fn is_set(&self, y: usize, x: usize) -> bool {
        self.get(y, x) >= 0.5
    }

    pub fn foreground_count(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.5).count()
    }

    /// `p >= threshold` becomes foreground.
    pub fn binarize(&self, threshold: f32) -> ShadowMask {
        Self {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
                .collect(),
            kind: MaskKind::Binary,
            threshold_used: Some(threshold),
        }
    }

    /// Reinterprets a binary mask as a probability map with the same values.
    pub fn as_probability(&self) -> ShadowMask {
        Self {
            kind: MaskKind::Probability,
            threshold_used: None,
            ..self.clone()
        }
    }

    /// Pixelwise union (binary) or maximum (probability) of two masks.
    pub fn union(&self, other: &ShadowMask) -> Result<ShadowMask> {
        self.check_same_shape(other)?;
        let kind = if self.kind == MaskKind::Binary && other.kind == MaskKind::Binary {
            MaskKind::Binary
        } else {
            MaskKind::Probability
        };
        Ok(Self {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.max(*b))
                .collect(),
            kind,
            threshold_used: None,
        })
    }

    /// Pixelwise mean of two probability maps.
    pub fn average(&self, other: &ShadowMask) -> Result<ShadowMask> {
        self.check_same_shape(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| 0.5 * (a + b))
                .collect(),
            kind: MaskKind::Probability,
            threshold_used: None,
        })
    }

    pub fn check_same_shape(&self, other: &ShadowMask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Contract(format!(
                "mask shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Snaps every value to the nearest level representable in an 8-bit file.
    pub fn quantized(&self) -> ShadowMask {
        Self {
            values: self
                .values
                .iter()
                .map(|&v| quantize(v) as f32 / 255.0)
                .collect(),
            ..self.clone()
        }
    }

    /// `(H, W)` tensor of the mask values.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Builds a probability mask from an `(H, W)` tensor, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<ShadowMask> {
        let (h, w) = t.dims2()?;
        let values: Vec<f32> = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        ShadowMask::probability(h, w, values)
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([quantize(self.get(y as usize, x as usize))])
        })
    }

    /// Decodes a grayscale image. Files holding only 0 and 255 load as binary.
    pub fn from_gray_image(img: &GrayImage) -> ShadowMask {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.as_raw();
        let binary = raw.iter().all(|&v| v == 0 || v == 255);
        let values = raw.iter().map(|&v| v as f32 / 255.0).collect();
        ShadowMask {
            height: h,
            width: w,
            values,
            kind: if binary {
                MaskKind::Binary
            } else {
                MaskKind::Probability
            },
            threshold_used: None,
        }
    }

    /// PNG bytes of the mask, identical to what [`save_mask`] writes.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_gray_image()
            .write_to(&mut buf, image::ImageFormat::Png)
            .map_err(|e| Error::image("<memory>", e))?;
        Ok(buf.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<ShadowMask> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::image("<memory>", e))?;
        decode_gray(img, Path::new("<memory>"))
    }
}

fn check_len(height: usize, width: usize, len: usize) -> Result<()> {
    if height * width != len {
        return Err(Error::Contract(format!(
            "mask of {height}x{width} needs {} values, got {len}",
            height * width
        )));
    }
    Ok(())
}

/// Round-half-up to 0..=255.
pub fn quantize(v: f32) -> u8 {
    ((v.clamp(0.0, 1.0) as f64) * 255.0 + 0.5).floor().min(255.0) as u8
}

pub fn save_mask(mask: &ShadowMask, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    mask.to_gray_image()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

pub fn load_mask(path: &Path) -> Result<ShadowMask> {
    if !path.exists() {
        return Err(Error::NotFound(path.display().to_string()));
    }
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::image(path, e))?;
    decode_gray(img, path)
}

/// Ground-truth masks are binary; anti-aliased or lossy files are snapped at 128.
pub fn load_gt_mask(path: &Path) -> Result<ShadowMask> {
    let mask = load_mask(path)?;
    Ok(match mask.kind() {
        MaskKind::Binary => mask,
        MaskKind::Probability => {
            let mut m = mask.binarize(128.0 / 255.0);
            m.threshold_used = None;
            m
        }
    })
}

fn decode_gray(img: image::DynamicImage, path: &Path) -> Result<ShadowMask> {
    use image::DynamicImage as D;
    let gray = match img {
        D::ImageLuma8(g) => g,
        D::ImageLuma16(g) => GrayImage::from_fn(g.width(), g.height(), |x, y| {
            Luma([(g.get_pixel(x, y)[0] as u32 * 255).div_ceil(65535) as u8])
        }),
        other => {
            return Err(Error::Format(format!(
                "{}: expected single-channel mask, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Ok(ShadowMask::from_gray_image(&gray))
}
