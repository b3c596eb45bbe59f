//! Layers and tensor helpers shared by the segmenter and the propagation
//! network. Tensors are `f64` on the CPU.

pub mod attention;
pub mod gradcheck;
pub mod resize;

use std::cell::RefCell;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, Linear, VarMap};
use image::RgbImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-b, b)`.
    Uniform(f64),
    /// `N(0, std²)`.
    Normal(f64),
}

/// Creates named parameters in a [`VarMap`] from a seeded generator, so that
/// model construction is reproducible.
pub struct ParamBuilder<'a> {
    map: &'a VarMap,
    rng: &'a RefCell<ChaCha8Rng>,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(map: &'a VarMap, rng: &'a RefCell<ChaCha8Rng>) -> Self {
        Self {
            map,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> ParamBuilder<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            map: self.map,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = {
            let mut rng = self.rng.borrow_mut();
            match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
                Init::Normal(std) => (0..n).map(|_| std * standard_normal(&mut rng)).collect(),
            }
        };
        let t = Tensor::from_vec(values, shape, &device())?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.map.data().lock().unwrap().insert(self.path(name), var);
        Ok(out)
    }

    pub fn linear(&self, in_dim: usize, out_dim: usize) -> Result<Linear> {
        let b = 1.0 / (in_dim as f64).sqrt();
        let w = self.get(&[out_dim, in_dim], "weight", Init::Uniform(b))?;
        let bias = self.get(&[out_dim], "bias", Init::Uniform(b))?;
        Ok(Linear::new(w, Some(bias)))
    }

    pub fn conv2d(
        &self,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Conv2d> {
        let b = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let w = self.get(&[out_ch, in_ch, kernel, kernel], "weight", Init::Uniform(b))?;
        let bias = self.get(&[out_ch], "bias", Init::Uniform(b))?;
        let cfg = Conv2dConfig {
            padding,
            stride,
            ..Default::default()
        };
        Ok(Conv2d::new(w, Some(bias), cfg))
    }

    pub fn conv_transpose2d(
        &self,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<ConvTranspose2d> {
        let b = 1.0 / ((out_ch * kernel * kernel) as f64).sqrt();
        let w = self.get(&[in_ch, out_ch, kernel, kernel], "weight", Init::Uniform(b))?;
        let bias = self.get(&[out_ch], "bias", Init::Uniform(b))?;
        let cfg = ConvTranspose2dConfig {
            stride,
            ..Default::default()
        };
        Ok(ConvTranspose2d::new(w, Some(bias), cfg))
    }

    pub fn layer_norm(&self, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            weight: self.get(&[dim], "weight", Init::Ones)?,
            bias: self.get(&[dim], "bias", Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn group_norm(&self, channels: usize) -> Result<candle_nn::GroupNorm> {
        let groups = group_count(channels);
        let w = self.get(&[channels], "weight", Init::Ones)?;
        let b = self.get(&[channels], "bias", Init::Zeros)?;
        Ok(candle_nn::GroupNorm::new(w, b, channels, groups, 1e-5)?)
    }
}

/// Largest of 32, 16, 8, 4, 2 that splits `channels` into groups of at least two.
pub fn group_count(channels: usize) -> usize {
    [32, 16, 8, 4, 2]
        .into_iter()
        .find(|g| channels % g == 0 && channels / g >= 2)
        .unwrap_or(1)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Layer normalization over the last dimension, built from differentiable ops.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Channel-wise layer norm for `(B, C, H, W)` maps.
pub fn layer_norm_2d(ln: &LayerNorm, x: &Tensor) -> candle_core::Result<Tensor> {
    x.permute((0, 2, 3, 1))?.apply(ln)?.permute((0, 3, 1, 2))
}

pub fn gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.gelu_erf()
}

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::sigmoid(x)
}

/// `(B, C, H, W)` → `(B, H·W, C)`.
pub fn to_tokens(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()
}

/// `(B, H·W, C)` → `(B, C, H, W)`.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> candle_core::Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    debug_assert_eq!(n, h * w);
    x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))
}

/// Zero-pads the bottom and right of a `(B, C, H, W)` map to multiples of `m`.
pub fn pad_to_multiple(x: &Tensor, m: usize) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (ph, pw) = (h.div_ceil(m) * m - h, w.div_ceil(m) * m - w);
    let x = if ph > 0 { x.pad_with_zeros(2, 0, ph)? } else { x.clone() };
    if pw > 0 {
        x.pad_with_zeros(3, 0, pw)
    } else {
        Ok(x)
    }
}

const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// `(3, H, W)` tensor of an RGB image, standardized with ImageNet statistics.
pub fn image_to_tensor(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f64; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] =
                (p[c] as f64 / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c];
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &device())?)
}

/// Flattened copy of every variable in `map`, sorted by name.
pub fn snapshot(map: &VarMap) -> Result<Vec<(String, Vec<f64>)>> {
    let data = map.data().lock().unwrap();
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let v = data[n].as_tensor().flatten_all()?.to_vec1::<f64>()?;
            Ok((n.clone(), v))
        })
        .collect()
}

/// Order-sensitive 64-bit FNV-1a digest of every variable's bytes.
pub fn checksum(map: &VarMap) -> Result<u64> {
    let mut h: u64 = 0xcbf29ce484222325;
    for (name, values) in snapshot(map)? {
        for b in name.bytes().chain(values.iter().flat_map(|v| v.to_le_bytes())) {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    Ok(h)
}

pub fn parameter_count(map: &VarMap) -> usize {
    map.all_vars().iter().map(|v| v.elem_count()).sum()
}
