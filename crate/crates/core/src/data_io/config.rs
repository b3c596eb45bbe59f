//! Flat `key=value` run configuration.
//!
//! Every key has a default; unknown keys and unparseable values are errors.
//! Lines starting with `#` are comments.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

trait ConfigValue: Sized {
    fn parse_value(raw: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

impl ConfigValue for usize {
    fn parse_value(raw: &str) -> std::result::Result<Self, String> {
        raw.parse().map_err(|e| format!("{e}"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse_value(raw: &str) -> std::result::Result<Self, String> {
        raw.parse().map_err(|e| format!("{e}"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f64 {
    fn parse_value(raw: &str) -> std::result::Result<Self, String> {
        let v: f64 = raw.parse().map_err(|e| format!("{e}"))?;
        if !v.is_finite() {
            return Err("value must be finite".into());
        }
        Ok(v)
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for bool {
    fn parse_value(raw: &str) -> std::result::Result<Self, String> {
        match raw.to_ascii_lowercase().as_str() {
            "true" | "on" | "yes" | "1" => Ok(true),
            "false" | "off" | "no" | "0" => Ok(false),
            _ => Err(format!("expected a boolean, got {raw:?}")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

macro_rules! run_config {
    ($( #[doc = $doc:literal] $name:ident : $ty:ty = $default:expr, )*) => {
        #[derive(Debug, Clone, PartialEq, Serialize)]
        pub struct RunConfig {
            $( #[doc = $doc] pub $name: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl RunConfig {
            /// `(key, description)` for every accepted key.
            pub const KEYS: &'static [(&'static str, &'static str)] = &[
                $( (stringify!($name), $doc.trim_ascii()), )*
            ];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($name) => {
                        self.$name = <$ty as ConfigValue>::parse_value(value).map_err(|e| {
                            Error::Config(format!("{key}={value}: {e}"))
                        })?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( stringify!($name) => Some(self.$name.render()), )*
                    _ => None,
                }
            }
        }
    };
}

run_config! {
    /// Number of long short-term attention blocks.
    lst_blocks: usize = 3,
    /// Side of the short-term attention window (odd).
    short_window_w: usize = 15,
    /// Feature width of the propagation network (keys, values and features share it).
    lstn_channels: usize = 256,
    /// Attention heads in every attention layer of the propagation network.
    attention_heads: usize = 1,
    /// Add 2D sinusoidal position encodings to self-attention queries and keys.
    positional_encoding: bool = false,
    /// Enable long-term (first-frame) attention.
    long_term: bool = true,
    /// Enable short-term (previous-frame) attention.
    short_term: bool = true,
    /// Side of the square training crop after resizing.
    crop_size: usize = 465,
    /// Smallest crop side as a fraction of the shorter frame side.
    crop_scale_min: f64 = 0.75,
    /// Clips per optimization step.
    batch_size: usize = 16,
    /// Optimization steps for the propagation network.
    steps: usize = 50000,
    /// Frames per training clip (first frame seeds memory with its ground truth).
    clip_length: usize = 3,
    /// Learning rate of the pretrained frame encoder.
    lr_pretrained: f64 = 2e-5,
    /// Learning rate of layers trained from scratch.
    lr_scratch: f64 = 2e-4,
    /// Weight decay of the propagation network optimizer.
    weight_decay: f64 = 0.07,
    /// Mask decoder fine-tuning epochs.
    finetune_epochs: usize = 50,
    /// Mask decoder fine-tuning learning rate.
    finetune_lr: f64 = 1e-4,
    /// Use every n-th annotated frame when fine-tuning the segmenter.
    finetune_frame_stride: usize = 1,
    /// Side the segmenter rescales and pads images to.
    segmenter_input_size: usize = 1024,
    /// Segmenter embedding channels.
    segmenter_channels: usize = 256,
    /// Two-way attention layers in the segmenter mask decoder.
    segmenter_decoder_depth: usize = 2,
    /// Regions with fewer pixels are not turned into box prompts.
    min_region_area: usize = 50,
    /// More qualifying regions than this collapse into one whole-image box.
    max_boxes: usize = 8,
    /// Maximum absolute shift of each box boundary during fine-tuning.
    box_perturbation: usize = 20,
    /// Probability threshold for binarized outputs, gating and evaluation.
    binarize_threshold: f64 = 0.5,
    /// Frames whose forward/backward IoU falls below this are re-predicted.
    plus_iou_gate: f64 = 0.75,
    /// Average forward and backward masks on frames that pass the gate.
    plus_average_non_gated: bool = false,
    /// Precision weight of the F-measure.
    f_beta_sq: f64 = 0.3,
    /// Compute MAE on raw probabilities (false: on binarized predictions).
    mae_on_probabilities: bool = true,
    /// Aggregate dataset metrics as the mean of per-video means.
    aggregate_per_video: bool = false,
    /// Compute dataset BER from pooled confusion counts.
    ber_pooled: bool = false,
    /// Seed for initialization, sampling and augmentation.
    seed: u64 = 0,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.short_window_w % 2 == 0 {
            return fail("short_window_w must be odd");
        }
        if self.lst_blocks == 0 {
            return fail("lst_blocks must be positive");
        }
        if self.attention_heads == 0 || self.lstn_channels % self.attention_heads != 0 {
            return fail("lstn_channels must be a positive multiple of attention_heads");
        }
        if self.clip_length < 2 {
            return fail("clip_length must be at least 2");
        }
        if self.crop_size == 0 || self.batch_size == 0 {
            return fail("crop_size and batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.crop_scale_min) || self.crop_scale_min == 0.0 {
            return fail("crop_scale_min must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.binarize_threshold)
            || !(0.0..=1.0).contains(&self.plus_iou_gate)
        {
            return fail("thresholds must lie in [0, 1]");
        }
        if self.segmenter_input_size < 16 || self.segmenter_input_size % 16 != 0 {
            return fail("segmenter_input_size must be a positive multiple of 16");
        }
        if self.segmenter_channels < 8 || self.segmenter_channels % 8 != 0 {
            return fail("segmenter_channels must be a multiple of 8");
        }
        if self.lstn_channels < 4 || self.lstn_channels % 4 != 0 {
            return fail("lstn_channels must be a multiple of 4");
        }
        if self.finetune_frame_stride == 0 {
            return fail("finetune_frame_stride must be positive");
        }
        Ok(())
    }

    /// Renders the configuration in the same format [`RunConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in Self::KEYS {
            out.push_str(&format!("# {doc}\n{key}={}\n", self.get(key).unwrap()));
        }
        out
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::io(path, e),
    })?;
    RunConfig::parse(&text)
}
