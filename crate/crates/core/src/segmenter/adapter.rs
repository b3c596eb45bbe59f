//! Loads externally produced segmenter weights at the reference geometry.
//!
//! A manifest is a JSON document:
//!
//! ```json
//! {
//!   "weights": "external.safetensors",
//!   "geometry": { "input_size": 1024, "channels": 256, "decoder_depth": 2, "heads": 1 },
//!   "tensors": { "<external name>": "<block>.<parameter path>", ... }
//! }
//! ```
//!
//! `weights` is resolved relative to the manifest. Every parameter of the
//! model must be covered by exactly one mapping; external tensors without a
//! mapping are ignored with a warning.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::Deserialize;

use super::{SamLite, SegmenterConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{device, DTYPE};

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct Geometry {
    pub input_size: usize,
    pub channels: usize,
    pub decoder_depth: usize,
    #[serde(default = "one")]
    pub heads: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
pub struct AdapterManifest {
    pub weights: String,
    pub geometry: Geometry,
    pub tensors: BTreeMap<String, String>,
}

impl AdapterManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
            _ => Error::io(path, e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn load_adapted(manifest_path: &Path) -> Result<SamLite> {
    let manifest = AdapterManifest::load(manifest_path)?;
    let reference = SegmenterConfig::reference();
    let g = manifest.geometry;
    if (g.input_size, g.channels) != (reference.input_size, reference.channels) {
        return Err(Error::Config(format!(
            "adapter expects the {}-pixel, {}-channel reference geometry, manifest declares {}/{}",
            reference.input_size, reference.channels, g.input_size, g.channels
        )));
    }
    let config = SegmenterConfig {
        decoder_depth: g.decoder_depth,
        heads: g.heads,
        ..reference
    };
    let model = SamLite::new(config)?;

    let weights = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.weights);
    if !weights.exists() {
        return Err(Error::NotFound(weights.display().to_string()));
    }
    let external = candle_core::safetensors::load(&weights, &device())?;
    let mut tensors = HashMap::new();
    for (ext, t) in &external {
        match manifest.tensors.get(ext) {
            Some(name) => {
                if tensors.insert(name.clone(), t.to_dtype(DTYPE)?).is_some() {
                    return Err(Error::Checkpoint(format!("{name} is mapped more than once")));
                }
            }
            None => log::warn!("adapter: external tensor {ext} has no mapping, ignored"),
        }
    }
    for ext in manifest.tensors.keys() {
        if !external.contains_key(ext) {
            return Err(Error::Checkpoint(format!("mapped tensor {ext} missing from {}", weights.display())));
        }
    }
    let ck = Checkpoint {
        model: "segmenter".into(),
        config: serde_json::to_value(config)?,
        blocks: BTreeMap::new(),
        tensors,
    };
    for block in model.blocks() {
        ck.restore_into(block.vars)?;
    }
    Ok(model)
}
