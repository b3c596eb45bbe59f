//! Checkpoint container shared by both networks.
//!
//! A checkpoint is a safetensors file. Tensor names are `<block>.<path>`; the
//! header metadata carries:
//!
//! | key      | value                                                      |
//! |----------|------------------------------------------------------------|
//! | `format` | `shadowsam-checkpoint-v1`                                  |
//! | `model`  | `segmenter` or `lstn`                                      |
//! | `config` | JSON model configuration needed to rebuild the network     |
//! | `blocks` | JSON object `{ "<block>": { "frozen": bool, "parameters": n } }` |

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::Tensor;
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{device, DTYPE};

pub const FORMAT: &str = "shadowsam-checkpoint-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub frozen: bool,
    pub parameters: usize,
}

/// One named group of parameters.
pub struct ParamBlock<'a> {
    pub name: &'a str,
    pub vars: &'a VarMap,
    pub frozen: bool,
}

pub fn save_checkpoint(
    path: &Path,
    model: &str,
    config: &serde_json::Value,
    blocks: &[ParamBlock<'_>],
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    let mut infos = BTreeMap::new();
    for block in blocks {
        let data = block.vars.data().lock().unwrap();
        let mut count = 0;
        for (name, var) in data.iter() {
            if !name.starts_with(&format!("{}.", block.name)) {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} is outside block {}",
                    block.name
                )));
            }
            count += var.elem_count();
            tensors.push((name.clone(), var.as_tensor().contiguous()?));
        }
        infos.insert(
            block.name.to_string(),
            BlockInfo {
                frozen: block.frozen,
                parameters: count,
            },
        );
    }
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    let metadata: HashMap<String, String> = [
        ("format".to_string(), FORMAT.to_string()),
        ("model".to_string(), model.to_string()),
        ("config".to_string(), config.to_string()),
        ("blocks".to_string(), serde_json::to_string(&infos)?),
    ]
    .into_iter()
    .collect();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    safetensors::serialize_to_file(tensors, Some(metadata), path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: String,
    pub config: serde_json::Value,
    pub blocks: BTreeMap<String, BlockInfo>,
    pub tensors: HashMap<String, Tensor>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::NotFound(path.display().to_string()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let (_, header) =
        safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| bad("missing metadata".into()))?;
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| bad(format!("missing metadata key {k}")))
    };
    if field("format")? != FORMAT {
        return Err(bad(format!("unsupported format {}", field("format")?)));
    }
    let blocks: BTreeMap<String, BlockInfo> = serde_json::from_str(&field("blocks")?)?;
    let config: serde_json::Value = serde_json::from_str(&field("config")?)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &device())?
        .into_iter()
        .map(|(k, t)| Ok((k, t.to_dtype(DTYPE)?)))
        .collect::<Result<HashMap<_, _>>>()?;
    for name in tensors.keys() {
        let block = name.split('.').next().unwrap_or_default();
        if !blocks.contains_key(block) {
            return Err(bad(format!("tensor {name} belongs to no declared block")));
        }
    }
    Ok(Checkpoint {
        model: field("model")?,
        config,
        blocks,
        tensors,
    })
}

impl Checkpoint {
    pub fn expect_model(&self, model: &str) -> Result<()> {
        if self.model != model {
            return Err(Error::Checkpoint(format!(
                "expected a {model} checkpoint, found {}",
                self.model
            )));
        }
        Ok(())
    }

    /// Overwrites every variable of `vars` with the stored tensor of the same name.
    pub fn restore_into(&self, vars: &VarMap) -> Result<()> {
        let data = vars.data().lock().unwrap();
        for (name, var) in data.iter() {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: stored {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(t)?;
        }
        Ok(())
    }
}
