//! Checkpoints: one JSON header line, then every parameter as little-endian
//! `f32` in header order.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{GestureModel, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "egoev-ckpt-1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: ModelConfig,
    pub params: Vec<ParamSpec>,
}

fn specs(model: &GestureModel) -> Vec<ParamSpec> {
    model
        .weights
        .named()
        .into_iter()
        .map(|(name, t)| ParamSpec {
            name,
            shape: t.shape().to_vec(),
        })
        .collect()
}

pub fn save_checkpoint<W: Write>(model: &GestureModel, mut w: W) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        config: model.config().clone(),
        params: specs(model),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut payload = Vec::with_capacity(model.param_count() * 4);
    for (_, t) in model.weights.named() {
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<R: BufRead>(mut r: R) -> Result<GestureModel> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {:?}", header.format)));
    }
    let mut model = GestureModel::new(header.config)?;
    if specs(&model) != header.params {
        return Err(Error::Format("parameter table does not match the stored config".into()));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != model.param_count() * 4 {
        return Err(Error::Truncated);
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    model.weights.assign_flat(&values)?;
    Ok(model)
}
