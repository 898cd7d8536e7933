//! Checkpoint layout: `u64` little-endian header length, a JSON header
//! (config, parameter names in file order, free-form metadata), then one
//! GTEN block per parameter in header order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CaptionModel, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::numerics::gten;

const FORMAT: &str = "guidecap-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    params: Vec<String>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A model plus arbitrary JSON metadata (training state, provenance).
pub struct Checkpoint {
    pub model: CaptionModel<f32>,
    pub meta: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &CaptionModel<f32>, meta: &serde_json::Value) -> std::io::Result<()> {
    let header = Header {
        format: FORMAT.into(),
        config: model.config.clone(),
        params: model.params.iter().map(|(n, _)| n.to_string()).collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in model.params.iter() {
        gten::write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let bad = |m: String| Error::Input(format!("checkpoint: {m}"));
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| bad(e.to_string()))?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 26 {
        return Err(bad(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(|e| bad(e.to_string()))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
    if header.format != FORMAT {
        return Err(bad(format!("unknown format `{}`", header.format)));
    }
    let mut tensors = BTreeMap::new();
    for name in header.params {
        let t = gten::read_tensor(r)
            .map_err(|e| bad(format!("parameter `{name}`: {e}")))?
            .with_requires_grad(true);
        tensors.insert(name, t);
    }
    let model = CaptionModel::from_parts(header.config, Parameters::from_map(tensors))?;
    Ok(Checkpoint { model, meta: header.meta })
}

pub fn save_checkpoint(path: &Path, model: &CaptionModel<f32>, meta: &serde_json::Value) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    write_checkpoint(&mut w, model, meta).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    read_checkpoint(&mut r)
}
