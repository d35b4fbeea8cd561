//! Binary checkpoint: magic, JSON header length (u64 LE), JSON header, then
//! every tensor's little-endian values in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use heteroseg_autograd::{NamedParam, Tensor};
use serde::{Deserialize, Serialize};

use super::{HybridGNet, LandmarkModelConfig, Model, ModelKind, PixelModelConfig, UNet};
use crate::anatomy::{ContourTopology, TopologyDoc};
use crate::error::{Error, Result};
use crate::Scalar;

const MAGIC: &[u8; 8] = b"HSEGCKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub dtype: String,
    pub topology: TopologyDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmark: Option<LandmarkModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel: Option<PixelModelConfig>,
    pub tensors: Vec<TensorEntry>,
    /// Free-form run metadata (resolved experiment config, setting, ...).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, metadata: serde_json::Value, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        kind: model.kind(),
        dtype: T::DTYPE.to_string(),
        topology: model.topology().to_doc(),
        landmark: model.as_landmark().map(|m| m.config().clone()),
        pixel: model.as_pixel().map(|m| m.config().clone()),
        tensors: model
            .store()
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec() })
            .collect(),
        metadata,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(json.len() + 16 + model.store().num_scalars() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.store().iter() {
        for &v in p.tensor.data() {
            v.write_le(&mut out);
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

fn read_value(dtype: &str, bytes: &[u8]) -> f64 {
    match dtype {
        "f32" => f32::from_le_bytes(bytes.try_into().unwrap()) as f64,
        _ => f64::from_le_bytes(bytes.try_into().unwrap()),
    }
}

/// Loads a checkpoint written at any precision into a model of type `T`.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(Model<T>, CheckpointHeader)> {
    let path = path.as_ref();
    let bad = |m: &str| Error::file(path, format!("checkpoint: {m}"));
    let mut buf = Vec::new();
    fs::File::open(path).map_err(|e| Error::file(path, e.to_string()))?.read_to_end(&mut buf)?;
    if buf.len() < 16 || &buf[..8] != MAGIC {
        return Err(bad("not a heteroseg checkpoint"));
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let body = buf.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(bad(&format!("unsupported dtype {other}"))),
    };
    let mut offset = 16 + hlen;
    let mut params = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = buf.get(offset..offset + n * width).ok_or_else(|| bad("truncated tensor data"))?;
        offset += n * width;
        let data = raw.chunks(width).map(|c| T::lit(read_value(&header.dtype, c))).collect();
        params.push(NamedParam { name: t.name.clone(), tensor: Tensor::from_vec(&t.shape, data)? });
    }
    if offset != buf.len() {
        return Err(bad("trailing bytes"));
    }
    let topology = Arc::new(ContourTopology::from_doc(&header.topology)?);
    let mut model = match header.kind {
        ModelKind::HybridGNet => {
            let cfg = header.landmark.clone().ok_or_else(|| bad("missing landmark config"))?;
            Model::from_parts_landmark(HybridGNet::new(cfg, (*topology).clone(), 0)?)
        }
        ModelKind::UNet | ModelKind::UNetHt => {
            let cfg = header.pixel.clone().ok_or_else(|| bad("missing pixel config"))?;
            Model::from_parts_pixel(UNet::new(cfg, 0)?, topology)?
        }
    };
    model.store_mut().load_from(params)?;
    Ok((model, header))
}
