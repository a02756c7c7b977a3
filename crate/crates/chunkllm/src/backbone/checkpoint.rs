//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "CHKL" | version u32 | config_len u32 | config JSON |
//!   tensor_count u32 | per tensor: name_len u32, name bytes, ndim u32,
//!   dims u64 × ndim, payload_len u64, f32 payload.
//!
//! Tensors are written in name order (the map is a BTreeMap), so identical
//! inputs produce byte-identical files. Unknown tensor names round-trip
//! untouched.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::numerics::Tensor;
use crate::{Error, Result};

use super::{BackboneWeights, LayerWeights, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CHKL";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<P: AsRef<Path>>(
    path: P,
    config: &ModelConfig,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg_json = serde_json::to_vec(config).map_err(|e| Error::Format(format!("config: {e}")))?;
    w.write_all(&(cfg_json.len() as u32).to_le_bytes())?;
    w.write_all(&cfg_json)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&((t.numel() * 4) as u64).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_format<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format(format!("truncated checkpoint: {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_format(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or_format(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<(ModelConfig, BTreeMap<String, Tensor>)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact_or_format(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = read_u32(&mut r, "config length")? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    read_exact_or_format(&mut r, &mut cfg_buf, "config")?;
    let config: ModelConfig =
        serde_json::from_slice(&cfg_buf).map_err(|e| Error::Format(format!("config: {e}")))?;
    let count = read_u32(&mut r, "tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r, "name length")? as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact_or_format(&mut r, &mut name_buf, "name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("non-utf8 tensor name".into()))?;
        let ndim = read_u32(&mut r, "ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r, "dim")? as usize);
        }
        let payload_len = read_u64(&mut r, "payload length")? as usize;
        let numel: usize = shape.iter().product();
        if payload_len != numel * 4 {
            return Err(Error::Format(format!(
                "tensor {name}: payload {payload_len} bytes for shape {shape:?}"
            )));
        }
        let mut payload = vec![0u8; payload_len];
        read_exact_or_format(&mut r, &mut payload, "payload")?;
        let data: Vec<f32> =
            payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    // Trailing garbage means the writer and reader disagree about layout.
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after tensor table".into()));
    }
    Ok((config, tensors))
}

/// Exact on-disk size of a checkpoint with the given config and tensor table.
pub fn checkpoint_size(config: &ModelConfig, tensors: &BTreeMap<String, Tensor>) -> usize {
    let cfg_json = serde_json::to_vec(config).expect("config serializes");
    let mut size = 4 + 4 + 4 + cfg_json.len() + 4;
    for (name, t) in tensors {
        size += 4 + name.len() + 4 + 8 * t.shape().len() + 8 + 4 * t.numel();
    }
    size
}

/// Backbone weights as a named tensor table.
pub fn weights_to_named(w: &BackboneWeights) -> BTreeMap<String, Tensor> {
    let mut map = BTreeMap::new();
    map.insert("embed".to_string(), w.embed.clone());
    map.insert("final_norm".to_string(), w.final_norm.clone());
    for (i, l) in w.layers.iter().enumerate() {
        map.insert(format!("layers.{i}.wq"), l.wq.clone());
        map.insert(format!("layers.{i}.wk"), l.wk.clone());
        map.insert(format!("layers.{i}.wv"), l.wv.clone());
        map.insert(format!("layers.{i}.wo"), l.wo.clone());
        map.insert(format!("layers.{i}.w_up"), l.w_up.clone());
        map.insert(format!("layers.{i}.w_down"), l.w_down.clone());
        map.insert(format!("layers.{i}.norm1"), l.norm1.clone());
        map.insert(format!("layers.{i}.norm2"), l.norm2.clone());
    }
    map
}

/// Rebuild backbone weights from a named tensor table, shape-checked against
/// the config. Extra names (adapters) are ignored here.
pub fn named_to_weights(
    config: &ModelConfig,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<BackboneWeights> {
    config.validate()?;
    let d = config.d_model;
    let get = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, config wants {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t.clone())
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        layers.push(LayerWeights {
            wq: get(&format!("layers.{i}.wq"), &[d, d])?,
            wk: get(&format!("layers.{i}.wk"), &[d, d])?,
            wv: get(&format!("layers.{i}.wv"), &[d, d])?,
            wo: get(&format!("layers.{i}.wo"), &[d, d])?,
            w_up: get(&format!("layers.{i}.w_up"), &[d, 4 * d])?,
            w_down: get(&format!("layers.{i}.w_down"), &[4 * d, d])?,
            norm1: get(&format!("layers.{i}.norm1"), &[d])?,
            norm2: get(&format!("layers.{i}.norm2"), &[d])?,
        });
    }
    Ok(BackboneWeights {
        config: config.clone(),
        embed: get("embed", &[config.vocab_size, d])?,
        layers,
        final_norm: get("final_norm", &[d])?,
    })
}
