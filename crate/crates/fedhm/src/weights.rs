//! Flat binary container for model weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      6 bytes   "FEDHM1"
//! spec_hash  u64       ModelSpec::spec_hash of the owning architecture
//! count      u32       number of tensor entries
//! entry*     repeated:
//!   name_len u16       then that many UTF-8 bytes (e.g. "layer3.w")
//!   ndim     u8        then ndim u32 extents
//!   dtype    u8        1 = f32, 2 = f64
//!   payload  ndim-product values, little-endian
//! ```
//!
//! The writer emits f64 payloads so a save/load round trip is bit-exact;
//! the reader accepts both dtype tags.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::modelspec::ModelSpec;
use crate::nn::model::{materialize, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"FEDHM1";
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;

/// Serializes every named tensor of the model (parameters and running
/// statistics) under the spec's hash.
pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let tensors = model.named_tensors();
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&model.spec.spec_hash().to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument("tensor name too long".into()));
        }
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(DTYPE_F64);
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Raw decoded container: the spec hash and the named tensors in file order.
#[derive(Debug)]
pub struct SavedWeights {
    pub spec_hash: u64,
    pub entries: Vec<(String, Tensor)>,
}

pub fn load_weights(path: &Path) -> Result<SavedWeights> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let magic = cur.take(6)?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}")));
    }
    let spec_hash = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::format(cur.pos as u64, "tensor name is not UTF-8"))?;
        let ndim = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
        }
        let dtype = cur.take(1)?[0];
        let volume: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            DTYPE_F32 => {
                let raw = cur.take(volume * 4)?;
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            }
            DTYPE_F64 => {
                let raw = cur.take(volume * 8)?;
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
            other => {
                return Err(Error::format(
                    cur.pos as u64,
                    format!("unknown dtype tag {other}"),
                ))
            }
        };
        entries.push((name, Tensor::new(&shape, data)?));
    }
    Ok(SavedWeights { spec_hash, entries })
}

/// Rebuilds a model from a container, verifying the spec hash and every
/// tensor's name and shape.
pub fn load_model(path: &Path, spec: &ModelSpec) -> Result<Model> {
    let saved = load_weights(path)?;
    if saved.spec_hash != spec.spec_hash() {
        return Err(Error::format(
            6,
            format!(
                "weights were saved for spec hash {:016x}, expected {:016x}",
                saved.spec_hash,
                spec.spec_hash()
            ),
        ));
    }
    let mut model = materialize(spec, 0)?;
    let expected: Vec<String> = model
        .named_tensors()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    if expected.len() != saved.entries.len() {
        return Err(Error::format(
            0,
            format!(
                "container holds {} tensors, spec needs {}",
                saved.entries.len(),
                expected.len()
            ),
        ));
    }
    // overwrite in canonical order; names must line up one-to-one
    {
        let mut slots = model_tensor_slots(&mut model);
        for ((name, tensor), (want_name, slot)) in saved
            .entries
            .into_iter()
            .zip(expected.iter().zip(slots.iter_mut()))
        {
            if &name != want_name {
                return Err(Error::format(
                    0,
                    format!("tensor `{name}` out of order, expected `{want_name}`"),
                ));
            }
            if tensor.shape() != slot.shape() {
                return Err(Error::format(
                    0,
                    format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        tensor.shape(),
                        slot.shape()
                    ),
                ));
            }
            **slot = tensor;
        }
    }
    Ok(model)
}

fn model_tensor_slots(model: &mut Model) -> Vec<&mut Tensor> {
    use crate::nn::model::Layer;
    let mut out = Vec::new();
    for layer in model.visit_layers_mut() {
        match layer {
            Layer::Dense { w, b } => {
                out.push(w);
                if let Some(b) = b {
                    out.push(b);
                }
            }
            Layer::FactorizedDense { u, v, b, .. } => {
                out.push(u);
                out.push(v);
                if let Some(b) = b {
                    out.push(b);
                }
            }
            Layer::Conv { w, .. } => out.push(w),
            Layer::FactorizedConv { u, v, .. } => {
                out.push(u);
                out.push(v);
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                out.push(gamma);
                out.push(beta);
                out.push(running_mean);
                out.push(running_var);
            }
            Layer::Relu | Layer::GlobalAvgPool | Layer::Flatten => {}
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("container truncated: wanted {n} more bytes"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}
