//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes   "FPRNCKPT"
//! version      u32       1
//! meta_len     u32       byte length of the JSON block
//! meta         meta_len  UTF-8 JSON {"meta": {...}, "layers": [...]}
//! count        u32       number of tensor records
//! record * count:
//!   name_len   u32
//!   name       name_len  UTF-8, e.g. "layer1.0.conv1.weight"
//!   dtype      u8        0 = f32
//!   rank       u32
//!   extents    u64 * rank
//!   values     f32 * product(extents), row-major
//! ```
//!
//! Records appear in layer order. Batch-norm running statistics are stored
//! alongside the parameters as `{id}.running_mean` and `{id}.running_var`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{tensor_layout, LayerSpec, ModelGraph, ModelMeta, TensorRole};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FPRNCKPT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Serialize, Deserialize)]
struct Header {
    meta: ModelMeta,
    layers: Vec<LayerSpec>,
}

pub fn save_checkpoint(model: &ModelGraph) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        meta: model.meta().clone(),
        layers: model.layers().to_vec(),
    })?;
    let layout = tensor_layout(model.layers());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(layout.len() as u32).to_le_bytes());
    for (name, _, role) in &layout {
        let t = match role {
            TensorRole::Param => &model.params()[name],
            TensorRole::Buffer => &model.buffers()[name],
        };
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a checkpoint. With `expected`, every tensor shape and the
/// architecture meta must match that model; the first mismatch is reported
/// as an incompatibility naming the tensor.
pub fn load_checkpoint(bytes: &[u8], expected: Option<&ModelGraph>) -> Result<ModelGraph> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32("meta length")? as usize;
    let header: Header = serde_json::from_slice(r.take(meta_len, "meta block")?)
        .map_err(|e| Error::Format(format!("meta block: {e}")))?;
    let count = r.u32("record count")? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("tensor `{name}` has unknown dtype tag {dtype}")));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` extents overflow")))?;
        let raw = r.take(n, "tensor values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if tensors.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after last record", bytes.len() - r.pos)));
    }

    if let Some(exp) = expected {
        check_compatible(&header, &tensors, exp)?;
    }

    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for (name, _, role) in tensor_layout(&header.layers) {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
        match role {
            TensorRole::Param => params.insert(name, t.with_requires_grad(true)),
            TensorRole::Buffer => buffers.insert(name, t),
        };
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Format(format!("checkpoint has unexpected tensor `{name}`")));
    }
    ModelGraph::from_parts(header.meta, header.layers, params, buffers)
        .map_err(|e| Error::Format(format!("checkpoint describes an invalid model: {e}")))
}

fn check_compatible(header: &Header, tensors: &BTreeMap<String, Tensor>, exp: &ModelGraph) -> Result<()> {
    for (name, shape, _) in tensor_layout(exp.layers()) {
        match tensors.get(&name) {
            None => {
                return Err(Error::Incompatible {
                    tensor: name,
                    detail: "missing from checkpoint".into(),
                })
            }
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::Incompatible {
                    tensor: name,
                    detail: format!("checkpoint shape {:?}, expected {shape:?}", t.shape()),
                })
            }
            _ => {}
        }
    }
    let m = &header.meta;
    let e = exp.meta();
    let field = if m.depth != e.depth {
        Some(("meta.depth", format!("{:?} vs expected {:?}", m.depth, e.depth)))
    } else if m.width_scale.to_bits() != e.width_scale.to_bits() {
        Some(("meta.width_scale", format!("{} vs expected {}", m.width_scale, e.width_scale)))
    } else if m.num_classes != e.num_classes {
        Some(("meta.num_classes", format!("{} vs expected {}", m.num_classes, e.num_classes)))
    } else if m.input_shape != e.input_shape {
        Some(("meta.input_shape", format!("{:?} vs expected {:?}", m.input_shape, e.input_shape)))
    } else if header.layers != exp.layers() {
        Some(("layers", "layer list differs".to_string()))
    } else {
        None
    };
    match field {
        Some((tensor, detail)) => Err(Error::Incompatible {
            tensor: tensor.into(),
            detail,
        }),
        None => Ok(()),
    }
}
