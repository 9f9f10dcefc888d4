//! Binary parameter checkpoints: a magic tag, a JSON header describing the
//! tensors, then the values as little-endian `f64`.

use std::io::{Read, Write};

use catebounds_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CBCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    kind: &str,
    meta: &serde_json::Value,
    params: &ParamStore,
) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        meta: meta.clone(),
        tensors: params
            .iter()
            .map(|(n, t)| TensorInfo {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let bytes = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(&bytes)?;
    for (_, t) in params.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let len = u64::from_le_bytes(buf8) as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    let header: Header = serde_json::from_slice(&bytes)?;
    let mut params = ParamStore::new();
    for info in header.tensors {
        let count: usize = info.shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut buf8)?;
            data.push(f64::from_le_bytes(buf8));
        }
        params.add(info.name, Tensor::new(info.shape, data)?);
    }
    Ok(Checkpoint {
        kind: header.kind,
        meta: header.meta,
        params,
    })
}
