//! Parameter checkpoint format.
//!
//! Layout: an 8-byte little-endian header length, a JSON header, then the
//! raw payload. The header lists every parameter in store order as
//! `{name, shape, trainable}` plus the scalar width; the payload is the
//! concatenation of all tensors as little-endian f64 (f32 stores widen
//! exactly, so round trips are bit-faithful at both widths).

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize, Clone)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// One parameter recovered from disk.
pub struct Entry {
    pub name: String,
    pub tensor_f64: Tensor<f64>,
    pub trainable: bool,
}

pub fn save<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<()> {
    let mut params = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (id, name, trainable) in store.iter_names() {
        let t = store.value(id);
        params.push(ParamMeta { name: name.to_string(), shape: t.shape().to_vec(), trainable });
        for &x in t.data() {
            payload.extend_from_slice(&x.f64().to_le_bytes());
        }
    }
    let header = Header { version: FORMAT_VERSION, dtype: S::DTYPE.to_string(), params };
    let hjson = serde_json::to_vec(&header)
        .map_err(|e| Error::input(format!("cannot encode checkpoint header: {e}")))?;
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::input(format!("cannot create {}: {e}", path.display())))?;
    f.write_all(&(hjson.len() as u64).to_le_bytes()).map_err(io_err)?;
    f.write_all(&hjson).map_err(io_err)?;
    f.write_all(&payload).map_err(io_err)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Entry>> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::input(format!("cannot open {}: {e}", path.display())))?;
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8).map_err(|_| truncated(path))?;
    let hlen = u64::from_le_bytes(len8) as usize;
    let mut hjson = vec![0u8; hlen];
    f.read_exact(&mut hjson).map_err(|_| truncated(path))?;
    let header: Header = serde_json::from_slice(&hjson)
        .map_err(|e| Error::input(format!("bad checkpoint header in {}: {e}", path.display())))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::input(format!(
            "checkpoint {} has format version {}, expected {FORMAT_VERSION}",
            path.display(),
            header.version
        )));
    }
    let mut entries = Vec::with_capacity(header.params.len());
    for meta in header.params {
        let numel: usize = meta.shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        f.read_exact(&mut raw).map_err(|_| truncated(path))?;
        let vals: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push(Entry {
            name: meta.name,
            tensor_f64: Tensor::new(meta.shape, vals),
            trainable: meta.trainable,
        });
    }
    let mut probe = [0u8; 1];
    if f.read(&mut probe).map_err(io_err)? != 0 {
        return Err(Error::input(format!(
            "checkpoint {} has trailing bytes beyond the declared payload",
            path.display()
        )));
    }
    Ok(entries)
}

/// Register every stored parameter into a fresh store with a caller-chosen
/// trainability, converting the payload to the target scalar width.
pub fn register_all<S: Scalar>(
    entries: &[Entry],
    store: &mut ParamStore<S>,
    trainable: bool,
) {
    for e in entries {
        let t: Tensor<S> = Tensor::new(
            e.tensor_f64.shape().to_vec(),
            e.tensor_f64.data().iter().map(|&x| S::from64(x)).collect(),
        );
        store.register(&e.name, t, trainable);
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::input(format!("checkpoint io error: {e}"))
}

fn truncated(path: &Path) -> Error {
    Error::input(format!("checkpoint {} is truncated", path.display()))
}
