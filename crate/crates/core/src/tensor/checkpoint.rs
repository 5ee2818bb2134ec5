//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"JGCK"
//! u32    format version
//! u64    header length, then that many bytes of JSON
//! u64    tensor count
//! per tensor:
//!   u64  name length, then UTF-8 name bytes
//!   u64  rank, then rank u64 dims
//!   numel * u64  f64 bit patterns
//! ```
//!
//! Values travel as raw `f64` bit patterns, so a write/read round trip is
//! bit-identical, including negative zero and subnormals. The JSON header
//! carries the role tag (which model this is), its hyperparameters, and a
//! free-form string map for trainer bookkeeping such as the epoch to
//! resume from.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"JGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

// Guards against allocating absurd buffers when reading a corrupt file.
const MAX_NAME_LEN: u64 = 4096;
const MAX_TENSOR_ELEMENTS: u64 = 100_000_000;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    role: String,
    hyperparams: serde_json::Value,
    extra: BTreeMap<String, String>,
}

/// In-memory form of a checkpoint file.
#[derive(Debug)]
pub struct Checkpoint {
    /// Which model this is: `"generator"`, `"reward"`, `"critic"`,
    /// `"encoder"`, `"recommender"` or a trainer-state tag.
    pub role: String,
    /// Enough configuration to rebuild the model shell before loading
    /// tensors into it.
    pub hyperparams: serde_json::Value,
    /// Small string-valued bookkeeping (resume epoch, dataset checksum).
    pub extra: BTreeMap<String, String>,
    /// Named tensors in model order.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(role: impl Into<String>, hyperparams: serde_json::Value) -> Checkpoint {
        Checkpoint {
            role: role.into(),
            hyperparams,
            extra: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Tensor map keyed by name, consuming the checkpoint.
    pub fn into_tensor_map(self) -> BTreeMap<String, Tensor> {
        self.tensors.into_iter().collect()
    }
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let header = Header {
        schema_version: CHECKPOINT_VERSION,
        role: ck.role.clone(),
        hyperparams: ck.hyperparams.clone(),
        extra: ck.extra.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    w.write_all(&(ck.tensors.len() as u64).to_le_bytes())?;
    for (name, tensor) in &ck.tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u64).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(tensor.rank() as u64).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }

    let header_len = read_u64(&mut r)?;
    if header_len > 16 * 1024 * 1024 {
        return Err(Error::Checkpoint("header implausibly large".into()));
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    read_exact(&mut r, &mut header_bytes, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;

    let count = read_u64(&mut r)?;
    let mut tensors = Vec::with_capacity(count.min(4096) as usize);
    for i in 0..count {
        let name_len = read_u64(&mut r)?;
        if name_len > MAX_NAME_LEN {
            return Err(Error::Checkpoint(format!("tensor {i} name too long")));
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        read_exact(&mut r, &mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint(format!("tensor {i} name is not UTF-8")))?;
        let rank = read_u64(&mut r)?;
        if rank == 0 || rank > 2 {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has unsupported rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(&mut r)?;
            numel = numel.saturating_mul(d);
            shape.push(d as usize);
        }
        if numel == 0 || numel > MAX_TENSOR_ELEMENTS {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has implausible element count {numel}"
            )));
        }
        let mut data = Vec::with_capacity(numel as usize);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf, "tensor data")?;
            data.push(f64::from_bits(u64::from_le_bytes(buf)));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        tensors.push((name, tensor));
    }

    Ok(Checkpoint {
        role: header.role,
        hyperparams: header.hyperparams,
        extra: header.extra,
        tensors,
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("file truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, "u32")?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, "u64")?;
    Ok(u64::from_le_bytes(buf))
}
