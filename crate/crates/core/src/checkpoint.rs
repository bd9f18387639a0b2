//! Versioned model container.
//!
//! Layout: the magic `LPCK`, a little-endian `u32` format version, a `u64`
//! header length, a JSON header, then every tensor's values as consecutive
//! little-endian `f32`. The header records the network configuration, the
//! training mode and each tensor's name, shape and value offset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainMode;
use crate::error::{Error, Result};
use crate::nets::{NetConfig, ParamStore, GROUPS_3D};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LPCK";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    net: NetConfig,
    mode: TrainMode,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub mode: TrainMode,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Copy holding only what point-branch inference needs.
    pub fn export_3d_only(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.subset(&GROUPS_3D),
            ..self.clone()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            net: self.net.clone(),
            mode: self.mode,
            tensors,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < PREAMBLE || &bytes[..4] != MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let data_start = usize::try_from(header_len)
            .ok()
            .and_then(|h| h.checked_add(PREAMBLE))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::format("checkpoint header is truncated"))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..data_start])
            .map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
        let data = &bytes[data_start..];
        if !data.len().is_multiple_of(4) {
            return Err(Error::format("checkpoint data is not a whole number of f32 values"));
        }
        let values: Vec<f64> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let mut params = ParamStore::new();
        let mut expected_offset = 0;
        for e in header.tensors {
            let len: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.offset + len > values.len() {
                return Err(Error::format(format!("tensor `{}` lies outside the data block", e.name)));
            }
            expected_offset += len;
            params.insert(e.name, Tensor::new(e.shape, values[e.offset..e.offset + len].to_vec())?);
        }
        if expected_offset != values.len() {
            return Err(Error::format(format!(
                "checkpoint holds {} values but its tensors cover {expected_offset}",
                values.len()
            )));
        }
        header.net.validate()?;
        Ok(Checkpoint {
            net: header.net,
            mode: header.mode,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
