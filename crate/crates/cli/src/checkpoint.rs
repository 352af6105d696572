//! `LSKC` checkpoint container.
//!
//! ```text
//! magic  "LSKC"
//! u32    version (1)
//! u32    spec descriptor length, then UTF-8 bytes
//! u32    tensor count
//! per tensor:
//!   u32 name length, UTF-8 name
//!   u8  dtype (0 = IEEE-754 binary32)
//!   u8  rank
//!   u32 × rank dims
//!   raw little-endian values
//! ```
//!
//! All integers are little-endian.

use std::path::Path;

use lsk_core::complexity::ModelSpec;
use lsk_core::train::Network;

use crate::{atomic_write, CliError, Result};

pub const MAGIC: &[u8; 4] = b"LSKC";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// [`ModelSpec::to_descriptor`] text.
    pub spec: String,
    pub tensors: Vec<NamedTensor>,
}

/// Why a byte stream is not a valid checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("not an LSKC checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnknownVersion(u32),
    #[error("unsupported dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("invalid UTF-8 in a string field")]
    Utf8,
    #[error("tensor size overflows")]
    TooLarge,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(FormatError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn string(&mut self) -> std::result::Result<String, FormatError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FormatError::Utf8)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.spec);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.push(DTYPE_F32);
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Checkpoint, FormatError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).map_err(|_| FormatError::BadMagic)? != MAGIC {
            return Err(FormatError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::UnknownVersion(version));
        }
        let spec = r.string()?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(FormatError::UnknownDtype(dtype));
            }
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .and_then(|n| n.checked_mul(4))
                .ok_or(FormatError::TooLarge)?;
            let data = r
                .take(len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != buf.len() {
            return Err(FormatError::Trailing(buf.len() - r.pos));
        }
        Ok(Checkpoint { spec, tensors })
    }

    pub fn from_network(net: &Network<f32>) -> Checkpoint {
        let tensors = net
            .param_infos()
            .into_iter()
            .zip(net.params())
            .map(|(info, data)| NamedTensor {
                name: info.name,
                dims: info.dims.iter().map(|&d| d as u32).collect(),
                data: data.to_vec(),
            })
            .collect();
        Checkpoint { spec: net.spec().to_descriptor(), tensors }
    }

    /// Rebuilds the network, checking every tensor name and shape.
    pub fn to_network(&self) -> std::result::Result<Network<f32>, String> {
        let spec = ModelSpec::from_descriptor(&self.spec).map_err(|e| e.to_string())?;
        let infos = Network::<f32>::zeros(&spec).map_err(|e| e.to_string())?.param_infos();
        if infos.len() != self.tensors.len() {
            return Err(format!("spec needs {} tensors, file has {}", infos.len(), self.tensors.len()));
        }
        for (info, t) in infos.iter().zip(&self.tensors) {
            let dims: Vec<usize> = t.dims.iter().map(|&d| d as usize).collect();
            if info.name != t.name || info.dims != dims {
                return Err(format!(
                    "expected {} {:?}, found {} {:?}",
                    info.name, info.dims, t.name, t.dims
                ));
            }
        }
        Network::from_params(&spec, self.tensors.iter().map(|t| t.data.clone()).collect()).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(CliError::io(path))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| CliError::Checkpoint { path: path.to_path_buf(), reason: e.to_string() })
    }
}

pub fn save_network(net: &Network<f32>, path: &Path) -> Result<()> {
    Checkpoint::from_network(net).save(path)
}

pub fn load_network(path: &Path) -> Result<Network<f32>> {
    Checkpoint::load(path)?
        .to_network()
        .map_err(|reason| CliError::Checkpoint { path: path.to_path_buf(), reason })
}
