//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MCLCKPT1"  u32 version  u32 tensor_count
//! per tensor: u16 name_len, name (UTF-8), u32 rank, u32 dims[rank], f32 data
//! u32 json_len, JSON trailer {config, network, catalog, seed}
//! u64 seed
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgops::Factor;
use crate::model::{Network, NetworkSpec};
use crate::numcore::Tensor;
use crate::trainer::TrainConfig;

const MAGIC: &[u8; 8] = b"MCLCKPT1";
pub const FORMAT_VERSION: u32 = 1;

/// Trained networks plus what is needed to use them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub config: TrainConfig,
    /// Factor for each mapping, in mapping order.
    pub catalog: Vec<Factor>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Trailer {
    config: TrainConfig,
    network: NetworkSpec,
    catalog: Vec<Factor>,
    seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let params = self.network.named_params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, p) in &params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = p.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let trailer = Trailer {
            config: self.config.clone(),
            network: self.network.spec.clone(),
            catalog: self.catalog.clone(),
            seed: self.seed,
        };
        let json = serde_json::to_vec(&trailer).expect("trailer serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(at as u64, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::format(at as u64, format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::format(at as u64, "tensor too large"))?)?;
            let data = raw.chunks(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.push((at, name, Tensor::new(shape, data)?));
        }
        let json_at = r.pos;
        let json_len = r.u32()? as usize;
        let trailer: Trailer = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| Error::format(json_at as u64, format!("checkpoint trailer: {e}")))?;
        let seed_at = r.pos;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if seed != trailer.seed {
            return Err(Error::format(seed_at as u64, "seed disagrees with trailer"));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after checkpoint"));
        }
        if trailer.catalog.len() != trailer.network.factors {
            return Err(Error::format(json_at as u64, "catalog size differs from mapping count"));
        }

        let mut network = Network::<f32>::init(trailer.network, 0)?;
        let names: Vec<String> = network.named_params().into_iter().map(|(n, _)| n).collect();
        if tensors.len() != names.len() {
            return Err(Error::format(12, format!("{} tensors, model has {} parameters", tensors.len(), names.len())));
        }
        for ((name, param), (at, got, tensor)) in names.iter().zip(network.params_mut()).zip(tensors) {
            if *name != got {
                return Err(Error::format(at as u64, format!("expected tensor {name}, found {got}")));
            }
            if tensor.shape() != param.value.shape() {
                return Err(Error::format(
                    at as u64,
                    format!("tensor {name} has shape {:?}, expected {:?}", tensor.shape(), param.value.shape()),
                ));
            }
            param.value = tensor;
        }
        Ok(Checkpoint { network, config: trailer.config, catalog: trailer.catalog, seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.pos as u64, format!("truncated: wanted {n} bytes, {} left", self.bytes.len() - self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
