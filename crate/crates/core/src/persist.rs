//! Model checkpoint files.
//!
//! Layout: `HMEM`, format version (u32), the eleven [`ModelConfig`] fields
//! as u32, the array count (u32), then per array a u32-prefixed UTF-8 name,
//! rank and dims as u32, and the values as f64. Everything little-endian.

use std::fs;
use std::path::Path;

use hmem_autograd::Tensor;
use sha2::{Digest, Sha256};

use crate::codec::{put_f64s, put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};

pub const MODEL_MAGIC: &[u8; 4] = b"HMEM";
pub const MODEL_VERSION: u32 = 1;

impl Transformer {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = self.config();
        let mut out = Vec::with_capacity(self.num_parameters() * 8 + 1024);
        out.extend_from_slice(MODEL_MAGIC);
        put_u32(&mut out, MODEL_VERSION);
        for v in [
            c.vocab_size,
            c.d_model,
            c.n_layers,
            c.n_heads,
            c.d_ff,
            c.max_positions,
        ] {
            put_u32(&mut out, to_u32(v, "config field")?);
        }
        for v in [c.pad_id, c.mem_id, c.ret_id, c.call_retrieval_id, c.eos_id] {
            put_u32(&mut out, v);
        }
        put_u32(&mut out, to_u32(self.weights().len(), "array count")?);
        for (name, w) in self.names().iter().zip(self.weights()) {
            put_u32(&mut out, to_u32(name.len(), "name length")?);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, to_u32(w.rank(), "rank")?);
            for &d in w.shape() {
                put_u32(&mut out, to_u32(d, "dimension")?);
            }
            put_f64s(&mut out, w.data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.bytes(4, "magic")? != MODEL_MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut f = [0usize; 6];
        for v in &mut f {
            *v = r.u32("config")? as usize;
        }
        let mut ids = [0u32; 5];
        for v in &mut ids {
            *v = r.u32("config")?;
        }
        let config = ModelConfig {
            vocab_size: f[0],
            d_model: f[1],
            n_layers: f[2],
            n_heads: f[3],
            d_ff: f[4],
            max_positions: f[5],
            pad_id: ids[0],
            mem_id: ids[1],
            ret_id: ids[2],
            call_retrieval_id: ids[3],
            eos_id: ids[4],
        };
        config.validate()?;
        let count = r.u32("array count")? as usize;
        let mut named = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.bytes(len, "name")?)
                .map_err(|_| Error::Format("weight name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("{name}: shape overflows")))?;
            let data = r.f64s(n, &name)?;
            named.push((name, Tensor::new(shape, data)?));
        }
        r.finish()?;
        Transformer::from_named(config, named)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// First eight bytes of the SHA-256 of the checkpoint encoding.
    pub fn fingerprint(&self) -> Result<u64> {
        Ok(fingerprint_bytes(&self.to_bytes()?))
    }
}

pub fn fingerprint_bytes(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
