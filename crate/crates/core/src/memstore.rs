//! Persistent database of chunk hierarchies.
//!
//! File layout, all integers little-endian: `HMDB`, version (u32), `k`
//! (u32), `d` (u32), model fingerprint (u64), next id (u64), chunk count
//! (u32); then per chunk its id (u64), token count (u32), the token ids
//! (u32 each), level count (u32) and per level its length (u32) followed
//! by `length * d` f64 values in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use hmem_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::codec::{put_f64s, put_u32, put_u64, to_u32, Reader};
use crate::compressor::{segment_range, MemoryHierarchy};
use crate::error::{Error, Result};

pub const DB_MAGIC: &[u8; 4] = b"HMDB";
pub const DB_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeRef {
    pub chunk_id: u64,
    pub level: usize,
    pub index: usize,
}

impl std::fmt::Display for NodeRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "c{}/l{}/{}", self.chunk_id, self.level, self.index)
    }
}

/// Indices one level down that node `index` summarizes.
pub fn child_range(k: usize, index: usize, lower_len: usize) -> Range<usize> {
    segment_range(k, index, lower_len)
}

/// Sequential split into pieces of `chunk_len`; the last may be shorter.
pub fn chunk_context(tokens: &[u32], chunk_len: usize) -> Result<Vec<Vec<u32>>> {
    if chunk_len == 0 {
        return Err(Error::Config("chunk length must be at least 1".into()));
    }
    Ok(tokens.chunks(chunk_len).map(<[u32]>::to_vec).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierDatabase {
    k: usize,
    d: usize,
    fingerprint: u64,
    next_id: u64,
    chunks: BTreeMap<u64, MemoryHierarchy>,
}

impl HierDatabase {
    pub fn new(k: usize, d: usize, fingerprint: u64) -> Self {
        Self {
            k,
            d,
            fingerprint,
            next_id: 0,
            chunks: BTreeMap::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d_model(&self) -> usize {
        self.d
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.chunks.keys().copied()
    }

    /// Chunks in id order.
    pub fn iter(&self) -> impl Iterator<Item = (u64, &MemoryHierarchy)> {
        self.chunks.iter().map(|(&id, h)| (id, h))
    }

    pub fn get(&self, id: u64) -> Option<&MemoryHierarchy> {
        self.chunks.get(&id)
    }

    /// Errors when the database was built by a different checkpoint.
    pub fn check_fingerprint(&self, model: u64) -> Result<()> {
        if model == self.fingerprint {
            Ok(())
        } else {
            Err(Error::FingerprintMismatch {
                model,
                database: self.fingerprint,
            })
        }
    }

    pub fn put_chunk(&mut self, hierarchy: MemoryHierarchy) -> Result<u64> {
        if hierarchy.k != self.k {
            return Err(Error::ConfigMismatch {
                field: "k",
                expected: self.k as u64,
                actual: hierarchy.k as u64,
            });
        }
        validate_hierarchy(&hierarchy, self.d)?;
        let id = self.next_id;
        self.next_id += 1;
        self.chunks.insert(id, hierarchy);
        Ok(id)
    }

    pub fn delete_chunk(&mut self, id: u64) -> Result<MemoryHierarchy> {
        self.chunks.remove(&id).ok_or(Error::UnknownChunk(id))
    }

    /// Reference to the single top-level node of a chunk.
    pub fn top_ref(&self, id: u64) -> Result<NodeRef> {
        let h = self.get(id).ok_or(Error::UnknownChunk(id))?;
        Ok(NodeRef {
            chunk_id: id,
            level: h.depth(),
            index: 0,
        })
    }

    pub fn child_refs(&self, r: NodeRef) -> Result<Vec<NodeRef>> {
        let h = self.get(r.chunk_id).ok_or(Error::UnknownChunk(r.chunk_id))?;
        if r.level == 0 {
            return Err(Error::NoChildren(r));
        }
        if r.level > h.depth() || r.index >= h.level_len(r.level) {
            return Err(Error::NodeOutOfRange(r));
        }
        Ok(child_range(self.k, r.index, h.level_len(r.level - 1))
            .map(|index| NodeRef {
                level: r.level - 1,
                index,
                ..r
            })
            .collect())
    }

    /// Embeddings of the children of `r`, in order.
    pub fn children_of(&self, r: NodeRef) -> Result<Tensor> {
        let refs = self.child_refs(r)?;
        let lower = &self.chunks[&r.chunk_id].levels[r.level - 1];
        let rows = child_range(self.k, r.index, lower.shape()[0]);
        let data = lower.data()[rows.start * self.d..rows.end * self.d].to_vec();
        Ok(Tensor::new(vec![refs.len(), self.d], data)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(DB_MAGIC);
        put_u32(&mut out, DB_VERSION);
        put_u32(&mut out, to_u32(self.k, "k")?);
        put_u32(&mut out, to_u32(self.d, "d")?);
        put_u64(&mut out, self.fingerprint);
        put_u64(&mut out, self.next_id);
        put_u32(&mut out, to_u32(self.chunks.len(), "chunk count")?);
        for (&id, h) in &self.chunks {
            put_u64(&mut out, id);
            put_u32(&mut out, to_u32(h.tokens.len(), "token count")?);
            for &t in &h.tokens {
                put_u32(&mut out, t);
            }
            put_u32(&mut out, to_u32(h.levels.len(), "level count")?);
            for level in &h.levels {
                put_u32(&mut out, to_u32(level.shape()[0], "level length")?);
                put_f64s(&mut out, level.data());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.bytes(4, "magic")? != DB_MAGIC {
            return Err(Error::Format("not a memory database (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != DB_VERSION {
            return Err(Error::Format(format!("unsupported database version {version}")));
        }
        let k = r.u32("k")? as usize;
        let d = r.u32("d")? as usize;
        if k < 2 || d == 0 {
            return Err(Error::Format(format!("invalid header k={k} d={d}")));
        }
        let fingerprint = r.u64("fingerprint")?;
        let next_id = r.u64("next id")?;
        let count = r.u32("chunk count")? as usize;
        let mut chunks = BTreeMap::new();
        for _ in 0..count {
            let id = r.u64("chunk id")?;
            if id >= next_id || chunks.contains_key(&id) {
                return Err(Error::Format(format!("invalid or duplicate chunk id {id}")));
            }
            let n_tokens = r.u32("token count")? as usize;
            let mut tokens = Vec::with_capacity(n_tokens.min(1 << 20));
            for _ in 0..n_tokens {
                tokens.push(r.u32("token")?);
            }
            let n_levels = r.u32("level count")? as usize;
            let mut levels = Vec::with_capacity(n_levels.min(64));
            for _ in 0..n_levels {
                let len = r.u32("level length")? as usize;
                let values = len
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format("level size overflows".into()))?;
                levels.push(Tensor::new(vec![len, d], r.f64s(values, "level data")?)?);
            }
            let h = MemoryHierarchy { k, tokens, levels };
            validate_hierarchy(&h, d)?;
            chunks.insert(id, h);
        }
        r.finish()?;
        Ok(Self {
            k,
            d,
            fingerprint,
            next_id,
            chunks,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn validate_hierarchy(h: &MemoryHierarchy, d: usize) -> Result<()> {
    let bad = |msg: String| Err(Error::Format(msg));
    if h.levels.is_empty() {
        return bad("hierarchy has no levels".into());
    }
    for level in &h.levels {
        if level.rank() != 2 || level.shape()[1] != d {
            return Err(Error::ConfigMismatch {
                field: "d",
                expected: d as u64,
                actual: level.shape().get(1).copied().unwrap_or(0) as u64,
            });
        }
    }
    if h.levels[0].shape()[0] != h.tokens.len() {
        return bad(format!(
            "level 0 has {} rows for {} tokens",
            h.levels[0].shape()[0],
            h.tokens.len()
        ));
    }
    for w in h.levels.windows(2) {
        let (lo, hi) = (w[0].shape()[0], w[1].shape()[0]);
        if lo <= 1 || hi != lo.div_ceil(h.k) {
            return bad(format!("level of {hi} rows cannot sit above one of {lo} with k={}", h.k));
        }
    }
    if h.levels.last().map(|l| l.shape()[0]) != Some(1) {
        return bad("top level must hold exactly one embedding".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hierarchy(k: usize, n: usize, d: usize) -> MemoryHierarchy {
        let mut levels = Vec::new();
        let mut len = n;
        let mut v = 0.0;
        loop {
            let data = (0..len * d)
                .map(|_| {
                    v += 0.25;
                    v
                })
                .collect();
            levels.push(Tensor::new(vec![len, d], data).unwrap());
            if len == 1 {
                break;
            }
            len = len.div_ceil(k);
        }
        MemoryHierarchy {
            k,
            tokens: (0..n as u32).collect(),
            levels,
        }
    }

    #[test]
    fn chunking_examples() {
        let t: Vec<u32> = (0..10).collect();
        let lens: Vec<usize> = chunk_context(&t, 4).unwrap().iter().map(Vec::len).collect();
        assert_eq!(lens, vec![4, 4, 2]);
        assert_eq!(chunk_context(&t[..4], 4).unwrap().len(), 1);
        assert!(chunk_context(&[], 4).unwrap().is_empty());
    }

    #[test]
    fn ids_are_monotonic_and_mismatch_names_both() {
        let mut db = HierDatabase::new(2, 3, 0);
        assert_eq!(db.put_chunk(hierarchy(2, 5, 3)).unwrap(), 0);
        assert_eq!(db.put_chunk(hierarchy(2, 1, 3)).unwrap(), 1);
        let err = db.put_chunk(hierarchy(4, 5, 3)).unwrap_err().to_string();
        assert!(err.contains('2') && err.contains('4'), "{err}");
    }

    #[test]
    fn ragged_children() {
        let mut db = HierDatabase::new(2, 3, 0);
        let id = db.put_chunk(hierarchy(2, 5, 3)).unwrap();
        let kids = db
            .child_refs(NodeRef {
                chunk_id: id,
                level: 1,
                index: 2,
            })
            .unwrap();
        assert_eq!(kids.iter().map(|r| r.index).collect::<Vec<_>>(), vec![4]);
        let leaf = NodeRef {
            chunk_id: id,
            level: 0,
            index: 0,
        };
        assert!(matches!(db.children_of(leaf), Err(Error::NoChildren(_))));
    }

    #[test]
    fn delete_keeps_other_ids() {
        let mut db = HierDatabase::new(2, 3, 0);
        db.put_chunk(hierarchy(2, 4, 3)).unwrap();
        db.put_chunk(hierarchy(2, 3, 3)).unwrap();
        db.delete_chunk(0).unwrap();
        assert_eq!(db.ids().collect::<Vec<_>>(), vec![1]);
        assert!(matches!(db.delete_chunk(0), Err(Error::UnknownChunk(0))));
        assert_eq!(db.put_chunk(hierarchy(2, 2, 3)).unwrap(), 2);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = HierDatabase::new(2, 3, 0).to_bytes().unwrap();
        bytes[1] = b'X';
        assert!(HierDatabase::from_bytes(&bytes).is_err());
    }
}
