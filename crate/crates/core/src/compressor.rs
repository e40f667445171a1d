//! Segmented masks and coarse-to-fine compression of a chunk.
//!
//! A level of length `n` is followed by `ceil(n/k)` MEM tokens; MEM token
//! `j` may attend only to segment `[k*j, min(k*(j+1), n))` and itself, so
//! its output depends on that segment alone. Repeating this until a single
//! embedding remains yields the hierarchy `[m_0, ..., m_L]` with
//! `L = ceil(log_k n)`.

use std::ops::Range;

use hmem_autograd::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::{AttentionMask, BoundModel, InputPart, Transformer};

/// Smallest `L` with `k^L >= n`; zero for `n <= 1`.
pub fn hierarchy_depth(n: usize, k: usize) -> usize {
    assert!(k >= 2, "compression factor must be at least 2");
    let mut depth = 0;
    let mut reach: u128 = 1;
    while reach < n as u128 {
        reach *= k as u128;
        depth += 1;
    }
    depth
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentedMaskSpec {
    pub content_len: usize,
    pub factor: usize,
    pub mem_count: usize,
}

impl SegmentedMaskSpec {
    pub fn new(content_len: usize, factor: usize) -> Result<Self> {
        if factor < 2 {
            return Err(Error::Config(format!(
                "compression factor must be at least 2, got {factor}"
            )));
        }
        if content_len == 0 {
            return Err(Error::EmptyChunk);
        }
        Ok(Self {
            content_len,
            factor,
            mem_count: content_len.div_ceil(factor),
        })
    }

    /// Content positions summarized by MEM token `j`.
    pub fn segment(&self, j: usize) -> Range<usize> {
        segment_range(self.factor, j, self.content_len)
    }

    pub fn total_len(&self) -> usize {
        self.content_len + self.mem_count
    }

    /// Content positions `0..n`, then each MEM token at its segment's last position.
    pub fn positions(&self) -> Vec<usize> {
        (0..self.content_len)
            .chain((0..self.mem_count).map(|j| self.segment(j).end - 1))
            .collect()
    }
}

/// `[k*j, min(k*(j+1), len))`.
pub fn segment_range(k: usize, j: usize, len: usize) -> Range<usize> {
    (k * j).min(len)..(k * (j + 1)).min(len)
}

/// Mask over `[x_1..x_n, m_1..m_ceil(n/k)]`.
///
/// MEM row `j` sees its segment and itself, never other MEM tokens. Content
/// rows are causal within their own segment only: with full causal content
/// rows, a second layer would let MEM `j` read earlier segments through the
/// content states it attends to. The mask is block-diagonal, one block per
/// segment, so compression cost grows linearly with `n`.
pub fn build_segment_mask(n: usize, k: usize) -> Result<AttentionMask> {
    let spec = SegmentedMaskSpec::new(n, k)?;
    let groups = (0..spec.mem_count)
        .map(|j| {
            let seg = spec.segment(j);
            let len = seg.len();
            let members: Vec<usize> = seg.chain(std::iter::once(n + j)).collect();
            // Local layout: segment tokens then the MEM token, which sees all.
            let local = AttentionMask::from_fn(len + 1, |q, key| key <= q)?;
            Ok((members, local))
        })
        .collect::<Result<Vec<_>>>()?;
    AttentionMask::block_diagonal(spec.total_len(), groups)
}

/// One compression step: returns the hidden states at the MEM positions.
pub fn compress_level(bm: &BoundModel<'_>, level: Var, k: usize) -> Result<Var> {
    let g = bm.graph();
    let n = g.shape(level)[0];
    let spec = SegmentedMaskSpec::new(n, k)?;
    let mask = build_segment_mask(n, k)?;
    let mem = vec![bm.config().mem_id; spec.mem_count];
    let out = bm.forward(
        &[InputPart::Embeddings(level), InputPart::Tokens(mem)],
        &mask,
        &spec.positions(),
        None,
    )?;
    Ok(g.slice_rows(out.hidden, n, spec.mem_count)?)
}

/// A hierarchy whose levels are variables on a graph.
#[derive(Debug, Clone)]
pub struct HierarchyVars {
    pub k: usize,
    pub tokens: Vec<u32>,
    /// `levels[0]` is the raw token-embedding sequence; the last level has one row.
    pub levels: Vec<Var>,
}

impl HierarchyVars {
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn to_hierarchy(&self, g: &Graph) -> MemoryHierarchy {
        MemoryHierarchy {
            k: self.k,
            tokens: self.tokens.clone(),
            levels: self.levels.iter().map(|&v| g.value(v)).collect(),
        }
    }
}

/// Builds `[m_0, ..., m_L]` on the binding's graph with exactly `L` forwards.
pub fn build_hierarchy_vars(bm: &BoundModel<'_>, tokens: &[u32], k: usize) -> Result<HierarchyVars> {
    if tokens.is_empty() {
        return Err(Error::EmptyChunk);
    }
    SegmentedMaskSpec::new(tokens.len(), k)?;
    let g = bm.graph();
    let mut levels = vec![bm.embed_tokens(tokens)?];
    while g.shape(*levels.last().expect("non-empty"))[0] > 1 {
        let next = compress_level(bm, *levels.last().expect("non-empty"), k)?;
        levels.push(next);
    }
    Ok(HierarchyVars {
        k,
        tokens: tokens.to_vec(),
        levels,
    })
}

/// Stored coarse-to-fine memory of one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryHierarchy {
    pub k: usize,
    pub tokens: Vec<u32>,
    pub levels: Vec<Tensor>,
}

impl MemoryHierarchy {
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level_len(&self, level: usize) -> usize {
        self.levels[level].shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.levels[0].shape()[1]
    }

    pub fn bit_eq(&self, other: &MemoryHierarchy) -> bool {
        self.k == other.k
            && self.tokens == other.tokens
            && self.levels.len() == other.levels.len()
            && self.levels.iter().zip(&other.levels).all(|(a, b)| a.bit_eq(b))
    }
}

/// Inference-time hierarchy construction on frozen weights.
pub fn build_hierarchy(model: &Transformer, tokens: &[u32], k: usize) -> Result<MemoryHierarchy> {
    let g = Graph::new();
    let bm = model.bind_frozen(&g);
    Ok(build_hierarchy_vars(&bm, tokens, k)?.to_hierarchy(&g))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_matches_small_cases() {
        assert_eq!(hierarchy_depth(1, 4), 0);
        assert_eq!(hierarchy_depth(4, 4), 1);
        assert_eq!(hierarchy_depth(5, 4), 2);
        assert_eq!(hierarchy_depth(4096, 4), 6);
        assert_eq!(hierarchy_depth(2, 2), 1);
    }

    #[test]
    fn mask_for_four_tokens_factor_two() {
        let m = build_segment_mask(4, 2).unwrap();
        let allowed = |q: usize| (0..6).filter(|&k| m.allowed(q, k)).collect::<Vec<_>>();
        assert_eq!(allowed(4), vec![0, 1, 4]);
        assert_eq!(allowed(5), vec![2, 3, 5]);
        assert_eq!(allowed(3), vec![2, 3]);
        assert_eq!(allowed(1), vec![0, 1]);
        assert_eq!(m.num_blocks(), 2);
    }

    #[test]
    fn single_token_single_segment() {
        let m = build_segment_mask(1, 4).unwrap();
        assert_eq!(m.len(), 2);
        assert!(m.allowed(1, 0) && m.allowed(1, 1));
    }

    #[test]
    fn rejects_small_factor() {
        assert!(build_segment_mask(4, 1).is_err());
    }

    #[test]
    fn mem_positions_are_segment_ends() {
        let s = SegmentedMaskSpec::new(5, 2).unwrap();
        assert_eq!(s.positions(), vec![0, 1, 2, 3, 4, 1, 3, 4]);
    }
}
