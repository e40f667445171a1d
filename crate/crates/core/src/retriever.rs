//! Retrieval encoding and top-down sparse descent over chunk hierarchies.
//!
//! A retrieval embedding starts as the hidden state of a RET token appended
//! to the context. At each level it is appended to the candidate memory
//! embeddings and run through the model; its attention over the candidates
//! picks the top `C` nodes, whose children become the next candidates, and
//! its hidden state becomes the new retrieval embedding.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use hmem_autograd::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::compressor::HierarchyVars;
use crate::error::{Error, Result};
use crate::memstore::{child_range, HierDatabase, NodeRef};
use crate::model::{AttentionMask, BoundModel, InputPart};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub num_ret_tokens: usize,
    pub top_c: usize,
    /// Stop descending when the largest candidate attention falls below this.
    pub early_stop_threshold: Option<f64>,
    /// Do not descend below this level.
    pub max_depth: Option<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            num_ret_tokens: 1,
            top_c: 2,
            early_stop_threshold: None,
            max_depth: None,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_c == 0 || self.num_ret_tokens == 0 {
            return Err(Error::Config("top_c and num_ret_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub level: usize,
    pub candidates: Vec<NodeRef>,
    pub attention: Vec<f64>,
    pub selected: Vec<NodeRef>,
}

#[derive(Debug, Clone)]
pub struct RetrievalState {
    pub embedding: Var,
    /// Level of the last processed step; `None` before descent starts.
    pub level: Option<usize>,
    pub trace: Vec<LevelTrace>,
    /// Unnormalized attention over the first step's candidates, `1 x c`.
    pub top_weights: Option<Var>,
}

/// One record per level with attention printed to six decimals.
pub fn format_trace(trace: &[LevelTrace]) -> String {
    let refs = |rs: &[NodeRef]| rs.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
    let mut s = String::new();
    for t in trace {
        let att: Vec<String> = t.attention.iter().map(|a| format!("{a:.6}")).collect();
        let _ = writeln!(
            s,
            "level {}: candidates [{}] attention [{}] selected [{}]",
            t.level,
            refs(&t.candidates),
            att.join(" "),
            refs(&t.selected)
        );
    }
    s
}

/// Hidden states of `num_ret` RET tokens appended to `context` under a causal mask.
pub fn encode_retrieval(
    bm: &BoundModel<'_>,
    context: &[u32],
    num_ret: usize,
) -> Result<Vec<RetrievalState>> {
    if context.is_empty() {
        return Err(Error::EmptyContext);
    }
    if num_ret == 0 {
        return Err(Error::Config("num_ret must be at least 1".into()));
    }
    let n = context.len() + num_ret;
    let mut tokens = context.to_vec();
    tokens.extend(std::iter::repeat_n(bm.config().ret_id, num_ret));
    let positions: Vec<usize> = (0..n).collect();
    let out = bm.forward(
        &[InputPart::Tokens(tokens)],
        &AttentionMask::causal(n),
        &positions,
        None,
    )?;
    let g = bm.graph();
    (context.len()..n)
        .map(|i| {
            Ok(RetrievalState {
                embedding: g.slice_rows(out.hidden, i, 1)?,
                level: None,
                trace: Vec::new(),
                top_weights: None,
            })
        })
        .collect()
}

/// Output of one aggregation step.
pub struct StepOutput {
    /// Retrieval row of the last-layer attention restricted to the
    /// candidates and renormalized.
    pub attention: Vec<f64>,
    /// The same row before renormalization as a graph value, `1 x c`.
    pub weights: Var,
    /// The new retrieval embedding.
    pub embedding: Var,
}

/// One aggregation step over `candidates` (`c x d`).
pub fn retrieve_step(bm: &BoundModel<'_>, candidates: Var, embedding: Var) -> Result<StepOutput> {
    let g = bm.graph();
    let c = g.shape(candidates)[0];
    if c == 0 {
        return Err(Error::EmptyCandidates);
    }
    let positions: Vec<usize> = (0..=c).collect();
    let out = bm.forward(
        &[InputPart::Embeddings(candidates), InputPart::Embeddings(embedding)],
        &AttentionMask::causal(c + 1),
        &positions,
        None,
    )?;
    let single_block = "causal retrieval masks are a single block";
    let attention = out.last_layer_attention.expect(single_block);
    let row = &attention.row(c)[..c];
    let total: f64 = row.iter().sum();
    let weights = g.slice_cols(g.slice_rows(out.attention.expect(single_block), c, 1)?, 0, c)?;
    Ok(StepOutput {
        attention: row.iter().map(|a| a / total).collect(),
        weights,
        embedding: g.slice_rows(out.hidden, c, 1)?,
    })
}

/// Indices of the `c` largest values, ties to the lower index, in index order.
pub fn top_c_indices(attention: &[f64], c: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..attention.len()).collect();
    order.sort_by(|&a, &b| attention[b].total_cmp(&attention[a]).then(a.cmp(&b)));
    order.truncate(c);
    order.sort_unstable();
    order
}

pub fn top_c(attention: &[f64], candidates: &[NodeRef], c: usize) -> Vec<NodeRef> {
    assert_eq!(attention.len(), candidates.len(), "one score per candidate");
    top_c_indices(attention, c)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

/// Whether descent should stop after processing `level`.
pub fn early_stop(attention: &[f64], level: usize, cfg: &RetrievalConfig) -> bool {
    let max = attention.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weak = cfg.early_stop_threshold.is_some_and(|t| max < t);
    let floor = cfg.max_depth.is_some_and(|d| level <= d);
    weak || floor
}

struct GraphChunk {
    levels: Vec<Var>,
    lens: Vec<usize>,
}

/// Chunk hierarchies as graph variables, keyed by chunk id.
///
/// Built either from in-graph hierarchies (training, gradients reach the
/// compressor) or from a stored database (inference, constants).
pub struct GraphDatabase {
    k: usize,
    chunks: BTreeMap<u64, GraphChunk>,
}

impl GraphDatabase {
    pub fn from_hierarchies(g: &Graph, k: usize, hierarchies: &[HierarchyVars]) -> Result<Self> {
        let mut chunks = BTreeMap::new();
        for (id, h) in hierarchies.iter().enumerate() {
            if h.k != k {
                return Err(Error::ConfigMismatch {
                    field: "k",
                    expected: k as u64,
                    actual: h.k as u64,
                });
            }
            let lens = h.levels.iter().map(|&v| g.shape(v)[0]).collect();
            chunks.insert(
                id as u64,
                GraphChunk {
                    levels: h.levels.clone(),
                    lens,
                },
            );
        }
        Ok(Self { k, chunks })
    }

    pub fn from_db(g: &Graph, db: &HierDatabase) -> Self {
        let chunks = db
            .iter()
            .map(|(id, h)| {
                let levels = h.levels.iter().map(|t| g.constant(t)).collect();
                let lens = h.levels.iter().map(|t| t.shape()[0]).collect();
                (id, GraphChunk { levels, lens })
            })
            .collect();
        Self { k: db.k(), chunks }
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.chunks.values().map(|c| c.levels.len() - 1).max().unwrap_or(0)
    }

    pub fn top_refs(&self) -> Vec<NodeRef> {
        self.chunks
            .iter()
            .map(|(&chunk_id, c)| NodeRef {
                chunk_id,
                level: c.levels.len() - 1,
                index: 0,
            })
            .collect()
    }

    fn chunk(&self, id: u64) -> Result<&GraphChunk> {
        self.chunks.get(&id).ok_or(Error::UnknownChunk(id))
    }

    pub fn children(&self, r: NodeRef) -> Result<Vec<NodeRef>> {
        let c = self.chunk(r.chunk_id)?;
        if r.level == 0 {
            return Err(Error::NoChildren(r));
        }
        if r.level >= c.levels.len() || r.index >= c.lens[r.level] {
            return Err(Error::NodeOutOfRange(r));
        }
        Ok(child_range(self.k, r.index, c.lens[r.level - 1])
            .map(|index| NodeRef {
                level: r.level - 1,
                index,
                ..r
            })
            .collect())
    }

    /// Rows for `refs`, contiguous runs sliced together.
    pub fn gather(&self, g: &Graph, refs: &[NodeRef]) -> Result<Var> {
        let mut parts = Vec::new();
        let mut i = 0;
        while i < refs.len() {
            let r = refs[i];
            let c = self.chunk(r.chunk_id)?;
            if r.level >= c.levels.len() || r.index >= c.lens[r.level] {
                return Err(Error::NodeOutOfRange(r));
            }
            let mut j = i + 1;
            while j < refs.len()
                && refs[j].chunk_id == r.chunk_id
                && refs[j].level == r.level
                && refs[j].index == r.index + (j - i)
                && refs[j].index < c.lens[r.level]
            {
                j += 1;
            }
            let level = c.levels[r.level];
            let run = j - i;
            parts.push(if run == c.lens[r.level] {
                level
            } else {
                g.slice_rows(level, r.index, run)?
            });
            i = j;
        }
        match parts.len() {
            0 => Err(Error::EmptyCandidates),
            1 => Ok(parts[0]),
            _ => Ok(g.concat_rows(&parts)?),
        }
    }

    /// All rows of each chunk at `level(chunk)`, in chunk-id order.
    fn gather_levels(&self, g: &Graph, level_of: impl Fn(usize) -> usize) -> Result<Var> {
        let parts: Vec<Var> = self
            .chunks
            .values()
            .map(|c| c.levels[level_of(c.levels.len() - 1)])
            .collect();
        match parts.len() {
            0 => Err(Error::EmptyDatabase),
            1 => Ok(parts[0]),
            _ => Ok(g.concat_rows(&parts)?),
        }
    }
}

/// Top-down sparse descent for one retrieval embedding.
///
/// The first step sees every chunk's top node. After each step the top-`C`
/// nodes are expanded into their children; selected level-0 nodes of
/// shallower chunks are carried along unchanged. Descent ends after a step
/// whose selection holds only level-0 nodes, or when [`early_stop`] fires.
pub fn sparse_retrieve(
    bm: &BoundModel<'_>,
    db: &GraphDatabase,
    mut state: RetrievalState,
    cfg: &RetrievalConfig,
) -> Result<RetrievalState> {
    cfg.validate()?;
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let g = bm.graph();
    let mut candidates = db.top_refs();
    loop {
        let level = candidates.iter().map(|r| r.level).max().expect("non-empty");
        let rows = db.gather(g, &candidates)?;
        let StepOutput {
            attention,
            weights,
            embedding,
        } = retrieve_step(bm, rows, state.embedding)?;
        let selected = top_c(&attention, &candidates, cfg.top_c);
        let stop = early_stop(&attention, level, cfg);
        state.embedding = embedding;
        state.top_weights.get_or_insert(weights);
        state.level = Some(level);
        state.trace.push(LevelTrace {
            level,
            candidates,
            attention,
            selected: selected.clone(),
        });
        if stop || selected.iter().all(|r| r.level == 0) {
            return Ok(state);
        }
        let mut next = Vec::new();
        for r in selected {
            if r.level == 0 {
                next.push(r);
            } else {
                next.extend(db.children(r)?);
            }
        }
        candidates = next;
    }
}

/// Descent without pruning: step `s` aggregates every node of each chunk at
/// level `max(top - s, 0)`. Equals [`sparse_retrieve`] when `C` is at least
/// the widest level.
pub fn dense_retrieve(bm: &BoundModel<'_>, db: &GraphDatabase, embedding: Var) -> Result<Var> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let mut r = embedding;
    for s in 0..=db.depth() {
        let rows = db.gather_levels(bm.graph(), |top| top.saturating_sub(s))?;
        r = retrieve_step(bm, rows, r)?.embedding;
    }
    Ok(r)
}

/// Result of retrieving with every RET token.
pub struct Retrieval {
    /// Final retrieval embeddings stacked as a soft prefix, `num_ret x d`.
    pub prefix: Var,
    pub states: Vec<RetrievalState>,
}

/// Encodes `context` and descends independently for each RET token.
pub fn retrieve(
    bm: &BoundModel<'_>,
    db: &GraphDatabase,
    context: &[u32],
    cfg: &RetrievalConfig,
) -> Result<Retrieval> {
    cfg.validate()?;
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let states = encode_retrieval(bm, context, cfg.num_ret_tokens)?
        .into_iter()
        .map(|s| sparse_retrieve(bm, db, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Var> = states.iter().map(|s| s.embedding).collect();
    let prefix = if rows.len() == 1 {
        rows[0]
    } else {
        bm.graph().concat_rows(&rows)?
    };
    Ok(Retrieval { prefix, states })
}

/// Retrieval against a stored database on frozen weights.
#[derive(Debug, Clone)]
pub struct RetrievedPrefix {
    pub prefix: Tensor,
    pub traces: Vec<Vec<LevelTrace>>,
}

pub fn retrieve_from_db(
    model: &crate::model::Transformer,
    db: &HierDatabase,
    context: &[u32],
    cfg: &RetrievalConfig,
) -> Result<RetrievedPrefix> {
    let g = Graph::new();
    let bm = model.bind_frozen(&g);
    let gdb = GraphDatabase::from_db(&g, db);
    let r = retrieve(&bm, &gdb, context, cfg)?;
    Ok(RetrievedPrefix {
        prefix: g.value(r.prefix),
        traces: r.states.into_iter().map(|s| s.trace).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs(n: usize) -> Vec<NodeRef> {
        (0..n)
            .map(|index| NodeRef {
                chunk_id: 0,
                level: 1,
                index,
            })
            .collect()
    }

    #[test]
    fn top_c_examples() {
        assert_eq!(top_c_indices(&[0.1, 0.5, 0.4], 1), vec![1]);
        assert_eq!(top_c_indices(&[0.5, 0.5], 1), vec![0]);
        assert_eq!(top_c_indices(&[0.2, 0.3, 0.5], 5), vec![0, 1, 2]);
        assert_eq!(top_c(&[0.1, 0.6, 0.3], &refs(3), 2), refs(3)[1..].to_vec());
    }

    #[test]
    fn early_stop_examples() {
        let mut cfg = RetrievalConfig {
            early_stop_threshold: Some(0.9),
            ..RetrievalConfig::default()
        };
        assert!(early_stop(&[0.5, 0.5], 3, &cfg));
        cfg.early_stop_threshold = None;
        assert!(!early_stop(&[0.5, 0.5], 3, &cfg));
        cfg.max_depth = Some(1);
        assert!(!early_stop(&[0.5, 0.5], 2, &cfg));
        assert!(early_stop(&[0.5, 0.5], 1, &cfg));
    }

    #[test]
    fn trace_format_has_six_decimals() {
        let t = LevelTrace {
            level: 1,
            candidates: refs(2),
            attention: vec![0.25, 0.75],
            selected: refs(1),
        };
        let s = format_trace(&[t]);
        assert!(s.contains("0.250000 0.750000"), "{s}");
        assert!(s.starts_with("level 1:"));
    }
}
