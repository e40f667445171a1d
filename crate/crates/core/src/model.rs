//! Decoder-only transformer with an explicit attention mask and positions.
//!
//! Inputs may mix token ids with raw embedding rows (memory or retrieval
//! embeddings). Blocks are pre-norm; the output projection is tied to the
//! token embedding table and scaled by `1/sqrt(d_model)` so that hidden
//! states and raw embeddings live on the same scale.

use std::cell::Cell;
use std::ops::Range;
use std::rc::Rc;

use hmem_autograd::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub pad_id: u32,
    pub mem_id: u32,
    pub ret_id: u32,
    pub call_retrieval_id: u32,
    pub eos_id: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_positions: 512,
            pad_id: 0,
            mem_id: 1,
            ret_id: 2,
            call_retrieval_id: 3,
            eos_id: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return bad("d_model, n_heads, n_layers and d_ff must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive".into());
        }
        let ids = self.special_ids();
        for (i, &(name, id)) in ids.iter().enumerate() {
            if id as usize >= self.vocab_size {
                return bad(format!("{name} id {id} is outside the vocabulary of {}", self.vocab_size));
            }
            if let Some(&(other, _)) = ids[..i].iter().find(|(_, o)| *o == id) {
                return bad(format!("{name} and {other} share id {id}"));
            }
        }
        Ok(())
    }

    fn special_ids(&self) -> [(&'static str, u32); 5] {
        [
            ("pad", self.pad_id),
            ("mem", self.mem_id),
            ("ret", self.ret_id),
            ("call_retrieval", self.call_retrieval_id),
            ("eos", self.eos_id),
        ]
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Boolean query-by-key attention pattern.
///
/// Stored as blocks that partition the positions; attention never crosses
/// blocks. A plain mask is a single block, while block-diagonal masks let
/// long segmented sequences run in linear memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    blocks: Vec<MaskBlock>,
    owner: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct MaskBlock {
    members: Vec<usize>,
    allow: Vec<bool>,
}

impl AttentionMask {
    /// Builds a mask from a row-major `n x n` table. The diagonal must be allowed.
    pub fn new(n: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != n * n {
            return Err(Error::InvalidMask(format!(
                "{} entries for a {n}x{n} mask",
                allow.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| !allow[i * n + i]) {
            return Err(Error::InvalidMask(format!("diagonal entry {i} is forbidden")));
        }
        Ok(Self {
            n,
            owner: (0..n).map(|i| (0, i)).collect(),
            blocks: vec![MaskBlock {
                members: (0..n).collect(),
                allow,
            }],
        })
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let allow = (0..n * n).map(|i| f(i / n, i % n)).collect();
        Self::new(n, allow)
    }

    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, |q, k| k <= q).expect("causal masks have a full diagonal")
    }

    /// Block-diagonal mask: each `(members, local)` pair is a group of
    /// positions with its own mask over them. Groups must partition `0..n`.
    pub fn block_diagonal(n: usize, groups: Vec<(Vec<usize>, AttentionMask)>) -> Result<Self> {
        let mut owner = vec![(usize::MAX, 0); n];
        let mut blocks = Vec::with_capacity(groups.len());
        for (b, (members, local)) in groups.into_iter().enumerate() {
            if local.len() != members.len() {
                return Err(Error::InvalidMask(format!(
                    "block {b} has {} members but a {}-wide mask",
                    members.len(),
                    local.len()
                )));
            }
            for (i, &m) in members.iter().enumerate() {
                if m >= n || owner[m].0 != usize::MAX {
                    return Err(Error::InvalidMask(format!(
                        "position {m} is out of range or in two blocks"
                    )));
                }
                owner[m] = (b, i);
            }
            let allow = (0..members.len() * members.len())
                .map(|i| local.allowed(i / members.len(), i % members.len()))
                .collect();
            blocks.push(MaskBlock { members, allow });
        }
        if let Some(i) = owner.iter().position(|o| o.0 == usize::MAX) {
            return Err(Error::InvalidMask(format!("position {i} is in no block")));
        }
        Ok(Self { n, blocks, owner })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        let (bq, i) = self.owner[query];
        let (bk, j) = self.owner[key];
        let b = &self.blocks[bq];
        bq == bk && b.allow[i * b.members.len() + j]
    }

    /// Row-major `n x n` table; quadratic, meant for small masks and tests.
    pub fn to_dense(&self) -> Vec<bool> {
        (0..self.n * self.n)
            .map(|i| self.allowed(i / self.n, i % self.n))
            .collect()
    }

    /// Position order that makes every block contiguous, or `None` if it already is the identity.
    fn permutation(&self) -> Option<Vec<usize>> {
        let perm: Vec<usize> = self.blocks.iter().flat_map(|b| b.members.iter().copied()).collect();
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            None
        } else {
            Some(perm)
        }
    }
}

/// One contiguous run of forward inputs.
#[derive(Debug, Clone)]
pub enum InputPart {
    Tokens(Vec<u32>),
    /// Rows of an `m x d_model` embedding matrix on the current graph.
    Embeddings(Var),
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub hidden: Var,
    /// Head-averaged post-softmax weights of the final layer, `n x n`.
    /// Only produced for single-block masks.
    pub last_layer_attention: Option<Tensor>,
    /// The same weights as a differentiable graph value.
    pub attention: Option<Var>,
    /// Next-token logits for the requested rows only.
    pub logits: Option<Var>,
}

/// Weights per block. Keys carry no bias: it would shift every score in a
/// row by the same amount and cancel in the softmax.
const PER_LAYER: usize = 15;

fn param_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
    for l in 0..config.n_layers {
        for p in [
            "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.wv",
            "attn.bv", "attn.wo", "attn.bo", "ln2.gain", "ln2.bias", "mlp.w1", "mlp.b1",
            "mlp.w2", "mlp.b2",
        ] {
            names.push(format!("layers.{l}.{p}"));
        }
    }
    names.push("ln_f.gain".into());
    names.push("ln_f.bias".into());
    names
}

fn param_shapes(c: &ModelConfig) -> Vec<Vec<usize>> {
    let (d, f) = (c.d_model, c.d_ff);
    let mut shapes = vec![vec![c.vocab_size, d], vec![c.max_positions, d]];
    for _ in 0..c.n_layers {
        shapes.extend([
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
        ]);
    }
    shapes.push(vec![d]);
    shapes.push(vec![d]);
    shapes
}

/// Model weights plus configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    config: ModelConfig,
    names: Vec<String>,
    weights: Vec<Tensor>,
}

impl Transformer {
    /// Seeded initialization: embeddings ~ N(0, 1), projections ~ N(0, 1/fan_in)
    /// with residual outputs further scaled by `1/sqrt(2 n_layers)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names = param_names(&config);
        let shapes = param_shapes(&config);
        let residual = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let weights = names
            .iter()
            .zip(shapes)
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let std = match name.rsplit('.').next().unwrap_or(name) {
                    "tok_emb" => 1.0,
                    "pos_emb" => 0.5,
                    "gain" => return Tensor::new(shape, vec![1.0; n]),
                    "bias" | "bq" | "bv" | "bo" | "b1" | "b2" => {
                        return Ok(Tensor::zeros(shape))
                    }
                    "wo" | "w2" => residual / (shape[0] as f64).sqrt(),
                    _ => 1.0 / (shape[0] as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            config,
            names,
            weights,
        })
    }

    pub(crate) fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let names = param_names(&config);
        let shapes = param_shapes(&config);
        if named.len() != names.len() {
            return Err(Error::Format(format!(
                "expected {} weight arrays, found {}",
                names.len(),
                named.len()
            )));
        }
        let mut weights = Vec::with_capacity(names.len());
        for ((name, tensor), (want, shape)) in named.into_iter().zip(names.iter().zip(&shapes)) {
            if &name != want || tensor.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "weight {name} {:?} does not match expected {want} {shape:?}",
                    tensor.shape()
                )));
            }
            weights.push(tensor);
        }
        Ok(Self {
            config,
            names,
            weights,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum()
    }

    pub fn token_embedding(&self, id: u32) -> &[f64] {
        self.weights[0].row(id as usize)
    }

    /// Trainable binding: every weight becomes a gradient-tracking leaf.
    pub fn bind<'g>(&self, graph: &'g Graph) -> BoundModel<'g> {
        self.bind_with(graph, true)
    }

    /// Inference binding: weights enter the graph as constants.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> BoundModel<'g> {
        self.bind_with(graph, false)
    }

    /// Binding over caller-provided variables, one per weight in order
    /// (used by gradient checks that own the parameter leaves).
    pub fn bind_vars<'g>(&self, graph: &'g Graph, params: &[Var]) -> Result<BoundModel<'g>> {
        if params.len() != self.weights.len() {
            return Err(Error::Config(format!(
                "{} variables for {} weights",
                params.len(),
                self.weights.len()
            )));
        }
        for ((&v, w), name) in params.iter().zip(&self.weights).zip(&self.names) {
            if graph.shape(v) != w.shape() {
                return Err(Error::Config(format!(
                    "{name}: variable shape {:?} differs from weight shape {:?}",
                    graph.shape(v),
                    w.shape()
                )));
            }
        }
        Ok(BoundModel {
            graph,
            config: Rc::new(self.config.clone()),
            params: Rc::new(params.to_vec()),
            checkpointing: false,
            forwards: Cell::new(0),
        })
    }

    fn bind_with<'g>(&self, graph: &'g Graph, trainable: bool) -> BoundModel<'g> {
        let params = self
            .weights
            .iter()
            .map(|w| {
                if trainable {
                    graph.leaf(&w.clone().with_requires_grad(true))
                } else {
                    graph.constant(w)
                }
            })
            .collect();
        BoundModel {
            graph,
            config: Rc::new(self.config.clone()),
            params: Rc::new(params),
            checkpointing: false,
            forwards: Cell::new(0),
        }
    }
}

/// A [`Transformer`] whose weights are recorded on one graph.
pub struct BoundModel<'g> {
    graph: &'g Graph,
    config: Rc<ModelConfig>,
    params: Rc<Vec<Var>>,
    checkpointing: bool,
    forwards: Cell<usize>,
}

impl<'g> BoundModel<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter variables in the order of [`Transformer::weights`].
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// When set, every forward pass is recorded as a checkpointed segment.
    pub fn set_checkpointing(&mut self, on: bool) {
        self.checkpointing = on;
    }

    pub fn checkpointing(&self) -> bool {
        self.checkpointing
    }

    /// Number of forward passes issued through this binding.
    pub fn forward_count(&self) -> usize {
        self.forwards.get()
    }

    pub fn reset_forward_count(&self) {
        self.forwards.set(0);
    }

    /// Token embedding rows without positions (the raw sequence `x`).
    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<Var> {
        check_tokens(&self.config, tokens)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        Ok(self.graph.gather(self.params[0], &ids)?)
    }

    pub fn forward(
        &self,
        parts: &[InputPart],
        mask: &AttentionMask,
        positions: &[usize],
        logit_rows: Option<Range<usize>>,
    ) -> Result<ForwardOutput> {
        let g = self.graph;
        let mut layout = Vec::with_capacity(parts.len());
        let mut emb_inputs = Vec::new();
        let mut n = 0;
        for part in parts {
            match part {
                InputPart::Tokens(t) => {
                    check_tokens(&self.config, t)?;
                    n += t.len();
                    layout.push(Layout::Tokens(t.iter().map(|&x| x as usize).collect()));
                }
                InputPart::Embeddings(v) => {
                    let shape = g.shape(*v);
                    if shape.len() != 2 || shape[1] != self.config.d_model {
                        return Err(Error::Config(format!(
                            "embedding input has shape {shape:?}, expected [_, {}]",
                            self.config.d_model
                        )));
                    }
                    n += shape[0];
                    layout.push(Layout::Embeddings);
                    emb_inputs.push(*v);
                }
            }
        }
        if n == 0 {
            return Err(Error::EmptyContext);
        }
        if mask.len() != n {
            return Err(Error::MaskDimension {
                mask: mask.len(),
                seq: n,
            });
        }
        if positions.len() != n {
            return Err(Error::Config(format!(
                "{} positions for a sequence of {n}",
                positions.len()
            )));
        }
        if let Some(&p) = positions.iter().max() {
            if p >= self.config.max_positions {
                return Err(Error::WindowOverflow {
                    needed: p + 1,
                    max: self.config.max_positions,
                });
            }
        }
        if let Some(r) = &logit_rows {
            if r.start >= r.end || r.end > n {
                return Err(Error::Config(format!("logit rows {r:?} outside 0..{n}")));
            }
        }
        self.forwards.set(self.forwards.get() + 1);

        let outs = if self.checkpointing {
            let spec = Rc::new(ForwardSpec {
                config: Rc::clone(&self.config),
                layout,
                mask: mask.clone(),
                positions: positions.to_vec(),
                logit_rows: logit_rows.clone(),
            });
            let n_emb = emb_inputs.len();
            let mut inputs = emb_inputs;
            inputs.extend(self.params.iter().copied());
            g.checkpoint(&inputs, move |sub, args| {
                let (embs, params) = args.split_at(n_emb);
                spec.run(sub, params, embs)
            })?
        } else {
            let spec = ForwardSpec {
                config: Rc::clone(&self.config),
                layout,
                mask: mask.clone(),
                positions: positions.to_vec(),
                logit_rows,
            };
            spec.run(g, &self.params, &emb_inputs)?
        };
        Ok(ForwardOutput {
            hidden: outs[0],
            last_layer_attention: (mask.num_blocks() == 1).then(|| g.value(outs[1])),
            attention: (mask.num_blocks() == 1).then_some(outs[1]),
            logits: outs.get(2).copied(),
        })
    }
}

fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        Some(t) => Err(Error::Config(format!(
            "token {t} is outside the vocabulary of {}",
            config.vocab_size
        ))),
        None => Ok(()),
    }
}

enum Layout {
    Tokens(Vec<usize>),
    Embeddings,
}

/// Everything a forward pass needs besides its tensor inputs.
struct ForwardSpec {
    config: Rc<ModelConfig>,
    layout: Vec<Layout>,
    mask: AttentionMask,
    positions: Vec<usize>,
    logit_rows: Option<Range<usize>>,
}

impl ForwardSpec {
    /// Returns `[hidden, mean attention, logits?]`.
    fn run(&self, g: &Graph, p: &[Var], embs: &[Var]) -> hmem_autograd::Result<Vec<Var>> {
        let c = &*self.config;
        let mut rows = Vec::with_capacity(self.layout.len());
        let mut next_emb = embs.iter();
        for part in &self.layout {
            rows.push(match part {
                Layout::Tokens(ids) => g.gather(p[0], ids)?,
                Layout::Embeddings => *next_emb.next().expect("one var per embedding part"),
            });
        }
        let mut x = if rows.len() == 1 {
            rows[0]
        } else {
            g.concat_rows(&rows)?
        };
        let perm = self.mask.permutation();
        let pos = match &perm {
            Some(perm) => {
                x = g.gather(x, perm)?;
                let permuted: Vec<usize> = perm.iter().map(|&i| self.positions[i]).collect();
                g.gather(p[1], &permuted)?
            }
            None => g.gather(p[1], &self.positions)?,
        };
        let mut x = g.add(x, pos)?;

        let dh = c.head_dim();
        let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();
        let mut attn_mean = None;
        for l in 0..c.n_layers {
            let w = &p[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
            let h = g.layer_norm(x, w[0], w[1])?;
            let q = g.add_row(g.matmul(h, w[2])?, w[3])?;
            let k = g.matmul(h, w[4])?;
            let v = g.add_row(g.matmul(h, w[5])?, w[6])?;
            let mut block_outs = Vec::with_capacity(self.mask.blocks.len());
            let mut probs = Vec::with_capacity(c.n_heads);
            let mut offset = 0;
            for block in &self.mask.blocks {
                let len = block.members.len();
                let rows = |t: Var| -> hmem_autograd::Result<Var> {
                    if len == self.positions.len() {
                        Ok(t)
                    } else {
                        g.slice_rows(t, offset, len)
                    }
                };
                let (qb, kb, vb) = (rows(q)?, rows(k)?, rows(v)?);
                let mut heads = Vec::with_capacity(c.n_heads);
                for head in 0..c.n_heads {
                    let qh = g.slice_cols(qb, head * dh, dh)?;
                    let kh = g.slice_cols(kb, head * dh, dh)?;
                    let vh = g.slice_cols(vb, head * dh, dh)?;
                    let scores = g.scale(g.matmul_t(qh, kh)?, inv_sqrt_dh)?;
                    let a = g.masked_softmax(scores, &block.allow)?;
                    heads.push(g.matmul(a, vh)?);
                    probs.push(a);
                }
                block_outs.push(if heads.len() == 1 {
                    heads[0]
                } else {
                    g.concat_cols(&heads)?
                });
                offset += len;
            }
            let o = if block_outs.len() == 1 {
                block_outs[0]
            } else {
                g.concat_rows(&block_outs)?
            };
            let o = g.add_row(g.matmul(o, w[7])?, w[8])?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, w[9], w[10])?;
            let f = g.gelu(g.add_row(g.matmul(h, w[11])?, w[12])?)?;
            let f = g.add_row(g.matmul(f, w[13])?, w[14])?;
            x = g.add(x, f)?;
            if l + 1 == c.n_layers && self.mask.blocks.len() == 1 {
                let mut acc = probs[0];
                for &pr in &probs[1..] {
                    acc = g.add(acc, pr)?;
                }
                attn_mean = Some(g.scale(acc, 1.0 / c.n_heads as f64)?);
            }
        }
        let last = 2 + c.n_layers * PER_LAYER;
        let mut hidden = g.layer_norm(x, p[last], p[last + 1])?;
        if let Some(perm) = &perm {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            hidden = g.gather(hidden, &inverse)?;
        }
        // Multi-block masks report a placeholder in the attention slot.
        let mut outs = vec![hidden, attn_mean.unwrap_or(hidden)];
        if let Some(rows) = &self.logit_rows {
            let h = if rows.len() == self.positions.len() {
                hidden
            } else {
                g.slice_rows(hidden, rows.start, rows.len())?
            };
            let logits = g.matmul_t(h, p[0])?;
            outs.push(g.scale(logits, 1.0 / (c.d_model as f64).sqrt())?);
        }
        Ok(outs)
    }
}

/// Greedy next token after `context`, with optional soft-prefix rows in front.
pub fn next_token(model: &Transformer, context: &[u32], prefix: Option<&Tensor>) -> Result<u32> {
    let g = Graph::new();
    let bm = model.bind_frozen(&g);
    let mut parts = Vec::with_capacity(2);
    let mut n = context.len();
    if let Some(pre) = prefix {
        if pre.numel() > 0 {
            let v = g.constant(pre);
            n += g.shape(v)[0];
            parts.push(InputPart::Embeddings(v));
        }
    }
    if context.is_empty() && parts.is_empty() {
        return Err(Error::EmptyContext);
    }
    if n > model.config.max_positions {
        return Err(Error::WindowOverflow {
            needed: n,
            max: model.config.max_positions,
        });
    }
    if !context.is_empty() {
        parts.push(InputPart::Tokens(context.to_vec()));
    }
    let positions: Vec<usize> = (0..n).collect();
    let out = bm.forward(&parts, &AttentionMask::causal(n), &positions, Some(n - 1..n))?;
    let logits = g.value(out.logits.expect("requested logits"));
    Ok(argmax(logits.data()) as u32)
}

/// Lowest index among the maxima.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding until `max_new` tokens or the end-of-sequence token.
///
/// The prefix rows occupy the positions before `context`. The end token is
/// included in the output when produced.
pub fn generate(
    model: &Transformer,
    context: &[u32],
    max_new: usize,
    prefix: Option<&Tensor>,
) -> Result<Vec<u32>> {
    let mut seq = context.to_vec();
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let t = next_token(model, &seq, prefix)?;
        out.push(t);
        seq.push(t);
        if t == model.config.eos_id {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_positions: 32,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_rejects_bad_heads_and_ids() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.ret_id = c.mem_id;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("share id"), "{msg}");
        let mut c = tiny();
        c.eos_id = 99;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mask_requires_diagonal() {
        assert!(AttentionMask::new(2, vec![true, false, true, false]).is_err());
        let m = AttentionMask::causal(3);
        assert!(m.allowed(2, 0) && !m.allowed(0, 2));
    }

    #[test]
    fn single_pad_attends_to_itself() {
        let model = Transformer::new(tiny(), 1).unwrap();
        let g = Graph::new();
        let bm = model.bind_frozen(&g);
        let out = bm
            .forward(
                &[InputPart::Tokens(vec![0])],
                &AttentionMask::causal(1),
                &[0],
                None,
            )
            .unwrap();
        assert_eq!(out.last_layer_attention.unwrap().data(), &[1.0]);
        assert_eq!(g.shape(out.hidden), vec![1, 8]);
    }

    #[test]
    fn overflow_and_mask_mismatch_are_rejected() {
        let model = Transformer::new(tiny(), 1).unwrap();
        let g = Graph::new();
        let bm = model.bind_frozen(&g);
        let err = bm
            .forward(&[InputPart::Tokens(vec![5; 2])], &AttentionMask::causal(3), &[0, 1], None)
            .unwrap_err();
        assert!(matches!(err, Error::MaskDimension { mask: 3, seq: 2 }));
        let err = bm
            .forward(&[InputPart::Tokens(vec![5])], &AttentionMask::causal(1), &[40], None)
            .unwrap_err();
        assert!(matches!(err, Error::WindowOverflow { .. }));
    }

    #[test]
    fn generate_zero_is_empty() {
        let model = Transformer::new(tiny(), 1).unwrap();
        assert!(generate(&model, &[5, 6], 0, None).unwrap().is_empty());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }
}
