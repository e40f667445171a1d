//! End-to-end training of compression, retrieval and prediction.
//!
//! Each step rebuilds the example hierarchies inside the graph, so the
//! answer loss backpropagates through every retrieval step and every
//! compression level into the shared weights.

use hmem_autograd::{Graph, Tensor, Var};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compressor::{build_hierarchy_vars, hierarchy_depth};
use crate::data::IclSample;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::model::{argmax, AttentionMask, BoundModel, InputPart, ModelConfig, Transformer};
use crate::retriever::{retrieve, GraphDatabase, LevelTrace, RetrievalConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Compression factor; every ICL example is one chunk.
    pub k: usize,
    pub retrieval: RetrievalConfig,
    pub lr: f64,
    /// Samples whose gradients are accumulated per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub checkpointing: bool,
    /// Weight of the auxiliary loss on the answer with all examples in the window.
    pub full_context_weight: f64,
    /// Weight of the auxiliary squared error between top-level retrieval
    /// attention and an even split over the relevant example chunks. Zero
    /// trains on answers alone.
    pub selection_weight: f64,
    /// First epoch that applies `selection_weight`; earlier epochs train on
    /// answers alone.
    pub selection_start_epoch: usize,
    /// Held-out samples scored after each epoch.
    pub eval_samples: usize,
    /// Optional induction pretraining run before the first epoch.
    pub pretrain: PretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            k: 4,
            retrieval: RetrievalConfig::default(),
            lr: 1e-3,
            batch_size: 16,
            epochs: 1,
            seed: 0,
            checkpointing: false,
            full_context_weight: 1.0,
            selection_weight: 0.0,
            selection_start_epoch: 0,
            eval_samples: 200,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale recipe for the synthetic ICL benchmark: a 2-layer model,
    /// 3000 pretraining steps, 12 answer-only epochs, then 8 epochs with the
    /// selection term. About 15 minutes single-threaded on 8000 samples.
    pub fn icl_recipe(vocab_size: usize) -> Self {
        let mut cfg = Self {
            epochs: 20,
            selection_weight: 1.0,
            selection_start_epoch: 12,
            ..Self::default()
        };
        cfg.model.vocab_size = vocab_size;
        cfg.model.n_layers = 2;
        cfg.model.max_positions = 64;
        cfg.pretrain.steps = 3000;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.retrieval.validate()?;
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::Config("lr and batch_size must be positive".into()));
        }
        if !(self.full_context_weight >= 0.0) || !(self.selection_weight >= 0.0) {
            return Err(Error::Config("auxiliary loss weights must be non-negative".into()));
        }
        self.pretrain.validate(&self.model)
    }
}

/// Generic sequence-copying pretraining that gives the model in-context
/// lookup before it meets the ICL task.
///
/// Each sequence is a random string over a small alphabet, drawn afresh from
/// every non-special token, followed by a verbatim repeat. Single tokens recur
/// within the string, so predicting the repeat needs multi-token matching,
/// which is the skill ICL lookup relies on. The loss covers every repeated
/// position after the first two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Distinct symbols available to one sequence.
    pub alphabet: usize,
    /// Length range of the string before it repeats.
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 0,
            batch_size: 32,
            lr: 1e-3,
            alphabet: 5,
            min_len: 8,
            max_len: 20,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.steps == 0 {
            return Ok(());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 || self.alphabet < 2 {
            return Err(Error::Config(
                "pretraining needs a positive lr and batch size and an alphabet of at least 2".into(),
            ));
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "pretraining lengths must satisfy 3 <= min_len <= max_len, got {}..={}",
                self.min_len, self.max_len
            )));
        }
        if 2 * self.max_len > model.max_positions {
            return Err(Error::Config(format!(
                "pretraining sequences of {} tokens exceed max_positions {}",
                2 * self.max_len,
                model.max_positions
            )));
        }
        if pretrain_symbols(model).len() < self.alphabet {
            return Err(Error::Config("vocabulary too small for the pretraining alphabet".into()));
        }
        Ok(())
    }
}

/// Every token id except the special ones.
pub fn pretrain_symbols(model: &ModelConfig) -> Vec<u32> {
    let special = [model.pad_id, model.mem_id, model.ret_id, model.call_retrieval_id, model.eos_id];
    (0..model.vocab_size as u32).filter(|t| !special.contains(t)).collect()
}

/// One pretraining sequence and the rows whose next token is scored.
pub fn pretrain_sequence(rng: &mut ChaCha8Rng, symbols: &[u32], cfg: &PretrainConfig) -> (Vec<u32>, Vec<usize>) {
    let alphabet: Vec<u32> = symbols.choose_multiple(rng, cfg.alphabet).copied().collect();
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let half: Vec<u32> = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
    let mut tokens = half.clone();
    tokens.extend_from_slice(&half);
    (tokens, (len + 1..2 * len - 1).collect())
}

fn pretrain_loss(bm: &BoundModel<'_>, tokens: &[u32], rows: &[usize]) -> Result<Var> {
    let g = bm.graph();
    let n = tokens.len();
    let positions: Vec<usize> = (0..n).collect();
    let out = bm.forward(
        &[InputPart::Tokens(tokens.to_vec())],
        &AttentionMask::causal(n),
        &positions,
        Some(0..n),
    )?;
    let logits = g.gather(out.logits.expect("requested logits"), rows)?;
    let targets: Vec<usize> = rows.iter().map(|&r| tokens[r + 1] as usize).collect();
    Ok(g.cross_entropy(logits, &targets)?)
}

/// Forward passes by phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardCounts {
    pub build: usize,
    pub encode: usize,
    pub descent: usize,
    pub predict: usize,
}

impl ForwardCounts {
    /// Compression, encoding and descent; the final prediction is excluded.
    pub fn retrieval_total(&self) -> usize {
        self.build + self.encode + self.descent
    }
}

pub struct PipelineOutput {
    pub loss: Var,
    pub correct: bool,
    /// Descent trace of each retrieval token.
    pub traces: Vec<Vec<LevelTrace>>,
    /// First-step attention of each retrieval token, aligned with `traces`.
    pub top_weights: Vec<Var>,
    pub forwards: ForwardCounts,
}

/// Mean answer-token NLL given an optional soft prefix and a context.
///
/// The answer is teacher-forced; `correct` holds when every answer token is
/// the argmax, which is exactly when greedy decoding reproduces the answer.
pub fn answer_forward(
    bm: &BoundModel<'_>,
    prefix: Option<Var>,
    context: &[u32],
    answer: &[u32],
) -> Result<(Var, bool)> {
    let g = bm.graph();
    if context.is_empty() || answer.is_empty() {
        return Err(Error::EmptyContext);
    }
    let mut parts = Vec::with_capacity(2);
    let p = match prefix {
        Some(v) => {
            parts.push(InputPart::Embeddings(v));
            g.shape(v)[0]
        }
        None => 0,
    };
    let mut tokens = context.to_vec();
    tokens.extend_from_slice(&answer[..answer.len() - 1]);
    let n = p + tokens.len();
    parts.push(InputPart::Tokens(tokens));
    let positions: Vec<usize> = (0..n).collect();
    let first = p + context.len() - 1;
    let out = bm.forward(
        &parts,
        &AttentionMask::causal(n),
        &positions,
        Some(first..first + answer.len()),
    )?;
    let rows = out.logits.expect("requested logits");
    let targets: Vec<usize> = answer.iter().map(|&t| t as usize).collect();
    let loss = g.cross_entropy(rows, &targets)?;
    let values = g.value(rows);
    let correct = (0..answer.len()).all(|i| argmax(values.row(i)) == targets[i]);
    Ok((loss, correct))
}

/// Compress every example, retrieve for the target question, predict the answer.
pub fn pipeline_forward(
    bm: &BoundModel<'_>,
    sample: &IclSample,
    k: usize,
    rcfg: &RetrievalConfig,
) -> Result<PipelineOutput> {
    let g = bm.graph();
    let start = bm.forward_count();
    let hierarchies = sample
        .examples
        .iter()
        .map(|e| build_hierarchy_vars(bm, &e.chunk_tokens(), k))
        .collect::<Result<Vec<_>>>()?;
    let built = bm.forward_count();
    let db = GraphDatabase::from_hierarchies(g, k, &hierarchies)?;
    let r = retrieve(bm, &db, &sample.target_question, rcfg)?;
    let retrieved = bm.forward_count();
    let (loss, correct) = answer_forward(bm, Some(r.prefix), &sample.target_question, &sample.target_answer)?;
    let steps: usize = r.states.iter().map(|s| s.trace.len()).sum();
    Ok(PipelineOutput {
        loss,
        correct,
        top_weights: r.states.iter().filter_map(|s| s.top_weights).collect(),
        traces: r.states.into_iter().map(|s| s.trace).collect(),
        forwards: ForwardCounts {
            build: built - start,
            encode: retrieved - built - steps,
            descent: steps,
            predict: bm.forward_count() - retrieved,
        },
    })
}

/// Training objective for one sample: retrieval-path loss plus the weighted
/// auxiliary terms.
pub fn sample_loss(
    bm: &BoundModel<'_>,
    sample: &IclSample,
    cfg: &TrainConfig,
) -> Result<(Var, PipelineOutput)> {
    let g = bm.graph();
    let out = pipeline_forward(bm, sample, cfg.k, &cfg.retrieval)?;
    let mut total = out.loss;
    if cfg.full_context_weight > 0.0 {
        let (full, _) = answer_forward(bm, None, &sample.full_context(), &sample.target_answer)?;
        total = g.add(total, g.scale(full, cfg.full_context_weight)?)?;
    }
    if cfg.selection_weight > 0.0 {
        for (&weights, trace) in out.top_weights.iter().zip(&out.traces) {
            let relevant: Vec<bool> = trace[0]
                .candidates
                .iter()
                .map(|r| sample.examples[r.chunk_id as usize].relevant)
                .collect();
            let share = 1.0 / relevant.iter().filter(|&&r| r).count().max(1) as f64;
            let target: Vec<f64> = relevant.iter().map(|&r| if r { -share } else { 0.0 }).collect();
            let diff = g.add(weights, g.constant(&Tensor::new(vec![1, target.len()], target)?))?;
            let term = g.sum(g.mul(diff, diff)?)?;
            total = g.add(total, g.scale(term, cfg.selection_weight)?)?;
        }
    }
    Ok((total, out))
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weights: &[Tensor]) -> Self {
        let zeros = || weights.iter().map(|w| vec![0.0; w.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, weights: &mut [Tensor], grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((w, g), m), v) in weights.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &gi), mi), vi) in w.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Pretrain {
        step: usize,
        loss: f64,
        grad_norm: f64,
    },
    Step {
        step: usize,
        loss: f64,
        grad_norm: f64,
    },
    Epoch {
        epoch: usize,
        train_loss: f64,
        accuracy: f64,
        match_rate: f64,
    },
}

#[derive(Debug, Clone)]
pub struct Divergence {
    pub step: usize,
    pub loss: f64,
}

pub struct TrainOutcome {
    /// Final weights, or the last good weights when training diverged.
    pub model: Transformer,
    pub history: Vec<MetricRecord>,
    pub diverged: Option<Divergence>,
}

/// Gradients of the objective for one sample, in weight order.
pub fn sample_gradients(
    model: &Transformer,
    sample: &IclSample,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    loss_gradients(model, cfg.checkpointing, |bm| Ok(sample_loss(bm, sample, cfg)?.0))
}

fn loss_gradients(
    model: &Transformer,
    checkpointing: bool,
    loss: impl FnOnce(&BoundModel<'_>) -> Result<Var>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let g = Graph::new();
    let mut bm = model.bind(&g);
    bm.set_checkpointing(checkpointing);
    let loss = loss(&bm)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    let per_param = bm
        .params()
        .iter()
        .zip(model.weights())
        .map(|(&p, w)| grads.get_or_zeros(p, w.numel()))
        .collect();
    Ok((value, per_param))
}

/// Averages per-sample gradients over a batch and applies one optimizer
/// step. Returns the mean loss, the gradient norm and whether both were
/// finite; a non-finite step leaves the weights untouched.
fn batch_step(
    model: &mut Transformer,
    opt: &mut Adam,
    batch: usize,
    mut sample: impl FnMut(&Transformer, usize) -> Result<(f64, Vec<Vec<f64>>)>,
) -> Result<(f64, f64, bool)> {
    let mut acc: Vec<Vec<f64>> = model.weights().iter().map(|w| vec![0.0; w.numel()]).collect();
    let mut total = 0.0;
    for i in 0..batch {
        let (loss, grads) = sample(model, i)?;
        total += loss;
        for (a, g) in acc.iter_mut().zip(&grads) {
            a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
        }
    }
    let scale = 1.0 / batch as f64;
    acc.iter_mut().flatten().for_each(|x| *x *= scale);
    let loss = total * scale;
    let grad_norm = acc.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let finite = loss.is_finite() && grad_norm.is_finite();
    if finite {
        opt.step(model.weights_mut(), &acc);
    }
    Ok((loss, grad_norm, finite))
}

/// Trains from `init` (or a fresh seeded model) over `train` for `cfg.epochs`,
/// after `cfg.pretrain.steps` pretraining steps.
///
/// Each optimizer step averages the gradients of `batch_size` samples.
/// Execution is single-threaded, so a fixed seed reproduces the metric
/// history bit for bit. `on_record` sees every record as it is produced.
pub fn train(
    cfg: &TrainConfig,
    init: Option<Transformer>,
    train: &[IclSample],
    heldout: &[IclSample],
    mut on_record: impl FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = match init {
        Some(m) => m,
        None => Transformer::new(cfg.model.clone(), cfg.seed)?,
    };
    let mut history = Vec::new();
    let mut record = |r: MetricRecord, history: &mut Vec<MetricRecord>| {
        on_record(&r);
        history.push(r);
    };
    let diverged = |model, history, step, loss| TrainOutcome {
        model,
        history,
        diverged: Some(Divergence { step, loss }),
    };

    let pre = &cfg.pretrain;
    if pre.steps > 0 {
        let symbols = pretrain_symbols(&cfg.model);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
        let mut opt = Adam::new(pre.lr, model.weights());
        for step in 0..pre.steps {
            let (loss, grad_norm, ok) = batch_step(&mut model, &mut opt, pre.batch_size, |m, _| {
                let (tokens, rows) = pretrain_sequence(&mut rng, &symbols, pre);
                loss_gradients(m, false, |bm| pretrain_loss(bm, &tokens, &rows))
            })?;
            record(MetricRecord::Pretrain { step, loss, grad_norm }, &mut history);
            if !ok {
                return Ok(diverged(model, history, step, loss));
            }
        }
    }

    let mut opt = Adam::new(cfg.lr, model.weights());
    let mut step = 0;
    let eval_set = &heldout[..cfg.eval_samples.min(heldout.len())];
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_cfg = cfg.clone();
        if epoch < cfg.selection_start_epoch {
            epoch_cfg.selection_weight = 0.0;
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad_norm, ok) = batch_step(&mut model, &mut opt, batch.len(), |m, i| {
                sample_gradients(m, &train[batch[i]], &epoch_cfg)
            })?;
            record(MetricRecord::Step { step, loss, grad_norm }, &mut history);
            if !ok {
                return Ok(diverged(model, history, step, loss));
            }
            epoch_loss += loss * batch.len() as f64;
            step += 1;
        }
        let report = evaluate(
            &model,
            eval_set,
            &EvalOptions {
                k: cfg.k,
                retrieval: cfg.retrieval.clone(),
                baselines: false,
                keep_samples: false,
            },
        )?;
        record(
            MetricRecord::Epoch {
                epoch,
                train_loss: if train.is_empty() { 0.0 } else { epoch_loss / train.len() as f64 },
                accuracy: report.accuracy,
                match_rate: report.match_rate,
            },
            &mut history,
        );
    }
    Ok(TrainOutcome {
        model,
        history,
        diverged: None,
    })
}

/// `2 * ceil(log_k n) + 2`: compression, encoding, and a full descent for
/// one chunk and one retrieval token.
pub fn count_forwards(n: usize, k: usize) -> usize {
    2 * hierarchy_depth(n, k) + 2
}

/// `T n^2 + T n d` in unit-constant activation elements.
pub fn activation_estimate(t: usize, n: usize, d: usize) -> f64 {
    let (t, n, d) = (t as f64, n as f64, d as f64);
    t * n * n + t * n * d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub levels: usize,
    pub forwards_per_sample: usize,
    /// Activation estimate with `T` equal to the forward count.
    pub activation_estimate: f64,
}

impl CostReport {
    pub fn new(n: usize, k: usize, d: usize) -> Self {
        let forwards = count_forwards(n, k);
        Self {
            n,
            k,
            d,
            levels: hierarchy_depth(n, k),
            forwards_per_sample: forwards,
            activation_estimate: activation_estimate(forwards, n, d),
        }
    }
}

/// Counts the forwards of compressing one chunk of `n` tokens and running one
/// retrieval token through a full descent.
pub fn instrumented_forwards(model: &Transformer, n: usize, k: usize) -> Result<ForwardCounts> {
    let g = Graph::new();
    let bm = model.bind_frozen(&g);
    let c = model.config();
    let first = c.eos_id.max(c.call_retrieval_id).max(c.ret_id).max(c.mem_id).max(c.pad_id) + 1;
    let span = (c.vocab_size as u32 - first).max(1);
    let tokens: Vec<u32> = (0..n).map(|i| first + (i as u32 * 7) % span).collect();
    let h = build_hierarchy_vars(&bm, &tokens, k)?;
    let built = bm.forward_count();
    let db = GraphDatabase::from_hierarchies(&g, k, &[h])?;
    let cfg = RetrievalConfig {
        num_ret_tokens: 1,
        top_c: k,
        early_stop_threshold: None,
        max_depth: None,
    };
    let r = retrieve(&bm, &db, &tokens[..1], &cfg)?;
    let descent = r.states[0].trace.len();
    Ok(ForwardCounts {
        build: built,
        encode: bm.forward_count() - built - descent,
        descent,
        predict: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_examples() {
        assert_eq!(count_forwards(4096, 4), 14);
        assert_eq!(count_forwards(1, 4), 2);
        assert_eq!(count_forwards(16, 4), 6);
        assert_eq!(count_forwards(2, 2), 4);
        assert_eq!(activation_estimate(1, 1, 1), 2.0);
        assert_eq!(activation_estimate(6, 5, 3), 2.0 * activation_estimate(3, 5, 3));
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut w = vec![Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()];
        let mut opt = Adam::new(0.1, &w);
        opt.step(&mut w, &[vec![2.0, -3.0]]);
        let d = w[0].data();
        assert!((d[0] - 0.9).abs() < 1e-9 && (d[1] + 0.9).abs() < 1e-9, "{d:?}");
    }

    #[test]
    fn pretrain_sequences_repeat_over_a_small_alphabet() {
        let model = ModelConfig::default();
        let symbols = pretrain_symbols(&model);
        assert!(!symbols.contains(&model.mem_id) && !symbols.contains(&model.pad_id));
        let cfg = PretrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (tokens, rows) = pretrain_sequence(&mut rng, &symbols, &cfg);
            let len = tokens.len() / 2;
            assert!((cfg.min_len..=cfg.max_len).contains(&len));
            assert_eq!(tokens[..len], tokens[len..]);
            let mut distinct = tokens.clone();
            distinct.sort_unstable();
            distinct.dedup();
            assert!(distinct.len() <= cfg.alphabet);
            assert_eq!(rows.first(), Some(&(len + 1)));
            assert_eq!(rows.last(), Some(&(2 * len - 2)));
        }
    }

    #[test]
    fn recipe_validates_and_weights_must_be_non_negative() {
        let mut cfg = TrainConfig::icl_recipe(133);
        assert!(cfg.validate().is_ok());
        assert!(cfg.selection_start_epoch < cfg.epochs);
        cfg.selection_weight = -0.5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn pretrain_config_is_checked_only_when_enabled() {
        let model = ModelConfig {
            max_positions: 16,
            ..ModelConfig::default()
        };
        let mut cfg = PretrainConfig::default();
        assert!(cfg.validate(&model).is_ok());
        cfg.steps = 1;
        assert!(matches!(cfg.validate(&model), Err(Error::Config(_))));
        cfg.max_len = 8;
        assert!(cfg.validate(&model).is_ok());
        cfg.min_len = 2;
        assert!(cfg.validate(&model).is_err());
        cfg.min_len = 8;
        cfg.alphabet = 1;
        assert!(cfg.validate(&model).is_err());
    }
}
