//! Zero-shot, full-context and compressor-retriever scoring.

use std::fmt::Write as _;

use hmem_autograd::Graph;
use serde::{Deserialize, Serialize};

use crate::compressor::build_hierarchy;
use crate::data::IclSample;
use crate::error::Result;
use crate::memstore::HierDatabase;
use crate::model::Transformer;
use crate::retriever::{format_trace, retrieve_from_db, RetrievalConfig};
use crate::trainer::answer_forward;

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub k: usize,
    pub retrieval: RetrievalConfig,
    /// Also score the zero-shot and full-context modes.
    pub baselines: bool,
    /// Keep per-sample records in the report.
    pub keep_samples: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub correct: bool,
    pub zero_shot_correct: Option<bool>,
    pub full_context_correct: Option<bool>,
    /// Example indices selected at the top level, over all retrieval tokens.
    pub selected: Vec<u64>,
    pub relevant: Vec<u64>,
    pub matched: bool,
    pub trace: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub zero_shot_accuracy: Option<f64>,
    pub full_context_accuracy: Option<f64>,
    pub match_rate: f64,
    pub random_match_baseline: f64,
    /// Whether zero-shot <= compressor-retriever <= full-context held.
    pub ordering_holds: Option<bool>,
    pub samples: Vec<SampleEval>,
}

impl EvalReport {
    /// Plain-text comparison table.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8}", "method", "accuracy");
        let _ = writeln!(s, "{:<24} {:>8}", "zero-shot", fmt(self.zero_shot_accuracy));
        let _ = writeln!(s, "{:<24} {:>8}", "full context (6-shot)", fmt(self.full_context_accuracy));
        let _ = writeln!(s, "{:<24} {:>8}", "compressor-retriever", fmt(Some(self.accuracy)));
        let _ = writeln!(
            s,
            "match rate {:.3} (random selection {:.3}) over {} samples",
            self.match_rate, self.random_match_baseline, self.n
        );
        if let Some(ok) = self.ordering_holds {
            let _ = writeln!(s, "ordering zero-shot <= retriever <= full: {}", if ok { "holds" } else { "VIOLATED" });
        }
        s
    }
}

/// Probability that a uniformly random `c`-subset of `n` items contains all `r` marked ones.
pub fn random_match_probability(n: usize, r: usize, c: usize) -> f64 {
    if c < r || c > n {
        return if c >= n { 1.0 } else { 0.0 };
    }
    binomial(n - r, c - r) / binomial(n, c)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn eval_sample(model: &Transformer, fingerprint: u64, s: &IclSample, opts: &EvalOptions) -> Result<SampleEval> {
    let mut db = HierDatabase::new(opts.k, model.config().d_model, fingerprint);
    for e in &s.examples {
        db.put_chunk(build_hierarchy(model, &e.chunk_tokens(), opts.k)?)?;
    }
    let r = retrieve_from_db(model, &db, &s.target_question, &opts.retrieval)?;
    let g = Graph::new();
    let bm = model.bind_frozen(&g);
    let prefix = g.constant(&r.prefix);
    let (_, correct) = answer_forward(&bm, Some(prefix), &s.target_question, &s.target_answer)?;
    let (zero, full) = if opts.baselines {
        let z = answer_forward(&bm, None, &s.target_question, &s.target_answer)?.1;
        let f = answer_forward(&bm, None, &s.full_context(), &s.target_answer)?.1;
        (Some(z), Some(f))
    } else {
        (None, None)
    };
    let mut selected: Vec<u64> = r
        .traces
        .iter()
        .filter_map(|t| t.first())
        .flat_map(|t| t.selected.iter().map(|n| n.chunk_id))
        .collect();
    selected.sort_unstable();
    selected.dedup();
    let relevant: Vec<u64> = s.relevant_indices().into_iter().map(|i| i as u64).collect();
    let matched = relevant.iter().all(|r| selected.contains(r));
    let trace = if opts.keep_samples {
        r.traces.iter().map(|t| format_trace(t)).collect::<Vec<_>>().join("")
    } else {
        String::new()
    };
    Ok(SampleEval {
        correct,
        zero_shot_correct: zero,
        full_context_correct: full,
        selected,
        relevant,
        matched,
        trace,
    })
}

/// Scores every sample; work is split across threads, results keep input order.
pub fn evaluate(model: &Transformer, samples: &[IclSample], opts: &EvalOptions) -> Result<EvalReport> {
    let fingerprint = model.fingerprint()?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(samples.len().max(1));
    let per = samples.len().div_ceil(threads).max(1);
    let results: Vec<Result<Vec<SampleEval>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(per)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| eval_sample(model, fingerprint, s, opts))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    let mut evals = Vec::with_capacity(samples.len());
    for r in results {
        evals.extend(r?);
    }
    let n = evals.len();
    let rate = |f: &dyn Fn(&SampleEval) -> bool| {
        if n == 0 {
            0.0
        } else {
            evals.iter().filter(|e| f(e)).count() as f64 / n as f64
        }
    };
    let accuracy = rate(&|e| e.correct);
    let match_rate = rate(&|e| e.matched);
    let (zero, full) = if opts.baselines {
        (
            Some(rate(&|e| e.zero_shot_correct == Some(true))),
            Some(rate(&|e| e.full_context_correct == Some(true))),
        )
    } else {
        (None, None)
    };
    let n_examples = samples.first().map_or(6, |s| s.examples.len());
    let n_relevant = samples.first().map_or(2, |s| s.relevant_indices().len());
    let c = opts.retrieval.top_c * opts.retrieval.num_ret_tokens;
    Ok(EvalReport {
        n,
        accuracy,
        zero_shot_accuracy: zero,
        full_context_accuracy: full,
        match_rate,
        random_match_baseline: random_match_probability(n_examples, n_relevant, c.min(n_examples)),
        ordering_holds: zero.zip(full).map(|(z, f)| z <= accuracy && accuracy <= f),
        samples: if opts.keep_samples { evals } else { Vec::new() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_for_two_of_six() {
        assert!((random_match_probability(6, 2, 2) - 1.0 / 15.0).abs() < 1e-15);
        assert_eq!(random_match_probability(6, 2, 1), 0.0);
        assert_eq!(random_match_probability(6, 2, 6), 1.0);
    }
}
