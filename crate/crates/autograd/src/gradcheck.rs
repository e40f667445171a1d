//! Central-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("epsilon {0} outside [1e-7, 1e-3]")]
    Epsilon(f64),
    #[error("non-finite loss while perturbing parameter {param} at index {index}")]
    NonFinite { param: usize, index: usize },
}

#[derive(Debug, Clone)]
pub struct FdOptions {
    pub epsilon: f64,
    /// Upper bound on checked coordinates; all are checked when fewer exist.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            max_coords: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coordinate {
    pub param: usize,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    pub loss: f64,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss from leaves holding `params`. The reported
/// error is `|analytic - numeric| / (|numeric| + 1e-12)`, maximized over
/// the sampled coordinates.
pub fn finite_diff_check<F>(
    f: F,
    params: &[Tensor],
    opts: &FdOptions,
) -> Result<FdReport, GradCheckError>
where
    F: Fn(&Graph, &[Var]) -> crate::Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.epsilon) {
        return Err(GradCheckError::Epsilon(opts.epsilon));
    }
    let graph = Graph::new();
    let leaves: Vec<Var> = params
        .iter()
        .map(|p| graph.leaf(&p.clone().with_requires_grad(true)))
        .collect();
    let loss_var = f(&graph, &leaves)?;
    let loss = graph.value(loss_var).data()[0];
    let grads = graph.backward(loss_var)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.numel()))
        .collect();

    let coords = sample_coordinates(params, opts);
    let eval = |values: &[Tensor]| -> crate::Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t)).collect();
        let out = f(&g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut working: Vec<Tensor> = params.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: coords.len(),
        loss,
    };
    for c in coords {
        let orig = working[c.param].data()[c.index];
        working[c.param].data_mut()[c.index] = orig + opts.epsilon;
        let plus = eval(&working)?;
        working[c.param].data_mut()[c.index] = orig - opts.epsilon;
        let minus = eval(&working)?;
        working[c.param].data_mut()[c.index] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GradCheckError::NonFinite {
                param: c.param,
                index: c.index,
            });
        }
        let numeric = (plus - minus) / (2.0 * opts.epsilon);
        let rel = (analytic[c.param][c.index] - numeric).abs() / (numeric.abs() + 1e-12);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some(c);
        }
    }
    Ok(report)
}

fn sample_coordinates(params: &[Tensor], opts: &FdOptions) -> Vec<Coordinate> {
    let all: Vec<Coordinate> = params
        .iter()
        .enumerate()
        .flat_map(|(param, t)| (0..t.numel()).map(move |index| Coordinate { param, index }))
        .collect();
    if all.len() <= opts.max_coords {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut picked = rand::seq::index::sample(&mut rng, all.len(), opts.max_coords).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}
