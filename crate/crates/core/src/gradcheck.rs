//! Finite-difference verification of reverse-mode gradients.
//!
//! The harness rebuilds the loss graph per perturbed coordinate, so the
//! numeric side never shares state with the analytic side. Runs at `f64`;
//! eps defaults to 1e-5 and the pass threshold to 1e-4 max relative error.

use crate::graph::{Graph, Var};
use crate::par::{self, Threading};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Builds a scalar loss from pre-registered parameter leaves.
///
/// Called once per perturbed coordinate, so it must be a pure function of
/// the parameter values.
pub trait LossBuilder: Sync {
    fn build(&self, g: &mut Graph<f64>, params: &[Var]) -> Var;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var + Sync,
{
    fn build(&self, g: &mut Graph<f64>, params: &[Var]) -> Var {
        self(g, params)
    }
}

/// Worst coordinate of one checked parameter.
#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of a full check: failures are reported, not thrown.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamReport>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-6 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compare reverse-mode gradients of `builder` against central finite
/// differences over every coordinate of every named parameter.
pub fn grad_check(
    builder: &dyn LossBuilder,
    params: &[(String, Tensor<f64>)],
    eps: f64,
    tolerance: f64,
) -> GradCheckReport {
    grad_check_with(Threading::default(), builder, params, eps, tolerance)
}

/// [`grad_check`] with an explicit threading policy. Coordinates are
/// independent work items; results are identical under both policies.
pub fn grad_check_with(
    threading: Threading,
    builder: &dyn LossBuilder,
    params: &[(String, Tensor<f64>)],
    eps: f64,
    tolerance: f64,
) -> GradCheckReport {
    let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();

    // Analytic pass.
    let mut graph = Graph::new();
    let vars: Vec<Var> = tensors.iter().map(|t| graph.param(t.clone())).collect();
    let loss = builder.build(&mut graph, &vars);
    let grads = graph
        .backward(loss)
        .expect("grad_check: loss must be a finite scalar");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(tensors.iter())
        .map(|(v, t)| grads.for_param(*v, t.rows(), t.cols()))
        .collect();

    // Numeric pass, one work item per coordinate.
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, (_, t))| (0..t.len()).map(move |ci| (pi, ci)))
        .collect();

    let evaluate = |pi: usize, ci: usize, delta: f64| -> f64 {
        let mut perturbed = tensors.clone();
        perturbed[pi].data_mut()[ci] += delta;
        let mut g = Graph::new();
        let vs: Vec<Var> = perturbed.into_iter().map(|t| g.param(t)).collect();
        let l = builder.build(&mut g, &vs);
        g.value(l).item()
    };

    let errors = par::map(threading, &coords, |&(pi, ci)| {
        let numeric = (evaluate(pi, ci, eps) - evaluate(pi, ci, -eps)) / (2.0 * eps);
        let a = analytic[pi].data()[ci];
        (rel_err(a, numeric), a, numeric)
    });

    let mut per_param: Vec<ParamReport> = params
        .iter()
        .map(|(name, _)| ParamReport {
            name: name.clone(),
            max_rel_err: -1.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        })
        .collect();
    for (&(pi, ci), &(err, a, n)) in coords.iter().zip(errors.iter()) {
        if err > per_param[pi].max_rel_err {
            per_param[pi].max_rel_err = err;
            per_param[pi].worst_coord = ci;
            per_param[pi].analytic = a;
            per_param[pi].numeric = n;
        }
    }
    for p in &mut per_param {
        p.max_rel_err = p.max_rel_err.max(0.0);
    }
    let max_rel_err = per_param
        .iter()
        .map(|p| p.max_rel_err)
        .fold(0.0f64, f64::max);

    GradCheckReport {
        per_param,
        max_rel_err,
        tolerance,
    }
}
