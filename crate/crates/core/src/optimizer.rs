//! Objective search around the decision procedure.
//!
//! The goal `g` is bisected on a log scale. Each probe scales the normalized
//! instance by `g` and runs [`decide`](crate::decision::decide) at accuracy
//! `ε/8`. A feasible probe yields a packing point, which is rescaled by the
//! measured spectrum so it satisfies `Σ x_i A_i ⪯ I`; an infeasible probe
//! yields a density matrix that caps the optimum from above.

use serde::{Deserialize, Serialize};

use crate::decision::{
    decide_goal_with_sink, default_max_iters, verify_packing, DecisionOutcome, NullSink,
    OutcomeKind, SolverParams, TraceSink,
};
use crate::error::{PsdpError, Result};
use crate::expdot::ExpEngineConfig;
use crate::linalg::{lambda_max, materialize};
use crate::normalize::{scale_instance, NormalizedInstance};
use crate::par;

/// Feasibility tolerance applied to every packing point the search returns.
pub const PACKING_TOL: f64 = 1e-9;

/// Ratio between the caller's accuracy and the one each probe runs at.
pub const INNER_EPS_DIVISOR: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub goal: f64,
    pub kind: OutcomeKind,
    pub iterations: usize,
    pub phases: usize,
    /// Objective of the rescaled packing point (feasible probes).
    pub achieved: Option<f64>,
    /// Upper bound on the optimum implied by the certificate (infeasible probes).
    pub certified_upper: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub best_x: Vec<f64>,
    pub best_objective: f64,
    /// Smallest certified upper bound on the optimum.
    pub upper_bound: f64,
    pub bracket_history: Vec<ProbeRecord>,
    pub probes: usize,
    pub total_iterations: usize,
    /// Goal bracket at termination.
    pub final_bracket: (f64, f64),
}

/// `(max_i 1/λ_max(A_i), Σ_i 1/λ_max(A_i))`.
pub fn initial_bracket(inst: &NormalizedInstance) -> Result<(f64, f64)> {
    let cons = inst.constraints();
    let n = inst.dim();
    let lmax = par::try_map_indexed(cons.len(), cons.len() * n * n * n, |i| {
        let l = lambda_max(&materialize(&cons[i]))?;
        if !(l > 0.0) {
            return Err(PsdpError::ZeroConstraint { index: i });
        }
        Ok(l)
    })?;
    let lo = lmax.iter().map(|l| 1.0 / l).fold(0.0, f64::max);
    let hi: f64 = lmax.iter().map(|l| 1.0 / l).sum();
    Ok((lo, hi))
}

pub fn approx_psdp(
    inst: &NormalizedInstance,
    eps: f64,
    exp_cfg: &ExpEngineConfig,
) -> Result<SearchResult> {
    approx_psdp_with_sink(inst, eps, exp_cfg, &mut NullSink)
}

/// As [`approx_psdp`], streaming every probe's iterations into `sink`.
pub fn approx_psdp_with_sink(
    inst: &NormalizedInstance,
    eps: f64,
    exp_cfg: &ExpEngineConfig,
    sink: &mut dyn TraceSink,
) -> Result<SearchResult> {
    if !(eps > 0.0 && eps <= 0.1) {
        return Err(PsdpError::InvalidParameter(format!(
            "eps must lie in (0, 1/10], got {eps}"
        )));
    }
    let inner_eps = eps / INNER_EPS_DIVISOR;
    let params = SolverParams {
        eps: inner_eps,
        exp_cfg: exp_cfg.clone(),
        max_iters: default_max_iters(inner_eps, inst.dim()),
        trace_enabled: false,
    };
    params.validate()?;

    let (lo0, hi0) = initial_bracket(inst)?;
    if lo0 > hi0 {
        return Err(PsdpError::EmptyBracket { lo: lo0, hi: hi0 });
    }

    // The single best coordinate is already a feasible point.
    let lmax: Vec<f64> = inst
        .constraints()
        .iter()
        .map(|a| lambda_max(&materialize(a)))
        .collect::<Result<_>>()?;
    let start = (0..lmax.len())
        .min_by(|&a, &b| lmax[a].total_cmp(&lmax[b]))
        .expect("m >= 1");
    let mut best_x = vec![0.0; inst.num_constraints()];
    best_x[start] = 1.0 / lmax[start];
    let mut best_objective = best_x[start];

    let mut lo = lo0;
    let mut hi = hi0;
    let mut upper_bound = hi0;
    let mut history = Vec::new();
    let mut total_iterations = 0;

    while hi / lo > 1.0 + eps / 2.0 {
        let g = (lo * hi).sqrt();
        let scaled = scale_instance(inst, g)?;
        let run = decide_goal_with_sink(&scaled, &params, g, sink)?;
        total_iterations += run.iterations;
        let mut rec = ProbeRecord {
            goal: g,
            kind: run.outcome.kind(),
            iterations: run.iterations,
            phases: run.phases,
            achieved: None,
            certified_upper: None,
        };
        match run.outcome {
            DecisionOutcome::Feasible { x, .. } => {
                let x = scale_back(inst, &x, g, run.final_lambda_max)?;
                let objective: f64 = x.iter().sum();
                rec.achieved = Some(objective);
                if objective > best_objective {
                    best_objective = objective;
                    best_x = x;
                }
                lo = g;
            }
            DecisionOutcome::Infeasible { p } => {
                let min_dot = scaled
                    .constraints()
                    .iter()
                    .map(|a| a.dot_dense(&p))
                    .fold(f64::INFINITY, f64::min);
                let bound = g / min_dot;
                rec.certified_upper = Some(bound);
                upper_bound = upper_bound.min(bound);
                hi = g;
            }
        }
        history.push(rec);
    }

    Ok(SearchResult {
        best_x,
        best_objective,
        upper_bound,
        probes: history.len(),
        bracket_history: history,
        total_iterations,
        final_bracket: (lo, hi),
    })
}

/// Maps a decision point on the `g`-scaled instance back to a packing point
/// of the original one: `x = g x_dec / λ_max(Σ x_dec,i g A_i)`, then shrinks
/// once more if rounding left a residual violation.
fn scale_back(inst: &NormalizedInstance, x_dec: &[f64], g: f64, lmax_scaled: f64) -> Result<Vec<f64>> {
    if !(lmax_scaled > 0.0) {
        return Err(PsdpError::NonFinite {
            context: "spectrum of the decision point",
        });
    }
    let mut x: Vec<f64> = x_dec.iter().map(|v| g * v / lmax_scaled).collect();
    let check = verify_packing(inst, &x, PACKING_TOL)?;
    if check.violation > 0.0 {
        let shrink = 1.0 / (1.0 + check.violation);
        x.iter_mut().for_each(|v| *v *= shrink);
    }
    Ok(x)
}
