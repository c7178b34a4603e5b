//! Single-coordinate baseline for the packing decision problem.
//!
//! Starts from `x = 0` and, while `1ᵀx <= K`, picks the smallest index `i`
//! with `P • A_i <= 1 + ε` for `P = exp(Ψ) / tr exp(Ψ)` and raises `x_i` by
//! `α / tr A_i`, where `α = ε min(1, tr A_i)` makes the larger of
//! `tr(δ_i A_i)` and `δ_i` equal to `ε`. There is no phase bookkeeping, so
//! trace records carry `p = 0`.

use crate::decision::{
    k_budget, DecisionOutcome, DecisionRun, IterationRecord, NullSink, OutcomeKind, RunInfo,
    TraceSink,
};
use crate::error::{PsdpError, Result};
use crate::linalg::{eigendecompose, SymMatrix};
use crate::normalize::NormalizedInstance;

/// `⌈20 (m / ε²)(1 + ln n)⌉`.
pub fn default_sequential_max_iters(eps: f64, n: usize, m: usize) -> usize {
    (20.0 * (m as f64 / (eps * eps)) * (1.0 + (n as f64).ln())).ceil() as usize
}

pub fn decide_sequential(
    inst: &NormalizedInstance,
    eps: f64,
    max_iters: Option<usize>,
) -> Result<DecisionRun> {
    decide_sequential_with_sink(inst, eps, max_iters, NullSink)
}

pub fn decide_sequential_with_sink(
    inst: &NormalizedInstance,
    eps: f64,
    max_iters: Option<usize>,
    mut sink: impl TraceSink,
) -> Result<DecisionRun> {
    if !(eps > 0.0 && eps <= 0.1) {
        return Err(PsdpError::InvalidParameter(format!(
            "eps must lie in (0, 1/10], got {eps}"
        )));
    }
    let n = inst.dim();
    let m = inst.num_constraints();
    let limit = max_iters.unwrap_or_else(|| default_sequential_max_iters(eps, n, m));
    let k = k_budget(eps, n);
    let cons = inst.constraints();
    let traces = inst.traces();
    if let Some(index) = traces.iter().position(|t| !(*t > 0.0)) {
        return Err(PsdpError::ZeroConstraint { index });
    }
    sink.begin_run(&RunInfo {
        goal: 1.0,
        n,
        m,
        eps,
        k,
    });

    let mut x = vec![0.0; m];
    let mut psi = SymMatrix::zeros(n);
    let mut objective = 0.0;
    let mut t = 0;
    let mut lmax = 0.0;
    while objective <= k {
        if t >= limit {
            return Err(PsdpError::MaxItersExceeded { limit });
        }
        t += 1;
        let eig = eigendecompose(&psi)?;
        let shift = eig.lambda_max();
        let w = eig.map(|l| (l - shift).exp());
        let tr = w.trace();
        let p = w.scaled(1.0 / tr);
        let chosen = cons.iter().position(|a| a.dot_dense(&p) <= 1.0 + eps);
        let trace_w = (tr.ln() + shift).exp();
        let Some(i) = chosen else {
            let rec = IterationRecord {
                t,
                p: 0,
                trace_w,
                b_set: Vec::new(),
                alpha: 0.0,
                delta_l1: 0.0,
                x_l1: objective,
                lambda_max_psi: shift,
            };
            sink.record(&rec, None);
            sink.end_run(OutcomeKind::Infeasible);
            return Ok(DecisionRun {
                outcome: DecisionOutcome::Infeasible { p },
                iterations: t,
                phases: 1,
                final_lambda_max: shift,
                trace: None,
            });
        };
        let alpha = eps * traces[i].min(1.0);
        let delta = alpha / traces[i];
        x[i] += delta;
        objective += delta;
        let mut gain = SymMatrix::zeros(n);
        cons[i].accumulate_into(&mut gain, delta);
        psi.add_scaled(&gain, 1.0)?;
        let b_set: Vec<usize> = if sink.wants_spectrum() {
            cons.iter()
                .enumerate()
                .filter(|(_, a)| a.dot_dense(&p) <= 1.0 + eps)
                .map(|(j, _)| j)
                .collect()
        } else {
            vec![i]
        };
        lmax = if sink.wants_spectrum() {
            eigendecompose(&psi)?.lambda_max()
        } else {
            f64::NAN
        };
        let rec = IterationRecord {
            t,
            p: 0,
            trace_w,
            b_set,
            alpha,
            delta_l1: delta,
            x_l1: objective,
            lambda_max_psi: lmax,
        };
        sink.record(&rec, Some(&gain.scaled(1.0 / eps)));
    }
    if lmax.is_nan() || t == 0 {
        lmax = eigendecompose(&psi)?.lambda_max();
    }
    sink.end_run(OutcomeKind::Feasible);
    Ok(DecisionRun {
        outcome: DecisionOutcome::Feasible { x, objective },
        iterations: t,
        phases: 1,
        final_lambda_max: lmax,
        trace: None,
    })
}
