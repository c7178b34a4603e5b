//! Parallel packing decision procedure.
//!
//! Given a normalized instance whose goal has been scaled to 1, the loop
//! grows `x` multiplicatively on the coordinates whose constraint matrices
//! are cheap under the current weight matrix `W = exp(Ψ)`, `Ψ = Σ x_i A_i`.
//! It ends either with `1ᵀx > K` and `Ψ ⪯ (1+10ε)K I` (so `x / ((1+10ε)K)`
//! is a near-optimal packing point) or with an empty update set, in which
//! case `P = W / tr W` is a covering witness.
//!
//! Constraints are indexed by `m` and the matrix dimension by `n`
//! throughout; `K = (1 + ln n) / ε` uses the dimension.

use serde::{Deserialize, Serialize};

use crate::error::{PsdpError, Result};
use crate::expdot::{ExpEngine, ExpEngineConfig, ExpMode};
use crate::linalg::{eigendecompose, mat_dot, SymMatrix, TOL_REL};
use crate::normalize::NormalizedInstance;
use crate::par;

/// Potential budget `K = (1 + ln n) / ε`.
pub fn k_budget(eps: f64, n: usize) -> f64 {
    (1.0 + (n as f64).ln()) / eps
}

/// `20 * ⌈ln³(max(n, 3)) / ε⁴⌉`.
pub fn default_max_iters(eps: f64, n: usize) -> usize {
    let l = (n.max(3) as f64).ln();
    ((l.powi(3) / eps.powi(4)).ceil() as usize).saturating_mul(20)
}

#[derive(Clone, Debug)]
pub struct SolverParams {
    pub eps: f64,
    pub exp_cfg: ExpEngineConfig,
    pub max_iters: usize,
    pub trace_enabled: bool,
}

impl SolverParams {
    /// Exact exponential, default iteration cap, no trace.
    pub fn new(eps: f64, n: usize) -> Result<Self> {
        let p = SolverParams {
            eps,
            exp_cfg: ExpEngineConfig::exact(),
            max_iters: default_max_iters(eps, n),
            trace_enabled: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 0.1) {
            return Err(PsdpError::InvalidParameter(format!(
                "decision eps must lie in (0, 1/10], got {}",
                self.eps
            )));
        }
        if self.max_iters == 0 {
            return Err(PsdpError::InvalidParameter("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// One iteration of the decision loop as seen by a trace consumer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub p: i64,
    #[serde(rename = "trace_W")]
    pub trace_w: f64,
    #[serde(rename = "B")]
    pub b_set: Vec<usize>,
    pub alpha: f64,
    pub delta_l1: f64,
    /// `1ᵀx` after this iteration's update.
    pub x_l1: f64,
    /// `λ_max(Ψ)` after this iteration's update.
    pub lambda_max_psi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Feasible,
    Infeasible,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DecisionOutcome {
    /// `1ᵀx ∈ (K, K+ε]` with `Σ x_i A_i ⪯ (1+10ε)K I`.
    Feasible { x: Vec<f64>, objective: f64 },
    /// `P = W / tr W` with `P • A_i > (1+ε)^{p+1} / tr W` for every `i`.
    Infeasible { p: SymMatrix },
}

impl DecisionOutcome {
    pub fn kind(&self) -> OutcomeKind {
        match self {
            DecisionOutcome::Feasible { .. } => OutcomeKind::Feasible,
            DecisionOutcome::Infeasible { .. } => OutcomeKind::Infeasible,
        }
    }
}

/// Context handed to a sink when a run starts.
#[derive(Clone, Debug, PartialEq)]
pub struct RunInfo {
    /// Goal the instance was scaled by before the run (1 for a direct call).
    pub goal: f64,
    pub n: usize,
    pub m: usize,
    pub eps: f64,
    pub k: f64,
}

/// Consumer of the per-iteration stream. `gain` is `(1/ε) Σ δ_i A_i`, absent
/// on the terminal iteration of an infeasible run.
pub trait TraceSink {
    fn begin_run(&mut self, _info: &RunInfo) {}
    fn record(&mut self, rec: &IterationRecord, gain: Option<&SymMatrix>);
    fn end_run(&mut self, _kind: OutcomeKind) {}
    /// Whether `lambda_max_psi` must be filled in. The exact engine gets it
    /// for free; the Taylor engines need an extra decomposition.
    fn wants_spectrum(&self) -> bool {
        true
    }
}

/// Discards everything.
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _rec: &IterationRecord, _gain: Option<&SymMatrix>) {}
    fn wants_spectrum(&self) -> bool {
        false
    }
}

impl TraceSink for Vec<IterationRecord> {
    fn record(&mut self, rec: &IterationRecord, _gain: Option<&SymMatrix>) {
        self.push(rec.clone());
    }
}

impl<S: TraceSink + ?Sized> TraceSink for &mut S {
    fn begin_run(&mut self, info: &RunInfo) {
        (**self).begin_run(info)
    }
    fn record(&mut self, rec: &IterationRecord, gain: Option<&SymMatrix>) {
        (**self).record(rec, gain)
    }
    fn end_run(&mut self, kind: OutcomeKind) {
        (**self).end_run(kind)
    }
    fn wants_spectrum(&self) -> bool {
        (**self).wants_spectrum()
    }
}

/// Fans one record out to two sinks.
pub struct Tee<A, B>(pub A, pub B);

impl<A: TraceSink, B: TraceSink> TraceSink for Tee<A, B> {
    fn begin_run(&mut self, info: &RunInfo) {
        self.0.begin_run(info);
        self.1.begin_run(info);
    }
    fn record(&mut self, rec: &IterationRecord, gain: Option<&SymMatrix>) {
        self.0.record(rec, gain);
        self.1.record(rec, gain);
    }
    fn end_run(&mut self, kind: OutcomeKind) {
        self.0.end_run(kind);
        self.1.end_run(kind);
    }
    fn wants_spectrum(&self) -> bool {
        self.0.wants_spectrum() || self.1.wants_spectrum()
    }
}

#[derive(Clone, Debug)]
pub struct DecisionRun {
    pub outcome: DecisionOutcome,
    /// Iterations executed, including a terminal infeasible one.
    pub iterations: usize,
    /// Number of distinct phases visited.
    pub phases: usize,
    /// `λ_max(Σ x_i A_i)` of the final iterate.
    pub final_lambda_max: f64,
    pub trace: Option<Vec<IterationRecord>>,
}

/// `x⁰_i = 1 / (N tr A_i)` with `N = max(n, m)`, which keeps
/// `λ_max(Σ x⁰_i A_i) <= m / N <= 1`.
pub fn initial_solution(inst: &NormalizedInstance) -> Result<Vec<f64>> {
    let n = inst.dim().max(inst.num_constraints()) as f64;
    inst.constraints()
        .iter()
        .enumerate()
        .map(|(index, a)| {
            let tr = a.trace();
            if !(tr > 0.0) {
                return Err(PsdpError::ZeroConstraint { index });
            }
            Ok(1.0 / (n * tr))
        })
        .collect()
}

/// The integer `p` with `(1+ε)^{p-1} < tr W <= (1+ε)^p`, from `ln tr W`.
/// Values within 1e-9 (relative) of a power are snapped onto it so the
/// boundary lands in the lower phase.
pub fn phase_index_ln(ln_trace_w: f64, eps: f64) -> i64 {
    let q = ln_trace_w / (1.0 + eps).ln();
    let r = q.round();
    if (q - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r as i64
    } else {
        q.ceil() as i64
    }
}

pub fn phase_index(trace_w: f64, eps: f64) -> i64 {
    phase_index_ln(trace_w.ln(), eps)
}

/// `{ i : dots[i] <= (1+ε)^{p+1} }`.
pub fn select_b(dots: &[f64], p: i64, eps: f64) -> Vec<usize> {
    let threshold = (1.0 + eps).powi((p + 1) as i32);
    select_below(dots, threshold)
}

fn select_below(dots: &[f64], threshold: f64) -> Vec<usize> {
    dots.iter()
        .enumerate()
        .filter(|(_, &d)| d <= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// What one call to [`SolverState::step`] changed.
#[derive(Clone, Debug)]
pub struct StepInfo {
    pub alpha: f64,
    pub delta: Vec<f64>,
    pub delta_l1: f64,
    /// `Σ δ_i A_i`.
    pub increment: SymMatrix,
}

#[derive(Clone, Debug)]
pub struct SolverState {
    pub x: Vec<f64>,
    /// `Ψ = Σ x_i A_i`, maintained incrementally.
    pub psi: SymMatrix,
    pub t: usize,
    pub phase: i64,
}

impl SolverState {
    pub fn initial(inst: &NormalizedInstance) -> Result<Self> {
        let x = initial_solution(inst)?;
        let psi = inst.weighted_sum(&x)?;
        Ok(SolverState {
            x,
            psi,
            t: 0,
            phase: 0,
        })
    }

    pub fn objective(&self) -> f64 {
        self.x.iter().sum()
    }

    /// `δ = α x_B` with `α = min(ε / ‖x_B‖₁, ε / ((1+10ε)K))`, then
    /// `x += δ`, `Ψ += Σ δ_i A_i`.
    pub fn step(
        &mut self,
        inst: &NormalizedInstance,
        b_set: &[usize],
        eps: f64,
        k: f64,
    ) -> Result<StepInfo> {
        if b_set.is_empty() {
            return Err(PsdpError::InvalidParameter("step needs a nonempty B".into()));
        }
        let xb_l1: f64 = b_set.iter().map(|&i| self.x[i]).sum();
        let alpha = (eps / xb_l1).min(eps / ((1.0 + 10.0 * eps) * k));
        let mut delta = vec![0.0; self.x.len()];
        for &i in b_set {
            delta[i] = alpha * self.x[i];
        }
        let delta_l1 = delta.iter().sum();
        let increment = weighted_increment(inst, &delta, b_set);
        for &i in b_set {
            self.x[i] += delta[i];
        }
        self.psi.add_scaled(&increment, 1.0)?;
        Ok(StepInfo {
            alpha,
            delta,
            delta_l1,
            increment,
        })
    }
}

/// `Σ_{i∈B} δ_i A_i`, fanned out over constraints when large and reduced in
/// index order.
fn weighted_increment(inst: &NormalizedInstance, delta: &[f64], b_set: &[usize]) -> SymMatrix {
    let n = inst.dim();
    let cons = inst.constraints();
    let work: usize = b_set.iter().map(|&i| cons[i].nnz() * cons[i].nnz()).sum();
    if !par::is_parallel() || work < par::PARALLEL_WORK_THRESHOLD {
        let mut out = SymMatrix::zeros(n);
        for &i in b_set {
            cons[i].accumulate_into(&mut out, delta[i]);
        }
        return out;
    }
    let parts = par::map_indexed(b_set.len(), work, |j| {
        let i = b_set[j];
        let mut part = SymMatrix::zeros(n);
        cons[i].accumulate_into(&mut part, delta[i]);
        part
    });
    let mut out = SymMatrix::zeros(n);
    for part in &parts {
        out.add_scaled(part, 1.0).expect("same dimension");
    }
    out
}

/// `W / tr W` for `W = exp(Ψ)`, computed with a spectral shift.
fn density_matrix(psi: &SymMatrix) -> Result<SymMatrix> {
    let eig = eigendecompose(psi)?;
    let shift = eig.lambda_max();
    let w = eig.map(|l| (l - shift).exp());
    let tr = w.trace();
    Ok(w.scaled(1.0 / tr))
}

pub fn decide(inst: &NormalizedInstance, params: &SolverParams) -> Result<DecisionRun> {
    if params.trace_enabled {
        let mut trace = Vec::new();
        let mut run = decide_with_sink(inst, params, &mut trace)?;
        run.trace = Some(trace);
        Ok(run)
    } else {
        decide_with_sink(inst, params, NullSink)
    }
}

pub fn decide_with_sink(
    inst: &NormalizedInstance,
    params: &SolverParams,
    mut sink: impl TraceSink,
) -> Result<DecisionRun> {
    decide_goal_with_sink(inst, params, 1.0, &mut sink)
}

/// As [`decide_with_sink`], tagging the run with the goal it was scaled by.
pub(crate) fn decide_goal_with_sink(
    inst: &NormalizedInstance,
    params: &SolverParams,
    goal: f64,
    sink: &mut dyn TraceSink,
) -> Result<DecisionRun> {
    params.validate()?;
    let eps = params.eps;
    let n = inst.dim();
    let k = k_budget(eps, n);
    let spectral_bound = (1.0 + 10.0 * eps) * k;
    let mut cfg = params.exp_cfg.clone();
    cfg.kappa_bound = spectral_bound;
    let engine = ExpEngine::new(cfg, n)?;
    let exact = engine.config().mode == ExpMode::Exact;
    let want_spectrum = sink.wants_spectrum();

    sink.begin_run(&RunInfo {
        goal,
        n,
        m: inst.num_constraints(),
        eps,
        k,
    });

    let mut state = SolverState::initial(inst)?;
    // Records wait here until λ_max of the updated Ψ is known.
    let mut pending: Option<(IterationRecord, SymMatrix)> = None;
    let mut phases = 0usize;
    let mut last_phase: Option<i64> = None;

    let flush = |pending: &mut Option<(IterationRecord, SymMatrix)>,
                 sink: &mut dyn TraceSink,
                 lmax: f64| {
        if let Some((mut rec, gain)) = pending.take() {
            rec.lambda_max_psi = lmax;
            sink.record(&rec, Some(&gain));
        }
    };

    while state.objective() <= k {
        if state.t >= params.max_iters {
            return Err(PsdpError::MaxItersExceeded {
                limit: params.max_iters,
            });
        }
        state.t += 1;
        let dots = engine.evaluate(&state.psi, inst.constraints(), true)?;
        let prev_lmax = match dots.lambda_max {
            Some(l) => l,
            None if want_spectrum => eigendecompose(&state.psi)?.lambda_max(),
            None => f64::NAN,
        };
        flush(&mut pending, sink, prev_lmax);

        let ln_tr = dots.ln_trace().expect("trace requested");
        let p = phase_index_ln(ln_tr, eps);
        state.phase = p;
        if last_phase != Some(p) {
            phases += 1;
            last_phase = Some(p);
        }
        let threshold = ((p + 1) as f64 * (1.0 + eps).ln() - dots.log_scale).exp();
        let b_set = select_below(&dots.dots, threshold);

        if b_set.is_empty() {
            let rec = IterationRecord {
                t: state.t,
                p,
                trace_w: ln_tr.exp(),
                b_set,
                alpha: 0.0,
                delta_l1: 0.0,
                x_l1: state.objective(),
                lambda_max_psi: prev_lmax,
            };
            sink.record(&rec, None);
            sink.end_run(OutcomeKind::Infeasible);
            let final_lambda_max = if prev_lmax.is_nan() {
                eigendecompose(&state.psi)?.lambda_max()
            } else {
                prev_lmax
            };
            return Ok(DecisionRun {
                outcome: DecisionOutcome::Infeasible {
                    p: density_matrix(&state.psi)?,
                },
                iterations: state.t,
                phases,
                final_lambda_max,
                trace: None,
            });
        }

        let info = state.step(inst, &b_set, eps, k)?;
        let rec = IterationRecord {
            t: state.t,
            p,
            trace_w: ln_tr.exp(),
            b_set,
            alpha: info.alpha,
            delta_l1: info.delta_l1,
            x_l1: state.objective(),
            lambda_max_psi: f64::NAN,
        };
        pending = Some((rec, info.increment.scaled(1.0 / eps)));
        if !exact && want_spectrum {
            let l = eigendecompose(&state.psi)?.lambda_max();
            flush(&mut pending, sink, l);
        }
    }

    let final_lambda_max = eigendecompose(&state.psi)?.lambda_max();
    flush(&mut pending, sink, final_lambda_max);
    sink.end_run(OutcomeKind::Feasible);

    #[cfg(debug_assertions)]
    {
        let direct = inst.weighted_sum(&state.x)?;
        let drift = direct.sub(&state.psi)?.max_abs();
        debug_assert!(
            drift <= 1e-8 * direct.max_abs().max(1.0),
            "incremental Ψ drifted by {drift}"
        );
    }

    let objective = state.objective();
    Ok(DecisionRun {
        outcome: DecisionOutcome::Feasible {
            x: state.x,
            objective,
        },
        iterations: state.t,
        phases,
        final_lambda_max,
        trace: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackingCheck {
    pub feasible: bool,
    pub objective: f64,
    /// `max(0, λ_max(Σ x_i A_i) - 1)`.
    pub violation: f64,
}

/// Checks `x >= 0` and `Σ x_i A_i ⪯ I` up to `tol`.
pub fn verify_packing(inst: &NormalizedInstance, x: &[f64], tol: f64) -> Result<PackingCheck> {
    let objective = x.iter().sum();
    if x.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Ok(PackingCheck {
            feasible: false,
            objective,
            violation: f64::INFINITY,
        });
    }
    let psi = inst.weighted_sum(x)?;
    let violation = (eigendecompose(&psi)?.lambda_max() - 1.0).max(0.0);
    Ok(PackingCheck {
        feasible: violation <= tol,
        objective,
        violation,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoveringCheck {
    pub feasible: bool,
    pub objective: f64,
    /// `min_i A_i • Y - 1`.
    pub min_slack: f64,
}

/// Checks `Y ⪰ 0` (relative `tol`) and `A_i • Y >= 1 - tol` for all `i`.
pub fn verify_covering(inst: &NormalizedInstance, y: &SymMatrix, tol: f64) -> Result<CoveringCheck> {
    if y.dim() != inst.dim() {
        return Err(PsdpError::DimensionMismatch {
            expected: inst.dim(),
            found: y.dim(),
        });
    }
    let min_dot = inst
        .constraints()
        .iter()
        .map(|a| a.dot_dense(y))
        .fold(f64::INFINITY, f64::min);
    let eig = eigendecompose(y)?;
    let scale = eig.lambda_max().abs().max(1.0);
    let psd = eig.lambda_min() >= -tol * scale;
    let min_slack = min_dot - 1.0;
    Ok(CoveringCheck {
        feasible: psd && min_slack >= -tol,
        objective: y.trace(),
        min_slack,
    })
}

/// Rescales a density matrix into a covering point: `Y = P / min_i A_i • P`,
/// whose trace upper-bounds the packing optimum.
pub fn covering_from_density(inst: &NormalizedInstance, p: &SymMatrix) -> Result<SymMatrix> {
    let min_dot = inst
        .constraints()
        .iter()
        .map(|a| a.dot_dense(p))
        .fold(f64::INFINITY, f64::min);
    if !(min_dot > 0.0) {
        return Err(PsdpError::InvalidParameter(
            "density matrix is orthogonal to some constraint".into(),
        ));
    }
    Ok(p.scaled(1.0 / min_dot))
}

/// `tr(P)` and `min_i P • A_i` for an infeasibility witness.
pub fn certificate_stats(inst: &NormalizedInstance, p: &SymMatrix) -> Result<(f64, f64)> {
    let id = SymMatrix::identity(inst.dim());
    let tr = mat_dot(p, &id)?;
    let min_dot = inst
        .constraints()
        .iter()
        .map(|a| a.dot_dense(p))
        .fold(f64::INFINITY, f64::min);
    Ok((tr, min_dot))
}

/// Smallest `λ` with `P ⪰ -λ`, relative; `true` when `P` is PSD at `TOL_REL`.
pub fn is_psd(p: &SymMatrix) -> Result<bool> {
    let eig = eigendecompose(p)?;
    Ok(eig.lambda_min() >= -TOL_REL * eig.lambda_max().abs().max(1.0))
}
