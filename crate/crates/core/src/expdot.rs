//! Evaluation of `exp(Φ) • A_i` for a batch of factored constraints.
//!
//! Three engines share one entry point:
//!
//! * `Exact` diagonalizes `Φ` once and forms `exp(Φ)` densely.
//! * `Taylor` never forms the exponential. It uses
//!   `exp(Φ) • QQᵀ = ‖exp(Φ/2) Q‖_F²` and replaces `exp(Φ/2)` by its
//!   truncated Taylor series applied to the columns of `Q` through repeated
//!   sparse matrix-vector products.
//! * `TaylorJl` additionally compresses each `exp(Φ/2) q` with a seeded
//!   Gaussian sketch `Π` before taking the squared norm.
//!
//! With `‖Φ‖₂ ≤ κ` and degree `k = ⌈max(e²κ/2, ln(2/ε))⌉` the Taylor values
//! lie in `[(1-ε)², 1]` times the exact ones; the sketch adds a further
//! `(1 ± ε)` factor with high probability.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PsdpError, Result};
use crate::linalg::{eigendecompose, FactoredPSD, SymMatrix, TOL_REL};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpMode {
    Exact,
    Taylor,
    TaylorJl,
}

impl fmt::Display for ExpMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpMode::Exact => "exact",
            ExpMode::Taylor => "taylor",
            ExpMode::TaylorJl => "taylor-jl",
        })
    }
}

impl FromStr for ExpMode {
    type Err = PsdpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(ExpMode::Exact),
            "taylor" => Ok(ExpMode::Taylor),
            "taylor-jl" | "taylor_jl" => Ok(ExpMode::TaylorJl),
            other => Err(PsdpError::InvalidParameter(format!(
                "unknown exponential mode '{other}'"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpEngineConfig {
    pub mode: ExpMode,
    /// Accuracy of the Taylor truncation and of the sketch, in `(0, 1/2]`.
    pub eps: f64,
    /// Upper bound on `‖Φ‖₂`.
    pub kappa_bound: f64,
    /// Sketch rows; `None` picks `⌈8 ε⁻² ln max(n, 2)⌉`.
    pub jl_rows: Option<usize>,
    pub seed: u64,
}

impl ExpEngineConfig {
    pub fn exact() -> Self {
        ExpEngineConfig {
            mode: ExpMode::Exact,
            eps: 0.1,
            kappa_bound: f64::INFINITY,
            jl_rows: None,
            seed: 0,
        }
    }

    pub fn with_mode(mode: ExpMode, eps: f64, seed: u64) -> Self {
        ExpEngineConfig {
            mode,
            eps,
            kappa_bound: f64::INFINITY,
            jl_rows: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 0.5) {
            return Err(PsdpError::InvalidParameter(format!(
                "exp engine eps must lie in (0, 1/2], got {}",
                self.eps
            )));
        }
        if self.kappa_bound.is_nan() || self.kappa_bound < 0.0 {
            return Err(PsdpError::InvalidParameter(format!(
                "kappa bound must be nonnegative, got {}",
                self.kappa_bound
            )));
        }
        if self.mode != ExpMode::Exact && !self.kappa_bound.is_finite() {
            return Err(PsdpError::InvalidParameter(
                "taylor modes need a finite kappa bound".into(),
            ));
        }
        if self.jl_rows == Some(0) {
            return Err(PsdpError::InvalidParameter("jl_rows must be >= 1".into()));
        }
        Ok(())
    }

    pub fn resolved_jl_rows(&self, n: usize) -> usize {
        self.jl_rows.unwrap_or_else(|| auto_jl_rows(self.eps, n))
    }
}

/// `⌈8 ε⁻² ln max(n, 2)⌉`.
pub fn auto_jl_rows(eps: f64, n: usize) -> usize {
    (8.0 / (eps * eps) * (n.max(2) as f64).ln()).ceil() as usize
}

/// Number of Taylor terms needed for a `(1 - ε)` lower sandwich on
/// `exp(B)` when `0 ⪯ B ⪯ κ I`: `⌈max(e² κ, ln(2/ε))⌉`, at least 1.
pub fn taylor_degree(kappa: f64, eps: f64) -> Result<usize> {
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(PsdpError::InvalidParameter(format!(
            "kappa must be finite and nonnegative, got {kappa}"
        )));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(PsdpError::InvalidParameter(format!(
            "eps must lie in (0, 1), got {eps}"
        )));
    }
    let e2 = std::f64::consts::E * std::f64::consts::E;
    let k = (e2 * kappa).max((2.0 / eps).ln()).ceil();
    Ok((k as usize).max(1))
}

/// Chain starts evaluated together in one block.
const BLOCK_COLS: usize = 64;

/// Owning constraint (or the trace slot) and the sparse start vector.
type ChainStart<'a> = (usize, &'a [usize], &'a [f64]);

/// Compressed sparse rows of a symmetric matrix, used for the matrix-vector
/// products inside the Taylor chain.
#[derive(Clone, Debug)]
struct SymCsr {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SymCsr {
    fn from_sym(m: &SymMatrix, scale: f64) -> Self {
        let n = m.dim();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for r in 0..n {
            for c in 0..n {
                let v = m.get(r, c);
                if v != 0.0 {
                    cols.push(c);
                    vals.push(v * scale);
                }
            }
            row_ptr.push(cols.len());
        }
        SymCsr {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    fn nnz(&self) -> usize {
        self.vals.len()
    }

    #[inline]
    fn mul_vec(&self, v: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let range = self.row_ptr[r]..self.row_ptr[r + 1];
            *o = self.cols[range.clone()]
                .iter()
                .zip(&self.vals[range])
                .map(|(&c, &a)| a * v[c])
                .sum();
        }
    }

    fn row_abs_sum_max(&self) -> f64 {
        (0..self.n)
            .map(|r| self.vals[self.row_ptr[r]..self.row_ptr[r + 1]].iter().map(|v| v.abs()).sum())
            .fold(0.0, f64::max)
    }
}

/// The truncated series `Σ_{i<k} (Φ/2)ⁱ / i!`.
#[derive(Clone, Debug)]
pub struct TaylorOperator {
    phi_half: SymMatrix,
    degree: usize,
    csr: SymCsr,
}

impl TaylorOperator {
    /// Operator approximating `exp(Φ/2)` for `‖Φ‖₂ ≤ kappa`.
    pub fn new(phi: &SymMatrix, kappa: f64, eps: f64) -> Result<Self> {
        let degree = taylor_degree(kappa / 2.0, eps)?;
        Ok(Self::with_degree(phi, degree))
    }

    pub fn with_degree(phi: &SymMatrix, degree: usize) -> Self {
        assert!(degree >= 1, "Taylor degree must be positive");
        TaylorOperator {
            phi_half: phi.scaled(0.5),
            degree,
            csr: SymCsr::from_sym(phi, 0.5),
        }
    }

    pub fn phi_half(&self) -> &SymMatrix {
        &self.phi_half
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.phi_half.dim()
    }

    /// Flops of one application, for scheduling decisions.
    fn cost(&self) -> usize {
        self.degree * (self.csr.nnz() + self.dim())
    }

    /// Forward accumulation `t_{i+1} = (Φ/2) t_i / (i+1)`, summed as it goes.
    fn apply_into(&self, v: &[f64], acc: &mut [f64], term: &mut [f64], scratch: &mut [f64]) {
        acc.copy_from_slice(v);
        term.copy_from_slice(v);
        for i in 1..self.degree {
            self.csr.mul_vec(term, scratch);
            let inv = 1.0 / i as f64;
            for ((t, s), a) in term.iter_mut().zip(scratch.iter()).zip(acc.iter_mut()) {
                *t = s * inv;
                *a += *t;
            }
        }
    }

    /// Applies the operator to the `b` columns of a row-major `n x b` block.
    fn apply_block(&self, block: &[f64], b: usize) -> Vec<f64> {
        let n = self.dim();
        let mut acc = block.to_vec();
        let mut term = block.to_vec();
        let mut next = vec![0.0; n * b];
        for i in 1..self.degree {
            let inv = 1.0 / i as f64;
            for r in 0..n {
                let out = &mut next[r * b..(r + 1) * b];
                out.iter_mut().for_each(|x| *x = 0.0);
                let range = self.csr.row_ptr[r]..self.csr.row_ptr[r + 1];
                for (&c, &a) in self.csr.cols[range.clone()].iter().zip(&self.csr.vals[range]) {
                    let a = a * inv;
                    for (o, t) in out.iter_mut().zip(&term[c * b..(c + 1) * b]) {
                        *o += a * t;
                    }
                }
            }
            std::mem::swap(&mut term, &mut next);
            for (a, t) in acc.iter_mut().zip(&term) {
                *a += *t;
            }
        }
        acc
    }
}

/// `Σ_{0≤i<k} (1/i!)(Φ/2)ⁱ v`, never forming matrix powers.
pub fn apply_truncated_exp(op: &TaylorOperator, v: &[f64]) -> Result<Vec<f64>> {
    let n = op.dim();
    if v.len() != n {
        return Err(PsdpError::DimensionMismatch {
            expected: n,
            found: v.len(),
        });
    }
    let mut acc = vec![0.0; n];
    let mut term = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    op.apply_into(v, &mut acc, &mut term, &mut scratch);
    Ok(acc)
}

/// Gaussian sketch with `rows` rows scaled by `1/sqrt(rows)`. Row `r` is
/// drawn from its own ChaCha stream so rows can be generated in any order.
#[derive(Clone, Debug)]
pub struct GaussianSketch {
    rows: usize,
    cols: usize,
    /// Row-major.
    data: Vec<f64>,
}

impl GaussianSketch {
    pub fn new(rows: usize, cols: usize, seed: u64) -> Self {
        let scale = 1.0 / (rows as f64).sqrt();
        let per_row = par::map_indexed(rows, rows * cols * 8, |r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            (0..cols)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<f64>>()
        });
        GaussianSketch {
            rows,
            cols,
            data: per_row.concat(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// `‖Π y‖²`.
    pub fn sketched_norm_sq(&self, y: &[f64]) -> f64 {
        debug_assert_eq!(y.len(), self.cols);
        self.data
            .chunks_exact(self.cols)
            .map(|row| {
                let d: f64 = row.iter().zip(y).map(|(a, b)| a * b).sum();
                d * d
            })
            .sum()
    }
}

/// Exponential dot products in scaled form: the true values are
/// `dots[i] * exp(log_scale)` and `trace * exp(log_scale)`. Exact mode
/// shifts by `λ_max(Φ)` so large exponents stay representable.
#[derive(Clone, Debug)]
pub struct ExpDots {
    pub log_scale: f64,
    pub dots: Vec<f64>,
    /// `tr exp(Φ)` (scaled) when requested.
    pub trace: Option<f64>,
    /// `λ_max(Φ)`, available for free from the exact engine.
    pub lambda_max: Option<f64>,
}

impl ExpDots {
    pub fn unscaled(&self) -> Vec<f64> {
        let s = self.log_scale.exp();
        self.dots.iter().map(|d| d * s).collect()
    }

    pub fn ln_trace(&self) -> Option<f64> {
        self.trace.map(|t| t.ln() + self.log_scale)
    }
}

/// Strategy object evaluating `exp(Φ) • A_i` in the configured mode. The
/// sketch matrix is drawn once per engine, so repeated calls reuse it.
#[derive(Clone, Debug)]
pub struct ExpEngine {
    cfg: ExpEngineConfig,
    n: usize,
    sketch: Option<GaussianSketch>,
}

impl ExpEngine {
    pub fn new(cfg: ExpEngineConfig, n: usize) -> Result<Self> {
        cfg.validate()?;
        let sketch = (cfg.mode == ExpMode::TaylorJl)
            .then(|| GaussianSketch::new(cfg.resolved_jl_rows(n), n, cfg.seed));
        Ok(ExpEngine { cfg, n, sketch })
    }

    pub fn config(&self) -> &ExpEngineConfig {
        &self.cfg
    }

    pub fn set_kappa_bound(&mut self, kappa: f64) {
        self.cfg.kappa_bound = kappa;
    }

    pub fn evaluate(
        &self,
        phi: &SymMatrix,
        constraints: &[FactoredPSD],
        want_trace: bool,
    ) -> Result<ExpDots> {
        if phi.dim() != self.n {
            return Err(PsdpError::DimensionMismatch {
                expected: self.n,
                found: phi.dim(),
            });
        }
        if let Some(bad) = constraints.iter().find(|a| a.dim() != self.n) {
            return Err(PsdpError::DimensionMismatch {
                expected: self.n,
                found: bad.dim(),
            });
        }
        let out = match self.cfg.mode {
            ExpMode::Exact => self.evaluate_exact(phi, constraints, want_trace)?,
            ExpMode::Taylor | ExpMode::TaylorJl => {
                self.evaluate_taylor(phi, constraints, want_trace)?
            }
        };
        if out.dots.iter().any(|d| !d.is_finite()) || out.trace.is_some_and(|t| !t.is_finite()) {
            return Err(PsdpError::NonFinite {
                context: "exponential dot products",
            });
        }
        Ok(out)
    }

    fn evaluate_exact(
        &self,
        phi: &SymMatrix,
        constraints: &[FactoredPSD],
        want_trace: bool,
    ) -> Result<ExpDots> {
        let eig = eigendecompose(phi)?;
        let lmax = eig.lambda_max();
        let scale = lmax.abs().max(eig.lambda_min().abs()).max(1.0);
        if eig.lambda_min() < -TOL_REL * scale {
            return Err(PsdpError::NotPsd {
                min_eigenvalue: eig.lambda_min(),
                threshold: -TOL_REL * scale,
            });
        }
        self.check_kappa(lmax)?;
        let shift = lmax.max(0.0);
        let w = eig.map(|l| (l - shift).exp());
        let work: usize = constraints.iter().map(|a| a.nnz() * a.nnz()).sum();
        let dots = par::map_indexed(constraints.len(), work, |i| constraints[i].dot_dense(&w));
        let trace = want_trace.then(|| eig.eigenvalues.iter().map(|l| (l - shift).exp()).sum());
        Ok(ExpDots {
            log_scale: shift,
            dots,
            trace,
            lambda_max: Some(lmax),
        })
    }

    fn evaluate_taylor(
        &self,
        phi: &SymMatrix,
        constraints: &[FactoredPSD],
        want_trace: bool,
    ) -> Result<ExpDots> {
        let op = TaylorOperator::new(phi, self.cfg.kappa_bound, self.cfg.eps)?;
        self.check_kappa_taylor(&op)?;
        let n = self.n;
        let sketch = self.sketch.as_ref();
        // Every chain start: constraint factor columns, then (for the trace)
        // the identity columns. tr exp(Φ) = ‖exp(Φ/2)‖_F² always uses the
        // unsketched chains.
        let mut starts: Vec<ChainStart> = Vec::new();
        for (i, a) in constraints.iter().enumerate() {
            let f = a.factor();
            for j in 0..f.ncols() {
                let (idx, vals) = f.col(j);
                starts.push((i, idx, vals));
            }
        }
        let trace_owner = constraints.len();
        let unit_idx: Vec<usize> = (0..n).collect();
        let one = [1.0];
        if want_trace {
            for j in 0..n {
                starts.push((trace_owner, &unit_idx[j..j + 1], &one));
            }
        }
        let chunks: Vec<&[ChainStart]> = starts.chunks(BLOCK_COLS).collect();
        let per_col = op.cost() + sketch.map_or(n, |s| s.rows() * n);
        let per_chunk = par::map_indexed(chunks.len(), starts.len() * per_col, |c| {
            let chunk = chunks[c];
            let b = chunk.len();
            let mut block = vec![0.0; n * b];
            for (col, (_, idx, vals)) in chunk.iter().enumerate() {
                for (&r, &v) in idx.iter().zip(vals.iter()) {
                    block[r * b + col] = v;
                }
            }
            let y = op.apply_block(&block, b);
            let mut column = vec![0.0; n];
            chunk
                .iter()
                .enumerate()
                .map(|(col, &(owner, _, _))| {
                    for r in 0..n {
                        column[r] = y[r * b + col];
                    }
                    let v = match sketch {
                        Some(s) if owner != trace_owner => s.sketched_norm_sq(&column),
                        _ => column.iter().map(|v| v * v).sum::<f64>(),
                    };
                    (owner, v)
                })
                .collect::<Vec<_>>()
        });
        let mut dots = vec![0.0; constraints.len()];
        let mut tr = 0.0;
        for (owner, v) in per_chunk.into_iter().flatten() {
            if owner == trace_owner {
                tr += v;
            } else {
                dots[owner] += v;
            }
        }
        let trace = want_trace.then_some(tr);
        Ok(ExpDots {
            log_scale: 0.0,
            dots,
            trace,
            lambda_max: None,
        })
    }

    fn check_kappa(&self, lmax: f64) -> Result<()> {
        let bound = self.cfg.kappa_bound;
        if lmax > bound * (1.0 + TOL_REL) + TOL_REL {
            return Err(PsdpError::KappaExceeded {
                estimate: lmax,
                bound,
            });
        }
        Ok(())
    }

    /// Without a spectral decomposition only a lower estimate of `λ_max` is
    /// available: the Gershgorin bound clears most calls, otherwise a short
    /// power iteration gives a Rayleigh quotient `≤ λ_max`, so a reported
    /// violation is always genuine.
    fn check_kappa_taylor(&self, op: &TaylorOperator) -> Result<()> {
        let half_bound = 0.5 * self.cfg.kappa_bound;
        if op.csr.row_abs_sum_max() <= half_bound * (1.0 + TOL_REL) {
            return Ok(());
        }
        let n = op.dim();
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * i as f64).collect();
        let mut w = vec![0.0; n];
        let mut rayleigh = 0.0;
        for _ in 0..30 {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Ok(());
            }
            v.iter_mut().for_each(|x| *x /= norm);
            op.csr.mul_vec(&v, &mut w);
            rayleigh = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            std::mem::swap(&mut v, &mut w);
        }
        self.check_kappa(2.0 * rayleigh)
    }
}

/// `exp(Φ) • A_i` for every constraint, in the configured mode.
pub fn big_dot_exp(
    phi: &SymMatrix,
    constraints: &[FactoredPSD],
    cfg: &ExpEngineConfig,
) -> Result<Vec<f64>> {
    let engine = ExpEngine::new(cfg.clone(), phi.dim())?;
    Ok(engine.evaluate(phi, constraints, false)?.unscaled())
}
