//! Numerical checks of the matrix multiplicative weights regret bound and
//! the trace inequalities behind it.
//!
//! For gains `0 ⪯ M⁽ᵗ⁾ ⪯ I` and densities `P⁽ᵗ⁾ = W⁽ᵗ⁾ / tr W⁽ᵗ⁾` with
//! `W⁽¹⁾ = I`, `W⁽ᵗ⁺¹⁾ = exp(ε₀ Σ_{τ<=t} M⁽τ⁾)`, the bound reads
//!
//! ```text
//! (1 + ε₀) Σ_t M⁽ᵗ⁾ • P⁽ᵗ⁾ >= λ_max(Σ_t M⁽ᵗ⁾) - ln n / ε₀.
//! ```
//!
//! The bound comes from chaining Golden-Thompson with the upper sandwich
//! `exp(ε₀ M) ⪯ I + (1 + 2ε₀) ε₀ M` for `0 ⪯ M ⪯ I`, which bounds
//! `tr W⁽ᵀ⁺¹⁾` from above.

use serde::{Deserialize, Serialize};

use crate::error::{PsdpError, Result};
use crate::linalg::{eigendecompose, exp_exact, mat_dot, psd_order_leq, SymMatrix};

/// Relative tolerance for the PSD and `⪯ I` hypotheses on each gain.
pub const GAIN_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct GainSequence {
    pub eps0: f64,
    pub gains: Vec<SymMatrix>,
}

impl GainSequence {
    pub fn new(eps0: f64, gains: Vec<SymMatrix>) -> Result<Self> {
        check_eps0(eps0)?;
        if let Some(first) = gains.first() {
            let n = first.dim();
            for (step, g) in gains.iter().enumerate() {
                if g.dim() != n {
                    return Err(PsdpError::DimensionMismatch {
                        expected: n,
                        found: g.dim(),
                    });
                }
                check_gain(g, step)?;
            }
        }
        Ok(GainSequence { eps0, gains })
    }
}

fn check_eps0(eps0: f64) -> Result<()> {
    if !(eps0 > 0.0 && eps0 <= 0.5) {
        return Err(PsdpError::InvalidParameter(format!(
            "eps0 must lie in (0, 1/2], got {eps0}"
        )));
    }
    Ok(())
}

fn check_gain(g: &SymMatrix, step: usize) -> Result<()> {
    let eig = eigendecompose(g)?;
    if eig.lambda_min() < -GAIN_TOL {
        return Err(PsdpError::HypothesisViolated {
            step,
            reason: format!("gain is not PSD (lambda_min = {:e})", eig.lambda_min()),
        });
    }
    if eig.lambda_max() > 1.0 + GAIN_TOL {
        return Err(PsdpError::HypothesisViolated {
            step,
            reason: format!("gain exceeds I (lambda_max = {})", eig.lambda_max()),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmwuReport {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
    pub steps: usize,
}

/// Incremental replay: feed gains one at a time, then call [`finish`].
///
/// [`finish`]: MmwuReplay::finish
#[derive(Clone, Debug)]
pub struct MmwuReplay {
    eps0: f64,
    n: usize,
    sum: SymMatrix,
    gain_dot_density: f64,
    steps: usize,
}

impl MmwuReplay {
    pub fn new(n: usize, eps0: f64) -> Result<Self> {
        check_eps0(eps0)?;
        if n == 0 {
            return Err(PsdpError::InvalidParameter("dimension must be >= 1".into()));
        }
        Ok(MmwuReplay {
            eps0,
            n,
            sum: SymMatrix::zeros(n),
            gain_dot_density: 0.0,
            steps: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn observe(&mut self, gain: &SymMatrix) -> Result<()> {
        if gain.dim() != self.n {
            return Err(PsdpError::DimensionMismatch {
                expected: self.n,
                found: gain.dim(),
            });
        }
        check_gain(gain, self.steps)?;
        let eig = eigendecompose(&self.sum.scaled(self.eps0))?;
        let shift = eig.lambda_max();
        let w = eig.map(|l| (l - shift).exp());
        let p = w.scaled(1.0 / w.trace());
        self.gain_dot_density += mat_dot(gain, &p)?;
        self.sum.add_scaled(gain, 1.0)?;
        self.steps += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<MmwuReport> {
        let lhs = (1.0 + self.eps0) * self.gain_dot_density;
        let lmax = eigendecompose(&self.sum)?.lambda_max();
        let rhs = lmax - (self.n as f64).ln() / self.eps0;
        let slack = lhs - rhs;
        Ok(MmwuReport {
            lhs,
            rhs,
            slack,
            holds: slack >= -1e-9 * lhs.abs().max(rhs.abs()).max(1.0),
            steps: self.steps,
        })
    }
}

pub fn replay_mmwu(seq: &GainSequence) -> Result<MmwuReport> {
    let n = seq.gains.first().map_or(1, |g| g.dim());
    let mut replay = MmwuReplay::new(n, seq.eps0)?;
    for g in &seq.gains {
        replay.observe(g)?;
    }
    replay.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldenThompsonReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

fn require_psd(a: &SymMatrix) -> Result<()> {
    let eig = eigendecompose(a)?;
    let threshold = -GAIN_TOL * eig.lambda_max().abs().max(1.0);
    if eig.lambda_min() < threshold {
        return Err(PsdpError::NotPsd {
            min_eigenvalue: eig.lambda_min(),
            threshold,
        });
    }
    Ok(())
}

/// `tr exp(A + B) <= tr(exp(A) exp(B))` for PSD `A`, `B`.
pub fn golden_thompson_check(a: &SymMatrix, b: &SymMatrix) -> Result<GoldenThompsonReport> {
    require_psd(a)?;
    require_psd(b)?;
    let mut sum = a.clone();
    sum.add_scaled(b, 1.0)?;
    let lhs = exp_exact(&sum)?.trace();
    let rhs = mat_dot(&exp_exact(a)?, &exp_exact(b)?)?;
    Ok(GoldenThompsonReport {
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + 1e-9),
    })
}

/// `I + A ⪯ exp(A) ⪯ I + (1 + 2ε) A` for `0 ⪯ A ⪯ ε I`, `ε <= 1/2`.
pub fn exp_sandwich_check(a: &SymMatrix, eps: f64) -> Result<bool> {
    if !(eps > 0.0 && eps <= 0.5) {
        return Err(PsdpError::InvalidParameter(format!(
            "eps must lie in (0, 1/2], got {eps}"
        )));
    }
    let eig = eigendecompose(a)?;
    if eig.lambda_min() < -GAIN_TOL || eig.lambda_max() > eps * (1.0 + GAIN_TOL) {
        return Err(PsdpError::InvalidParameter(format!(
            "need 0 <= A <= eps I, spectrum is [{}, {}]",
            eig.lambda_min(),
            eig.lambda_max()
        )));
    }
    let n = a.dim();
    let e = exp_exact(a)?;
    let mut lower = SymMatrix::identity(n);
    lower.add_scaled(a, 1.0)?;
    let mut upper = SymMatrix::identity(n);
    upper.add_scaled(a, 1.0 + 2.0 * eps)?;
    Ok(psd_order_leq(&lower, &e, 1e-10)? && psd_order_leq(&e, &upper, 1e-10)?)
}

/// `tr exp(A) >= exp(λ_max(A))`, compared in log space with relative `tol`.
pub fn trace_exp_dominates(a: &SymMatrix, tol: f64) -> Result<bool> {
    let eig = eigendecompose(a)?;
    let shift = eig.lambda_max();
    let ln_trace = shift + eig.eigenvalues.iter().map(|l| (l - shift).exp()).sum::<f64>().ln();
    Ok(ln_trace >= shift - tol * shift.abs().max(1.0))
}
