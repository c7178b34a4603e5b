//! Reduction of a general positive SDP
//!
//! ```text
//!   minimize C • Y  s.t.  A_i • Y >= b_i,  Y ⪰ 0
//! ```
//!
//! to the normalized covering/packing pair with constraint matrices
//! `B_i = (1/b_i) C^{-1/2} A_i C^{-1/2}` and identity objective. Factors are
//! carried through: `B_i = (C^{-1/2} Q_i / sqrt(b_i)) (…)ᵀ`.

use crate::error::{PsdpError, Result};
use crate::linalg::{eigendecompose, FactoredPSD, SymMatrix};
use crate::par;

/// Relative full-rank threshold for the objective matrix.
pub const FULL_RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    Identity,
    /// The objective matrix `C` itself.
    Matrix(SymMatrix),
    /// `C^{-1/2}` supplied directly; no factorization needed.
    InvSqrt(SymMatrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawConstraint {
    pub a: FactoredPSD,
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawInstance {
    n: usize,
    objective: Objective,
    constraints: Vec<RawConstraint>,
}

impl RawInstance {
    pub fn new(n: usize, objective: Objective, constraints: Vec<RawConstraint>) -> Result<Self> {
        if n == 0 {
            return Err(PsdpError::InvalidParameter("dimension must be positive".into()));
        }
        if constraints.is_empty() {
            return Err(PsdpError::InvalidParameter("at least one constraint is required".into()));
        }
        match &objective {
            Objective::Identity => {}
            Objective::Matrix(c) | Objective::InvSqrt(c) => {
                if c.dim() != n {
                    return Err(PsdpError::DimensionMismatch {
                        expected: n,
                        found: c.dim(),
                    });
                }
            }
        }
        for (i, c) in constraints.iter().enumerate() {
            if c.a.dim() != n {
                return Err(PsdpError::DimensionMismatch {
                    expected: n,
                    found: c.a.dim(),
                });
            }
            if !(c.b > 0.0 && c.b.is_finite()) {
                return Err(PsdpError::InvalidParameter(format!(
                    "constraint {i}: b must be positive and finite, got {}",
                    c.b
                )));
            }
        }
        Ok(RawInstance {
            n,
            objective,
            constraints,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn constraints(&self) -> &[RawConstraint] {
        &self.constraints
    }
}

/// Normalized instance: maximize `1ᵀx` s.t. `Σ x_i B_i ⪯ I`, `x >= 0`, and
/// its covering dual.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedInstance {
    n: usize,
    constraints: Vec<FactoredPSD>,
}

impl NormalizedInstance {
    pub fn new(n: usize, constraints: Vec<FactoredPSD>) -> Result<Self> {
        if n == 0 || constraints.is_empty() {
            return Err(PsdpError::InvalidParameter(
                "normalized instance needs n >= 1 and m >= 1".into(),
            ));
        }
        for (index, c) in constraints.iter().enumerate() {
            if c.dim() != n {
                return Err(PsdpError::DimensionMismatch {
                    expected: n,
                    found: c.dim(),
                });
            }
            if !(c.trace() > 0.0) {
                return Err(PsdpError::ZeroConstraint { index });
            }
        }
        Ok(NormalizedInstance { n, constraints })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn constraints(&self) -> &[FactoredPSD] {
        &self.constraints
    }

    pub fn traces(&self) -> Vec<f64> {
        self.constraints.iter().map(FactoredPSD::trace).collect()
    }

    /// `Σ x_i B_i`, accumulated in index order.
    pub fn weighted_sum(&self, x: &[f64]) -> Result<SymMatrix> {
        if x.len() != self.constraints.len() {
            return Err(PsdpError::DimensionMismatch {
                expected: self.constraints.len(),
                found: x.len(),
            });
        }
        let mut out = SymMatrix::zeros(self.n);
        for (a, &xi) in self.constraints.iter().zip(x) {
            if xi != 0.0 {
                a.accumulate_into(&mut out, xi);
            }
        }
        Ok(out)
    }
}

/// `C^{-1/2} = Σ λ_i^{-1/2} v_i v_iᵀ`; rejects `λ_min <= tol * λ_max`.
pub fn inv_sqrt(c: &SymMatrix, tol: f64) -> Result<SymMatrix> {
    let eig = eigendecompose(c)?;
    let (lmin, lmax) = (eig.lambda_min(), eig.lambda_max());
    if !(lmax > 0.0) || lmin <= tol * lmax {
        return Err(PsdpError::SingularObjective {
            min_eigenvalue: lmin,
            max_eigenvalue: lmax,
        });
    }
    Ok(eig.map(|l| 1.0 / l.sqrt()))
}

pub fn normalize_instance(raw: &RawInstance) -> Result<NormalizedInstance> {
    let transform = match raw.objective() {
        Objective::Identity => None,
        Objective::Matrix(c) => Some(inv_sqrt(c, FULL_RANK_TOL)?),
        Objective::InvSqrt(s) => Some(s.clone()),
    };
    let n = raw.dim();
    let cons = raw.constraints();
    let work = cons.iter().map(|c| c.a.nnz() * n).sum();
    let factors = par::try_map_indexed(cons.len(), work, |i| {
        let RawConstraint { a, b } = &cons[i];
        let base = match &transform {
            None => a.factor().clone(),
            Some(t) => a.factor().left_mul_dense(t.as_matrix())?,
        };
        let f = FactoredPSD::new(base.scaled(1.0 / b.sqrt()));
        if !(f.trace() > 0.0) {
            return Err(PsdpError::ZeroConstraint { index: i });
        }
        Ok(f)
    })?;
    NormalizedInstance::new(n, factors)
}

/// Multiplies every constraint matrix by `goal`. A packing point `x'` of the
/// result maps back to `goal * x'` on the input instance.
pub fn scale_instance(inst: &NormalizedInstance, goal: f64) -> Result<NormalizedInstance> {
    if !(goal > 0.0 && goal.is_finite()) {
        return Err(PsdpError::InvalidParameter(format!(
            "goal must be positive and finite, got {goal}"
        )));
    }
    let constraints = inst.constraints.iter().map(|a| a.scaled(goal)).collect();
    NormalizedInstance::new(inst.n, constraints)
}
