//! Dense symmetric and sparse-factored matrices plus the spectral primitives
//! the solver is built on.
//!
//! Dense storage is a `nalgebra::DMatrix<f64>` kept exactly symmetric: every
//! mutator writes both triangles with the same value. Constraint matrices are
//! never stored densely; they live as sparse factors `Q` with `A = Q Qᵀ`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{PsdpError, Result};

/// Relative tolerance for reconstruction and PSD tests, applied as
/// `|err| <= TOL_REL * max(1, scale)`.
pub const TOL_REL: f64 = 1e-9;

const EIGEN_MAX_SWEEPS: usize = 10_000;

/// Dense real symmetric matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    data: DMatrix<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        assert!(n >= 1, "SymMatrix dimension must be positive");
        SymMatrix {
            data: DMatrix::zeros(n, n),
        }
    }

    pub fn identity(n: usize) -> Self {
        assert!(n >= 1, "SymMatrix dimension must be positive");
        SymMatrix {
            data: DMatrix::identity(n, n),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = SymMatrix::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.data[(i, i)] = d;
        }
        m
    }

    /// Builds the matrix from its lower triangle; `f(r, c)` is only called
    /// with `r >= c`.
    pub fn from_lower_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = SymMatrix::zeros(n);
        for r in 0..n {
            for c in 0..=r {
                let v = f(r, c);
                m.data[(r, c)] = v;
                m.data[(c, r)] = v;
            }
        }
        m
    }

    /// Row-major packed lower triangle: (0,0), (1,0), (1,1), (2,0), ...
    pub fn from_packed_lower(n: usize, packed: &[f64]) -> Result<Self> {
        let expected = n * (n + 1) / 2;
        if n == 0 || packed.len() != expected {
            return Err(PsdpError::DimensionMismatch {
                expected,
                found: packed.len(),
            });
        }
        let mut it = packed.iter();
        Ok(SymMatrix::from_lower_fn(n, |_, _| *it.next().unwrap()))
    }

    pub fn to_packed_lower(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out = Vec::with_capacity(n * (n + 1) / 2);
        for r in 0..n {
            for c in 0..=r {
                out.push(self.data[(r, c)]);
            }
        }
        out
    }

    /// Averages `m` with its transpose so the result is exactly symmetric.
    pub fn from_dense_symmetrized(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(PsdpError::DimensionMismatch {
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        let n = m.nrows();
        Ok(SymMatrix::from_lower_fn(n, |r, c| {
            if r == c {
                m[(r, c)]
            } else {
                0.5 * (m[(r, c)] + m[(c, r)])
            }
        }))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[(r, c)]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[(r, c)] = v;
        self.data[(c, r)] = v;
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    pub fn trace(&self) -> f64 {
        self.data.trace()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_diagonal(&self) -> bool {
        let n = self.dim();
        (0..n).all(|c| (0..n).all(|r| r == c || self.data[(r, c)] == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> SymMatrix {
        SymMatrix {
            data: &self.data * s,
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &SymMatrix, s: f64) -> Result<()> {
        check_dims(self.dim(), other.dim())?;
        self.data.zip_apply(&other.data, |a, b| *a += s * b);
        Ok(())
    }

    pub fn sub(&self, other: &SymMatrix) -> Result<SymMatrix> {
        check_dims(self.dim(), other.dim())?;
        Ok(SymMatrix {
            data: &self.data - &other.data,
        })
    }

    /// `self += s * v vᵀ` for a sparse vector given as parallel index/value
    /// slices.
    pub fn add_sparse_rank1(&mut self, s: f64, idx: &[usize], vals: &[f64]) {
        for (a, (&i, &vi)) in idx.iter().zip(vals).enumerate() {
            for (&j, &vj) in idx[..=a].iter().zip(&vals[..=a]) {
                let upd = s * vi * vj;
                self.data[(i, j)] += upd;
                if i != j {
                    self.data[(j, i)] += upd;
                }
            }
        }
    }

    /// `out = self * v`.
    pub fn mul_vec(&self, v: &[f64], out: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(v.len(), n);
        debug_assert_eq!(out.len(), n);
        out.iter_mut().for_each(|o| *o = 0.0);
        // Column-major storage: accumulate column by column.
        for (c, &vc) in v.iter().enumerate() {
            if vc == 0.0 {
                continue;
            }
            let col = self.data.column(c);
            for (o, &a) in out.iter_mut().zip(col.iter()) {
                *o += a * vc;
            }
        }
    }

    /// `vᵀ self v` for a sparse vector.
    pub fn sparse_quad_form(&self, idx: &[usize], vals: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (&i, &vi) in idx.iter().zip(vals) {
            let mut row = 0.0;
            for (&j, &vj) in idx.iter().zip(vals) {
                row += self.data[(i, j)] * vj;
            }
            acc += vi * row;
        }
        acc
    }

    pub fn matmul(&self, other: &SymMatrix) -> Result<DMatrix<f64>> {
        check_dims(self.dim(), other.dim())?;
        Ok(&self.data * &other.data)
    }
}

fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(PsdpError::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Frobenius inner product `A • B = Σ A_ij B_ij = tr(AB)`.
pub fn mat_dot(a: &SymMatrix, b: &SymMatrix) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    Ok(a.data.dot(&b.data))
}

/// Spectral decomposition with eigenvalues sorted nonincreasing.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, in eigenvalue order.
    pub eigenvectors: DMatrix<f64>,
    diagonal: bool,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn lambda_min(&self) -> f64 {
        *self.eigenvalues.last().unwrap()
    }

    /// `Σ f(λ_i) v_i v_iᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.dim();
        if self.diagonal {
            let mut out = SymMatrix::zeros(n);
            for (k, &lam) in self.eigenvalues.iter().enumerate() {
                let (row, _) = self.eigenvectors.column(k).argmax();
                out.data[(row, row)] = f(lam);
            }
            return out;
        }
        let mut scaled = self.eigenvectors.clone();
        for (k, &lam) in self.eigenvalues.iter().enumerate() {
            let fl = f(lam);
            scaled.column_mut(k).iter_mut().for_each(|v| *v *= fl);
        }
        let prod = scaled * self.eigenvectors.transpose();
        SymMatrix::from_dense_symmetrized(&prod).expect("square by construction")
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.map(|l| l)
    }
}

/// Dense symmetric eigendecomposition. Diagonal inputs are decomposed
/// exactly without iteration.
pub fn eigendecompose(a: &SymMatrix) -> Result<EigenDecomposition> {
    let n = a.dim();
    if !a.is_finite() {
        return Err(PsdpError::NonFinite {
            context: "eigendecompose input",
        });
    }
    if a.is_diagonal() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)).then(i.cmp(&j)));
        let eigenvalues = order.iter().map(|&i| a.get(i, i)).collect();
        let mut eigenvectors = DMatrix::zeros(n, n);
        for (k, &i) in order.iter().enumerate() {
            eigenvectors[(i, k)] = 1.0;
        }
        return Ok(EigenDecomposition {
            eigenvalues,
            eigenvectors,
            diagonal: true,
        });
    }
    let eig = SymmetricEigen::try_new(a.data.clone(), f64::EPSILON, EIGEN_MAX_SWEEPS)
        .ok_or(PsdpError::EigenFailure { dim: n })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        eigenvectors.set_column(k, &eig.eigenvectors.column(i));
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
        diagonal: false,
    })
}

/// Matrix exponential through the spectral decomposition.
pub fn exp_exact(a: &SymMatrix) -> Result<SymMatrix> {
    Ok(eigendecompose(a)?.map(f64::exp))
}

pub fn lambda_max(a: &SymMatrix) -> Result<f64> {
    Ok(eigendecompose(a)?.lambda_max())
}

pub fn lambda_min(a: &SymMatrix) -> Result<f64> {
    Ok(eigendecompose(a)?.lambda_min())
}

/// Löwner order test `A ⪯ B`: accepts when
/// `λ_min(B - A) >= -tol * max(1, max|λ(B - A)|)`.
pub fn psd_order_leq(a: &SymMatrix, b: &SymMatrix, tol: f64) -> Result<bool> {
    let diff = b.sub(a)?;
    let eig = eigendecompose(&diff)?;
    let scale = eig.lambda_max().abs().max(eig.lambda_min().abs()).max(1.0);
    Ok(eig.lambda_min() >= -tol * scale)
}

/// Sparse `nrows x ncols` matrix in compressed-column form. Entries are
/// nonzero and unique per position.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFactor {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseFactor {
    /// Builds from `(row, col, value)` triplets. Exact zeros are dropped;
    /// out-of-range indices, duplicates and non-finite values are rejected.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (r, c, v) in triplets {
            if r >= nrows || c >= ncols {
                return Err(PsdpError::InvalidParameter(format!(
                    "triplet ({r}, {c}) outside {nrows}x{ncols} factor"
                )));
            }
            if !v.is_finite() {
                return Err(PsdpError::InvalidParameter(format!(
                    "non-finite factor entry at ({r}, {c})"
                )));
            }
            entries.push((r, c, v));
        }
        entries.sort_by_key(|&(r, c, _)| (c, r));
        if let Some(w) = entries
            .windows(2)
            .find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1))
        {
            return Err(PsdpError::InvalidParameter(format!(
                "duplicate triplet at ({}, {})",
                w[0].0, w[0].1
            )));
        }
        let mut col_ptr = vec![0usize; ncols + 1];
        let mut row_idx = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        for &(r, c, v) in entries.iter().filter(|e| e.2 != 0.0) {
            col_ptr[c + 1] += 1;
            row_idx.push(r);
            values.push(v);
        }
        for c in 0..ncols {
            col_ptr[c + 1] += col_ptr[c];
        }
        Ok(SparseFactor {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        SparseFactor::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0))).unwrap()
    }

    /// Sparse copy of a dense matrix, dropping exact zeros.
    pub fn from_dense(m: &DMatrix<f64>) -> Result<Self> {
        let (nr, nc) = m.shape();
        let trips = (0..nc).flat_map(|c| (0..nr).map(move |r| (r, c, m[(r, c)])));
        SparseFactor::from_triplets(nr, nc, trips.collect::<Vec<_>>())
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Row indices and values of column `j`.
    #[inline]
    pub fn col(&self, j: usize) -> (&[usize], &[f64]) {
        let range = self.col_ptr[j]..self.col_ptr[j + 1];
        (&self.row_idx[range.clone()], &self.values[range])
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |j| {
            let (rows, vals) = self.col(j);
            rows.iter().zip(vals).map(move |(&r, &v)| (r, j, v))
        })
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn scaled(&self, s: f64) -> SparseFactor {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        if s == 0.0 {
            return SparseFactor::from_triplets(self.nrows, self.ncols, std::iter::empty())
                .unwrap();
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] = v;
        }
        m
    }

    /// `left * self` computed column by column, zeros dropped.
    pub fn left_mul_dense(&self, left: &DMatrix<f64>) -> Result<SparseFactor> {
        check_dims(left.ncols(), self.nrows)?;
        let out_rows = left.nrows();
        let mut trips = Vec::new();
        for j in 0..self.ncols {
            let (rows, vals) = self.col(j);
            for r in 0..out_rows {
                let v: f64 = rows.iter().zip(vals).map(|(&k, &q)| left[(r, k)] * q).sum();
                if v != 0.0 {
                    trips.push((r, j, v));
                }
            }
        }
        SparseFactor::from_triplets(out_rows, self.ncols, trips)
    }
}

/// PSD matrix held as `Q Qᵀ`; never stored densely.
#[derive(Clone, Debug, PartialEq)]
pub struct FactoredPSD {
    factor: SparseFactor,
}

impl FactoredPSD {
    pub fn new(factor: SparseFactor) -> Self {
        FactoredPSD { factor }
    }

    pub fn factor(&self) -> &SparseFactor {
        &self.factor
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    /// `tr(Q Qᵀ) = ‖Q‖_F²`.
    pub fn trace(&self) -> f64 {
        self.factor.frobenius_sq()
    }

    pub fn nnz(&self) -> usize {
        self.factor.nnz()
    }

    /// `W • Q Qᵀ = Σ_j q_jᵀ W q_j`.
    pub fn dot_dense(&self, w: &SymMatrix) -> f64 {
        (0..self.factor.ncols())
            .map(|j| {
                let (idx, vals) = self.factor.col(j);
                w.sparse_quad_form(idx, vals)
            })
            .sum()
    }

    /// `target += s * Q Qᵀ`.
    pub fn accumulate_into(&self, target: &mut SymMatrix, s: f64) {
        for j in 0..self.factor.ncols() {
            let (idx, vals) = self.factor.col(j);
            target.add_sparse_rank1(s, idx, vals);
        }
    }

    /// Represents `s * A` by scaling the factor with `sqrt(s)`.
    pub fn scaled(&self, s: f64) -> FactoredPSD {
        assert!(s >= 0.0, "PSD scaling must be nonnegative");
        FactoredPSD::new(self.factor.scaled(s.sqrt()))
    }
}

/// Dense `Q Qᵀ`.
pub fn materialize(f: &FactoredPSD) -> SymMatrix {
    let mut out = SymMatrix::zeros(f.dim().max(1));
    f.accumulate_into(&mut out, 1.0);
    out
}

/// Factors a PSD matrix as `Q Qᵀ` with `Q = [sqrt(λ_i) v_i]` over the
/// eigenvalues above the tolerance. Eigenvalues in `[-tol*scale, tol*scale]`
/// count as zero and their columns are dropped.
pub fn factor_psd(a: &SymMatrix, tol: f64) -> Result<FactoredPSD> {
    let n = a.dim();
    let eig = eigendecompose(a)?;
    let scale = eig.lambda_max().abs().max(eig.lambda_min().abs()).max(1.0);
    let threshold = tol * scale;
    if eig.lambda_min() < -threshold {
        return Err(PsdpError::NotPsd {
            min_eigenvalue: eig.lambda_min(),
            threshold: -threshold,
        });
    }
    let kept: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > threshold).collect();
    let mut trips = Vec::new();
    for (col, &k) in kept.iter().enumerate() {
        let s = eig.eigenvalues[k].sqrt();
        for r in 0..n {
            let v = s * eig.eigenvectors[(r, k)];
            if v != 0.0 {
                trips.push((r, col, v));
            }
        }
    }
    Ok(FactoredPSD::new(SparseFactor::from_triplets(
        n,
        kept.len(),
        trips,
    )?))
}
