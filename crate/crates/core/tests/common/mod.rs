//! Shared fixtures for the integration tests: an exact LP oracle for
//! diagonal instances and the seeded diagonal corpus.
#![allow(dead_code)]

use psdp_core::io::{gen_instance, GenKind};
use psdp_core::normalize::{normalize_instance, NormalizedInstance, RawInstance};

/// Solves `A y = b` by Gaussian elimination with partial pivoting. `None`
/// when the system is (numerically) singular.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut y = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * y[k]).sum();
        y[row] = (b[row] - s) / a[row][row];
    }
    Some(y)
}

fn for_each_subset(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, f);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::with_capacity(k), f);
}

/// `max cᵀy` s.t. `Σ_i y_i d[i][j] <= r[j]` for every `j`, `y >= 0`, by
/// enumerating every vertex of the polytope. `d[i]` is the column of
/// variable `i`. Assumes the optimum is bounded.
pub fn lp_max(c: &[f64], d: &[Vec<f64>], r: &[f64]) -> f64 {
    let m = c.len();
    let rows = r.len();
    // Rows 0..rows are the packing rows, rows..rows+m are -y_i <= 0.
    let row = |k: usize| -> (Vec<f64>, f64) {
        if k < rows {
            ((0..m).map(|i| d[i][k]).collect(), r[k])
        } else {
            let mut e = vec![0.0; m];
            e[k - rows] = -1.0;
            (e, 0.0)
        }
    };
    let mut best = f64::NEG_INFINITY;
    for_each_subset(rows + m, m, &mut |tight| {
        let (a, b): (Vec<_>, Vec<_>) = tight.iter().map(|&k| row(k)).unzip();
        let Some(y) = solve_dense(a, b) else { return };
        let feasible = y.iter().all(|&v| v >= -1e-9)
            && (0..rows).all(|j| {
                let lhs: f64 = (0..m).map(|i| y[i] * d[i][j]).sum();
                lhs <= r[j] + 1e-9 * r[j].abs().max(1.0)
            });
        if feasible {
            let obj: f64 = c.iter().zip(&y).map(|(a, b)| a * b).sum();
            best = best.max(obj);
        }
    });
    best
}

/// Diagonal of every constraint matrix, read off the raw factor entries.
/// Panics unless every factor column has a single nonzero, which is what
/// makes `Q Qᵀ` diagonal.
pub fn raw_diagonals(raw: &RawInstance) -> Vec<Vec<f64>> {
    let n = raw.dim();
    raw.constraints()
        .iter()
        .map(|c| {
            let mut d = vec![0.0; n];
            let mut seen = vec![false; c.a.factor().ncols()];
            for (r, col, v) in c.a.factor().triplets() {
                assert!(!seen[col], "oracle needs diagonal constraint matrices");
                seen[col] = true;
                d[r] += v * v;
            }
            d
        })
        .collect()
}

/// Packing optimum of a diagonal instance with identity objective and
/// `b = 1`: `max 1ᵀx` s.t. `Σ x_i diag(A_i) <= 1`.
pub fn diagonal_packing_opt(raw: &RawInstance) -> f64 {
    let d = raw_diagonals(raw);
    lp_max(&vec![1.0; d.len()], &d, &vec![1.0; raw.dim()])
}

pub struct CorpusEntry {
    pub seed: u64,
    pub raw: RawInstance,
    pub norm: NormalizedInstance,
    pub opt: f64,
}

/// Sizes for corpus seed `s`: `n` in 2..=6 and `m` in 1..=6.
pub fn corpus_dims(seed: u64) -> (usize, usize) {
    (2 + (seed % 5) as usize, 1 + ((seed / 5) % 6) as usize)
}

/// The `diagonal_lp` instances for seeds `1..=count`.
pub fn diagonal_corpus(count: u64) -> Vec<CorpusEntry> {
    (1..=count)
        .map(|seed| {
            let (n, m) = corpus_dims(seed);
            let raw = gen_instance(GenKind::DiagonalLp, n, m, seed).unwrap();
            let norm = normalize_instance(&raw).unwrap();
            let opt = diagonal_packing_opt(&raw);
            CorpusEntry { seed, raw, norm, opt }
        })
        .collect()
}
