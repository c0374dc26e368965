//! Dense linear-algebra helpers over `nalgebra`.
//!
//! Everything here works on small-to-medium dense systems (a few thousand
//! unknowns at most). Sparse rows are used only to assemble Gram matrices.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::error::{DiceError, Result};

/// Ridge added to the diagonal when the plain factorization fails.
pub const RIDGE: f64 = 1e-9;

/// Sparse row `(column, value)` list.
pub type SparseRow = Vec<(usize, f64)>;

enum Inner {
    Cholesky(Cholesky<f64, Dyn>),
    Lu(LU<f64, Dyn, Dyn>),
}

/// A factorized square system that can be solved against many right-hand sides.
pub struct Factorized {
    inner: Inner,
    dim: usize,
    /// Whether the ridge had to be added to get a usable factorization.
    pub ridge_applied: bool,
}

impl Factorized {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        if rhs.len() != self.dim {
            return Err(DiceError::ShapeMismatch(format!(
                "rhs has length {}, system has dimension {}",
                rhs.len(),
                self.dim
            )));
        }
        let b = DVector::from_column_slice(rhs);
        let x = match &self.inner {
            Inner::Cholesky(c) => c.solve(&b),
            Inner::Lu(lu) => lu
                .solve(&b)
                .ok_or_else(|| DiceError::Solver("singular LU factor".into()))?,
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DiceError::Solver("non-finite solution".into()));
        }
        Ok(x.iter().copied().collect())
    }
}

fn add_ridge(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        m[(i, i)] += RIDGE;
    }
}

/// Factorizes a symmetric positive semi-definite matrix. Cholesky first; if
/// that fails the ridge is added and LU with partial pivoting is used.
pub fn factorize_spd(m: DMatrix<f64>) -> Result<Factorized> {
    let dim = m.nrows();
    let mut m = match Cholesky::new(m.clone()) {
        Some(c) => {
            return Ok(Factorized {
                inner: Inner::Cholesky(c),
                dim,
                ridge_applied: false,
            })
        }
        None => m,
    };
    add_ridge(&mut m);
    let lu = LU::new(m);
    if !lu.is_invertible() {
        return Err(DiceError::Solver("matrix singular even after ridge".into()));
    }
    Ok(Factorized {
        inner: Inner::Lu(lu),
        dim,
        ridge_applied: true,
    })
}

/// LU with partial pivoting for a general square matrix, falling back to the
/// ridge when a zero pivot shows up.
pub fn factorize_general(m: DMatrix<f64>) -> Result<Factorized> {
    let dim = m.nrows();
    let lu = LU::new(m.clone());
    if lu.is_invertible() && !near_singular(&lu) {
        return Ok(Factorized {
            inner: Inner::Lu(lu),
            dim,
            ridge_applied: false,
        });
    }
    let mut m = m;
    add_ridge(&mut m);
    let lu = LU::new(m);
    if !lu.is_invertible() {
        return Err(DiceError::Solver("matrix singular even after ridge".into()));
    }
    Ok(Factorized {
        inner: Inner::Lu(lu),
        dim,
        ridge_applied: true,
    })
}

fn near_singular(lu: &LU<f64, Dyn, Dyn>) -> bool {
    let u = lu.u();
    let scale = u.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let n = u.nrows();
    (0..n).any(|i| u[(i, i)].abs() <= scale * 1e-14)
}

/// Solves a general square system given row-major entries.
pub fn solve_dense(dim: usize, row_major: &[f64], rhs: &[f64]) -> Result<(Vec<f64>, bool)> {
    if row_major.len() != dim * dim {
        return Err(DiceError::ShapeMismatch(format!(
            "expected {} matrix entries, got {}",
            dim * dim,
            row_major.len()
        )));
    }
    let m = DMatrix::from_row_slice(dim, dim, row_major);
    let f = factorize_general(m)?;
    let x = f.solve(rhs)?;
    Ok((x, f.ridge_applied))
}

/// `R Rᵀ` for a matrix given by sparse rows.
pub fn gram_rows(rows: &[SparseRow], num_cols: usize) -> DMatrix<f64> {
    let n = rows.len();
    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); num_cols];
    for (i, row) in rows.iter().enumerate() {
        for &(c, v) in row {
            cols[c].push((i, v));
        }
    }
    let mut g = DMatrix::<f64>::zeros(n, n);
    for col in &cols {
        for &(i, vi) in col {
            for &(j, vj) in col {
                g[(i, j)] += vi * vj;
            }
        }
    }
    g
}

/// `R x` for sparse rows.
pub fn mul_rows(rows: &[SparseRow], x: &[f64]) -> Vec<f64> {
    rows.iter()
        .map(|row| row.iter().map(|&(c, v)| v * x[c]).sum())
        .collect()
}

/// `Rᵀ y` for sparse rows.
pub fn mul_rows_transposed(rows: &[SparseRow], y: &[f64], num_cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; num_cols];
    for (row, &yi) in rows.iter().zip(y) {
        for &(c, v) in row {
            out[c] += v * yi;
        }
    }
    out
}

/// Minimum-norm least-squares quantities for the row-sparse matrix `R`
/// (full row rank assumed, which the ridge fallback covers otherwise):
///
/// * `u` solving `min ‖Rᵀu − b‖²`, i.e. `(R Rᵀ) u = R b`;
/// * the factorization of `R Rᵀ` for later solves.
pub struct RowLeastSquares {
    pub factor: Factorized,
}

impl RowLeastSquares {
    pub fn new(rows: &[SparseRow], num_cols: usize) -> Result<Self> {
        let g = gram_rows(rows, num_cols);
        Ok(Self {
            factor: factorize_spd(g)?,
        })
    }

    /// Least-squares solution of `Rᵀ u ≈ b`.
    pub fn solve_transposed(&self, rows: &[SparseRow], b: &[f64]) -> Result<Vec<f64>> {
        let rb = mul_rows(rows, b);
        self.factor.solve(&rb)
    }

    /// Minimum-norm solution of `R x = y`, which is `Rᵀ (R Rᵀ)⁻¹ y`.
    pub fn min_norm(&self, rows: &[SparseRow], y: &[f64], num_cols: usize) -> Result<Vec<f64>> {
        let z = self.factor.solve(y)?;
        Ok(mul_rows_transposed(rows, &z, num_cols))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        let (x, ridge) = solve_dense(2, &[2.0, 1.0, 1.0, 3.0], &[3.0, 5.0]).unwrap();
        assert!(!ridge);
        assert!((x[0] - 0.8).abs() < 1e-12);
        assert!((x[1] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn singular_system_gets_ridge() {
        let (x, ridge) = solve_dense(2, &[1.0, 1.0, 1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!(ridge);
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn min_norm_of_wide_system() {
        // x0 + x1 = 2 has min-norm solution (1, 1).
        let rows = vec![vec![(0, 1.0), (1, 1.0)]];
        let ls = RowLeastSquares::new(&rows, 2).unwrap();
        let x = ls.min_norm(&rows, &[2.0], 2).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
        // Rᵀu ≈ (1, 3) in least squares: u = 2.
        let u = ls.solve_transposed(&rows, &[1.0, 3.0]).unwrap();
        assert!((u[0] - 2.0).abs() < 1e-12);
    }
}
