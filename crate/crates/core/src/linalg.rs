//! Small dense helpers on top of nalgebra.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

/// Eigenvalues of a symmetric matrix in ascending order.
pub(crate) fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut values: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    values.sort_by(f64::total_cmp);
    values
}

pub(crate) fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let scale = 1.0f64.max(m[(i, j)].abs()).max(m[(j, i)].abs());
            if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// A square system factored with partial pivoting, plus a 1-norm condition estimate.
pub(crate) struct Factored {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    condition: f64,
}

impl Factored {
    /// Factors `m`; `condition` is `f64::INFINITY` when a pivot vanishes.
    pub(crate) fn new(m: DMatrix<f64>) -> Self {
        let norm = one_norm(&m);
        let lu = m.lu();
        let condition = if lu.is_invertible() {
            norm * inverse_one_norm_estimate(&lu)
        } else {
            f64::INFINITY
        };
        Factored { lu, condition }
    }

    pub(crate) fn condition(&self) -> f64 {
        self.condition
    }

    /// Solves `mᵀ x = rhs` with the same factorization.
    pub(crate) fn solve_transposed(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        solve_transposed(&self.lu, rhs)
    }
}

/// Solves `mᵀ x = b` given the pivoted factorization `P m = L U`.
fn solve_transposed(
    lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    b: &DVector<f64>,
) -> Option<DVector<f64>> {
    let u = lu.u();
    let l = lu.l();
    let w = u.tr_solve_upper_triangular(b)?;
    let mut v = l.tr_solve_lower_triangular(&w)?;
    lu.p().inv_permute_rows(&mut v);
    Some(v)
}

/// Hager's estimate of `‖m⁻¹‖₁`; a lower bound that is almost always tight.
fn inverse_one_norm_estimate(lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> f64 {
    let n = lu.u().nrows();
    if n == 0 {
        return 0.0;
    }
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut estimate = 0.0;
    for _ in 0..5 {
        let Some(y) = lu.solve(&x) else {
            return f64::INFINITY;
        };
        estimate = y.iter().map(|v| v.abs()).sum::<f64>();
        let sign = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let Some(z) = solve_transposed(lu, &sign) else {
            return f64::INFINITY;
        };
        let (jmax, zmax) = z.iter().enumerate().fold((0, 0.0f64), |acc, (j, v)| {
            if v.abs() > acc.1 {
                (j, v.abs())
            } else {
                acc
            }
        });
        if zmax <= z.dot(&x) {
            break;
        }
        x.fill(0.0);
        x[jmax] = 1.0;
    }
    estimate
}
