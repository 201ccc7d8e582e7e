//! Dense least-squares helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Relative pivot size below which a column-equilibrated design is treated
/// as rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Weighted least squares `argmin_b Σ w_i (y_i - x_i'b)^2` via a QR
/// factorisation of the column-equilibrated, row-weighted design.
///
/// Returns `None` when the design is rank deficient or a weight is negative.
pub fn weighted_least_squares(
    design: &DMatrix<f64>,
    response: &[f64],
    weights: Option<&[f64]>,
) -> Option<DVector<f64>> {
    let (n, p) = design.shape();
    if n < p || response.len() != n || p == 0 {
        return None;
    }
    let mut xw = design.clone();
    let mut yw = DVector::from_column_slice(response);
    if let Some(w) = weights {
        if w.len() != n || w.iter().any(|&wi| !(wi >= 0.0)) {
            return None;
        }
        for i in 0..n {
            let s = w[i].sqrt();
            xw.row_mut(i).scale_mut(s);
            yw[i] *= s;
        }
    }
    let mut scale = Vec::with_capacity(p);
    for j in 0..p {
        let norm = xw.column(j).norm();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        scale.push(norm);
        xw.column_mut(j).unscale_mut(norm);
    }
    let qr = xw.qr();
    let r = qr.r();
    if (0..p).any(|j| r[(j, j)].abs() <= RANK_TOL) {
        return None;
    }
    let qty = qr.q().transpose() * yw;
    let b = r.solve_upper_triangular(&qty)?;
    Some(DVector::from_iterator(p, (0..p).map(|j| b[j] / scale[j])))
}

/// Solve a symmetric positive definite system by Cholesky.
pub fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = a.cholesky()?;
    Some(chol.solve(b))
}

/// Inverse of a symmetric positive definite matrix.
pub fn inverse_spd(a: DMatrix<f64>) -> Option<DMatrix<f64>> {
    Some(a.cholesky()?.inverse())
}

/// Stack rows into a design matrix, optionally prepending an intercept column.
pub fn design_matrix<'a, I>(rows: I, ncols: usize, intercept: bool) -> DMatrix<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let offset = usize::from(intercept);
    let mut data = Vec::new();
    let mut n = 0;
    for row in rows {
        debug_assert_eq!(row.len(), ncols);
        if intercept {
            data.push(1.0);
        }
        data.extend_from_slice(row);
        n += 1;
    }
    DMatrix::from_row_slice(n, ncols + offset, &data)
}
