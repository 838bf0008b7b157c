//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &Mat) -> Vec<f64> {
    let s = symmetrize(m);
    let mut ev: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Spectral norm of a symmetric matrix (largest absolute eigenvalue).
pub fn sym_op_norm(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let ev = sym_eigenvalues(m);
    ev[0].abs().max(ev[ev.len() - 1].abs())
}

/// Spectral norm of a general matrix via its largest singular value.
pub fn op_norm(m: &Mat) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().singular_values().max()
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// Rejects matrices whose smallest eigenvalue is below `-rel_tol * max(trace, 1e-300)`.
pub fn check_psd(m: &Mat, rel_tol: f64) -> Result<()> {
    let tol = rel_tol * m.trace().abs().max(1e-300);
    let lo = min_eigenvalue(m);
    if lo < -tol {
        return Err(Error::KernelNotPsd { min_eig: lo, tol });
    }
    Ok(())
}

/// Inverse square root of a symmetric positive definite matrix, with eigenvalues
/// floored at `floor`.
pub fn inv_sqrt_spd(m: &Mat, floor: f64) -> Mat {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = eig.eigenvalues.map(|l| 1.0 / l.max(floor).sqrt());
    &eig.eigenvectors * Mat::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Symmetric square root of a positive semidefinite matrix (negative eigenvalues clipped).
pub fn sqrt_psd(m: &Mat) -> Mat {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * Mat::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Solves `a x = b` for symmetric positive definite `a`, falling back to LU.
pub fn solve_spd(a: &Mat, b: &Vector) -> Result<Vector> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    a.clone().lu().solve(b).ok_or(Error::NotPositiveDefinite)
}

pub fn inverse_spd(a: &Mat) -> Result<Mat> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.inverse());
    }
    a.clone().try_inverse().ok_or(Error::NotPositiveDefinite)
}

pub fn sup_norm(v: &Vector) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Membership matrix `P` with `P[i, colors[i]] = 1`.
pub fn membership(colors: &[usize], r: usize) -> Mat {
    let mut p = Mat::zeros(colors.len(), r);
    for (i, &c) in colors.iter().enumerate() {
        p[(i, c)] = 1.0;
    }
    p
}

/// Expands a block-level matrix to sample level: `out[i, j] = n[colors[i], colors[j]]`.
pub fn expand_blocks(n: &Mat, colors: &[usize]) -> Mat {
    let m = colors.len();
    Mat::from_fn(m, m, |i, j| n[(colors[i], colors[j])])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn op_norm_of_diagonal() {
        let m = Mat::from_diagonal(&Vector::from_vec(vec![1.0, -3.0, 2.0]));
        assert_abs_diff_eq!(sym_op_norm(&m), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(op_norm(&m), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn inverse_square_root_round_trip() {
        let a = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = inv_sqrt_spd(&a, 0.0);
        let id = &s * &a * &s;
        assert_abs_diff_eq!((id - Mat::identity(2, 2)).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn psd_check_rejects_indefinite() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(check_psd(&a, 1e-9).is_err());
        assert!(check_psd(&Mat::identity(3, 3), 1e-9).is_ok());
    }

    #[test]
    fn block_expansion_matches_membership_product() {
        let n = Mat::from_row_slice(2, 2, &[1.0, 0.25, 0.25, 0.5]);
        let colors = [0, 1, 1, 0];
        let p = membership(&colors, 2);
        let direct = &p * &n * p.transpose();
        assert_eq!(expand_blocks(&n, &colors), direct);
    }
}
