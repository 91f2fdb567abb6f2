//! Contrast codings for categorical factors.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContrastError {
    #[error("contrast of kind {kind:?} needs at least {min} levels, got {got}")]
    InvalidLevels {
        kind: ContrastKind,
        min: usize,
        got: usize,
    },
    #[error("contrast is not orthonormal and zero-sum (residual {0:.3e})")]
    NotOrthonormal(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContrastKind {
    /// Sum-to-zero coding, last level coded -1 everywhere.
    Sum,
    /// Orthonormal polynomial scores over equally spaced levels.
    OrthonormalPolynomial,
    /// Normalized Helmert coding; another orthonormal zero-sum basis.
    OrthonormalHelmert,
    /// Dummy coding of every level.
    Identity,
}

impl ContrastKind {
    pub fn is_orthonormal(&self) -> bool {
        matches!(self, Self::OrthonormalPolynomial | Self::OrthonormalHelmert)
    }
}

/// Level-by-column coding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastMatrix {
    pub kind: ContrastKind,
    pub values: DMatrix<f64>,
}

impl ContrastMatrix {
    pub fn n_levels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    /// Coding row for one level.
    pub fn row(&self, level: usize) -> Vec<f64> {
        self.values.row(level).iter().copied().collect()
    }
}

pub fn make_contrast(n_levels: usize, kind: ContrastKind) -> Result<ContrastMatrix, ContrastError> {
    let min = if kind == ContrastKind::Identity { 1 } else { 2 };
    if n_levels < min {
        return Err(ContrastError::InvalidLevels { kind, min, got: n_levels });
    }
    let n = n_levels;
    let values = match kind {
        ContrastKind::Identity => DMatrix::identity(n, n),
        ContrastKind::Sum => DMatrix::from_fn(n, n - 1, |i, j| {
            if i == n - 1 {
                -1.0
            } else if i == j {
                1.0
            } else {
                0.0
            }
        }),
        ContrastKind::OrthonormalPolynomial => orthonormal_polynomial(n),
        ContrastKind::OrthonormalHelmert => DMatrix::from_fn(n, n - 1, |i, j| {
            // Column j contrasts level j+1 against the mean of levels 0..=j.
            let k = (j + 1) as f64;
            let norm = (k * (k + 1.0)).sqrt();
            if i <= j {
                -1.0 / norm
            } else if i == j + 1 {
                k / norm
            } else {
                0.0
            }
        }),
    };
    Ok(ContrastMatrix { kind, values })
}

/// Gram-Schmidt on the centered powers of 1..n. Each column is a polynomial
/// with positive leading coefficient, so its last entry is positive.
fn orthonormal_polynomial(n: usize) -> DMatrix<f64> {
    let mean = (n as f64 + 1.0) / 2.0;
    let x: Vec<f64> = (1..=n).map(|i| i as f64 - mean).collect();
    let mut basis: Vec<Vec<f64>> = vec![vec![1.0 / (n as f64).sqrt(); n]];
    for deg in 1..n {
        let mut v: Vec<f64> = x.iter().map(|xi| xi.powi(deg as i32)).collect();
        // Two passes keep the columns orthogonal to machine precision.
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(b).for_each(|(vi, bi)| *vi -= dot * bi);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        basis.push(v);
    }
    DMatrix::from_fn(n, n - 1, |i, j| basis[j + 1][i])
}

/// Returns `a` with `C Cᵀ = I − a·11ᵀ`, fitted by least squares and checked
/// to 1e-10. For an orthonormal zero-sum basis of n levels, `C Cᵀ` is the
/// centering projector and `a = 1/n`.
pub fn contrast_gram_identity(c: &ContrastMatrix) -> Result<f64, ContrastError> {
    let n = c.n_levels();
    let g = &c.values * c.values.transpose();
    let resid_of = |a: f64| {
        let mut s = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 } - a;
                s = s.max((g[(i, j)] - target).abs());
            }
        }
        s
    };
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            sum += if i == j { 1.0 } else { 0.0 } - g[(i, j)];
        }
    }
    let a = sum / (n * n) as f64;
    let r = resid_of(a);
    if r > 1e-10 {
        return Err(ContrastError::NotOrthonormal(r));
    }
    Ok(a)
}

/// Kronecker product of coding rows, first factor varying slowest.
pub fn kron_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![1.0];
    for r in rows {
        let mut next = Vec::with_capacity(out.len() * r.len());
        for a in &out {
            for b in r {
                next.push(a * b);
            }
        }
        out = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn check_orthonormal(c: &ContrastMatrix) {
        let n = c.n_cols();
        let ctc = c.values.transpose() * &c.values;
        assert_abs_diff_eq!(ctc, DMatrix::identity(n, n), epsilon = 1e-12);
        for j in 0..n {
            assert_abs_diff_eq!(c.values.column(j).sum(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_level_polynomial() {
        let c = make_contrast(2, ContrastKind::OrthonormalPolynomial).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert_abs_diff_eq!(c.values[(0, 0)], -h, epsilon = 1e-15);
        assert_abs_diff_eq!(c.values[(1, 0)], h, epsilon = 1e-15);
    }

    #[test]
    fn polynomial_matches_reference_scores() {
        // Linear and quadratic scores for three levels.
        let c = make_contrast(3, ContrastKind::OrthonormalPolynomial).unwrap();
        let l = [-1.0, 0.0, 1.0].map(|v: f64| v / 2f64.sqrt());
        let q = [1.0, -2.0, 1.0].map(|v: f64| v / 6f64.sqrt());
        for i in 0..3 {
            assert_abs_diff_eq!(c.values[(i, 0)], l[i], epsilon = 1e-12);
            assert_abs_diff_eq!(c.values[(i, 1)], q[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn orthonormal_kinds_are_orthonormal() {
        for n in 2..9 {
            for kind in [ContrastKind::OrthonormalPolynomial, ContrastKind::OrthonormalHelmert] {
                check_orthonormal(&make_contrast(n, kind).unwrap());
            }
        }
    }

    #[test]
    fn sum_coding_convention() {
        let c = make_contrast(3, ContrastKind::Sum).unwrap();
        assert_eq!(c.values, DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, -1.0]));
    }

    #[test]
    fn identity_and_level_errors() {
        assert_eq!(make_contrast(1, ContrastKind::Identity).unwrap().n_cols(), 1);
        assert!(make_contrast(1, ContrastKind::Sum).is_err());
        assert!(make_contrast(0, ContrastKind::Identity).is_err());
    }

    #[test]
    fn gram_identity_is_one_over_n() {
        for n in 2..7 {
            let c = make_contrast(n, ContrastKind::OrthonormalPolynomial).unwrap();
            let a = contrast_gram_identity(&c).unwrap();
            assert_abs_diff_eq!(a, 1.0 / n as f64, epsilon = 1e-12);
            // Explicit residual check against the claimed form.
            let g = &c.values * c.values.transpose();
            let want = DMatrix::identity(n, n) - DMatrix::from_element(n, n, a);
            assert!((g - want).abs().max() < 1e-10);
        }
    }

    #[test]
    fn gram_identity_rejects_sum_coding() {
        let c = make_contrast(3, ContrastKind::Sum).unwrap();
        assert!(matches!(contrast_gram_identity(&c), Err(ContrastError::NotOrthonormal(_))));
    }

    #[test]
    fn kron_order() {
        assert_eq!(kron_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]), vec![3.0, 4.0, 6.0, 8.0]);
        assert_eq!(kron_rows(&[]), vec![1.0]);
    }
}
