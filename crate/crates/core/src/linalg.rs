//! Small fixed-size helpers for the 3×3 random-effects covariance.

use crate::real::Real;

/// Lower-triangular Cholesky factor of a symmetric positive-definite 3×3
/// matrix, or `None` when the matrix is not symmetric positive definite.
pub fn cholesky3<T: Real>(a: &[[T; 3]; 3]) -> Option<[[T; 3]; 3]> {
    let tol = T::lit(1e-10);
    for i in 0..3 {
        for j in 0..i {
            let scale = a[i][j].abs().max(a[j][i].abs()).max(T::one());
            if (a[i][j] - a[j][i]).abs() > tol * scale {
                return None;
            }
        }
    }
    let mut l = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(sum > T::zero()) || !sum.is_finite() {
                    return None;
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Some(l)
}

pub fn is_zero3<T: Real>(a: &[[T; 3]; 3]) -> bool {
    a.iter().flatten().all(|v| *v == T::zero())
}

pub fn identity3<T: Real>() -> [[T; 3]; 3] {
    let mut m = [[T::zero(); 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = T::one();
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_reproduces_matrix() {
        let a = [[4.0, 1.2, -0.4], [1.2, 2.0, 0.3], [-0.4, 0.3, 1.5]];
        let l = cholesky3(&a).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| l[i][k] * l[j][k]).sum();
                assert!((v - a[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_indefinite_and_asymmetric() {
        assert!(cholesky3(&[[1.0, 2.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).is_none());
        assert!(cholesky3(&[[1.0, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).is_none());
        assert!(cholesky3(&[[0.0f64; 3]; 3]).is_none());
    }
}
