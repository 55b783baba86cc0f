//! Small dense linear algebra: one-sided Jacobi SVD and real modal matrices.

use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix has no complete eigenbasis (eigenvalue {re} + {im}i is defective)")]
    Defective { re: f64, im: f64 },
    #[error("eigen-decomposition failed to converge")]
    NoConvergence,
}

/// Singular values in descending order together with the leading singular pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularTriplet {
    pub values: Vec<f64>,
    pub u1: Vec<f64>,
    pub v1: Vec<f64>,
}

impl SingularTriplet {
    pub fn sigma_max(&self) -> f64 {
        self.values[0]
    }

    pub fn sigma_min(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// `(σ₁ − σ₂)/σ₁`, or 1 for 1×1 input.
    pub fn relative_gap(&self) -> f64 {
        match self.values.as_slice() {
            [s1, s2, ..] if *s1 > 0.0 => (s1 - s2) / s1,
            [_, _, ..] => 0.0,
            _ => 1.0,
        }
    }
}

/// One-sided (Hestenes) Jacobi SVD of a square matrix.
pub fn singular_triplet(m: &DMatrix<f64>) -> SingularTriplet {
    let n = m.ncols();
    let rows = m.nrows();
    let mut u = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);

    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    let up = u[(i, p)];
                    let uq = u[(i, q)];
                    alpha += up * up;
                    beta += uq * uq;
                    gamma += up * uq;
                }
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let up = u[(i, p)];
                    let uq = u[(i, q)];
                    u[(i, p)] = c * up - s * uq;
                    u[(i, q)] = s * up + c * uq;
                }
                for i in 0..n {
                    let vp = v[(i, p)];
                    let vq = v[(i, q)];
                    v[(i, p)] = c * vp - s * vq;
                    v[(i, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n).map(|j| u.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let lead = order[0];
    let values: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let (u1, v1) = if norms[lead] > 0.0 {
        (
            u.column(lead).iter().map(|x| x / norms[lead]).collect(),
            v.column(lead).iter().copied().collect(),
        )
    } else {
        let mut e1 = vec![0.0; rows];
        e1[0] = 1.0;
        let mut f1 = vec![0.0; n];
        f1[0] = 1.0;
        (e1, f1)
    };
    SingularTriplet { values, u1, v1 }
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_triplet(m).sigma_max()
}

/// Real modal matrix of `a`: one column per real eigenvector and a
/// `(Re v, Im v)` column pair per complex-conjugate eigenvalue pair.
///
/// Complex eigenvectors are phase-rotated so their real and imaginary parts are
/// orthogonal. The result is scaled to unit spectral norm.
pub fn real_modal_matrix(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let n = a.nrows();
    let eig = a.clone().complex_eigenvalues();
    if eig.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(LinalgError::NoConvergence);
    }
    let scale = a.abs().max().max(1.0);
    let cluster_tol = 1e-7 * scale;

    // distinct eigenvalues with multiplicities, upper half-plane only
    let mut clusters: Vec<(Complex<f64>, usize)> = Vec::new();
    for z in eig.iter() {
        if z.im < -cluster_tol {
            continue;
        }
        let z = if z.im.abs() <= cluster_tol {
            Complex::new(z.re, 0.0)
        } else {
            *z
        };
        match clusters.iter_mut().find(|(c, _)| (c - z).norm() <= cluster_tol) {
            Some((_, m)) => *m += 1,
            None => clusters.push((z, 1)),
        }
    }

    let mut columns: Vec<DVector<f64>> = Vec::with_capacity(n);
    for (lambda, mult) in clusters {
        if lambda.im == 0.0 {
            let shifted = a - DMatrix::identity(n, n) * lambda.re;
            let basis = real_null_space(&shifted, mult, scale)
                .ok_or(LinalgError::Defective { re: lambda.re, im: 0.0 })?;
            columns.extend(basis);
        } else {
            let ac: DMatrix<Complex<f64>> = a.map(|x| Complex::new(x, 0.0));
            let shifted = ac - DMatrix::identity(n, n) * lambda;
            let basis = complex_null_space(&shifted, mult, scale).ok_or(LinalgError::Defective {
                re: lambda.re,
                im: lambda.im,
            })?;
            for v in basis {
                let (re, im) = orthogonalized_parts(&v);
                columns.push(re);
                columns.push(im);
            }
        }
    }
    if columns.len() != n {
        return Err(LinalgError::NoConvergence);
    }
    let modal = DMatrix::from_columns(&columns);
    let sv = singular_triplet(&modal);
    if sv.sigma_min() <= 1e-10 * sv.sigma_max() {
        return Err(LinalgError::Defective {
            re: f64::NAN,
            im: f64::NAN,
        });
    }
    Ok(modal / sv.sigma_max())
}

fn real_null_space(m: &DMatrix<f64>, dim: usize, scale: f64) -> Option<Vec<DVector<f64>>> {
    let n = m.ncols();
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&x, &y| svd.singular_values[x].total_cmp(&svd.singular_values[y]));
    let tol = 1e-7 * scale;
    let basis: Vec<_> = idx
        .iter()
        .take(dim)
        .filter(|&&i| svd.singular_values[i] <= tol)
        .map(|&i| v_t.row(i).transpose().normalize())
        .collect();
    (basis.len() == dim).then_some(basis)
}

fn complex_null_space(
    m: &DMatrix<Complex<f64>>,
    dim: usize,
    scale: f64,
) -> Option<Vec<DVector<Complex<f64>>>> {
    let n = m.ncols();
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&x, &y| svd.singular_values[x].total_cmp(&svd.singular_values[y]));
    let tol = 1e-7 * scale;
    let basis: Vec<_> = idx
        .iter()
        .take(dim)
        .filter(|&&i| svd.singular_values[i] <= tol)
        .map(|&i| v_t.row(i).adjoint().normalize())
        .collect();
    (basis.len() == dim).then_some(basis)
}

fn orthogonalized_parts(v: &DVector<Complex<f64>>) -> (DVector<f64>, DVector<f64>) {
    let re: DVector<f64> = v.map(|z| z.re);
    let im: DVector<f64> = v.map(|z| z.im);
    let cross = re.dot(&im);
    let phi = -0.5 * (2.0 * cross).atan2(re.norm_squared() - im.norm_squared());
    let rot = Complex::from_polar(1.0, phi);
    let w = v.map(|z| z * rot);
    (w.map(|z| z.re), w.map(|z| z.im))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn identity_singular_values() {
        let s = singular_triplet(&DMatrix::identity(3, 3));
        assert_eq!(s.values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_singular_values() {
        let s = singular_triplet(&DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 2.0]));
        assert_eq!(s.values, vec![3.0, 2.0]);
        assert_relative_eq!(s.u1[0].abs(), 1.0);
        assert_relative_eq!(s.v1[0].abs(), 1.0);
        assert_eq!(s.u1[1], 0.0);
    }

    #[test]
    fn permuted_singular_values() {
        let s = singular_triplet(&DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 1.0, 0.0]));
        assert_relative_eq!(s.values[0], 2.0, epsilon = 1e-15);
        assert_relative_eq!(s.values[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn modal_matrix_of_damped_oscillator() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -4.0, -0.2]);
        let v = real_modal_matrix(&a).unwrap();
        assert_relative_eq!(spectral_norm(&v), 1.0, epsilon = 1e-12);
        // A V = V [[re, im], [-im, re]] for a complex pair
        let av = &a * &v;
        let block = v.clone().try_inverse().unwrap() * av;
        assert_relative_eq!(block[(0, 0)], -0.1, epsilon = 1e-10);
        assert_relative_eq!(block[(1, 1)], -0.1, epsilon = 1e-10);
        assert_relative_eq!(block[(0, 1)].abs(), (4.0f64 - 0.01).sqrt(), epsilon = 1e-10);
        assert_relative_eq!(block[(0, 1)], -block[(1, 0)], epsilon = 1e-10);
    }

    #[test]
    fn modal_matrix_of_repeated_real_eigenvalues() {
        let v = real_modal_matrix(&DMatrix::zeros(2, 2)).unwrap();
        assert_relative_eq!(spectral_norm(&v), 1.0, epsilon = 1e-12);
        let jordan = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(matches!(real_modal_matrix(&jordan), Err(LinalgError::Defective { .. })));
    }

    proptest! {
        #[test]
        fn jacobi_matches_reference(entries in proptest::collection::vec(-5.0f64..5.0, 9)) {
            let m = DMatrix::from_row_slice(3, 3, &entries);
            let s = singular_triplet(&m);
            let reference = m.clone().singular_values();
            let mut r: Vec<f64> = reference.iter().copied().collect();
            r.sort_by(|a, b| b.total_cmp(a));
            for (a, b) in s.values.iter().zip(&r) {
                prop_assert!((a - b).abs() <= 1e-10 * r[0].max(1.0));
            }
            prop_assert!(s.values.windows(2).all(|w| w[0] >= w[1]));
            let mv = &m * DVector::from_column_slice(&s.v1);
            for i in 0..3 {
                prop_assert!((mv[i] - s.values[0] * s.u1[i]).abs() <= 1e-12 * s.values[0].max(1e-300) + 1e-14);
            }
        }
    }
}
