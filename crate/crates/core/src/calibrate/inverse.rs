use nalgebra::DMatrix;

use crate::data::validate_noise_matrix;
use crate::error::{Error, Result};

/// Pivots smaller than this in absolute value make a matrix singular.
pub const PIVOT_EPS: f64 = 1e-12;
/// Condition estimates above this are reported as ill-conditioned.
pub const CONDITION_LIMIT: f64 = 1e10;

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedNoise {
    pub p_inverse: DMatrix<f64>,
    /// `||P||_1 * ||P^-1||_1`.
    pub condition_estimate: f64,
    /// The inverse came from the closed form for uniform noise.
    pub closed_form: bool,
}

impl InvertedNoise {
    pub fn is_ill_conditioned(&self) -> bool {
        self.condition_estimate > CONDITION_LIMIT
    }

    /// Warning-level check; callers decide whether to stop.
    pub fn check_conditioning(&self) -> Result<()> {
        if self.is_ill_conditioned() {
            Err(Error::IllConditioned {
                condition: self.condition_estimate,
            })
        } else {
            Ok(())
        }
    }
}

fn norm_1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Noise level of a matrix of the form `(1 - eps) I + (eps / k) 1 1^T`.
fn uniform_epsilon(m: &DMatrix<f64>) -> Option<f64> {
    const TOL: f64 = 1e-14;
    let k = m.nrows();
    let off = m[(0, 1)];
    let diag = m[(0, 0)];
    let uniform = (0..k).all(|i| {
        (0..k).all(|j| {
            let want = if i == j { diag } else { off };
            (m[(i, j)] - want).abs() <= TOL
        })
    });
    if !uniform {
        return None;
    }
    let epsilon = off * k as f64;
    ((1.0 - epsilon + off - diag).abs() <= TOL && (0.0..1.0).contains(&epsilon)).then_some(epsilon)
}

/// `(1 / (1 - eps)) I - (eps / ((1 - eps) k)) 1 1^T`.
fn uniform_inverse(epsilon: f64, k: usize) -> DMatrix<f64> {
    let scale = 1.0 / (1.0 - epsilon);
    let off = -epsilon / ((1.0 - epsilon) * k as f64);
    DMatrix::from_fn(k, k, |i, j| if i == j { scale + off } else { off })
}

/// Inverse of any square matrix by LU with partial pivoting, with the
/// uniform-noise closed form as a fast path.
pub fn invert_matrix(m: &DMatrix<f64>) -> Result<InvertedNoise> {
    let k = m.nrows();
    if k != m.ncols() || k == 0 {
        return Err(Error::InvalidNoiseMatrix(format!(
            "matrix is {}x{}, not square",
            k,
            m.ncols()
        )));
    }
    let (p_inverse, closed_form) = match (k >= 2).then(|| uniform_epsilon(m)).flatten() {
        Some(epsilon) => (uniform_inverse(epsilon, k), true),
        None => {
            let lu = m.clone().lu();
            let u = lu.u();
            if let Some(pivot) = u.diagonal().iter().copied().find(|p| p.abs() < PIVOT_EPS) {
                return Err(Error::SingularMatrix { pivot });
            }
            let inv = lu
                .try_inverse()
                .ok_or(Error::SingularMatrix { pivot: 0.0 })?;
            (inv, false)
        }
    };
    Ok(InvertedNoise {
        condition_estimate: norm_1(m) * norm_1(&p_inverse),
        p_inverse,
        closed_form,
    })
}

/// Inverse of a row-stochastic noise transition matrix.
pub fn invert_noise_matrix(p: &DMatrix<f64>) -> Result<InvertedNoise> {
    validate_noise_matrix(p)?;
    invert_matrix(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{uniform_noise_as_matrix, NoiseModel};
    use rand::{Rng, SeedableRng};

    fn max_dev_from_identity(p: &DMatrix<f64>, inv: &DMatrix<f64>) -> f64 {
        let k = p.nrows();
        (p * inv - DMatrix::<f64>::identity(k, k)).abs().max()
    }

    #[test]
    fn identity_inverts_to_identity() {
        let id = DMatrix::<f64>::identity(4, 4);
        let inv = invert_noise_matrix(&id).unwrap();
        assert_eq!(inv.p_inverse, id);
        assert_eq!(inv.condition_estimate, 1.0);
    }

    #[test]
    fn uniform_two_class_closed_form() {
        let p = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]);
        let inv = invert_noise_matrix(&p).unwrap();
        assert!(inv.closed_form);
        let want = DMatrix::from_row_slice(2, 2, &[1.125, -0.125, -0.125, 1.125]);
        assert!((inv.p_inverse - want).abs().max() < 1e-12);
    }

    #[test]
    fn closed_form_agrees_with_lu() {
        for (eps, k) in [(0.2, 2), (0.1, 10), (0.5, 7), (0.9, 3)] {
            let NoiseModel::General { matrix } = uniform_noise_as_matrix(eps, k).unwrap() else {
                unreachable!()
            };
            let closed = invert_noise_matrix(&matrix).unwrap();
            assert!(closed.closed_form);
            let lu = matrix.clone().lu().try_inverse().unwrap();
            assert!((closed.p_inverse.clone() - lu).abs().max() < 1e-10);
            assert!(max_dev_from_identity(&matrix, &closed.p_inverse) < 1e-12);
        }
    }

    #[test]
    fn random_diagonally_dominant_matrices_multiply_back() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let k = 5;
            let mut p = DMatrix::<f64>::zeros(k, k);
            for i in 0..k {
                let mut row: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
                row[i] += k as f64;
                let s: f64 = row.iter().sum();
                for j in 0..k {
                    p[(i, j)] = row[j] / s;
                }
            }
            let inv = invert_noise_matrix(&p).unwrap();
            assert!(!inv.closed_form);
            assert!(max_dev_from_identity(&p, &inv.p_inverse) < 1e-8);
            assert!(!inv.is_ill_conditioned());
        }
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let p = DMatrix::from_row_slice(3, 3, &[0.5, 0.5, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            invert_noise_matrix(&p).unwrap_err(),
            Error::SingularMatrix { .. }
        ));
        let half = DMatrix::from_element(2, 2, 0.5);
        assert!(matches!(
            invert_noise_matrix(&half).unwrap_err(),
            Error::SingularMatrix { .. }
        ));
    }

    #[test]
    fn near_singular_matrix_is_flagged() {
        let d = 1e-11;
        let p = DMatrix::from_row_slice(2, 2, &[0.5 + d, 0.5 - d, 0.5 - d, 0.5 + d]);
        match invert_noise_matrix(&p) {
            Ok(inv) => assert!(matches!(
                inv.check_conditioning(),
                Err(Error::IllConditioned { .. })
            )),
            Err(e) => assert!(matches!(e, Error::SingularMatrix { .. })),
        }
        // Same near-singularity without the uniform structure goes through LU.
        let p = DMatrix::from_row_slice(
            3,
            3,
            &[0.5 + d, 0.5 - d, 0.0, 0.5 - d, 0.5 + d, 0.0, 0.1, 0.2, 0.7],
        );
        let inv = invert_noise_matrix(&p).unwrap();
        assert!(!inv.closed_form);
        assert!(inv.check_conditioning().is_err());
    }

    #[test]
    fn non_square_is_rejected() {
        let p = DMatrix::from_row_slice(2, 3, &[0.5, 0.5, 0.0, 0.0, 0.5, 0.5]);
        assert!(matches!(
            invert_noise_matrix(&p).unwrap_err(),
            Error::InvalidNoiseMatrix(_)
        ));
    }
}
