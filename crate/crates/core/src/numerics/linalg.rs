//! Symmetric eigendecomposition (cyclic Jacobi) and the PSD matrix square root.

use super::Tensor;
use crate::error::{Error, Result};

/// Relative tolerance for the symmetry precondition.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Eigenvalues below `-PSD_REJECT_TOL * max(1, |λ|max)` make [`sqrtm_psd`] fail;
/// smaller negative values are round-off and are clamped to zero.
pub const PSD_REJECT_TOL: f64 = 1e-6;

const MAX_SWEEPS: usize = 100;

/// Result of [`eigh`]: `values` ascending, `vectors` holds the matching
/// orthonormal eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Tensor,
}

impl SymmetricEigen {
    /// Rebuilds `Q diag(f(λ)) Qᵀ`.
    pub fn recompose_with(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let n = self.values.len();
        let q = self.vectors.data();
        let fl: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let mut out = Tensor::zeros(&[n, n]);
        let o = out.data_mut();
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += q[i * n + k] * fl[k] * q[j * n + k];
                }
                o[i * n + j] = acc;
                o[j * n + i] = acc;
            }
        }
        out
    }
}

/// Checks squareness and symmetry within [`SYMMETRY_TOL`] relative to the largest entry.
pub fn check_symmetric(a: &Tensor) -> Result<usize> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::pre(format!("expected square matrix, got shape {:?}", a.shape())));
    }
    let n = a.shape()[0];
    let scale = a.max_abs().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (a.at2(i, j) - a.at2(j, i)).abs();
            if d > SYMMETRY_TOL * scale {
                return Err(Error::pre(format!(
                    "matrix not symmetric: |a[{i},{j}] - a[{j},{i}]| = {d:e}"
                )));
            }
        }
    }
    Ok(n)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
pub fn eigh(a: &Tensor) -> Result<SymmetricEigen> {
    let n = check_symmetric(a)?;
    // work on the symmetrised copy so tiny asymmetries do not bias the result
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a.at2(i, j) + a.at2(j, i));
        }
    }
    let mut v = Tensor::identity(n).into_data();

    let total: f64 = m.iter().map(|x| x * x).sum::<f64>();
    for _sweep in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off <= f64::EPSILON * f64::EPSILON * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;

                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].total_cmp(&m[j * n + j]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = Tensor::zeros(&[n, n]);
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors.set2(row, col, v[row * n + src]);
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Principal square root of a symmetric positive semi-definite matrix.
pub fn sqrtm_psd(a: &Tensor) -> Result<Tensor> {
    let eig = eigh(a)?;
    let scale = eig.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if let Some(&min) = eig.values.first() {
        if min < -PSD_REJECT_TOL * scale {
            return Err(Error::NotPsd(min));
        }
    }
    Ok(eig.recompose_with(|l| l.max(0.0).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn random_symmetric(n: usize, rng: &mut RngStream) -> Tensor {
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in i..n {
                let x = rng.normal();
                a.set2(i, j, x);
                a.set2(j, i, x);
            }
        }
        a
    }

    fn reconstruction_error(a: &Tensor, e: &SymmetricEigen) -> f64 {
        let r = e.recompose_with(|l| l);
        r.sub(a).unwrap().frobenius_norm() / a.frobenius_norm().max(1e-300)
    }

    fn orthonormality_error(q: &Tensor) -> f64 {
        let qtq = q.transpose().unwrap().matmul(q).unwrap();
        qtq.sub(&Tensor::identity(q.shape()[0])).unwrap().max_abs()
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let e = eigh(&Tensor::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_is_axis_aligned() {
        let e = eigh(&Tensor::from_diag(&[5.0, 2.0])).unwrap();
        assert_eq!(e.values, vec![2.0, 5.0]);
        // eigenvector for 2 is e_2, for 5 is e_1
        assert_eq!(e.vectors.at2(1, 0).abs(), 1.0);
        assert_eq!(e.vectors.at2(0, 1).abs(), 1.0);
    }

    #[test]
    fn random_8x8_reconstructs() {
        let mut rng = RngStream::new(11, 0);
        let a = random_symmetric(8, &mut rng);
        let e = eigh(&a).unwrap();
        assert!(reconstruction_error(&a, &e) < 1e-8);
        assert!(orthonormality_error(&e.vectors) < 1e-8);
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn reconstructs_up_to_64() {
        let mut rng = RngStream::new(12, 0);
        for n in [1, 2, 5, 17, 33, 64] {
            let a = random_symmetric(n, &mut rng);
            let e = eigh(&a).unwrap();
            assert!(reconstruction_error(&a, &e) < 1e-8, "n={n}");
            assert!(orthonormality_error(&e.vectors) < 1e-8, "n={n}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(eigh(&Tensor::zeros(&[2, 3])), Err(Error::Precondition(_))));
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.1, 1.0]]).unwrap();
        assert!(matches!(eigh(&a), Err(Error::Precondition(_))));
    }

    #[test]
    fn sqrtm_closed_forms() {
        let r = sqrtm_psd(&Tensor::from_diag(&[4.0, 4.0])).unwrap();
        assert!(r.sub(&Tensor::from_diag(&[2.0, 2.0])).unwrap().max_abs() < 1e-15);
        let z = sqrtm_psd(&Tensor::zeros(&[3, 3])).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn sqrtm_rotated_spectrum() {
        // Q diag(1, 9) Qᵀ with a 30 degree rotation
        let (c, s) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
        let q = Tensor::from_rows(&[vec![c, -s], vec![s, c]]).unwrap();
        let a = q
            .matmul(&Tensor::from_diag(&[1.0, 9.0]))
            .unwrap()
            .matmul(&q.transpose().unwrap())
            .unwrap();
        let r = sqrtm_psd(&a).unwrap();
        let ev = eigh(&r).unwrap().values;
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sqrtm_rejects_negative_definite() {
        let a = Tensor::from_diag(&[1.0, -0.5]);
        assert!(matches!(sqrtm_psd(&a), Err(Error::NotPsd(_))));
        // tiny negative round-off is clamped
        let b = Tensor::from_diag(&[1.0, -1e-12]);
        assert!(sqrtm_psd(&b).is_ok());
    }
}
