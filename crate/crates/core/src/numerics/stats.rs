use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Default diagonal shrinkage added to every covariance estimate.
pub const COV_SHRINKAGE: f64 = 1e-6;

/// Mean vector and covariance matrix of a feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// `d × d`, symmetric PSD.
    pub cov: Tensor,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn gaussian_stats(features: &Tensor) -> Result<GaussianStats> {
    gaussian_stats_with_shrinkage(features, COV_SHRINKAGE)
}

/// Column mean and unbiased covariance of an `n × d` feature matrix, plus `eps·I`.
///
/// Accumulation order is fixed (row-major, two-pass) so results are bit-stable.
pub fn gaussian_stats_with_shrinkage(features: &Tensor, eps: f64) -> Result<GaussianStats> {
    if features.rank() != 2 {
        return Err(Error::Shape(format!("features must be n×d, got {:?}", features.shape())));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if n < 2 {
        return Err(Error::pre(format!("covariance needs at least 2 samples, got {n}")));
    }
    let x = features.data();
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for ((c, &v), &m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom + if i == j { eps } else { 0.0 };
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(GaussianStats { mean, cov: Tensor::new(vec![d, d], cov)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn two_point_stats() {
        let f = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        let s = gaussian_stats(&f).unwrap();
        assert_eq!(s.mean, vec![1.0, 1.0]);
        assert_eq!(s.cov.data(), &[2.0 + COV_SHRINKAGE, 2.0, 2.0, 2.0 + COV_SHRINKAGE]);
    }

    #[test]
    fn repeated_vector_gives_shrinkage_only() {
        let f = Tensor::from_rows(&vec![vec![0.3, -1.0, 2.5]; 7]).unwrap();
        let s = gaussian_stats(&f).unwrap();
        let expected = Tensor::from_diag(&[COV_SHRINKAGE; 3]);
        assert!(s.cov.sub(&expected).unwrap().max_abs() < 1e-18);
    }

    #[test]
    fn standard_normal_concentrates() {
        let mut rng = RngStream::new(5, 0);
        let f = Tensor::from_fn(&[512, 4], |_| rng.normal());
        let s = gaussian_stats(&f).unwrap();
        let mnorm = s.mean.iter().map(|m| m * m).sum::<f64>().sqrt();
        assert!(mnorm < 0.2, "{mnorm}");
        let dev = s.cov.sub(&Tensor::identity(4)).unwrap().frobenius_norm();
        assert!(dev < 0.5, "{dev}");
    }

    #[test]
    fn single_sample_is_rejected() {
        assert!(gaussian_stats(&Tensor::zeros(&[1, 3])).is_err());
    }
}
