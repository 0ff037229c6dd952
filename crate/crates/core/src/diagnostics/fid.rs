use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::linalg::PSD_REJECT_TOL;
use crate::numerics::{eigh, gaussian_stats, sqrtm_psd, GaussianStats, RngStream, Tensor};

/// Fréchet distance between two Gaussians,
/// `‖m_a − m_b‖² + Tr(C_a + C_b − 2 (C_a C_b)^{1/2})`.
///
/// The cross term is evaluated as `Tr √(S C_b S)` with `S = √C_a`, which has
/// the same eigenvalues as `C_a C_b` but is symmetric. Small negative results
/// from round-off are clamped to zero; identical inputs give exactly zero.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.cov.shape() != [d, d] || b.cov.shape() != [d, d] {
        return Err(Error::Shape(format!("fid between dimensions {} and {}", a.dim(), b.dim())));
    }
    if a == b {
        return Ok(0.0);
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let s = sqrtm_psd(&a.cov)?;
    let m = s.matmul(&b.cov)?.matmul(&s)?;
    let sym = m.add(&m.transpose()?)?.scale(0.5);
    let eig = eigh(&sym)?;
    let top = eig.values.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    if let Some(&min) = eig.values.first() {
        if min < -PSD_REJECT_TOL * top {
            return Err(Error::NotPsd(min));
        }
    }
    let cross: f64 = eig.values.iter().map(|l| l.max(0.0).sqrt()).sum();
    let value = mean_term + a.cov.trace()? + b.cov.trace()? - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Penultimate-layer features of the reference model, `n × d_feat`.
pub fn features(extractor: &ModelParams, images: &Tensor) -> Result<Tensor> {
    extractor.extract_features(images)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpcFidConfig {
    /// Size of each real subset and of the synthetic subset.
    pub n_half: usize,
    pub resamples: usize,
}

impl Default for RpcFidConfig {
    fn default() -> Self {
        Self { n_half: 256, resamples: 4 }
    }
}

/// One class of an RPC-FID report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcFidRow {
    pub class: usize,
    /// Mean over resamples of `FID(X₁, synthetic)`.
    pub numerator: f64,
    /// Mean over resamples of `FID(X₂, X₃)`.
    pub denominator: f64,
    pub rpc_fid: f64,
    pub real_count: usize,
    pub synthetic_count: usize,
    pub resamples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcFidReport {
    pub rows: Vec<RpcFidRow>,
}

impl RpcFidReport {
    /// Class ids ordered by decreasing RPC-FID.
    pub fn ranking(&self) -> Vec<usize> {
        let mut rows: Vec<&RpcFidRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.rpc_fid.total_cmp(&a.rpc_fid).then(a.class.cmp(&b.class)));
        rows.iter().map(|r| r.class).collect()
    }

    pub fn get(&self, class: usize) -> Option<&RpcFidRow> {
        self.rows.iter().find(|r| r.class == class)
    }
}

/// Relative per-class FID of one class from its feature matrices.
///
/// Each resample draws `X₁` of `n_half` real rows and `n_half` synthetic rows
/// for the numerator, then a fresh split of the real rows into disjoint halves
/// `X₂`, `X₃` for the denominator. The ratio of the resample means is reported.
pub fn rpc_fid(
    class: usize,
    real: &Tensor,
    synthetic: &Tensor,
    cfg: &RpcFidConfig,
    rng: &mut RngStream,
) -> Result<RpcFidRow> {
    if real.rank() != 2 || synthetic.rank() != 2 || real.shape()[1] != synthetic.shape()[1] {
        return Err(Error::Shape(format!("feature matrices {:?} and {:?}", real.shape(), synthetic.shape())));
    }
    let d = real.shape()[1];
    let (n_real, n_syn, h) = (real.rows(), synthetic.rows(), cfg.n_half);
    if cfg.resamples == 0 {
        return Err(Error::pre("rpc_fid needs at least one resample"));
    }
    if h < d + 2 {
        return Err(Error::pre(format!("n_half = {h} is below the minimum d + 2 = {}", d + 2)));
    }
    if n_real < 2 * h || n_syn < h {
        return Err(Error::pre(format!(
            "class {class}: need at least {} real and {h} synthetic samples, have {n_real} and {n_syn}",
            2 * h
        )));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..cfg.resamples {
        let x1 = rng.choose_distinct(n_real, h);
        let s = rng.choose_distinct(n_syn, h);
        num += fid(&gaussian_stats(&real.select_rows(&x1))?, &gaussian_stats(&synthetic.select_rows(&s))?)?;
        let split = rng.choose_distinct(n_real, 2 * h);
        let (x2, x3) = split.split_at(h);
        den += fid(&gaussian_stats(&real.select_rows(x2))?, &gaussian_stats(&real.select_rows(x3))?)?;
    }
    let r = cfg.resamples as f64;
    let (numerator, denominator) = (num / r, den / r);
    if !(denominator > 0.0) {
        return Err(Error::Data(format!("class {class}: real-vs-real FID is zero")));
    }
    Ok(RpcFidRow {
        class,
        numerator,
        denominator,
        rpc_fid: numerator / denominator,
        real_count: n_real,
        synthetic_count: n_syn,
        resamples: cfg.resamples,
    })
}
