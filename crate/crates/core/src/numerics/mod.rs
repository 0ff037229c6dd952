//! Numeric substrate: tensors, symmetric linear algebra, Gaussian statistics,
//! seeded randomness and tensor serialization.

pub mod io;
pub mod linalg;
pub mod rng;
pub mod stats;
mod tensor;

pub use linalg::{eigh, sqrtm_psd, SymmetricEigen};
pub use rng::{mix_seed, splitmix64, RngStream};
pub use stats::{gaussian_stats, gaussian_stats_with_shrinkage, GaussianStats, COV_SHRINKAGE};
pub use tensor::Tensor;
