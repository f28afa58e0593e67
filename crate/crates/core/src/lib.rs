//! Geometry-aware continual sim-to-real adaptation.
//!
//! A frozen diffusion policy trained in simulation is adapted to a shifted
//! "real" domain through a mixture of geometry-gated residual experts, while a
//! prioritized replay buffer keyed on expert activations limits forgetting.

pub mod config;
pub mod envsuite;
pub mod error;
pub mod experiment;
pub mod geomfeat;
pub mod geomoe;
pub mod geoper;
pub mod metrics;
pub mod pointcloud;
pub mod policy;
pub mod tinynn;

pub use error::{GecoError, Result};

/// Deterministically derives an independent stream seed from a base seed and a salt.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
