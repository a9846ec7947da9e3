//! Multimodal optical-SAR change detection.
//!
//! A weight-shared encoder with per-stage mixture-of-experts layers runs over
//! an optical path, a SAR path and (during training only) an
//! optical-to-SAR bridge path fed with speckled copies of the optical input.
//! Bridge features are pulled towards both real paths by an L1
//! self-distillation term added to pixelwise binary cross-entropy.

mod error;

pub mod checkpoint;
pub mod datakit;
pub mod gatelog;
pub mod kernels;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod moe;
pub mod network;
pub mod params;
pub mod speckle;
pub mod trainer;

pub use candle_core::DType;
pub use error::{Error, Result};
pub use ndarray;

/// Mixes a base seed with a sequence of counters (splitmix64 finalizer).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut state = base ^ 0x9e37_79b9_7f4a_7c15;
    for p in parts {
        state = state.wrapping_add(*p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}
