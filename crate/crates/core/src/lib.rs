//! Switching-energy model of a 64x64 weight-stationary systolic array and
//! energy-prioritized, layer-wise weight-set restriction for 8-bit CNNs.
//!
//! The pipeline, bottom-up:
//!
//! - [`mac_sim`]: bit-level MAC datapath; toggle counts are the energy proxy.
//! - [`transitions`]: MSB / Hamming-weight grouping of 22-bit partial sums,
//!   per-layer transition statistics and Markov trace synthesis.
//! - [`energy_model`]: per-weight power tables and tile / layer energies.
//! - [`qnn`]: exact integer inference, model and dataset files, pruning,
//!   projection and bias calibration.
//! - [`selection`]: safe initial candidate set and greedy backward elimination.
//! - [`scheduler`]: energy-share ordering and per-layer configuration search.
//! - [`cli`]: the `wselect` command-line driver.

pub mod cli;
pub mod energy_model;
pub mod error;
pub mod mac_sim;
pub mod qnn;
pub mod scheduler;
pub mod selection;
pub mod transitions;

pub use error::{Error, Result};

/// Tool version embedded in every output file.
pub const TOOL_VERSION: &str = concat!("wselect ", env!("CARGO_PKG_VERSION"));

/// Mixes a base seed with a tag (splitmix64 finalizer) so that derived
/// streams are independent of iteration or thread order.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
