//! Seed derivation.
//!
//! A run has one master seed. Every random component draws from its own
//! stream, `derive(master, stream)`, computed with the SplitMix64 finalizer.

/// Weight initialization stream.
pub const STREAM_INIT: u64 = 1;
/// Epoch shuffling stream.
pub const STREAM_SHUFFLE: u64 = 2;
/// Sample selection for spectrum batches.
pub const STREAM_SPECTRUM: u64 = 3;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream))
}
