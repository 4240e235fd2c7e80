//! Few-shot bioacoustic sound event detection toolkit.
//!
//! The crate covers the full pipeline: WAV decoding and resampling, acoustic
//! feature extraction (mel, log-mel, MFCC, delta-MFCC, PCEN and stacked
//! combinations), DCASE-style annotation parsing and episodic sampling, a
//! small convolutional embedding network trained as a prototypical network,
//! per-file 5-shot inference with negative hard sampling and optional
//! transductive adaptation, and event-based evaluation.

pub mod audio;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod inference;
pub mod nn;
pub mod protonet;
pub mod runner;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

/// Stable 64-bit FNV-1a hash used wherever reproducible seeds are derived
/// from structured inputs (run ids, file names, trial indices).
pub fn fnv1a64(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        // separator so ("ab","c") and ("a","bc") hash differently
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
