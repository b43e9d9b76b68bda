//! Reinforcement-learning defect localization on line-space SEM-like images.
//!
//! The crate is organized bottom-up:
//!
//! 1. [`imaging`] grayscale raster primitives (crop, bilinear resize, cross masking, PNG I/O).
//! 2. [`geometry`] bounding boxes, IoU and the nine box-transform actions.
//! 3. [`synthgen`] procedural line-space images with injected defects and manifests.
//! 4. [`features`] frozen feature extractors and the external embedding protocol.
//! 5. [`qnet`] a small MLP with backprop, Adam, Huber TD updates and checkpoints.
//! 6. [`env`] the localization MDP: state construction, rewards, multi-object masking.
//! 7. [`agent`] DQN training (epsilon-greedy + replay) and greedy inference.
//! 8. [`eval`] AP@0.5 per class, mAP, steps/image and Spearman correlation.
//! 9. [`run`] and [`render`] run directories, benchmark sweeps and trace rendering.

pub mod agent;
pub mod env;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod imaging;
pub mod qnet;
pub mod render;
pub mod run;
pub mod synthgen;

pub use error::{Error, Result};
pub use geometry::{Action, BBox};
pub use imaging::GrayImage;

/// Side length of the square raster fed to feature extractors.
pub const STATE_SIZE: usize = 224;

/// Derives an independent 64-bit seed from a master seed and a stream index.
///
/// SplitMix64 finalizer; used wherever per-item seeds must not depend on
/// iteration order.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
