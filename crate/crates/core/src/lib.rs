//! Structure-suppressed nodule extraction and dual-branch calcification
//! classification for chest X-ray patches.
//!
//! The pipeline has two stages. First, an inpainter trained on lesion-free
//! patches erases the nodule from the centre of a nodule patch; the residue
//! left by subtraction is denoised, binarized and intersected into a
//! *refined* nodule image. Second, two encoders read the raw and refined
//! patches and a fusion head classifies calcification from their pooled
//! features.
//!
//! Synthetic chest phantoms with ground-truth masks stand in for clinical
//! data, so every stage can be checked against an oracle.

pub mod augment;
pub mod error;
pub mod extraction;
pub mod fusion;
pub mod imaging;
pub mod inpainter;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod rng;

pub use error::{Error, Result};
pub use imaging::{Image, Mask};
