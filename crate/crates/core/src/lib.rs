//! Cross-modal masked autoencoder (M2AE) for paired ECG/PPG segments.
//!
//! The crate covers the whole pipeline at desk scale: synthetic paired data,
//! signal augmentation, a transformer masked autoencoder with complementary
//! cross-modal masking, reconstruction and four-view InfoNCE losses,
//! pretraining, fingerprint extraction and linear-probe evaluation. All model
//! and loss computations run on the reverse-mode engine in [`numeric`].

pub mod augment;
mod binio;
pub mod config;
pub mod error;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod probe;
pub mod rng;
pub mod signals;
pub mod training;

pub use error::{Error, Result};
