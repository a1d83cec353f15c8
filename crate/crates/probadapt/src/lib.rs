//! Probabilistic segmentation with self-training domain adaptation.
//!
//! The crate trains a probabilistic UNet on a labeled source domain and
//! adapts it to an unlabeled target domain with teacher–student
//! self-training. Teacher predictions are filtered by consensus response —
//! per-pixel agreement across latent samples — before they are used as
//! pseudo-labels. Everything runs on the CPU in `f64` with hand-written
//! backward passes, which keeps runs bit-reproducible and the gradients
//! checkable against finite differences.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod consensus;
pub mod data;
pub mod error;
pub mod image;
pub mod instanceseg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod runner;
pub mod selftrain;

pub use error::{Error, Result};
