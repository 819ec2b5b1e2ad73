//! UDAMA: two-stage unsupervised domain adaptation with coarse- and
//! fine-grained adversarial discriminators, for regression on wearable
//! sensor windows.
//!
//! The crate ships a minimal reverse-mode autodiff engine ([`numerics`]),
//! the adaptation network ([`model`]), the component losses ([`losses`]),
//! a synthetic silver/gold cohort generator with the raw-stream
//! preprocessing pipeline ([`datasynth`]), the two-stage training and
//! cross-validation protocol ([`training`]), evaluation metrics and
//! distribution diagnostics ([`eval`]), and the experiment CLI ([`cli`]).

pub mod cli;
pub mod datasynth;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
