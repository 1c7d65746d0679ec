//! Framework-free MLP engine with inhibitory forgetting gates.
//!
//! The crate covers the numeric engine ([`nn`], [`forgetting`],
//! [`regularizers`]), measurement ([`metrics`]), post-hoc analysis
//! ([`analysis`]), sequential multi-task learning ([`continual`]) and data
//! ingestion ([`data`]). Everything is `f64` and seeded through [`rng::Rng`].

pub mod analysis;
pub mod continual;
pub mod data;
pub mod error;
pub mod forgetting;
pub mod gradcheck;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod regularizers;
pub mod report;
pub mod rng;

pub use data::{Dataset, Samples};
pub use error::{Error, Result};
pub use forgetting::ForgettingLayerState;
pub use matrix::Matrix;
pub use nn::{MlpConfig, MlpModel};
pub use rng::Rng;
