//! Long-tail vehicle trajectory prediction at desk scale: a dual-query
//! transformer forecaster with deviation-feature fusion, a tail-score
//! pipeline (difficulty + spatial/temporal rarity), a training loop, and
//! displacement-metric evaluation with tail-sliced reporting.

pub mod autodiff;
pub mod deviation;
pub mod error;
pub mod fpca;
pub mod gmm;
pub mod gradcheck;
pub mod kalman;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scene;
pub mod synth;
pub mod tailscore;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
