//! Token-level detective reward modelling over a symbolic scene world.

pub mod correct;
pub mod error;
pub mod language;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod pipeline;
pub mod records;
pub mod scene;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
