pub mod backbone;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experts;
pub mod interpretability;
pub mod losses;
pub mod model;
pub mod prototypes;
pub mod nn;
pub mod rng;
pub mod training;
pub mod uncertainty;

pub use error::{HistoError, Result};
