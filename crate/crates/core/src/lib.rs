pub mod backbone;
pub mod config;
pub mod decoder;
pub mod enhancer;
pub mod episode;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod layers;
pub mod losses;
pub mod matching;
pub mod model;
pub mod numeric;
pub mod par;
pub mod params;
pub mod pipeline;
pub mod prototypes;
pub mod train;

pub use error::{Error, Result};
