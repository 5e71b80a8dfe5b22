pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod grid;
pub mod net;
pub mod scene;
pub mod synthesis;
pub mod toyscene;
pub mod training;

pub use error::{Error, Result};
