pub mod autodiff;
pub mod continual;
pub mod direction;
pub mod error;
pub mod experiment;
pub mod model;
pub mod rng;
pub mod safety;
pub mod selection;
pub mod training;
pub mod world;

pub use error::{Error, Result};
