pub mod autograd;
pub mod cascade;
pub mod cost;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod metrics;
pub mod params;
pub mod ranker;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
