pub mod autograd;
pub mod data;
pub mod error;
pub mod experiments;
pub mod input_saliency;
pub mod nn;
pub mod profile_index;
pub mod saliency;
pub mod service_api;
pub mod seeds;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
