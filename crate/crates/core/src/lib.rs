pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod corpus;
pub mod data;
pub mod envs;
pub mod error;
pub mod experiment;
pub mod fixture;
pub mod lora;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, LamoError, Result};
pub use params::WeightStore;
pub use tensor::{Scalar, Tensor};
