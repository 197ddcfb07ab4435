pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod probes;
pub mod seeding;
pub mod surgery;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
