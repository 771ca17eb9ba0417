pub mod autodiff;
pub mod config;
pub mod constraints;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod targets;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{MlpConfig, ParamSet};
pub use tensor::Tensor;
