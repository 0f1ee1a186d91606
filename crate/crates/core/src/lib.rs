pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod imaging;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod spectral;
pub mod tabular;
pub mod tape;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Ablation, ModelConfig};
pub use error::{Error, Result};
pub use model::{InputDims, ModelInput, Mstnet, Normalizer};
pub use tape::{Graph, Var};
pub use tensor::{Real, Tensor};
