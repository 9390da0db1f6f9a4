//! Parameters, optimizers, checkpoints and the noise-prediction network.

pub mod checkpoint;
pub mod denoiser;
pub mod layers;
pub mod optim;
pub mod params;
mod sadm;

pub use checkpoint::{load_checkpoint, load_into, save_checkpoint};
pub use denoiser::{Denoiser, DenoiserConfig};
pub use optim::{update, Optimizer};
pub use params::{ParamId, Parameter, ParameterStore};
pub use sadm::{ModelConfig, Sadm};
