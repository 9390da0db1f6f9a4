use std::path::Path;

use crate::attention::{AttnConfig, Conditioner};
use crate::error::Result;
use crate::ndcore::Rng;
use crate::network::checkpoint;
use crate::network::denoiser::{Denoiser, DenoiserConfig};
use crate::network::params::ParameterStore;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Frame extents `(W, H, D)`.
    pub extents: [usize; 3],
    pub attention: AttnConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: NoiseSchedule,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            extents: [16, 16, 8],
            attention: AttnConfig::default(),
            denoiser: DenoiserConfig::default(),
            schedule: NoiseSchedule::default(),
        }
    }
}

/// Conditioner and denoiser sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Sadm {
    pub config: ModelConfig,
    pub conditioner: Conditioner,
    pub denoiser: Denoiser,
    pub store: ParameterStore,
}

impl Sadm {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::stream(seed, 1);
        let mut store = ParameterStore::new();
        let conditioner = Conditioner::new(config.attention.clone(), config.extents, &mut store, &mut rng)?;
        let denoiser = Denoiser::new(config.denoiser.clone(), config.extents, &mut store, &mut rng)?;
        Ok(Sadm {
            config,
            conditioner,
            denoiser,
            store,
        })
    }

    /// Architecture from `config`, parameters and optimizer state from `path`.
    pub fn load(config: ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        checkpoint::load_into(&mut model.store, path)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save_checkpoint(&self.store, path)
    }
}
