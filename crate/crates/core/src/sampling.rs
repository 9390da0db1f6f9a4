//! Guided ancestral sampling and autoregressive sequence completion.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::forward::{eps_to_x, posterior_coeffs};
use crate::ndcore::{Rng, Tensor};
use crate::network::Sadm;
use crate::schedule::{step_grid, NoiseSchedule};
use crate::sequence::{validate_partition, IndexPartition, LongitudinalVolume};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    /// Number of reverse steps `T`.
    pub steps: usize,
    /// Guidance strength `w`.
    pub guidance: f64,
    /// Variance interpolation `v` between `σ̃²_{s|t}` (0) and `σ²_{t|s}` (1).
    pub v: f64,
    pub seed: u64,
    /// Clamp the final output to `[0, 1]`.
    pub clamp: bool,
    /// Add noise on the last step as well (the literal reverse transition).
    pub final_noise: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 1000,
            guidance: 0.1,
            v: 0.3,
            seed: 0,
            clamp: true,
            final_noise: false,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sample.T must be at least 1".into()));
        }
        if !(self.guidance.is_finite() && self.guidance >= 0.0) {
            return Err(Error::Config(format!("sample.w must be >= 0, got {}", self.guidance)));
        }
        if !(0.0..=1.0).contains(&self.v) {
            return Err(Error::Config(format!("sample.v must lie in [0, 1], got {}", self.v)));
        }
        Ok(())
    }
}

/// Anything that predicts noise from `(z_t, c, λ_t)`.
pub trait EpsModel {
    fn predict_eps(&self, z: &Tensor, c: &Tensor, lambda: f64) -> Result<Tensor>;
}

/// An [`EpsModel`] that can also summarize a frame prefix into `c`.
pub trait SequenceModel: EpsModel {
    fn condition(&self, prefix: &[Tensor]) -> Result<Tensor>;
}

impl EpsModel for Sadm {
    fn predict_eps(&self, z: &Tensor, c: &Tensor, lambda: f64) -> Result<Tensor> {
        self.denoiser.predict(&self.store, z, c, lambda)
    }
}

impl SequenceModel for Sadm {
    fn condition(&self, prefix: &[Tensor]) -> Result<Tensor> {
        self.conditioner.condition_value(&self.store, prefix)
    }
}

/// `ε̃ = (1+w)·ε̂(z, c) − w·ε̂(z, ∅)`.
///
/// With `w = 0`, or when `c` is already the zero tensor, the two terms
/// coincide and the single conditional evaluation is returned unchanged.
pub fn guided_eps(model: &impl EpsModel, z: &Tensor, c: &Tensor, lambda: f64, w: f64) -> Result<Tensor> {
    if z.shape() != c.shape() {
        return Err(Error::shape("guided_eps", z.shape(), c.shape()));
    }
    let cond = model.predict_eps(z, c, lambda)?;
    if w == 0.0 || c.is_zero() {
        return Ok(cond);
    }
    let uncond = model.predict_eps(z, &Tensor::zeros(c.shape()), lambda)?;
    cond.zip_map(&uncond, |a, b| (1.0 + w) * a - w * b)
}

/// Draw one frame from `z_1 ~ N(0, I)` down to `t = 0`.
pub fn ancestral_sample(
    model: &impl EpsModel,
    c: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut z = Tensor::randn(c.shape(), rng);
    for (s, t) in step_grid(cfg.steps)? {
        let lambda = schedule.lambda(t)?;
        let eps = guided_eps(model, &z, c, lambda, cfg.guidance)?;
        let x = eps_to_x(schedule, &z, &eps, t)?;
        let coeffs = posterior_coeffs(schedule, s, t, cfg.v)?;
        let mean = coeffs.mean(&z, &x)?;
        z = if s == 0.0 && !cfg.final_noise {
            mean
        } else {
            let sd = coeffs.var_interp.sqrt();
            let noise = Tensor::randn(c.shape(), rng);
            mean.zip_map(&noise, |m, n| m + sd * n)?
        };
        if !z.is_finite() {
            return Err(Error::NonFinite(format!(
                "sampler state at step s = {s}, t = {t} (λ_t = {lambda}, |ε̃|∞ = {})",
                eps.max_abs()
            )));
        }
    }
    Ok(if cfg.clamp { z.clamp(0.0, 1.0) } else { z })
}

/// Frames produced by [`autoregressive_sample`], keyed by 1-based index.
#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub missing: Vec<(usize, Tensor)>,
    pub future: Vec<(usize, Tensor)>,
}

impl Completion {
    pub fn frame(&self, index: usize) -> Option<&Tensor> {
        self.missing
            .iter()
            .chain(&self.future)
            .find(|(i, _)| *i == index)
            .map(|(_, f)| f)
    }

    pub fn len(&self) -> usize {
        self.missing.len() + self.future.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Walk `1..=L`, appending observed frames and generating every other one
/// from the prefix accumulated so far.
pub fn autoregressive_sample(
    model: &impl SequenceModel,
    schedule: &NoiseSchedule,
    v: &LongitudinalVolume,
    p: &IndexPartition,
    cfg: &SampleConfig,
    rng: &mut Rng,
) -> Result<Completion> {
    validate_partition(p, v.len())?;
    let mut queue: VecDeque<usize> = p.cond.iter().copied().collect();
    let mut prefix: Vec<Tensor> = Vec::with_capacity(v.len());
    let mut out = Completion {
        missing: Vec::new(),
        future: Vec::new(),
    };
    for i in 1..=v.len() {
        if p.cond.contains(&i) {
            let k = queue.pop_front().expect("ordered conditioning queue");
            if !v.is_present(k) {
                return Err(Error::invalid(
                    "autoregressive_sample",
                    format!("conditioning frame {k} is not present in the input"),
                ));
            }
            prefix.push(v.frame(k).clone());
        } else {
            let c = model.condition(&prefix)?;
            let x = ancestral_sample(model, &c, schedule, cfg, rng)?;
            prefix.push(x.clone());
            if p.missing.contains(&i) {
                out.missing.push((i, x));
            } else {
                out.future.push((i, x));
            }
        }
    }
    Ok(out)
}
