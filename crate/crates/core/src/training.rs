//! Noise-prediction training with conditioning dropout.

use std::path::Path;

use crate::error::{Error, Result};
use crate::forward::marginal_with_noise;
use crate::ndcore::{Rng, Tape, Tensor, Var};
use crate::network::{optim, save_checkpoint, Optimizer, ParameterStore, Sadm};
use crate::sequence::{build_masked_sequence, random_partition, sample_training_target, IndexPartition, LongitudinalVolume};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Probability of replacing `c` by the zero tensor.
    pub p_uncond: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub ckpt_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            p_uncond: 0.1,
            steps: 1000,
            lr: 1e-4,
            batch: 1,
            seed: 0,
            optimizer: Optimizer::default(),
            ckpt_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!("train.p_uncond must lie in [0, 1], got {}", self.p_uncond)));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("train.steps and train.batch must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One row of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub t: f64,
    /// `false` when the conditioning signal was dropped.
    pub keep: bool,
}

/// A recorded loss term and the draws that produced it.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: Var,
    pub target: usize,
    pub t: f64,
    pub lambda: f64,
    pub keep: bool,
    pub eps: Tensor,
}

/// `mean((ε̂ − ε)²)`.
pub fn noise_prediction_loss(tape: &mut Tape, eps_hat: Var, eps: &Tensor) -> Result<Var> {
    let e = tape.constant(eps.clone());
    let d = tape.sub(eps_hat, e)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Predicts noise on the tape; implemented by the denoiser and by test hooks.
pub trait NoisePredictor {
    fn predict(&self, tape: &mut Tape, store: &ParameterStore, z: Var, c: Var, lambda: f64) -> Result<Var>;
}

impl NoisePredictor for crate::network::Denoiser {
    fn predict(&self, tape: &mut Tape, store: &ParameterStore, z: Var, c: Var, lambda: f64) -> Result<Var> {
        self.forward(tape, store, z, c, lambda)
    }
}

/// One loss term: draw a target in `M ∪ F`, condition on the masked prefix,
/// noise the target, and score the prediction.
pub fn loss_step(
    tape: &mut Tape,
    model: &Sadm,
    subject: &LongitudinalVolume,
    p: &IndexPartition,
    p_uncond: f64,
    rng: &mut Rng,
) -> Result<StepOutput> {
    loss_step_with(tape, model, &model.denoiser, subject, p, p_uncond, rng)
}

/// [`loss_step`] with a substitute noise predictor.
pub fn loss_step_with(
    tape: &mut Tape,
    model: &Sadm,
    predictor: &impl NoisePredictor,
    subject: &LongitudinalVolume,
    p: &IndexPartition,
    p_uncond: f64,
    rng: &mut Rng,
) -> Result<StepOutput> {
    let target = sample_training_target(p, rng)?;
    let (seq, _) = build_masked_sequence(subject, p, target)?;
    let c = model.conditioner.condition(tape, &model.store, &seq)?;
    let x = subject.frame(target);
    let eps = Tensor::randn(x.shape(), rng);
    let t = rng.uniform();
    let keep = !rng.bernoulli(p_uncond);
    let schedule = &model.config.schedule;
    let lambda = schedule.lambda(t)?;
    let z = tape.constant(marginal_with_noise(schedule, x, t, &eps)?);
    let c = tape.scale(c, if keep { 1.0 } else { 0.0 });
    let eps_hat = predictor.predict(tape, &model.store, z, c, lambda)?;
    let loss = noise_prediction_loss(tape, eps_hat, &eps)?;
    Ok(StepOutput {
        loss,
        target,
        t,
        lambda,
        keep,
        eps,
    })
}

fn param_norm(store: &ParameterStore) -> f64 {
    store.iter().map(|(_, p)| p.value.norm().powi(2)).sum::<f64>().sqrt()
}

fn grad_norm(store: &ParameterStore) -> f64 {
    store.iter().map(|(_, p)| p.grad.norm().powi(2)).sum::<f64>().sqrt()
}

fn check_dataset(data: &[LongitudinalVolume]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("train", "dataset is empty"));
    }
    if data.iter().any(|v| v.present().iter().any(|&p| !p)) {
        return Err(Error::invalid("train", "training subjects must have every frame present"));
    }
    Ok(())
}

/// Run `cfg.steps` updates of `cfg.batch` independent (subject, partition,
/// target) items each. Checkpoints go to `ckpt_dir/step-XXXXXX.ckpt` and
/// `ckpt_dir/last.ckpt` when a directory is given.
pub fn train(
    model: &mut Sadm,
    data: &[LongitudinalVolume],
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    check_dataset(data)?;
    let mut rng = Rng::stream(cfg.seed, 2);
    let mut trace = Vec::with_capacity(cfg.steps * cfg.batch);
    for _ in 0..cfg.steps {
        let step = model.store.step() + 1;
        for _ in 0..cfg.batch {
            let subject = &data[rng.below(data.len())];
            let p = random_partition(subject.len(), &mut rng)?;
            let mut tape = Tape::new();
            let out = loss_step(&mut tape, model, subject, &p, cfg.p_uncond, &mut rng)?;
            let loss = tape.value(out.loss).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} at step {step} (t = {:.6}, λ_t = {:.4}, target {}, |θ| = {:.4e})",
                    out.t,
                    out.lambda,
                    out.target,
                    param_norm(&model.store)
                )));
            }
            let scaled = tape.scale(out.loss, 1.0 / cfg.batch as f64);
            tape.backward(scaled, &mut model.store)?;
            trace.push(LossRecord {
                step,
                loss,
                t: out.t,
                keep: out.keep,
            });
        }
        let gnorm = grad_norm(&model.store);
        if !gnorm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient norm {gnorm} at step {step} (|θ| = {:.4e})",
                param_norm(&model.store)
            )));
        }
        optim::update(&mut model.store, &cfg.optimizer, cfg.lr)?;
        if let Some(dir) = ckpt_dir {
            if cfg.ckpt_every > 0 && step % cfg.ckpt_every as u64 == 0 {
                save_checkpoint(&model.store, dir.join(format!("step-{step:06}.ckpt")))?;
            }
        }
    }
    if let Some(dir) = ckpt_dir {
        save_checkpoint(&model.store, dir.join("last.ckpt"))?;
    }
    Ok(trace)
}

/// Fit the conditioner alone to `mean((c − x^i)²)`; the denoiser is untouched.
pub fn pretrain_conditioner(model: &mut Sadm, data: &[LongitudinalVolume], cfg: &TrainConfig) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    check_dataset(data)?;
    let mut rng = Rng::stream(cfg.seed, 3);
    let mut trace = Vec::with_capacity(cfg.steps * cfg.batch);
    for _ in 0..cfg.steps {
        let step = model.store.step() + 1;
        for _ in 0..cfg.batch {
            let subject = &data[rng.below(data.len())];
            let p = random_partition(subject.len(), &mut rng)?;
            let target = sample_training_target(&p, &mut rng)?;
            let (seq, _) = build_masked_sequence(subject, &p, target)?;
            let mut tape = Tape::new();
            let c = model.conditioner.condition(&mut tape, &model.store, &seq)?;
            let loss = noise_prediction_loss(&mut tape, c, subject.frame(target))?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pretraining loss {value} at step {step} (|θ| = {:.4e})",
                    param_norm(&model.store)
                )));
            }
            let scaled = tape.scale(loss, 1.0 / cfg.batch as f64);
            tape.backward(scaled, &mut model.store)?;
            trace.push(LossRecord {
                step,
                loss: value,
                t: 0.0,
                keep: true,
            });
        }
        optim::update(&mut model.store, &cfg.optimizer, cfg.lr)?;
    }
    Ok(trace)
}

/// Loss trace as CSV with header `step,loss,t,keep`.
pub fn loss_csv(trace: &[LossRecord]) -> String {
    let mut s = String::from("step,loss,t,keep\n");
    for r in trace {
        s.push_str(&format!("{},{:e},{:e},{}\n", r.step, r.loss, r.t, u8::from(r.keep)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttnConfig;
    use crate::network::{DenoiserConfig, ModelConfig};

    fn tiny_model() -> Sadm {
        let cfg = ModelConfig {
            extents: [8, 8, 4],
            attention: AttnConfig {
                blocks: 1,
                dim: 8,
                heads: 2,
                window: [4, 4, 2],
                max_len: 6,
                mlp_ratio: 2,
            },
            denoiser: DenoiserConfig {
                base: 4,
                depth: 1,
                emb_width: 8,
            },
            ..ModelConfig::default()
        };
        Sadm::new(cfg, 0).unwrap()
    }

    fn subject(len: usize, seed: u64) -> LongitudinalVolume {
        let mut rng = Rng::new(seed);
        LongitudinalVolume::new((0..len).map(|_| Tensor::rand_uniform(&[8, 8, 4], 0.0, 1.0, &mut rng)).collect()).unwrap()
    }

    /// Returns the exact noise of the target frame.
    struct Oracle<'a>(&'a Tensor);

    impl NoisePredictor for Oracle<'_> {
        fn predict(&self, tape: &mut Tape, _: &ParameterStore, z: Var, _: Var, lambda: f64) -> Result<Var> {
            let a2 = crate::schedule::sigmoid(lambda);
            let (a, s) = (a2.sqrt(), (1.0 - a2).sqrt());
            let eps = tape.value(z).zip_map(self.0, |z, x| (z - a * x) / s)?;
            Ok(tape.constant(eps))
        }
    }

    #[test]
    fn perfect_prediction_gives_zero_loss() {
        let model = tiny_model();
        let v = subject(2, 1);
        let p = IndexPartition::single(2);
        let mut tape = Tape::new();
        let oracle = Oracle(v.frame(2));
        let out = loss_step_with(&mut tape, &model, &oracle, &v, &p, 0.1, &mut Rng::new(3)).unwrap();
        assert!(tape.value(out.loss).item() < 1e-12);
    }

    #[test]
    fn dropped_conditioning_has_zero_conditioner_gradient() {
        let mut model = tiny_model();
        let v = subject(4, 2);
        let p = IndexPartition::new(vec![1, 2], vec![], vec![3, 4]);
        let mut tape = Tape::new();
        let out = loss_step(&mut tape, &model, &v, &p, 1.0, &mut Rng::new(4)).unwrap();
        assert!(!out.keep);
        tape.backward(out.loss, &mut model.store).unwrap();
        let ids = model.conditioner.param_ids(&model.store);
        assert!(!ids.is_empty());
        for id in ids {
            assert!(model.store.grad(id).is_zero(), "{}", model.store.name(id));
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut model = tiny_model();
        let v = subject(4, 3);
        let p = IndexPartition::new(vec![1, 2], vec![], vec![3, 4]);
        let mut tape = Tape::new();
        let out = loss_step(&mut tape, &model, &v, &p, 0.0, &mut Rng::new(5)).unwrap();
        assert!(out.keep);
        tape.backward(out.loss, &mut model.store).unwrap();
        for (name, p) in model.store.iter() {
            // the tail of the projection weight serves longer prefixes
            if name == "attn.proj.weight" {
                continue;
            }
            assert!(p.grad.max_abs() > 0.0, "{name}");
        }
    }

    #[test]
    fn dropout_frequency() {
        // binomial test at p = 0.5, n = 10⁴: within 3σ = 150
        let mut rng = Rng::new(8);
        let n = 10_000;
        let dropped = (0..n).filter(|_| rng.bernoulli(0.5)).count() as f64;
        assert!((dropped - 5000.0).abs() < 3.0 * (n as f64 * 0.25).sqrt());
    }

    #[test]
    fn single_step_updates_parameters() {
        let mut model = tiny_model();
        let before = model.store.clone();
        let cfg = TrainConfig {
            steps: 1,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let trace = train(&mut model, &[subject(3, 1)], &cfg, None).unwrap();
        assert_eq!(trace.len(), 1);
        assert_eq!(model.store.step(), 1);
        assert_ne!(before.iter().next().unwrap().1.value, model.store.iter().next().unwrap().1.value);
    }

    #[test]
    fn identical_seed_identical_trace() {
        let data = [subject(3, 1), subject(3, 2)];
        let cfg = TrainConfig {
            steps: 3,
            batch: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let mut a = tiny_model();
        let mut b = tiny_model();
        let ta = train(&mut a, &data, &cfg, None).unwrap();
        let tb = train(&mut b, &data, &cfg, None).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut model = tiny_model();
        let data = [subject(3, 1)];
        for cfg in [
            TrainConfig { p_uncond: 1.5, ..TrainConfig::default() },
            TrainConfig { steps: 0, ..TrainConfig::default() },
        ] {
            assert!(train(&mut model, &data, &cfg, None).is_err());
        }
        assert!(train(&mut model, &[], &TrainConfig::default(), None).is_err());
    }

    #[test]
    fn pretraining_single_frame_prefixes() {
        let mut model = tiny_model();
        let cfg = TrainConfig {
            steps: 3,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let trace = pretrain_conditioner(&mut model, &[subject(2, 4)], &cfg).unwrap();
        assert!(trace.iter().all(|r| r.loss >= 0.0 && r.loss.is_finite()));
    }

    #[test]
    fn csv_layout() {
        let s = loss_csv(&[LossRecord { step: 1, loss: 0.5, t: 0.25, keep: false }]);
        assert_eq!(s, "step,loss,t,keep\n1,5e-1,2.5e-1,0\n");
    }
}
