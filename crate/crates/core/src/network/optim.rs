use crate::error::{Error, Result};
use crate::network::params::ParameterStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    /// Adaptive moment estimation with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Plain gradient descent: `θ ← θ − lr·g`.
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Apply one update from the accumulated gradients, clear them, and advance
/// the step counter.
pub fn update(store: &mut ParameterStore, opt: &Optimizer, lr: f64) -> Result<()> {
    if !store.has_pending_grads() {
        return Err(Error::invalid(
            "update",
            "no gradients accumulated since the last update",
        ));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Domain {
            what: "lr",
            value: lr,
            domain: "[0, inf)",
        });
    }
    let step = store.step() + 1;
    match *opt {
        Optimizer::Sgd => {
            for (_, p) in store.iter_mut() {
                for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                    *w -= lr * g;
                }
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let c1 = 1.0 - beta1.powi(step.min(i32::MAX as u64) as i32);
            let c2 = 1.0 - beta2.powi(step.min(i32::MAX as u64) as i32);
            for (_, p) in store.iter_mut() {
                let g = p.grad.data();
                let m = p.moment1.data_mut();
                for (mi, gi) in m.iter_mut().zip(g) {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                }
                let v = p.moment2.data_mut();
                for (vi, gi) in v.iter_mut().zip(g) {
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                }
                let (m, v) = (p.moment1.data(), p.moment2.data());
                let w = p.value.data_mut();
                for i in 0..w.len() {
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    w[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    store.zero_grad();
    store.set_step(step);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::Tensor;

    #[test]
    fn sgd_single_scalar() {
        let mut s = ParameterStore::new();
        let id = s.insert("p", Tensor::scalar(1.0)).unwrap();
        s.accumulate_grad(id, &[1.0]).unwrap();
        update(&mut s, &Optimizer::Sgd, 0.1).unwrap();
        assert_eq!(s.value(id).item(), 1.0 - 0.1);
        assert_eq!(s.step(), 1);
        assert_eq!(s.grad(id).item(), 0.0);
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        for opt in [Optimizer::Sgd, Optimizer::default()] {
            let mut s = ParameterStore::new();
            let id = s.insert("p", Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
            s.accumulate_grad(id, &[0.0; 3]).unwrap();
            update(&mut s, &opt, 0.1).unwrap();
            assert_eq!(s.value(id).data(), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn missing_gradients_rejected() {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::scalar(1.0)).unwrap();
        assert!(update(&mut s, &Optimizer::Sgd, 0.1).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParameterStore::new();
        let id = s.insert("p", Tensor::scalar(0.0)).unwrap();
        s.accumulate_grad(id, &[3.0]).unwrap();
        update(&mut s, &Optimizer::default(), 0.01).unwrap();
        // bias-corrected first step is lr·sign(g)
        assert!((s.value(id).item() + 0.01).abs() < 1e-9);
    }
}
