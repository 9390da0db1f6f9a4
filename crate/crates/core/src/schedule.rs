//! Continuous-time variance-preserving noise schedule.
//!
//! Time `t ∈ [0, 1]` indexes log-SNR linearly,
//! `λ(t) = λ_max + t·(λ_min − λ_max)`, and `α² = sigmoid(λ)`, `σ² = sigmoid(−λ)`,
//! so `α² + σ² = 1` and `λ = log(α²/σ²)`.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            lambda_min: -20.0,
            lambda_max: 20.0,
        }
    }
}

/// `sigmoid(x)` without overflow for large |x|.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain {
            what: "t",
            value: t,
            domain: "[0, 1]",
        })
    }
}

impl NoiseSchedule {
    pub fn new(lambda_min: f64, lambda_max: f64) -> Result<Self> {
        if !(lambda_min.is_finite() && lambda_max.is_finite() && lambda_min < lambda_max) {
            return Err(Error::Config(format!(
                "schedule needs finite lambda_min < lambda_max, got {lambda_min} / {lambda_max}"
            )));
        }
        Ok(NoiseSchedule {
            lambda_min,
            lambda_max,
        })
    }

    /// Log-SNR at time `t`; strictly decreasing.
    pub fn lambda(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.lambda_max + t * (self.lambda_min - self.lambda_max))
    }

    /// `(α_t, σ_t)`.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        let l = self.lambda(t)?;
        Ok((sigmoid(l).sqrt(), sigmoid(-l).sqrt()))
    }

    /// `σ²_{t|s} = (1 − e^{λ_t − λ_s})·σ_t²` for `s < t`.
    pub fn transition_var(&self, s: f64, t: f64) -> Result<f64> {
        let (ls, lt) = self.ordered_lambdas(s, t)?;
        let (_, sigma_t) = self.alpha_sigma(t)?;
        Ok(-(lt - ls).exp_m1() * sigma_t * sigma_t)
    }

    pub(crate) fn ordered_lambdas(&self, s: f64, t: f64) -> Result<(f64, f64)> {
        check_time(s)?;
        check_time(t)?;
        if s >= t {
            return Err(Error::invalid(
                "schedule",
                format!("need s < t, got s = {s}, t = {t}"),
            ));
        }
        Ok((self.lambda(s)?, self.lambda(t)?))
    }
}

/// Sampler grid `[(t − 1/T, t)]` for `t = 1, …, 1/T`, descending.
pub fn step_grid(steps: usize) -> Result<Vec<(f64, f64)>> {
    if steps == 0 {
        return Err(Error::invalid("step_grid", "T must be at least 1"));
    }
    let n = steps as f64;
    Ok((1..=steps)
        .rev()
        .map(|k| ((k - 1) as f64 / n, k as f64 / n))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lambda_endpoints() {
        let s = NoiseSchedule::default();
        assert_eq!(s.lambda(0.0).unwrap(), 20.0);
        assert_eq!(s.lambda(1.0).unwrap(), -20.0);
        assert_eq!(s.lambda(0.5).unwrap(), 0.0);
        assert!(s.lambda(1.01).is_err());
        assert!(s.lambda(-0.01).is_err());
    }

    #[test]
    fn alpha_sigma_values() {
        let s = NoiseSchedule::default();
        let (a, b) = s.alpha_sigma(0.5).unwrap();
        assert!((a - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((b - 0.5f64.sqrt()).abs() < 1e-15);
        let (a0, _) = s.alpha_sigma(0.0).unwrap();
        // 1 − sigmoid(20) = 2.0611536e-9
        assert!((1.0 - a0 * a0 - 2.061_153_6e-9).abs() < 1e-15);
    }

    #[test]
    fn transition_var_degenerate_and_errors() {
        let s = NoiseSchedule::default();
        let v = s.transition_var(0.7 - 1e-12, 0.7).unwrap();
        assert!(v >= 0.0 && v < 1e-9);
        assert!(s.transition_var(0.5, 0.5).is_err());
        assert!(s.transition_var(0.6, 0.5).is_err());
    }

    #[test]
    fn grid_examples() {
        assert_eq!(step_grid(1).unwrap(), vec![(0.0, 1.0)]);
        assert_eq!(
            step_grid(4).unwrap(),
            vec![(0.75, 1.0), (0.5, 0.75), (0.25, 0.5), (0.0, 0.25)]
        );
        let g = step_grid(1000).unwrap();
        assert_eq!(g.len(), 1000);
        assert_eq!(g[0].1, 1.0);
        assert_eq!(g[999].0, 0.0);
        assert!(step_grid(0).is_err());
    }

    #[test]
    fn grid_telescopes() {
        for steps in [1, 2, 7, 50, 1000] {
            let g = step_grid(steps).unwrap();
            for w in g.windows(2) {
                assert_eq!(w[0].0, w[1].1);
            }
            assert!(g.iter().all(|(s, t)| s < t));
        }
    }

    proptest! {
        #[test]
        fn strictly_monotone(t1 in 0.0f64..1.0, dt in 1e-9f64..1.0) {
            let s = NoiseSchedule::default();
            let t2 = (t1 + dt).min(1.0);
            prop_assume!(t2 > t1);
            prop_assert!(s.lambda(t1).unwrap() > s.lambda(t2).unwrap());
            let (a1, s1) = s.alpha_sigma(t1).unwrap();
            let (a2, s2) = s.alpha_sigma(t2).unwrap();
            prop_assert!(a1 >= a2 && s1 <= s2);
        }

        #[test]
        fn variance_preserving(t in 0.0f64..=1.0) {
            let (a, b) = NoiseSchedule::default().alpha_sigma(t).unwrap();
            prop_assert!((a * a + b * b - 1.0).abs() < 1e-14);
            prop_assert!(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0);
        }
    }
}
