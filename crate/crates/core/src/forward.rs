//! Forward-process algebra: marginals, the reverse-direction posterior and
//! the ε ↔ x conversion.

use crate::error::{Error, Result};
use crate::ndcore::{Rng, Tensor};
use crate::schedule::NoiseSchedule;

/// Scalars of `q(z_s | z_t, x)` and the interpolated sampler variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoeffs {
    /// Multiplies `z_t` in the posterior mean.
    pub coef_z: f64,
    /// Multiplies `x` in the posterior mean.
    pub coef_x: f64,
    /// `σ̃²_{s|t}`
    pub var_tilde: f64,
    /// `σ²_{t|s}`
    pub var_transition: f64,
    /// `Σ̃_{s|t} = (σ̃²_{s|t})^{1−v} (σ²_{t|s})^v`
    pub var_interp: f64,
}

impl PosteriorCoeffs {
    /// `μ̃_{s|t}(z_t, x)`.
    pub fn mean(&self, z_t: &Tensor, x: &Tensor) -> Result<Tensor> {
        z_t.zip_map(x, |z, x| self.coef_z * z + self.coef_x * x)
    }
}

/// `z_t = α_t x + σ_t ε` with the given noise.
pub fn marginal_with_noise(
    schedule: &NoiseSchedule,
    x: &Tensor,
    t: f64,
    eps: &Tensor,
) -> Result<Tensor> {
    let (a, s) = schedule.alpha_sigma(t)?;
    x.zip_map(eps, |x, e| a * x + s * e)
}

/// Draw `z_t ~ q(z_t | x)`; returns `(z_t, ε)`.
pub fn marginal_sample(
    schedule: &NoiseSchedule,
    x: &Tensor,
    t: f64,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    let eps = Tensor::randn(x.shape(), rng);
    let z = marginal_with_noise(schedule, x, t, &eps)?;
    Ok((z, eps))
}

pub fn posterior_coeffs(
    schedule: &NoiseSchedule,
    s: f64,
    t: f64,
    v: f64,
) -> Result<PosteriorCoeffs> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Domain {
            what: "v",
            value: v,
            domain: "[0, 1]",
        });
    }
    let (ls, lt) = schedule.ordered_lambdas(s, t)?;
    let (alpha_s, sigma_s) = schedule.alpha_sigma(s)?;
    let (alpha_t, sigma_t) = schedule.alpha_sigma(t)?;
    // r = e^{λ_t − λ_s} < 1; 1 − r via expm1 keeps precision for tiny gaps
    let r = (lt - ls).exp();
    let one_minus_r = -(lt - ls).exp_m1();
    let var_tilde = one_minus_r * sigma_s * sigma_s;
    let var_transition = one_minus_r * sigma_t * sigma_t;
    Ok(PosteriorCoeffs {
        coef_z: r * alpha_s / alpha_t,
        coef_x: one_minus_r * alpha_s,
        var_tilde,
        var_transition,
        var_interp: var_tilde.powf(1.0 - v) * var_transition.powf(v),
    })
}

/// `x̂ = (z_t − σ_t ε̂) / α_t`.
pub fn eps_to_x(schedule: &NoiseSchedule, z_t: &Tensor, eps_hat: &Tensor, t: f64) -> Result<Tensor> {
    if t <= 0.0 {
        return Err(Error::Domain {
            what: "t",
            value: t,
            domain: "(0, 1]",
        });
    }
    let (a, s) = schedule.alpha_sigma(t)?;
    z_t.zip_map(eps_hat, |z, e| (z - s * e) / a)
}

/// `ε̂ = (z_t − α_t x̂) / σ_t`. Undefined at `t = 0`, where `σ` vanishes;
/// work in x-space there instead.
pub fn x_to_eps(schedule: &NoiseSchedule, z_t: &Tensor, x_hat: &Tensor, t: f64) -> Result<Tensor> {
    if t <= 0.0 {
        return Err(Error::invalid(
            "x_to_eps",
            "t = 0 has σ ≈ 0; use the x-space estimate directly",
        ));
    }
    let (a, s) = schedule.alpha_sigma(t)?;
    z_t.zip_map(x_hat, |z, x| (z - a * x) / s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::Rng;
    use proptest::prelude::*;

    const S: NoiseSchedule = NoiseSchedule {
        lambda_min: -20.0,
        lambda_max: 20.0,
    };

    #[test]
    fn zero_noise_marginal() {
        let x = Tensor::new(&[3], vec![0.2, 0.5, 1.0]).unwrap();
        let z = marginal_with_noise(&S, &x, 0.5, &Tensor::zeros(&[3])).unwrap();
        for (zi, xi) in z.data().iter().zip(x.data()) {
            assert!((zi - 0.5f64.sqrt() * xi).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_gap() {
        let c = posterior_coeffs(&S, 0.6 - 1e-12, 0.6, 0.3).unwrap();
        assert!((c.coef_z - 1.0).abs() < 1e-9);
        assert!(c.coef_x.abs() < 1e-9);
        assert!(c.var_tilde < 1e-9 && c.var_transition < 1e-9 && c.var_interp < 1e-9);
    }

    #[test]
    fn interpolation_endpoints_exact() {
        let c0 = posterior_coeffs(&S, 0.3, 0.5, 0.0).unwrap();
        assert_eq!(c0.var_interp, c0.var_tilde);
        let c1 = posterior_coeffs(&S, 0.3, 0.5, 1.0).unwrap();
        assert_eq!(c1.var_interp, c1.var_transition);
        assert!(posterior_coeffs(&S, 0.3, 0.5, 1.5).is_err());
        assert!(posterior_coeffs(&S, 0.5, 0.5, 0.5).is_err());
    }

    #[test]
    fn x_to_eps_rejects_t0() {
        let z = Tensor::zeros(&[2]);
        assert!(x_to_eps(&S, &z, &z, 0.0).is_err());
        assert!(eps_to_x(&S, &z, &z, 0.0).is_err());
    }

    #[test]
    fn true_noise_recovers_x() {
        let mut rng = Rng::new(3);
        let x = Tensor::rand_uniform(&[50], 0.0, 1.0, &mut rng);
        for t in [0.1, 0.5, 0.6] {
            let (z, eps) = marginal_sample(&S, &x, t, &mut rng).unwrap();
            let xr = eps_to_x(&S, &z, &eps, t).unwrap();
            assert!(xr.sub(&x).unwrap().max_abs() < 1e-12);
            let z0 = marginal_with_noise(&S, &x, t, &Tensor::zeros(&[50])).unwrap();
            assert_eq!(x_to_eps(&S, &z0, &x, t).unwrap().max_abs(), 0.0);
        }
    }

    proptest! {
        #[test]
        fn conversion_round_trip(seed in 0u64..1000, t in 0.05f64..0.95) {
            let mut rng = Rng::new(seed);
            let z = Tensor::randn(&[16], &mut rng);
            let e = Tensor::randn(&[16], &mut rng);
            let x = eps_to_x(&S, &z, &e, t).unwrap();
            let back = x_to_eps(&S, &z, &x, t).unwrap();
            // the round trip divides rounding error in z by σ_t
            let (_, sigma) = S.alpha_sigma(t).unwrap();
            prop_assert!(back.sub(&e).unwrap().max_abs() < 1e-14 / sigma);
        }

        #[test]
        fn interp_between_variances(s in 0.0f64..0.99, gap in 1e-6f64..0.5, v in 0.0f64..=1.0) {
            let t = (s + gap).min(1.0);
            prop_assume!(t > s);
            let c = posterior_coeffs(&S, s, t, v).unwrap();
            let lo = c.var_tilde.min(c.var_transition);
            let hi = c.var_tilde.max(c.var_transition);
            prop_assert!(c.var_interp >= lo * (1.0 - 1e-12) && c.var_interp <= hi * (1.0 + 1e-12));
            prop_assert!(c.coef_z > 0.0 && c.coef_x >= 0.0);
        }
    }
}
