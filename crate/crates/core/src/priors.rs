//! Prior distributions for lognormal material and execution parameters.
//!
//! A property `X` is lognormal with log-space mean `mu` and log-space
//! standard deviation `q`. Uncertainty about `(mu, q)` is a normal-gamma
//! distribution over `(mu, tau)` with precision `tau = 1/q^2`:
//!
//! ```text
//! tau      ~ Gamma(shape = alpha0, rate = beta0)
//! mu | tau ~ Normal(mu0, 1 / (kappa0 * tau))
//! ```
//!
//! All parameter-uncertainty machinery lives in log space.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calib::{q_of_v, v_of_q};
use crate::error::{ensure_positive, Error, Result};
use crate::seed;
use crate::stats::{ln_gamma, norm_cdf, norm_ln_pdf};

/// A lognormal property given by its mean and coefficient of variation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LognormalSpec {
    mean: f64,
    cov: f64,
}

impl LognormalSpec {
    pub fn new(mean: f64, cov: f64) -> Result<Self> {
        ensure_positive("mean", mean)?;
        ensure_positive("cov", cov)?;
        Ok(Self { mean, cov })
    }

    /// Builds the spec from log-space parameters.
    pub fn from_log(mu_ln: f64, q: f64) -> Result<Self> {
        let cov = v_of_q(q)?;
        Self::new((mu_ln + 0.5 * q * q).exp(), cov)
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn cov(&self) -> f64 {
        self.cov
    }

    pub fn q(&self) -> f64 {
        (self.cov * self.cov).ln_1p().sqrt()
    }

    pub fn mu_ln(&self) -> f64 {
        let q = self.q();
        self.mean.ln() - 0.5 * q * q
    }

    pub fn point(&self) -> ParamPoint {
        ParamPoint {
            mu: self.mu_ln(),
            q: self.q(),
        }
    }
}

/// A point in parameter space: log-space mean and log-space standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamPoint {
    pub mu: f64,
    pub q: f64,
}

impl ParamPoint {
    pub fn new(mu: f64, q: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::domain(format!("mu must be finite, got {mu}")));
        }
        ensure_positive("q", q)?;
        Ok(Self { mu, q })
    }

    /// Median of the property, `exp(mu)`.
    pub fn median(&self) -> f64 {
        self.mu.exp()
    }

    pub fn mean(&self) -> f64 {
        (self.mu + 0.5 * self.q * self.q).exp()
    }

    /// Coefficient of variation `sqrt(exp(q^2) - 1)`.
    pub fn cov(&self) -> f64 {
        (self.q * self.q).exp_m1().sqrt()
    }
}

/// Anything that describes a lognormal law in log space.
pub trait LogNormalParams {
    fn mu_ln(&self) -> f64;
    fn q(&self) -> f64;
}

impl LogNormalParams for LognormalSpec {
    fn mu_ln(&self) -> f64 {
        LognormalSpec::mu_ln(self)
    }
    fn q(&self) -> f64 {
        LognormalSpec::q(self)
    }
}

impl LogNormalParams for ParamPoint {
    fn mu_ln(&self) -> f64 {
        self.mu
    }
    fn q(&self) -> f64 {
        self.q
    }
}

/// `P(X <= x)` for a lognormal law.
pub fn lognormal_cdf(params: &impl LogNormalParams, x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::domain(format!("lognormal cdf needs x > 0, got {x}")));
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    Ok(norm_cdf((x.ln() - params.mu_ln()) / params.q()))
}

/// Lognormal density at `x > 0` (zero elsewhere).
pub fn lognormal_pdf(params: &impl LogNormalParams, x: f64) -> f64 {
    if !(x > 0.0) || x.is_infinite() {
        return 0.0;
    }
    let q = params.q();
    let z = (x.ln() - params.mu_ln()) / q;
    (norm_ln_pdf(z) - (q * x).ln()).exp()
}

/// Hyperparameters of a normal-gamma prior over `(mu, tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalGammaHyper {
    pub mu0: f64,
    pub kappa0: f64,
    pub alpha0: f64,
    pub beta0: f64,
}

impl NormalGammaHyper {
    pub fn new(mu0: f64, kappa0: f64, alpha0: f64, beta0: f64) -> Result<Self> {
        if !mu0.is_finite() {
            return Err(Error::domain(format!("mu0 must be finite, got {mu0}")));
        }
        ensure_positive("kappa0", kappa0)?;
        ensure_positive("alpha0", alpha0)?;
        ensure_positive("beta0", beta0)?;
        Ok(Self {
            mu0,
            kappa0,
            alpha0,
            beta0,
        })
    }

    /// Prior from a mean, a prior CoV `v0` and an equivalent sample size `n`:
    /// `kappa0 = n`, `alpha0 = n/2`, `beta0 = alpha0 * Q0^2`,
    /// `mu0 = ln(mean) - Q0^2/2`, with `Q0 = sqrt(ln(1 + v0^2))`.
    pub fn from_prior(mean: f64, v0: f64, n: u32) -> Result<Self> {
        ensure_positive("mean", mean)?;
        ensure_positive("v0", v0)?;
        if n == 0 {
            return Err(Error::domain("equivalent sample size n must be >= 1"));
        }
        let q0 = q_of_v(v0)?;
        let n = f64::from(n);
        let alpha0 = 0.5 * n;
        Self::new(mean.ln() - 0.5 * q0 * q0, n, alpha0, alpha0 * q0 * q0)
    }

    /// `sqrt(beta0 / alpha0)`, the log-space standard deviation the prior is
    /// centred on.
    pub fn q0(&self) -> f64 {
        (self.beta0 / self.alpha0).sqrt()
    }

    /// Marginal standard deviation of `mu` (Student-t with `2 alpha0` dof).
    /// Infinite when `alpha0 <= 1`.
    pub fn mu_sd(&self) -> f64 {
        if self.alpha0 <= 1.0 {
            return f64::INFINITY;
        }
        (self.beta0 / (self.kappa0 * (self.alpha0 - 1.0))).sqrt()
    }

    /// Log density of `(mu, q)` with respect to Lebesgue measure on `(mu, q)`.
    ///
    /// This is the normal-gamma density in `(mu, tau)` times the Jacobian
    /// `|dtau/dq| = 2 / q^3`; `sample_prior` draws from exactly this law.
    pub fn logpdf(&self, p: ParamPoint) -> Result<f64> {
        ensure_positive("q", p.q)?;
        Ok(self.logpdf_unchecked(p.mu, p.q))
    }

    #[inline]
    pub(crate) fn logpdf_unchecked(&self, mu: f64, q: f64) -> f64 {
        let tau = 1.0 / (q * q);
        let ln_tau = tau.ln();
        let d = mu - self.mu0;
        let ln_gamma_part = self.alpha0 * self.beta0.ln() - ln_gamma(self.alpha0)
            + (self.alpha0 - 1.0) * ln_tau
            - self.beta0 * tau;
        let ln_normal_part = 0.5 * (self.kappa0 * tau / std::f64::consts::TAU).ln()
            - 0.5 * self.kappa0 * tau * d * d;
        ln_gamma_part + ln_normal_part + std::f64::consts::LN_2 - 3.0 * q.ln()
    }

    pub fn sample_one(&self, rng: &mut impl Rng) -> ParamPoint {
        let gamma = Gamma::new(self.alpha0, 1.0 / self.beta0).expect("validated hyperparameters");
        let tau: f64 = gamma.sample(rng);
        let z: f64 = StandardNormal.sample(rng);
        ParamPoint {
            mu: self.mu0 + z / (self.kappa0 * tau).sqrt(),
            q: 1.0 / tau.sqrt(),
        }
    }
}

/// Convenience free function mirroring [`NormalGammaHyper::from_prior`].
pub fn hyper_from_prior(mean: f64, v0: f64, n: u32) -> Result<NormalGammaHyper> {
    NormalGammaHyper::from_prior(mean, v0, n)
}

pub fn normal_gamma_logpdf(h: &NormalGammaHyper, p: ParamPoint) -> Result<f64> {
    h.logpdf(p)
}

/// `count` i.i.d. draws from the prior, deterministic in `seed`.
pub fn sample_prior(h: &NormalGammaHyper, count: usize, seed: u64) -> Result<Vec<ParamPoint>> {
    if count == 0 {
        return Err(Error::domain("sample count must be >= 1"));
    }
    let mut rng = seed::rng(seed);
    Ok((0..count).map(|_| h.sample_one(&mut rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{mean, variance};
    use proptest::prelude::*;

    fn unit_prior() -> NormalGammaHyper {
        hyper_from_prior(15.0, 0.18, 6).unwrap()
    }

    #[test]
    fn table_hyperparameters() {
        let cases = [
            (15.0, 0.18, 2.692, 0.0957),
            (5.0, 0.20, 1.590, 0.118),
            (0.05, 0.35, -3.054, 0.347),
        ];
        for (m, v, mu0, beta0) in cases {
            let h = hyper_from_prior(m, v, 6).unwrap();
            assert!((h.mu0 - mu0).abs() < 1e-3, "{h:?}");
            assert_eq!(h.kappa0, 6.0);
            assert_eq!(h.alpha0, 3.0);
            assert!((h.beta0 - beta0).abs() < 5e-4, "{h:?}");
        }
    }

    #[test]
    fn unit_mean_has_zero_log_median_as_cov_vanishes() {
        let h = hyper_from_prior(1.0, 1e-9, 4).unwrap();
        assert!(h.mu0.abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(hyper_from_prior(0.0, 0.2, 6).is_err());
        assert!(hyper_from_prior(f64::NAN, 0.2, 6).is_err());
        assert!(hyper_from_prior(5.0, -0.1, 6).is_err());
        assert!(hyper_from_prior(5.0, 0.2, 0).is_err());
        assert!(unit_prior().logpdf(ParamPoint { mu: 2.7, q: 0.0 }).is_err());
    }

    #[test]
    fn density_ratio_matches_logpdf_difference() {
        let h = unit_prior();
        let a = ParamPoint::new(2.70, 0.17).unwrap();
        let b = ParamPoint::new(2.60, 0.25).unwrap();
        let la = h.logpdf(a).unwrap();
        let lb = h.logpdf(b).unwrap();
        let ratio = la.exp() / lb.exp();
        assert!((ratio - (la - lb).exp()).abs() < 1e-12 * ratio);
    }

    #[test]
    fn mu_marginal_mode_is_mu0() {
        let h = unit_prior();
        // The conditional normal is symmetric about mu0 for every q.
        for q in [0.1, 0.18, 0.3] {
            let at = h.logpdf(ParamPoint { mu: h.mu0, q }).unwrap();
            for d in [1e-3, 0.01, 0.1] {
                assert!(h.logpdf(ParamPoint { mu: h.mu0 + d, q }).unwrap() < at);
                let lo = h.logpdf(ParamPoint { mu: h.mu0 - d, q }).unwrap();
                let hi = h.logpdf(ParamPoint { mu: h.mu0 + d, q }).unwrap();
                assert!((lo - hi).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn density_integrates_to_one_on_wide_grid() {
        for h in [unit_prior(), hyper_from_prior(0.05, 0.35, 6).unwrap()] {
            let n = 801;
            let mus: Vec<f64> = (0..n)
                .map(|i| h.mu0 - 12.0 * h.mu_sd() + 24.0 * h.mu_sd() * i as f64 / (n - 1) as f64)
                .collect();
            let q_hi = 12.0 * h.q0();
            let qs: Vec<f64> = (1..=n).map(|i| q_hi * i as f64 / n as f64).collect();
            let inner: Vec<f64> = qs
                .iter()
                .map(|&q| {
                    let ys: Vec<f64> = mus
                        .iter()
                        .map(|&mu| h.logpdf(ParamPoint { mu, q }).unwrap().exp())
                        .collect();
                    crate::stats::trapezoid(&mus, &ys)
                })
                .collect();
            let total = crate::stats::trapezoid(&qs, &inner);
            assert!((total - 1.0).abs() < 0.01, "integral {total}");
        }
    }

    #[test]
    fn sample_prior_is_deterministic() {
        let h = unit_prior();
        assert_eq!(
            sample_prior(&h, 100, 9).unwrap(),
            sample_prior(&h, 100, 9).unwrap()
        );
        assert_ne!(
            sample_prior(&h, 100, 9).unwrap(),
            sample_prior(&h, 100, 10).unwrap()
        );
        assert!(sample_prior(&h, 0, 9).is_err());
    }

    #[test]
    fn sample_prior_moments() {
        let h = unit_prior();
        let draws = sample_prior(&h, 1_000_000, 1).unwrap();
        let mus: Vec<f64> = draws.iter().map(|p| p.mu).collect();
        let sd = variance(&mus).sqrt();
        assert!((mean(&mus) - h.mu0).abs() < 4.0 * sd / 1e3);
        let taus: Vec<f64> = draws.iter().map(|p| 1.0 / (p.q * p.q)).collect();
        let expect = h.alpha0 / h.beta0;
        assert!(((mean(&taus) - expect) / expect).abs() < 0.01);
    }

    #[test]
    fn sample_histogram_matches_density() {
        // Coarse 2-D histogram against the density integrated over each bin
        // with a 20x20 midpoint rule.
        let h = unit_prior();
        let draws = sample_prior(&h, 400_000, 5).unwrap();
        let (mu_lo, mu_hi) = (h.mu0 - 3.0 * h.mu_sd(), h.mu0 + 3.0 * h.mu_sd());
        let (q_lo, q_hi) = (0.08, 0.40);
        let bins = 8;
        let mut hist = vec![0.0; bins * bins];
        for p in &draws {
            if p.mu >= mu_lo && p.mu < mu_hi && p.q >= q_lo && p.q < q_hi {
                let i = ((p.mu - mu_lo) / (mu_hi - mu_lo) * bins as f64) as usize;
                let j = ((p.q - q_lo) / (q_hi - q_lo) * bins as f64) as usize;
                hist[i * bins + j] += 1.0 / draws.len() as f64;
            }
        }
        let dmu = (mu_hi - mu_lo) / bins as f64;
        let dq = (q_hi - q_lo) / bins as f64;
        let sub = 20;
        let mut worst: f64 = 0.0;
        let mut peak: f64 = 0.0;
        for i in 0..bins {
            for j in 0..bins {
                let mut mass = 0.0;
                for a in 0..sub {
                    for b in 0..sub {
                        let mu = mu_lo + dmu * (i as f64 + (a as f64 + 0.5) / sub as f64);
                        let q = q_lo + dq * (j as f64 + (b as f64 + 0.5) / sub as f64);
                        mass += h.logpdf(ParamPoint { mu, q }).unwrap().exp();
                    }
                }
                mass *= dmu * dq / (sub * sub) as f64;
                peak = peak.max(mass);
                worst = worst.max((mass - hist[i * bins + j]).abs());
            }
        }
        assert!(worst / peak < 0.05, "sup discrepancy {}", worst / peak);
    }

    #[test]
    fn lognormal_cdf_examples() {
        let spec = LognormalSpec::new(15.0, 0.18).unwrap();
        let med = spec.mu_ln().exp();
        assert!((lognormal_cdf(&spec, med).unwrap() - 0.5).abs() < 1e-14);
        assert_eq!(lognormal_cdf(&spec, f64::INFINITY).unwrap(), 1.0);
        assert!((lognormal_cdf(&spec, 1e300).unwrap() - 1.0).abs() < 1e-15);
        // Phi(q/2) with q = 0.17857.
        assert!((lognormal_cdf(&spec, 15.0).unwrap() - 0.535_571_705).abs() < 1e-8);
        assert!(lognormal_cdf(&spec, 0.0).is_err());
        assert!(lognormal_cdf(&spec, -1.0).is_err());
    }

    #[test]
    fn lognormal_pdf_integrates_to_cdf() {
        let p = ParamPoint::new(1.0, 0.3).unwrap();
        let xs: Vec<f64> = (1..=20_000).map(|i| i as f64 * 1e-3).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| lognormal_pdf(&p, x)).collect();
        let integral = crate::stats::trapezoid(&xs, &ys);
        let expect = lognormal_cdf(&p, 20.0).unwrap() - lognormal_cdf(&p, 1e-3).unwrap();
        assert!((integral - expect).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn cov_q_round_trip(v in 1e-6f64..2.0) {
            let s = LognormalSpec::new(10.0, v).unwrap();
            let back = LognormalSpec::from_log(s.mu_ln(), s.q()).unwrap();
            prop_assert!((back.cov() - v).abs() < 1e-12);
            prop_assert!((back.mean() - 10.0).abs() < 1e-12);
        }

        #[test]
        fn cdf_monotone_in_x(mu in -4.0f64..4.0, q in 0.01f64..2.0, a in 1e-3f64..100.0, b in 1e-3f64..100.0) {
            let p = ParamPoint::new(mu, q).unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let fl = lognormal_cdf(&p, lo).unwrap();
            let fh = lognormal_cdf(&p, hi).unwrap();
            prop_assert!(fl <= fh);
            prop_assert!((0.0..=1.0).contains(&fl) && (0.0..=1.0).contains(&fh));
        }
    }
}
