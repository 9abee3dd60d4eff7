//! Bayesian updating of parameter distributions through acceptance filters.
//!
//! The outgoing parameter law is `f_o(mu, q) ∝ P_a(mu, q) f_i(mu, q)`. It is
//! sampled by random-walk Metropolis in `(mu, ln q)`, one coordinate at a
//! time. Proposal scales adapt during burn-in and are frozen afterwards, so
//! the retained draws come from a fixed Markov kernel.
//!
//! Successive quality-control stages multiply their acceptance functions:
//! stage `k` targets `f_i * prod_{j<=k} P_a,j`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plans::{acceptance_probability_unchecked, closed_form_log_pa, AcceptancePlan, ArModel};
use crate::priors::{lognormal_cdf, lognormal_pdf, NormalGammaHyper, ParamPoint};
use crate::seed;
use crate::stats::{self, gamma_quantile, par_map, quantile_sorted, split_rhat, trapezoid};

/// How `P_a` is evaluated inside the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PaEstimator {
    /// Exact formula; only the execution plan with independent measurements has one.
    ClosedForm,
    /// Fresh simulation at every visited point. Seeds are derived from the
    /// point's bits, so the (noisy) surface is still a fixed function.
    MonteCarlo { n_sim: usize },
    /// Simulation on a regular `(mu, ln q)` grid spanning the prior bulk,
    /// then bilinear interpolation. Points outside the grid use the nearest
    /// edge value.
    GridInterpolation {
        n_mu: usize,
        n_logq: usize,
        n_sim: usize,
    },
}

impl Default for PaEstimator {
    fn default() -> Self {
        PaEstimator::GridInterpolation {
            n_mu: 60,
            n_logq: 60,
            n_sim: 2_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcConfig {
    pub n_chains: usize,
    /// Iterations per chain, burn-in included.
    pub n_samples: usize,
    pub burn_in: usize,
    pub proposal_scale_mu: f64,
    pub proposal_scale_logq: f64,
    pub pa_estimator: PaEstimator,
    pub seed: u64,
    /// Adapt proposal scales during burn-in towards 20-40 % acceptance.
    pub adapt: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_samples: 50_000,
            burn_in: 10_000,
            proposal_scale_mu: 0.05,
            proposal_scale_logq: 0.15,
            pa_estimator: PaEstimator::default(),
            seed: 1,
            adapt: true,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::domain("n_chains must be >= 1"));
        }
        if self.n_samples <= self.burn_in {
            return Err(Error::domain(format!(
                "n_samples ({}) must exceed burn_in ({})",
                self.n_samples, self.burn_in
            )));
        }
        if !(self.proposal_scale_mu > 0.0 && self.proposal_scale_logq > 0.0) {
            return Err(Error::domain("proposal scales must be > 0"));
        }
        match self.pa_estimator {
            PaEstimator::MonteCarlo { n_sim } if n_sim < 100 => {
                Err(Error::domain("n_sim must be >= 100"))
            }
            PaEstimator::GridInterpolation {
                n_mu,
                n_logq,
                n_sim,
            } if n_mu < 2 || n_logq < 2 || n_sim < 100 => Err(Error::domain(
                "grid needs >= 2 nodes per axis and n_sim >= 100",
            )),
            _ => Ok(()),
        }
    }

    pub fn retained(&self) -> usize {
        self.n_samples - self.burn_in
    }
}

/// Log acceptance probability as a function of the batch parameters.
pub trait LogAcceptance: Sync {
    fn log_pa(&self, p: ParamPoint) -> f64;
}

impl<F> LogAcceptance for F
where
    F: Fn(ParamPoint) -> f64 + Sync,
{
    fn log_pa(&self, p: ParamPoint) -> f64 {
        self(p)
    }
}

/// `P_a` tabulated on a regular `(mu, ln q)` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaGrid {
    pub mu_range: (f64, f64),
    pub logq_range: (f64, f64),
    pub n_mu: usize,
    pub n_logq: usize,
    /// Row-major by `mu`: `values[i * n_logq + j]`.
    pub values: Vec<f64>,
}

impl PaGrid {
    /// Grid bounds covering the prior bulk: `mu0 ± 6` marginal standard
    /// deviations and `q` between the `1e-6` and `1 - 1e-6` quantiles of the
    /// precision law.
    pub fn bounds_for(prior: &NormalGammaHyper) -> Result<((f64, f64), (f64, f64))> {
        let sd = if prior.mu_sd().is_finite() {
            prior.mu_sd()
        } else {
            3.0 * prior.q0() / prior.kappa0.sqrt()
        };
        let tau_lo = gamma_quantile(prior.alpha0, prior.beta0, 1e-6)?;
        let tau_hi = gamma_quantile(prior.alpha0, prior.beta0, 1.0 - 1e-6)?;
        Ok((
            (prior.mu0 - 6.0 * sd, prior.mu0 + 6.0 * sd),
            (-0.5 * tau_hi.ln(), -0.5 * tau_lo.ln()),
        ))
    }

    pub fn build(
        prior: &NormalGammaHyper,
        plan: &AcceptancePlan,
        ar: Option<&ArModel>,
        n_mu: usize,
        n_logq: usize,
        n_sim: usize,
        seed: u64,
    ) -> Result<Self> {
        plan.validate()?;
        if let Some(a) = ar {
            a.validate()?;
        }
        let (mu_range, logq_range) = Self::bounds_for(prior)?;
        let mut grid = Self {
            mu_range,
            logq_range,
            n_mu,
            n_logq,
            values: Vec::new(),
        };
        grid.values = par_map(n_mu * n_logq, |k| {
            let (i, j) = (k / n_logq, k % n_logq);
            let p = ParamPoint {
                mu: grid.node_mu(i),
                q: grid.node_logq(j).exp(),
            };
            acceptance_probability_unchecked(p, plan, ar, n_sim, seed::derive(seed, k as u64)).pa
        });
        Ok(grid)
    }

    fn node_mu(&self, i: usize) -> f64 {
        self.mu_range.0 + (self.mu_range.1 - self.mu_range.0) * i as f64 / (self.n_mu - 1) as f64
    }

    fn node_logq(&self, j: usize) -> f64 {
        self.logq_range.0
            + (self.logq_range.1 - self.logq_range.0) * j as f64 / (self.n_logq - 1) as f64
    }

    /// Bilinear interpolation, clamped to the grid.
    pub fn pa(&self, p: ParamPoint) -> f64 {
        let locate = |x: f64, (lo, hi): (f64, f64), n: usize| -> (usize, f64) {
            let t = ((x - lo) / (hi - lo) * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
            let i = (t.floor() as usize).min(n - 2);
            (i, t - i as f64)
        };
        let (i, u) = locate(p.mu, self.mu_range, self.n_mu);
        let (j, v) = locate(p.q.ln(), self.logq_range, self.n_logq);
        let at = |a: usize, b: usize| self.values[a * self.n_logq + b];
        (1.0 - u) * ((1.0 - v) * at(i, j) + v * at(i, j + 1))
            + u * ((1.0 - v) * at(i + 1, j) + v * at(i + 1, j + 1))
    }
}

/// The acceptance function of one QC stage, as used by the sampler.
pub enum StageAcceptance {
    Closed {
        plan: AcceptancePlan,
        ar: Option<ArModel>,
    },
    MonteCarlo {
        plan: AcceptancePlan,
        ar: Option<ArModel>,
        n_sim: usize,
        seed: u64,
    },
    Grid(PaGrid),
}

impl StageAcceptance {
    /// Picks the estimator: the closed form whenever the plan has one,
    /// otherwise the configured estimator.
    pub fn resolve(
        prior: &NormalGammaHyper,
        plan: &AcceptancePlan,
        ar: Option<&ArModel>,
        estimator: PaEstimator,
        seed: u64,
    ) -> Result<Self> {
        plan.validate()?;
        if let Some(a) = ar {
            a.validate()?;
        }
        let probe = ParamPoint {
            mu: prior.mu0,
            q: prior.q0(),
        };
        if closed_form_log_pa(probe, plan, ar).is_some() {
            return Ok(StageAcceptance::Closed {
                plan: *plan,
                ar: ar.copied(),
            });
        }
        match estimator {
            PaEstimator::ClosedForm => Err(Error::domain(format!(
                "no closed-form acceptance probability for the {} plan{}",
                plan.label(),
                if ar.is_some() {
                    " with autocorrelation"
                } else {
                    ""
                }
            ))),
            PaEstimator::MonteCarlo { n_sim } => Ok(StageAcceptance::MonteCarlo {
                plan: *plan,
                ar: ar.copied(),
                n_sim,
                seed,
            }),
            PaEstimator::GridInterpolation {
                n_mu,
                n_logq,
                n_sim,
            } => {
                let grid = PaGrid::build(prior, plan, ar, n_mu, n_logq, n_sim, seed)?;
                if grid.values.iter().all(|&v| v == 0.0) {
                    return Err(Error::EmptyPosterior(format!(
                        "the {} plan rejects every batch across the prior bulk",
                        plan.label()
                    )));
                }
                Ok(StageAcceptance::Grid(grid))
            }
        }
    }
}

impl LogAcceptance for StageAcceptance {
    fn log_pa(&self, p: ParamPoint) -> f64 {
        match self {
            StageAcceptance::Closed { plan, ar } => {
                closed_form_log_pa(p, plan, ar.as_ref()).unwrap_or(f64::NEG_INFINITY)
            }
            StageAcceptance::MonteCarlo {
                plan,
                ar,
                n_sim,
                seed,
            } => {
                let s = seed::derive(seed::derive(*seed, p.mu.to_bits()), p.q.to_bits());
                acceptance_probability_unchecked(p, plan, ar.as_ref(), *n_sim, s)
                    .pa
                    .ln()
            }
            StageAcceptance::Grid(g) => g.pa(p).ln(),
        }
    }
}

/// Retained draws of all chains plus diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamChain {
    /// One vector of post burn-in draws per chain.
    pub chains: Vec<Vec<ParamPoint>>,
    pub acceptance_rate: f64,
    /// Split-chain potential scale reduction for `mu` and `q`.
    pub rhat_mu: f64,
    pub rhat_q: f64,
    /// False when either scale reduction exceeds 1.1.
    pub converged: bool,
    /// Proposal scales after warm-up, per chain.
    pub final_scales: Vec<(f64, f64)>,
}

impl ParamChain {
    pub fn len(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> Vec<ParamPoint> {
        self.chains.iter().flatten().copied().collect()
    }

    pub fn mus(&self) -> Vec<f64> {
        self.chains.iter().flatten().map(|p| p.mu).collect()
    }

    pub fn qs(&self) -> Vec<f64> {
        self.chains.iter().flatten().map(|p| p.q).collect()
    }

    /// CSV with header `chain,iter,mu,q`, keeping every `thin`-th draw.
    pub fn to_csv(&self, thin: usize) -> String {
        let thin = thin.max(1);
        let mut s = String::from("chain,iter,mu,q\n");
        for (c, draws) in self.chains.iter().enumerate() {
            for (i, p) in draws.iter().enumerate().step_by(thin) {
                let _ = writeln!(s, "{c},{i},{},{}", p.mu, p.q);
            }
        }
        s
    }
}

struct ChainOutput {
    draws: Vec<ParamPoint>,
    accepted: usize,
    proposed: usize,
    scales: (f64, f64),
}

fn log_target(prior: &NormalGammaHyper, stages: &[&dyn LogAcceptance], mu: f64, lq: f64) -> f64 {
    let q = lq.exp();
    if !(q > 0.0 && q.is_finite() && mu.is_finite()) {
        return f64::NEG_INFINITY;
    }
    // Density in (mu, ln q): prior density in (mu, q) times dq/dln q = q.
    let mut lp = prior.logpdf_unchecked(mu, q) + lq;
    let p = ParamPoint { mu, q };
    for s in stages {
        if lp == f64::NEG_INFINITY {
            break;
        }
        lp += s.log_pa(p);
    }
    if lp.is_nan() {
        f64::NEG_INFINITY
    } else {
        lp
    }
}

const ADAPT_WINDOW: usize = 100;
const INIT_ATTEMPTS: usize = 10_000;

fn run_chain(
    prior: &NormalGammaHyper,
    stages: &[&dyn LogAcceptance],
    cfg: &McmcConfig,
    seed: u64,
) -> Result<ChainOutput> {
    let mut rng = seed::rng(seed);
    let mut state = None;
    for _ in 0..INIT_ATTEMPTS {
        let p = prior.sample_one(&mut rng);
        let lp = log_target(prior, stages, p.mu, p.q.ln());
        if lp.is_finite() {
            state = Some((p.mu, p.q.ln(), lp));
            break;
        }
    }
    let (mut mu, mut lq, mut lp) = state.ok_or_else(|| {
        Error::EmptyPosterior(format!(
            "no prior draw out of {INIT_ATTEMPTS} has a positive acceptance probability"
        ))
    })?;

    let mut scales = [cfg.proposal_scale_mu, cfg.proposal_scale_logq];
    let mut window = [0usize; 2];
    let mut accepted = 0;
    let mut proposed = 0;
    let mut draws = Vec::with_capacity(cfg.retained());
    for it in 0..cfg.n_samples {
        for (coord, hits) in window.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            let (new_mu, new_lq) = if coord == 0 {
                (mu + scales[0] * z, lq)
            } else {
                (mu, lq + scales[1] * z)
            };
            let new_lp = log_target(prior, stages, new_mu, new_lq);
            let u: f64 = rng.random();
            let accept = new_lp.is_finite() && u.ln() < new_lp - lp;
            if accept {
                mu = new_mu;
                lq = new_lq;
                lp = new_lp;
            }
            if it < cfg.burn_in {
                *hits += usize::from(accept);
            } else {
                accepted += usize::from(accept);
                proposed += 1;
            }
        }
        if cfg.adapt && it < cfg.burn_in && (it + 1) % ADAPT_WINDOW == 0 {
            for (scale, hits) in scales.iter_mut().zip(window.iter_mut()) {
                let rate = *hits as f64 / ADAPT_WINDOW as f64;
                if rate < 0.2 {
                    *scale *= 0.8;
                } else if rate > 0.4 {
                    *scale *= 1.25;
                }
                *hits = 0;
            }
        }
        if it >= cfg.burn_in {
            draws.push(ParamPoint { mu, q: lq.exp() });
        }
    }
    Ok(ChainOutput {
        draws,
        accepted,
        proposed,
        scales: (scales[0], scales[1]),
    })
}

/// Samples `prior * prod(P_a)` for an arbitrary set of acceptance functions.
pub fn run_posterior_with(
    prior: &NormalGammaHyper,
    stages: &[&dyn LogAcceptance],
    cfg: &McmcConfig,
) -> Result<ParamChain> {
    cfg.validate()?;
    let outputs = par_map(cfg.n_chains, |c| {
        run_chain(prior, stages, cfg, seed::derive(cfg.seed, c as u64))
    });
    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    let accepted: usize = outputs.iter().map(|o| o.accepted).sum();
    let proposed: usize = outputs.iter().map(|o| o.proposed).sum();
    let final_scales = outputs.iter().map(|o| o.scales).collect();
    let chains: Vec<Vec<ParamPoint>> = outputs.into_iter().map(|o| o.draws).collect();
    let mus: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| c.iter().map(|p| p.mu).collect())
        .collect();
    let qs: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| c.iter().map(|p| p.q).collect())
        .collect();
    let rhat_mu = split_rhat(&mus);
    let rhat_q = split_rhat(&qs);
    Ok(ParamChain {
        chains,
        acceptance_rate: accepted as f64 / proposed.max(1) as f64,
        rhat_mu,
        rhat_q,
        converged: rhat_mu <= 1.1 && rhat_q <= 1.1,
        final_scales,
    })
}

/// Builds the acceptance function of every stage. Stage `j` uses the seed
/// `derive(cfg.seed, 1000 + j)` for its simulations.
pub fn stage_acceptances(
    prior: &NormalGammaHyper,
    stages: &[(AcceptancePlan, Option<ArModel>)],
    cfg: &McmcConfig,
) -> Result<Vec<StageAcceptance>> {
    stages
        .iter()
        .enumerate()
        .map(|(j, (plan, ar))| {
            StageAcceptance::resolve(
                prior,
                plan,
                ar.as_ref(),
                cfg.pa_estimator,
                seed::derive(cfg.seed, 1000 + j as u64),
            )
            .map_err(|e| e.context(format!("QC stage {}", j + 1)))
        })
        .collect()
}

/// One chain per stage; stage `k` targets the prior times the acceptance
/// functions of stages `1..=k`.
pub fn sequential_update(
    prior: &NormalGammaHyper,
    stages: &[(AcceptancePlan, Option<ArModel>)],
    cfg: &McmcConfig,
) -> Result<Vec<ParamChain>> {
    if stages.is_empty() {
        return Err(Error::domain("sequential update needs at least one stage"));
    }
    cfg.validate()?;
    let acceptances = stage_acceptances(prior, stages, cfg)?;
    let dyns: Vec<&dyn LogAcceptance> = acceptances
        .iter()
        .map(|a| a as &dyn LogAcceptance)
        .collect();
    (1..=dyns.len())
        .map(|k| {
            let stage_cfg = McmcConfig {
                seed: if k == 1 {
                    cfg.seed
                } else {
                    seed::derive(cfg.seed, 2000 + k as u64)
                },
                ..*cfg
            };
            run_posterior_with(prior, &dyns[..k], &stage_cfg)
                .map_err(|e| e.context(format!("QC stage {k}")))
        })
        .collect()
}

/// Posterior after a single acceptance filter.
pub fn run_posterior(
    prior: &NormalGammaHyper,
    plan: &AcceptancePlan,
    ar: Option<&ArModel>,
    cfg: &McmcConfig,
) -> Result<ParamChain> {
    let mut chains = sequential_update(prior, &[(*plan, ar.copied())], cfg)?;
    Ok(chains.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDensity {
    pub grid: Vec<(f64, f64)>,
    /// Trapezoid integral of the mixture density before renormalisation.
    pub normalization_check: f64,
}

impl PredictiveDensity {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,density\n");
        for (x, d) in &self.grid {
            let _ = writeln!(s, "{x},{d}");
        }
        s
    }

    pub fn mean(&self) -> f64 {
        let xs: Vec<f64> = self.grid.iter().map(|g| g.0).collect();
        let ys: Vec<f64> = self.grid.iter().map(|g| g.0 * g.1).collect();
        trapezoid(&xs, &ys)
    }
}

/// Mixture of the lognormal densities of the draws, renormalised on `grid`.
pub fn predictive_density_points(points: &[ParamPoint], grid: &[f64]) -> Result<PredictiveDensity> {
    if points.is_empty() {
        return Err(Error::domain("predictive density needs at least one draw"));
    }
    if grid.len() < 2 || grid[0] <= 0.0 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::domain(
            "grid must be positive and strictly increasing with >= 2 points",
        ));
    }
    let n = points.len() as f64;
    let dens = par_map(grid.len(), |i| {
        points
            .iter()
            .map(|p| lognormal_pdf(p, grid[i]))
            .sum::<f64>()
            / n
    });
    let integral = trapezoid(grid, &dens);
    if integral < 0.95 {
        let last = *grid.last().expect("non-empty grid");
        let below: f64 = points
            .iter()
            .map(|p| lognormal_cdf(p, grid[0]).unwrap_or(0.0))
            .sum::<f64>()
            / n;
        let above: f64 = points
            .iter()
            .map(|p| 1.0 - lognormal_cdf(p, last).unwrap_or(1.0))
            .sum::<f64>()
            / n;
        return Err(Error::GridCoverage {
            integral,
            tail: if below >= above { "lower" } else { "upper" },
        });
    }
    Ok(PredictiveDensity {
        grid: grid
            .iter()
            .zip(dens)
            .map(|(&x, d)| (x, d / integral))
            .collect(),
        normalization_check: integral,
    })
}

pub fn predictive_density(chain: &ParamChain, grid: &[f64]) -> Result<PredictiveDensity> {
    predictive_density_points(&chain.points(), grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

/// Summary of the coefficient of variation implied by a set of draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovSummary {
    /// Mean of the per-draw CoV `sqrt(exp(q^2) - 1)`. Heavy-tailed under
    /// gamma precision priors; prefer the median or `predictive_v`.
    pub mean_v: f64,
    pub median_v: f64,
    /// Equal-tailed 75 % interval (12.5 % and 87.5 % quantiles) of the per-draw CoV.
    pub ci75: Interval,
    /// CoV of the predictive law with the parameters integrated out:
    /// `sqrt(exp(Var[mu] + E[q^2]) - 1)`.
    pub predictive_v: f64,
    pub mean_q: f64,
    pub draws: usize,
}

pub fn cov_summary_points(points: &[ParamPoint]) -> Result<CovSummary> {
    if points.is_empty() {
        return Err(Error::domain("CoV summary needs at least one draw"));
    }
    let vs: Vec<f64> = points.iter().map(ParamPoint::cov).collect();
    let sorted = stats::sorted(&vs);
    let mus: Vec<f64> = points.iter().map(|p| p.mu).collect();
    let var_mu = if mus.len() > 1 {
        stats::variance(&mus)
    } else {
        0.0
    };
    let mean_q2 = points.iter().map(|p| p.q * p.q).sum::<f64>() / points.len() as f64;
    Ok(CovSummary {
        mean_v: stats::mean(&vs),
        median_v: quantile_sorted(&sorted, 0.5),
        ci75: Interval {
            lo: quantile_sorted(&sorted, 0.125),
            hi: quantile_sorted(&sorted, 0.875),
        },
        predictive_v: (var_mu + mean_q2).exp_m1().sqrt(),
        mean_q: points.iter().map(|p| p.q).sum::<f64>() / points.len() as f64,
        draws: points.len(),
    })
}

pub fn cov_summary(chain: &ParamChain) -> Result<CovSummary> {
    cov_summary_points(&chain.points())
}

/// Writes a chain CSV.
pub fn write_chain(chain: &ParamChain, thin: usize, path: &Path) -> Result<()> {
    std::fs::write(path, chain.to_csv(thin)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plans::ExecutionLimit;
    use crate::priors::{hyper_from_prior, sample_prior};
    use crate::stats::ks_statistic;

    fn units() -> NormalGammaHyper {
        hyper_from_prior(15.0, 0.18, 6).unwrap()
    }

    fn small_cfg(seed: u64) -> McmcConfig {
        McmcConfig {
            n_samples: 22_000,
            burn_in: 2_000,
            seed,
            ..McmcConfig::default()
        }
    }

    fn thinned(xs: Vec<Vec<f64>>, every: usize) -> Vec<f64> {
        xs.into_iter()
            .flat_map(|c| c.into_iter().step_by(every))
            .collect()
    }

    fn ks_critical(n: usize, m: usize) -> f64 {
        // Two-sample KS critical value at the 0.1 % level.
        1.95 * ((n + m) as f64 / (n * m) as f64).sqrt()
    }

    fn chain_coords(chain: &ParamChain) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (
            chain
                .chains
                .iter()
                .map(|c| c.iter().map(|p| p.mu).collect())
                .collect(),
            chain
                .chains
                .iter()
                .map(|c| c.iter().map(|p| p.q).collect())
                .collect(),
        )
    }

    #[test]
    fn constant_acceptance_leaves_prior_unchanged() {
        let h = units();
        let half = |_: ParamPoint| 0.5f64.ln();
        let chain = run_posterior_with(&h, &[&half], &small_cfg(3)).unwrap();
        let reference = sample_prior(&h, 20_000, 99).unwrap();
        let (mus, qs) = chain_coords(&chain);
        let (mus, qs) = (thinned(mus, 20), thinned(qs, 20));
        let crit = ks_critical(mus.len(), reference.len());
        let ref_mu: Vec<f64> = reference.iter().map(|p| p.mu).collect();
        let ref_q: Vec<f64> = reference.iter().map(|p| p.q).collect();
        assert!(
            ks_statistic(&mus, &ref_mu) < crit,
            "mu KS {}",
            ks_statistic(&mus, &ref_mu)
        );
        assert!(
            ks_statistic(&qs, &ref_q) < crit,
            "q KS {}",
            ks_statistic(&qs, &ref_q)
        );
        assert!(chain.acceptance_rate > 0.0 && chain.acceptance_rate < 1.0);
        assert!(chain.converged);
    }

    #[test]
    fn indicator_acceptance_matches_rejection_sampling() {
        let h = units();
        let q_star = h.q0();
        let indicator = move |p: ParamPoint| if p.q < q_star { 0.0 } else { f64::NEG_INFINITY };
        let chain = run_posterior_with(&h, &[&indicator], &small_cfg(4)).unwrap();
        assert!(chain.qs().iter().all(|&q| q < q_star));
        let oracle: Vec<ParamPoint> = sample_prior(&h, 60_000, 7)
            .unwrap()
            .into_iter()
            .filter(|p| p.q < q_star)
            .collect();
        let (mus, qs) = chain_coords(&chain);
        let (mus, qs) = (thinned(mus, 20), thinned(qs, 20));
        let crit = ks_critical(mus.len(), oracle.len());
        let o_mu: Vec<f64> = oracle.iter().map(|p| p.mu).collect();
        let o_q: Vec<f64> = oracle.iter().map(|p| p.q).collect();
        assert!(ks_statistic(&mus, &o_mu) < crit);
        assert!(ks_statistic(&qs, &o_q) < crit);
    }

    #[test]
    fn posterior_mean_q_matches_quadrature() {
        // Execution-type filter with a closed form; oracle is a 2-D
        // midpoint quadrature of prior * P_a in (mu, q).
        let h = hyper_from_prior(0.03, 0.47, 6).unwrap();
        let plan = AcceptancePlan::ExecutionLimit(ExecutionLimit { n: 10, limit: 0.05 });
        let chain = run_posterior(&h, &plan, None, &small_cfg(5)).unwrap();
        let mcmc_q = stats::mean(&chain.qs());

        let (mu_lo, mu_hi) = (h.mu0 - 8.0 * h.mu_sd(), h.mu0 + 8.0 * h.mu_sd());
        let (q_lo, q_hi) = (1e-3, 3.0);
        let n = 600;
        let (dm, dq) = ((mu_hi - mu_lo) / n as f64, (q_hi - q_lo) / n as f64);
        let (mut z, mut zq) = (0.0, 0.0);
        for i in 0..n {
            let mu = mu_lo + (i as f64 + 0.5) * dm;
            for j in 0..n {
                let q = q_lo + (j as f64 + 0.5) * dq;
                let f = (0.05f64.ln() - mu) / q;
                let pa = crate::stats::norm_cdf(f).powi(10);
                let w = h.logpdf_unchecked(mu, q).exp() * pa;
                z += w;
                zq += w * q;
            }
        }
        let oracle = zq / z;
        assert!(
            (mcmc_q - oracle).abs() / oracle < 0.02,
            "{mcmc_q} vs {oracle}"
        );
        assert!(mcmc_q < h.q0());
    }

    #[test]
    fn filtering_reduces_q_sequentially() {
        let h = hyper_from_prior(0.03, 0.47, 6).unwrap();
        let plan = AcceptancePlan::ExecutionLimit(ExecutionLimit { n: 10, limit: 0.05 });
        let chains = sequential_update(&h, &[(plan, None), (plan, None)], &small_cfg(6)).unwrap();
        let prior_v = cov_summary_points(&sample_prior(&h, 40_000, 1).unwrap()).unwrap();
        let v1 = cov_summary(&chains[0]).unwrap();
        let v2 = cov_summary(&chains[1]).unwrap();
        assert!(v1.predictive_v < prior_v.predictive_v);
        assert!(v2.predictive_v < v1.predictive_v);
        // Stage one reuses the single-filter seed.
        let single = run_posterior(&h, &plan, None, &small_cfg(6)).unwrap();
        assert_eq!(single, chains[0]);
    }

    #[test]
    fn same_seed_same_chain() {
        let h = units();
        let f = |p: ParamPoint| -p.q;
        let cfg = McmcConfig {
            n_samples: 3_000,
            burn_in: 500,
            ..small_cfg(8)
        };
        let a = run_posterior_with(&h, &[&f], &cfg).unwrap();
        let b = run_posterior_with(&h, &[&f], &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4 * 2_500);
        let c = run_posterior_with(&h, &[&f], &McmcConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn impossible_acceptance_is_empty_posterior() {
        let h = units();
        let never = |_: ParamPoint| f64::NEG_INFINITY;
        let cfg = McmcConfig {
            n_samples: 200,
            burn_in: 100,
            ..small_cfg(1)
        };
        assert!(matches!(
            run_posterior_with(&h, &[&never], &cfg),
            Err(Error::EmptyPosterior(_))
        ));
    }

    #[test]
    fn closed_form_only_where_available() {
        let h = units();
        let exec = AcceptancePlan::ExecutionLimit(ExecutionLimit { n: 10, limit: 0.05 });
        let s = StageAcceptance::resolve(&h, &exec, None, PaEstimator::default(), 1).unwrap();
        assert!(matches!(s, StageAcceptance::Closed { .. }));
        let ar = ArModel::default();
        let err = StageAcceptance::resolve(&h, &exec, Some(&ar), PaEstimator::ClosedForm, 1);
        assert!(err.is_err());
    }

    #[test]
    fn config_validation() {
        assert!(McmcConfig::default().validate().is_ok());
        assert!(McmcConfig {
            n_samples: 10,
            burn_in: 10,
            ..McmcConfig::default()
        }
        .validate()
        .is_err());
        assert!(McmcConfig {
            n_chains: 0,
            ..McmcConfig::default()
        }
        .validate()
        .is_err());
        let bad = PaEstimator::MonteCarlo { n_sim: 10 };
        assert!(McmcConfig {
            pa_estimator: bad,
            ..McmcConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn grid_interpolation_is_exact_for_bilinear_surfaces() {
        let mut g = PaGrid {
            mu_range: (0.0, 1.0),
            logq_range: (-3.0, 0.0),
            n_mu: 5,
            n_logq: 7,
            values: Vec::new(),
        };
        let f = |mu: f64, lq: f64| 0.1 + 0.3 * mu + 0.05 * (lq + 3.0) + 0.02 * mu * (lq + 3.0);
        for i in 0..5 {
            for j in 0..7 {
                g.values.push(f(g.node_mu(i), g.node_logq(j)));
            }
        }
        for &(mu, lq) in &[(0.13, -2.9), (0.5, -1.0), (0.99, -0.01), (0.25, -1.5)] {
            let got = g.pa(ParamPoint {
                mu,
                q: f64::exp(lq),
            });
            assert!((got - f(mu, lq)).abs() < 1e-12);
        }
        // Clamped outside the grid.
        let out = g.pa(ParamPoint { mu: 5.0, q: 10.0 });
        assert!((out - f(1.0, 0.0)).abs() < 1e-12);
    }

    #[test]
    fn cov_summary_matches_gamma_quantiles() {
        let h = units();
        let pts = sample_prior(&h, 400_000, 21).unwrap();
        let s = cov_summary_points(&pts).unwrap();
        let v_of_tau = |tau: f64| (1.0 / tau).exp_m1().sqrt();
        let median = v_of_tau(gamma_quantile(h.alpha0, h.beta0, 0.5).unwrap());
        let hi = v_of_tau(gamma_quantile(h.alpha0, h.beta0, 0.125).unwrap());
        let lo = v_of_tau(gamma_quantile(h.alpha0, h.beta0, 0.875).unwrap());
        assert!(
            (s.median_v - median).abs() < 2e-3,
            "{} vs {median}",
            s.median_v
        );
        assert!((s.ci75.hi - hi).abs() < 4e-3);
        assert!((s.ci75.lo - lo).abs() < 2e-3);
        // Var(mu) + E[q^2] = beta / (alpha - 1) * (1 + 1 / kappa).
        let log_var = h.beta0 / (h.alpha0 - 1.0) * (1.0 + 1.0 / h.kappa0);
        let oracle = log_var.exp_m1().sqrt();
        assert!(
            (s.predictive_v - oracle).abs() < 3e-3,
            "{} vs {oracle}",
            s.predictive_v
        );
        assert!(s.ci75.lo < s.median_v && s.median_v < s.ci75.hi);
    }

    #[test]
    fn predictive_density_normalises_and_reports_tails() {
        let h = units();
        let pts = sample_prior(&h, 2_000, 2).unwrap();
        let grid: Vec<f64> = (1..=800).map(|i| i as f64 * 0.1).collect();
        let d = predictive_density_points(&pts, &grid).unwrap();
        assert!((d.normalization_check - 1.0).abs() < 0.01);
        let xs: Vec<f64> = d.grid.iter().map(|g| g.0).collect();
        let ys: Vec<f64> = d.grid.iter().map(|g| g.1).collect();
        assert!((trapezoid(&xs, &ys) - 1.0).abs() < 1e-12);
        assert!((d.mean() - 15.0).abs() < 0.5);
        let narrow: Vec<f64> = (0..50).map(|i| 15.0 + i as f64 * 0.5).collect();
        match predictive_density_points(&pts, &narrow) {
            Err(Error::GridCoverage { tail, .. }) => assert_eq!(tail, "lower"),
            other => panic!("{other:?}"),
        }
        assert!(predictive_density_points(&pts, &[1.0, 1.0]).is_err());
        assert!(d.to_csv().starts_with("x,density\n"));
    }

    #[test]
    fn chain_csv_thins() {
        let h = units();
        let f = |_: ParamPoint| 0.0;
        let cfg = McmcConfig {
            n_samples: 1_100,
            burn_in: 100,
            n_chains: 2,
            ..small_cfg(1)
        };
        let c = run_posterior_with(&h, &[&f], &cfg).unwrap();
        let csv = c.to_csv(10);
        assert!(csv.starts_with("chain,iter,mu,q\n"));
        assert_eq!(csv.lines().count(), 1 + 2 * 100);
    }
}
