//! Acceptance sampling plans and their operating characteristics.
//!
//! A batch is described by a [`ParamPoint`]: individual test results are
//! lognormal with log-mean `mu` and log-deviation `q`. Test results are
//! either independent or follow an AR(2) recursion on the underlying normal
//! variates. The plans decide on the raw (not log) test values.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::priors::{lognormal_cdf, LognormalSpec, ParamPoint};
use crate::seed::{self, SimRng};
use crate::stats::{norm_cdf, norm_quantile, norm_sf, par_map};

/// What happens when the first sample set of the unit plan fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SecondStagePolicy {
    /// Accept if the first set passes, otherwise test a second set and
    /// accept iff the pooled `2n` results pass.
    #[default]
    CombinedMustPass,
    /// Accept if the first set passes, otherwise accept iff a fresh second
    /// set passes on its own.
    SecondSetMustPass,
    /// Always test two sets; accept iff each passes on its own.
    BothSetsMustPass,
}

/// Two-stage plan on unit compressive strength: a set passes when
/// `mean >= fm_declared` and `mean - k_char * s >= fc_declared`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitTwoStage {
    #[serde(default = "defaults::unit_n")]
    pub n_per_stage: usize,
    pub fc_declared: f64,
    pub fm_declared: f64,
    #[serde(default = "defaults::k_char")]
    pub k_char: f64,
    #[serde(default)]
    pub second_stage_policy: SecondStagePolicy,
}

/// Mean criterion on mortar strength: `mean > xk_declared + margin * s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MortarMeanCriterion {
    #[serde(default = "defaults::mortar_n")]
    pub n: usize,
    pub xk_declared: f64,
    #[serde(default = "defaults::margin")]
    pub margin_factor: f64,
}

/// Execution check: accepted when none of `n` measurements exceeds `limit`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionLimit {
    #[serde(default = "defaults::exec_n")]
    pub n: usize,
    #[serde(default = "defaults::exec_limit")]
    pub limit: f64,
}

impl Default for ExecutionLimit {
    fn default() -> Self {
        Self { n: 10, limit: 0.05 }
    }
}

mod defaults {
    pub fn unit_n() -> usize {
        6
    }
    pub fn k_char() -> f64 {
        1.645
    }
    pub fn mortar_n() -> usize {
        3
    }
    pub fn margin() -> f64 {
        1.48
    }
    pub fn exec_n() -> usize {
        10
    }
    pub fn exec_limit() -> f64 {
        0.05
    }
    pub fn burn_in() -> usize {
        50
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AcceptancePlan {
    UnitTwoStage(UnitTwoStage),
    MortarMeanCriterion(MortarMeanCriterion),
    ExecutionLimit(ExecutionLimit),
}

/// Which tail of the property counts as defective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectSide {
    /// Strength-type: values below the limit are defective.
    Below,
    /// Eccentricity-type: values above the limit are defective.
    Above,
}

impl AcceptancePlan {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AcceptancePlan::UnitTwoStage(p) => {
                if p.n_per_stage < 2 {
                    return Err(Error::domain("unit plan needs n_per_stage >= 2"));
                }
                ensure_positive("fc_declared", p.fc_declared)?;
                ensure_positive("fm_declared", p.fm_declared)?;
                ensure_positive("k_char", p.k_char)
            }
            AcceptancePlan::MortarMeanCriterion(p) => {
                if p.n < 2 {
                    return Err(Error::domain("mortar plan needs n >= 2"));
                }
                ensure_positive("xk_declared", p.xk_declared)?;
                if !p.margin_factor.is_finite() {
                    return Err(Error::domain("margin_factor must be finite"));
                }
                Ok(())
            }
            AcceptancePlan::ExecutionLimit(p) => {
                if p.n < 1 {
                    return Err(Error::domain("execution plan needs n >= 1"));
                }
                ensure_positive("limit", p.limit)
            }
        }
    }

    pub fn defect_side(&self) -> DefectSide {
        match self {
            AcceptancePlan::ExecutionLimit(_) => DefectSide::Above,
            _ => DefectSide::Below,
        }
    }

    /// The threshold that defines a defective item for OC curves.
    pub fn defect_limit(&self) -> f64 {
        match *self {
            AcceptancePlan::UnitTwoStage(p) => p.fc_declared,
            AcceptancePlan::MortarMeanCriterion(p) => p.xk_declared,
            AcceptancePlan::ExecutionLimit(p) => p.limit,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AcceptancePlan::UnitTwoStage(_) => "unit-two-stage",
            AcceptancePlan::MortarMeanCriterion(_) => "mortar-mean-criterion",
            AcceptancePlan::ExecutionLimit(_) => "execution-limit",
        }
    }
}

/// AR(2) dependence between successive test results:
/// `y_k = phi1 y_{k-1} + phi2 y_{k-2} + N(innov_mean_scale * mu, innov_var_scale * q^2)`
/// on the log scale, started at `y = mu` and run `burn_in` steps before use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArModel {
    pub phi1: f64,
    pub phi2: f64,
    pub innov_mean_scale: f64,
    pub innov_var_scale: f64,
    #[serde(default = "defaults::burn_in")]
    pub burn_in: usize,
}

impl Default for ArModel {
    fn default() -> Self {
        Self {
            phi1: 0.4,
            phi2: 0.2,
            innov_mean_scale: 0.4,
            innov_var_scale: 0.8,
            burn_in: 50,
        }
    }
}

impl ArModel {
    pub fn validate(&self) -> Result<()> {
        let (p1, p2) = (self.phi1, self.phi2);
        let stationary = p2 > -1.0 && p2 < 1.0 && p1 + p2 < 1.0 && p2 - p1 < 1.0;
        if !stationary {
            return Err(Error::domain(format!(
                "AR(2) with phi1={p1}, phi2={p2} is not stationary"
            )));
        }
        if !(self.innov_var_scale > 0.0) || !self.innov_mean_scale.is_finite() {
            return Err(Error::domain(
                "AR(2) innovation scales must be finite, variance scale > 0",
            ));
        }
        Ok(())
    }

    /// Stationary mean divided by `mu`.
    pub fn mean_factor(&self) -> f64 {
        self.innov_mean_scale / (1.0 - self.phi1 - self.phi2)
    }

    /// Stationary variance divided by `q^2` (about 1.111 for the defaults).
    pub fn variance_factor(&self) -> f64 {
        let (p1, p2) = (self.phi1, self.phi2);
        self.innov_var_scale * (1.0 - p2) / ((1.0 + p2) * ((1.0 - p2).powi(2) - p1 * p1))
    }

    /// Stationary log-space law of a single test result.
    pub fn stationary_point(&self, p: ParamPoint) -> ParamPoint {
        ParamPoint {
            mu: p.mu * self.mean_factor(),
            q: p.q * self.variance_factor().sqrt(),
        }
    }
}

/// Generator of the underlying normal test values of one batch.
enum Stream<'a> {
    Iid {
        mu: f64,
        q: f64,
    },
    Ar {
        model: &'a ArModel,
        mu: f64,
        q: f64,
        prev1: f64,
        prev2: f64,
    },
}

impl<'a> Stream<'a> {
    fn new(p: ParamPoint, ar: Option<&'a ArModel>, rng: &mut SimRng) -> Self {
        match ar {
            None => Stream::Iid { mu: p.mu, q: p.q },
            Some(model) => {
                let mut s = Stream::Ar {
                    model,
                    mu: p.mu,
                    q: p.q,
                    prev1: p.mu,
                    prev2: p.mu,
                };
                for _ in 0..model.burn_in {
                    s.next_log(rng);
                }
                s
            }
        }
    }

    #[inline]
    fn next_log(&mut self, rng: &mut SimRng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        match self {
            Stream::Iid { mu, q } => *mu + *q * z,
            Stream::Ar {
                model,
                mu,
                q,
                prev1,
                prev2,
            } => {
                let innov = model.innov_mean_scale * *mu + model.innov_var_scale.sqrt() * *q * z;
                let y = model.phi1 * *prev1 + model.phi2 * *prev2 + innov;
                *prev2 = *prev1;
                *prev1 = y;
                y
            }
        }
    }

    fn fill(&mut self, n: usize, rng: &mut SimRng, out: &mut Vec<f64>) {
        for _ in 0..n {
            let y = self.next_log(rng);
            out.push(y.exp());
        }
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let ss = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    (m, (ss / (n - 1.0)).sqrt())
}

fn unit_set_passes(plan: &UnitTwoStage, xs: &[f64]) -> bool {
    let (m, s) = mean_sd(xs);
    m >= plan.fm_declared && m - plan.k_char * s >= plan.fc_declared
}

fn batch_accepted(
    p: ParamPoint,
    plan: &AcceptancePlan,
    ar: Option<&ArModel>,
    rng: &mut SimRng,
    buf: &mut Vec<f64>,
) -> bool {
    let mut stream = Stream::new(p, ar, rng);
    buf.clear();
    match plan {
        AcceptancePlan::UnitTwoStage(u) => {
            let n = u.n_per_stage;
            stream.fill(n, rng, buf);
            let first = unit_set_passes(u, buf);
            match u.second_stage_policy {
                SecondStagePolicy::CombinedMustPass => {
                    if first {
                        return true;
                    }
                    stream.fill(n, rng, buf);
                    unit_set_passes(u, buf)
                }
                SecondStagePolicy::SecondSetMustPass => {
                    if first {
                        return true;
                    }
                    stream.fill(n, rng, buf);
                    unit_set_passes(u, &buf[n..])
                }
                SecondStagePolicy::BothSetsMustPass => {
                    if !first {
                        return false;
                    }
                    stream.fill(n, rng, buf);
                    unit_set_passes(u, &buf[n..])
                }
            }
        }
        AcceptancePlan::MortarMeanCriterion(m) => {
            stream.fill(m.n, rng, buf);
            let (mean, s) = mean_sd(buf);
            mean > m.xk_declared + m.margin_factor * s
        }
        AcceptancePlan::ExecutionLimit(e) => {
            for _ in 0..e.n {
                if stream.next_log(rng).exp() > e.limit {
                    return false;
                }
            }
            true
        }
    }
}

fn check_inputs(p: ParamPoint, plan: &AcceptancePlan, ar: Option<&ArModel>) -> Result<()> {
    plan.validate()?;
    ParamPoint::new(p.mu, p.q)?;
    if let Some(a) = ar {
        a.validate()?;
    }
    Ok(())
}

/// Simulates one batch inspection. Deterministic in `seed`.
pub fn simulate_batch(
    p: ParamPoint,
    plan: &AcceptancePlan,
    ar: Option<&ArModel>,
    seed: u64,
) -> Result<bool> {
    check_inputs(p, plan, ar)?;
    let mut rng = seed::rng(seed);
    Ok(batch_accepted(p, plan, ar, &mut rng, &mut Vec::new()))
}

/// Monte Carlo acceptance probability with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaEstimate {
    pub pa: f64,
    pub stderr: f64,
}

pub fn acceptance_probability(
    p: ParamPoint,
    plan: &AcceptancePlan,
    ar: Option<&ArModel>,
    n_sim: usize,
    seed: u64,
) -> Result<PaEstimate> {
    if n_sim < 100 {
        return Err(Error::domain(format!("n_sim must be >= 100, got {n_sim}")));
    }
    check_inputs(p, plan, ar)?;
    Ok(acceptance_probability_unchecked(p, plan, ar, n_sim, seed))
}

pub(crate) fn acceptance_probability_unchecked(
    p: ParamPoint,
    plan: &AcceptancePlan,
    ar: Option<&ArModel>,
    n_sim: usize,
    seed: u64,
) -> PaEstimate {
    let mut rng = seed::rng(seed);
    let mut buf = Vec::with_capacity(32);
    let accepted = (0..n_sim)
        .filter(|_| batch_accepted(p, plan, ar, &mut rng, &mut buf))
        .count();
    let pa = accepted as f64 / n_sim as f64;
    PaEstimate {
        pa,
        stderr: (pa * (1.0 - pa) / n_sim as f64).sqrt(),
    }
}

/// Exact acceptance probability where one exists: the execution plan with
/// independent measurements, `P(X <= limit)^n`.
pub fn closed_form_pa(p: ParamPoint, plan: &AcceptancePlan, ar: Option<&ArModel>) -> Option<f64> {
    match (plan, ar) {
        (AcceptancePlan::ExecutionLimit(e), None) => {
            let f = norm_cdf((e.limit.ln() - p.mu) / p.q);
            Some(f.powi(e.n as i32))
        }
        _ => None,
    }
}

/// Log of [`closed_form_pa`], computed without underflow for tiny values.
pub(crate) fn closed_form_log_pa(
    p: ParamPoint,
    plan: &AcceptancePlan,
    ar: Option<&ArModel>,
) -> Option<f64> {
    match (plan, ar) {
        (AcceptancePlan::ExecutionLimit(e), None) => {
            let z = (e.limit.ln() - p.mu) / p.q;
            // ln Phi(z) = ln(1 - sf(z)); use ln_1p when sf is small.
            let ln_f = if z > 0.0 {
                (-norm_sf(z)).ln_1p()
            } else {
                norm_cdf(z).ln()
            };
            Some(e.n as f64 * ln_f)
        }
        _ => None,
    }
}

/// Fraction of defective items for a batch at `p`.
pub fn defect_rate(p: ParamPoint, limit: f64, side: DefectSide) -> Result<f64> {
    ensure_positive("limit", limit)?;
    match side {
        DefectSide::Below => lognormal_cdf(&p, limit),
        DefectSide::Above => {
            if limit.is_infinite() {
                return Ok(0.0);
            }
            Ok(norm_sf((limit.ln() - p.mu) / p.q))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QualityAxis {
    DefectRate,
    Mean,
    CoV,
}

/// Quality levels to sweep and the parameter held fixed while sweeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Sweep {
    /// Defect rates in (0, 1) at a fixed CoV. Each rate is turned into a
    /// log-mean through the (stationary, when AR is on) marginal law.
    DefectRate {
        levels: Vec<f64>,
        fixed_cov: f64,
        /// Defaults to the plan's own threshold.
        #[serde(default)]
        limit: Option<f64>,
    },
    /// Raw batch means at a fixed CoV.
    Mean { levels: Vec<f64>, fixed_cov: f64 },
    /// CoVs at a fixed raw mean.
    CoV { levels: Vec<f64>, fixed_mean: f64 },
}

impl Sweep {
    pub fn axis(&self) -> QualityAxis {
        match self {
            Sweep::DefectRate { .. } => QualityAxis::DefectRate,
            Sweep::Mean { .. } => QualityAxis::Mean,
            Sweep::CoV { .. } => QualityAxis::CoV,
        }
    }

    pub fn levels(&self) -> &[f64] {
        match self {
            Sweep::DefectRate { levels, .. }
            | Sweep::Mean { levels, .. }
            | Sweep::CoV { levels, .. } => levels,
        }
    }

    /// Evenly spaced defect rates in `[lo, hi]`.
    pub fn defect_rates(lo: f64, hi: f64, count: usize, fixed_cov: f64) -> Self {
        let levels = (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count.max(2) - 1) as f64)
            .collect();
        Sweep::DefectRate {
            levels,
            fixed_cov,
            limit: None,
        }
    }

    fn point_for(
        &self,
        level: f64,
        plan: &AcceptancePlan,
        ar: Option<&ArModel>,
    ) -> Result<ParamPoint> {
        match self {
            Sweep::DefectRate {
                fixed_cov, limit, ..
            } => {
                if !(level > 0.0 && level < 1.0) {
                    return Err(Error::domain(format!(
                        "defect rate must lie in (0,1), got {level}"
                    )));
                }
                let limit = limit.unwrap_or_else(|| plan.defect_limit());
                ensure_positive("limit", limit)?;
                let q = LognormalSpec::new(1.0, *fixed_cov)?.q();
                let (mean_factor, q_eff) = match ar {
                    Some(a) => (a.mean_factor(), q * a.variance_factor().sqrt()),
                    None => (1.0, q),
                };
                let z = match plan.defect_side() {
                    DefectSide::Below => norm_quantile(level)?,
                    DefectSide::Above => norm_quantile(1.0 - level)?,
                };
                ParamPoint::new((limit.ln() - q_eff * z) / mean_factor, q)
            }
            Sweep::Mean { fixed_cov, .. } => Ok(LognormalSpec::new(level, *fixed_cov)?.point()),
            Sweep::CoV { fixed_mean, .. } => Ok(LognormalSpec::new(*fixed_mean, level)?.point()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcPoint {
    pub quality: f64,
    pub pa: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcCurve {
    pub quality_axis: QualityAxis,
    pub points: Vec<OcPoint>,
}

/// One acceptance-probability estimate per sweep level. Level `i` uses the
/// seed `seed::derive(seed, i)`, so results do not depend on evaluation order.
pub fn oc_curve(
    plan: &AcceptancePlan,
    ar: Option<&ArModel>,
    sweep: &Sweep,
    n_sim: usize,
    seed: u64,
) -> Result<OcCurve> {
    plan.validate()?;
    if let Some(a) = ar {
        a.validate()?;
    }
    if n_sim < 100 {
        return Err(Error::domain(format!("n_sim must be >= 100, got {n_sim}")));
    }
    let mut levels = sweep.levels().to_vec();
    if levels.len() < 2 {
        return Err(Error::domain(
            "an OC sweep needs at least two quality levels",
        ));
    }
    levels.sort_by(f64::total_cmp);
    let points: Vec<ParamPoint> = levels
        .iter()
        .map(|&l| sweep.point_for(l, plan, ar))
        .collect::<Result<_>>()?;
    let estimates = par_map(points.len(), |i| {
        acceptance_probability_unchecked(points[i], plan, ar, n_sim, seed::derive(seed, i as u64))
    });
    Ok(OcCurve {
        quality_axis: sweep.axis(),
        points: levels
            .iter()
            .zip(estimates)
            .map(|(&quality, e)| OcPoint {
                quality,
                pa: e.pa,
                stderr: e.stderr,
            })
            .collect(),
    })
}

impl OcCurve {
    pub const CSV_HEADER: &'static str = "quality,pa,stderr";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.quality, p.pa, p.stderr);
        }
        s
    }

    /// Parses the CSV written by [`OcCurve::to_csv`]; the axis is not stored
    /// in the file and has to be supplied.
    pub fn from_csv(text: &str, quality_axis: QualityAxis) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(Error::Csv(format!(
                "expected header `{}`",
                Self::CSV_HEADER
            )));
        }
        let points = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 3 {
                    return Err(Error::Csv(format!("expected 3 fields in `{l}`")));
                }
                let num = |s: &str| {
                    s.parse::<f64>()
                        .map_err(|e| Error::Csv(format!("`{s}`: {e}")))
                };
                Ok(OcPoint {
                    quality: num(f[0])?,
                    pa: num(f[1])?,
                    stderr: num(f[2])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            quality_axis,
            points,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
