//! Scenario files, end-to-end runs and report generation.
//!
//! A scenario lists the quality-controlled channels (prior, plans per stage,
//! optional AR(2) dependence, homogeneity degree), the wall model, the
//! calibration constants and sampler settings. [`evaluate`] turns it into a
//! [`RunOutput`]: a structured [`RunReport`] plus the text of every output
//! file. [`run`] additionally writes those files.
//!
//! Scenario files are TOML. Every table is strict: unknown keys are errors,
//! and errors carry the dotted path of the offending key.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayes::{
    cov_summary, cov_summary_points, predictive_density_points, sequential_update, CovSummary,
    McmcConfig, PaEstimator,
};
use crate::calib::{
    scenario_table, stage_calibration, CalibrationConfig, Channel, ChannelSet, ScenarioRow,
    StageCalibration, Subset,
};
use crate::error::{Error, Result};
use crate::plans::{oc_curve, AcceptancePlan, ArModel, OcCurve, Sweep};
use crate::priors::{sample_prior, NormalGammaHyper, ParamPoint};
use crate::seed;
use crate::stats::par_map;
use crate::wall::{design_point, DesignPoint, MasonrySpec, WallGeometry};

/// Environment variable that overrides the scenario's output directory.
pub const OUT_DIR_ENV: &str = "QCREL_OUT";
/// Conventional scenario file extension.
pub const SCENARIO_EXTENSION: &str = "scenario";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    #[serde(default)]
    pub calib: CalibrationConfig,
    #[serde(default)]
    pub mcmc: McmcSettings,
    #[serde(default)]
    pub report: ReportSettings,
    #[serde(default)]
    pub oc: OcSettings,
    #[serde(default)]
    pub wall: Option<WallSection>,
    pub channels: Vec<ChannelSpec>,
    #[serde(default)]
    pub subsets: Vec<Subset>,
}

/// Sampler settings. The seed comes from the scenario's top-level `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcSettings {
    pub n_chains: usize,
    pub n_samples: usize,
    pub burn_in: usize,
    pub proposal_scale_mu: f64,
    pub proposal_scale_logq: f64,
    pub pa_estimator: PaEstimator,
    pub adapt: bool,
}

impl Default for McmcSettings {
    fn default() -> Self {
        let c = McmcConfig::default();
        Self {
            n_chains: c.n_chains,
            n_samples: c.n_samples,
            burn_in: c.burn_in,
            proposal_scale_mu: c.proposal_scale_mu,
            proposal_scale_logq: c.proposal_scale_logq,
            pa_estimator: c.pa_estimator,
            adapt: c.adapt,
        }
    }
}

impl McmcSettings {
    pub fn config(&self, seed: u64) -> McmcConfig {
        McmcConfig {
            n_chains: self.n_chains,
            n_samples: self.n_samples,
            burn_in: self.burn_in,
            proposal_scale_mu: self.proposal_scale_mu,
            proposal_scale_logq: self.proposal_scale_logq,
            pa_estimator: self.pa_estimator,
            seed,
            adapt: self.adapt,
        }
    }
}

/// Which summary of the CoV draws feeds calibration column (1).
/// Column (2) always uses the upper end of the 75 % interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VStatistic {
    /// CoV of the predictive law, parameters integrated out.
    #[default]
    Predictive,
    /// Mean of the per-draw CoV.
    Mean,
    /// Median of the per-draw CoV.
    Median,
}

impl VStatistic {
    pub fn pick(self, s: &CovSummary) -> f64 {
        match self {
            VStatistic::Predictive => s.predictive_v,
            VStatistic::Mean => s.mean_v,
            VStatistic::Median => s.median_v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSettings {
    pub q_decimals: usize,
    pub factor_decimals: usize,
    /// Keep every n-th retained draw in chain CSVs and density mixtures.
    pub chain_thin: usize,
    pub density_points: usize,
    pub v_statistic: VStatistic,
    /// Used when neither `--out` nor the environment override is given.
    pub out_dir: Option<String>,
}

impl Default for ReportSettings {
    fn default() -> Self {
        Self {
            q_decimals: 3,
            factor_decimals: 2,
            chain_thin: 10,
            density_points: 400,
            v_statistic: VStatistic::default(),
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcSettings {
    pub n_sim: usize,
    /// Sweep points used when a channel gives no explicit sweep.
    pub points: usize,
}

impl Default for OcSettings {
    fn default() -> Self {
        Self {
            n_sim: 20_000,
            points: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WallSection {
    pub geometry: WallGeometry,
    pub masonry: MasonrySpec,
}

/// Wall-model inputs a channel can take its homogeneity degree from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WallInput {
    #[serde(rename = "f_b")]
    UnitStrength,
    #[serde(rename = "f_m")]
    MortarStrength,
    #[serde(rename = "r_e")]
    Eccentricity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Homogeneity {
    Fixed(f64),
    Wall(WallInput),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelMode {
    #[default]
    Mcmc,
    FixedV,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub mean: f64,
    pub v0: f64,
    pub n: u32,
}

/// Pinned CoVs: incoming plus one value per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedV {
    pub incoming: f64,
    #[serde(default)]
    pub stages: Vec<f64>,
    /// Upper ends of the 75 % intervals; default to the pinned values.
    #[serde(default)]
    pub upper_incoming: Option<f64>,
    #[serde(default)]
    pub upper_stages: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub name: String,
    pub homogeneity: Homogeneity,
    #[serde(default)]
    pub mode: ChannelMode,
    #[serde(default)]
    pub prior: Option<PriorSpec>,
    #[serde(default)]
    pub fixed_v: Option<FixedV>,
    /// One acceptance plan per QC stage.
    #[serde(default)]
    pub plans: Vec<AcceptancePlan>,
    #[serde(default)]
    pub ar: Option<ArModel>,
    #[serde(default)]
    pub oc: Option<Sweep>,
}

impl ChannelSpec {
    pub fn stage_count(&self) -> usize {
        match self.mode {
            ChannelMode::Mcmc => self.plans.len(),
            ChannelMode::FixedV => self.fixed_v.as_ref().map_or(0, |f| f.stages.len()),
        }
    }
}

fn scenario_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Scenario {
        path: path.into(),
        message: message.into(),
    }
}

/// Parses and validates scenario text.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let de = toml::de::Deserializer::parse(text)
        .map_err(|e| scenario_err(".", e.message().to_string()))?;
    let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().message().to_string();
        scenario_err(path, message)
    })?;
    scenario.validate()?;
    Ok(scenario)
}

/// Reads, parses and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scenario(&text).map_err(|e| e.context(format!("scenario `{}`", path.display())))
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let wrap = |path: String| move |e: Error| scenario_err(path, e.to_string());
        self.calib.validate().map_err(wrap("calib".into()))?;
        self.mcmc
            .config(self.seed)
            .validate()
            .map_err(wrap("mcmc".into()))?;
        if self.report.chain_thin == 0 {
            return Err(scenario_err("report.chain_thin", "must be >= 1"));
        }
        if self.report.density_points < 2 {
            return Err(scenario_err("report.density_points", "must be >= 2"));
        }
        if self.oc.n_sim < 100 || self.oc.points < 2 {
            return Err(scenario_err("oc", "n_sim must be >= 100 and points >= 2"));
        }
        if let Some(w) = &self.wall {
            w.geometry
                .validate()
                .map_err(wrap("wall.geometry".into()))?;
            w.masonry.validate().map_err(wrap("wall.masonry".into()))?;
        }
        if self.channels.is_empty() {
            return Err(scenario_err("channels", "at least one channel is required"));
        }
        let mut names = BTreeSet::new();
        for (i, c) in self.channels.iter().enumerate() {
            let at = |key: &str| format!("channels[{i}].{key}");
            if !names.insert(c.name.as_str()) {
                return Err(Error::DuplicateChannel(c.name.clone()));
            }
            match c.homogeneity {
                Homogeneity::Fixed(n) if !n.is_finite() => {
                    return Err(scenario_err(at("homogeneity"), "must be finite"))
                }
                Homogeneity::Wall(_) if self.wall.is_none() => {
                    return Err(scenario_err(
                        at("homogeneity"),
                        "a wall binding needs a [wall] table",
                    ))
                }
                _ => {}
            }
            for (k, plan) in c.plans.iter().enumerate() {
                plan.validate().map_err(wrap(at(&format!("plans[{k}]"))))?;
            }
            if let Some(ar) = &c.ar {
                ar.validate().map_err(wrap(at("ar")))?;
            }
            if let Some(p) = &c.prior {
                NormalGammaHyper::from_prior(p.mean, p.v0, p.n).map_err(wrap(at("prior")))?;
            }
            if let Some(f) = &c.fixed_v {
                let all = std::iter::once(f.incoming).chain(f.stages.iter().copied());
                let upper = f
                    .upper_incoming
                    .into_iter()
                    .chain(f.upper_stages.iter().flatten().copied());
                if all.chain(upper).any(|v| !(v > 0.0 && v.is_finite())) {
                    return Err(scenario_err(at("fixed_v"), "CoVs must be finite and > 0"));
                }
                if f.upper_stages
                    .as_ref()
                    .is_some_and(|u| u.len() != f.stages.len())
                {
                    return Err(scenario_err(
                        at("fixed_v.upper_stages"),
                        "needs one value per stage",
                    ));
                }
                if !c.plans.is_empty() && !f.stages.is_empty() && f.stages.len() != c.plans.len() {
                    return Err(scenario_err(
                        at("fixed_v.stages"),
                        "needs one value per plan",
                    ));
                }
            }
            match c.mode {
                ChannelMode::Mcmc => {
                    if c.prior.is_none() {
                        return Err(scenario_err(at("prior"), "required in mcmc mode"));
                    }
                }
                ChannelMode::FixedV => {
                    if c.fixed_v.is_none() {
                        return Err(scenario_err(at("fixed_v"), "required in fixed-v mode"));
                    }
                }
            }
            if let Some(s) = &c.oc {
                if s.levels().is_empty() {
                    return Err(scenario_err(at("oc.levels"), "must not be empty"));
                }
            }
        }
        let counts: BTreeSet<usize> = self
            .channels
            .iter()
            .map(ChannelSpec::stage_count)
            .filter(|&n| n > 0)
            .collect();
        if counts.len() > 1 {
            return Err(scenario_err(
                "channels",
                format!("controlled channels disagree on the stage count: {counts:?}"),
            ));
        }
        let max_stage = counts.into_iter().next().unwrap_or(0);
        for (i, s) in self.subsets.iter().enumerate() {
            for n in &s.channels {
                if !names.contains(n.as_str()) {
                    return Err(scenario_err(
                        format!("subsets[{i}].channels"),
                        format!("unknown channel `{n}`"),
                    ));
                }
            }
            if s.stage == 0 || s.stage > max_stage {
                return Err(scenario_err(
                    format!("subsets[{i}].stage"),
                    format!("must lie in 1..={max_stage}"),
                ));
            }
        }
        Ok(())
    }

    pub fn channel(&self, name: &str) -> Result<&ChannelSpec> {
        self.channels
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownChannel(name.to_string()))
    }

    /// SHA-256 of the canonical JSON form of the scenario.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scenario serialises");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Same scenario with every channel pinned to the CoVs of a finished run.
    pub fn pinned_to(&self, report: &RunReport) -> Result<Scenario> {
        let mut out = self.clone();
        for c in &mut out.channels {
            let r = report
                .channels
                .iter()
                .find(|r| r.name == c.name)
                .ok_or_else(|| Error::UnknownChannel(c.name.clone()))?;
            c.mode = ChannelMode::FixedV;
            c.fixed_v = Some(FixedV {
                incoming: r.v[0],
                stages: r.v[1..].to_vec(),
                upper_incoming: Some(r.v_upper[0]),
                upper_stages: Some(r.v_upper[1..].to_vec()),
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Replaces the scenario seed.
    pub seed: Option<u64>,
    /// Treat every channel that carries `fixed_v` values as fixed-V.
    pub force_fixed_v: bool,
    /// Skip OC curve files.
    pub skip_oc: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub stage: usize,
    pub acceptance_rate: f64,
    pub rhat_mu: f64,
    pub rhat_q: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub name: String,
    pub mode: ChannelMode,
    pub n_i: f64,
    /// CoV used for calibration column (1): incoming, then one per stage.
    pub v: Vec<f64>,
    /// Upper end of the 75 % interval, same layout; feeds column (2).
    pub v_upper: Vec<f64>,
    /// Full summaries in MCMC mode: incoming, then one per stage.
    pub summaries: Vec<CovSummary>,
    pub diagnostics: Vec<ChainDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationColumn {
    pub q_in: f64,
    pub stages: Vec<StageCalibration>,
    pub subsets: Vec<ScenarioRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub provenance: Provenance,
    pub wall: Option<DesignPoint>,
    pub channels: Vec<ChannelReport>,
    /// Column (1): the configured V statistic.
    pub expected: CalibrationColumn,
    /// Column (2): upper ends of the 75 % intervals.
    pub upper: CalibrationColumn,
    pub warnings: Vec<String>,
}

/// A report plus the contents of every output file, keyed by file name.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: RunReport,
    pub files: BTreeMap<String, String>,
}

/// Stage label: "incoming" or "stageN".
fn stage_tag(stage: usize) -> String {
    if stage == 0 {
        "incoming".into()
    } else {
        format!("stage{stage}")
    }
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

fn homogeneity_value(h: Homogeneity, wall: Option<&DesignPoint>) -> Result<f64> {
    match (h, wall) {
        (Homogeneity::Fixed(n), _) => Ok(n),
        (Homogeneity::Wall(input), Some(dp)) => Ok(match input {
            WallInput::UnitStrength => dp.n_f_b,
            WallInput::MortarStrength => dp.n_f_m,
            WallInput::Eccentricity => dp.n_r_e,
        }),
        (Homogeneity::Wall(_), None) => Err(Error::domain("wall binding without a wall model")),
    }
}

struct ChannelResult {
    report: ChannelReport,
    files: Vec<(String, String)>,
    warnings: Vec<String>,
}

fn fixed_channel(spec: &ChannelSpec, n_i: f64) -> Result<ChannelResult> {
    let f = spec
        .fixed_v
        .as_ref()
        .ok_or_else(|| scenario_err(format!("channel `{}`", spec.name), "no fixed_v values"))?;
    let mut v = vec![f.incoming];
    v.extend(&f.stages);
    let mut v_upper = vec![f.upper_incoming.unwrap_or(f.incoming)];
    v_upper.extend(f.upper_stages.as_ref().unwrap_or(&f.stages));
    Ok(ChannelResult {
        report: ChannelReport {
            name: spec.name.clone(),
            mode: ChannelMode::FixedV,
            n_i,
            v,
            v_upper,
            summaries: Vec::new(),
            diagnostics: Vec::new(),
        },
        files: Vec::new(),
        warnings: Vec::new(),
    })
}

/// Linear grid covering the predictive law of the prior.
fn density_grid(h: &NormalGammaHyper, points: usize) -> Vec<f64> {
    let s = (h.beta0 / (h.alpha0 - 1.0).max(0.5) * (1.0 + 1.0 / h.kappa0)).sqrt();
    let (lo, hi) = ((h.mu0 - 7.0 * s).exp(), (h.mu0 + 7.0 * s).exp());
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

fn mcmc_channel(
    sc: &Scenario,
    spec: &ChannelSpec,
    n_i: f64,
    ch_seed: u64,
) -> Result<ChannelResult> {
    let p = spec.prior.expect("validated");
    let prior = NormalGammaHyper::from_prior(p.mean, p.v0, p.n)?;
    let cfg = sc.mcmc.config(seed::derive(ch_seed, 1));
    let stem = file_stem(&spec.name);
    let thin = sc.report.chain_thin;
    let grid = density_grid(&prior, sc.report.density_points);
    let mut files = Vec::new();
    let mut warnings = Vec::new();

    let prior_draws = sample_prior(
        &prior,
        cfg.n_chains * cfg.retained(),
        seed::derive(ch_seed, 2),
    )?;
    let mut summaries = vec![cov_summary_points(&prior_draws)?];
    let thinned: Vec<ParamPoint> = prior_draws.iter().step_by(thin).copied().collect();
    let density = predictive_density_points(&thinned, &grid).map_err(|e| e.context("incoming"))?;
    files.push((format!("predictive_{stem}_incoming.csv"), density.to_csv()));

    let stages: Vec<(AcceptancePlan, Option<ArModel>)> =
        spec.plans.iter().map(|pl| (*pl, spec.ar)).collect();
    let mut diagnostics = Vec::new();
    if !stages.is_empty() {
        let chains = sequential_update(&prior, &stages, &cfg)?;
        for (k, chain) in chains.iter().enumerate() {
            let stage = k + 1;
            summaries.push(cov_summary(chain)?);
            diagnostics.push(ChainDiagnostics {
                stage,
                acceptance_rate: chain.acceptance_rate,
                rhat_mu: chain.rhat_mu,
                rhat_q: chain.rhat_q,
                converged: chain.converged,
            });
            if !chain.converged {
                warnings.push(format!(
                    "channel `{}` stage {stage}: chains not converged (R-hat mu {:.3}, q {:.3})",
                    spec.name, chain.rhat_mu, chain.rhat_q
                ));
            }
            files.push((
                format!("chain_{stem}_{}.csv", stage_tag(stage)),
                chain.to_csv(thin),
            ));
            let pts: Vec<ParamPoint> = chain
                .chains
                .iter()
                .flat_map(|c| c.iter().step_by(thin))
                .copied()
                .collect();
            let density = predictive_density_points(&pts, &grid)
                .map_err(|e| e.context(format!("stage {stage}")))?;
            files.push((
                format!("predictive_{stem}_{}.csv", stage_tag(stage)),
                density.to_csv(),
            ));
        }
    }
    let v = summaries
        .iter()
        .map(|s| sc.report.v_statistic.pick(s))
        .collect();
    let v_upper = summaries.iter().map(|s| s.ci75.hi).collect();
    Ok(ChannelResult {
        report: ChannelReport {
            name: spec.name.clone(),
            mode: ChannelMode::Mcmc,
            n_i,
            v,
            v_upper,
            summaries,
            diagnostics,
        },
        files,
        warnings,
    })
}

/// Independent and AR(2) OC curves for the first-stage plan of a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct OcPair {
    pub independent: OcCurve,
    pub autocorrelated: OcCurve,
}

/// Default defect-rate sweep when a channel gives none.
fn default_sweep(spec: &ChannelSpec, points: usize) -> Sweep {
    let cov = spec
        .prior
        .map(|p| p.v0)
        .or_else(|| spec.fixed_v.as_ref().map(|f| f.incoming))
        .unwrap_or(0.2);
    Sweep::defect_rates(0.001, 0.7, points, cov)
}

pub fn oc_pair(sc: &Scenario, channel: &str, seed: u64) -> Result<OcPair> {
    let spec = sc.channel(channel)?;
    let plan = spec
        .plans
        .first()
        .ok_or_else(|| Error::domain(format!("channel `{channel}` has no acceptance plan")))?;
    let sweep = spec
        .oc
        .clone()
        .unwrap_or_else(|| default_sweep(spec, sc.oc.points));
    let ar = spec.ar.unwrap_or_default();
    // Common random numbers for both curves.
    Ok(OcPair {
        independent: oc_curve(plan, None, &sweep, sc.oc.n_sim, seed)?,
        autocorrelated: oc_curve(plan, Some(&ar), &sweep, sc.oc.n_sim, seed)?,
    })
}

/// Writes the OC pair of one channel into `dir`; returns the file paths.
pub fn emit_oc(sc: &Scenario, channel: &str, dir: &Path, seed: u64) -> Result<(PathBuf, PathBuf)> {
    let pair = oc_pair(sc, channel, seed)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = file_stem(channel);
    let a = dir.join(format!("oc_{stem}_independent.csv"));
    let b = dir.join(format!("oc_{stem}_ar2.csv"));
    pair.independent.write(&a)?;
    pair.autocorrelated.write(&b)?;
    Ok((a, b))
}

fn calibration_column(
    channels: &[ChannelReport],
    pick: impl Fn(&ChannelReport) -> &[f64],
    subsets: &[Subset],
    cfg: &CalibrationConfig,
) -> Result<CalibrationColumn> {
    let set = ChannelSet::new(
        channels
            .iter()
            .map(|c| {
                let v = pick(c);
                Channel::new(c.name.clone(), c.n_i, v[0], v[1..].to_vec())
            })
            .collect(),
    )?;
    let (q_in, stages) = stage_calibration(&set, cfg)?;
    Ok(CalibrationColumn {
        q_in,
        stages,
        subsets: scenario_table(&set, subsets, cfg)?,
    })
}

/// Runs the whole scenario in memory.
pub fn evaluate(scenario: &Scenario, opts: RunOptions) -> Result<RunOutput> {
    let mut sc = scenario.clone();
    if let Some(s) = opts.seed {
        sc.seed = s;
    }
    if opts.force_fixed_v {
        for c in &mut sc.channels {
            if c.fixed_v.is_some() {
                c.mode = ChannelMode::FixedV;
            }
        }
    }
    sc.validate()?;

    let wall = match &sc.wall {
        Some(w) => {
            Some(design_point(&w.geometry, &w.masonry).map_err(|e| e.context("wall model"))?)
        }
        None => None,
    };
    let results = par_map(sc.channels.len(), |i| {
        let spec = &sc.channels[i];
        let n_i = homogeneity_value(spec.homogeneity, wall.as_ref())?;
        match spec.mode {
            ChannelMode::FixedV => fixed_channel(spec, n_i),
            ChannelMode::Mcmc => mcmc_channel(&sc, spec, n_i, seed::derive(sc.seed, i as u64)),
        }
        .map_err(|e| e.context(format!("channel `{}`", spec.name)))
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut files = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut channels = Vec::new();
    for r in results {
        files.extend(r.files);
        warnings.extend(r.warnings);
        channels.push(r.report);
    }
    for c in &channels {
        let cc = Channel::new(c.name.clone(), c.n_i, c.v[0], c.v[1..].to_vec());
        warnings.extend(cc.monotonicity_warnings());
    }

    let expected = calibration_column(&channels, |c| &c.v, &sc.subsets, &sc.calib)?;
    let upper = calibration_column(&channels, |c| &c.v_upper, &sc.subsets, &sc.calib)?;

    if !opts.skip_oc {
        let oc_channels: Vec<usize> = (0..sc.channels.len())
            .filter(|&i| sc.channels[i].oc.is_some() && !sc.channels[i].plans.is_empty())
            .collect();
        let pairs = par_map(oc_channels.len(), |j| {
            let i = oc_channels[j];
            oc_pair(
                &sc,
                &sc.channels[i].name,
                seed::derive(seed::derive(sc.seed, i as u64), 3),
            )
        });
        for (j, pair) in pairs.into_iter().enumerate() {
            let pair = pair?;
            let stem = file_stem(&sc.channels[oc_channels[j]].name);
            files.insert(
                format!("oc_{stem}_independent.csv"),
                pair.independent.to_csv(),
            );
            files.insert(format!("oc_{stem}_ar2.csv"), pair.autocorrelated.to_csv());
        }
    }

    let report = RunReport {
        provenance: Provenance {
            seed: sc.seed,
            config_hash: sc.config_hash(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
        wall,
        channels,
        expected,
        upper,
        warnings,
    };
    files.insert("v_trajectory.csv".into(), v_trajectory_csv(&report));
    files.insert(
        "calibration.csv".into(),
        calibration_csv(&report, sc.calib.gamma_base),
    );
    files.insert("scenario_table.csv".into(), scenario_table_csv(&report));
    files.insert(
        "scenario_table.txt".into(),
        scenario_table_text(&report, &sc.report),
    );
    files.insert("report.txt".into(), report_text(&report, &sc));
    files.insert(
        "report.json".into(),
        serde_json::to_string_pretty(&report).map_err(|e| Error::Csv(e.to_string()))? + "\n",
    );
    Ok(RunOutput { report, files })
}

/// Output directory: explicit argument, else the environment override, else
/// the scenario setting, else `out`.
pub fn resolve_out_dir(explicit: Option<&Path>, scenario: &Scenario) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_DIR_ENV).filter(|p| !p.is_empty()) {
        return PathBuf::from(p);
    }
    scenario
        .report
        .out_dir
        .as_deref()
        .map_or_else(|| PathBuf::from("out"), PathBuf::from)
}

pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in &out.files {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Evaluates the scenario and writes every output file into `out_dir`.
pub fn run(scenario: &Scenario, out_dir: &Path, opts: RunOptions) -> Result<RunReport> {
    let out = evaluate(scenario, opts)?;
    write_outputs(&out, out_dir)?;
    Ok(out.report)
}

fn v_trajectory_csv(r: &RunReport) -> String {
    let mut s =
        String::from("channel,stage,v,v_upper,mean_v,median_v,ci75_lo,ci75_hi,predictive_v\n");
    for c in &r.channels {
        for (k, (v, u)) in c.v.iter().zip(&c.v_upper).enumerate() {
            let _ = write!(s, "{},{},{v},{u}", c.name, stage_tag(k));
            match c.summaries.get(k) {
                Some(m) => {
                    let _ = writeln!(
                        s,
                        ",{},{},{},{},{}",
                        m.mean_v, m.median_v, m.ci75.lo, m.ci75.hi, m.predictive_v
                    );
                }
                None => s.push_str(",,,,,\n"),
            }
        }
    }
    s
}

fn calibration_csv(r: &RunReport, gamma_base: f64) -> String {
    let mut s = String::from("column,stage,q_r,delta_q_r,r,gamma\n");
    for (label, col) in [("expected", &r.expected), ("upper", &r.upper)] {
        let _ = writeln!(s, "{label},incoming,{},0,1,{gamma_base}", col.q_in);
        for st in &col.stages {
            let _ = writeln!(
                s,
                "{label},{},{},{},{},{}",
                stage_tag(st.stage),
                st.q_r,
                st.delta_q_r,
                st.r,
                st.gamma
            );
        }
    }
    s
}

fn scenario_table_csv(r: &RunReport) -> String {
    let mut s = String::from("task,q_in_1,q_out_1,r_1,gamma_1,q_in_2,q_out_2,r_2,gamma_2\n");
    for (a, b) in r.expected.subsets.iter().zip(&r.upper.subsets) {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            a.name, a.q_in, a.q_out, a.r, a.gamma, b.q_in, b.q_out, b.r, b.gamma
        );
    }
    s
}

/// Renders rows as a left-aligned first column and right-aligned others.
fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|j| {
            rows.iter()
                .filter_map(|r| r.get(j))
                .map(|c| c.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut s = String::new();
    for r in rows {
        let mut line = String::new();
        for (j, cell) in r.iter().enumerate() {
            if j == 0 {
                let _ = write!(line, "{cell:<w$}", w = widths[0]);
            } else {
                let _ = write!(line, "  {cell:>w$}", w = widths[j]);
            }
        }
        s.push_str(line.trim_end());
        s.push('\n');
    }
    s
}

fn scenario_table_text(r: &RunReport, rs: &ReportSettings) -> String {
    let d = rs.factor_decimals;
    let mut rows = vec![vec![
        "Quality control task".to_string(),
        "r (1)".into(),
        "gamma_M (1)".into(),
        "r (2)".into(),
        "gamma_M (2)".into(),
    ]];
    for (a, b) in r.expected.subsets.iter().zip(&r.upper.subsets) {
        rows.push(vec![
            a.name.clone(),
            format!("{:.d$}", a.r),
            format!("{:.d$}", a.gamma),
            format!("{:.d$}", b.r),
            format!("{:.d$}", b.gamma),
        ]);
    }
    aligned(&rows)
}

fn ordinal(k: usize) -> String {
    match k {
        1 => "1st".into(),
        2 => "2nd".into(),
        3 => "3rd".into(),
        _ => format!("{k}th"),
    }
}

fn stage_table(
    r: &RunReport,
    col: &CalibrationColumn,
    pick: impl Fn(&ChannelReport) -> &[f64],
    rs: &ReportSettings,
) -> String {
    let (qd, fd) = (rs.q_decimals, rs.factor_decimals);
    let n_stages = col.stages.len();
    let mut rows = Vec::new();
    let mut head = vec!["Component".to_string(), "n".into(), "Incoming".into()];
    head.extend((1..=n_stages).map(|k| format!("{} outgoing", ordinal(k))));
    rows.push(head);
    for c in &r.channels {
        let v = pick(c);
        let mut row = vec![
            c.name.clone(),
            format!("{:.3}", c.n_i),
            format!("{:.qd$}", v[0]),
        ];
        row.extend((1..=n_stages).map(|k| {
            v.get(k)
                .map_or_else(|| "No QC".to_string(), |x| format!("{x:.qd$}"))
        }));
        rows.push(row);
    }
    let mut q = vec![
        "Q_R".to_string(),
        String::new(),
        format!("{:.qd$}", col.q_in),
    ];
    q.extend(col.stages.iter().map(|s| format!("{:.qd$}", s.q_r)));
    rows.push(q);
    let mut head = vec![String::new(), String::new(), String::new()];
    head.extend((1..=n_stages).map(|k| format!("{} QC", ordinal(k))));
    rows.push(head);
    let line = |label: &str, f: &dyn Fn(&StageCalibration) -> String| {
        let mut row = vec![label.to_string(), String::new(), String::new()];
        row.extend(col.stages.iter().map(f));
        row
    };
    rows.push(line("Delta Q_R", &|s| format!("{:.qd$}", s.delta_q_r)));
    rows.push(line("Improvement factor r", &|s| format!("{:.fd$}", s.r)));
    rows.push(line("Improved gamma_M", &|s| format!("{:.fd$}", s.gamma)));
    aligned(&rows)
}

fn report_text(r: &RunReport, sc: &Scenario) -> String {
    let rs = &sc.report;
    let mut s = String::new();
    let p = &r.provenance;
    let _ = writeln!(
        s,
        "qcrel {} | seed {} | config sha256 {}",
        p.version, p.seed, p.config_hash
    );
    s.push('\n');
    if let Some(w) = &r.wall {
        let _ = writeln!(s, "Wall design point");
        let rows = vec![
            vec!["f_k [MPa]".to_string(), format!("{:.2}", w.f_k)],
            vec!["r_h".into(), format!("{:.2}", w.r_h)],
            vec!["r_e".into(), format!("{:.3}", w.r_e)],
            vec!["A".into(), format!("{:.3}", w.a)],
            vec!["lambda".into(), format!("{:.3}", w.lambda)],
            vec!["Phi".into(), format!("{:.3}", w.phi)],
            vec!["N_R [kN/m]".into(), format!("{:.1}", w.resistance)],
            vec!["n_f_b".into(), format!("{:.3}", w.n_f_b)],
            vec!["n_f_m".into(), format!("{:.3}", w.n_f_m)],
            vec!["n_r_e".into(), format!("{:.3}", w.n_r_e)],
        ];
        s.push_str(&aligned(&rows));
        s.push('\n');
    }
    let stat = match rs.v_statistic {
        VStatistic::Predictive => "predictive CoV",
        VStatistic::Mean => "mean CoV",
        VStatistic::Median => "median CoV",
    };
    let _ = writeln!(s, "Safety improvement, column (1): {stat}");
    s.push_str(&stage_table(r, &r.expected, |c| &c.v, rs));
    s.push('\n');
    let _ = writeln!(
        s,
        "Safety improvement, column (2): upper end of the 75% interval"
    );
    s.push_str(&stage_table(r, &r.upper, |c| &c.v_upper, rs));
    if !r.expected.subsets.is_empty() {
        s.push('\n');
        let _ = writeln!(s, "Improvement by quality control task");
        s.push_str(&scenario_table_text(r, rs));
    }
    let mcmc: Vec<&ChannelReport> = r
        .channels
        .iter()
        .filter(|c| !c.summaries.is_empty())
        .collect();
    if !mcmc.is_empty() {
        s.push('\n');
        let _ = writeln!(s, "Posterior CoV summaries");
        let mut rows = vec![vec![
            "Channel".to_string(),
            "Stage".into(),
            "mean V".into(),
            "median V".into(),
            "75% lo".into(),
            "75% hi".into(),
            "predictive V".into(),
            "accept".into(),
            "R-hat mu".into(),
            "R-hat q".into(),
        ]];
        for c in mcmc {
            for (k, m) in c.summaries.iter().enumerate() {
                let diag = k.checked_sub(1).and_then(|i| c.diagnostics.get(i));
                let mut row = vec![
                    c.name.clone(),
                    stage_tag(k),
                    format!("{:.3}", m.mean_v),
                    format!("{:.3}", m.median_v),
                    format!("{:.3}", m.ci75.lo),
                    format!("{:.3}", m.ci75.hi),
                    format!("{:.3}", m.predictive_v),
                ];
                match diag {
                    Some(d) => row.extend([
                        format!("{:.2}", d.acceptance_rate),
                        format!("{:.3}", d.rhat_mu),
                        format!("{:.3}", d.rhat_q),
                    ]),
                    None => row.extend(["-".to_string(), "-".into(), "-".into()]),
                }
                rows.push(row);
            }
        }
        s.push_str(&aligned(&rows));
    }
    if !r.warnings.is_empty() {
        s.push('\n');
        let _ = writeln!(s, "Warnings");
        for w in &r.warnings {
            let _ = writeln!(s, "- {w}");
        }
    }
    s
}
