//! Improvement factors and recalibrated partial safety factors.
//!
//! The resistance is treated as a product of lognormal inputs,
//! `log R = sum n_i log X_i`, so its log-space standard deviation is
//! `Q_R = sqrt(sum n_i^2 Q_i^2)` and the partial factor is
//! `gamma_R = b exp((alpha_R beta - k) Q_R)`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};

/// Log-space standard deviation of a lognormal with CoV `v`.
pub fn q_of_v(v: f64) -> Result<f64> {
    ensure_positive("coefficient of variation", v)?;
    Ok((v * v).ln_1p().sqrt())
}

/// CoV of a lognormal with log-space standard deviation `q`.
pub fn v_of_q(q: f64) -> Result<f64> {
    ensure_positive("log-space standard deviation", q)?;
    Ok((q * q).exp_m1().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    /// Resistance sensitivity factor.
    pub alpha_r: f64,
    /// Target reliability index.
    pub beta_t: f64,
    /// Fractile factor of the characteristic value.
    pub k_fractile: f64,
    /// Model bias.
    pub bias_b: f64,
    /// Partial factor the code prescribes without extra quality control.
    pub gamma_base: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            alpha_r: 0.8,
            beta_t: 3.8,
            k_fractile: 1.645,
            bias_b: 1.0,
            gamma_base: 1.5,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_positive("alpha_r", self.alpha_r)?;
        ensure_positive("beta_t", self.beta_t)?;
        ensure_positive("k_fractile", self.k_fractile)?;
        ensure_positive("bias_b", self.bias_b)?;
        ensure_positive("gamma_base", self.gamma_base)?;
        if self.alpha_r > 1.0 {
            return Err(Error::domain(format!(
                "alpha_r must be <= 1, got {}",
                self.alpha_r
            )));
        }
        Ok(())
    }

    /// `alpha_r * beta_t - k_fractile` (1.395 with the defaults).
    pub fn coefficient(&self) -> f64 {
        self.alpha_r * self.beta_t - self.k_fractile
    }
}

/// `r = exp((alpha_R beta - k) (q_in - q_out))`.
///
/// Works equally with CoVs in place of log-space deviations (the
/// single-parameter form); the two agree only while `V` is small.
pub fn improvement_factor(q_in: f64, q_out: f64, cfg: &CalibrationConfig) -> f64 {
    (cfg.coefficient() * (q_in - q_out)).exp()
}

/// `gamma_R = b exp((alpha_R beta - k) q_r)`.
pub fn partial_safety_factor(q_r: f64, cfg: &CalibrationConfig) -> f64 {
    cfg.bias_b * (cfg.coefficient() * q_r).exp()
}

/// The code factor divided by the improvement factor. `r < 1` is allowed
/// and means quality control made things worse.
pub fn improved_gamma(cfg: &CalibrationConfig, r: f64) -> f64 {
    cfg.gamma_base / r
}

/// Which variability value to read from a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Incoming,
    /// Outgoing after QC stage `k` (1-based).
    Stage(usize),
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Incoming => write!(f, "incoming"),
            Stage::Stage(k) => write!(f, "stage {k}"),
        }
    }
}

/// One input of the resistance model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    /// Homogeneity degree `n_i`.
    pub n_i: f64,
    pub v_in: f64,
    /// Outgoing CoV after each QC stage, in order.
    pub v_out: Vec<f64>,
    /// Whether the channel is quality-controlled at each stage. Missing
    /// entries count as controlled when a `v_out` value exists.
    pub controlled: Vec<bool>,
}

impl Channel {
    pub fn new(name: impl Into<String>, n_i: f64, v_in: f64, v_out: Vec<f64>) -> Self {
        let controlled = vec![true; v_out.len()];
        Self {
            name: name.into(),
            n_i,
            v_in,
            v_out,
            controlled,
        }
    }

    /// A channel that is never controlled, e.g. model uncertainty.
    pub fn uncontrolled(name: impl Into<String>, n_i: f64, v_in: f64) -> Self {
        Self::new(name, n_i, v_in, Vec::new())
    }

    pub fn is_controlled_at(&self, k: usize) -> bool {
        k >= 1 && self.controlled.get(k - 1).copied().unwrap_or(false)
    }

    pub fn max_stage(&self) -> usize {
        self.v_out.len()
    }

    /// CoV at `stage`. Channels without any QC stage keep `v_in`; a channel
    /// with QC stages must list every stage it is asked about.
    pub fn v_at(&self, stage: Stage) -> Result<f64> {
        match stage {
            Stage::Incoming => Ok(self.v_in),
            Stage::Stage(_) if self.v_out.is_empty() => Ok(self.v_in),
            Stage::Stage(k) if k >= 1 && k <= self.v_out.len() && !self.is_controlled_at(k) => {
                Ok(self.v_in)
            }
            Stage::Stage(k) => self
                .v_out
                .get(k - 1)
                .copied()
                .ok_or_else(|| Error::MissingStage {
                    channel: self.name.clone(),
                    stage: stage.to_string(),
                }),
        }
    }

    /// Warnings for controlled stages whose CoV went up.
    pub fn monotonicity_warnings(&self) -> Vec<String> {
        let mut prev = self.v_in;
        let mut out = Vec::new();
        for (k, &v) in self.v_out.iter().enumerate() {
            if self.is_controlled_at(k + 1) {
                if v > prev {
                    out.push(format!(
                        "channel `{}`: CoV increases at stage {} ({prev} -> {v})",
                        self.name,
                        k + 1
                    ));
                }
                prev = v;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSet {
    channels: Vec<Channel>,
}

impl ChannelSet {
    pub fn new(channels: Vec<Channel>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::domain("channel set must not be empty"));
        }
        let mut seen = BTreeSet::new();
        for c in &channels {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::DuplicateChannel(c.name.clone()));
            }
            if !(c.n_i.is_finite()) {
                return Err(Error::domain(format!(
                    "channel `{}`: n_i must be finite",
                    c.name
                )));
            }
            ensure_positive(&format!("channel `{}` v_in", c.name), c.v_in)?;
            for &v in &c.v_out {
                ensure_positive(&format!("channel `{}` v_out", c.name), v)?;
            }
        }
        Ok(Self { channels })
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn get(&self, name: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.name == name)
    }

    pub fn max_stage(&self) -> usize {
        self.channels
            .iter()
            .map(Channel::max_stage)
            .max()
            .unwrap_or(0)
    }

    fn aggregate_with(&self, stage: Stage, controlled: Option<&BTreeSet<&str>>) -> Result<f64> {
        let mut sum = 0.0;
        for c in &self.channels {
            let v = match controlled {
                Some(set) if !set.contains(c.name.as_str()) => c.v_in,
                _ => c.v_at(stage)?,
            };
            let q = q_of_v(v)?;
            sum += c.n_i * c.n_i * q * q;
        }
        Ok(sum.sqrt())
    }
}

/// `Q_R = sqrt(sum n_i^2 Q_i^2)` at the requested stage.
pub fn aggregate_qr(set: &ChannelSet, stage: Stage) -> Result<f64> {
    set.aggregate_with(stage, None)
}

/// One Table-3 style scenario: a subset of channels controlled up to a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subset {
    pub name: String,
    pub channels: Vec<String>,
    pub stage: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub name: String,
    pub q_in: f64,
    pub q_out: f64,
    pub r: f64,
    pub gamma: f64,
}

/// Improvement factor and improved partial factor for each subset. Channels
/// outside a subset keep their incoming CoV.
pub fn scenario_table(
    set: &ChannelSet,
    subsets: &[Subset],
    cfg: &CalibrationConfig,
) -> Result<Vec<ScenarioRow>> {
    let q_in = aggregate_qr(set, Stage::Incoming)?;
    subsets
        .iter()
        .map(|s| {
            let mut names = BTreeSet::new();
            for n in &s.channels {
                let c = set.get(n).ok_or_else(|| Error::UnknownChannel(n.clone()))?;
                names.insert(c.name.as_str());
            }
            if s.stage == 0 {
                return Err(Error::domain(format!(
                    "subset `{}`: stage must be >= 1",
                    s.name
                )));
            }
            let q_out = set
                .aggregate_with(Stage::Stage(s.stage), Some(&names))
                .map_err(|e| e.context(format!("subset `{}`", s.name)))?;
            let r = improvement_factor(q_in, q_out, cfg);
            Ok(ScenarioRow {
                name: s.name.clone(),
                q_in,
                q_out,
                r,
                gamma: improved_gamma(cfg, r),
            })
        })
        .collect()
}

/// Per-stage summary when every controlled channel is at that stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCalibration {
    pub stage: usize,
    pub q_r: f64,
    pub delta_q_r: f64,
    pub r: f64,
    pub gamma: f64,
}

pub fn stage_calibration(
    set: &ChannelSet,
    cfg: &CalibrationConfig,
) -> Result<(f64, Vec<StageCalibration>)> {
    let q_in = aggregate_qr(set, Stage::Incoming)?;
    let rows = (1..=set.max_stage())
        .map(|k| {
            let q_r = aggregate_qr(set, Stage::Stage(k))?;
            let r = improvement_factor(q_in, q_r, cfg);
            Ok(StageCalibration {
                stage: k,
                q_r,
                delta_q_r: q_in - q_r,
                r,
                gamma: improved_gamma(cfg, r),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((q_in, rows))
}
