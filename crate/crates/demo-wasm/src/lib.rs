//! Browser bindings for three interactive views: OC curves with and without
//! AR(2) dependence, the CoV of a property passing through two acceptance
//! checks, and the wall capacity reduction over height.
//!
//! Every function returns a JSON string; errors come back as `{"error": ...}`
//! so the page can show them inline.

use qc_reliability::bayes::{cov_summary_points, sequential_update, McmcConfig, PaEstimator};
use qc_reliability::plans::{
    oc_curve, AcceptancePlan, ArModel, ExecutionLimit, MortarMeanCriterion, Sweep, UnitTwoStage,
};
use qc_reliability::priors::{hyper_from_prior, lognormal_pdf, sample_prior};
use qc_reliability::wall::{design_point, MasonrySpec, WallGeometry};
use qc_reliability::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn plan_for(name: &str) -> Result<AcceptancePlan> {
    Ok(match name {
        "units" => AcceptancePlan::UnitTwoStage(UnitTwoStage {
            n_per_stage: 6,
            fc_declared: 12.0,
            fm_declared: 13.0,
            k_char: 1.645,
            second_stage_policy: Default::default(),
        }),
        "mortar" => AcceptancePlan::MortarMeanCriterion(MortarMeanCriterion {
            n: 3,
            xk_declared: 3.5,
            margin_factor: 1.48,
        }),
        "execution" => AcceptancePlan::ExecutionLimit(ExecutionLimit::default()),
        other => {
            return Err(Error::Domain(format!(
                "unknown plan `{other}` (units, mortar, execution)"
            )))
        }
    })
}

fn prior_for(name: &str) -> (f64, f64) {
    match name {
        "units" => (15.0, 0.18),
        "mortar" => (5.0, 0.20),
        _ => (0.05, 0.35),
    }
}

fn to_json<T: Serialize>(r: Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e.to_string()),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

#[derive(Serialize)]
pub struct OcView {
    pub defect_rate: Vec<f64>,
    pub independent: Vec<f64>,
    pub ar2: Vec<f64>,
}

pub fn oc_view(plan: &str, fixed_cov: f64, n_sim: usize, seed: u64) -> Result<OcView> {
    let plan = plan_for(plan)?;
    let sweep = Sweep::defect_rates(0.01, 0.7, 24, fixed_cov);
    let ar = ArModel::default();
    // Same seed for both curves: common random numbers.
    let ind = oc_curve(&plan, None, &sweep, n_sim, seed)?;
    let dep = oc_curve(&plan, Some(&ar), &sweep, n_sim, seed)?;
    Ok(OcView {
        defect_rate: sweep.levels().to_vec(),
        independent: ind.points.iter().map(|p| p.pa).collect(),
        ar2: dep.points.iter().map(|p| p.pa).collect(),
    })
}

#[derive(Serialize)]
pub struct FilterView {
    /// Predictive CoV: incoming, after the first check, after the second.
    pub v: Vec<f64>,
    pub ci75_hi: Vec<f64>,
    pub x: Vec<f64>,
    pub density: Vec<Vec<f64>>,
}

pub fn filter_view(plan: &str, v0: f64, n: u32, n_samples: usize, seed: u64) -> Result<FilterView> {
    let accept = plan_for(plan)?;
    let (mean, _) = prior_for(plan);
    let h = hyper_from_prior(mean, v0, n)?;
    let cfg = McmcConfig {
        n_chains: 2,
        n_samples,
        burn_in: (n_samples / 5).max(200),
        pa_estimator: PaEstimator::GridInterpolation {
            n_mu: 24,
            n_logq: 24,
            n_sim: 400,
        },
        seed,
        ..McmcConfig::default()
    };
    let ar = matches!(accept, AcceptancePlan::UnitTwoStage(_)).then(ArModel::default);
    let chains = sequential_update(&h, &[(accept, ar), (accept, ar)], &cfg)?;
    let prior = sample_prior(&h, cfg.retained() * cfg.n_chains, seed ^ 0x5eed)?;
    let s = h.mu_sd().hypot(h.q0());
    let (lo, hi) = ((h.mu0 - 5.0 * s).exp(), (h.mu0 + 5.0 * s).exp());
    let x: Vec<f64> = (0..200)
        .map(|i| lo + (hi - lo) * i as f64 / 199.0)
        .collect();
    let mut sets = vec![prior];
    sets.extend(
        chains
            .iter()
            .map(|c| c.points().into_iter().step_by(5).collect::<Vec<_>>()),
    );
    let mut view = FilterView {
        v: vec![],
        ci75_hi: vec![],
        x: x.clone(),
        density: vec![],
    };
    for pts in &sets {
        let summary = cov_summary_points(pts)?;
        view.v.push(summary.predictive_v);
        view.ci75_hi.push(summary.ci75.hi);
        let d = x
            .iter()
            .map(|&xi| pts.iter().map(|p| lognormal_pdf(p, xi)).sum::<f64>() / pts.len() as f64)
            .collect();
        view.density.push(d);
    }
    Ok(view)
}

#[derive(Serialize)]
pub struct WallView {
    pub design: qc_reliability::wall::DesignPoint,
    pub height: Vec<f64>,
    pub phi: Vec<f64>,
    pub resistance: Vec<f64>,
}

pub fn wall_view(h: f64, t: f64, e: f64, f_b: f64, f_m: f64) -> Result<WallView> {
    let spec = MasonrySpec {
        f_b,
        f_m,
        ..MasonrySpec::default()
    };
    let design = design_point(&WallGeometry::new(h, t, e)?, &spec)?;
    let mut view = WallView {
        design,
        height: vec![],
        phi: vec![],
        resistance: vec![],
    };
    for i in 0..=80 {
        let hi = 1.0 + 5.0 * i as f64 / 80.0;
        let d = design_point(&WallGeometry::new(hi, t, e)?, &spec)?;
        view.height.push(hi);
        view.phi.push(d.phi);
        view.resistance.push(d.resistance);
    }
    Ok(view)
}

/// OC curves of a plan over defect rates 0.01 to 0.7, independent and AR(2).
#[wasm_bindgen]
pub fn oc_curves(plan: &str, fixed_cov: f64, n_sim: u32, seed: u32) -> String {
    to_json(oc_view(plan, fixed_cov, n_sim as usize, seed as u64))
}

/// Predictive CoV and density before and after two checks of a plan.
#[wasm_bindgen]
pub fn filter_cov(plan: &str, v0: f64, n: u32, n_samples: u32, seed: u32) -> String {
    to_json(filter_view(plan, v0, n, n_samples as usize, seed as u64))
}

/// Design point and capacity reduction factor over wall heights 1 to 6 m.
#[wasm_bindgen]
pub fn wall_capacity(h: f64, t: f64, e: f64, f_b: f64, f_m: f64) -> String {
    to_json(wall_view(h, t, e, f_b, f_m))
}
