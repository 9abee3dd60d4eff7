//! Vertically loaded masonry wall: strength law, slenderness, capacity
//! reduction and the homogeneity degrees of the resistance.
//!
//! Units are MPa for stresses, metres for lengths and kN/m for the
//! resistance per unit wall length.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};

/// Conversion of `MPa * m` into `kN/m`.
const KN_PER_M_PER_MPA_M: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WallGeometry {
    /// Wall height (m).
    pub h: f64,
    /// Wall thickness (m).
    pub t: f64,
    /// Mid-height eccentricity (m).
    pub e: f64,
}

impl WallGeometry {
    pub fn new(h: f64, t: f64, e: f64) -> Result<Self> {
        let g = Self { h, t, e };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_positive("h", self.h)?;
        ensure_positive("t", self.t)?;
        ensure_positive("e", self.e)?;
        if self.r_e() >= 0.5 {
            return Err(Error::domain(format!(
                "relative eccentricity e/t = {} must be < 0.5",
                self.r_e()
            )));
        }
        Ok(())
    }

    pub fn r_h(&self) -> f64 {
        self.h / self.t
    }

    pub fn r_e(&self) -> f64 {
        self.e / self.t
    }
}

impl Default for WallGeometry {
    fn default() -> Self {
        Self {
            h: 3.3,
            t: 0.24,
            e: 0.024,
        }
    }
}

/// Masonry strength law `f_k = K f_b^alpha f_m^beta` and modulus ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MasonrySpec {
    pub f_b: f64,
    pub f_m: f64,
    pub big_k: f64,
    pub exp_alpha: f64,
    pub exp_beta: f64,
    /// `E = k_e * f`.
    pub k_e: f64,
}

impl Default for MasonrySpec {
    fn default() -> Self {
        Self {
            f_b: 15.0,
            f_m: 5.0,
            big_k: 0.79,
            exp_alpha: 0.585,
            exp_beta: 0.162,
            k_e: 2400.0,
        }
    }
}

impl MasonrySpec {
    pub fn validate(&self) -> Result<()> {
        ensure_positive("f_b", self.f_b)?;
        ensure_positive("f_m", self.f_m)?;
        ensure_positive("K", self.big_k)?;
        ensure_positive("k_e", self.k_e)?;
        for (name, x) in [("alpha", self.exp_alpha), ("beta", self.exp_beta)] {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::domain(format!(
                    "exponent {name} must lie in [0, 1], got {x}"
                )));
            }
        }
        Ok(())
    }
}

pub fn characteristic_strength(spec: &MasonrySpec) -> f64 {
    spec.big_k * spec.f_b.powf(spec.exp_alpha) * spec.f_m.powf(spec.exp_beta)
}

/// `lambda = (h/t) sqrt(f/E)`; with `E = K_E f` the strength cancels.
pub fn slenderness(geom: &WallGeometry, spec: &MasonrySpec) -> f64 {
    geom.r_h() / spec.k_e.sqrt()
}

fn area_factor(r_e: f64) -> Result<f64> {
    if !(0.0..0.5).contains(&r_e) {
        return Err(Error::domain(format!(
            "relative eccentricity must lie in [0, 0.5), got {r_e}"
        )));
    }
    Ok(1.0 - 2.0 * r_e)
}

/// Capacity reduction factor, clamped to `[0, 1]`:
/// `A - lambda^2/(2.58 A)` below `lambda = 1.14 A`, `0.65 A^3/lambda^2` above,
/// with `A = 1 - 2 r_e`.
pub fn phi_reduction(lambda: f64, r_e: f64) -> Result<f64> {
    let a = area_factor(r_e)?;
    if !(lambda >= 0.0) {
        return Err(Error::domain(format!(
            "slenderness must be >= 0, got {lambda}"
        )));
    }
    let phi = if lambda < 1.14 * a {
        a - lambda * lambda / (2.58 * a)
    } else {
        0.65 * a.powi(3) / (lambda * lambda)
    };
    Ok(phi.clamp(0.0, 1.0))
}

/// `R = f * Phi * t` in kN/m.
pub fn resistance(geom: &WallGeometry, f: f64, phi: f64) -> f64 {
    f * phi * geom.t * KN_PER_M_PER_MPA_M
}

/// Resistance of the wall at its design point, `f_k * Phi * t`.
pub fn wall_resistance(geom: &WallGeometry, spec: &MasonrySpec) -> Result<f64> {
    let phi = phi_reduction(slenderness(geom, spec), geom.r_e())?;
    Ok(resistance(geom, characteristic_strength(spec), phi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EccentricityDegree {
    /// Magnitude of the log-derivative of `Phi` with respect to `r_e`.
    pub value: f64,
    /// True when the slender (second) branch was used.
    pub slender_branch: bool,
}

/// Homogeneity degree of the resistance with respect to `r_e`.
///
/// Reported as a positive magnitude; `Phi` itself decreases with `r_e`.
pub fn homogeneity_eccentricity(lambda: f64, r_e: f64) -> Result<EccentricityDegree> {
    let a = area_factor(r_e)?;
    let base = 2.0 * r_e / a;
    if lambda >= 1.14 * a {
        return Ok(EccentricityDegree {
            value: 3.0 * base,
            slender_branch: true,
        });
    }
    let denom = 2.58 * a * a - lambda * lambda;
    if denom == 0.0 {
        return Err(Error::domain(
            "homogeneity degree undefined where 2.58 A^2 = lambda^2",
        ));
    }
    Ok(EccentricityDegree {
        value: base * (2.58 * a * a + lambda * lambda) / denom,
        slender_branch: false,
    })
}

/// Central-difference estimate of the elasticity `d ln R / d ln X` at `x_d`.
pub fn homogeneity_numeric<F>(model: F, x_d: f64, rel_step: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    ensure_positive("x_d", x_d)?;
    if !(rel_step > 0.0 && rel_step <= 0.1) {
        return Err(Error::domain(format!(
            "rel_step must lie in (0, 0.1], got {rel_step}"
        )));
    }
    let up = x_d * (1.0 + rel_step);
    let down = x_d * (1.0 - rel_step);
    let r_up = model(up)?;
    let r_down = model(down)?;
    if !(r_up > 0.0 && r_down > 0.0) {
        return Err(Error::domain(
            "model must be positive near the design point",
        ));
    }
    Ok((r_up.ln() - r_down.ln()) / (up.ln() - down.ln()))
}

/// `L_R = sum n_i L_i`, pairing degrees and log-changes by name.
pub fn resistance_log_sensitivity(
    degrees: &[(String, f64)],
    deltas: &[(String, f64)],
) -> Result<f64> {
    if degrees.len() != deltas.len() {
        return Err(Error::domain(format!(
            "{} homogeneity degrees but {} log-changes",
            degrees.len(),
            deltas.len()
        )));
    }
    degrees
        .iter()
        .map(|(name, n)| {
            deltas
                .iter()
                .find(|(d, _)| d == name)
                .map(|(_, l)| n * l)
                .ok_or_else(|| Error::UnknownChannel(name.clone()))
        })
        .sum()
}

/// All design-point quantities in one place.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub f_k: f64,
    pub r_h: f64,
    pub r_e: f64,
    pub a: f64,
    pub lambda: f64,
    pub phi: f64,
    pub resistance: f64,
    pub n_f_b: f64,
    pub n_f_m: f64,
    pub n_r_e: f64,
    pub slender_branch: bool,
}

pub fn design_point(geom: &WallGeometry, spec: &MasonrySpec) -> Result<DesignPoint> {
    geom.validate()?;
    spec.validate()?;
    let lambda = slenderness(geom, spec);
    let r_e = geom.r_e();
    let phi = phi_reduction(lambda, r_e)?;
    let f_k = characteristic_strength(spec);
    let ecc = homogeneity_eccentricity(lambda, r_e)?;
    let n_f_b = homogeneity_numeric(
        |x| Ok(characteristic_strength(&MasonrySpec { f_b: x, ..*spec })),
        spec.f_b,
        1e-5,
    )?;
    let n_f_m = homogeneity_numeric(
        |x| Ok(characteristic_strength(&MasonrySpec { f_m: x, ..*spec })),
        spec.f_m,
        1e-5,
    )?;
    Ok(DesignPoint {
        f_k,
        r_h: geom.r_h(),
        r_e,
        a: 1.0 - 2.0 * r_e,
        lambda,
        phi,
        resistance: resistance(geom, f_k, phi),
        n_f_b,
        n_f_m,
        n_r_e: ecc.value,
        slender_branch: ecc.slender_branch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn design_point_numbers() {
        let dp = design_point(&WallGeometry::default(), &MasonrySpec::default()).unwrap();
        assert!((dp.f_k - 5.0).abs() < 0.01, "{}", dp.f_k);
        assert!((dp.r_h - 13.75).abs() < 1e-12);
        assert!((dp.lambda - 0.281).abs() < 1e-3);
        assert!((dp.a - 0.8).abs() < 1e-12);
        assert!((dp.n_r_e - 0.275).abs() < 1e-3);
        assert!(!dp.slender_branch);
        assert!((dp.n_f_b - 0.585).abs() < 1e-6);
        assert!((dp.n_f_m - 0.162).abs() < 1e-6);
        // Sensitivity ordering.
        assert!(dp.n_f_b > dp.n_r_e && dp.n_r_e > dp.n_f_m);
    }

    #[test]
    fn strength_law_identities() {
        let s = MasonrySpec {
            big_k: 1.0,
            exp_alpha: 1.0,
            exp_beta: 0.0,
            ..Default::default()
        };
        assert!((characteristic_strength(&s) - s.f_b).abs() < 1e-12);
        let base = MasonrySpec::default();
        let doubled = MasonrySpec {
            f_b: 2.0 * base.f_b,
            ..base
        };
        let ratio = characteristic_strength(&doubled) / characteristic_strength(&base);
        assert!((ratio - 2f64.powf(0.585)).abs() < 1e-12);
    }

    #[test]
    fn slenderness_scaling() {
        let s = MasonrySpec::default();
        let g = WallGeometry::default();
        let quad = MasonrySpec {
            k_e: 4.0 * s.k_e,
            ..s
        };
        assert!((slenderness(&g, &quad) - 0.5 * slenderness(&g, &s)).abs() < 1e-15);
        assert!((0.0f64 / s.k_e.sqrt()).abs() == 0.0);
    }

    #[test]
    fn phi_examples() {
        assert_eq!(phi_reduction(0.0, 0.0).unwrap(), 1.0);
        let phi = phi_reduction(0.281, 0.1).unwrap();
        assert!((phi - (0.8 - 0.281f64.powi(2) / (2.58 * 0.8))).abs() < 1e-15);
        assert!((phi - 0.7617).abs() < 5e-5);
        let a = 0.8f64;
        let lam = 2.0 * 1.14 * a;
        assert!((phi_reduction(lam, 0.1).unwrap() - 0.65 * a.powi(3) / (lam * lam)).abs() < 1e-15);
        assert!(phi_reduction(0.3, 0.5).is_err());
    }

    #[test]
    fn resistance_units() {
        let g = WallGeometry::default();
        let phi = phi_reduction(0.281, 0.1).unwrap();
        assert!((resistance(&g, 5.0, phi) - 914.0).abs() < 1.0);
        let unit = WallGeometry { t: 1.0, ..g };
        assert_eq!(resistance(&unit, 1.0, 1.0), 1000.0);
        let thick = WallGeometry { t: 0.48, ..g };
        assert!((resistance(&thick, 5.0, phi) - 2.0 * resistance(&g, 5.0, phi)).abs() < 1e-9);
    }

    #[test]
    fn eccentricity_degree_examples() {
        let d = homogeneity_eccentricity(0.281, 0.1).unwrap();
        assert!((d.value - 0.275).abs() < 1e-3);
        assert_eq!(homogeneity_eccentricity(0.281, 0.0).unwrap().value, 0.0);
        let small = homogeneity_eccentricity(1e-9, 0.1).unwrap().value;
        assert!((small - 0.2 / 0.8).abs() < 1e-12);
        let slender = homogeneity_eccentricity(1.0, 0.1).unwrap();
        assert!(slender.slender_branch);
        assert!((slender.value - 3.0 * 0.25).abs() < 1e-15);
    }

    #[test]
    fn numeric_degree_matches_closed_form() {
        let lambda = 0.281;
        let n = homogeneity_numeric(|r| phi_reduction(lambda, r), 0.1, 1e-4).unwrap();
        let closed = homogeneity_eccentricity(lambda, 0.1).unwrap().value;
        assert!((n.abs() - closed).abs() < 1e-3);
        assert!(n < 0.0);
        // Also on the slender branch.
        let n2 = homogeneity_numeric(|r| phi_reduction(1.0, r), 0.1, 1e-4).unwrap();
        assert!((n2.abs() - homogeneity_eccentricity(1.0, 0.1).unwrap().value).abs() < 1e-3);
        assert!(homogeneity_numeric(Ok, 1.0, 0.5).is_err());
    }

    #[test]
    fn log_sensitivity() {
        let degrees: Vec<(String, f64)> = vec![
            ("f_b".into(), 0.585),
            ("f_m".into(), 0.162),
            ("r_e".into(), 0.275),
        ];
        let zero: Vec<(String, f64)> = degrees.iter().map(|(n, _)| (n.clone(), 0.0)).collect();
        assert_eq!(resistance_log_sensitivity(&degrees, &zero).unwrap(), 0.0);
        let one = vec![
            ("f_b".into(), 0.1),
            ("f_m".into(), 0.0),
            ("r_e".into(), 0.0),
        ];
        assert!((resistance_log_sensitivity(&degrees, &one).unwrap() - 0.0585).abs() < 1e-15);
        let bad = vec![("f_b".into(), 0.1), ("f_m".into(), 0.0), ("e".into(), 0.0)];
        assert!(resistance_log_sensitivity(&degrees, &bad).is_err());
        assert!(resistance_log_sensitivity(&degrees, &one[..2]).is_err());
    }

    #[test]
    fn log_sensitivity_against_model_reevaluation() {
        // 1 % more unit and mortar strength and 1 % less eccentricity. The
        // eccentricity degree is a magnitude, so its log-change is counted as
        // the relative reduction.
        let g = WallGeometry::default();
        let s = MasonrySpec::default();
        let r0 = wall_resistance(&g, &s).unwrap();
        let g1 = WallGeometry { e: g.e / 1.01, ..g };
        let s1 = MasonrySpec {
            f_b: s.f_b * 1.01,
            f_m: s.f_m * 1.01,
            ..s
        };
        let direct = (wall_resistance(&g1, &s1).unwrap() / r0).ln();
        let dp = design_point(&g, &s).unwrap();
        let l = 1.01f64.ln();
        let degrees = vec![
            ("f_b".into(), dp.n_f_b),
            ("f_m".into(), dp.n_f_m),
            ("r_e".into(), dp.n_r_e),
        ];
        let deltas = vec![("f_b".into(), l), ("f_m".into(), l), ("r_e".into(), l)];
        let lr = resistance_log_sensitivity(&degrees, &deltas).unwrap();
        assert!((lr - 0.01022).abs() < 1e-4, "{lr}");
        assert!((lr - direct).abs() < 5e-4, "{lr} vs {direct}");
    }

    #[test]
    fn branch_jump_is_small() {
        for i in 0..=50 {
            let a = 0.5 + 0.5 * i as f64 / 50.0;
            let r_e = (1.0 - a) / 2.0;
            let lam = 1.14 * a;
            let below = a - lam * lam / (2.58 * a);
            let above = phi_reduction(lam, r_e).unwrap();
            assert!((below - above).abs() < 0.01 * a, "A={a}");
        }
    }

    proptest! {
        #[test]
        fn phi_bounded_and_decreasing(lam in 0.0f64..3.0, r_e in 0.0f64..0.45, d in 1e-4f64..0.04) {
            let phi = phi_reduction(lam, r_e).unwrap();
            prop_assert!((0.0..=1.0).contains(&phi));
            prop_assert!(phi_reduction(lam, (r_e + d).min(0.499)).unwrap() <= phi + 1e-12);
            // The branch switch jumps up by < 1 %; allow for it when crossing.
            let a = 1.0 - 2.0 * r_e;
            let next = phi_reduction(lam + d, r_e).unwrap();
            let crosses = lam < 1.14 * a && lam + d >= 1.14 * a;
            prop_assert!(next <= phi + 1e-12 || crosses);
        }

        #[test]
        fn power_law_degree(n in -3.0f64..3.0, x in 0.1f64..100.0) {
            let est = homogeneity_numeric(|v| Ok(v.powf(n)), x, 1e-5).unwrap();
            prop_assert!((est - n).abs() < 1e-8);
        }
    }
}
