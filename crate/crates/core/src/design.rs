//! Mixed-model domain types and deterministic simulation.

use crate::error::{CoreError, Result};
use crate::priors::Prior;
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

const U_AGG_REL_TOL: f64 = 1e-12;

/// One unit's covariates: K_i past replicates and K̃_i future ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    /// past fixed-effect covariates, K_i × d (empty inner vectors when d = 0)
    #[serde(default)]
    pub x: Vec<Vec<f64>>,
    /// past random-effect weights u_ik, length K_i
    pub u: Vec<f64>,
    /// future fixed-effect covariates, K̃_i × d
    #[serde(default)]
    pub x_future: Vec<Vec<f64>>,
    /// future random-effect weights v_ik, length K̃_i
    pub v: Vec<f64>,
}

/// Past/future design for all units, with the cached aggregates
/// u_i = (Σ_k u_ik²)^{1/2}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub d: usize,
    pub units: Vec<Unit>,
    pub u_agg: Vec<f64>,
}

impl Design {
    pub fn new(d: usize, units: Vec<Unit>) -> Result<Self> {
        let u_agg = units
            .iter()
            .map(|unit| unit.u.iter().map(|u| u * u).sum::<f64>().sqrt())
            .collect();
        let design = Design { d, units, u_agg };
        design.validate()?;
        Ok(design)
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }

    /// κ_n = Σ_i K̃_i, the number of future coordinates.
    pub fn kappa(&self) -> usize {
        self.units.iter().map(|u| u.v.len()).sum()
    }

    /// Number of units with K_i ≥ 2.
    pub fn replicated_units(&self) -> usize {
        self.units.iter().filter(|u| u.u.len() >= 2).count()
    }

    /// η_n, the fraction of units with replicates.
    pub fn eta(&self) -> f64 {
        self.replicated_units() as f64 / self.n() as f64
    }

    /// Flat iteration order over future coordinates (i, k).
    pub fn future_coords(&self) -> Vec<(usize, usize)> {
        let mut coords = Vec::with_capacity(self.kappa());
        for (i, unit) in self.units.iter().enumerate() {
            for k in 0..unit.v.len() {
                coords.push((i, k));
            }
        }
        coords
    }

    pub fn validate(&self) -> Result<()> {
        if self.units.is_empty() {
            return Err(CoreError::InvalidDesign("no units".into()));
        }
        if self.u_agg.len() != self.units.len() {
            return Err(CoreError::InvalidDesign("u_agg length mismatch".into()));
        }
        for (i, unit) in self.units.iter().enumerate() {
            if unit.u.is_empty() || unit.v.is_empty() {
                return Err(CoreError::InvalidDesign(format!(
                    "unit {i}: K_i and K̃_i must be >= 1"
                )));
            }
            if unit.u.iter().any(|&u| !(u > 0.0) || !u.is_finite())
                || unit.v.iter().any(|&v| !(v > 0.0) || !v.is_finite())
            {
                return Err(CoreError::InvalidDesign(format!(
                    "unit {i}: weights must be strictly positive and finite"
                )));
            }
            if self.d > 0 {
                if unit.x.len() != unit.u.len() || unit.x_future.len() != unit.v.len() {
                    return Err(CoreError::InvalidDesign(format!(
                        "unit {i}: covariate row counts do not match replicate counts"
                    )));
                }
                if unit.x.iter().chain(&unit.x_future).any(|row| row.len() != self.d) {
                    return Err(CoreError::InvalidDesign(format!(
                        "unit {i}: covariate row length != d = {}",
                        self.d
                    )));
                }
            }
            let recomputed = unit.u.iter().map(|u| u * u).sum::<f64>().sqrt();
            if (recomputed - self.u_agg[i]).abs() > U_AGG_REL_TOL * recomputed.max(1.0) {
                return Err(CoreError::InvalidDesign(format!(
                    "unit {i}: stored u_agg {} != recomputed {recomputed}",
                    self.u_agg[i]
                )));
            }
        }
        Ok(())
    }
}

/// Generating parameters: fixed effects, noise scale, realized random effects,
/// and the law the random effects were drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTruth {
    pub beta: Vec<f64>,
    pub sigma: f64,
    pub gamma: Vec<f64>,
    pub g0: Prior,
}

impl ModelTruth {
    pub fn validate(&self, design: &Design) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(CoreError::NonPositiveScale { name: "sigma", value: self.sigma });
        }
        if self.gamma.len() != design.n() {
            return Err(CoreError::DimensionMismatch(format!(
                "gamma has {} entries for {} units",
                self.gamma.len(),
                design.n()
            )));
        }
        if self.beta.len() != design.d {
            return Err(CoreError::DimensionMismatch(format!(
                "beta has {} entries for d = {}",
                self.beta.len(),
                design.d
            )));
        }
        Ok(())
    }
}

/// Simulated responses, unit-major. `y_future` is present only in simulation
/// mode (future responses are never observed in the estimation pipeline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub y: Vec<Vec<f64>>,
    pub y_future: Option<Vec<Vec<f64>>>,
}

impl Dataset {
    pub fn validate(&self, design: &Design) -> Result<()> {
        if self.y.len() != design.n() {
            return Err(CoreError::DimensionMismatch("y unit count".into()));
        }
        for (i, unit) in design.units.iter().enumerate() {
            if self.y[i].len() != unit.u.len() {
                return Err(CoreError::DimensionMismatch(format!("unit {i}: y replicate count")));
            }
        }
        if let Some(yf) = &self.y_future {
            if yf.len() != design.n() {
                return Err(CoreError::DimensionMismatch("y_future unit count".into()));
            }
            for (i, unit) in design.units.iter().enumerate() {
                if yf[i].len() != unit.v.len() {
                    return Err(CoreError::DimensionMismatch(format!(
                        "unit {i}: y_future replicate count"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Simulate y_ik = x_ik'β + u_ik γ_i + σ ε_ik and the future analogue with
/// i.i.d. standard normal noise. Identical (design, truth, stream) inputs
/// give bit-identical output.
pub fn simulate(design: &Design, truth: &ModelTruth, rng: &mut RngStream) -> Result<Dataset> {
    truth.validate(design)?;
    let mut y = Vec::with_capacity(design.n());
    let mut y_future = Vec::with_capacity(design.n());
    for (i, unit) in design.units.iter().enumerate() {
        let gamma_i = truth.gamma[i];
        let mut yi = Vec::with_capacity(unit.u.len());
        for (k, &u) in unit.u.iter().enumerate() {
            let xb = if design.d > 0 { dot(&unit.x[k], &truth.beta) } else { 0.0 };
            yi.push(xb + u * gamma_i + truth.sigma * rng.standard_normal());
        }
        y.push(yi);
        let mut yfi = Vec::with_capacity(unit.v.len());
        for (k, &v) in unit.v.iter().enumerate() {
            let xb = if design.d > 0 { dot(&unit.x_future[k], &truth.beta) } else { 0.0 };
            yfi.push(xb + v * gamma_i + truth.sigma * rng.standard_normal());
        }
        y_future.push(yfi);
    }
    Ok(Dataset { y, y_future: Some(y_future) })
}

/// Draw γ_1..γ_n i.i.d. from g0 and assemble the truth.
pub fn draw_truth(
    g0: &Prior,
    n: usize,
    beta: Vec<f64>,
    sigma: f64,
    rng: &mut RngStream,
) -> Result<ModelTruth> {
    if !(sigma > 0.0) {
        return Err(CoreError::NonPositiveScale { name: "sigma", value: sigma });
    }
    let mut gamma = Vec::with_capacity(n);
    for _ in 0..n {
        gamma.push(g0.sample(rng)?);
    }
    Ok(ModelTruth { beta, sigma, gamma, g0: g0.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_stream;

    pub(crate) fn flat_design(u2: &[f64], v2: &[f64]) -> Design {
        let units = u2
            .iter()
            .zip(v2)
            .map(|(&u2, &v2)| Unit {
                x: vec![vec![]],
                u: vec![u2.sqrt()],
                x_future: vec![vec![]],
                v: vec![v2.sqrt()],
            })
            .collect();
        Design::new(0, units).unwrap()
    }

    #[test]
    fn simulate_is_deterministic() {
        let design = flat_design(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]);
        let truth = ModelTruth {
            beta: vec![],
            sigma: 1.0,
            gamma: vec![0.1, -0.4, 0.9],
            g0: Prior::gaussian_scalar(1.0).unwrap(),
        };
        let a = simulate(&design, &truth, &mut seed_stream(9, &["sim"])).unwrap();
        let b = simulate(&design, &truth, &mut seed_stream(9, &["sim"])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn simulate_moments_zero_gamma() {
        // γ = 0, β = 0: mean within 4σ/√N of 0, variance within 5% of σ²
        let n = 100_000;
        let design = flat_design(&vec![1.0; 1], &vec![1.0; 1]);
        let sigma = 1.7;
        let truth = ModelTruth {
            beta: vec![],
            sigma,
            gamma: vec![0.0],
            g0: Prior::point_mass(0.0),
        };
        let mut rng = seed_stream(12, &["sim", "moments"]);
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let ds = simulate(&design, &truth, &mut rng).unwrap();
            let y = ds.y[0][0];
            sum += y;
            sum2 += y * y;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!(mean.abs() < 4.0 * sigma / (n as f64).sqrt(), "mean={mean}");
        assert!((var - sigma * sigma).abs() < 0.05 * sigma * sigma, "var={var}");
    }

    #[test]
    fn simulate_mean_shifted_by_random_effect() {
        // σ=1, u=2, γ=3, β absent: E[y] = 6
        let design = flat_design(&[4.0], &[1.0]);
        let truth = ModelTruth {
            beta: vec![],
            sigma: 1.0,
            gamma: vec![3.0],
            g0: Prior::point_mass(3.0),
        };
        let mut rng = seed_stream(13, &["sim", "shift"]);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += simulate(&design, &truth, &mut rng).unwrap().y[0][0];
        }
        let mean = sum / n as f64;
        assert!((mean - 6.0).abs() < 0.05, "mean={mean}");
    }

    #[test]
    fn draw_truth_point_mass_and_determinism() {
        let g0 = Prior::point_mass(0.0);
        let t = draw_truth(&g0, 5, vec![], 1.0, &mut seed_stream(1, &["t"])).unwrap();
        assert!(t.gamma.iter().all(|&g| g == 0.0));

        let g = Prior::gaussian_scalar(1.0).unwrap();
        let a = draw_truth(&g, 3, vec![], 1.0, &mut seed_stream(2, &["t"])).unwrap();
        let b = draw_truth(&g, 3, vec![], 1.0, &mut seed_stream(2, &["t"])).unwrap();
        assert_eq!(a.gamma, b.gamma);
    }

    #[test]
    fn draw_truth_mixture_variance() {
        // target 0.7·0.25 + 0.3·1 = 0.475; 4e5 draws put the 2% band at ~7 MC SE
        let g0 = Prior::gauss_mix(vec![0.7, 0.3], vec![0.25, 1.0]).unwrap();
        let t = draw_truth(&g0, 400_000, vec![], 1.0, &mut seed_stream(3, &["t"])).unwrap();
        let var = t.gamma.iter().map(|g| g * g).sum::<f64>() / t.gamma.len() as f64;
        assert!((var - 0.475).abs() < 0.02 * 0.475, "var={var}");
    }

    #[test]
    fn draw_truth_rejects_uniform() {
        assert!(draw_truth(&Prior::Uniform, 3, vec![], 1.0, &mut seed_stream(4, &["t"])).is_err());
    }

    #[test]
    fn design_json_round_trip_validates() {
        let design = flat_design(&[1.0, 2.0], &[0.4, 0.9]);
        let s = serde_json::to_string(&design).unwrap();
        let back: Design = serde_json::from_str(&s).unwrap();
        back.validate().unwrap();
        assert_eq!(design, back);
    }

    #[test]
    fn tampered_u_agg_fails_validation() {
        let mut design = flat_design(&[1.0, 2.0], &[0.4, 0.9]);
        design.u_agg[0] *= 1.0 + 1e-6;
        assert!(design.validate().is_err());
    }
}
