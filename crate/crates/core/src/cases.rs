//! The six covariate regimes of the benchmark and their samplers.
//!
//! Sampled case values are interpreted as the squared covariates u², v² by
//! default (`covariates_are_squared`); the stored design weights are their
//! square roots. Truncated laws use rejection sampling from the parent with a
//! hard attempt cap.

use crate::design::{Design, Unit};
use crate::error::{CoreError, Result};
use crate::numeric::{gauss_hermite, log_normal_cdf};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

const REJECTION_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaseId {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl CaseId {
    pub const ALL: [CaseId; 6] = [CaseId::A, CaseId::B, CaseId::C, CaseId::D, CaseId::E, CaseId::F];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" | "1" => Ok(CaseId::A),
            "B" | "2" => Ok(CaseId::B),
            "C" | "3" => Ok(CaseId::C),
            "D" | "4" => Ok(CaseId::D),
            "E" | "5" => Ok(CaseId::E),
            "F" | "6" => Ok(CaseId::F),
            other => Err(CoreError::UnknownCase(other.into())),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            CaseId::A => "A",
            CaseId::B => "B",
            CaseId::C => "C",
            CaseId::D => "D",
            CaseId::E => "E",
            CaseId::F => "F",
        }
    }

    /// Fraction of units receiving two replicates.
    pub fn eta(&self, n: usize) -> f64 {
        match self {
            CaseId::A | CaseId::B | CaseId::C | CaseId::F => 0.0,
            CaseId::D => (n as f64).powf(-0.5),
            CaseId::E => 0.1,
        }
    }

    /// Whether the theory reference curve for D_n is η⁻¹ log n (replicated
    /// designs) rather than log n.
    pub fn replicated(&self) -> bool {
        matches!(self, CaseId::D | CaseId::E)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub case_id: CaseId,
    pub n: usize,
    /// sampled values are u², v² (default) rather than u, v
    pub covariates_are_squared: bool,
    /// when > 0, adds standard-normal x, x̃ of this dimension
    pub fixed_effects_dim: usize,
}

impl CaseSpec {
    pub fn new(case_id: CaseId, n: usize) -> Self {
        CaseSpec { case_id, n, covariates_are_squared: true, fixed_effects_dim: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(CoreError::Precondition("n must be positive".into()));
        }
        let eta = self.case_id.eta(self.n);
        if !(0.0..=1.0).contains(&eta) {
            return Err(CoreError::Precondition(format!("eta = {eta} outside [0, 1]")));
        }
        Ok(())
    }

    /// Number of replicated units, ⌈n · η_n⌉.
    pub fn replicated_count(&self) -> usize {
        (self.n as f64 * self.case_id.eta(self.n)).ceil() as usize
    }
}

fn truncated_normal(mean: f64, sd: f64, lo: f64, hi: f64, rng: &mut RngStream) -> Result<f64> {
    for _ in 0..REJECTION_CAP {
        let x = rng.normal(mean, sd);
        if x >= lo && x <= hi {
            return Ok(x);
        }
    }
    Err(CoreError::RejectionCap { attempts: REJECTION_CAP })
}

fn truncated_exp(hi: f64, rng: &mut RngStream) -> Result<f64> {
    for _ in 0..REJECTION_CAP {
        let x = rng.exponential();
        if x <= hi {
            return Ok(x);
        }
    }
    Err(CoreError::RejectionCap { attempts: REJECTION_CAP })
}

fn truncated_chi2_1(hi: f64, rng: &mut RngStream) -> Result<f64> {
    for _ in 0..REJECTION_CAP {
        let z = rng.standard_normal();
        let x = z * z;
        if x <= hi {
            return Ok(x);
        }
    }
    Err(CoreError::RejectionCap { attempts: REJECTION_CAP })
}

/// Case F past law: F(x) = 1 − exp(−(1−x)⁻²) on [1/2, 1]. F(1/2) = 1−e⁻⁴ > 0,
/// so p is drawn uniformly on (F(1/2), 1) and inverted (truncated reading).
pub fn case_f_inverse_cdf(p: f64) -> f64 {
    1.0 - (-(1.0 - p).ln()).powf(-0.5)
}

fn case_f_draw(rng: &mut RngStream) -> f64 {
    let p_lo = 1.0 - (-4.0f64).exp();
    let p = p_lo + (1.0 - p_lo) * rng.uniform();
    case_f_inverse_cdf(p)
}

// --- Case C: Gaussian copula over truncated-Exp(1)-on-[0,2] marginals ---

const CASE_C_TARGET_RHO: f64 = 0.5;

fn trunc_exp_inv_cdf(p: f64) -> f64 {
    // F(x) = (1 − e^{−x}) / (1 − e^{−2}) on [0, 2]; argument stays in (e^{−2}, 1]
    let c = 1.0 - (-2.0f64).exp();
    -(1.0 - p * c).ln()
}

fn std_normal_cdf(z: f64) -> f64 {
    log_normal_cdf(z).exp()
}

/// Post-truncation Pearson correlation of the copula pair as a function of
/// the copula correlation r, evaluated by 2-d Gauss–Hermite.
fn copula_pearson(r: f64, nodes: usize) -> f64 {
    let rule = gauss_hermite(nodes);
    let sqrt2 = std::f64::consts::SQRT_2;
    let inv_pi = 1.0 / std::f64::consts::PI;
    // marginal moments via 1-d rule
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
        let z = sqrt2 * x;
        let val = trunc_exp_inv_cdf(std_normal_cdf(z));
        m1 += w * val;
        m2 += w * val * val;
    }
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    m1 *= inv_sqrt_pi;
    m2 *= inv_sqrt_pi;
    let var = m2 - m1 * m1;
    // cross moment via 2-d rule
    let mut cross = 0.0;
    for (&x1, &w1) in rule.nodes.iter().zip(&rule.weights) {
        let z1 = sqrt2 * x1;
        let v1 = trunc_exp_inv_cdf(std_normal_cdf(z1));
        let mut inner = 0.0;
        for (&x2, &w2) in rule.nodes.iter().zip(&rule.weights) {
            let z2 = r * z1 + (1.0 - r * r).sqrt() * sqrt2 * x2;
            inner += w2 * trunc_exp_inv_cdf(std_normal_cdf(z2));
        }
        cross += w1 * v1 * inner;
    }
    cross *= inv_pi;
    (cross - m1 * m1) / var
}

/// Copula correlation calibrated by bisection so the post-truncation Pearson
/// correlation of (u², v²) is 0.5. Deterministic; cached per process.
pub fn case_c_copula_r() -> f64 {
    static CACHED: OnceLock<f64> = OnceLock::new();
    *CACHED.get_or_init(|| {
        let (mut lo, mut hi) = (0.0f64, 0.9999f64);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if copula_pearson(mid, 64) < CASE_C_TARGET_RHO {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    })
}

fn case_c_draw_pair(rng: &mut RngStream) -> (f64, f64) {
    let r = case_c_copula_r();
    let z1 = rng.standard_normal();
    let z2 = r * z1 + (1.0 - r * r).sqrt() * rng.standard_normal();
    (trunc_exp_inv_cdf(std_normal_cdf(z1)), trunc_exp_inv_cdf(std_normal_cdf(z2)))
}

fn draw_past_sq(case: CaseId, rng: &mut RngStream) -> Result<f64> {
    Ok(match case {
        CaseId::A => truncated_normal(2.0, 1.0, 0.0, 4.0, rng)?,
        CaseId::B | CaseId::C => truncated_exp(2.0, rng)?,
        CaseId::D | CaseId::E => truncated_normal(1.0, 1.0, 0.0, 2.0, rng)?,
        CaseId::F => case_f_draw(rng),
    })
}

fn draw_future_sq(case: CaseId, rng: &mut RngStream) -> Result<f64> {
    Ok(match case {
        CaseId::A => truncated_normal(2.0, 1.0, 0.0, 4.0, rng)?,
        CaseId::B | CaseId::C => truncated_exp(2.0, rng)?,
        CaseId::D => truncated_normal(1.0, 1.0, 0.0, 2.0, rng)?,
        CaseId::E => truncated_chi2_1(3.0, rng)?,
        CaseId::F => 0.5 + 0.5 * rng.uniform(),
    })
}

/// Build a design for one of the regimes A–F. Replicated units (cases D, E)
/// get K_i = 2 with two independent past draws; K̃_i = 1 everywhere.
pub fn build_case_design(spec: &CaseSpec, rng: &mut RngStream) -> Result<Design> {
    spec.validate()?;
    let n = spec.n;
    let n_rep = spec.replicated_count();
    if n_rep > n {
        return Err(CoreError::Precondition(format!("replicated count {n_rep} > n = {n}")));
    }
    let rep_set = rng.choose_indices(n, n_rep);
    let mut is_rep = vec![false; n];
    for &i in &rep_set {
        is_rep[i] = true;
    }

    let to_weight = |sq: f64| if spec.covariates_are_squared { sq.sqrt() } else { sq };
    let d = spec.fixed_effects_dim;
    let mut units = Vec::with_capacity(n);
    for i in 0..n {
        let (u_draws, v_draw) = if spec.case_id == CaseId::C {
            // dependent pair; replicates never occur in case C
            let (u2, v2) = case_c_draw_pair(rng);
            (vec![u2], v2)
        } else {
            let k = if is_rep[i] { 2 } else { 1 };
            let mut us = Vec::with_capacity(k);
            for _ in 0..k {
                us.push(draw_past_sq(spec.case_id, rng)?);
            }
            (us, draw_future_sq(spec.case_id, rng)?)
        };
        let u: Vec<f64> = u_draws.into_iter().map(to_weight).collect();
        let v = vec![to_weight(v_draw)];
        let x = (0..u.len())
            .map(|_| (0..d).map(|_| rng.standard_normal()).collect())
            .collect();
        let x_future = (0..v.len())
            .map(|_| (0..d).map(|_| rng.standard_normal()).collect())
            .collect();
        units.push(Unit { x, u, x_future, v });
    }
    Design::new(d, units)
}
