//! Fission sets, surrogate statistics, and the predictive KL risk estimator
//! R̂ₙ = aₙ + R̂₁ − R̂₂ with the dependency/improvement diagnostics.

use crate::cases::{build_case_design, CaseId, CaseSpec};
use crate::design::Design;
use crate::error::{CoreError, Result};
use crate::estimators::SuffStats;
use crate::numeric::{gauss_hermite, NeumaierSum};
use crate::priors::{log_marginal_m, log_marginal_m_tilde, Prior};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

/// Threshold policy h_n, quantized as max(1, ⌊policy(n)⌋).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HPolicy {
    Const(u32),
    LogN,
    NQuarterRoot,
    NSqrt,
}

impl HPolicy {
    pub fn h_for(&self, n: usize) -> u32 {
        let raw = match self {
            HPolicy::Const(k) => *k as f64,
            HPolicy::LogN => (n as f64).ln(),
            HPolicy::NQuarterRoot => (n as f64).powf(0.25),
            HPolicy::NSqrt => (n as f64).sqrt(),
        };
        (raw.floor() as u32).max(1)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim();
        match t {
            "logn" => Ok(HPolicy::LogN),
            "n14" => Ok(HPolicy::NQuarterRoot),
            "n12" => Ok(HPolicy::NSqrt),
            _ => t
                .parse::<u32>()
                .map(HPolicy::Const)
                .map_err(|_| CoreError::Precondition(format!("unknown h policy: {t}"))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            HPolicy::Const(k) => k.to_string(),
            HPolicy::LogN => "logn".into(),
            HPolicy::NQuarterRoot => "n14".into(),
            HPolicy::NSqrt => "n12".into(),
        }
    }
}

/// One future coordinate's reuse structure: the unit/replicate it belongs to,
/// the reuse set S_ik (unit indices j with u_j² ≥ u_i² + v_ik²), and the
/// noise coefficients d_ikj.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoordReuse {
    pub unit: u32,
    pub rep: u32,
    pub set: Vec<u32>,
    pub coeff: Vec<f64>,
}

/// Reuse sets with threshold-h bookkeeping: the improved set ℐ(h), the
/// dependency fraction D_n(h), and the improvement factor IF_n(h).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FissionPlan {
    pub h: u32,
    pub coords: Vec<CoordReuse>,
    pub improved: Vec<bool>,
    pub d_n: f64,
    pub if_n: f64,
    pub kappa: usize,
}

impl FissionPlan {
    pub fn improved_count(&self) -> usize {
        self.improved.iter().filter(|&&b| b).count()
    }

    /// Recompute D_n and IF_n from the sets.
    pub fn recompute_diagnostics(&self) -> (f64, f64) {
        let mut d = NeumaierSum::new();
        let mut improved = 0usize;
        for coord in &self.coords {
            let s = coord.set.len();
            if s >= self.h as usize {
                d.add(1.0 / s as f64);
                improved += 1;
            }
        }
        (d.total() / self.kappa as f64, improved as f64 / self.kappa as f64)
    }

    /// Re-derive membership at a different threshold without rebuilding sets.
    pub fn with_threshold(&self, h: u32) -> Result<FissionPlan> {
        if h < 1 {
            return Err(CoreError::Precondition("h must be >= 1".into()));
        }
        let improved: Vec<bool> = self.coords.iter().map(|c| c.set.len() >= h as usize).collect();
        let mut plan = FissionPlan {
            h,
            coords: self.coords.clone(),
            improved,
            d_n: 0.0,
            if_n: 0.0,
            kappa: self.kappa,
        };
        let (d_n, if_n) = plan.recompute_diagnostics();
        plan.d_n = d_n;
        plan.if_n = if_n;
        Ok(plan)
    }

    /// Histogram-style summary for harness output.
    pub fn summary_json(&self) -> serde_json::Value {
        let sizes: Vec<usize> = self.coords.iter().map(|c| c.set.len()).collect();
        serde_json::json!({
            "h": self.h,
            "kappa": self.kappa,
            "improved": self.improved_count(),
            "d_n": self.d_n,
            "if_n": self.if_n,
            "set_size_min": sizes.iter().min(),
            "set_size_max": sizes.iter().max(),
            "set_size_mean": sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64,
        })
    }
}

/// aₙ = (2 κₙ)⁻¹ Σ_i Σ_k log(1 + v_ik²/u_i²); parameter-free.
pub fn a_n(design: &Design) -> f64 {
    let mut acc = NeumaierSum::new();
    for (i, unit) in design.units.iter().enumerate() {
        let u2 = design.u_agg[i] * design.u_agg[i];
        for &v in &unit.v {
            acc.add((v * v / u2).ln_1p());
        }
    }
    acc.total() / (2.0 * design.kappa() as f64)
}

/// Build reuse sets and coefficients; j ∈ S_ik ⇔ u_j² − u_i² − v_ik² ≥ 0,
/// d_ikj = u_j⁻² v_ik² ((v_ik² + u_i²)⁻¹ u_j² − 1) ≥ 0.
pub fn build_fission_plan(design: &Design, h: u32) -> Result<FissionPlan> {
    if h < 1 {
        return Err(CoreError::Precondition("h must be >= 1".into()));
    }
    design.validate()?;
    let n = design.n();
    // sort units by u² once; each set is a suffix of the sorted order
    let u2: Vec<f64> = design.u_agg.iter().map(|u| u * u).collect();
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&a, &b| u2[a as usize].partial_cmp(&u2[b as usize]).unwrap());
    let sorted_u2: Vec<f64> = order.iter().map(|&j| u2[j as usize]).collect();

    let mut coords = Vec::with_capacity(design.kappa());
    for (i, unit) in design.units.iter().enumerate() {
        for (k, &v) in unit.v.iter().enumerate() {
            let threshold = u2[i] + v * v;
            // first sorted position with u_j² >= threshold
            let pos = sorted_u2.partition_point(|&x| x < threshold);
            let mut set: Vec<u32> = order[pos..].to_vec();
            set.sort_unstable();
            let coeff = set
                .iter()
                .map(|&j| {
                    let uj2 = u2[j as usize];
                    let d = v * v / uj2 * (uj2 / threshold - 1.0);
                    debug_assert!(d >= -1e-15);
                    d.max(0.0)
                })
                .collect();
            coords.push(CoordReuse { unit: i as u32, rep: k as u32, set, coeff });
        }
    }
    let improved: Vec<bool> = coords.iter().map(|c| c.set.len() >= h as usize).collect();
    let mut plan =
        FissionPlan { h, coords, improved, d_n: 0.0, if_n: 0.0, kappa: design.kappa() };
    let (d_n, if_n) = plan.recompute_diagnostics();
    plan.d_n = d_n;
    plan.if_n = if_n;
    Ok(plan)
}

/// Options shared by the risk estimator evaluations.
#[derive(Debug, Clone, Copy)]
pub struct RiskOptions {
    /// Gauss–Hermite nodes for the Rao-Blackwellized ζ-expectation.
    pub rb_nodes: usize,
    /// Reproduce the printed surrogate Ŵ = vZ_j + √d·σ̂·ζ instead of the
    /// variance-matched vZ_j + √d·ζ.
    pub legacy_sigma_noise: bool,
}

impl Default for RiskOptions {
    fn default() -> Self {
        RiskOptions { rb_nodes: 21, legacy_sigma_noise: false }
    }
}

/// E_ζ[ log m̃_g(v_ik z_j + √d_ikj ζ; u_i, v_ik, σ̂) ], ζ ~ N(0,1), by
/// Gauss–Hermite; deterministic (no sampling).
pub fn rb_surrogate_term(
    prior: &Prior,
    z_j: f64,
    u_i: f64,
    v_ik: f64,
    sigma_hat: f64,
    d_ikj: f64,
    nodes: usize,
) -> Result<f64> {
    rb_surrogate_term_with(prior, z_j, u_i, v_ik, sigma_hat, d_ikj, nodes, false)
}

pub fn rb_surrogate_term_with(
    prior: &Prior,
    z_j: f64,
    u_i: f64,
    v_ik: f64,
    sigma_hat: f64,
    d_ikj: f64,
    nodes: usize,
    legacy_sigma_noise: bool,
) -> Result<f64> {
    if d_ikj < 0.0 {
        return Err(CoreError::Precondition(format!("negative noise coefficient d = {d_ikj}")));
    }
    let noise_sd = if legacy_sigma_noise { d_ikj.sqrt() * sigma_hat } else { d_ikj.sqrt() };
    let center = v_ik * z_j;
    if noise_sd == 0.0 {
        return log_marginal_m_tilde(prior, center, u_i, v_ik, sigma_hat);
    }
    let rule = gauss_hermite(nodes);
    let scale = std::f64::consts::SQRT_2 * noise_sd;
    let mut acc = NeumaierSum::new();
    for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
        acc.add(w * log_marginal_m_tilde(prior, center + scale * x, u_i, v_ik, sigma_hat)?);
    }
    Ok(acc.total() / std::f64::consts::PI.sqrt())
}

fn check_stats(stats: &SuffStats, design: &Design, sigma_hat: f64) -> Result<()> {
    if stats.z.len() != design.n() {
        return Err(CoreError::DimensionMismatch("stats/design unit counts".into()));
    }
    if (stats.sigma_used - sigma_hat).abs() > 1e-12 * sigma_hat.abs().max(1.0) {
        return Err(CoreError::Precondition(format!(
            "sigma_hat {} differs from the sigma the stats were built with ({})",
            sigma_hat, stats.sigma_used
        )));
    }
    Ok(())
}

/// R̂₁ = κₙ⁻¹ Σ log m_g(v_ik Z_i; u_i, v_ik, σ̂).
pub fn r1_hat(prior: &Prior, stats: &SuffStats, design: &Design, sigma_hat: f64) -> Result<f64> {
    check_stats(stats, design, sigma_hat)?;
    let coords = design.future_coords();
    let total = try_par_sum(coords.len(), |c| {
        let (i, k) = coords[c];
        let v = design.units[i].v[k];
        log_marginal_m(prior, v * stats.z[i], design.u_agg[i], v, sigma_hat)
    })?;
    Ok(total / design.kappa() as f64)
}

/// Deterministic parallel sum over fallible per-index terms.
fn try_par_sum(n: usize, f: impl Fn(usize) -> Result<f64> + Sync) -> Result<f64> {
    // evaluate in parallel; fail fast on the first error by index order
    let vals: Vec<Result<f64>> = {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(|i| f(i)).collect()
    };
    let mut acc = NeumaierSum::new();
    for v in vals {
        acc.add(v?);
    }
    Ok(acc.total())
}

/// R̂₂(h) = norm⁻¹ Σ_{(i,k)∈ℐ(h)} |S_ik|⁻¹ Σ_{j∈S_ik} E_ζ log m̃_g(Ŵ_ikj(ζ)).
///
/// `normalizer` is κₙ in normal mode and |ℐ(h)| in scarce mode.
fn r2_hat_normalized(
    prior: &Prior,
    stats: &SuffStats,
    plan: &FissionPlan,
    design: &Design,
    sigma_hat: f64,
    normalizer: f64,
    options: &RiskOptions,
) -> Result<f64> {
    check_stats(stats, design, sigma_hat)?;
    if plan.kappa != design.kappa() || plan.coords.len() != design.kappa() {
        return Err(CoreError::DimensionMismatch("plan built from different design".into()));
    }
    let improved_idx: Vec<usize> =
        (0..plan.coords.len()).filter(|&c| plan.improved[c]).collect();
    if improved_idx.is_empty() {
        return Ok(0.0);
    }
    let total = try_par_sum(improved_idx.len(), |ci| {
        let coord = &plan.coords[improved_idx[ci]];
        let i = coord.unit as usize;
        let v = design.units[i].v[coord.rep as usize];
        let u = design.u_agg[i];
        let mut acc = NeumaierSum::new();
        for (&j, &d) in coord.set.iter().zip(&coord.coeff) {
            acc.add(rb_surrogate_term_with(
                prior,
                stats.z[j as usize],
                u,
                v,
                sigma_hat,
                d,
                options.rb_nodes,
                options.legacy_sigma_noise,
            )?);
        }
        Ok(acc.total() / coord.set.len() as f64)
    })?;
    Ok(total / normalizer)
}

/// R̂₂(h) with the κₙ normalization of the replicate-rich estimator.
pub fn r2_hat(
    prior: &Prior,
    stats: &SuffStats,
    plan: &FissionPlan,
    design: &Design,
    sigma_hat: f64,
    options: &RiskOptions,
) -> Result<f64> {
    r2_hat_normalized(prior, stats, plan, design, sigma_hat, design.kappa() as f64, options)
}

/// Sampled (non-Rao-Blackwellized) variant: a single ζ draw per (i,k,j).
/// Test oracle for the variance-dominance property.
pub fn r2_hat_sampled(
    prior: &Prior,
    stats: &SuffStats,
    plan: &FissionPlan,
    design: &Design,
    sigma_hat: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    check_stats(stats, design, sigma_hat)?;
    let mut total = NeumaierSum::new();
    for (c, coord) in plan.coords.iter().enumerate() {
        if !plan.improved[c] {
            continue;
        }
        let i = coord.unit as usize;
        let v = design.units[i].v[coord.rep as usize];
        let u = design.u_agg[i];
        let mut acc = NeumaierSum::new();
        for (&j, &d) in coord.set.iter().zip(&coord.coeff) {
            let w = v * stats.z[j as usize] + d.sqrt() * rng.standard_normal();
            acc.add(log_marginal_m_tilde(prior, w, u, v, sigma_hat)?);
        }
        total.add(acc.total() / coord.set.len() as f64);
    }
    Ok(total.total() / design.kappa() as f64)
}

/// The assembled risk estimate and its diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskBreakdown {
    pub a_n: f64,
    pub r1_hat: f64,
    pub r2_hat: f64,
    pub total: f64,
    pub h_used: u32,
    pub scarce_mode: bool,
    pub d_n: f64,
    pub if_n: f64,
}

impl RiskBreakdown {
    pub fn from_parts(
        a_n: f64,
        r1_hat: f64,
        r2_hat: f64,
        h_used: u32,
        scarce_mode: bool,
        d_n: f64,
        if_n: f64,
    ) -> Self {
        RiskBreakdown {
            a_n,
            r1_hat,
            r2_hat,
            total: a_n + r1_hat - r2_hat,
            h_used,
            scarce_mode,
            d_n,
            if_n,
        }
    }
}

/// R̂ₙ = aₙ + R̂₁ − R̂₂. Normal mode sums aₙ and R̂₁ over all κₙ coordinates;
/// scarce mode restricts all three terms to ℐ(h) and normalizes by |ℐ(h)|
/// (the modified-predictor risk of the highly data-scarce regime).
pub fn risk_hat(
    prior: &Prior,
    stats: &SuffStats,
    plan: &FissionPlan,
    design: &Design,
    sigma_hat: f64,
    scarce_mode: bool,
    options: &RiskOptions,
) -> Result<RiskBreakdown> {
    check_stats(stats, design, sigma_hat)?;
    let improved = plan.improved_count();
    if scarce_mode && improved == 0 {
        return Err(CoreError::EmptyImprovedSet);
    }
    if !prior.is_proper() {
        // uniform prior: both marginal terms vanish; risk is the design term
        let a = if scarce_mode {
            restricted_a_n(design, plan, improved as f64)
        } else {
            a_n(design)
        };
        return Ok(RiskBreakdown::from_parts(
            a,
            0.0,
            0.0,
            plan.h,
            scarce_mode,
            plan.d_n,
            plan.if_n,
        ));
    }
    if scarce_mode {
        let norm = improved as f64;
        let a = restricted_a_n(design, plan, norm);
        let coords: Vec<usize> = (0..plan.coords.len()).filter(|&c| plan.improved[c]).collect();
        let r1 = try_par_sum(coords.len(), |ci| {
            let coord = &plan.coords[coords[ci]];
            let i = coord.unit as usize;
            let v = design.units[i].v[coord.rep as usize];
            log_marginal_m(prior, v * stats.z[i], design.u_agg[i], v, sigma_hat)
        })? / norm;
        let r2 = r2_hat_normalized(prior, stats, plan, design, sigma_hat, norm, options)?;
        Ok(RiskBreakdown::from_parts(a, r1, r2, plan.h, true, plan.d_n, plan.if_n))
    } else {
        let a = a_n(design);
        let r1 = r1_hat(prior, stats, design, sigma_hat)?;
        let r2 = r2_hat(prior, stats, plan, design, sigma_hat, options)?;
        Ok(RiskBreakdown::from_parts(a, r1, r2, plan.h, false, plan.d_n, plan.if_n))
    }
}

fn restricted_a_n(design: &Design, plan: &FissionPlan, norm: f64) -> f64 {
    let mut acc = NeumaierSum::new();
    for (c, coord) in plan.coords.iter().enumerate() {
        if !plan.improved[c] {
            continue;
        }
        let i = coord.unit as usize;
        let u2 = design.u_agg[i] * design.u_agg[i];
        let v = design.units[i].v[coord.rep as usize];
        acc.add((v * v / u2).ln_1p());
    }
    acc.total() / (2.0 * norm)
}

/// One row of the (n, D_n, IF_n) diagnostics table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsPoint {
    pub n: usize,
    pub h: u32,
    pub mean_d_n: f64,
    pub se_d_n: f64,
    pub mean_if_n: f64,
    pub se_if_n: f64,
}

/// Averaged D_n(h_n), IF_n(h_n) over replications of a case design, per grid n.
pub fn diagnostics_curve(
    case: CaseId,
    n_grid: &[usize],
    h_policy: HPolicy,
    reps: usize,
    master_seed: u64,
) -> Result<Vec<DiagnosticsPoint>> {
    if n_grid.is_empty() {
        return Err(CoreError::Precondition("empty n grid".into()));
    }
    let mut out = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let h = h_policy.h_for(n);
        use rayon::prelude::*;
        let vals: Vec<Result<(f64, f64)>> = (0..reps)
            .into_par_iter()
            .map(|rep| {
                let mut rng = RngStream::derive(
                    master_seed,
                    &["diag", case.label(), &n.to_string(), &rep.to_string()],
                );
                let design = build_case_design(&CaseSpec::new(case, n), &mut rng)?;
                let plan = build_fission_plan(&design, h)?;
                Ok((plan.d_n, plan.if_n))
            })
            .collect();
        let mut ds = Vec::with_capacity(reps);
        let mut ifs = Vec::with_capacity(reps);
        for v in vals {
            let (d, f) = v?;
            ds.push(d);
            ifs.push(f);
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let se = |xs: &[f64], m: f64| {
            if xs.len() < 2 {
                0.0
            } else {
                (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
                    / (xs.len() as f64 - 1.0)
                    / xs.len() as f64)
                    .sqrt()
            }
        };
        let (md, mf) = (mean(&ds), mean(&ifs));
        out.push(DiagnosticsPoint {
            n,
            h,
            mean_d_n: md,
            se_d_n: se(&ds, md),
            mean_if_n: mf,
            se_if_n: se(&ifs, mf),
        });
    }
    Ok(out)
}
