//! Ground-truth evaluation: quadrature predictive KL risk, the known-parameter
//! risk decomposition, the Gaussian closed form, Bayes benchmarks, and oracle
//! selection within a class.

use crate::baselines::LogDensityFn;
use crate::design::{simulate, Design, ModelTruth};
use crate::error::{CoreError, Result};
use crate::estimators::{aggregate_stats, select_estimator, FitResult, SuffStats};
use crate::fission::{a_n, FissionPlan, HPolicy, RiskBreakdown};
use crate::numeric::{gh_expect, gl_integrate, NeumaierSum};
use crate::priors::{
    log_marginal_m, log_marginal_m_tilde, posterior_predictive_logpdf, Prior,
};
use crate::rng::RngStream;
use crate::select::{
    build_oracle_objective, fit_mixture_weights, fit_spike_slab, PriorClass, SelectOptions,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_EVAL_NODES: usize = 61;

/// Exact (quadrature) risk decomposition a_n + R₁ − R₂ at known (β, σ, γ).
///
/// R₁ integrates log m_g over vZ_i | γ_i ~ N(vγ_i/σ, v²/u_i²); R₂ integrates
/// log m̃_g over W̃_ik | γ_i ~ N(vγ_i/σ, v²/(u_i²+v_ik²)). The uniform prior
/// returns a_n with both terms zero.
pub fn true_risk_decomposed(
    truth: &ModelTruth,
    design: &Design,
    prior: &Prior,
    nodes: usize,
) -> Result<RiskBreakdown> {
    truth.validate(design)?;
    if !prior.is_proper() {
        return Ok(RiskBreakdown::from_parts(a_n(design), 0.0, 0.0, 0, false, 0.0, 0.0));
    }
    let coords = design.future_coords();
    let sigma = truth.sigma;
    let terms: Vec<Result<(f64, f64)>> = coords
        .par_iter()
        .map(|&(i, k)| {
            let u = design.u_agg[i];
            let v = design.units[i].v[k];
            let center = v * truth.gamma[i] / sigma;
            let mut err: Option<CoreError> = None;
            let r1 = gh_expect(center, v / u, nodes, |a| {
                match log_marginal_m(prior, a, u, v, sigma) {
                    Ok(val) => val,
                    Err(e) => {
                        err.get_or_insert(e);
                        f64::NAN
                    }
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            let sd_tilde = v / (u * u + v * v).sqrt();
            let mut err: Option<CoreError> = None;
            let r2 = gh_expect(center, sd_tilde, nodes, |w| {
                match log_marginal_m_tilde(prior, w, u, v, sigma) {
                    Ok(val) => val,
                    Err(e) => {
                        err.get_or_insert(e);
                        f64::NAN
                    }
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            Ok((r1, r2))
        })
        .collect();
    let mut acc1 = NeumaierSum::new();
    let mut acc2 = NeumaierSum::new();
    for t in terms {
        let (r1, r2) = t?;
        acc1.add(r1);
        acc2.add(r2);
    }
    let kappa = design.kappa() as f64;
    Ok(RiskBreakdown::from_parts(
        a_n(design),
        acc1.total() / kappa,
        acc2.total() / kappa,
        0,
        false,
        0.0,
        0.0,
    ))
}

/// Restricted/renormalized decomposition over ℐ(h): the exact risk of the
/// modified predictor on the improved coordinates (scarce-regime pairing).
pub fn true_risk_restricted(
    truth: &ModelTruth,
    design: &Design,
    prior: &Prior,
    plan: &FissionPlan,
    nodes: usize,
) -> Result<RiskBreakdown> {
    truth.validate(design)?;
    let improved = plan.improved_count();
    if improved == 0 {
        return Err(CoreError::EmptyImprovedSet);
    }
    let norm = improved as f64;
    let sigma = truth.sigma;
    let mut a_acc = NeumaierSum::new();
    let mut acc1 = NeumaierSum::new();
    let mut acc2 = NeumaierSum::new();
    for (c, coord) in plan.coords.iter().enumerate() {
        if !plan.improved[c] {
            continue;
        }
        let i = coord.unit as usize;
        let u = design.u_agg[i];
        let v = design.units[i].v[coord.rep as usize];
        a_acc.add((v * v / (u * u)).ln_1p() / 2.0);
        if prior.is_proper() {
            let center = v * truth.gamma[i] / sigma;
            let mut r1 = 0.0;
            let mut r2 = 0.0;
            let mut err: Option<CoreError> = None;
            r1 += gh_expect(center, v / u, nodes, |a| match log_marginal_m(prior, a, u, v, sigma)
            {
                Ok(val) => val,
                Err(e) => {
                    err.get_or_insert(e);
                    f64::NAN
                }
            });
            let sd_tilde = v / (u * u + v * v).sqrt();
            r2 += gh_expect(center, sd_tilde, nodes, |w| {
                match log_marginal_m_tilde(prior, w, u, v, sigma) {
                    Ok(val) => val,
                    Err(e) => {
                        err.get_or_insert(e);
                        f64::NAN
                    }
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            acc1.add(r1);
            acc2.add(r2);
        }
    }
    Ok(RiskBreakdown::from_parts(
        a_acc.total() / norm,
        acc1.total() / norm,
        acc2.total() / norm,
        plan.h,
        true,
        plan.d_n,
        plan.if_n,
    ))
}

/// Closed-form excess R₁ − R₂ for the Gaussian prior N(0, τ) at σ = 1.
///
/// Derived from the decomposition's two Gaussian expectations:
///   −½ log L + ½ v²(γ² − τ) / ((τu² + 1)(τ(u² + v²) + 1)),
///   L = (τu² + 1)(u² + v²) / (u²(τ(u² + v²) + 1)).
pub fn gaussian_excess_closed_form(tau: f64, gamma: f64, u2: f64, v2: f64) -> f64 {
    let log_l = ((tau * u2 + 1.0) * (u2 + v2) / (u2 * (tau * (u2 + v2) + 1.0))).ln();
    let quad = v2 * (gamma * gamma - tau) / ((tau * u2 + 1.0) * (tau * (u2 + v2) + 1.0));
    -0.5 * log_l + 0.5 * quad
}

/// Predictive KL loss of a per-(i,k) log-density callback against the truth:
/// κₙ⁻¹ Σ ∫ φ(ỹ; x̃'β + vγ_i, σ)[log φ(·) − callback(ỹ)] dỹ by Gauss–Hermite.
pub fn kl_loss_prde<F>(callback: F, truth: &ModelTruth, design: &Design, nodes: usize) -> Result<f64>
where
    F: Fn(usize, usize, f64) -> Result<f64> + Sync,
{
    truth.validate(design)?;
    let coords = design.future_coords();
    let sigma = truth.sigma;
    let vals: Vec<Result<f64>> = coords
        .par_iter()
        .map(|&(i, k)| {
            let unit = &design.units[i];
            let xb: f64 = if design.d > 0 {
                unit.x_future[k].iter().zip(&truth.beta).map(|(x, b)| x * b).sum()
            } else {
                0.0
            };
            let mean = xb + unit.v[k] * truth.gamma[i];
            let mut err: Option<CoreError> = None;
            let loss = gh_expect(mean, sigma, nodes, |y| {
                let log_true = crate::numeric::log_normal_pdf(y, mean, sigma);
                match callback(i, k, y) {
                    Ok(lp) if lp.is_finite() => log_true - lp,
                    Ok(lp) => {
                        err.get_or_insert(CoreError::NonFinite(format!(
                            "prde log-density {lp} at ({i},{k})"
                        )));
                        f64::NAN
                    }
                    Err(e) => {
                        err.get_or_insert(e);
                        f64::NAN
                    }
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            Ok(loss)
        })
        .collect();
    let mut acc = NeumaierSum::new();
    for v in vals {
        acc.add(v?);
    }
    let loss = acc.total() / design.kappa() as f64;
    debug_assert!(loss > -1e-9, "KL loss {loss} below numerical slack");
    Ok(loss)
}

/// Per-(i,k) callback for the Bayes predictive under `prior` with plug-in
/// parameters.
pub fn bayes_prde_callback<'a>(
    prior: &'a Prior,
    stats: &'a SuffStats,
    fit: &'a FitResult,
    design: &'a Design,
) -> LogDensityFn<'a> {
    Box::new(move |i, k, y| {
        let unit = &design.units[i];
        let xf: &[f64] = if design.d > 0 { &unit.x_future[k] } else { &[] };
        posterior_predictive_logpdf(
            prior,
            stats.z[i],
            stats.u_agg[i],
            unit.v[k],
            &fit.beta_hat,
            fit.sigma_hat,
            xf,
            y,
        )
    })
}

/// Modified predictor of the scarce regime: Bayes-under-`prior` on ℐ(h) and
/// the uniform-prior predictive outside it.
pub fn modified_prde_callback<'a>(
    prior: &'a Prior,
    stats: &'a SuffStats,
    fit: &'a FitResult,
    design: &'a Design,
    plan: &'a FissionPlan,
) -> LogDensityFn<'a> {
    // coordinate → improved flag lookup
    let mut improved = vec![Vec::new(); design.n()];
    for (c, coord) in plan.coords.iter().enumerate() {
        improved[coord.unit as usize].push(plan.improved[c]);
    }
    Box::new(move |i, k, y| {
        let unit = &design.units[i];
        let xf: &[f64] = if design.d > 0 { &unit.x_future[k] } else { &[] };
        let use_prior = improved[i][k];
        let p = if use_prior { prior } else { &Prior::Uniform };
        posterior_predictive_logpdf(
            p,
            stats.z[i],
            stats.u_agg[i],
            unit.v[k],
            &fit.beta_hat,
            fit.sigma_hat,
            xf,
            y,
        )
    })
}

fn coordinate_range(g0: &Prior, s: f64, t: f64) -> (f64, f64) {
    let r = s * g0.effective_radius() + 12.0 * t;
    (-r, r)
}

/// ∫ m_{g0}(a) log m_g(a) da by composite Gauss–Legendre panels.
fn cross_entropy_term(
    g0: &Prior,
    prior: &Prior,
    u: f64,
    v: f64,
    sigma: f64,
    tilde: bool,
    nodes: usize,
) -> Result<f64> {
    let t = if tilde { v / (u * u + v * v).sqrt() } else { v / u };
    let (lo, hi) = coordinate_range(g0, v / sigma, t);
    let marg = |p: &Prior, a: f64| -> Result<f64> {
        if tilde {
            log_marginal_m_tilde(p, a, u, v, sigma)
        } else {
            log_marginal_m(p, a, u, v, sigma)
        }
    };
    let panels = (((hi - lo) / (2.0 * t)).ceil() as usize).clamp(4, 96);
    let step = (hi - lo) / panels as f64;
    let mut acc = NeumaierSum::new();
    let mut err: Option<CoreError> = None;
    for p in 0..panels {
        let a0 = lo + p as f64 * step;
        acc.add(gl_integrate(a0, a0 + step, nodes.clamp(10, 60), |a| {
            let density = match marg(g0, a) {
                Ok(l) => l.exp(),
                Err(e) => {
                    err.get_or_insert(e);
                    return f64::NAN;
                }
            };
            match marg(prior, a) {
                Ok(l) => density * l,
                Err(e) => {
                    err.get_or_insert(e);
                    f64::NAN
                }
            }
        }));
    }
    if let Some(e) = err {
        return Err(e);
    }
    Ok(acc.total())
}

/// γ-averaged risk of the Bayes predictive under `prior` when γ ~ g0:
/// a_n + κ⁻¹ Σ [∫ m_{g0} log m_g − ∫ m̃_{g0} log m̃_g]. Exact quadrature,
/// no Monte Carlo. With prior = g0 this is the conditional Bayes risk given
/// the design.
pub fn gamma_averaged_risk(
    g0: &Prior,
    design: &Design,
    prior: &Prior,
    sigma: f64,
    nodes: usize,
) -> Result<f64> {
    if !g0.is_proper() {
        return Err(CoreError::ImproperPrior("gamma_averaged_risk g0".into()));
    }
    if !(sigma > 0.0) {
        return Err(CoreError::NonPositiveScale { name: "sigma", value: sigma });
    }
    if !prior.is_proper() {
        return Ok(a_n(design));
    }
    let coords = design.future_coords();
    let sigma_terms: Vec<Result<(f64, f64)>> = coords
        .par_iter()
        .map(|&(i, k)| {
            let u = design.u_agg[i];
            let v = design.units[i].v[k];
            let c1 = cross_entropy_term(g0, prior, u, v, sigma, false, nodes)?;
            let c2 = cross_entropy_term(g0, prior, u, v, sigma, true, nodes)?;
            Ok((c1, c2))
        })
        .collect();
    let mut acc = NeumaierSum::new();
    for t in sigma_terms {
        let (c1, c2) = t?;
        acc.add(c1 - c2);
    }
    Ok(a_n(design) + acc.total() / design.kappa() as f64)
}

/// γ-averaged R₂ restricted to ℐ(h) with κₙ normalization: the exchangeable
/// target of the fission estimator R̂₂(h).
pub fn gamma_averaged_r2_restricted(
    g0: &Prior,
    design: &Design,
    prior: &Prior,
    plan: &FissionPlan,
    sigma: f64,
    nodes: usize,
) -> Result<f64> {
    if !g0.is_proper() {
        return Err(CoreError::ImproperPrior("gamma_averaged_r2 g0".into()));
    }
    let mut acc = NeumaierSum::new();
    for (c, coord) in plan.coords.iter().enumerate() {
        if !plan.improved[c] {
            continue;
        }
        let i = coord.unit as usize;
        let u = design.u_agg[i];
        let v = design.units[i].v[coord.rep as usize];
        acc.add(cross_entropy_term(g0, prior, u, v, sigma, true, nodes)?);
    }
    Ok(acc.total() / design.kappa() as f64)
}

/// Monte Carlo Bayes risk: average of `true_risk_decomposed` over γ ~ g0.
pub fn bayes_risk(
    g0: &Prior,
    design: &Design,
    reps: usize,
    nodes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if !g0.is_proper() {
        return Err(CoreError::ImproperPrior("bayes_risk".into()));
    }
    if reps < 2 {
        return Err(CoreError::Precondition("bayes_risk needs reps >= 2".into()));
    }
    let vals: Vec<Result<f64>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = RngStream::derive(seed, &["bayes-risk", &rep.to_string()]);
            let truth = crate::design::draw_truth(g0, design.n(), vec![0.0; design.d], 1.0, &mut rng)?;
            Ok(true_risk_decomposed(&truth, design, g0, nodes)?.total)
        })
        .collect();
    let mut xs = Vec::with_capacity(reps);
    for v in vals {
        xs.push(v?);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() as f64 - 1.0);
    Ok((mean, (var / xs.len() as f64).sqrt()))
}

/// Risk-minimizing member of the class at known truth, using the same
/// optimizers as the data-driven selection but with the oracle objective.
pub fn oracle_select(
    class: &PriorClass,
    truth: &ModelTruth,
    design: &Design,
    nodes: usize,
) -> Result<Prior> {
    truth.validate(design)?;
    match class {
        PriorClass::Uniform => Ok(Prior::Uniform),
        PriorClass::GaussMix { variances } => {
            let obj = build_oracle_objective(class, &truth.gamma, truth.sigma, design, nodes)?;
            let init = vec![1.0 / variances.len() as f64; variances.len()];
            let (w, _, _, _) = fit_mixture_weights(&obj, &init, 500, 1e-10)?;
            Prior::gauss_mix(w, variances.clone())
        }
        PriorClass::Discrete { support } => {
            let obj = build_oracle_objective(class, &truth.gamma, truth.sigma, design, nodes)?;
            let init = vec![1.0 / support.len() as f64; support.len()];
            let (w, _, _, _) = fit_mixture_weights(&obj, &init, 500, 1e-10)?;
            Prior::discrete(w, support.clone())
        }
        PriorClass::SpikeSlabGrid { etas, rates } => {
            let result = fit_spike_slab(etas, rates, |p| {
                true_risk_decomposed(truth, design, p, nodes)
            })?;
            Ok(result.g_hat)
        }
    }
}

/// How a replication's truth is produced.
#[derive(Debug, Clone)]
pub enum TruthFamily {
    Fixed(ModelTruth),
    /// γ redrawn i.i.d. from g0 each replication.
    Draw { g0: Prior, beta: Vec<f64>, sigma: f64 },
}

impl TruthFamily {
    fn realize(&self, design: &Design, rng: &mut RngStream) -> Result<ModelTruth> {
        match self {
            TruthFamily::Fixed(t) => Ok(t.clone()),
            TruthFamily::Draw { g0, beta, sigma } => {
                crate::design::draw_truth(g0, design.n(), beta.clone(), *sigma, rng)
            }
        }
    }
}

/// A prde-producing method for the benchmark harness.
#[derive(Debug, Clone)]
pub enum MethodSpec {
    /// plug in the exact true density (loss identically zero)
    OracleTruth,
    UniformPrior,
    NaivePlugin,
    GModel { variance_grid: Vec<f64> },
    FixedPrior(Prior),
    Proposed { class: PriorClass, h: HPolicy },
    OracleSelect { class: PriorClass },
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self {
            MethodSpec::OracleTruth => "oracle_truth".into(),
            MethodSpec::UniformPrior => "uniform".into(),
            MethodSpec::NaivePlugin => "naive".into(),
            MethodSpec::GModel { .. } => "gmodel".into(),
            MethodSpec::FixedPrior(_) => "fixed_prior".into(),
            MethodSpec::Proposed { h, .. } => format!("proposed_h{}", h.label()),
            MethodSpec::OracleSelect { .. } => "oracle_select".into(),
        }
    }
}

/// Whether parameters are treated as known in the fitting pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Known,
    Estimated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskReport {
    pub method: String,
    pub mean_loss: f64,
    pub mc_se: f64,
    pub reps_used: usize,
    pub failures: usize,
    pub mean_excess: f64,
    pub excess_se: f64,
}

/// Evaluate one replication of one method on a realized dataset.
pub fn method_loss(
    method: &MethodSpec,
    truth: &ModelTruth,
    design: &Design,
    dataset: &crate::design::Dataset,
    mode: ParamMode,
    nodes: usize,
    select_options: &SelectOptions,
) -> Result<f64> {
    let fit = match mode {
        ParamMode::Known => FitResult::known(truth.beta.clone(), truth.sigma),
        ParamMode::Estimated => select_estimator(dataset, design)?,
    };
    let stats = aggregate_stats(dataset, design, &fit.beta_hat, fit.sigma_hat)?;
    match method {
        MethodSpec::OracleTruth => {
            let cb = |i: usize, k: usize, y: f64| -> Result<f64> {
                let unit = &design.units[i];
                let xb: f64 = if design.d > 0 {
                    unit.x_future[k].iter().zip(&truth.beta).map(|(x, b)| x * b).sum()
                } else {
                    0.0
                };
                Ok(crate::numeric::log_normal_pdf(
                    y,
                    xb + unit.v[k] * truth.gamma[i],
                    truth.sigma,
                ))
            };
            kl_loss_prde(cb, truth, design, nodes)
        }
        MethodSpec::UniformPrior => {
            let cb = bayes_prde_callback(&Prior::Uniform, &stats, &fit, design);
            kl_loss_prde(|i, k, y| cb(i, k, y), truth, design, nodes)
        }
        MethodSpec::NaivePlugin => {
            let cb = crate::baselines::naive_plugin_density(&stats, &fit, design);
            kl_loss_prde(|i, k, y| cb(i, k, y), truth, design, nodes)
        }
        MethodSpec::GModel { variance_grid } => {
            let emfit = crate::baselines::gmodel_em_from_stats(&stats, variance_grid, 1e-8, 500)?;
            let cb = crate::baselines::gmodel_plugin_density(&emfit, &stats, &fit, design)?;
            kl_loss_prde(|i, k, y| cb(i, k, y), truth, design, nodes)
        }
        MethodSpec::FixedPrior(prior) => {
            let cb = bayes_prde_callback(prior, &stats, &fit, design);
            kl_loss_prde(|i, k, y| cb(i, k, y), truth, design, nodes)
        }
        MethodSpec::Proposed { class, h } => {
            let selection = crate::select::select(class, dataset, design, &fit, *h, select_options)?;
            let cb = bayes_prde_callback(&selection.g_hat, &stats, &fit, design);
            kl_loss_prde(|i, k, y| cb(i, k, y), truth, design, nodes)
        }
        MethodSpec::OracleSelect { class } => {
            let g = oracle_select(class, truth, design, nodes)?;
            let cb = bayes_prde_callback(&g, &stats, &fit, design);
            kl_loss_prde(|i, k, y| cb(i, k, y), truth, design, nodes)
        }
    }
}

/// Replicated risk of a method on a fixed design: simulate, fit, evaluate the
/// KL loss, and average. Failed replications are excluded and counted.
pub fn risk_of_method(
    method: &MethodSpec,
    truth_family: &TruthFamily,
    design: &Design,
    reps: usize,
    seed: u64,
    mode: ParamMode,
    nodes: usize,
) -> Result<RiskReport> {
    if reps < 2 {
        return Err(CoreError::Precondition("risk_of_method needs reps >= 2".into()));
    }
    let select_options = SelectOptions::default();
    let bayes_bench = match truth_family {
        TruthFamily::Draw { g0, sigma, .. } => {
            Some(gamma_averaged_risk(g0, design, g0, *sigma, nodes)?)
        }
        _ => None,
    };
    let results: Vec<Result<f64>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = RngStream::derive(seed, &["risk-of-method", &rep.to_string()]);
            let truth = truth_family.realize(design, &mut rng)?;
            let dataset = simulate(design, &truth, &mut rng)?;
            method_loss(method, &truth, design, &dataset, mode, nodes, &select_options)
        })
        .collect();
    let mut losses = Vec::with_capacity(reps);
    let mut failures = 0usize;
    for r in results {
        match r {
            Ok(l) => losses.push(l),
            Err(_) => failures += 1,
        }
    }
    if losses.len() < 2 {
        return Err(CoreError::Precondition(format!(
            "method {} failed in {} of {} replications",
            method.label(),
            failures,
            reps
        )));
    }
    let nf = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / nf;
    let var = losses.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (nf - 1.0);
    let se = (var / nf).sqrt();
    let (mean_excess, excess_se) = match bayes_bench {
        Some(b) => (mean - b, se),
        None => (f64::NAN, f64::NAN),
    };
    Ok(RiskReport {
        method: method.label(),
        mean_loss: mean,
        mc_se: se,
        reps_used: losses.len(),
        failures,
        mean_excess,
        excess_se,
    })
}
