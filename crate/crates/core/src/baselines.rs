//! The two plug-in competitors: the naive point-estimate predictive and the
//! g-modeling EM plug-in.

use crate::design::Design;
use crate::error::{CoreError, Result};
use crate::estimators::{FitResult, SuffStats};
use crate::numeric::{log_normal_pdf, log_sum_exp, NeumaierSum};
use crate::priors::{posterior_predictive_logpdf, Prior};
use serde::{Deserialize, Serialize};

/// Per-(i,k) log-density callback signature shared with the oracle module.
pub type LogDensityFn<'a> = Box<dyn Fn(usize, usize, f64) -> Result<f64> + Sync + 'a>;

/// Naive plug-in: γ̂_i = σ̂ Z_i, predictive N(x̃'β̂ + v γ̂_i, σ̂).
pub fn naive_plugin_density<'a>(
    stats: &'a SuffStats,
    fit: &'a FitResult,
    design: &'a Design,
) -> LogDensityFn<'a> {
    Box::new(move |i, k, y| {
        let unit = &design.units[i];
        let xb: f64 = if design.d > 0 {
            unit.x_future[k].iter().zip(&fit.beta_hat).map(|(x, b)| x * b).sum()
        } else {
            0.0
        };
        let gamma_hat = fit.sigma_hat * stats.z[i];
        Ok(log_normal_pdf(y, xb + unit.v[k] * gamma_hat, fit.sigma_hat))
    })
}

/// Fitted zero-centered Gaussian scale mixture from the EM baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmFit {
    pub weights: Vec<f64>,
    pub variance_grid: Vec<f64>,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl EmFit {
    pub fn prior(&self) -> Result<Prior> {
        Prior::gauss_mix(self.weights.clone(), self.variance_grid.clone())
    }
}

/// EM for the heteroskedastic marginal likelihood
/// Π_i Σ_l π_l φ(γ̃_i; 0, √(ν_l + τ_i²)) with γ̃_i = σ̂ Z_i, τ_i² = σ̂²/u_i².
pub fn gmodel_em(
    gamma_tilde: &[f64],
    tau2: &[f64],
    variance_grid: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<EmFit> {
    if variance_grid.is_empty() {
        return Err(CoreError::EmptyGrid);
    }
    if gamma_tilde.len() != tau2.len() || gamma_tilde.is_empty() {
        return Err(CoreError::DimensionMismatch("gamma_tilde/tau2".into()));
    }
    if tau2.iter().any(|&t| !(t > 0.0)) {
        return Err(CoreError::NonPositiveScale { name: "tau2", value: f64::NAN });
    }
    let n = gamma_tilde.len();
    let l_count = variance_grid.len();
    let mut weights = vec![1.0 / l_count as f64; l_count];
    // per (i, l) component log densities, fixed across iterations
    let comp_logpdf: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            variance_grid
                .iter()
                .map(|&nu| log_normal_pdf(gamma_tilde[i], 0.0, (nu + tau2[i]).sqrt()))
                .collect()
        })
        .collect();
    let loglik = |w: &[f64]| -> Result<f64> {
        let mut acc = NeumaierSum::new();
        for row in &comp_logpdf {
            let terms: Vec<f64> = row
                .iter()
                .zip(w)
                .map(|(&lp, &wl)| if wl > 0.0 { wl.ln() + lp } else { f64::NEG_INFINITY })
                .collect();
            let v = log_sum_exp(&terms);
            if !v.is_finite() {
                return Err(CoreError::NonFinite("EM marginal likelihood".into()));
            }
            acc.add(v);
        }
        Ok(acc.total())
    };
    let mut trace = vec![loglik(&weights)?];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        // E-step responsibilities, M-step weight update
        let mut new_w = vec![0.0; l_count];
        for row in &comp_logpdf {
            let terms: Vec<f64> = row
                .iter()
                .zip(&weights)
                .map(|(&lp, &wl)| if wl > 0.0 { wl.ln() + lp } else { f64::NEG_INFINITY })
                .collect();
            let lse = log_sum_exp(&terms);
            for l in 0..l_count {
                new_w[l] += (terms[l] - lse).exp();
            }
        }
        let total: f64 = new_w.iter().sum();
        new_w.iter_mut().for_each(|w| *w /= total);
        weights = new_w;
        let ll = loglik(&weights)?;
        let delta = ll - trace.last().unwrap();
        debug_assert!(delta > -1e-10, "EM log-likelihood decreased by {delta}");
        trace.push(ll);
        if delta.abs() < tol {
            converged = true;
            break;
        }
    }
    Ok(EmFit {
        weights,
        variance_grid: variance_grid.to_vec(),
        loglik_trace: trace,
        iterations,
        converged,
    })
}

/// Convenience wrapper: γ̃ and τ² from the sufficient statistics.
pub fn gmodel_em_from_stats(
    stats: &SuffStats,
    variance_grid: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<EmFit> {
    let sigma = stats.sigma_used;
    let gamma_tilde: Vec<f64> = stats.z.iter().map(|&z| sigma * z).collect();
    let tau2: Vec<f64> = stats.u_agg.iter().map(|&u| sigma * sigma / (u * u)).collect();
    gmodel_em(&gamma_tilde, &tau2, variance_grid, tol, max_iter)
}

/// Plug the fitted mixture into the Bayes predictive.
pub fn gmodel_plugin_density<'a>(
    emfit: &EmFit,
    stats: &'a SuffStats,
    fit: &'a FitResult,
    design: &'a Design,
) -> Result<LogDensityFn<'a>> {
    let prior = emfit.prior()?;
    Ok(Box::new(move |i, k, y| {
        let unit = &design.units[i];
        let xf: &[f64] = if design.d > 0 { &unit.x_future[k] } else { &[] };
        posterior_predictive_logpdf(
            &prior,
            stats.z[i],
            stats.u_agg[i],
            unit.v[k],
            &fit.beta_hat,
            fit.sigma_hat,
            xf,
            y,
        )
    }))
}
