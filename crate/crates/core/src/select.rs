//! Risk minimization over the candidate prior class: exponentiated-gradient
//! descent on mixture weights, grid search for the spike-and-slab box.

use crate::design::{Dataset, Design};
use crate::error::{CoreError, Result};
use crate::estimators::{aggregate_stats, FitResult, SuffStats};
use crate::fission::{
    a_n, build_fission_plan, risk_hat, FissionPlan, HPolicy, RiskBreakdown, RiskOptions,
};
use crate::numeric::{gauss_hermite, NeumaierSum, LN_SQRT_2PI};
use crate::priors::Prior;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Candidate class 𝒢 to minimize the estimated risk over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorClass {
    Uniform,
    GaussMix { variances: Vec<f64> },
    Discrete { support: Vec<f64> },
    SpikeSlabGrid { etas: Vec<f64>, rates: Vec<f64> },
}

/// 15 log-spaced points in [0.01, 0.99] × [0.1, 10], the default A8 box grid.
pub fn default_spike_slab_grid() -> (Vec<f64>, Vec<f64>) {
    let log_space = |lo: f64, hi: f64, m: usize| -> Vec<f64> {
        (0..m)
            .map(|i| {
                // clamp so rounding at the endpoints stays inside the box
                (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (m - 1) as f64)
                    .exp()
                    .clamp(lo, hi)
            })
            .collect()
    };
    (log_space(0.01, 0.99, 15), log_space(0.1, 10.0, 15))
}

/// One additive term group of a weight objective: a signed coefficient times
/// a weighted sum of log Σ_l π_l φ(arg; mean_l, sd_l) over the arguments.
#[derive(Debug, Clone)]
pub struct TermGroup {
    pub coef: f64,
    pub comp_mean: Vec<f64>,
    pub comp_sd: Vec<f64>,
    pub args: Vec<(f64, f64)>,
}

/// Objective of the form base + Σ_g coef_g Σ_args w · log(π-mixture density).
/// Both the fission risk estimate and the oracle risk have this shape because
/// the marginal densities are linear in the mixture weights.
#[derive(Debug, Clone)]
pub struct WeightObjective {
    pub base: f64,
    pub groups: Vec<TermGroup>,
    pub n_comp: usize,
}

impl WeightObjective {
    /// Objective value; fills `grad` with ∂F/∂π when given.
    pub fn eval(&self, pi: &[f64], mut grad: Option<&mut [f64]>) -> Result<f64> {
        if pi.len() != self.n_comp {
            return Err(CoreError::Precondition("weight vector length mismatch".into()));
        }
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
        let log_pi: Vec<f64> = pi.iter().map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY }).collect();
        let want_grad = grad.is_some();

        let partials: Vec<(f64, Vec<f64>)> = self
            .groups
            .par_chunks(8)
            .map(|chunk| {
                let mut f_acc = NeumaierSum::new();
                let mut g_acc = vec![0.0; self.n_comp];
                let mut t0 = vec![0.0; self.n_comp];
                let mut t = vec![0.0; self.n_comp];
                let mut e = vec![0.0; self.n_comp];
                for group in chunk {
                    let l_count = group.comp_mean.len();
                    let inv_sd: Vec<f64> = group.comp_sd.iter().map(|s| 1.0 / s).collect();
                    let log_norm: Vec<f64> =
                        group.comp_sd.iter().map(|s| -s.ln() - LN_SQRT_2PI).collect();
                    let mut group_f = NeumaierSum::new();
                    let mut group_g = vec![0.0; l_count];
                    for &(a, w) in &group.args {
                        let mut max_t = f64::NEG_INFINITY;
                        for l in 0..l_count {
                            let z = (a - group.comp_mean[l]) * inv_sd[l];
                            t0[l] = log_norm[l] - 0.5 * z * z;
                            t[l] = log_pi[l] + t0[l];
                            if t[l] > max_t {
                                max_t = t[l];
                            }
                        }
                        let mut s = 0.0;
                        for l in 0..l_count {
                            e[l] = (t[l] - max_t).exp();
                            s += e[l];
                        }
                        let lse = max_t + s.ln();
                        group_f.add(w * lse);
                        if want_grad {
                            for l in 0..l_count {
                                // ∂/∂π_l log mix = φ_l / mix; reuse the LSE
                                // exponentials where π_l > 0
                                let resp = if pi[l] > 0.0 {
                                    e[l] / (s * pi[l])
                                } else {
                                    (t0[l] - lse).exp()
                                };
                                group_g[l] += w * resp;
                            }
                        }
                    }
                    f_acc.add(group.coef * group_f.total());
                    for l in 0..l_count {
                        g_acc[l] += group.coef * group_g[l];
                    }
                }
                (f_acc.total(), g_acc)
            })
            .collect();

        let mut f = NeumaierSum::new();
        f.add(self.base);
        let mut g_total = vec![0.0; self.n_comp];
        for (pf, pg) in partials {
            f.add(pf);
            for l in 0..self.n_comp {
                g_total[l] += pg[l];
            }
        }
        let value = f.total();
        if !value.is_finite() {
            return Err(CoreError::NonFinite(format!("objective value {value}")));
        }
        if let Some(g) = grad {
            g.copy_from_slice(&g_total);
        }
        Ok(value)
    }
}

/// Component (mean, sd) of the marginal density of one mixture component at
/// a given coordinate; `s` is the mean scale v/σ̂ and `t` the kernel sd.
fn component_params(class: &PriorClass, s: f64, t: f64) -> (Vec<f64>, Vec<f64>) {
    match class {
        PriorClass::GaussMix { variances } => {
            let means = vec![0.0; variances.len()];
            let sds = variances.iter().map(|&nu| (t * t + s * s * nu).sqrt()).collect();
            (means, sds)
        }
        PriorClass::Discrete { support } => {
            let means = support.iter().map(|&tau| s * tau).collect();
            let sds = vec![t; support.len()];
            (means, sds)
        }
        _ => unreachable!("component_params is only defined for weight classes"),
    }
}

fn class_prior(class: &PriorClass, weights: Vec<f64>) -> Result<Prior> {
    match class {
        PriorClass::GaussMix { variances } => Prior::gauss_mix(weights, variances.clone()),
        PriorClass::Discrete { support } => Prior::discrete(weights, support.clone()),
        _ => Err(CoreError::Precondition("not a weight class".into())),
    }
}

/// Assemble the estimated-risk objective R̂(π) for a weight class: the a_n
/// base, the R̂₁ coordinate groups, and the R̂₂ reuse groups with their
/// Rao-Blackwell quadrature arguments.
pub fn build_risk_objective(
    class: &PriorClass,
    stats: &SuffStats,
    plan: &FissionPlan,
    design: &Design,
    sigma_hat: f64,
    scarce_mode: bool,
    options: &RiskOptions,
) -> Result<WeightObjective> {
    let n_comp = match class {
        PriorClass::GaussMix { variances } => variances.len(),
        PriorClass::Discrete { support } => support.len(),
        _ => return Err(CoreError::Precondition("objective needs a weight class".into())),
    };
    if n_comp == 0 {
        return Err(CoreError::EmptyGrid);
    }
    let improved = plan.improved_count();
    if scarce_mode && improved == 0 {
        return Err(CoreError::EmptyImprovedSet);
    }
    let norm = if scarce_mode { improved as f64 } else { design.kappa() as f64 };

    let rule = gauss_hermite(options.rb_nodes);
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();

    let mut base = NeumaierSum::new();
    let mut groups = Vec::new();
    for (c, coord) in plan.coords.iter().enumerate() {
        if scarce_mode && !plan.improved[c] {
            continue;
        }
        let i = coord.unit as usize;
        let u = design.u_agg[i];
        let v = design.units[i].v[coord.rep as usize];
        base.add((v * v / (u * u)).ln_1p() / (2.0 * norm));
        let s = v / sigma_hat;
        // R̂₁ term at this coordinate
        let (means, sds) = component_params(class, s, v / u);
        groups.push(TermGroup {
            coef: 1.0 / norm,
            comp_mean: means,
            comp_sd: sds,
            args: vec![(v * stats.z[i], 1.0)],
        });
        // R̂₂ reuse terms
        if plan.improved[c] {
            let t_tilde = v / (u * u + v * v).sqrt();
            let (means, sds) = component_params(class, s, t_tilde);
            let mut args = Vec::with_capacity(coord.set.len() * rule.nodes.len());
            for (&j, &d) in coord.set.iter().zip(&coord.coeff) {
                let center = v * stats.z[j as usize];
                let noise_sd = if options.legacy_sigma_noise {
                    d.sqrt() * sigma_hat
                } else {
                    d.sqrt()
                };
                if noise_sd == 0.0 {
                    args.push((center, 1.0));
                } else {
                    let scale = std::f64::consts::SQRT_2 * noise_sd;
                    for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
                        args.push((center + scale * x, w * inv_sqrt_pi));
                    }
                }
            }
            groups.push(TermGroup {
                coef: -1.0 / (norm * coord.set.len() as f64),
                comp_mean: means,
                comp_sd: sds,
                args,
            });
        }
    }
    Ok(WeightObjective { base: base.total(), groups, n_comp })
}

/// Oracle analogue: the exact risk a_n + R₁(π) − R₂(π) at known (β, σ, γ),
/// with the coordinate expectations replaced by Gauss–Hermite node sets.
pub fn build_oracle_objective(
    class: &PriorClass,
    gamma: &[f64],
    sigma: f64,
    design: &Design,
    nodes: usize,
) -> Result<WeightObjective> {
    let n_comp = match class {
        PriorClass::GaussMix { variances } => variances.len(),
        PriorClass::Discrete { support } => support.len(),
        _ => return Err(CoreError::Precondition("objective needs a weight class".into())),
    };
    if gamma.len() != design.n() {
        return Err(CoreError::DimensionMismatch("gamma/design".into()));
    }
    let rule = gauss_hermite(nodes);
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    let kappa = design.kappa() as f64;
    let mut groups = Vec::new();
    for (i, unit) in design.units.iter().enumerate() {
        let u = design.u_agg[i];
        for &v in &unit.v {
            let s = v / sigma;
            // R₁: E over vZ | γ ~ N(vγ/σ, (v/u)²)
            let (means, sds) = component_params(class, s, v / u);
            let center = v * gamma[i] / sigma;
            let scale = std::f64::consts::SQRT_2 * v / u;
            let args: Vec<(f64, f64)> = rule
                .nodes
                .iter()
                .zip(&rule.weights)
                .map(|(&x, &w)| (center + scale * x, w * inv_sqrt_pi))
                .collect();
            groups.push(TermGroup { coef: 1.0 / kappa, comp_mean: means, comp_sd: sds, args });
            // R₂: E over W̃ | γ ~ N(vγ/σ, v²/(u²+v²))
            let t_tilde = v / (u * u + v * v).sqrt();
            let (means, sds) = component_params(class, s, t_tilde);
            let scale = std::f64::consts::SQRT_2 * t_tilde;
            let args: Vec<(f64, f64)> = rule
                .nodes
                .iter()
                .zip(&rule.weights)
                .map(|(&x, &w)| (center + scale * x, w * inv_sqrt_pi))
                .collect();
            groups.push(TermGroup { coef: -1.0 / kappa, comp_mean: means, comp_sd: sds, args });
        }
    }
    Ok(WeightObjective { base: a_n(design), groups, n_comp })
}

/// Result of a class fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionResult {
    pub g_hat: Prior,
    pub risk_at_opt: RiskBreakdown,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// fitted weights for weight classes (empty otherwise)
    pub weights: Vec<f64>,
}

pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_TOL: f64 = 1e-9;

/// Exponentiated-gradient (multiplicative-weights) descent with backtracking
/// halving from step 1.0. The trace is monotone non-increasing; weights are
/// renormalized to the simplex after every step.
pub fn fit_mixture_weights(
    objective: &WeightObjective,
    init: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>, usize, bool)> {
    let l_count = objective.n_comp;
    if l_count == 0 {
        return Err(CoreError::EmptyGrid);
    }
    if init.len() != l_count {
        return Err(CoreError::Precondition("init length mismatch".into()));
    }
    let mut pi: Vec<f64> = init.to_vec();
    let s: f64 = pi.iter().sum();
    if s <= 0.0 || pi.iter().any(|&p| p < 0.0) {
        return Err(CoreError::Precondition("init must be a nonnegative nonzero vector".into()));
    }
    pi.iter_mut().for_each(|p| *p /= s);

    let mut grad = vec![0.0; l_count];
    let mut f = objective.eval(&pi, Some(&mut grad))?;
    let mut trace = vec![f];
    if l_count == 1 {
        return Ok((pi, trace, 1, true));
    }
    let mut converged = false;
    let mut iterations = 0;
    let mut cand_grad = vec![0.0; l_count];
    for _ in 0..max_iter {
        iterations += 1;
        // normalize the gradient so the initial step is scale-free
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax == 0.0 {
            converged = true;
            break;
        }
        let mut step = 1.0 / gmax;
        let mut accepted = false;
        while step * gmax > 1e-14 {
            let mut cand: Vec<f64> = pi
                .iter()
                .zip(&grad)
                .map(|(&p, &g)| p * (-step * g).exp())
                .collect();
            let cs: f64 = cand.iter().sum();
            cand.iter_mut().for_each(|p| *p /= cs);
            // candidates carry the gradient so an accepted step needs no
            // second evaluation
            let fc = objective.eval(&cand, Some(&mut cand_grad))?;
            if fc < f {
                pi = cand;
                let decrease = f - fc;
                f = fc;
                grad.copy_from_slice(&cand_grad);
                trace.push(f);
                accepted = true;
                if decrease < tol {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    debug_assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-10));
    Ok((pi, trace, iterations, converged))
}

/// Exhaustive evaluation of the (η, a) grid; ties break toward smaller η,
/// then smaller a. The trace records the running best objective.
pub fn fit_spike_slab(
    etas: &[f64],
    rates: &[f64],
    eval: impl Fn(&Prior) -> Result<RiskBreakdown>,
) -> Result<SelectionResult> {
    if etas.is_empty() || rates.is_empty() {
        return Err(CoreError::EmptyGrid);
    }
    let mut etas_sorted = etas.to_vec();
    let mut rates_sorted = rates.to_vec();
    etas_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    rates_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best: Option<(f64, Prior, RiskBreakdown)> = None;
    let mut trace = Vec::new();
    for &eta in &etas_sorted {
        for &rate in &rates_sorted {
            let prior = Prior::spike_slab(eta, rate)?;
            let risk = eval(&prior)?;
            let better = match &best {
                None => true,
                Some((bf, _, _)) => risk.total < *bf,
            };
            if better {
                best = Some((risk.total, prior, risk));
            }
            trace.push(best.as_ref().unwrap().0);
        }
    }
    let (_, g_hat, risk_at_opt) = best.unwrap();
    let iterations = trace.len();
    Ok(SelectionResult { g_hat, risk_at_opt, trace, iterations, converged: true, weights: vec![] })
}

/// Optimizer knobs for `select`.
#[derive(Debug, Clone, Copy)]
pub struct SelectOptions {
    pub risk: RiskOptions,
    pub max_iter: usize,
    pub tol: f64,
    /// None: scarce mode iff the replicated-unit count is below √n.
    pub scarce_override: Option<bool>,
    /// Optional warm-start weights for weight classes.
    pub init_weights: Option<[f64; 8]>,
    pub init_len: usize,
}

impl Default for SelectOptions {
    fn default() -> Self {
        SelectOptions {
            risk: RiskOptions::default(),
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            scarce_override: None,
            init_weights: None,
            init_len: 0,
        }
    }
}

impl SelectOptions {
    pub fn with_warm_start(mut self, weights: &[f64]) -> Self {
        let mut buf = [0.0; 8];
        let len = weights.len().min(8);
        buf[..len].copy_from_slice(&weights[..len]);
        self.init_weights = Some(buf);
        self.init_len = len;
        self
    }
}

/// Whether the scarce-regime restricted estimator should be used:
/// n·η_n < √n per the data-scarcity split.
pub fn scarce_mode_default(design: &Design) -> bool {
    (design.replicated_units() as f64) < (design.n() as f64).sqrt()
}

/// Full selection: build stats and plan once, dispatch to the class fitter,
/// return ĝ with its risk estimate. Deterministic given its inputs.
pub fn select(
    class: &PriorClass,
    dataset: &Dataset,
    design: &Design,
    fit: &FitResult,
    h_policy: HPolicy,
    options: &SelectOptions,
) -> Result<SelectionResult> {
    let stats = aggregate_stats(dataset, design, &fit.beta_hat, fit.sigma_hat)?;
    let plan = build_fission_plan(design, h_policy.h_for(design.n()))?;
    select_with_plan(class, &stats, &plan, design, fit.sigma_hat, options)
}

/// Selection when stats and plan are already built (shared across methods).
pub fn select_with_plan(
    class: &PriorClass,
    stats: &SuffStats,
    plan: &FissionPlan,
    design: &Design,
    sigma_hat: f64,
    options: &SelectOptions,
) -> Result<SelectionResult> {
    let scarce = options.scarce_override.unwrap_or_else(|| scarce_mode_default(design));
    let scarce = scarce && plan.improved_count() > 0;
    match class {
        PriorClass::Uniform => {
            let risk =
                risk_hat(&Prior::Uniform, stats, plan, design, sigma_hat, scarce, &options.risk)?;
            Ok(SelectionResult {
                g_hat: Prior::Uniform,
                trace: vec![risk.total],
                risk_at_opt: risk,
                iterations: 0,
                converged: true,
                weights: vec![],
            })
        }
        PriorClass::GaussMix { .. } | PriorClass::Discrete { .. } => {
            let objective =
                build_risk_objective(class, stats, plan, design, sigma_hat, scarce, &options.risk)?;
            let init: Vec<f64> = match options.init_weights {
                Some(buf) if options.init_len == objective.n_comp => {
                    buf[..options.init_len].to_vec()
                }
                _ => vec![1.0 / objective.n_comp as f64; objective.n_comp],
            };
            let (weights, trace, iterations, converged) =
                fit_mixture_weights(&objective, &init, options.max_iter, options.tol)?;
            let g_hat = class_prior(class, weights.clone())?;
            let risk = risk_hat(&g_hat, stats, plan, design, sigma_hat, scarce, &options.risk)?;
            Ok(SelectionResult { g_hat, risk_at_opt: risk, trace, iterations, converged, weights })
        }
        PriorClass::SpikeSlabGrid { etas, rates } => fit_spike_slab(etas, rates, |p| {
            risk_hat(p, stats, plan, design, sigma_hat, scarce, &options.risk)
        }),
    }
}
