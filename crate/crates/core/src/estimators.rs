//! Sufficient statistics Z_i and the fixed-effect / scale estimators
//! (contrast-based for replicate-rich designs, batched otherwise).

use crate::design::{Dataset, Design};
use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

/// Floor applied to σ̂² so that σ̂ stays bounded away from zero.
pub const SIGMA2_FLOOR: f64 = 1e-6;

/// Per-unit sufficient statistics Z_i(β, σ) with the parameters they were
/// computed under. Conditional law: Z_i | γ_i ~ N(γ_i/σ, u_i⁻²).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuffStats {
    pub z: Vec<f64>,
    pub u_agg: Vec<f64>,
    pub beta_used: Vec<f64>,
    pub sigma_used: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitRegime {
    Contrast,
    Batched,
    Known,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta_hat: Vec<f64>,
    pub sigma_hat: f64,
    pub regime: FitRegime,
    /// contrasts used (contrast regime) or batches used (batched regime)
    pub groups_used: usize,
}

impl FitResult {
    /// Known-parameter mode: wrap the true (β, σ) without fitting.
    pub fn known(beta: Vec<f64>, sigma: f64) -> Self {
        FitResult { beta_hat: beta, sigma_hat: sigma, regime: FitRegime::Known, groups_used: 0 }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Z_i = σ⁻¹ u_i⁻² Σ_k u_ik (y_ik − x_ik'β).
pub fn aggregate_stats(
    dataset: &Dataset,
    design: &Design,
    beta: &[f64],
    sigma: f64,
) -> Result<SuffStats> {
    if !(sigma > 0.0) {
        return Err(CoreError::NonPositiveScale { name: "sigma", value: sigma });
    }
    if beta.len() != design.d {
        return Err(CoreError::DimensionMismatch(format!(
            "beta has {} entries for d = {}",
            beta.len(),
            design.d
        )));
    }
    dataset.validate(design)?;
    let mut z = Vec::with_capacity(design.n());
    for (i, unit) in design.units.iter().enumerate() {
        let mut s = 0.0;
        for (k, &u) in unit.u.iter().enumerate() {
            let xb = if design.d > 0 { dot(&unit.x[k], beta) } else { 0.0 };
            s += u * (dataset.y[i][k] - xb);
        }
        let u2 = design.u_agg[i] * design.u_agg[i];
        z.push(s / (sigma * u2));
    }
    Ok(SuffStats {
        z,
        u_agg: design.u_agg.clone(),
        beta_used: beta.to_vec(),
        sigma_used: sigma,
    })
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations. Only used on
/// the small d × d Gram matrices, for singularity reporting.
fn symmetric_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let d = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += m[p][q] * m[p][q];
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
            }
        }
    }
    (0..d).map(|i| m[i][i]).collect()
}

/// Solve the d × d normal equations `gram · x = rhs`, reporting the smallest
/// eigenvalue when the Gram matrix is numerically singular.
fn solve_normal_equations(gram: &[Vec<f64>], rhs: &[f64]) -> Result<Vec<f64>> {
    let d = gram.len();
    if d == 0 {
        return Ok(vec![]);
    }
    let eigs = symmetric_eigenvalues(gram);
    let min_eig = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_eig = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(min_eig > 1e-10 * max_eig.max(1e-300)) {
        return Err(CoreError::SingularGram { min_eigenvalue: min_eig });
    }
    // Cholesky solve
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = gram[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = rhs[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = y[i];
        for k in (i + 1)..d {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    Ok(x)
}

/// Contrast residual r_i and regressor s_i for a replicated unit, built from
/// its first two replicates:
///   f_i(β) = {u_{i2}(y_{i1} − x_{i1}'β) − u_{i1}(y_{i2} − x_{i2}'β)}·(u_{i1}²+u_{i2}²)^{-1/2}
/// The contrast cancels γ_i exactly.
fn contrast_terms(dataset: &Dataset, design: &Design, i: usize) -> (f64, Vec<f64>) {
    let unit = &design.units[i];
    let (u1, u2) = (unit.u[0], unit.u[1]);
    let w = (u1 * u1 + u2 * u2).sqrt();
    let r = (u2 * dataset.y[i][0] - u1 * dataset.y[i][1]) / w;
    let s = if design.d > 0 {
        (0..design.d).map(|j| (u2 * unit.x[0][j] - u1 * unit.x[1][j]) / w).collect()
    } else {
        vec![]
    };
    (r, s)
}

/// Least squares on per-unit contrasts (replicate-rich regime). Units with
/// more than two replicates contribute only their first two.
pub fn contrast_fit(dataset: &Dataset, design: &Design) -> Result<FitResult> {
    dataset.validate(design)?;
    let replicated: Vec<usize> =
        (0..design.n()).filter(|&i| design.units[i].u.len() >= 2).collect();
    if replicated.is_empty() {
        return Err(CoreError::NoReplicatedUnits);
    }
    let d = design.d;
    let beta_hat = if d > 0 {
        let mut gram = vec![vec![0.0; d]; d];
        let mut rhs = vec![0.0; d];
        for &i in &replicated {
            let (r, s) = contrast_terms(dataset, design, i);
            for a in 0..d {
                rhs[a] += s[a] * r;
                for b in 0..d {
                    gram[a][b] += s[a] * s[b];
                }
            }
        }
        solve_normal_equations(&gram, &rhs)?
    } else {
        vec![]
    };
    let mut ss = 0.0;
    for &i in &replicated {
        let (r, s) = contrast_terms(dataset, design, i);
        let f = r - dot(&s, &beta_hat);
        ss += f * f;
    }
    let sigma2 = (ss / replicated.len() as f64).max(SIGMA2_FLOOR);
    Ok(FitResult {
        beta_hat,
        sigma_hat: sigma2.sqrt(),
        regime: FitRegime::Contrast,
        groups_used: replicated.len(),
    })
}

/// Batched OLS (replicate-scarce regime): units are shuffled with a fixed
/// internal seed, grouped into ⌊n/m⌋ batches of m = `batch_size`
/// (default ⌈√n⌉), and aggregated with weights w_ik = (Σ_batch K_i)^{-1/2}.
pub fn batched_fit(
    dataset: &Dataset,
    design: &Design,
    batch_size: Option<usize>,
) -> Result<FitResult> {
    dataset.validate(design)?;
    let n = design.n();
    let m = batch_size.unwrap_or_else(|| (n as f64).sqrt().ceil() as usize);
    if m == 0 || n < 2 * m {
        return Err(CoreError::Precondition(format!(
            "batched fit needs n >= 2·batch_size, got n = {n}, batch_size = {m}"
        )));
    }
    let n_batches = n / m;
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::derive(0x0ba7c4ed, &["batch-shuffle"]).shuffle(&mut order);

    let d = design.d;
    let mut ybar = vec![0.0; n_batches];
    let mut xbar = vec![vec![0.0; d]; n_batches];
    for b in 0..n_batches {
        let members = &order[b * m..(b + 1) * m];
        let total_k: usize = members.iter().map(|&i| design.units[i].u.len()).sum();
        let w = (total_k as f64).powf(-0.5);
        let norm = (m as f64).powf(-0.5);
        for &i in members {
            let unit = &design.units[i];
            for k in 0..unit.u.len() {
                ybar[b] += norm * w * dataset.y[i][k];
                if d > 0 {
                    for j in 0..d {
                        xbar[b][j] += norm * w * unit.x[k][j];
                    }
                }
            }
        }
    }
    let beta_hat = if d > 0 {
        let mut gram = vec![vec![0.0; d]; d];
        let mut rhs = vec![0.0; d];
        for b in 0..n_batches {
            for a in 0..d {
                rhs[a] += xbar[b][a] * ybar[b];
                for c in 0..d {
                    gram[a][c] += xbar[b][a] * xbar[b][c];
                }
            }
        }
        solve_normal_equations(&gram, &rhs)?
    } else {
        vec![]
    };
    let mut ss = 0.0;
    for b in 0..n_batches {
        let resid = ybar[b] - dot(&xbar[b], &beta_hat);
        ss += resid * resid;
    }
    let sigma2 = (ss / n_batches as f64).max(SIGMA2_FLOOR);
    Ok(FitResult {
        beta_hat,
        sigma_hat: sigma2.sqrt(),
        regime: FitRegime::Batched,
        groups_used: n_batches,
    })
}

/// Regime split from the l_n = min{n^{-1/4}, (nη_n)^{-1/2}} rate: contrasts
/// when the replicated-unit count reaches √n, batching otherwise.
pub fn select_estimator(dataset: &Dataset, design: &Design) -> Result<FitResult> {
    let n = design.n();
    if (design.replicated_units() as f64) >= (n as f64).sqrt() {
        contrast_fit(dataset, design)
    } else {
        batched_fit(dataset, design, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{simulate, ModelTruth, Unit};
    use crate::priors::Prior;
    use crate::rng::seed_stream;
    use approx::assert_relative_eq;

    fn design_single(u: f64) -> Design {
        Design::new(
            0,
            vec![Unit { x: vec![vec![]], u: vec![u], x_future: vec![vec![]], v: vec![1.0] }],
        )
        .unwrap()
    }

    #[test]
    fn z_direct_substitution() {
        // K=1, u=2, y − x'β = 1, σ=1: Z = (1/4)·2·1 = 0.5
        let design = design_single(2.0);
        let ds = Dataset { y: vec![vec![1.0]], y_future: None };
        let stats = aggregate_stats(&ds, &design, &[], 1.0).unwrap();
        assert_relative_eq!(stats.z[0], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn z_zero_when_centered() {
        let design = Design::new(
            1,
            vec![Unit {
                x: vec![vec![2.0], vec![-1.0]],
                u: vec![1.0, 3.0],
                x_future: vec![vec![0.0]],
                v: vec![1.0],
            }],
        )
        .unwrap();
        let beta = [0.7];
        let ds = Dataset { y: vec![vec![1.4, -0.7]], y_future: None };
        let stats = aggregate_stats(&ds, &design, &beta, 1.3).unwrap();
        assert_relative_eq!(stats.z[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn z_conditional_law_monte_carlo() {
        // Z | γ ~ N(γ/σ, u⁻²): empirical mean/var within 3 MC SE over 1e5 reps
        let design = Design::new(
            0,
            vec![Unit {
                x: vec![vec![], vec![]],
                u: vec![1.2, 0.9],
                x_future: vec![vec![]],
                v: vec![1.0],
            }],
        )
        .unwrap();
        let gamma = 0.8;
        let sigma = 1.4;
        let truth =
            ModelTruth { beta: vec![], sigma, gamma: vec![gamma], g0: Prior::point_mass(gamma) };
        let mut rng = seed_stream(21, &["zlaw"]);
        let reps = 100_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..reps {
            let ds = simulate(&design, &truth, &mut rng).unwrap();
            let z = aggregate_stats(&ds, &design, &[], sigma).unwrap().z[0];
            sum += z;
            sum2 += z * z;
        }
        let nf = reps as f64;
        let mean = sum / nf;
        let var = sum2 / nf - mean * mean;
        let u2 = design.u_agg[0] * design.u_agg[0];
        let target_mean = gamma / sigma;
        let target_var = 1.0 / u2;
        let se_mean = target_var.sqrt() / nf.sqrt();
        let se_var = target_var * (2.0 / nf).sqrt();
        assert!((mean - target_mean).abs() < 3.0 * se_mean, "mean {mean} vs {target_mean}");
        assert!((var - target_var).abs() < 3.0 * se_var, "var {var} vs {target_var}");
    }

    #[test]
    fn z_linear_in_y() {
        let design = Design::new(
            0,
            vec![
                Unit { x: vec![vec![], vec![]], u: vec![1.0, 2.0], x_future: vec![vec![]], v: vec![1.0] },
                Unit { x: vec![vec![]], u: vec![0.7], x_future: vec![vec![]], v: vec![1.0] },
            ],
        )
        .unwrap();
        let mut rng = seed_stream(22, &["lin"]);
        for _ in 0..20 {
            let draw = |rng: &mut crate::rng::RngStream| Dataset {
                y: vec![vec![rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)], vec![rng.normal(0.0, 1.0)]],
                y_future: None,
            };
            let d1 = draw(&mut rng);
            let d2 = draw(&mut rng);
            let sum = Dataset {
                y: vec![
                    vec![d1.y[0][0] + d2.y[0][0], d1.y[0][1] + d2.y[0][1]],
                    vec![d1.y[1][0] + d2.y[1][0]],
                ],
                y_future: None,
            };
            let z1 = aggregate_stats(&d1, &design, &[], 1.0).unwrap().z;
            let z2 = aggregate_stats(&d2, &design, &[], 1.0).unwrap().z;
            let zs = aggregate_stats(&sum, &design, &[], 1.0).unwrap().z;
            for i in 0..2 {
                assert_relative_eq!(zs[i], z1[i] + z2[i], epsilon = 1e-12);
            }
        }
    }

    fn replicated_design(n: usize, d: usize, seed: u64) -> Design {
        let mut rng = seed_stream(seed, &["estdesign"]);
        let units = (0..n)
            .map(|_| {
                let k = 2;
                Unit {
                    x: (0..k).map(|_| (0..d).map(|_| rng.standard_normal()).collect()).collect(),
                    u: (0..k).map(|_| 0.5 + rng.uniform()).collect(),
                    x_future: vec![(0..d).map(|_| rng.standard_normal()).collect()],
                    v: vec![0.5 + rng.uniform()],
                }
            })
            .collect();
        Design::new(d, units).unwrap()
    }

    #[test]
    fn contrast_noise_free_recovers_beta_and_floors_sigma() {
        let design = replicated_design(50, 1, 31);
        let beta = [1.7];
        // y exactly β-linear plus random effect, zero noise
        let mut rng = seed_stream(32, &["gam"]);
        let gamma: Vec<f64> = (0..50).map(|_| rng.normal(0.0, 1.0)).collect();
        let y = design
            .units
            .iter()
            .zip(&gamma)
            .map(|(unit, g)| {
                unit.u
                    .iter()
                    .enumerate()
                    .map(|(k, &u)| unit.x[k][0] * beta[0] + u * g)
                    .collect()
            })
            .collect();
        let ds = Dataset { y, y_future: None };
        let fit = contrast_fit(&ds, &design).unwrap();
        assert_relative_eq!(fit.beta_hat[0], 1.7, epsilon = 1e-9);
        assert_relative_eq!(fit.sigma_hat, SIGMA2_FLOOR.sqrt(), epsilon = 1e-15);
        assert_eq!(fit.regime, FitRegime::Contrast);
    }

    #[test]
    fn contrast_invariant_to_gamma_shift() {
        let design = replicated_design(5, 1, 33);
        let mut rng = seed_stream(34, &["shift"]);
        let mut ds = Dataset {
            y: design.units.iter().map(|u| u.u.iter().map(|_| rng.normal(0.0, 1.0)).collect()).collect(),
            y_future: None,
        };
        let before: Vec<(f64, Vec<f64>)> =
            (0..5).map(|i| contrast_terms(&ds, &design, i)).collect();
        // add c·(u_{i1}, u_{i2}) to (y_{i1}, y_{i2})
        for (i, unit) in design.units.iter().enumerate() {
            let c = rng.normal(0.0, 3.0);
            ds.y[i][0] += c * unit.u[0];
            ds.y[i][1] += c * unit.u[1];
        }
        for i in 0..5 {
            let (r_after, _) = contrast_terms(&ds, &design, i);
            assert_relative_eq!(before[i].0, r_after, epsilon = 1e-12);
        }
    }

    #[test]
    fn contrast_degenerate_design_is_singular() {
        // u_{i1} = u_{i2}, x_{i1} = x_{i2}: contrasts carry no β information
        let mut rng = seed_stream(35, &["deg"]);
        let units = (0..20)
            .map(|_| {
                let x: Vec<f64> = vec![rng.standard_normal()];
                Unit {
                    x: vec![x.clone(), x],
                    u: vec![1.1, 1.1],
                    x_future: vec![vec![0.0]],
                    v: vec![1.0],
                }
            })
            .collect();
        let design = Design::new(1, units).unwrap();
        let ds = Dataset {
            y: design.units.iter().map(|u| u.u.iter().map(|_| rng.normal(0.0, 1.0)).collect()).collect(),
            y_future: None,
        };
        match contrast_fit(&ds, &design) {
            Err(CoreError::SingularGram { min_eigenvalue }) => {
                assert!(min_eigenvalue.abs() < 1e-8);
            }
            other => panic!("expected singular Gram, got {other:?}"),
        }
    }

    #[test]
    fn contrast_rate_matches_root_n_eta() {
        // d=1, σ=1, nη = 400: RMSE within factor 2 of (nη)^{-1/2} = 0.05
        let n_rep = 400;
        let reps = 200;
        let mut sq_err = 0.0;
        for r in 0..reps {
            let design = replicated_design(n_rep, 1, 1000 + r);
            let mut rng = seed_stream(36, &["rate", &r.to_string()]);
            let gamma: Vec<f64> = (0..n_rep).map(|_| rng.normal(0.0, 1.0)).collect();
            let truth = ModelTruth {
                beta: vec![0.5],
                sigma: 1.0,
                gamma,
                g0: Prior::gaussian_scalar(1.0).unwrap(),
            };
            let ds = simulate(&design, &truth, &mut rng).unwrap();
            let fit = contrast_fit(&ds, &design).unwrap();
            sq_err += (fit.beta_hat[0] - 0.5) * (fit.beta_hat[0] - 0.5);
        }
        let rmse = (sq_err / reps as f64).sqrt();
        let target = (n_rep as f64).powf(-0.5);
        assert!(rmse < 2.0 * target && rmse > target / 2.0, "rmse = {rmse}, target = {target}");
    }

    #[test]
    fn batched_noiseless_limit() {
        // γ ≡ 0, σ tiny: β̂ = β to 1e-6
        let mut rng = seed_stream(37, &["batch"]);
        let n = 400;
        let units = (0..n)
            .map(|_| Unit {
                x: vec![vec![rng.standard_normal()]],
                u: vec![0.5 + rng.uniform()],
                x_future: vec![vec![0.0]],
                v: vec![1.0],
            })
            .collect();
        let design = Design::new(1, units).unwrap();
        let truth = ModelTruth {
            beta: vec![-0.9],
            sigma: 1e-8,
            gamma: vec![0.0; n],
            g0: Prior::point_mass(0.0),
        };
        let ds = simulate(&design, &truth, &mut rng).unwrap();
        let fit = batched_fit(&ds, &design, None).unwrap();
        assert!((fit.beta_hat[0] + 0.9).abs() < 1e-6, "beta_hat = {}", fit.beta_hat[0]);
        assert_eq!(fit.regime, FitRegime::Batched);
    }

    #[test]
    fn batched_rejects_oversized_batches() {
        let design = replicated_design(10, 1, 38);
        let ds = Dataset {
            y: design.units.iter().map(|u| u.u.iter().map(|_| 0.0).collect()).collect(),
            y_future: None,
        };
        assert!(matches!(
            batched_fit(&ds, &design, Some(11)),
            Err(CoreError::Precondition(_))
        ));
    }

    #[test]
    fn select_estimator_regime_thresholds() {
        // η = 1/10, n = 400: 40 replicated >= 20 → contrast
        let mk = |n: usize, n_rep: usize, seed: u64| {
            let mut rng = seed_stream(seed, &["sel"]);
            let units = (0..n)
                .map(|i| {
                    let k = if i < n_rep { 2 } else { 1 };
                    Unit {
                        x: vec![vec![]; k],
                        u: (0..k).map(|_| 0.5 + rng.uniform()).collect(),
                        x_future: vec![vec![]],
                        v: vec![1.0],
                    }
                })
                .collect();
            let design = Design::new(0, units).unwrap();
            let truth = ModelTruth {
                beta: vec![],
                sigma: 1.0,
                gamma: vec![0.0; n],
                g0: Prior::point_mass(0.0),
            };
            let ds = simulate(&design, &truth, &mut seed_stream(seed + 1, &["sel"])).unwrap();
            (design, ds)
        };
        let (design, ds) = mk(400, 40, 40);
        assert_eq!(select_estimator(&ds, &design).unwrap().regime, FitRegime::Contrast);
        let (design, ds) = mk(400, 0, 41);
        assert_eq!(select_estimator(&ds, &design).unwrap().regime, FitRegime::Batched);
        // one replicated unit at n = 10⁴ → batched
        let (design, ds) = mk(10_000, 1, 42);
        assert_eq!(select_estimator(&ds, &design).unwrap().regime, FitRegime::Batched);
    }
}
