//! The three experiment commands: diagnostics curves, risk-estimator checks,
//! and the excess-risk comparison table.

use crate::config::{Command, OutFormat, RunConfig};
use crate::rows::{summarize, to_csv, to_json, Metric, ResultRow, Status};
use predrisk_core::cases::{build_case_design, CaseId, CaseSpec};
use predrisk_core::design::{draw_truth, simulate, Design};
use predrisk_core::error::Result as CoreResult;
use predrisk_core::estimators::{aggregate_stats, select_estimator, FitResult};
use predrisk_core::fission::{build_fission_plan, risk_hat, FissionPlan, RiskOptions};
use predrisk_core::oracle::{
    bayes_prde_callback, gamma_averaged_risk, kl_loss_prde, true_risk_decomposed,
    true_risk_restricted, ParamMode,
};
use predrisk_core::priors::Prior;
use predrisk_core::rng::RngStream;
use predrisk_core::select::{select_with_plan, PriorClass, SelectOptions};
use rayon::prelude::*;

/// Everything a run emits: sorted rows plus (for table1) the nested summary.
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub summary_json: Option<String>,
    pub any_failed: bool,
}

pub fn run(config: &RunConfig) -> RunOutput {
    let mut rows = match config.command {
        Command::Diagnose => cmd_diagnose(config),
        Command::RiskCheck => cmd_risk_check(config),
        Command::Table1 => cmd_table1(config),
    };
    let any_failed = rows.iter().any(|r| r.status == Status::Failed);
    let summary_json = match config.command {
        Command::Table1 => {
            let summary = summarize(&rows, Metric::Excess);
            let mut s = serde_json::to_string_pretty(&summary).expect("summary serialization");
            s.push('\n');
            Some(s)
        }
        _ => None,
    };
    rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    RunOutput { rows, summary_json, any_failed }
}

/// Render the primary output document.
pub fn render_rows(config: &RunConfig, output: &mut RunOutput) -> String {
    match config.format {
        OutFormat::Csv => to_csv(&mut output.rows),
        OutFormat::Json => to_json(&mut output.rows),
    }
}

fn failed_row(case: CaseId, n: usize, h: &str, method: &str, rep: u32, metric: Metric) -> ResultRow {
    ResultRow {
        case: case.label().into(),
        n,
        h_policy: h.into(),
        method: method.into(),
        rep,
        metric,
        value: 0.0,
        mc_se: None,
        status: Status::Failed,
    }
}

/// Reference growth curve for D_n: log n for no-replicate regimes,
/// η_n⁻¹ log n for the replicated ones (realized η).
fn d_reference(case: CaseId, n: usize) -> f64 {
    let log_n = (n as f64).ln();
    if case.replicated() {
        let spec = CaseSpec::new(case, n);
        let eta = spec.replicated_count() as f64 / n as f64;
        log_n / eta
    } else {
        log_n
    }
}

fn cmd_diagnose(config: &RunConfig) -> Vec<ResultRow> {
    let mut cells: Vec<(CaseId, usize)> = Vec::new();
    for &case in &config.cases {
        for &n in &config.n_grid {
            cells.push((case, n));
        }
    }
    let results: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|&(case, n)| {
            let mut out = Vec::new();
            for policy in &config.h_policies {
                let h = policy.h_for(n);
                let label = policy.label();
                let per_rep: Vec<CoreResult<(f64, f64)>> = (0..config.reps)
                    .map(|rep| {
                        let mut rng = RngStream::derive(
                            config.seed,
                            &["diagnose", case.label(), &n.to_string(), &rep.to_string()],
                        );
                        let design = build_case_design(&CaseSpec::new(case, n), &mut rng)?;
                        let plan = build_fission_plan(&design, h)?;
                        Ok((plan.d_n, plan.if_n))
                    })
                    .collect();
                let mut ds = Vec::new();
                let mut ifs = Vec::new();
                let mut failed = 0u32;
                for r in per_rep {
                    match r {
                        Ok((d, f)) => {
                            ds.push(d);
                            ifs.push(f);
                        }
                        Err(_) => failed += 1,
                    }
                }
                if failed > 0 || ds.is_empty() {
                    out.push(failed_row(case, n, &label, "design", 0, Metric::DN));
                    continue;
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
                let base = |metric, value, mc_se| ResultRow {
                    case: case.label().into(),
                    n,
                    h_policy: label.clone(),
                    method: "design".into(),
                    rep: 0,
                    metric,
                    value,
                    mc_se,
                    status: Status::Ok,
                };
                out.push(base(Metric::DN, md, Some(se(&ds, md))));
                out.push(base(Metric::IfN, mf, Some(se(&ifs, mf))));
                out.push(base(Metric::DRef, d_reference(case, n), None));
            }
            out
        })
        .collect();
    results.into_iter().flatten().collect()
}

struct CellData {
    design: Design,
    truth: predrisk_core::design::ModelTruth,
    fit: FitResult,
    stats: predrisk_core::estimators::SuffStats,
    base_plan: FissionPlan,
}

fn prepare_cell(config: &RunConfig, case: CaseId, n: usize, rep: u32, role: &str) -> CoreResult<CellData> {
    let mut rng = RngStream::derive(
        config.seed,
        &[role, case.label(), &n.to_string(), &rep.to_string()],
    );
    let design = build_case_design(&CaseSpec::new(case, n), &mut rng)?;
    let truth = draw_truth(&config.g0, n, config.beta.clone(), config.sigma, &mut rng)?;
    let dataset = simulate(&design, &truth, &mut rng)?;
    let fit = match config.mode {
        ParamMode::Known => FitResult::known(truth.beta.clone(), truth.sigma),
        ParamMode::Estimated => select_estimator(&dataset, &design)?,
    };
    let stats = aggregate_stats(&dataset, &design, &fit.beta_hat, fit.sigma_hat)?;
    let base_plan = build_fission_plan(&design, 1)?;
    Ok(CellData { design, truth, fit, stats, base_plan })
}

fn cmd_risk_check(config: &RunConfig) -> Vec<ResultRow> {
    let mut cells: Vec<(CaseId, usize, u32)> = Vec::new();
    for &case in &config.cases {
        for &n in &config.n_grid {
            for rep in 0..config.reps as u32 {
                cells.push((case, n, rep));
            }
        }
    }
    let options = RiskOptions { rb_nodes: config.rb_nodes, legacy_sigma_noise: false };
    let results: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|&(case, n, rep)| {
            let mut out = Vec::new();
            let cell = match prepare_cell(config, case, n, rep, "risk-check") {
                Ok(c) => c,
                Err(_) => {
                    for policy in &config.h_policies {
                        out.push(failed_row(case, n, &policy.label(), "normal", rep, Metric::RiskHat));
                    }
                    return out;
                }
            };
            let prior = config.g0.clone();
            for policy in &config.h_policies {
                let label = policy.label();
                let h = policy.h_for(n);
                let plan = match cell.base_plan.with_threshold(h) {
                    Ok(p) => p,
                    Err(_) => {
                        out.push(failed_row(case, n, &label, "normal", rep, Metric::RiskHat));
                        continue;
                    }
                };
                let mk_row = |method: &str, metric, value| ResultRow {
                    case: case.label().into(),
                    n,
                    h_policy: label.clone(),
                    method: method.into(),
                    rep,
                    metric,
                    value,
                    mc_se: None,
                    status: Status::Ok,
                };
                // normal-mode estimator vs full-risk quadrature
                let normal = risk_hat(
                    &prior,
                    &cell.stats,
                    &plan,
                    &cell.design,
                    cell.fit.sigma_hat,
                    false,
                    &options,
                );
                let truth_full =
                    true_risk_decomposed(&cell.truth, &cell.design, &prior, config.nodes);
                match (normal, truth_full) {
                    (Ok(rb), Ok(tr)) => {
                        out.push(mk_row("normal", Metric::RiskHat, rb.total));
                        out.push(mk_row("normal", Metric::TrueRisk, tr.total));
                    }
                    _ => out.push(failed_row(case, n, &label, "normal", rep, Metric::RiskHat)),
                }
                // scarce-mode estimator vs restricted/renormalized quadrature
                if plan.improved_count() > 0 {
                    let scarce = risk_hat(
                        &prior,
                        &cell.stats,
                        &plan,
                        &cell.design,
                        cell.fit.sigma_hat,
                        true,
                        &options,
                    );
                    let truth_restricted = true_risk_restricted(
                        &cell.truth,
                        &cell.design,
                        &prior,
                        &plan,
                        config.nodes,
                    );
                    match (scarce, truth_restricted) {
                        (Ok(rb), Ok(tr)) => {
                            out.push(mk_row("scarce", Metric::RiskHat, rb.total));
                            out.push(mk_row("scarce", Metric::TrueRisk, tr.total));
                        }
                        _ => out.push(failed_row(case, n, &label, "scarce", rep, Metric::RiskHat)),
                    }
                }
                // uniform-prior row: estimator reduces to a_n exactly
                match risk_hat(
                    &Prior::Uniform,
                    &cell.stats,
                    &plan,
                    &cell.design,
                    cell.fit.sigma_hat,
                    false,
                    &options,
                ) {
                    Ok(rb) => {
                        out.push(mk_row("uniform", Metric::RiskHat, rb.total));
                        out.push(mk_row(
                            "uniform",
                            Metric::TrueRisk,
                            predrisk_core::fission::a_n(&cell.design),
                        ));
                    }
                    Err(_) => {
                        out.push(failed_row(case, n, &label, "uniform", rep, Metric::RiskHat))
                    }
                }
            }
            if config.mode == ParamMode::Estimated {
                let beta_err = cell
                    .fit
                    .beta_hat
                    .iter()
                    .zip(&cell.truth.beta)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let sigma_err = (cell.fit.sigma_hat - cell.truth.sigma).abs();
                let mk = |metric, value| ResultRow {
                    case: case.label().into(),
                    n,
                    h_policy: "1".into(),
                    method: "estimator".into(),
                    rep,
                    metric,
                    value,
                    mc_se: None,
                    status: Status::Ok,
                };
                out.push(mk(Metric::BetaErr, beta_err));
                out.push(mk(Metric::SigmaErr, sigma_err));
            }
            out
        })
        .collect();
    results.into_iter().flatten().collect()
}

fn cmd_table1(config: &RunConfig) -> Vec<ResultRow> {
    let n = config.n_grid[0];
    let mut cells: Vec<(CaseId, u32)> = Vec::new();
    for &case in &config.cases {
        for rep in 0..config.reps as u32 {
            cells.push((case, rep));
        }
    }
    let gmodel_grid = match &config.class {
        PriorClass::GaussMix { variances } => variances.clone(),
        _ => vec![0.25, 1.0],
    };
    let results: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|&(case, rep)| {
            table1_cell(config, case, n, rep, &gmodel_grid).unwrap_or_else(|_| {
                vec![failed_row(case, n, "1", "cell", rep, Metric::Excess)]
            })
        })
        .collect();
    results.into_iter().flatten().collect()
}

fn table1_cell(
    config: &RunConfig,
    case: CaseId,
    n: usize,
    rep: u32,
    gmodel_grid: &[f64],
) -> CoreResult<Vec<ResultRow>> {
    let cell = prepare_cell(config, case, n, rep, "table1")?;
    let bayes = gamma_averaged_risk(
        &config.g0,
        &cell.design,
        &config.g0,
        cell.truth.sigma,
        config.nodes,
    )?;
    let mut rows = Vec::new();
    let mut push = |method: String, h_label: String, loss: f64| {
        rows.push(ResultRow {
            case: case.label().into(),
            n,
            h_policy: h_label,
            method,
            rep,
            metric: Metric::Excess,
            value: loss - bayes,
            mc_se: None,
            status: Status::Ok,
        });
    };
    let options = RiskOptions { rb_nodes: config.rb_nodes, legacy_sigma_noise: false };

    // proposed method per h policy, warm-starting each fit from the previous
    let mut warm: Option<Vec<f64>> = None;
    for policy in &config.h_policies {
        let plan = cell.base_plan.with_threshold(policy.h_for(n))?;
        let mut sel_opts = SelectOptions {
            risk: options,
            max_iter: config.max_iter,
            tol: config.tol,
            scarce_override: None,
            ..Default::default()
        };
        if let Some(w) = &warm {
            sel_opts = sel_opts.with_warm_start(w);
        }
        let selection = select_with_plan(
            &config.class,
            &cell.stats,
            &plan,
            &cell.design,
            cell.fit.sigma_hat,
            &sel_opts,
        )?;
        if !selection.weights.is_empty() {
            warm = Some(selection.weights.clone());
        }
        let cb = bayes_prde_callback(&selection.g_hat, &cell.stats, &cell.fit, &cell.design);
        let loss = kl_loss_prde(|i, k, y| cb(i, k, y), &cell.truth, &cell.design, config.nodes)?;
        push(format!("proposed_h{}", policy.label()), policy.label(), loss);
    }

    // g-modeling plug-in
    let emfit =
        predrisk_core::baselines::gmodel_em_from_stats(&cell.stats, gmodel_grid, 1e-8, 500)?;
    let cb =
        predrisk_core::baselines::gmodel_plugin_density(&emfit, &cell.stats, &cell.fit, &cell.design)?;
    let loss = kl_loss_prde(|i, k, y| cb(i, k, y), &cell.truth, &cell.design, config.nodes)?;
    push("gmodel".into(), "1".into(), loss);

    // naive plug-in
    let cb = predrisk_core::baselines::naive_plugin_density(&cell.stats, &cell.fit, &cell.design);
    let loss = kl_loss_prde(|i, k, y| cb(i, k, y), &cell.truth, &cell.design, config.nodes)?;
    push("naive".into(), "1".into(), loss);

    Ok(rows)
}
