//! Result rows and deterministic CSV/JSON emission.

use serde::Serialize;
use std::collections::BTreeMap;

pub const CSV_HEADER: &str = "case,n,h_policy,method,rep,metric,value,mc_se,status";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RiskHat,
    TrueRisk,
    Excess,
    DN,
    IfN,
    DRef,
    BetaErr,
    SigmaErr,
    RuntimeMs,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::RiskHat => "risk_hat",
            Metric::TrueRisk => "true_risk",
            Metric::Excess => "excess",
            Metric::DN => "D_n",
            Metric::IfN => "IF_n",
            Metric::DRef => "d_ref",
            Metric::BetaErr => "beta_err",
            Metric::SigmaErr => "sigma_err",
            Metric::RuntimeMs => "runtime_ms",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub case: String,
    pub n: usize,
    pub h_policy: String,
    pub method: String,
    pub rep: u32,
    pub metric: Metric,
    pub value: f64,
    pub mc_se: Option<f64>,
    pub status: Status,
}

impl ResultRow {
    pub fn sort_key(&self) -> (String, usize, String, String, u32, &'static str) {
        (
            self.case.clone(),
            self.n,
            self.h_policy.clone(),
            self.method.clone(),
            self.rep,
            self.metric.name(),
        )
    }

    fn csv_line(&self) -> String {
        let se = match self.mc_se {
            Some(v) => format!("{v}"),
            None => String::new(),
        };
        let status = match self.status {
            Status::Ok => "ok",
            Status::Failed => "failed",
        };
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.case,
            self.n,
            self.h_policy,
            self.method,
            self.rep,
            self.metric.name(),
            self.value,
            se,
            status
        )
    }
}

/// Sort rows by (case, n, h, method, rep, metric) and render the CSV.
pub fn to_csv(rows: &mut Vec<ResultRow>) -> String {
    rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let mut out = String::with_capacity(rows.len() * 48 + 64);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for row in rows.iter() {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

/// Rows as a JSON array (sorted the same way as the CSV).
pub fn to_json(rows: &mut Vec<ResultRow>) -> String {
    rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let mut s = serde_json::to_string_pretty(rows).expect("row serialization");
    s.push('\n');
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub mean: f64,
    pub se: f64,
    pub reps: usize,
}

/// Nested {case → method → {mean, se, reps}} summary over `metric` rows.
pub fn summarize(rows: &[ResultRow], metric: Metric) -> BTreeMap<String, BTreeMap<String, MethodSummary>> {
    let mut grouped: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for row in rows {
        if row.metric == metric && row.status == Status::Ok {
            grouped
                .entry((row.case.clone(), row.method.clone()))
                .or_default()
                .push(row.value);
        }
    }
    let mut out: BTreeMap<String, BTreeMap<String, MethodSummary>> = BTreeMap::new();
    for ((case, method), vals) in grouped {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let se = if vals.len() > 1 {
            (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        out.entry(case)
            .or_default()
            .insert(method, MethodSummary { mean, se, reps: vals.len() });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(case: &str, rep: u32, metric: Metric, value: f64) -> ResultRow {
        ResultRow {
            case: case.into(),
            n: 100,
            h_policy: "1".into(),
            method: "m".into(),
            rep,
            metric,
            value,
            mc_se: None,
            status: Status::Ok,
        }
    }

    #[test]
    fn csv_has_pinned_header_and_sorted_rows() {
        let mut rows = vec![row("B", 1, Metric::DN, 0.5), row("A", 0, Metric::DN, 0.25)];
        let csv = to_csv(&mut rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("A,"));
        assert!(lines[2].starts_with("B,"));
    }

    #[test]
    fn summary_groups_by_case_and_method() {
        let rows = vec![
            row("A", 0, Metric::Excess, 1.0),
            row("A", 1, Metric::Excess, 3.0),
            row("A", 0, Metric::DN, 9.0),
        ];
        let s = summarize(&rows, Metric::Excess);
        let m = &s["A"]["m"];
        assert_eq!(m.reps, 2);
        assert!((m.mean - 2.0).abs() < 1e-12);
    }
}
