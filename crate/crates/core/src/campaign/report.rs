use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::run::{read_results, ResultsFile, SweepVariant};
use super::CampaignError;
use crate::diagnosis::{CaseResult, Ordering};
use crate::metrics::{summarize, CampaignSummary, Subset};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub subset: Subset,
    pub summary: CampaignSummary,
}

const CSV_HEADER: [&str; 17] = [
    "method",
    "subset",
    "n_cases",
    "accuracy",
    "fn_count",
    "tn_count",
    "fn_recovered",
    "fn_recovery_rate",
    "tn_preservation_rate",
    "tn_flip_rate",
    "mean_delta_h",
    "roc_auc",
    "first_branch_success_rate",
    "avg_probes_per_case",
    "probes_per_recovered",
    "agent_steps",
    "judge_calls",
];

impl SummaryRow {
    fn record(&self) -> Vec<String> {
        let m = &self.summary;
        let f = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        vec![
            self.method.clone(),
            self.subset.name().to_string(),
            m.n_cases.to_string(),
            f(m.accuracy),
            m.fn_count.to_string(),
            m.tn_count.to_string(),
            m.fn_recovered.to_string(),
            f(m.fn_recovery_rate),
            f(m.tn_preservation_rate),
            f(m.tn_flip_rate),
            f(m.mean_delta_h),
            f(m.roc_auc),
            f(m.first_branch_success_rate),
            f(m.avg_probes_per_case),
            f(m.probes_per_recovered),
            m.agent_steps.to_string(),
            m.judge_calls.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderingRow {
    pub method: String,
    pub ordering: Ordering,
    pub fn_recovered: usize,
    pub first_branch_success_rate: Option<f64>,
    pub probes_per_recovered: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauRow {
    pub tau_env: f64,
    pub fn_recovered: usize,
    pub probes: u64,
    pub saved_probes: i64,
    pub truncated_recovered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LikelihoodRow {
    pub w0: f64,
    pub beta0: f64,
    pub fn_recovery_rate: Option<f64>,
    pub tn_flip_rate: Option<f64>,
    pub avg_probes_per_case: Option<f64>,
    pub roc_auc: Option<f64>,
    pub mean_delta_h: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub rows: Vec<SummaryRow>,
    pub ordering: Vec<OrderingRow>,
    pub tau_sweep: Vec<TauRow>,
    pub likelihood_sweep: Vec<LikelihoodRow>,
    pub n_errors: usize,
}

fn owned(file: &ResultsFile, method: &str) -> Vec<CaseResult> {
    file.results_for(method).cloned().collect()
}

/// Threshold rows relative to the no-early-stop reference run.
pub fn tau_rows(sweep: &ResultsFile) -> Vec<TauRow> {
    let taus: Vec<(String, f64)> = sweep
        .header
        .methods
        .iter()
        .filter_map(|m| match m.sweep {
            Some(SweepVariant::Tau { tau_env }) => Some((m.name.clone(), tau_env)),
            _ => None,
        })
        .collect();
    let Some((ref_name, _)) = taus.iter().find(|(_, t)| *t == 1.0) else {
        return Vec::new();
    };
    let recovered = |name: &str| -> BTreeSet<u64> {
        sweep
            .results_for(name)
            .filter(|r| r.recovered())
            .map(|r| r.case_id)
            .collect()
    };
    let probes = |name: &str| -> u64 { sweep.results_for(name).map(|r| r.probes_executed as u64).sum() };
    let ref_rec = recovered(ref_name);
    let ref_probes = probes(ref_name);
    let mut rows: Vec<TauRow> = taus
        .iter()
        .map(|(name, tau)| {
            let rec = recovered(name);
            let p = probes(name);
            TauRow {
                tau_env: *tau,
                fn_recovered: rec.len(),
                probes: p,
                saved_probes: ref_probes as i64 - p as i64,
                truncated_recovered: ref_rec.difference(&rec).count(),
            }
        })
        .collect();
    rows.sort_by(|a, b| a.tau_env.total_cmp(&b.tau_env));
    rows
}

pub fn likelihood_rows(sweep: &ResultsFile) -> Vec<LikelihoodRow> {
    sweep
        .header
        .methods
        .iter()
        .filter_map(|m| match m.sweep {
            Some(SweepVariant::Likelihood { w0, beta0 }) => {
                let rs = owned(sweep, &m.name);
                let all = summarize(&rs, Subset::All);
                Some(LikelihoodRow {
                    w0,
                    beta0,
                    fn_recovery_rate: all.fn_recovery_rate,
                    tn_flip_rate: all.tn_flip_rate,
                    avg_probes_per_case: all.avg_probes_per_case,
                    roc_auc: all.roc_auc,
                    mean_delta_h: all.mean_delta_h,
                })
            }
            _ => None,
        })
        .collect()
}

pub fn build_report(results: &ResultsFile, sweep: Option<&ResultsFile>) -> Report {
    let mut report = Report {
        n_errors: results.errors().count() + sweep.map_or(0, |s| s.errors().count()),
        ..Default::default()
    };
    for m in &results.header.methods {
        let rs = owned(results, &m.name);
        for subset in Subset::ALL {
            report.rows.push(SummaryRow {
                method: m.name.clone(),
                subset,
                summary: summarize(&rs, subset),
            });
        }
        if let Some(ordering) = m.ordering {
            let fn_sub = summarize(&rs, Subset::FnSubset);
            report.ordering.push(OrderingRow {
                method: m.name.clone(),
                ordering,
                fn_recovered: fn_sub.fn_recovered,
                first_branch_success_rate: fn_sub.first_branch_success_rate,
                probes_per_recovered: fn_sub.probes_per_recovered,
            });
        }
    }
    if let Some(s) = sweep {
        report.tau_sweep = tau_rows(s);
        report.likelihood_sweep = likelihood_rows(s);
    }
    report
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl Report {
    /// One row per method and subset; undefined metrics are empty cells.
    pub fn to_csv(&self) -> Result<String, CampaignError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)
            .map_err(|e| CampaignError::Runtime(e.to_string()))?;
        for r in &self.rows {
            w.write_record(r.record())
                .map_err(|e| CampaignError::Runtime(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CampaignError::Runtime(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let _ = writeln!(s, "Verdict accuracy and recovery");
        let _ = writeln!(
            s,
            "{:<width$}  {:<9}  {:>5}  {:>8}  {:>4}  {:>4}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>7}",
            "method",
            "subset",
            "n",
            "accuracy",
            "FN",
            "TN",
            "recovery",
            "tn_keep",
            "tn_flip",
            "mean_dH",
            "roc_auc",
            "first_ok",
            "probes",
            "calls"
        );
        for r in &self.rows {
            let m = &r.summary;
            let _ = writeln!(
                s,
                "{:<width$}  {:<9}  {:>5}  {:>8}  {:>4}  {:>4}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>7}",
                r.method,
                r.subset.name(),
                m.n_cases,
                opt(m.accuracy),
                m.fn_count,
                m.tn_count,
                opt(m.fn_recovery_rate),
                opt(m.tn_preservation_rate),
                opt(m.tn_flip_rate),
                opt(m.mean_delta_h),
                opt(m.roc_auc),
                opt(m.first_branch_success_rate),
                opt(m.avg_probes_per_case),
                format!("{}/{}", m.agent_steps, m.judge_calls),
            );
        }
        if !self.ordering.is_empty() {
            let _ = writeln!(s, "\nBranch ordering");
            let _ = writeln!(
                s,
                "{:<width$}  {:<8}  {:>9}  {:>14}  {:>19}",
                "method", "ordering", "recovered", "first_branch_ok", "probes_per_recovered"
            );
            for o in &self.ordering {
                let _ = writeln!(
                    s,
                    "{:<width$}  {:<8}  {:>9}  {:>15}  {:>20}",
                    o.method,
                    format!("{:?}", o.ordering).to_lowercase(),
                    o.fn_recovered,
                    opt(o.first_branch_success_rate),
                    opt(o.probes_per_recovered),
                );
            }
        }
        if !self.tau_sweep.is_empty() {
            let _ = writeln!(s, "\nThreshold sweep (saved probes relative to tau = 1.0)");
            let _ = writeln!(
                s,
                "{:>6}  {:>9}  {:>7}  {:>6}  {:>9}",
                "tau", "recovered", "probes", "saved", "truncated"
            );
            for t in &self.tau_sweep {
                let _ = writeln!(
                    s,
                    "{:>6.2}  {:>9}  {:>7}  {:>6}  {:>9}",
                    t.tau_env, t.fn_recovered, t.probes, t.saved_probes, t.truncated_recovered
                );
            }
        }
        if !self.likelihood_sweep.is_empty() {
            let _ = writeln!(s, "\nLikelihood sweep");
            let _ = writeln!(
                s,
                "{:>5}  {:>5}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}",
                "w0", "beta0", "recovery", "tn_flip", "probes", "roc_auc", "mean_dH"
            );
            for l in &self.likelihood_sweep {
                let _ = writeln!(
                    s,
                    "{:>5.2}  {:>5.2}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}",
                    l.w0,
                    l.beta0,
                    opt(l.fn_recovery_rate),
                    opt(l.tn_flip_rate),
                    opt(l.avg_probes_per_case),
                    opt(l.roc_auc),
                    opt(l.mean_delta_h),
                );
            }
        }
        let _ = writeln!(
            s,
            "\nNotes: baseline mean_dH is 1 on recovered cases and 0 otherwise (no score updates);\n\
             majority votes count ties as Fail; cost is executor steps / judge calls; '-' marks an undefined metric."
        );
        if self.n_errors > 0 {
            let _ = writeln!(s, "{} case(s) ended with an error record.", self.n_errors);
        }
        s
    }
}

/// Writes `summary.csv` and `report.txt` into `out_dir`.
pub fn cmd_report(results: &Path, sweep: Option<&Path>, out_dir: &Path) -> Result<(Report, PathBuf), CampaignError> {
    let file = read_results(results)?;
    let sweep_file = sweep.map(read_results).transpose()?;
    let report = build_report(&file, sweep_file.as_ref());
    std::fs::create_dir_all(out_dir).map_err(|e| CampaignError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let csv_path = out_dir.join(SUMMARY_CSV);
    std::fs::write(&csv_path, report.to_csv()?).map_err(|e| CampaignError::Io {
        path: csv_path.clone(),
        source: e,
    })?;
    let txt = out_dir.join(REPORT_TXT);
    std::fs::write(&txt, report.to_text()).map_err(|e| CampaignError::Io {
        path: txt.clone(),
        source: e,
    })?;
    Ok((report, txt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::campaign::run::{MethodInfo, ResultsHeader, RESULTS_SCHEMA};

    fn empty_row() -> SummaryRow {
        SummaryRow {
            method: "m".into(),
            subset: Subset::FnSubset,
            summary: summarize(&[], Subset::FnSubset),
        }
    }

    #[test]
    fn undefined_metrics_are_empty_cells_and_dashes() {
        let report = Report {
            rows: vec![empty_row()],
            ..Default::default()
        };
        let csv = report.to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "m,fn_subset,0,,0,0,0,,,,,,,,,0,0");
        let text = report.to_text();
        assert!(text.contains(" - "));
        assert!(!text.contains("error record"));
    }

    #[test]
    fn tau_rows_need_a_reference_run() {
        let info = |name: &str, tau| MethodInfo {
            name: name.into(),
            kind: "diagnose".into(),
            ordering: Some(Ordering::Eig),
            tau_env: Some(tau),
            rounds: Some(1),
            sweep: Some(SweepVariant::Tau { tau_env: tau }),
        };
        let mut file = ResultsFile {
            header: ResultsHeader {
                schema_id: RESULTS_SCHEMA.into(),
                campaign_seed: 0,
                n_cases: 0,
                methods: vec![info("d@tau=0.8", 0.8)],
                sweep_of: Some("d".into()),
            },
            lines: vec![],
        };
        assert!(tau_rows(&file).is_empty());
        file.header.methods.push(info("d@tau=1", 1.0));
        let rows = tau_rows(&file);
        assert_eq!(rows.len(), 2);
        assert_eq!(
            (rows[0].tau_env, rows[0].saved_probes, rows[0].truncated_recovered),
            (0.8, 0, 0)
        );
        assert!(likelihood_rows(&file).is_empty());
    }
}
