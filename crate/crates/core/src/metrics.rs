//! Campaign summary metrics.

use serde::{Deserialize, Serialize};

use crate::agent::Verdict;
use crate::diagnosis::{count_calls, CaseResult};
use crate::world::GroundTruth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    FnSubset,
    TnSubset,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::All, Subset::FnSubset, Subset::TnSubset];

    pub fn contains(self, r: &CaseResult) -> bool {
        match self {
            Subset::All => true,
            Subset::FnSubset => r.is_fn(),
            Subset::TnSubset => r.is_tn(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::FnSubset => "fn_subset",
            Subset::TnSubset => "tn_subset",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub n_cases: usize,
    pub accuracy: Option<f64>,
    pub fn_count: usize,
    pub tn_count: usize,
    pub fn_recovered: usize,
    pub fn_recovery_rate: Option<f64>,
    pub tn_preservation_rate: Option<f64>,
    pub tn_flip_rate: Option<f64>,
    pub mean_delta_h: Option<f64>,
    pub roc_auc: Option<f64>,
    pub first_branch_success_rate: Option<f64>,
    pub avg_probes_per_case: Option<f64>,
    pub probes_per_recovered: Option<f64>,
    pub agent_steps: u64,
    pub judge_calls: u64,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Probability that a random `positive` score exceeds a random `negative`
/// one, with half credit for ties. `None` if either side is empty.
pub fn roc_auc(positive: &[f64], negative: &[f64]) -> Option<f64> {
    if positive.is_empty() || negative.is_empty() {
        return None;
    }
    let mut u = 0.0;
    for &p in positive {
        for &n in negative {
            u += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(u / (positive.len() * negative.len()) as f64)
}

pub fn summarize(results: &[CaseResult], subset: Subset) -> CampaignSummary {
    let rs: Vec<&CaseResult> = results.iter().filter(|r| subset.contains(r)).collect();
    let correct = rs
        .iter()
        .filter(|r| (r.final_verdict == Verdict::Pass) == (r.ground_truth == GroundTruth::AgentFailPossible))
        .count();
    let fns: Vec<&&CaseResult> = rs.iter().filter(|r| r.is_fn()).collect();
    let tns: Vec<&&CaseResult> = rs.iter().filter(|r| r.is_tn()).collect();
    let recovered: Vec<&&&CaseResult> = fns.iter().filter(|r| r.recovered()).collect();
    let tn_kept = tns.iter().filter(|r| r.final_verdict == Verdict::Fail).count();
    let diagnosed = || rs.iter().filter(|r| r.diagnosed());
    let firsts: Vec<bool> = recovered.iter().filter_map(|r| r.first_probe_succeeded()).collect();
    let (agent_steps, judge_calls) = rs
        .iter()
        .map(|r| count_calls(r))
        .fold((0, 0), |(a, j), (x, y)| (a + x, j + y));
    let tn_scores: Vec<f64> = tns.iter().map(|r| r.p_end).collect();
    let fn_scores: Vec<f64> = fns.iter().map(|r| r.p_end).collect();
    CampaignSummary {
        n_cases: rs.len(),
        accuracy: ratio(correct, rs.len()),
        fn_count: fns.len(),
        tn_count: tns.len(),
        fn_recovered: recovered.len(),
        fn_recovery_rate: ratio(recovered.len(), fns.len()),
        tn_preservation_rate: ratio(tn_kept, tns.len()),
        tn_flip_rate: ratio(tns.len() - tn_kept, tns.len()),
        mean_delta_h: mean(diagnosed().map(|r| r.delta_h)),
        roc_auc: roc_auc(&tn_scores, &fn_scores),
        first_branch_success_rate: ratio(firsts.iter().filter(|b| **b).count(), firsts.len()),
        avg_probes_per_case: mean(diagnosed().map(|r| r.probes_executed as f64)),
        probes_per_recovered: mean(recovered.iter().map(|r| r.probes_executed as f64)),
        agent_steps,
        judge_calls,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8], &[0.85, 0.2]), Some(0.75));
        assert_eq!(roc_auc(&[0.9, 0.8], &[0.1, 0.2]), Some(1.0));
        assert_eq!(roc_auc(&[0.5, 0.5], &[0.5]), Some(0.5));
        assert_eq!(roc_auc(&[], &[0.5]), None);
    }
}
