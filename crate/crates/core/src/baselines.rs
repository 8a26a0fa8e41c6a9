//! Rerun baselines without failure-guided probing.

use serde::{Deserialize, Serialize};

use crate::agent::{self, execute_probe, Modality, PlanStep, ProbePlan, ProbeSettings, SouConfig, Trajectory, Verdict};
use crate::attribution::Outcome;
use crate::diagnosis::{CaseResult, CaseStop, DiagnosisError, DiagnosisHistory};
use crate::judge::{build_fds, CaseView, DimPriorTable, HeuristicJudge};
use crate::probe::{original_plan, VisibleView};
use crate::rng::{self, tag};
use crate::trace::TraceEvent;
use crate::world::TestCase;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineKind {
    /// `n` fresh rollouts; the last verdict stands.
    RetryN { n: u32 },
    /// Majority vote over `n` fresh rollouts; ties are Fail.
    MajorityN { n: u32 },
    /// Pass if any of `n` fresh rollouts passes.
    BestOfN { n: u32 },
    /// Up to `n` sequential fresh rollouts, stopping at the first Pass.
    Nr { n: u32 },
    /// Resume at the fork and replay the remaining original plan once.
    NrIe,
}

impl BaselineKind {
    pub fn validate(&self) -> Result<(), DiagnosisError> {
        let (n, min) = match *self {
            BaselineKind::RetryN { n } | BaselineKind::Nr { n } => (n, 1),
            BaselineKind::MajorityN { n } | BaselineKind::BestOfN { n } => (n, 2),
            BaselineKind::NrIe => return Ok(()),
        };
        if n < min {
            return Err(DiagnosisError::InvalidConfig(format!("{self:?} needs n >= {min}")));
        }
        Ok(())
    }
}

fn verdict_of(pass: bool) -> Verdict {
    if pass {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

/// Majority of `Pass` votes; an even split is `Fail`.
pub fn majority(verdicts: &[Verdict]) -> Verdict {
    let passes = verdicts.iter().filter(|v| **v == Verdict::Pass).count();
    verdict_of(2 * passes > verdicts.len())
}

#[allow(clippy::too_many_arguments)]
pub fn run_baseline(
    case: &TestCase,
    failed: &Trajectory,
    kind: BaselineKind,
    sou: &SouConfig,
    budget: usize,
    seed: u64,
    trace: &mut Vec<TraceEvent>,
) -> Result<CaseResult, DiagnosisError> {
    kind.validate()?;
    if failed.verdict != Verdict::Fail {
        return Err(DiagnosisError::NotFailed);
    }
    let mut attempts = Vec::new();
    let mut retry_steps = 0u64;
    let mut judge_calls = 0u64;
    let mut history = DiagnosisHistory::default();
    history.observed.absorb(failed.start, &failed.steps);
    let mut rerun = |i: u32, trace: &mut Vec<TraceEvent>| -> Result<Verdict, DiagnosisError> {
        let t = agent::rollout(case, sou, budget, rng::derive(seed, &[tag::RETRY, i as u64]))?;
        retry_steps += t.steps.len() as u64;
        trace.push(TraceEvent::Retry {
            attempt: i,
            steps: t.steps.len(),
            verdict: t.verdict,
        });
        Ok(t.verdict)
    };
    let final_verdict = match kind {
        BaselineKind::RetryN { n } => {
            for i in 0..n {
                attempts.push(rerun(i, trace)?);
            }
            *attempts.last().expect("n >= 1")
        }
        BaselineKind::BestOfN { n } => {
            for i in 0..n {
                attempts.push(rerun(i, trace)?);
            }
            verdict_of(attempts.contains(&Verdict::Pass))
        }
        BaselineKind::MajorityN { n } => {
            for i in 0..n {
                attempts.push(rerun(i, trace)?);
            }
            majority(&attempts)
        }
        BaselineKind::Nr { n } => {
            for i in 0..n {
                let v = rerun(i, trace)?;
                attempts.push(v);
                if v == Verdict::Pass {
                    break;
                }
            }
            verdict_of(attempts.contains(&Verdict::Pass))
        }
        BaselineKind::NrIe => {
            let blind = Trajectory {
                annotations: Vec::new(),
                ..failed.clone()
            };
            let view = CaseView::blind(&blind, &[]);
            let fds = build_fds(&view, &HeuristicJudge::default(), &DimPriorTable::default(), |ctx| {
                VisibleView::of(&case.graph, ctx)
            })?;
            judge_calls += 1;
            let steps = original_plan(failed, fds.t_star)
                .into_iter()
                .map(|action| PlanStep {
                    action,
                    modality: Modality::Original,
                })
                .collect();
            let settings = ProbeSettings::new(case, sou, budget);
            let seed = rng::derive(seed, &[tag::RETRY, u64::MAX]);
            let exec = execute_probe(case, &ProbePlan::Alternative { steps }, &fds.context, &settings, seed);
            retry_steps += exec.fragment.steps.len() as u64;
            history.observed.absorb(exec.fragment.start, &exec.fragment.steps);
            let reached = exec.outcome == Outcome::VerifiedSuccess;
            // the resumed agent reports its own verdict
            let flip = rng::rng_from(seed).gen::<f64>() < sou.halluc_rate;
            let v = verdict_of(reached != flip);
            trace.push(TraceEvent::Retry {
                attempt: 0,
                steps: exec.fragment.steps.len(),
                verdict: v,
            });
            attempts.push(v);
            trace.push(TraceEvent::Fds {
                round: 0,
                fds: Box::new(fds),
            });
            v
        }
    };
    let recovered = final_verdict == Verdict::Pass;
    trace.push(TraceEvent::Stop {
        reason: CaseStop::Baseline,
        p_end: 0.5,
        verdict: final_verdict,
    });
    Ok(CaseResult {
        method: format!("{kind:?}"),
        case_id: case.id,
        ground_truth: case.ground_truth,
        initial_verdict: failed.verdict,
        final_verdict,
        p0: 0.5,
        p_end: 0.5,
        delta_h: if recovered { 1.0 } else { 0.0 },
        rounds_used: attempts.len() as u32,
        probes_executed: 0,
        stop_reason: CaseStop::Baseline,
        history,
        attempts,
        rollout_steps: failed.steps.len() as u64,
        retry_steps,
        judge_calls,
    })
}
