//! Sequential diagnosis: rounds of summary construction, pool generation,
//! selection, ordered probe execution, score updates and stopping.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    self, execute_probe, ProbeReason, ProbeSettings, ResumeContext, SimError, SouConfig, Trajectory,
    TrajectoryFragment, TransitionResult, Verdict,
};
use crate::attribution::{
    check_stop, delta_entropy, expected_information_gain, update, AttributionError, LikelihoodSource, Outcome,
    ProbeType, StopKind,
};
use crate::judge::{build_fds, CaseView, DimPriorTable, Judge, JudgeCapability, ParseError};
use crate::probe::{self, generate_branches, select_top_k, Branch, ProbeError, VisibleView};
use crate::rng::{self, tag};
use crate::trace::TraceEvent;
use crate::world::{ActionLabel, GroundTruth, StateId, TestCase};
use crate::{Params, Score};

#[derive(Debug, Error)]
pub enum DiagnosisError {
    #[error("invalid diagnosis config: {0}")]
    InvalidConfig(String),
    #[error("diagnosis requires a failed trajectory")]
    NotFailed,
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    #[default]
    Neutral,
    JudgeInformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    #[default]
    Eig,
    Random,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisConfig {
    pub rounds: u32,
    pub pool_size: usize,
    pub budget_k: usize,
    pub tau_env: f64,
    pub params: Params,
    pub prior_mode: PriorMode,
    pub ordering: Ordering,
    /// Check the threshold only after a round's last probe.
    pub defer_stop_to_round_end: bool,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        Self {
            rounds: 1,
            pool_size: 5,
            budget_k: 3,
            tau_env: 0.7,
            params: Params::default(),
            prior_mode: PriorMode::Neutral,
            ordering: Ordering::Eig,
            defer_stop_to_round_end: false,
        }
    }
}

impl DiagnosisConfig {
    pub fn validate(&self) -> Result<(), DiagnosisError> {
        let bad = |m: String| Err(DiagnosisError::InvalidConfig(m));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.pool_size < 3 {
            return bad(format!("pool_size {} < 3", self.pool_size));
        }
        if self.budget_k == 0 || self.budget_k > self.pool_size {
            return bad(format!("budget_k {} outside 1..={}", self.budget_k, self.pool_size));
        }
        crate::attribution::validate_tau(self.tau_env)?;
        let p = &self.params;
        Params::new(p.w0, p.beta0, p.gamma_a, p.gamma_b, p.gamma_c)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round: u32,
    pub branch: Branch,
    pub probe_type: ProbeType,
    pub outcome: Outcome,
    pub reason: ProbeReason,
    pub context: ResumeContext,
    pub fragment: TrajectoryFragment,
    pub eig: f64,
    pub p_before: f64,
    pub p_after: f64,
    pub source: LikelihoodSource,
}

/// States and transitions seen across the rollout and all probe fragments.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservedGraph {
    pub states: BTreeSet<StateId>,
    pub transitions: BTreeSet<(StateId, ActionLabel, StateId)>,
}

impl ObservedGraph {
    pub fn absorb<'a>(&mut self, start: StateId, steps: impl IntoIterator<Item = &'a agent::Step>) {
        self.states.insert(start);
        for s in steps {
            self.states.insert(s.state);
            self.states.insert(s.state_after);
            if s.result == TransitionResult::Moved {
                if let Some(a) = s.executed.label() {
                    self.transitions.insert((s.state, a, s.state_after));
                }
            }
        }
    }

    /// Every observed transition exists in the latent graph.
    pub fn is_subgraph_of(&self, case: &TestCase) -> bool {
        self.transitions
            .iter()
            .all(|&(f, a, t)| case.graph.edge(f, a).is_some_and(|e| e.to == t))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisHistory {
    pub entries: Vec<HistoryEntry>,
    pub observed: ObservedGraph,
}

impl DiagnosisHistory {
    /// Recomputes the score sequence from `p0` through the recorded updates.
    pub fn replay(&self, p0: f64) -> Result<Vec<f64>, AttributionError> {
        let mut p = p0;
        self.entries
            .iter()
            .map(|e| {
                p = update(p, e.outcome, &e.branch.likelihoods)?;
                Ok(p)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStop {
    InitialPass,
    SuccessWitness,
    EnvThreshold,
    BudgetExhausted,
    /// Baseline verdict from fresh or resumed rollouts.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub method: String,
    pub case_id: u64,
    pub ground_truth: GroundTruth,
    pub initial_verdict: Verdict,
    pub final_verdict: Verdict,
    pub p0: f64,
    pub p_end: f64,
    pub delta_h: f64,
    pub rounds_used: u32,
    pub probes_executed: u32,
    pub stop_reason: CaseStop,
    pub history: DiagnosisHistory,
    /// Verdicts of baseline reruns, in order.
    pub attempts: Vec<Verdict>,
    pub rollout_steps: u64,
    pub retry_steps: u64,
    pub judge_calls: u64,
}

impl CaseResult {
    pub fn initial_pass(method: &str, case: &TestCase, traj: &Trajectory) -> Self {
        Self {
            method: method.into(),
            case_id: case.id,
            ground_truth: case.ground_truth,
            initial_verdict: traj.verdict,
            final_verdict: traj.verdict,
            p0: 0.5,
            p_end: 0.5,
            delta_h: 0.0,
            rounds_used: 0,
            probes_executed: 0,
            stop_reason: CaseStop::InitialPass,
            history: DiagnosisHistory::default(),
            attempts: Vec::new(),
            rollout_steps: traj.steps.len() as u64,
            retry_steps: 0,
            judge_calls: 0,
        }
    }

    /// Initial verdict was Fail, so a method ran on this case.
    pub fn diagnosed(&self) -> bool {
        self.initial_verdict == Verdict::Fail
    }

    pub fn is_fn(&self) -> bool {
        self.diagnosed() && self.ground_truth == GroundTruth::AgentFailPossible
    }

    pub fn is_tn(&self) -> bool {
        self.diagnosed() && self.ground_truth == GroundTruth::EnvFail
    }

    pub fn recovered(&self) -> bool {
        self.is_fn() && self.final_verdict == Verdict::Pass
    }

    pub fn first_probe_succeeded(&self) -> Option<bool> {
        self.history
            .entries
            .first()
            .map(|e| e.outcome == Outcome::VerifiedSuccess)
    }
}

/// `(agent_steps, judge_calls)`: executor steps over the rollout, reruns and
/// all probe fragments, and judge invocations for summaries and selections.
pub fn count_calls(result: &CaseResult) -> (u64, u64) {
    let fragments: u64 = result
        .history
        .entries
        .iter()
        .map(|e| e.fragment.steps.len() as u64)
        .sum();
    (
        result.rollout_steps + result.retry_steps + fragments,
        result.judge_calls,
    )
}

/// Runs the diagnosis loop on a failed trajectory.
#[allow(clippy::too_many_arguments)]
pub fn run_diagnosis(
    case: &TestCase,
    failed: &Trajectory,
    cfg: &DiagnosisConfig,
    judge: &dyn Judge,
    table: &DimPriorTable,
    settings: &ProbeSettings,
    seed: u64,
    trace: &mut Vec<TraceEvent>,
) -> Result<CaseResult, DiagnosisError> {
    if failed.verdict != Verdict::Fail {
        return Err(DiagnosisError::NotFailed);
    }
    cfg.validate()?;
    let blind = Trajectory {
        annotations: Vec::new(),
        ..failed.clone()
    };
    let judged = if judge.capability() == JudgeCapability::Oracle {
        failed
    } else {
        &blind
    };
    let graph_view = |ctx: &ResumeContext| VisibleView::of(&case.graph, ctx);

    let mut history = DiagnosisHistory::default();
    history.observed.absorb(failed.start, &failed.steps);
    let mut score = Score::neutral();
    let mut p0 = score.p();
    let mut judge_calls = 0u64;
    let mut rounds_used = 0;
    let mut stop = CaseStop::BudgetExhausted;

    'rounds: for k in 0..cfg.rounds {
        let view = match judge.capability() {
            JudgeCapability::Oracle => CaseView::oracle(judged, &history.entries, case, settings),
            _ => CaseView::blind(judged, &history.entries),
        };
        let fds = build_fds(&view, judge, table, graph_view)?;
        judge_calls += 1;
        if k == 0 && cfg.prior_mode == PriorMode::JudgeInformed {
            if let Some(prior) = fds.initial_p_env {
                score = Score::new(prior)?;
                p0 = prior;
            }
        }
        trace.push(TraceEvent::Fds {
            round: k,
            fds: Box::new(fds.clone()),
        });
        let vis = graph_view(&fds.context);
        let pool = generate_branches(&fds, cfg.pool_size, &vis, judged, &history.entries, &cfg.params, k)?;
        trace.push(TraceEvent::Pool {
            round: k,
            counts: pool.counts(),
            branches: pool.branches.clone(),
        });
        let selection = select_top_k(
            &pool,
            cfg.budget_k,
            &fds,
            &history.entries,
            judge,
            &view,
            &vis,
            score.p(),
        )?;
        judge_calls += 1;
        rounds_used = k + 1;
        let ordered = match cfg.ordering {
            Ordering::Eig => probe::order_by_eig(&selection.selected, score.p())?,
            Ordering::Random => probe::order_random(&selection.selected, rng::derive(seed, &[tag::ORDER, k as u64])),
            Ordering::Fixed => probe::order_fixed(&selection.selected),
        };
        trace.push(TraceEvent::Selection {
            round: k,
            ordering: cfg.ordering,
            selected: selection.selected.iter().map(|b| b.id.clone()).collect(),
            executed_order: ordered.iter().map(|b| b.id.clone()).collect(),
            rejected: selection.rejected.clone(),
        });

        for b in ordered {
            let p_before = score.p();
            let eig = expected_information_gain(p_before, &b.likelihoods)?;
            let probe_seed = rng::derive(seed, &[tag::PROBE, k as u64, rng::label_key(&b.id)]);
            let exec = execute_probe(case, &b.plan, &fds.context, settings, probe_seed);
            let p_after = score.apply(exec.outcome, &b.likelihoods)?;
            trace.push(TraceEvent::Probe {
                round: k,
                branch: Box::new(b.clone()),
                eig,
                outcome: exec.outcome,
                reason: exec.reason,
                fragment_steps: exec.fragment.steps.len(),
                final_state: exec.fragment.final_state,
            });
            trace.push(TraceEvent::Update {
                round: k,
                branch_id: b.id.clone(),
                p_before,
                p_after,
                source: b.likelihoods.source,
            });
            history.observed.absorb(exec.fragment.start, &exec.fragment.steps);
            history.entries.push(HistoryEntry {
                round: k,
                probe_type: b.probe_type,
                outcome: exec.outcome,
                reason: exec.reason,
                context: fds.context.clone(),
                fragment: exec.fragment,
                eig,
                p_before,
                p_after,
                source: b.likelihoods.source,
                branch: b,
            });
            let decision = check_stop(&score, exec.outcome, cfg.tau_env)?;
            match decision.kind {
                StopKind::StopPass => {
                    stop = CaseStop::SuccessWitness;
                    break 'rounds;
                }
                StopKind::StopFail if !cfg.defer_stop_to_round_end => {
                    stop = CaseStop::EnvThreshold;
                    break 'rounds;
                }
                _ => {}
            }
        }
        if cfg.defer_stop_to_round_end && score.p() >= cfg.tau_env {
            stop = CaseStop::EnvThreshold;
            break;
        }
    }

    let final_verdict = if stop == CaseStop::SuccessWitness {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    let p_end = score.p();
    trace.push(TraceEvent::Stop {
        reason: stop,
        p_end,
        verdict: final_verdict,
    });
    Ok(CaseResult {
        method: "diagnose".into(),
        case_id: case.id,
        ground_truth: case.ground_truth,
        initial_verdict: failed.verdict,
        final_verdict,
        p0,
        p_end,
        delta_h: delta_entropy(p0, p_end)?,
        rounds_used,
        probes_executed: history.entries.len() as u32,
        stop_reason: stop,
        history,
        attempts: Vec::new(),
        rollout_steps: failed.steps.len() as u64,
        retry_steps: 0,
        judge_calls,
    })
}

/// Seed of the initial rollout for a case stream.
pub fn rollout_seed(seed: u64) -> u64 {
    rng::derive(seed, &[tag::ROLLOUT])
}

/// Rolls out the evaluator and diagnoses only an initial Fail.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_case(
    case: &TestCase,
    sou: &SouConfig,
    agent_budget: usize,
    cfg: &DiagnosisConfig,
    judge: &dyn Judge,
    table: &DimPriorTable,
    seed: u64,
    trace: &mut Vec<TraceEvent>,
) -> Result<CaseResult, DiagnosisError> {
    let traj = agent::rollout(case, sou, agent_budget, rollout_seed(seed))?;
    trace.push(TraceEvent::Rollout {
        steps: traj.steps.len(),
        stop: traj.stop,
        final_state: traj.final_state,
        verdict: traj.verdict,
    });
    if traj.verdict == Verdict::Pass {
        return Ok(CaseResult::initial_pass("diagnose", case, &traj));
    }
    let settings = ProbeSettings::new(case, sou, agent_budget);
    run_diagnosis(case, &traj, cfg, judge, table, &settings, seed, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::HeuristicJudge;
    use crate::world::{Edge, LatentGraph};

    #[test]
    fn config_validation() {
        assert!(DiagnosisConfig::default().validate().is_ok());
        for bad in [
            DiagnosisConfig {
                rounds: 0,
                ..Default::default()
            },
            DiagnosisConfig {
                budget_k: 6,
                ..Default::default()
            },
            DiagnosisConfig {
                pool_size: 2,
                budget_k: 1,
                ..Default::default()
            },
            DiagnosisConfig {
                tau_env: 0.5,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn passing_trajectory_is_not_diagnosed() {
        let g = LatentGraph::new(2, vec![Edge::new(0, 1, 0)], StateId(0), [StateId(1)]).unwrap();
        let c = TestCase::labelled(0, 0, g);
        let sou = SouConfig::clean();
        let t = agent::rollout(&c, &sou, 5, 1).unwrap();
        let settings = ProbeSettings::new(&c, &sou, 5);
        let r = run_diagnosis(
            &c,
            &t,
            &DiagnosisConfig::default(),
            &HeuristicJudge::default(),
            &DimPriorTable::default(),
            &settings,
            1,
            &mut Vec::new(),
        );
        assert!(matches!(r, Err(DiagnosisError::NotFailed)));
    }
}
