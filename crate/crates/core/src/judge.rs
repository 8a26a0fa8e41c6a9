//! Failure parsing: fork localization, failure classification, dimension
//! weights and the failure diagnostic summary, behind a pluggable judge.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    self, execute_probe, AgentAction, Modality, ProbePlan, ProbeSettings, ResumeContext, RolloutStop, SimError,
    SouEvent, Trajectory, TransitionResult,
};
use crate::attribution::{Outcome, ProbeType};
use crate::diagnosis::HistoryEntry;
use crate::probe::Branch;
use crate::rng::{self, tag};
use crate::world::{ActionLabel, StateId, TestCase};

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("malformed trajectory: {0}")]
    MalformedTrajectory(String),
    #[error("category {0:?} missing from prior table")]
    UnknownCategory(Category),
    #[error("smoothing alpha must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("external judge is not available in this build")]
    ExternalUnavailable,
    #[error("judge returned an invalid ranking: {0}")]
    InvalidRanking(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    InsufficientExploration,
    WrongStrategy,
    WrongTarget,
    EnvBoundary,
    Unknown,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::InsufficientExploration,
        Category::WrongStrategy,
        Category::WrongTarget,
        Category::EnvBoundary,
        Category::Unknown,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureType {
    Agent,
    Env,
    Ambiguous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeCapability {
    Oracle,
    Heuristic,
    ExternalStub,
}

/// Per-category success counts over probe dimensions (A, B, C).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimPriorTable {
    pub counts: BTreeMap<Category, [u32; 3]>,
    pub smoothing_alpha: f64,
}

impl Default for DimPriorTable {
    fn default() -> Self {
        let counts = BTreeMap::from([
            (Category::InsufficientExploration, [1, 7, 0]),
            (Category::WrongStrategy, [3, 0, 0]),
            (Category::WrongTarget, [2, 0, 0]),
            (Category::EnvBoundary, [2, 1, 0]),
            (Category::Unknown, [0, 0, 0]),
        ]);
        Self {
            counts,
            smoothing_alpha: 1.0,
        }
    }
}

/// Laplace-smoothed allocation weights for a category.
pub fn dim_weights_from_category(category: Category, table: &DimPriorTable) -> Result<[f64; 3], ParseError> {
    let alpha = table.smoothing_alpha;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(ParseError::InvalidAlpha(alpha));
    }
    let c = table
        .counts
        .get(&category)
        .ok_or(ParseError::UnknownCategory(category))?;
    let total: f64 = c.iter().map(|&x| x as f64).sum::<f64>() + 3.0 * alpha;
    Ok(c.map(|x| (x as f64 + alpha) / total))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForkScore {
    pub step: usize,
    pub prog: f64,
    pub delta_h_est: f64,
    pub combined: f64,
}

impl ForkScore {
    pub fn new(step: usize, prog: f64, delta_h_est: f64) -> Self {
        Self {
            step,
            prog,
            delta_h_est,
            combined: prog * delta_h_est,
        }
    }
}

/// What a judge may look at. Heuristic judges get a trajectory with the
/// ground-truth channel stripped and no latent access.
#[derive(Clone, Copy)]
pub struct CaseView<'a> {
    pub trajectory: &'a Trajectory,
    pub history: &'a [HistoryEntry],
    latent: Option<(&'a TestCase, &'a ProbeSettings)>,
}

impl<'a> CaseView<'a> {
    pub fn blind(trajectory: &'a Trajectory, history: &'a [HistoryEntry]) -> Self {
        Self {
            trajectory,
            history,
            latent: None,
        }
    }

    pub fn oracle(
        trajectory: &'a Trajectory,
        history: &'a [HistoryEntry],
        case: &'a TestCase,
        settings: &'a ProbeSettings,
    ) -> Self {
        Self {
            trajectory,
            history,
            latent: Some((case, settings)),
        }
    }

    pub fn latent(&self) -> Option<(&'a TestCase, &'a ProbeSettings)> {
        self.latent
    }
}

/// A judge's ordering of candidates, best first, with optional
/// `(w_b, beta_d)` overrides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedBranch {
    pub index: usize,
    pub overrides: Option<(f64, f64)>,
}

pub trait Judge: Send + Sync {
    fn capability(&self) -> JudgeCapability;

    /// Scores for positions `0..=steps.len()`.
    fn fork_scores(&self, view: &CaseView<'_>) -> Result<Vec<ForkScore>, ParseError>;

    fn classify(&self, view: &CaseView<'_>) -> Result<(FailureType, Category), ParseError>;

    fn prior(&self, _view: &CaseView<'_>, failure_type: FailureType) -> Option<f64> {
        Some(match failure_type {
            FailureType::Agent => 0.3,
            FailureType::Ambiguous => 0.5,
            FailureType::Env => 0.6,
        })
    }

    fn rank_branches(
        &self,
        view: &CaseView<'_>,
        fds: &Fds,
        candidates: &[Branch],
        p: f64,
    ) -> Result<Vec<RankedBranch>, ParseError>;
}

/// Argmax of combined fork scores; ties go to the earliest position.
pub fn localize_fork(view: &CaseView<'_>, judge: &dyn Judge) -> Result<(Vec<ForkScore>, usize), ParseError> {
    check_chain(view.trajectory)?;
    let scores = judge.fork_scores(view)?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.combined > scores[best].combined {
            best = i;
        }
    }
    let t_star = scores.get(best).map(|s| s.step).unwrap_or(0);
    Ok((scores, t_star))
}

/// Consecutive steps must connect, ending at the recorded final state.
fn check_chain(traj: &Trajectory) -> Result<(), ParseError> {
    let mut at = traj.start;
    for (i, s) in traj.steps.iter().enumerate() {
        if s.state != at || s.observation.state != s.state {
            return Err(ParseError::MalformedTrajectory(format!(
                "step {i} starts at {} not {at}",
                s.state
            )));
        }
        at = s.state_after;
    }
    if at != traj.final_state || traj.final_observation.state != at {
        return Err(ParseError::MalformedTrajectory(format!(
            "final state {} not {at}",
            traj.final_state
        )));
    }
    Ok(())
}

pub fn classify_failure(view: &CaseView<'_>, judge: &dyn Judge) -> Result<(FailureType, Category), ParseError> {
    judge.classify(view)
}

/// Failure diagnostic summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fds {
    #[serde(rename = "restart_from_iter")]
    pub t_star: usize,
    pub failure_type: FailureType,
    pub category: Category,
    pub dim_weights: [f64; 3],
    #[serde(rename = "fail_reason")]
    pub explanation: String,
    pub restart_explanation: String,
    pub candidate_notes: Vec<String>,
    pub context: ResumeContext,
    pub should_retry: bool,
    pub initial_p_env: Option<f64>,
    pub fork_scores: Vec<ForkScore>,
}

/// Builds the summary for a failed trajectory. With history, the resume
/// context may move to the deepest state a failed probe reached if that
/// state still offers untried options.
pub fn build_fds(
    view: &CaseView<'_>,
    judge: &dyn Judge,
    table: &DimPriorTable,
    graph_view: impl Fn(&ResumeContext) -> crate::probe::VisibleView,
) -> Result<Fds, ParseError> {
    let traj = view.trajectory;
    let (fork_scores, mut t_star) = localize_fork(view, judge)?;
    let (failure_type, category) = judge.classify(view)?;
    let dim_weights = dim_weights_from_category(category, table)?;
    let should_retry = failure_type != FailureType::Env;
    if !should_retry {
        t_star = 0;
    }
    let mut context = agent::resume_context(traj, t_star)?;
    let mut restart_explanation = format!("resume at position {t_star} ({})", context.state);

    let attempted = attempted_actions(traj, view.history);
    let mut best_depth = context.replay_prefix.len();
    for entry in view.history.iter().filter(|e| e.outcome == Outcome::Fail) {
        let ctx = entry.context.advanced_by(&entry.fragment);
        if ctx.replay_prefix.len() <= best_depth {
            continue;
        }
        let vis = graph_view(&ctx);
        let open = vis.has_more || vis.visible.iter().any(|(a, _)| !attempted.contains(&(ctx.state, *a)));
        if open {
            best_depth = ctx.replay_prefix.len();
            restart_explanation = format!("re-fork to {} reached by probe {}", ctx.state, entry.branch.id);
            context = ctx;
        }
    }

    let explanation = describe(traj, category);
    let candidate_notes = graph_view(&context)
        .visible
        .iter()
        .filter(|(a, _)| !attempted.contains(&(context.state, *a)))
        .map(|(a, t)| format!("untried {a} -> {t}"))
        .collect();
    Ok(Fds {
        t_star,
        failure_type,
        category,
        dim_weights,
        explanation,
        restart_explanation,
        candidate_notes,
        context,
        should_retry,
        initial_p_env: judge.prior(view, failure_type),
        fork_scores,
    })
}

/// `(state, intended action)` pairs tried in the rollout or any probe.
pub fn attempted_actions(traj: &Trajectory, history: &[HistoryEntry]) -> BTreeSet<(StateId, ActionLabel)> {
    traj.steps
        .iter()
        .chain(history.iter().flat_map(|h| h.fragment.steps.iter()))
        .filter_map(|s| s.intended.label().map(|a| (s.state, a)))
        .collect()
}

fn describe(traj: &Trajectory, category: Category) -> String {
    let moved = traj
        .steps
        .iter()
        .filter(|s| s.result == TransitionResult::Moved)
        .count();
    let stop = match traj.stop {
        RolloutStop::Goal => "at the goal",
        RolloutStop::DeadEnd => "at a dead end",
        RolloutStop::Budget => "with the step budget spent",
    };
    format!(
        "{category:?}: {} steps ({moved} transitions), stopped {stop} in {}",
        traj.steps.len(),
        traj.final_state
    )
}

/// Observable per-state facts of a trajectory.
struct TraceFacts {
    attempted: BTreeMap<StateId, BTreeSet<ActionLabel>>,
    diverged: BTreeMap<StateId, BTreeSet<ActionLabel>>,
    moved_ok: BTreeSet<(StateId, ActionLabel)>,
}

impl TraceFacts {
    fn of(traj: &Trajectory) -> Self {
        let mut f = TraceFacts {
            attempted: BTreeMap::new(),
            diverged: BTreeMap::new(),
            moved_ok: BTreeSet::new(),
        };
        for s in &traj.steps {
            let Some(a) = s.intended.label() else { continue };
            f.attempted.entry(s.state).or_default().insert(a);
            if s.diverged() {
                f.diverged.entry(s.state).or_default().insert(a);
            }
            if s.result == TransitionResult::Moved && s.executed == AgentAction::Act(a) {
                f.moved_ok.insert((s.state, a));
            }
        }
        f
    }
}

/// Reads only the trajectory and the observations it contains.
#[derive(Debug, Clone, Default)]
pub struct HeuristicJudge {
    pub params: crate::Params,
}

impl HeuristicJudge {
    pub fn new(params: crate::Params) -> Self {
        Self { params }
    }
}

impl Judge for HeuristicJudge {
    fn capability(&self) -> JudgeCapability {
        JudgeCapability::Heuristic
    }

    fn fork_scores(&self, view: &CaseView<'_>) -> Result<Vec<ForkScore>, ParseError> {
        let traj = view.trajectory;
        let n = traj.steps.len();
        let facts = TraceFacts::of(traj);
        let mut moved = 0usize;
        let mut out = Vec::with_capacity(n + 1);
        for t in 0..=n {
            let obs = traj.observation_at(t).expect("position in range");
            let tried = facts.attempted.get(&obs.state);
            let untried = obs
                .visible
                .iter()
                .filter(|(a, _)| tried.is_none_or(|s| !s.contains(a)))
                .count();
            let regrounds = facts.diverged.get(&obs.state).map_or(0, BTreeSet::len);
            let u = (untried + regrounds + obs.has_more as usize) as f64;
            let prog = (1 + moved) as f64 / (1 + n) as f64;
            out.push(ForkScore::new(t, prog, u / (u + 1.0)));
            if t < n && traj.steps[t].result == TransitionResult::Moved {
                moved += 1;
            }
        }
        Ok(out)
    }

    fn classify(&self, view: &CaseView<'_>) -> Result<(FailureType, Category), ParseError> {
        let traj = view.trajectory;
        let facts = TraceFacts::of(traj);
        let blocked: BTreeSet<(StateId, ActionLabel)> = traj
            .steps
            .iter()
            .filter(|s| s.result == TransitionResult::Blocked)
            .filter_map(|s| s.intended.label().map(|a| (s.state, a)))
            .collect();
        // a state where every visible action was tried and every attempt was blocked
        let walled = traj.steps.iter().any(|s| {
            let vis = &s.observation.visible;
            !vis.is_empty()
                && vis.iter().all(|(a, _)| blocked.contains(&(s.state, *a)))
                && !vis.iter().any(|(a, _)| facts.moved_ok.contains(&(s.state, *a)))
        });
        let flaked = traj.steps.iter().any(|s| s.result == TransitionResult::Flaked);
        let mut failures: BTreeMap<(StateId, ActionLabel), u32> = BTreeMap::new();
        for s in &traj.steps {
            if s.result != TransitionResult::Moved {
                if let Some(a) = s.intended.label() {
                    *failures.entry((s.state, a)).or_default() += 1;
                }
            }
        }
        let goal_adjacent = |st: StateId| {
            traj.steps.iter().filter(|s| s.state == st).any(|s| {
                s.observation
                    .visible
                    .iter()
                    .any(|(_, t)| traj.final_observation.state == *t && traj.final_observation.is_goal)
            })
        };
        let repeated = failures.iter().any(|(&(s, _), &n)| n >= 2 && goal_adjacent(s));

        let category = if walled || blocked.len() >= 2 {
            Category::EnvBoundary
        } else if traj.stop == RolloutStop::Budget
            || (traj.stop == RolloutStop::DeadEnd && traj.final_observation.has_more)
        {
            Category::InsufficientExploration
        } else if !facts.diverged.is_empty() {
            Category::WrongTarget
        } else if flaked {
            Category::Unknown
        } else if repeated || traj.final_observation.is_goal {
            Category::WrongStrategy
        } else {
            Category::Unknown
        };
        let failure_type = match category {
            Category::EnvBoundary if walled => FailureType::Env,
            Category::EnvBoundary | Category::Unknown => FailureType::Ambiguous,
            _ => FailureType::Agent,
        };
        Ok((failure_type, category))
    }

    /// Ranks by EIG. Success likelihoods are scaled by the category's
    /// dimension weight and by how much of that dimension the branch covers.
    fn rank_branches(
        &self,
        _view: &CaseView<'_>,
        fds: &Fds,
        candidates: &[Branch],
        p: f64,
    ) -> Result<Vec<RankedBranch>, ParseError> {
        let w0 = self.params.w0;
        let b0 = self.params.beta0;
        let ranked: Vec<(f64, RankedBranch)> = candidates
            .iter()
            .enumerate()
            .map(|(index, b)| {
                let w = ((w0 * 3.0 * fds.dim_weights[b.probe_type.index()]).clamp((b0 + 0.05).min(1.0), 0.95)
                    * coverage(&b.plan))
                .max((b0 + 0.01).min(1.0));
                let bl = b.likelihoods.overridden(w.max(b0), b0).unwrap_or(b.likelihoods);
                let eig = crate::attribution::expected_information_gain(p, &bl).unwrap_or(0.0);
                (
                    eig,
                    RankedBranch {
                        index,
                        overrides: Some((bl.w_b, bl.beta_d)),
                    },
                )
            })
            .collect();
        Ok(sort_ranked(ranked, candidates))
    }
}

/// Fraction of its dimension a branch exercises: deeper expansions and longer
/// repetition runs cover more, re-grounding covers more than a different action.
pub fn coverage(plan: &ProbePlan) -> f64 {
    match plan {
        ProbePlan::Alternative { steps } => {
            if steps.iter().any(|s| s.modality == Modality::Alternate) {
                1.0
            } else {
                0.8
            }
        }
        ProbePlan::Expansion { expansions, .. } => 1.0 - 0.5f64.powi(*expansions as i32 + 1),
        ProbePlan::Repeat { times, .. } => 1.0 - 0.5f64.powi(*times as i32 - 1),
    }
}

/// Best first; ties by probe type then id.
fn sort_ranked(mut ranked: Vec<(f64, RankedBranch)>, candidates: &[Branch]) -> Vec<RankedBranch> {
    ranked.sort_by(|(ka, a), (kb, b)| {
        kb.total_cmp(ka)
            .then_with(|| candidates[a.index].probe_type.cmp(&candidates[b.index].probe_type))
            .then_with(|| candidates[a.index].id.cmp(&candidates[b.index].id))
    });
    ranked.into_iter().map(|(_, r)| r).collect()
}

/// Reads the latent graph and the ground-truth annotation channel.
#[derive(Debug, Clone)]
pub struct OracleJudge {
    pub params: crate::Params,
    /// Monte-Carlo draws per candidate when estimating success probability.
    pub draws: u32,
}

impl Default for OracleJudge {
    fn default() -> Self {
        Self {
            params: crate::Params::default(),
            draws: 32,
        }
    }
}

impl OracleJudge {
    fn latent<'a>(&self, view: &CaseView<'a>) -> Result<(&'a TestCase, &'a ProbeSettings), ParseError> {
        view.latent()
            .ok_or_else(|| ParseError::Sim(SimError::InvalidConfig("oracle judge needs latent access".into())))
    }

    /// Empirical probability that a branch reaches the goal from its context.
    pub fn success_probability(
        &self,
        case: &TestCase,
        settings: &ProbeSettings,
        ctx: &ResumeContext,
        b: &Branch,
    ) -> f64 {
        let key = rng::label_key(&b.id);
        let hits = (0..self.draws)
            .filter(|&i| {
                let seed = rng::derive(case.seed, &[tag::ORACLE_MC, key, i as u64]);
                execute_probe(case, &b.plan, ctx, settings, seed).outcome == Outcome::VerifiedSuccess
            })
            .count();
        hits as f64 / self.draws.max(1) as f64
    }
}

impl Judge for OracleJudge {
    fn capability(&self) -> JudgeCapability {
        JudgeCapability::Oracle
    }

    fn fork_scores(&self, view: &CaseView<'_>) -> Result<Vec<ForkScore>, ParseError> {
        let (case, _) = self.latent(view)?;
        let traj = view.trajectory;
        let g = &case.graph;
        let dist = g.working_distances();
        let facts = TraceFacts::of(traj);
        Ok((0..=traj.steps.len())
            .map(|t| {
                let s = traj.state_at(t).expect("position in range");
                let prog = dist[s.index()].map_or(0.0, |d| 1.0 / (1.0 + d as f64));
                let open = g
                    .outgoing(s)
                    .any(|e| !e.broken && dist[e.to.index()].is_some() && !facts.moved_ok.contains(&(s, e.action)));
                ForkScore::new(t, prog, if open { 1.0 } else { 0.0 })
            })
            .collect())
    }

    fn classify(&self, view: &CaseView<'_>) -> Result<(FailureType, Category), ParseError> {
        let (case, _) = self.latent(view)?;
        let traj = view.trajectory;
        let has = |f: fn(&SouEvent) -> bool| traj.annotations.iter().any(f);
        let category = if has(|e| matches!(e, SouEvent::Hallucination { .. })) {
            if traj.steps.iter().any(|s| s.intended.label().is_some()) {
                Category::WrongStrategy
            } else {
                Category::Unknown
            }
        } else if !crate::world::reachable(&case.graph) {
            Category::EnvBoundary
        } else if has(|e| matches!(e, SouEvent::Grounding { .. })) {
            Category::WrongTarget
        } else if has(|e| matches!(e, SouEvent::ObservationLimit { .. } | SouEvent::BudgetExhausted)) {
            Category::InsufficientExploration
        } else {
            Category::Unknown
        };
        let failure_type = match category {
            Category::EnvBoundary => FailureType::Env,
            Category::Unknown => FailureType::Ambiguous,
            _ => FailureType::Agent,
        };
        Ok((failure_type, category))
    }

    fn rank_branches(
        &self,
        view: &CaseView<'_>,
        fds: &Fds,
        candidates: &[Branch],
        _p: f64,
    ) -> Result<Vec<RankedBranch>, ParseError> {
        let (case, settings) = self.latent(view)?;
        let b0 = self.params.beta0;
        let ranked = candidates
            .iter()
            .enumerate()
            .map(|(index, b)| {
                let q = self.success_probability(case, settings, &fds.context, b);
                let w = q.clamp((b0 + 0.01).min(1.0), 1.0);
                (
                    q,
                    RankedBranch {
                        index,
                        overrides: Some((w, b0)),
                    },
                )
            })
            .collect();
        Ok(sort_ranked(ranked, candidates))
    }
}

/// Request/response boundary for an out-of-process judge. Never invoked by
/// the built-in campaigns.
#[derive(Debug, Clone, Default)]
pub struct ExternalStubJudge;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub schema_id: String,
    pub task: String,
    pub trajectory: Trajectory,
    pub candidates: Vec<Branch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub schema_id: String,
    pub failure_type: Option<FailureType>,
    pub category: Option<Category>,
    pub restart_from_iter: Option<usize>,
    pub ranking: Vec<String>,
    pub p_success_agent: BTreeMap<String, f64>,
    pub p_success_env: BTreeMap<String, f64>,
}

pub const JUDGE_REQUEST_SCHEMA: &str = "judge-request/1";
pub const JUDGE_RESPONSE_SCHEMA: &str = "judge-response/1";

impl Judge for ExternalStubJudge {
    fn capability(&self) -> JudgeCapability {
        JudgeCapability::ExternalStub
    }

    fn fork_scores(&self, _view: &CaseView<'_>) -> Result<Vec<ForkScore>, ParseError> {
        Err(ParseError::ExternalUnavailable)
    }

    fn classify(&self, _view: &CaseView<'_>) -> Result<(FailureType, Category), ParseError> {
        Err(ParseError::ExternalUnavailable)
    }

    fn prior(&self, _view: &CaseView<'_>, _ft: FailureType) -> Option<f64> {
        None
    }

    fn rank_branches(
        &self,
        _view: &CaseView<'_>,
        _fds: &Fds,
        _candidates: &[Branch],
        _p: f64,
    ) -> Result<Vec<RankedBranch>, ParseError> {
        Err(ParseError::ExternalUnavailable)
    }
}

pub fn probe_type_weight(weights: &[f64; 3], t: ProbeType) -> f64 {
    weights[t.index()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{rollout, SouConfig, Verdict};
    use crate::world::{Edge, LatentGraph};
    use approx::assert_abs_diff_eq;

    fn case(n: u32, edges: Vec<Edge>, goal: u32) -> TestCase {
        TestCase::labelled(0, 0, LatentGraph::new(n, edges, StateId(0), [StateId(goal)]).unwrap())
    }

    fn limited() -> SouConfig {
        SouConfig {
            grounding_err_rate: 0.0,
            observation_limit: 0,
            halluc_rate: 0.0,
            flake_retries: 0,
        }
    }

    #[test]
    fn laplace_weights() {
        let t = DimPriorTable::default();
        assert_eq!(
            dim_weights_from_category(Category::WrongTarget, &t).unwrap(),
            [0.6, 0.2, 0.2]
        );
        let u = dim_weights_from_category(Category::Unknown, &t).unwrap();
        assert!(u.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        let ie = dim_weights_from_category(Category::InsufficientExploration, &t).unwrap();
        assert_abs_diff_eq!(ie[0], 2.0 / 11.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ie[1], 8.0 / 11.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ie[2], 1.0 / 11.0, epsilon = 1e-15);
    }

    #[test]
    fn a_dominates_for_a_heavy_categories() {
        let t = DimPriorTable::default();
        for c in [Category::WrongStrategy, Category::WrongTarget, Category::EnvBoundary] {
            let w = dim_weights_from_category(c, &t).unwrap();
            assert!(w[0] > w[1] && w[0] > w[2], "{c:?}");
        }
    }

    #[test]
    fn missing_category_and_bad_alpha() {
        let mut t = DimPriorTable::default();
        t.counts.remove(&Category::Unknown);
        assert!(matches!(
            dim_weights_from_category(Category::Unknown, &t),
            Err(ParseError::UnknownCategory(_))
        ));
        t.smoothing_alpha = 0.0;
        assert!(matches!(
            dim_weights_from_category(Category::WrongTarget, &t),
            Err(ParseError::InvalidAlpha(_))
        ));
    }

    #[test]
    fn ties_go_to_earliest() {
        // agent never leaves the start: every action is blocked
        let c = case(3, vec![Edge::new(0, 1, 0).broken(), Edge::new(1, 2, 0)], 2);
        let t = rollout(&c, &limited(), 10, 1).unwrap();
        assert_eq!(t.verdict, Verdict::Fail);
        let judge = HeuristicJudge::default();
        let (_, t_star) = localize_fork(&CaseView::blind(&t, &[]), &judge).unwrap();
        assert_eq!(t_star, 0);
    }

    #[test]
    fn zero_action_rollout_forks_at_start() {
        let c = case(2, vec![Edge::new(0, 1, 0).tier(1)], 1);
        let t = rollout(&c, &limited(), 10, 1).unwrap();
        assert!(t.steps.is_empty());
        let judge = HeuristicJudge::default();
        let (scores, t_star) = localize_fork(&CaseView::blind(&t, &[]), &judge).unwrap();
        assert_eq!((scores.len(), t_star), (1, 0));
    }

    #[test]
    fn broken_chain_is_a_parse_error() {
        let c = case(3, vec![Edge::new(0, 1, 0), Edge::new(1, 2, 0).tier(1)], 2);
        let mut t = rollout(&c, &limited(), 10, 1).unwrap();
        t.final_state = StateId(2);
        let judge = HeuristicJudge::default();
        assert!(matches!(
            localize_fork(&CaseView::blind(&t, &[]), &judge),
            Err(ParseError::MalformedTrajectory(_))
        ));
    }

    #[test]
    fn external_stub_refuses() {
        let c = case(3, vec![Edge::new(0, 1, 0).broken(), Edge::new(1, 2, 0)], 2);
        let t = rollout(&c, &limited(), 10, 1).unwrap();
        let j = ExternalStubJudge;
        assert!(matches!(
            j.classify(&CaseView::blind(&t, &[])),
            Err(ParseError::ExternalUnavailable)
        ));
        assert_eq!(j.capability(), JudgeCapability::ExternalStub);
    }

    #[test]
    fn fds_record_uses_exchange_field_names() {
        let c = case(
            4,
            vec![
                Edge::new(0, 1, 0).broken(),
                Edge::new(0, 2, 1).broken(),
                Edge::new(1, 3, 0),
                Edge::new(2, 3, 0),
            ],
            3,
        );
        let t = rollout(&c, &limited(), 10, 1).unwrap();
        assert_eq!(t.steps.len(), 2);
        let judge = HeuristicJudge::default();
        let fds = build_fds(&CaseView::blind(&t, &[]), &judge, &DimPriorTable::default(), |ctx| {
            crate::probe::VisibleView::of(&c.graph, ctx)
        })
        .unwrap();
        let v = serde_json::to_value(&fds).unwrap();
        for key in [
            "failure_type",
            "fail_reason",
            "should_retry",
            "restart_from_iter",
            "restart_explanation",
            "category",
            "dim_weights",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(fds.category, Category::EnvBoundary);
        assert_eq!(fds.t_star, 0);
    }
}
