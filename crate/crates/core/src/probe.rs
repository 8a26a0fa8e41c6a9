//! Candidate branch pools, validity filtering, selection and execution order.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Modality, PlanStep, ProbePlan, ResumeContext, Trajectory, TransitionResult};
use crate::attribution::{expected_information_gain, AttributionError, Outcome, ProbeType};
use crate::diagnosis::HistoryEntry;
use crate::judge::{CaseView, Fds, Judge, ParseError};
use crate::rng;
use crate::world::{ActionLabel, LatentGraph, StateId};
use crate::{Likelihoods, Params};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("pool size {0} cannot hold one branch per dimension")]
    PoolTooSmall(usize),
    #[error("k = {k} outside 1..={pool}")]
    InvalidK { k: usize, pool: usize },
    #[error("invalid dimension weights {0:?}")]
    InvalidWeights([f64; 3]),
    #[error(transparent)]
    Judge(#[from] ParseError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
}

/// The part of the interface visible from a resume context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibleView {
    pub state: StateId,
    pub visible: Vec<(ActionLabel, StateId)>,
    pub has_more: bool,
}

impl VisibleView {
    pub fn of(graph: &LatentGraph, ctx: &ResumeContext) -> Self {
        let k = ctx.visibility_expansions_done;
        Self {
            state: ctx.state,
            visible: graph
                .outgoing(ctx.state)
                .filter(|e| e.visibility_tier <= k)
                .map(|e| (e.action, e.to))
                .collect(),
            has_more: graph.max_tier(ctx.state) > k,
        }
    }

    pub fn shows(&self, a: ActionLabel) -> bool {
        self.visible.iter().any(|(x, _)| *x == a)
    }
}

/// Observation that would count as differential evidence for a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedPattern {
    GoalReached,
    TierRevealed,
    RepetitionSucceeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub id: String,
    pub probe_type: ProbeType,
    /// State the plan starts from.
    pub origin: StateId,
    pub plan: ProbePlan,
    pub expected: ExpectedPattern,
    pub likelihoods: Likelihoods,
}

impl Branch {
    fn same_program(&self, other: &Branch) -> bool {
        self.origin == other.origin && self.plan == other.plan
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub round: u32,
    pub branches: Vec<Branch>,
}

impl CandidatePool {
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for b in &self.branches {
            c[b.probe_type.index()] += 1;
        }
        c
    }
}

/// Largest-remainder apportionment of `n` seats over (A, B, C) with at
/// least one seat each. Remainder ties favour A, then B, then C.
pub fn allocate(weights: &[f64; 3], n: usize) -> Result<[usize; 3], ProbeError> {
    if n < 3 {
        return Err(ProbeError::PoolTooSmall(n));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(ProbeError::InvalidWeights(*weights));
    }
    let quota = weights.map(|w| w * n as f64);
    let mut seats = quota.map(|q| (q.floor() as usize).max(1));
    while seats.iter().sum::<usize>() > n {
        let d = (0..3)
            .rev()
            .filter(|&d| seats[d] > 1)
            .max_by(|&a, &b| (seats[a] as f64 - quota[a]).total_cmp(&(seats[b] as f64 - quota[b])))
            .expect("some dimension holds more than its floor");
        seats[d] -= 1;
    }
    while seats.iter().sum::<usize>() < n {
        let mut best = 0;
        for d in 1..3 {
            if quota[d] - seats[d] as f64 > quota[best] - seats[best] as f64 {
                best = d;
            }
        }
        seats[best] += 1;
    }
    Ok(seats)
}

/// Intended actions of the trajectory from position `t_star` on, with
/// immediate retries of the same action at the same state counted once.
pub fn original_plan(traj: &Trajectory, t_star: usize) -> Vec<ActionLabel> {
    let mut out = Vec::new();
    let mut last = None;
    for s in traj.steps.iter().skip(t_star) {
        let Some(a) = s.intended.label() else { continue };
        if last != Some((s.state, a)) {
            out.push(a);
        }
        last = Some((s.state, a));
    }
    out
}

/// Builds the candidate pool for a round.
pub fn generate_branches(
    fds: &Fds,
    n: usize,
    view: &VisibleView,
    traj: &Trajectory,
    history: &[HistoryEntry],
    params: &Params,
    round: u32,
) -> Result<CandidatePool, ProbeError> {
    let mut seats = allocate(&fds.dim_weights, n)?;
    let steps = traj
        .steps
        .iter()
        .chain(history.iter().flat_map(|h| h.fragment.steps.iter()))
        .filter(|s| s.state == view.state);

    let mut regrounds = Vec::new();
    let mut tried = Vec::new();
    let mut last_failed = None;
    for s in steps {
        let Some(a) = s.intended.label() else { continue };
        tried.push(a);
        if s.diverged() && !regrounds.contains(&a) {
            regrounds.push(a);
        }
        if s.result != TransitionResult::Moved {
            last_failed = Some(a);
        }
    }
    let mut alternatives: Vec<PlanStep> = regrounds
        .iter()
        .filter(|a| view.shows(**a))
        .map(|&action| PlanStep {
            action,
            modality: Modality::Alternate,
        })
        .collect();
    alternatives.extend(
        view.visible
            .iter()
            .filter(|(a, _)| !tried.contains(a))
            .map(|&(action, _)| PlanStep {
                action,
                modality: Modality::Original,
            }),
    );

    let n_a = seats[0].min(alternatives.len());
    let surplus = seats[0] - n_a;
    seats[0] = n_a;
    if view.has_more {
        seats[1] += surplus;
    } else {
        seats[2] += surplus;
    }

    let at_fork = fds.context.replay_prefix.len() <= traj.steps.len()
        && crate::agent::resume_context(traj, fds.t_star).ok().as_ref() == Some(&fds.context);
    let mut repeat = if at_fork {
        original_plan(traj, fds.t_star)
    } else {
        Vec::new()
    };
    if repeat.is_empty() {
        repeat.extend(last_failed);
    }

    let mut branches = Vec::with_capacity(n);
    for (i, step) in alternatives.into_iter().take(n_a).enumerate() {
        branches.push(Branch {
            id: format!("A-{i}"),
            probe_type: ProbeType::A,
            origin: view.state,
            plan: ProbePlan::Alternative { steps: vec![step] },
            expected: ExpectedPattern::GoalReached,
            likelihoods: params.branch(ProbeType::A),
        });
    }
    for i in 0..seats[1] {
        branches.push(Branch {
            id: format!("B-{i}"),
            probe_type: ProbeType::B,
            origin: view.state,
            plan: ProbePlan::Expansion {
                expansions: i as u32 + 1,
                follow: None,
            },
            expected: ExpectedPattern::TierRevealed,
            likelihoods: params.branch(ProbeType::B),
        });
    }
    for i in 0..seats[2] {
        branches.push(Branch {
            id: format!("C-{i}"),
            probe_type: ProbeType::C,
            origin: view.state,
            plan: ProbePlan::Repeat {
                times: 3 + 2 * i as u32,
                plan: repeat.clone(),
            },
            expected: ExpectedPattern::RepetitionSucceeds,
            likelihoods: params.branch(ProbeType::C),
        });
    }
    Ok(CandidatePool { round, branches })
}

/// Why a candidate was dropped before ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    EmptyPlan,
    Infeasible,
    RepeatsOriginalPlan,
    AlreadyFailed,
    NoHiddenTiers,
}

/// Checks a candidate against the context, the failed plan and history.
pub fn validate_branch(
    b: &Branch,
    view: &VisibleView,
    original: &[ActionLabel],
    history: &[HistoryEntry],
) -> Result<(), Rejection> {
    if b.plan.is_empty()
        || (b.probe_type == ProbeType::C && matches!(b.plan, ProbePlan::Repeat { times, .. } if times < 2))
    {
        return Err(Rejection::EmptyPlan);
    }
    if b.origin != view.state {
        return Err(Rejection::Infeasible);
    }
    match &b.plan {
        ProbePlan::Alternative { steps } => {
            if !view.shows(steps[0].action) {
                return Err(Rejection::Infeasible);
            }
            let verbatim = steps.iter().all(|s| s.modality == Modality::Original)
                && steps.iter().map(|s| s.action).eq(original.iter().copied());
            if verbatim {
                return Err(Rejection::RepeatsOriginalPlan);
            }
        }
        ProbePlan::Expansion { .. } => {
            if !view.has_more {
                return Err(Rejection::NoHiddenTiers);
            }
        }
        ProbePlan::Repeat { plan, .. } => {
            if !view.shows(plan[0]) {
                return Err(Rejection::Infeasible);
            }
        }
    }
    if history
        .iter()
        .any(|h| h.outcome == Outcome::Fail && h.branch.same_program(b))
    {
        return Err(Rejection::AlreadyFailed);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Top-k valid branches in judge order, overrides applied.
    pub selected: Vec<Branch>,
    pub rejected: Vec<(String, Rejection)>,
}

impl Selection {
    /// No valid branch survived filtering.
    pub fn exhausted(&self) -> bool {
        self.selected.is_empty()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn select_top_k(
    pool: &CandidatePool,
    k: usize,
    fds: &Fds,
    history: &[HistoryEntry],
    judge: &dyn Judge,
    case_view: &CaseView<'_>,
    view: &VisibleView,
    p: f64,
) -> Result<Selection, ProbeError> {
    if k == 0 || k > pool.branches.len() {
        return Err(ProbeError::InvalidK {
            k,
            pool: pool.branches.len(),
        });
    }
    let original = original_plan(case_view.trajectory, fds.t_star);
    let mut valid = Vec::new();
    let mut rejected = Vec::new();
    for b in &pool.branches {
        match validate_branch(b, view, &original, history) {
            Ok(()) => valid.push(b.clone()),
            Err(r) => rejected.push((b.id.clone(), r)),
        }
    }
    if valid.is_empty() {
        return Ok(Selection {
            selected: Vec::new(),
            rejected,
        });
    }
    let ranking = judge.rank_branches(case_view, fds, &valid, p)?;
    let mut seen = vec![false; valid.len()];
    for r in &ranking {
        if r.index >= valid.len() || std::mem::replace(&mut seen[r.index], true) {
            return Err(ParseError::InvalidRanking(format!("index {} repeated or out of range", r.index)).into());
        }
    }
    let mut selected = Vec::with_capacity(k);
    for r in ranking.into_iter().take(k) {
        let mut b = valid[r.index].clone();
        if let Some((w, beta)) = r.overrides {
            b.likelihoods = b.likelihoods.overridden(w, beta)?;
        }
        selected.push(b);
    }
    Ok(Selection { selected, rejected })
}

/// Descending EIG; ties by probe type, then id.
pub fn order_by_eig(branches: &[Branch], p: f64) -> Result<Vec<Branch>, ProbeError> {
    let mut keyed = branches
        .iter()
        .map(|b| Ok((expected_information_gain(p, &b.likelihoods)?, b.clone())))
        .collect::<Result<Vec<_>, AttributionError>>()?;
    keyed.sort_by(|(ea, a), (eb, b)| {
        eb.total_cmp(ea)
            .then_with(|| a.probe_type.cmp(&b.probe_type))
            .then_with(|| a.id.cmp(&b.id))
    });
    Ok(keyed.into_iter().map(|(_, b)| b).collect())
}

/// Seeded uniform permutation.
pub fn order_random(branches: &[Branch], seed: u64) -> Vec<Branch> {
    let mut out = branches.to_vec();
    out.shuffle(&mut rng::rng_from(seed));
    out
}

/// The judge's order, unchanged.
pub fn order_fixed(branches: &[Branch]) -> Vec<Branch> {
    branches.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::{Category, FailureType, HeuristicJudge, RankedBranch};

    fn branch(id: &str, t: ProbeType) -> Branch {
        Branch {
            id: id.into(),
            probe_type: t,
            origin: StateId(0),
            plan: ProbePlan::Expansion {
                expansions: 1,
                follow: None,
            },
            expected: ExpectedPattern::GoalReached,
            likelihoods: Params::default().branch(t),
        }
    }

    #[test]
    fn original_plan_keeps_repeated_labels_on_distinct_states() {
        use crate::agent::{rollout, SouConfig};
        use crate::world::{Edge, LatentGraph, TestCase};
        let sou = SouConfig {
            grounding_err_rate: 0.0,
            observation_limit: 0,
            halluc_rate: 0.0,
            flake_retries: 3,
        };
        let chain = vec![Edge::new(0, 1, 0), Edge::new(1, 2, 0), Edge::new(2, 3, 0).tier(1)];
        let case = TestCase::labelled(0, 0, LatentGraph::new(4, chain, StateId(0), [StateId(3)]).unwrap());
        let t = rollout(&case, &sou, 10, 0).unwrap();
        assert_eq!(original_plan(&t, 0), [ActionLabel(0), ActionLabel(0)]);

        let flaky = vec![Edge::new(0, 1, 0).flaky(0.95), Edge::new(1, 2, 0).tier(1)];
        let case = TestCase::labelled(1, 1, LatentGraph::new(3, flaky, StateId(0), [StateId(2)]).unwrap());
        let t = (0..50)
            .map(|seed| rollout(&case, &sou, 10, seed).unwrap())
            .find(|t| t.steps.len() > 1)
            .unwrap();
        assert_eq!(original_plan(&t, 0), [ActionLabel(0)]);
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate(&[0.6, 0.2, 0.2], 5).unwrap(), [3, 1, 1]);
        let third = 1.0 / 3.0;
        assert_eq!(allocate(&[third, third, third], 5).unwrap(), [2, 2, 1]);
        assert_eq!(allocate(&[2.0 / 11.0, 8.0 / 11.0, 1.0 / 11.0], 5).unwrap(), [1, 3, 1]);
        assert_eq!(allocate(&[1.0, 0.0, 0.0], 3).unwrap(), [1, 1, 1]);
        assert_eq!(allocate(&[1.0, 0.0, 0.0], 7).unwrap(), [5, 1, 1]);
        assert!(matches!(
            allocate(&[0.6, 0.2, 0.2], 2),
            Err(ProbeError::PoolTooSmall(2))
        ));
    }

    #[test]
    fn eig_order_at_neutral_prior_is_c_b_a() {
        let bs = vec![
            branch("A-0", ProbeType::A),
            branch("B-0", ProbeType::B),
            branch("C-0", ProbeType::C),
        ];
        let ids: Vec<_> = order_by_eig(&bs, 0.5).unwrap().into_iter().map(|b| b.id).collect();
        assert_eq!(ids, ["C-0", "B-0", "A-0"]);
    }

    #[test]
    fn eig_ties_keep_id_order() {
        let bs = vec![
            branch("A-0", ProbeType::A),
            branch("A-1", ProbeType::A),
            branch("A-2", ProbeType::A),
        ];
        assert_eq!(order_by_eig(&bs, 0.5).unwrap(), bs);
        assert_eq!(order_by_eig(&bs[..1], 0.5).unwrap(), bs[..1].to_vec());
    }

    #[test]
    fn random_order_is_seeded() {
        let bs: Vec<_> = (0..6).map(|i| branch(&format!("A-{i}"), ProbeType::A)).collect();
        assert_eq!(order_random(&bs, 9), order_random(&bs, 9));
        assert_eq!(order_fixed(&bs), bs);
    }

    struct Scripted(Vec<(usize, f64)>);

    impl Judge for Scripted {
        fn capability(&self) -> crate::judge::JudgeCapability {
            crate::judge::JudgeCapability::Heuristic
        }
        fn fork_scores(&self, v: &CaseView<'_>) -> Result<Vec<crate::judge::ForkScore>, ParseError> {
            HeuristicJudge::default().fork_scores(v)
        }
        fn classify(&self, _v: &CaseView<'_>) -> Result<(FailureType, Category), ParseError> {
            Ok((FailureType::Agent, Category::WrongTarget))
        }
        fn rank_branches(
            &self,
            _v: &CaseView<'_>,
            _f: &Fds,
            _c: &[Branch],
            _p: f64,
        ) -> Result<Vec<RankedBranch>, ParseError> {
            Ok(self
                .0
                .iter()
                .map(|&(index, w)| RankedBranch {
                    index,
                    overrides: Some((w, 0.2)),
                })
                .collect())
        }
    }

    #[test]
    fn bad_ranking_rejected() {
        use crate::agent::{rollout, SouConfig};
        use crate::world::{Edge, TestCase};
        let g = LatentGraph::new(
            3,
            vec![
                Edge::new(0, 1, 0).broken(),
                Edge::new(1, 2, 0),
                Edge::new(0, 2, 1).tier(1),
            ],
            StateId(0),
            [StateId(2)],
        )
        .unwrap();
        let c = TestCase::labelled(0, 0, g);
        let sou = SouConfig {
            observation_limit: 0,
            flake_retries: 0,
            ..SouConfig::clean()
        };
        let t = rollout(&c, &sou, 10, 1).unwrap();
        let judge = Scripted(vec![(0, 0.9), (0, 0.8)]);
        let view = CaseView::blind(&t, &[]);
        let fds =
            crate::judge::build_fds(&view, &judge, &Default::default(), |ctx| VisibleView::of(&c.graph, ctx)).unwrap();
        let vis = VisibleView::of(&c.graph, &fds.context);
        let pool = generate_branches(&fds, 5, &vis, &t, &[], &Params::default(), 0).unwrap();
        let err = select_top_k(&pool, 3, &fds, &[], &judge, &view, &vis, 0.5);
        assert!(matches!(err, Err(ProbeError::Judge(ParseError::InvalidRanking(_)))));
        assert!(matches!(
            select_top_k(&pool, 6, &fds, &[], &judge, &view, &vis, 0.5),
            Err(ProbeError::InvalidK { .. })
        ));
    }
}
