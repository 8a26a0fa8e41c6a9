//! Simulated GUI-agent evaluator.
//!
//! The evaluator plans shortest paths over the edges it can currently see and
//! is subject to four corruption channels: persistent mis-grounding of
//! specific controls, a cap on observation expansions, verdict-time
//! hallucination, and a cap on retries of transiently failing transitions.
//! The same executor runs diagnostic probe plans from a resumed context;
//! probe outcomes are checked against the latent goal predicate directly.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::Outcome;
use crate::rng::{self, tag, SimRng};
use crate::world::{ActionLabel, StateId, TestCase};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid SOU config: {0}")]
    InvalidConfig(String),
    #[error("budget must be at least 1")]
    InvalidBudget,
    #[error("step index {t} out of range for trajectory with {len} steps")]
    IndexOutOfRange { t: usize, len: usize },
    #[error("resume context for {state} cannot be replayed: {msg}")]
    Resume { state: StateId, msg: String },
    #[error("trajectory format error at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Corruption settings for the evaluator agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SouConfig {
    /// Probability that a given control is persistently mis-grounded.
    pub grounding_err_rate: f64,
    /// Expansion steps the agent will spend before giving up.
    pub observation_limit: u32,
    /// Probability the final verdict is misreported.
    pub halluc_rate: f64,
    /// Retries of a transiently failing transition before abandoning it.
    pub flake_retries: u32,
}

impl SouConfig {
    /// No corruption: every hidden tier is explored and flaky edges are retried
    /// until they pass (bounded by the step budget).
    pub fn clean() -> Self {
        Self {
            grounding_err_rate: 0.0,
            observation_limit: u32::MAX,
            halluc_rate: 0.0,
            flake_retries: u32::MAX,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("grounding_err_rate", self.grounding_err_rate),
            ("halluc_rate", self.halluc_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SimError::InvalidConfig(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

impl Default for SouConfig {
    fn default() -> Self {
        Self {
            grounding_err_rate: 0.1,
            observation_limit: 0,
            halluc_rate: 0.05,
            flake_retries: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentAction {
    Act(ActionLabel),
    Expand,
    NoOp,
}

impl AgentAction {
    pub fn label(self) -> Option<ActionLabel> {
        match self {
            AgentAction::Act(a) => Some(a),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionResult {
    Moved,
    Flaked,
    Blocked,
    NoEffect,
}

/// What the agent sees at a state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub state: StateId,
    /// Visible actions and where they lead.
    pub visible: Vec<(ActionLabel, StateId)>,
    pub is_goal: bool,
    /// The interface shows that more content can be revealed here.
    pub has_more: bool,
}

impl Observation {
    pub fn target_of(&self, action: ActionLabel) -> Option<StateId> {
        self.visible.iter().find(|(a, _)| *a == action).map(|(_, t)| *t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: StateId,
    pub observation: Observation,
    pub intended: AgentAction,
    pub executed: AgentAction,
    pub result: TransitionResult,
    pub state_after: StateId,
}

impl Step {
    /// The transition did not land where the visible interface said it would.
    pub fn diverged(&self) -> bool {
        match self.intended {
            AgentAction::Act(a) => match self.result {
                TransitionResult::NoEffect => true,
                TransitionResult::Moved => self.observation.target_of(a) != Some(self.state_after),
                _ => false,
            },
            _ => false,
        }
    }
}

/// Ground-truth record of an injected corruption or terminal condition.
/// Only the oracle judge may read these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SouEvent {
    /// Mis-grounded control: a different action (or nothing) was executed.
    Grounding {
        step: usize,
        intended: ActionLabel,
        executed: AgentAction,
    },
    /// The agent stopped while a working continuation was still hidden.
    ObservationLimit {
        state: StateId,
    },
    /// The reported verdict disagrees with the reached state.
    Hallucination {
        reported: Verdict,
    },
    /// A transiently failing transition was abandoned after the retry cap.
    FlakeGiveUp {
        step: usize,
        action: ActionLabel,
    },
    BudgetExhausted,
    DeadEnd {
        state: StateId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutStop {
    Goal,
    DeadEnd,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub case_id: u64,
    pub start: StateId,
    pub steps: Vec<Step>,
    pub final_state: StateId,
    pub final_observation: Observation,
    pub stop: RolloutStop,
    pub verdict: Verdict,
    /// Ground-truth-only channel.
    pub annotations: Vec<SouEvent>,
}

impl Trajectory {
    /// State occupied at position `t`; position `steps.len()` is the final state.
    pub fn state_at(&self, t: usize) -> Option<StateId> {
        if t < self.steps.len() {
            Some(self.steps[t].state)
        } else if t == self.steps.len() {
            Some(self.final_state)
        } else {
            None
        }
    }

    pub fn observation_at(&self, t: usize) -> Option<&Observation> {
        if t < self.steps.len() {
            Some(&self.steps[t].observation)
        } else if t == self.steps.len() {
            Some(&self.final_observation)
        } else {
            None
        }
    }

    /// Number of resumable positions (`steps.len() + 1`).
    pub fn positions(&self) -> usize {
        self.steps.len() + 1
    }

    pub fn has_event(&self, pred: impl Fn(&SouEvent) -> bool) -> bool {
        self.annotations.iter().any(pred)
    }
}

/// A probe's own interaction record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFragment {
    pub start: StateId,
    pub steps: Vec<Step>,
    /// Step indices at which the executor was reset to the resume state.
    pub restarts: Vec<usize>,
    pub final_state: StateId,
}

impl TrajectoryFragment {
    /// Moved actions of the last contiguous segment.
    fn last_segment_moves(&self) -> Vec<ActionLabel> {
        let from = self.restarts.last().copied().unwrap_or(0);
        self.steps[from..]
            .iter()
            .filter(|s| s.result == TransitionResult::Moved)
            .filter_map(|s| s.executed.label())
            .collect()
    }

    pub fn moved_steps(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.result == TransitionResult::Moved)
            .count()
    }
}

/// Local context from which a probe resumes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResumeContext {
    pub state: StateId,
    pub visibility_expansions_done: u32,
    pub replay_prefix: Vec<ActionLabel>,
}

impl ResumeContext {
    pub fn at_start(case: &TestCase) -> Self {
        Self {
            state: case.graph.start(),
            visibility_expansions_done: 0,
            replay_prefix: Vec::new(),
        }
    }

    /// Replays the prefix on a flake-free, grounding-free executor.
    pub fn verify(&self, case: &TestCase) -> Result<(), SimError> {
        let g = &case.graph;
        let mut s = g.start();
        for a in &self.replay_prefix {
            let e = g.edge(s, *a).ok_or_else(|| SimError::Resume {
                state: self.state,
                msg: format!("no action {a} at {s}"),
            })?;
            if e.broken {
                return Err(SimError::Resume {
                    state: self.state,
                    msg: format!("action {a} at {s} is broken"),
                });
            }
            s = e.to;
        }
        if s != self.state {
            return Err(SimError::Resume {
                state: self.state,
                msg: format!("prefix ends at {s}"),
            });
        }
        Ok(())
    }

    /// Context at the end of a fragment's last segment.
    pub fn advanced_by(&self, fragment: &TrajectoryFragment) -> Self {
        let moves = fragment.last_segment_moves();
        if moves.is_empty() {
            return self.clone();
        }
        let mut prefix = self.replay_prefix.clone();
        prefix.extend(moves);
        let from = fragment.restarts.last().copied().unwrap_or(0);
        let expansions = fragment.steps[from..]
            .iter()
            .filter(|s| s.intended == AgentAction::Expand && s.state == fragment.final_state)
            .count() as u32;
        Self {
            state: fragment.final_state,
            visibility_expansions_done: expansions,
            replay_prefix: prefix,
        }
    }
}

/// Resume context at position `t_star` of a trajectory.
pub fn resume_context(traj: &Trajectory, t_star: usize) -> Result<ResumeContext, SimError> {
    let state = traj.state_at(t_star).ok_or(SimError::IndexOutOfRange {
        t: t_star,
        len: traj.steps.len(),
    })?;
    let prefix = &traj.steps[..t_star];
    Ok(ResumeContext {
        state,
        visibility_expansions_done: prefix
            .iter()
            .filter(|s| s.intended == AgentAction::Expand && s.state == state)
            .count() as u32,
        replay_prefix: prefix
            .iter()
            .filter(|s| s.result == TransitionResult::Moved)
            .filter_map(|s| s.executed.label())
            .collect(),
    })
}

/// Which controls the evaluator persistently mis-grounds, and what it
/// executes instead. Keyed by the case, so fresh rollouts share it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundingProfile {
    substitutes: BTreeMap<(StateId, ActionLabel), AgentAction>,
}

impl GroundingProfile {
    pub fn for_case(case: &TestCase, rate: f64) -> Self {
        let mut substitutes = BTreeMap::new();
        if rate <= 0.0 {
            return Self { substitutes };
        }
        let g = &case.graph;
        let mut rng = rng::rng_from(rng::derive(case.seed, &[tag::GROUNDING, case.id]));
        for e in g.edges() {
            if !rng.gen_bool(rate.min(1.0)) {
                continue;
            }
            let others: Vec<ActionLabel> = g
                .outgoing(e.from)
                .filter(|o| o.action != e.action && o.visibility_tier == 0)
                .map(|o| o.action)
                .collect();
            let sub = match others.choose(&mut rng) {
                Some(&a) if rng.gen_bool(0.5) => AgentAction::Act(a),
                _ => AgentAction::NoOp,
            };
            substitutes.insert((e.from, e.action), sub);
        }
        Self { substitutes }
    }

    pub fn substitute(&self, s: StateId, a: ActionLabel) -> Option<AgentAction> {
        self.substitutes.get(&(s, a)).copied()
    }

    pub fn len(&self) -> usize {
        self.substitutes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.substitutes.is_empty()
    }
}

/// How a plan step is grounded. `Original` reuses the evaluator's grounding,
/// including its mis-groundings; `Alternate` targets the control through a
/// different modality and always hits it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Original,
    Alternate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlanStep {
    pub action: ActionLabel,
    pub modality: Modality,
}

/// Executable program of a diagnostic branch.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbePlan {
    /// Alternative transition(s) from the resume state, then continue toward the goal.
    Alternative { steps: Vec<PlanStep> },
    /// Reveal up to `expansions` hidden tiers, optionally take `follow`, then continue.
    Expansion {
        expansions: u32,
        follow: Option<ActionLabel>,
    },
    /// Re-run the original plan from the resume state up to `times` times.
    Repeat { times: u32, plan: Vec<ActionLabel> },
}

impl ProbePlan {
    pub fn is_empty(&self) -> bool {
        match self {
            ProbePlan::Alternative { steps } => steps.is_empty(),
            ProbePlan::Expansion { expansions, .. } => *expansions == 0,
            ProbePlan::Repeat { times, plan } => *times == 0 || plan.is_empty(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeReason {
    GoalReached,
    PlanStepFailed,
    DeadEnd,
    StepCap,
    ResumeFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeExecution {
    pub fragment: TrajectoryFragment,
    pub outcome: Outcome,
    pub reason: ProbeReason,
}

#[derive(Debug, Clone, Copy)]
struct DriveLimits {
    max_steps: usize,
    expansions: u32,
    flake_retries: u32,
    frontier_search: bool,
}

enum DriveStop {
    Goal,
    DeadEnd,
    Budget,
}

struct Executor<'a> {
    case: &'a TestCase,
    profile: &'a GroundingProfile,
    rng: SimRng,
    state: StateId,
    revealed: Vec<u32>,
    dead: BTreeSet<(StateId, ActionLabel)>,
    visited: Vec<bool>,
    flakes: BTreeMap<(StateId, ActionLabel), u32>,
    heuristic: Vec<Option<u32>>,
    steps: Vec<Step>,
    events: Vec<SouEvent>,
}

impl<'a> Executor<'a> {
    fn new(case: &'a TestCase, profile: &'a GroundingProfile, seed: u64, start: StateId) -> Self {
        let n = case.graph.n_states() as usize;
        let mut visited = vec![false; n];
        visited[start.index()] = true;
        Self {
            case,
            profile,
            rng: rng::rng_from(seed),
            state: start,
            revealed: vec![0; n],
            dead: BTreeSet::new(),
            visited,
            flakes: BTreeMap::new(),
            // structural distance: the agent's rough sense of where the goal lies
            heuristic: case.graph.goal_distances(|_| true),
            steps: Vec::new(),
            events: Vec::new(),
        }
    }

    fn reset_to(&mut self, ctx: &ResumeContext) {
        self.state = ctx.state;
        self.revealed.iter_mut().for_each(|r| *r = 0);
        self.revealed[ctx.state.index()] = ctx.visibility_expansions_done;
        self.dead.clear();
        self.flakes.clear();
        self.visited.iter_mut().for_each(|v| *v = false);
        self.visited[ctx.state.index()] = true;
    }

    fn is_visible(&self, s: StateId, tier: u32) -> bool {
        tier <= self.revealed[s.index()]
    }

    fn has_more(&self, s: StateId) -> bool {
        self.case.graph.max_tier(s) > self.revealed[s.index()]
    }

    fn observe(&self, s: StateId) -> Observation {
        let g = &self.case.graph;
        Observation {
            state: s,
            visible: g
                .outgoing(s)
                .filter(|e| self.is_visible(s, e.visibility_tier))
                .map(|e| (e.action, e.to))
                .collect(),
            is_goal: g.is_goal(s),
            has_more: self.has_more(s),
        }
    }

    fn usable(&self, s: StateId) -> impl Iterator<Item = (ActionLabel, StateId)> + '_ {
        self.case
            .graph
            .outgoing(s)
            .filter(move |e| self.is_visible(s, e.visibility_tier) && !self.dead.contains(&(s, e.action)))
            .map(|e| (e.action, e.to))
    }

    /// First action of a shortest usable path from the current state to any
    /// state accepted by `target`.
    fn path_to(&self, target: impl Fn(StateId) -> bool) -> Option<ActionLabel> {
        let n = self.case.graph.n_states() as usize;
        let mut first: Vec<Option<ActionLabel>> = vec![None; n];
        let mut seen = vec![false; n];
        seen[self.state.index()] = true;
        let mut queue = VecDeque::from([self.state]);
        while let Some(s) = queue.pop_front() {
            for (a, t) in self.usable(s) {
                if seen[t.index()] {
                    continue;
                }
                seen[t.index()] = true;
                first[t.index()] = if s == self.state { Some(a) } else { first[s.index()] };
                if target(t) {
                    return first[t.index()];
                }
                queue.push_back(t);
            }
        }
        None
    }

    fn plan_to_goal(&self) -> Option<ActionLabel> {
        let g = &self.case.graph;
        self.path_to(|t| g.is_goal(t))
    }

    fn plan_to_frontier(&self) -> Option<ActionLabel> {
        self.path_to(|t| self.has_more(t))
    }

    /// Best-looking unvisited neighbour when no full visible path exists.
    fn greedy_move(&self) -> Option<ActionLabel> {
        self.usable(self.state)
            .filter(|(_, t)| !self.visited[t.index()])
            .filter_map(|(a, t)| self.heuristic[t.index()].map(|h| (h, a)))
            .min()
            .map(|(_, a)| a)
    }

    fn expand(&mut self) {
        let obs = self.observe(self.state);
        self.revealed[self.state.index()] += 1;
        self.steps.push(Step {
            state: self.state,
            observation: obs,
            intended: AgentAction::Expand,
            executed: AgentAction::Expand,
            result: TransitionResult::NoEffect,
            state_after: self.state,
        });
    }

    fn attempt(&mut self, action: ActionLabel, modality: Modality) -> TransitionResult {
        let from = self.state;
        let obs = self.observe(from);
        let executed = match (modality, self.profile.substitute(from, action)) {
            (Modality::Original, Some(sub)) => {
                self.events.push(SouEvent::Grounding {
                    step: self.steps.len(),
                    intended: action,
                    executed: sub,
                });
                sub
            }
            _ => AgentAction::Act(action),
        };
        let (result, to) = match executed {
            AgentAction::Act(a) => match self.case.graph.edge(from, a) {
                None => (TransitionResult::NoEffect, from),
                Some(e) if e.broken => (TransitionResult::Blocked, from),
                Some(e) => {
                    let flake = e.flake_prob;
                    let to = e.to;
                    if flake > 0.0 && self.rng.gen::<f64>() < flake {
                        (TransitionResult::Flaked, from)
                    } else {
                        (TransitionResult::Moved, to)
                    }
                }
            },
            _ => (TransitionResult::NoEffect, from),
        };
        self.steps.push(Step {
            state: from,
            observation: obs,
            intended: AgentAction::Act(action),
            executed,
            result,
            state_after: to,
        });
        self.state = to;
        self.visited[to.index()] = true;
        result
    }

    /// Attempts a visible action and updates the agent's beliefs about it.
    fn act(&mut self, action: ActionLabel, flake_retries: u32) {
        let from = self.state;
        let expected = self.case.graph.edge(from, action).map(|e| e.to);
        match self.attempt(action, Modality::Original) {
            TransitionResult::Moved if Some(self.state) == expected => {}
            TransitionResult::Flaked => {
                let n = self.flakes.entry((from, action)).or_insert(0);
                *n += 1;
                if *n > flake_retries {
                    self.dead.insert((from, action));
                    self.events.push(SouEvent::FlakeGiveUp {
                        step: self.steps.len() - 1,
                        action,
                    });
                }
            }
            _ => {
                self.dead.insert((from, action));
            }
        }
    }

    fn drive(&mut self, limits: DriveLimits) -> DriveStop {
        let mut expansions_left = limits.expansions;
        let mut taken = 0usize;
        loop {
            if self.case.graph.is_goal(self.state) {
                return DriveStop::Goal;
            }
            if taken >= limits.max_steps {
                return DriveStop::Budget;
            }
            taken += 1;
            if let Some(a) = self.plan_to_goal() {
                self.act(a, limits.flake_retries);
            } else if expansions_left > 0 && self.has_more(self.state) {
                expansions_left -= 1;
                self.expand();
            } else if let Some(a) = (limits.frontier_search && expansions_left > 0)
                .then(|| self.plan_to_frontier())
                .flatten()
            {
                self.act(a, limits.flake_retries);
            } else if let Some(a) = self.greedy_move() {
                self.act(a, limits.flake_retries);
            } else {
                return DriveStop::DeadEnd;
            }
        }
    }

    /// A working continuation existed behind an unrevealed tier at a visited state.
    fn hidden_continuation_missed(&self) -> bool {
        let g = &self.case.graph;
        let dist = g.working_distances();
        g.edges().iter().any(|e| {
            self.visited[e.from.index()]
                && !e.broken
                && !self.is_visible(e.from, e.visibility_tier)
                && dist[e.to.index()].is_some()
        })
    }
}

/// Runs the evaluator agent on a case and records its trajectory and verdict.
pub fn rollout(case: &TestCase, sou: &SouConfig, budget: usize, seed: u64) -> Result<Trajectory, SimError> {
    if budget == 0 {
        return Err(SimError::InvalidBudget);
    }
    sou.validate()?;
    let profile = GroundingProfile::for_case(case, sou.grounding_err_rate);
    rollout_with_profile(case, sou, &profile, budget, seed)
}

pub fn rollout_with_profile(
    case: &TestCase,
    sou: &SouConfig,
    profile: &GroundingProfile,
    budget: usize,
    seed: u64,
) -> Result<Trajectory, SimError> {
    if budget == 0 {
        return Err(SimError::InvalidBudget);
    }
    let start = case.graph.start();
    let mut ex = Executor::new(case, profile, seed, start);
    let stop = match ex.drive(DriveLimits {
        max_steps: budget,
        expansions: sou.observation_limit,
        flake_retries: sou.flake_retries,
        frontier_search: true,
    }) {
        DriveStop::Goal => RolloutStop::Goal,
        DriveStop::DeadEnd => {
            ex.events.push(SouEvent::DeadEnd { state: ex.state });
            if ex.hidden_continuation_missed() {
                ex.events.push(SouEvent::ObservationLimit { state: ex.state });
            }
            RolloutStop::DeadEnd
        }
        DriveStop::Budget => {
            ex.events.push(SouEvent::BudgetExhausted);
            RolloutStop::Budget
        }
    };
    let reached = case.graph.is_goal(ex.state);
    let mut verdict = if reached { Verdict::Pass } else { Verdict::Fail };
    let draw: f64 = ex.rng.gen();
    if draw < sou.halluc_rate {
        verdict = if reached { Verdict::Fail } else { Verdict::Pass };
        ex.events.push(SouEvent::Hallucination { reported: verdict });
    }
    let final_observation = ex.observe(ex.state);
    Ok(Trajectory {
        case_id: case.id,
        start,
        steps: ex.steps,
        final_state: ex.state,
        final_observation,
        stop,
        verdict,
        annotations: ex.events,
    })
}

/// Execution settings shared by every probe of a case.
#[derive(Debug, Clone)]
pub struct ProbeSettings {
    pub sou: SouConfig,
    pub profile: GroundingProfile,
    /// Step cap for the continuation after the explicit plan.
    pub max_steps: usize,
}

impl ProbeSettings {
    pub fn new(case: &TestCase, sou: &SouConfig, max_steps: usize) -> Self {
        Self {
            sou: sou.clone(),
            profile: GroundingProfile::for_case(case, sou.grounding_err_rate),
            max_steps: max_steps.max(1),
        }
    }
}

/// Executes a probe plan from a resume context. The outcome is a verified
/// success iff the fragment ends in a goal state.
pub fn execute_probe(
    case: &TestCase,
    plan: &ProbePlan,
    ctx: &ResumeContext,
    settings: &ProbeSettings,
    seed: u64,
) -> ProbeExecution {
    if ctx.verify(case).is_err() {
        return ProbeExecution {
            fragment: TrajectoryFragment {
                start: ctx.state,
                steps: Vec::new(),
                restarts: Vec::new(),
                final_state: ctx.state,
            },
            outcome: Outcome::Fail,
            reason: ProbeReason::ResumeFailed,
        };
    }
    let mut ex = Executor::new(case, &settings.profile, seed, ctx.state);
    ex.reset_to(ctx);
    let sou = &settings.sou;
    let continuation = DriveLimits {
        max_steps: settings.max_steps,
        expansions: sou.observation_limit,
        flake_retries: sou.flake_retries,
        frontier_search: false,
    };
    let mut restarts = Vec::new();

    let run_steps = |ex: &mut Executor, steps: &mut dyn Iterator<Item = PlanStep>| -> bool {
        for st in steps {
            let expected = ex.case.graph.edge(ex.state, st.action).map(|e| e.to);
            let r = ex.attempt(st.action, st.modality);
            if r != TransitionResult::Moved || Some(ex.state) != expected {
                return false;
            }
        }
        true
    };

    let reason = match plan {
        ProbePlan::Alternative { steps } => {
            if run_steps(&mut ex, &mut steps.iter().copied()) {
                stop_reason(ex.drive(continuation))
            } else {
                ProbeReason::PlanStepFailed
            }
        }
        ProbePlan::Expansion { expansions, follow } => {
            let mut used = 0;
            while used < *expansions && ex.has_more(ex.state) {
                ex.expand();
                used += 1;
            }
            let ok = match follow {
                Some(a) => run_steps(
                    &mut ex,
                    &mut std::iter::once(PlanStep {
                        action: *a,
                        modality: Modality::Original,
                    }),
                ),
                None => true,
            };
            if ok {
                stop_reason(ex.drive(DriveLimits {
                    expansions: expansions - used,
                    frontier_search: true,
                    ..continuation
                }))
            } else {
                ProbeReason::PlanStepFailed
            }
        }
        ProbePlan::Repeat { times, plan } => {
            let mut reason = ProbeReason::PlanStepFailed;
            for i in 0..*times {
                if i > 0 {
                    restarts.push(ex.steps.len());
                    ex.reset_to(ctx);
                }
                let mut it = plan.iter().map(|&action| PlanStep {
                    action,
                    modality: Modality::Original,
                });
                if !run_steps(&mut ex, &mut it) {
                    reason = ProbeReason::PlanStepFailed;
                    continue;
                }
                reason = stop_reason(ex.drive(continuation));
                if reason == ProbeReason::GoalReached {
                    break;
                }
            }
            reason
        }
    };
    let outcome = if case.graph.is_goal(ex.state) {
        Outcome::VerifiedSuccess
    } else {
        Outcome::Fail
    };
    ProbeExecution {
        fragment: TrajectoryFragment {
            start: ctx.state,
            steps: ex.steps,
            restarts,
            final_state: ex.state,
        },
        outcome,
        reason,
    }
}

fn stop_reason(stop: DriveStop) -> ProbeReason {
    match stop {
        DriveStop::Goal => ProbeReason::GoalReached,
        DriveStop::DeadEnd => ProbeReason::DeadEnd,
        DriveStop::Budget => ProbeReason::StepCap,
    }
}

pub const TRAJECTORY_SCHEMA: &str = "trajectory/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum TrajectoryRecord {
    Trajectory {
        schema_id: String,
        case_id: u64,
        start: StateId,
        n_steps: usize,
        final_state: StateId,
        final_observation: Observation,
        stop: RolloutStop,
        verdict: Verdict,
    },
    Step {
        index: usize,
        #[serde(flatten)]
        step: Step,
    },
    Annotation {
        channel: String,
        #[serde(flatten)]
        event: SouEvent,
    },
}

pub const GROUND_TRUTH_CHANNEL: &str = "ground_truth_only";

/// Writes a trajectory as one header record, one record per step and one
/// record per annotation on the ground-truth-only channel.
pub fn write_trajectory<W: Write>(out: &mut W, traj: &Trajectory) -> Result<(), SimError> {
    let mut line = |r: &TrajectoryRecord| -> Result<(), SimError> {
        serde_json::to_writer(&mut *out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    line(&TrajectoryRecord::Trajectory {
        schema_id: TRAJECTORY_SCHEMA.into(),
        case_id: traj.case_id,
        start: traj.start,
        n_steps: traj.steps.len(),
        final_state: traj.final_state,
        final_observation: traj.final_observation.clone(),
        stop: traj.stop,
        verdict: traj.verdict,
    })?;
    for (index, step) in traj.steps.iter().enumerate() {
        line(&TrajectoryRecord::Step {
            index,
            step: step.clone(),
        })?;
    }
    for event in &traj.annotations {
        line(&TrajectoryRecord::Annotation {
            channel: GROUND_TRUTH_CHANNEL.into(),
            event: event.clone(),
        })?;
    }
    Ok(())
}

/// Reads a single trajectory. Annotations are dropped unless `with_annotations`.
pub fn read_trajectory<R: BufRead>(input: R, with_annotations: bool) -> Result<Trajectory, SimError> {
    let mut traj: Option<Trajectory> = None;
    let mut expected = 0;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fmt_err = |msg: String| SimError::Format { line: i + 1, msg };
        let rec: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| fmt_err(e.to_string()))?;
        match rec {
            TrajectoryRecord::Trajectory {
                schema_id,
                case_id,
                start,
                n_steps,
                final_state,
                final_observation,
                stop,
                verdict,
            } => {
                if schema_id != TRAJECTORY_SCHEMA {
                    return Err(fmt_err(format!("unsupported schema {schema_id}")));
                }
                expected = n_steps;
                traj = Some(Trajectory {
                    case_id,
                    start,
                    steps: Vec::with_capacity(n_steps),
                    final_state,
                    final_observation,
                    stop,
                    verdict,
                    annotations: Vec::new(),
                });
            }
            TrajectoryRecord::Step { index, step } => {
                let t = traj.as_mut().ok_or_else(|| fmt_err("step before header".into()))?;
                if index != t.steps.len() {
                    return Err(fmt_err(format!("step {index} out of order")));
                }
                t.steps.push(step);
            }
            TrajectoryRecord::Annotation { channel, event } => {
                let t = traj
                    .as_mut()
                    .ok_or_else(|| fmt_err("annotation before header".into()))?;
                if channel != GROUND_TRUTH_CHANNEL {
                    return Err(fmt_err(format!("unknown channel {channel}")));
                }
                if with_annotations {
                    t.annotations.push(event);
                }
            }
        }
    }
    let t = traj.ok_or(SimError::Format {
        line: 0,
        msg: "empty input".into(),
    })?;
    if t.steps.len() != expected {
        return Err(SimError::Format {
            line: 0,
            msg: format!("expected {expected} steps, found {}", t.steps.len()),
        });
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Edge, LatentGraph};

    fn case(n: u32, edges: Vec<Edge>, goal: u32) -> TestCase {
        TestCase::labelled(0, 0, LatentGraph::new(n, edges, StateId(0), [StateId(goal)]).unwrap())
    }

    #[test]
    fn resume_context_bounds() {
        let c = case(3, vec![Edge::new(0, 1, 0), Edge::new(1, 2, 0)], 2);
        let t = rollout(&c, &SouConfig::clean(), 10, 1).unwrap();
        assert_eq!(t.steps.len(), 2);
        let ctx0 = resume_context(&t, 0).unwrap();
        assert_eq!(ctx0.state, StateId(0));
        assert!(ctx0.replay_prefix.is_empty());
        let last = resume_context(&t, 2).unwrap();
        assert_eq!(last.state, t.final_state);
        assert!(last.verify(&c).is_ok());
        assert!(matches!(resume_context(&t, 3), Err(SimError::IndexOutOfRange { .. })));
    }

    #[test]
    fn zero_budget_rejected() {
        let c = case(2, vec![Edge::new(0, 1, 0)], 1);
        assert!(matches!(
            rollout(&c, &SouConfig::clean(), 0, 1),
            Err(SimError::InvalidBudget)
        ));
    }

    #[test]
    fn unreplayable_context_is_a_failed_probe() {
        let c = case(2, vec![Edge::new(0, 1, 0)], 1);
        let ctx = ResumeContext {
            state: StateId(1),
            visibility_expansions_done: 0,
            replay_prefix: vec![ActionLabel(7)],
        };
        let settings = ProbeSettings::new(&c, &SouConfig::clean(), 10);
        let plan = ProbePlan::Expansion {
            expansions: 1,
            follow: None,
        };
        let ex = execute_probe(&c, &plan, &ctx, &settings, 3);
        assert_eq!(ex.outcome, Outcome::Fail);
        assert_eq!(ex.reason, ProbeReason::ResumeFailed);
    }

    #[test]
    fn flake_retry_cap_emits_give_up() {
        // only route is an edge that flakes on almost every attempt
        let c = case(2, vec![Edge::new(0, 1, 0).flaky(0.999)], 1);
        let sou = SouConfig {
            grounding_err_rate: 0.0,
            observation_limit: 0,
            halluc_rate: 0.0,
            flake_retries: 2,
        };
        let t = rollout(&c, &sou, 20, 5).unwrap();
        assert_eq!(t.verdict, Verdict::Fail);
        assert_eq!(t.steps.len(), 3);
        assert!(t.has_event(|e| matches!(e, SouEvent::FlakeGiveUp { .. })));
    }

    #[test]
    fn trajectory_roundtrip_hides_annotations_on_request() {
        let c = case(2, vec![Edge::new(0, 1, 0).flaky(0.999)], 1);
        let sou = SouConfig {
            flake_retries: 0,
            observation_limit: 0,
            ..SouConfig::clean()
        };
        let t = rollout(&c, &sou, 5, 2).unwrap();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &t).unwrap();
        assert_eq!(read_trajectory(buf.as_slice(), true).unwrap(), t);
        let blind = read_trajectory(buf.as_slice(), false).unwrap();
        assert!(blind.annotations.is_empty());
        assert_eq!(blind.steps, t.steps);
    }
}
