//! Latent state-transition graphs, test cases and the scenario generator.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, tag};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("infeasible scenario: {0}")]
    Infeasible(String),
    #[error("case {case_id}: stored label {stored:?} but reachability says {computed:?}")]
    LabelMismatch {
        case_id: u64,
        stored: GroundTruth,
        computed: GroundTruth,
    },
    #[error("graph format error at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(pub u32);

impl StateId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// Action label, unique among the outgoing edges of one state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionLabel(pub u32);

impl fmt::Display for ActionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: StateId,
    pub to: StateId,
    pub action: ActionLabel,
    /// Number of expansion steps at `from` needed before the edge is visible.
    pub visibility_tier: u32,
    /// Per-attempt transient failure probability.
    pub flake_prob: f64,
    /// Permanently non-functional.
    pub broken: bool,
}

impl Edge {
    pub fn new(from: u32, to: u32, action: u32) -> Self {
        Self {
            from: StateId(from),
            to: StateId(to),
            action: ActionLabel(action),
            visibility_tier: 0,
            flake_prob: 0.0,
            broken: false,
        }
    }

    pub fn tier(mut self, tier: u32) -> Self {
        self.visibility_tier = tier;
        self
    }

    pub fn flaky(mut self, p: f64) -> Self {
        self.flake_prob = p;
        self
    }

    pub fn broken(mut self) -> Self {
        self.broken = true;
        self
    }
}

/// Hidden state-transition graph with a start state and goal states.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGraph {
    n_states: u32,
    edges: Vec<Edge>,
    start: StateId,
    goal_states: BTreeSet<StateId>,
    out: Vec<Vec<usize>>,
}

impl LatentGraph {
    pub fn new(
        n_states: u32,
        edges: Vec<Edge>,
        start: StateId,
        goal_states: impl IntoIterator<Item = StateId>,
    ) -> Result<Self, WorldError> {
        let bad = |m: String| Err(WorldError::InvalidGraph(m));
        if n_states == 0 {
            return bad("graph has no states".into());
        }
        if start.0 >= n_states {
            return bad(format!("start {start} not a state"));
        }
        let goal_states: BTreeSet<StateId> = goal_states.into_iter().collect();
        if let Some(g) = goal_states.iter().find(|g| g.0 >= n_states) {
            return bad(format!("goal {g} not a state"));
        }
        let mut out = vec![Vec::new(); n_states as usize];
        let mut seen = BTreeSet::new();
        for (i, e) in edges.iter().enumerate() {
            if e.from.0 >= n_states || e.to.0 >= n_states {
                return bad(format!(
                    "edge {}->{} has an endpoint outside the state set",
                    e.from, e.to
                ));
            }
            if !seen.insert((e.from, e.action)) {
                return bad(format!("action {} repeated at {}", e.action, e.from));
            }
            if !(0.0..1.0).contains(&e.flake_prob) {
                return bad(format!("flake_prob {} outside [0, 1)", e.flake_prob));
            }
            out[e.from.index()].push(i);
        }
        for list in &mut out {
            list.sort_by_key(|&i| edges[i].action);
        }
        Ok(Self {
            n_states,
            edges,
            start,
            goal_states,
            out,
        })
    }

    pub fn n_states(&self) -> u32 {
        self.n_states
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> {
        (0..self.n_states).map(StateId)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn start(&self) -> StateId {
        self.start
    }

    pub fn goal_states(&self) -> &BTreeSet<StateId> {
        &self.goal_states
    }

    pub fn is_goal(&self, s: StateId) -> bool {
        self.goal_states.contains(&s)
    }

    /// Outgoing edges of `s`, ordered by action label.
    pub fn outgoing(&self, s: StateId) -> impl Iterator<Item = &Edge> + '_ {
        self.out
            .get(s.index())
            .into_iter()
            .flatten()
            .map(move |&i| &self.edges[i])
    }

    pub fn edge(&self, from: StateId, action: ActionLabel) -> Option<&Edge> {
        self.outgoing(from).find(|e| e.action == action)
    }

    pub fn max_tier(&self, s: StateId) -> u32 {
        self.outgoing(s).map(|e| e.visibility_tier).max().unwrap_or(0)
    }

    /// Shortest distance (in edges) from every state to the nearest goal,
    /// using only edges accepted by `usable`.
    pub fn goal_distances(&self, usable: impl Fn(&Edge) -> bool) -> Vec<Option<u32>> {
        let n = self.n_states as usize;
        let mut incoming = vec![Vec::new(); n];
        for e in self.edges.iter().filter(|e| usable(e)) {
            incoming[e.to.index()].push(e.from);
        }
        let mut dist = vec![None; n];
        let mut queue = VecDeque::new();
        for &g in &self.goal_states {
            dist[g.index()] = Some(0);
            queue.push_back(g);
        }
        while let Some(s) = queue.pop_front() {
            let d = dist[s.index()].unwrap_or(0);
            for &prev in &incoming[s.index()] {
                if dist[prev.index()].is_none() {
                    dist[prev.index()] = Some(d + 1);
                    queue.push_back(prev);
                }
            }
        }
        dist
    }

    /// Distances over working (non-broken) edges, ignoring visibility and flakiness.
    pub fn working_distances(&self) -> Vec<Option<u32>> {
        self.goal_distances(|e| !e.broken)
    }

    /// True iff a goal is reachable from `from` over non-broken edges.
    pub fn reachable_from(&self, from: StateId) -> bool {
        let mut seen = vec![false; self.n_states as usize];
        let mut queue = VecDeque::from([from]);
        seen[from.index()] = true;
        while let Some(s) = queue.pop_front() {
            if self.is_goal(s) {
                return true;
            }
            for e in self.outgoing(s).filter(|e| !e.broken) {
                if !seen[e.to.index()] {
                    seen[e.to.index()] = true;
                    queue.push_back(e.to);
                }
            }
        }
        false
    }
}

/// Breadth-first goal reachability from the start over non-broken edges.
/// Visibility tiers and flakiness are ignored: flaky edges are eventually passable.
pub fn reachable(graph: &LatentGraph) -> bool {
    graph.reachable_from(graph.start())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    /// The goal is reachable; any failure is on the evaluator side.
    AgentFailPossible,
    /// The goal is genuinely unreachable.
    EnvFail,
}

impl GroundTruth {
    pub fn from_reachable(reachable: bool) -> Self {
        if reachable {
            GroundTruth::AgentFailPossible
        } else {
            GroundTruth::EnvFail
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestCase {
    pub id: u64,
    /// Seed the case was generated from; also keys the evaluator's grounding profile.
    pub seed: u64,
    pub graph: LatentGraph,
    pub ground_truth: GroundTruth,
}

impl TestCase {
    /// Builds a case, checking the stored label against reachability.
    pub fn new(id: u64, seed: u64, graph: LatentGraph, ground_truth: GroundTruth) -> Result<Self, WorldError> {
        let computed = GroundTruth::from_reachable(reachable(&graph));
        if computed != ground_truth {
            return Err(WorldError::LabelMismatch {
                case_id: id,
                stored: ground_truth,
                computed,
            });
        }
        Ok(Self {
            id,
            seed,
            graph,
            ground_truth,
        })
    }

    /// Builds a case labelled from reachability.
    pub fn labelled(id: u64, seed: u64, graph: LatentGraph) -> Self {
        let ground_truth = GroundTruth::from_reachable(reachable(&graph));
        Self {
            id,
            seed,
            graph,
            ground_truth,
        }
    }
}

/// Recomputes the label and checks it against the stored one.
pub fn ground_truth_label(case: &TestCase) -> Result<GroundTruth, WorldError> {
    let computed = GroundTruth::from_reachable(reachable(&case.graph));
    if computed != case.ground_truth {
        return Err(WorldError::LabelMismatch {
            case_id: case.id,
            stored: case.ground_truth,
            computed,
        });
    }
    Ok(computed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_states: u32,
    /// Mean out-degree.
    pub branching: f64,
    /// Length of the guaranteed start-to-goal route.
    pub goal_depth: u32,
    pub hidden_edge_fraction: f64,
    pub flaky_edge_fraction: f64,
    /// Fraction of off-route edges that are broken as decoys.
    pub broken_cut_fraction: f64,
    pub env_fail_ratio: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_states: 14,
            branching: 2.0,
            goal_depth: 5,
            hidden_edge_fraction: 0.15,
            flaky_edge_fraction: 0.1,
            broken_cut_fraction: 0.05,
            env_fail_ratio: 0.3,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::InvalidConfig(m));
        if self.n_states < 2 {
            return bad(format!("n_states = {} < 2", self.n_states));
        }
        if self.goal_depth == 0 {
            return bad("goal_depth must be at least 1".into());
        }
        if !(self.branching.is_finite() && self.branching >= 1.0) {
            return bad(format!("branching = {} < 1", self.branching));
        }
        for (name, v) in [
            ("hidden_edge_fraction", self.hidden_edge_fraction),
            ("flaky_edge_fraction", self.flaky_edge_fraction),
            ("broken_cut_fraction", self.broken_cut_fraction),
            ("env_fail_ratio", self.env_fail_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Generates a layered DAG with back edges. Layer 0 holds the start; the goal
/// sits at layer `goal_depth` at the end of a guaranteed route. Forward edges
/// only advance one layer, so breaking every edge into one layer is a full
/// separator between start and goal.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<TestCase, WorldError> {
    generate_case(cfg.seed, cfg)
}

/// [`generate_scenario`] with an explicit case id.
pub fn generate_case(id: u64, cfg: &ScenarioConfig) -> Result<TestCase, WorldError> {
    cfg.validate()?;
    let depth = cfg.goal_depth;
    if depth + 1 > cfg.n_states {
        return Err(WorldError::Infeasible(format!(
            "goal_depth {} needs at least {} states, have {}",
            depth,
            depth + 1,
            cfg.n_states
        )));
    }
    let mut rng = rng::rng_from(rng::derive(cfg.seed, &[tag::CASE]));
    let n = cfg.n_states as usize;

    // State 0 is the start; the rest get shuffled ids so labels carry no route hint.
    let mut ids: Vec<u32> = (1..cfg.n_states).collect();
    ids.shuffle(&mut rng);
    let route: Vec<u32> = std::iter::once(0)
        .chain(ids[..depth as usize].iter().copied())
        .collect();
    let goal = route[depth as usize];

    let mut layer = vec![0u32; n];
    for (i, &s) in route.iter().enumerate() {
        layer[s as usize] = i as u32;
    }
    for &s in &ids[depth as usize..] {
        layer[s as usize] = rng.gen_range(1..=depth);
    }
    let mut by_layer: Vec<Vec<u32>> = vec![Vec::new(); depth as usize + 1];
    for s in 0..cfg.n_states {
        by_layer[layer[s as usize] as usize].push(s);
    }

    let mut pairs: BTreeSet<(u32, u32)> = BTreeSet::new();
    let route_pairs: BTreeSet<(u32, u32)> = route.windows(2).map(|w| (w[0], w[1])).collect();
    pairs.extend(route_pairs.iter().copied());

    let whole = cfg.branching.floor() as u32;
    let frac = cfg.branching - cfg.branching.floor();
    for s in 0..cfg.n_states {
        if s == goal {
            continue;
        }
        let want = whole + u32::from(rng.gen_bool(frac));
        let have = pairs.range((s, 0)..=(s, u32::MAX)).count() as u32;
        let mut attempts = 0;
        let mut added = have;
        while added < want && attempts < 4 * want + 4 {
            attempts += 1;
            let l = layer[s as usize] as usize;
            let r: f64 = rng.gen();
            let pool: &[u32] = if r < 0.8 && l < depth as usize {
                &by_layer[l + 1]
            } else if r < 0.9 {
                &by_layer[l]
            } else if l > 0 {
                &by_layer[rng.gen_range(0..l)]
            } else {
                &by_layer[l]
            };
            let Some(&t) = pool.choose(&mut rng) else { continue };
            if t == s || !pairs.insert((s, t)) {
                continue;
            }
            added += 1;
        }
    }

    let mut edges = Vec::with_capacity(pairs.len());
    let mut current: Option<u32> = None;
    let mut group: Vec<u32> = Vec::new();
    let flush = |from: u32, group: &mut Vec<u32>, rng: &mut rng::SimRng, edges: &mut Vec<Edge>| {
        group.shuffle(rng);
        for (a, &to) in group.iter().enumerate() {
            edges.push(Edge::new(from, to, a as u32));
        }
        group.clear();
    };
    for &(s, t) in &pairs {
        if current != Some(s) {
            if let Some(prev) = current {
                flush(prev, &mut group, &mut rng, &mut edges);
            }
            current = Some(s);
        }
        group.push(t);
    }
    if let Some(prev) = current {
        flush(prev, &mut group, &mut rng, &mut edges);
    }

    for e in &mut edges {
        if rng.gen_bool(cfg.hidden_edge_fraction) {
            e.visibility_tier = if rng.gen_bool(0.7) { 1 } else { 2 };
        }
        if rng.gen_bool(cfg.flaky_edge_fraction) {
            e.flake_prob = rng.gen_range(0.3..0.9);
        }
        if !route_pairs.contains(&(e.from.0, e.to.0)) && rng.gen_bool(cfg.broken_cut_fraction) {
            e.broken = true;
        }
    }

    if rng.gen_bool(cfg.env_fail_ratio) {
        let cut = rng.gen_range(1..=depth);
        for e in &mut edges {
            if layer[e.to.index()] == cut && layer[e.from.index()] + 1 == cut {
                e.broken = true;
            }
        }
    } else {
        add_escapes(&mut edges, &route, cfg.n_states, &mut rng);
    }

    let graph = LatentGraph::new(cfg.n_states, edges, StateId(0), [StateId(goal)])?;
    Ok(TestCase::labelled(id, cfg.seed, graph))
}

/// Gives every state reachable over working edges that has no working route
/// to the goal a visible escape edge onto the guaranteed route.
fn add_escapes(edges: &mut Vec<Edge>, route: &[u32], n_states: u32, rng: &mut rng::SimRng) {
    let n = n_states as usize;
    let goal = *route.last().expect("route has a goal");
    let search = |from: u32, forward: bool| {
        let mut seen = vec![false; n];
        seen[from as usize] = true;
        let mut queue = VecDeque::from([from]);
        while let Some(s) = queue.pop_front() {
            for e in edges.iter().filter(|e| !e.broken) {
                let (a, b) = if forward {
                    (e.from.0, e.to.0)
                } else {
                    (e.to.0, e.from.0)
                };
                if a == s && !seen[b as usize] {
                    seen[b as usize] = true;
                    queue.push_back(b);
                }
            }
        }
        seen
    };
    let reached = search(0, true);
    let alive = search(goal, false);
    for s in 0..n_states {
        if reached[s as usize] && !alive[s as usize] {
            let to = route[rng.gen_range(1..route.len())];
            let action = edges.iter().filter(|e| e.from.0 == s).count() as u32;
            edges.push(Edge::new(s, to, action));
        }
    }
}

pub const GRAPH_SCHEMA: &str = "latent-graph/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
enum GraphRecord {
    Graph {
        schema_id: String,
        case_id: u64,
        seed: u64,
        ground_truth: GroundTruth,
        n_states: u32,
        n_edges: usize,
        start: StateId,
    },
    State {
        id: StateId,
        goal: bool,
    },
    Edge(Edge),
}

/// Writes one case: a header record, then one record per state and per edge.
pub fn write_case<W: Write>(out: &mut W, case: &TestCase) -> Result<(), WorldError> {
    let g = &case.graph;
    let mut line = |r: &GraphRecord| -> Result<(), WorldError> {
        serde_json::to_writer(&mut *out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    line(&GraphRecord::Graph {
        schema_id: GRAPH_SCHEMA.to_string(),
        case_id: case.id,
        seed: case.seed,
        ground_truth: case.ground_truth,
        n_states: g.n_states(),
        n_edges: g.edges().len(),
        start: g.start(),
    })?;
    for s in g.states() {
        line(&GraphRecord::State {
            id: s,
            goal: g.is_goal(s),
        })?;
    }
    for e in g.edges() {
        line(&GraphRecord::Edge(e.clone()))?;
    }
    Ok(())
}

pub fn write_suite<W: Write>(out: &mut W, cases: &[TestCase]) -> Result<(), WorldError> {
    for c in cases {
        write_case(out, c)?;
    }
    Ok(())
}

/// Reads every case in a suite file written by [`write_suite`].
pub fn read_suite<R: BufRead>(input: R) -> Result<Vec<TestCase>, WorldError> {
    struct Pending {
        case_id: u64,
        seed: u64,
        ground_truth: GroundTruth,
        n_states: u32,
        n_edges: usize,
        start: StateId,
        states: Vec<(StateId, bool)>,
        edges: Vec<Edge>,
    }
    fn finish(p: Pending, line: usize) -> Result<TestCase, WorldError> {
        if p.states.len() != p.n_states as usize || p.edges.len() != p.n_edges {
            return Err(WorldError::Format {
                line,
                msg: format!("case {} truncated", p.case_id),
            });
        }
        let goals = p.states.iter().filter(|(_, g)| *g).map(|(s, _)| *s);
        let graph = LatentGraph::new(p.n_states, p.edges, p.start, goals.collect::<Vec<_>>())?;
        TestCase::new(p.case_id, p.seed, graph, p.ground_truth)
    }

    let mut cases = Vec::new();
    let mut pending: Option<Pending> = None;
    let mut lineno = 0;
    for line in input.lines() {
        lineno += 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphRecord = serde_json::from_str(&line).map_err(|e| WorldError::Format {
            line: lineno,
            msg: e.to_string(),
        })?;
        match rec {
            GraphRecord::Graph {
                schema_id,
                case_id,
                seed,
                ground_truth,
                n_states,
                n_edges,
                start,
            } => {
                if schema_id != GRAPH_SCHEMA {
                    return Err(WorldError::Format {
                        line: lineno,
                        msg: format!("unsupported schema {schema_id}, expected {GRAPH_SCHEMA}"),
                    });
                }
                if let Some(p) = pending.take() {
                    cases.push(finish(p, lineno)?);
                }
                pending = Some(Pending {
                    case_id,
                    seed,
                    ground_truth,
                    n_states,
                    n_edges,
                    start,
                    states: Vec::new(),
                    edges: Vec::new(),
                });
            }
            GraphRecord::State { id, goal } => match pending.as_mut() {
                Some(p) => p.states.push((id, goal)),
                None => {
                    return Err(WorldError::Format {
                        line: lineno,
                        msg: "state record before header".into(),
                    })
                }
            },
            GraphRecord::Edge(e) => match pending.as_mut() {
                Some(p) => p.edges.push(e),
                None => {
                    return Err(WorldError::Format {
                        line: lineno,
                        msg: "edge record before header".into(),
                    })
                }
            },
        }
    }
    if let Some(p) = pending.take() {
        cases.push(finish(p, lineno)?);
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(broken: bool) -> LatentGraph {
        let e = Edge::new(0, 1, 0);
        let e = if broken { e.broken() } else { e };
        LatentGraph::new(2, vec![e], StateId(0), [StateId(1)]).unwrap()
    }

    #[test]
    fn reachability_basics() {
        assert!(reachable(&two_state(false)));
        assert!(!reachable(&two_state(true)));
    }

    #[test]
    fn hidden_path_still_reachable() {
        // diamond: 0 -> 1 -> 3 with 1->3 broken, 0 -> 2 -> 3 with 0->2 at tier 2
        let g = LatentGraph::new(
            4,
            vec![
                Edge::new(0, 1, 0),
                Edge::new(0, 2, 1).tier(2),
                Edge::new(1, 3, 0).broken(),
                Edge::new(2, 3, 0),
            ],
            StateId(0),
            [StateId(3)],
        )
        .unwrap();
        assert!(reachable(&g));
    }

    #[test]
    fn graph_validation() {
        assert!(LatentGraph::new(2, vec![Edge::new(0, 2, 0)], StateId(0), [StateId(1)]).is_err());
        assert!(LatentGraph::new(
            2,
            vec![Edge::new(0, 1, 0), Edge::new(0, 0, 0)],
            StateId(0),
            [StateId(1)]
        )
        .is_err());
        assert!(LatentGraph::new(2, vec![Edge::new(0, 1, 0).flaky(1.0)], StateId(0), [StateId(1)]).is_err());
        assert!(LatentGraph::new(2, vec![], StateId(2), [StateId(1)]).is_err());
    }

    #[test]
    fn label_checked_at_construction() {
        assert!(TestCase::new(1, 0, two_state(true), GroundTruth::AgentFailPossible).is_err());
        let c = TestCase::new(1, 0, two_state(true), GroundTruth::EnvFail).unwrap();
        assert_eq!(ground_truth_label(&c).unwrap(), GroundTruth::EnvFail);
        let c = TestCase::labelled(2, 0, two_state(false));
        assert_eq!(ground_truth_label(&c).unwrap(), GroundTruth::AgentFailPossible);
    }

    #[test]
    fn generator_forced_ratios() {
        for seed in 0..20 {
            let cfg = ScenarioConfig {
                env_fail_ratio: 1.0,
                seed,
                ..Default::default()
            };
            let c = generate_scenario(&cfg).unwrap();
            assert_eq!(c.ground_truth, GroundTruth::EnvFail);
            let cfg = ScenarioConfig {
                env_fail_ratio: 0.0,
                seed,
                ..Default::default()
            };
            assert!(reachable(&generate_scenario(&cfg).unwrap().graph));
        }
    }

    #[test]
    fn generator_rejects_infeasible() {
        let cfg = ScenarioConfig {
            n_states: 4,
            goal_depth: 5,
            ..Default::default()
        };
        assert!(matches!(generate_scenario(&cfg), Err(WorldError::Infeasible(_))));
        let cfg = ScenarioConfig {
            n_states: 1,
            ..Default::default()
        };
        assert!(matches!(generate_scenario(&cfg), Err(WorldError::InvalidConfig(_))));
        let cfg = ScenarioConfig {
            env_fail_ratio: 1.5,
            ..Default::default()
        };
        assert!(generate_scenario(&cfg).is_err());
    }

    #[test]
    fn suite_roundtrip_is_bit_exact() {
        let cases: Vec<_> = (0..5)
            .map(|i| {
                generate_case(
                    i,
                    &ScenarioConfig {
                        seed: 100 + i,
                        ..Default::default()
                    },
                )
                .unwrap()
            })
            .collect();
        let mut buf = Vec::new();
        write_suite(&mut buf, &cases).unwrap();
        let back = read_suite(buf.as_slice()).unwrap();
        assert_eq!(back, cases);
        let mut buf2 = Vec::new();
        write_suite(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn suite_rejects_foreign_schema() {
        let line = r#"{"record":"graph","schema_id":"latent-graph/0","case_id":0,"seed":0,"ground_truth":"env_fail","n_states":1,"n_edges":0,"start":0}"#;
        assert!(matches!(read_suite(line.as_bytes()), Err(WorldError::Format { .. })));
    }
}
