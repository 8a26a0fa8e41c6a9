use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{CampaignConfig, JudgeKind, Method};
use super::CampaignError;
use crate::agent::{self, ProbeSettings, Verdict};
use crate::baselines::run_baseline;
use crate::diagnosis::{rollout_seed, run_diagnosis, CaseResult, DiagnosisConfig, Ordering};
use crate::judge::{DimPriorTable, HeuristicJudge, Judge, OracleJudge};
use crate::rng::{self, tag};
use crate::trace::{TraceEvent, TraceRecord};
use crate::world::{self, TestCase};

pub const RESULTS_SCHEMA: &str = "campaign-results/1";
pub const CASE_RESULT_SCHEMA: &str = "case-result/1";
pub const CASE_ERROR_SCHEMA: &str = "case-error/1";

pub const SUITE_FILE: &str = "suite.jsonl";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const SWEEP_RESULTS_FILE: &str = "sweep_results.jsonl";
pub const TRACE_DIR: &str = "traces";

/// How a method's result set relates to a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum SweepVariant {
    Tau { tau_env: f64 },
    Likelihood { w0: f64, beta0: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodInfo {
    pub name: String,
    pub kind: String,
    pub ordering: Option<Ordering>,
    pub tau_env: Option<f64>,
    pub rounds: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepVariant>,
}

impl MethodInfo {
    fn of(m: &Method, sweep: Option<SweepVariant>) -> Self {
        match m {
            Method::Diagnose { name, cfg, .. } => Self {
                name: name.clone(),
                kind: "diagnose".into(),
                ordering: Some(cfg.ordering),
                tau_env: Some(cfg.tau_env),
                rounds: Some(cfg.rounds),
                sweep,
            },
            Method::Baseline { name, kind } => Self {
                name: name.clone(),
                kind: format!("{kind:?}"),
                ordering: None,
                tau_env: None,
                rounds: None,
                sweep,
            },
        }
    }
}

/// First line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsHeader {
    pub schema_id: String,
    pub campaign_seed: u64,
    pub n_cases: usize,
    pub methods: Vec<MethodInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_of: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseError {
    pub method: String,
    pub case_id: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schema_id")]
pub enum ResultLine {
    #[serde(rename = "case-result/1")]
    Result(Box<CaseResult>),
    #[serde(rename = "case-error/1")]
    Error(CaseError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsFile {
    pub header: ResultsHeader,
    pub lines: Vec<ResultLine>,
}

impl ResultsFile {
    pub fn results(&self) -> impl Iterator<Item = &CaseResult> {
        self.lines.iter().filter_map(|l| match l {
            ResultLine::Result(r) => Some(r.as_ref()),
            ResultLine::Error(_) => None,
        })
    }

    pub fn errors(&self) -> impl Iterator<Item = &CaseError> {
        self.lines.iter().filter_map(|l| match l {
            ResultLine::Error(e) => Some(e),
            ResultLine::Result(_) => None,
        })
    }

    pub fn results_for<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a CaseResult> + 'a {
        self.results().filter(move |r| r.method == method)
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CampaignError + '_ {
    move |e| CampaignError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CampaignError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

/// Seed of the `i`-th case stream.
pub fn case_seed(campaign_seed: u64, i: u64) -> u64 {
    rng::derive(campaign_seed, &[tag::CASE, i])
}

pub fn generate_suite(cfg: &CampaignConfig) -> Result<Vec<TestCase>, CampaignError> {
    cfg.validate()?;
    (0..cfg.n_cases as u64)
        .map(|i| {
            world::generate_case(i, &cfg.scenario.with_seed(case_seed(cfg.campaign_seed, i)))
                .map_err(|e| CampaignError::Config(e.to_string()))
        })
        .collect()
}

/// Writes the scenario suite; returns its path.
pub fn cmd_gen(cfg: &CampaignConfig) -> Result<PathBuf, CampaignError> {
    let cases = generate_suite(cfg)?;
    let path = cfg.output_dir.join(SUITE_FILE);
    let mut out = create(&path)?;
    world::write_suite(&mut out, &cases).map_err(|e| CampaignError::Runtime(format!("{}: {e}", path.display())))?;
    out.flush().map_err(io_err(&path))?;
    Ok(path)
}

pub fn load_suite(path: &Path) -> Result<Vec<TestCase>, CampaignError> {
    let f = File::open(path).map_err(io_err(path))?;
    world::read_suite(BufReader::new(f)).map_err(|e| CampaignError::Runtime(format!("{}: {e}", path.display())))
}

fn judge_for(kind: JudgeKind, cfg: &DiagnosisConfig) -> Box<dyn Judge> {
    match kind {
        JudgeKind::Heuristic => Box::new(HeuristicJudge::new(cfg.params)),
        JudgeKind::Oracle => Box::new(OracleJudge {
            params: cfg.params,
            ..OracleJudge::default()
        }),
    }
}

type CaseRun = Vec<(ResultLine, Vec<TraceRecord>)>;

/// Runs every method on one case. All methods share the initial rollout.
pub fn run_case(cfg: &CampaignConfig, methods: &[Method], case: &TestCase) -> CaseRun {
    let table = DimPriorTable::default();
    let error_all = |msg: String| {
        methods
            .iter()
            .map(|m| {
                let line = ResultLine::Error(CaseError {
                    method: m.name().into(),
                    case_id: case.id,
                    message: msg.clone(),
                });
                (line, Vec::new())
            })
            .collect()
    };
    let traj = match agent::rollout(case, &cfg.sou, cfg.agent_budget, rollout_seed(case.seed)) {
        Ok(t) => t,
        Err(e) => return error_all(e.to_string()),
    };
    let settings = ProbeSettings::new(case, &cfg.sou, cfg.agent_budget);
    methods
        .iter()
        .map(|m| {
            let mut events = vec![TraceEvent::Rollout {
                steps: traj.steps.len(),
                stop: traj.stop,
                final_state: traj.final_state,
                verdict: traj.verdict,
            }];
            let outcome = if traj.verdict == Verdict::Pass {
                Ok(CaseResult::initial_pass(m.name(), case, &traj))
            } else {
                match m {
                    Method::Diagnose { cfg: dcfg, judge, .. } => {
                        let judge = judge_for(*judge, dcfg);
                        run_diagnosis(
                            case,
                            &traj,
                            dcfg,
                            judge.as_ref(),
                            &table,
                            &settings,
                            case.seed,
                            &mut events,
                        )
                    }
                    Method::Baseline { kind, .. } => {
                        run_baseline(case, &traj, *kind, &cfg.sou, cfg.agent_budget, case.seed, &mut events)
                    }
                }
            };
            match outcome {
                Ok(mut r) => {
                    r.method = m.name().into();
                    let trace = TraceRecord::wrap(m.name(), case.id, events);
                    (ResultLine::Result(Box::new(r)), trace)
                }
                Err(e) => (
                    ResultLine::Error(CaseError {
                        method: m.name().into(),
                        case_id: case.id,
                        message: e.to_string(),
                    }),
                    TraceRecord::wrap(m.name(), case.id, events),
                ),
            }
        })
        .collect()
}

/// Runs methods over cases on a pool of `parallelism` workers. Output order
/// follows the suite regardless of scheduling.
pub fn run_methods(
    cfg: &CampaignConfig,
    methods: &[Method],
    cases: &[TestCase],
    parallelism: usize,
) -> Result<Vec<CaseRun>, CampaignError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| CampaignError::Runtime(e.to_string()))?;
    Ok(pool.install(|| cases.par_iter().map(|c| run_case(cfg, methods, c)).collect()))
}

fn write_jsonl<T: Serialize>(out: &mut impl Write, v: &T, path: &Path) -> Result<(), CampaignError> {
    serde_json::to_writer(&mut *out, v).map_err(|e| CampaignError::Runtime(e.to_string()))?;
    out.write_all(b"\n").map_err(io_err(path))
}

fn write_outputs(
    dir: &Path,
    results_name: &str,
    header: &ResultsHeader,
    methods: &[Method],
    runs: &[CaseRun],
    traces: bool,
) -> Result<PathBuf, CampaignError> {
    let path = dir.join(results_name);
    let mut out = create(&path)?;
    write_jsonl(&mut out, header, &path)?;
    for run in runs {
        for (line, _) in run {
            write_jsonl(&mut out, line, &path)?;
        }
    }
    out.flush().map_err(io_err(&path))?;
    if traces {
        for (i, m) in methods.iter().enumerate() {
            let tpath = dir.join(TRACE_DIR).join(format!("{}.jsonl", m.name()));
            let mut t = create(&tpath)?;
            for run in runs {
                for rec in &run[i].1 {
                    write_jsonl(&mut t, rec, &tpath)?;
                }
            }
            t.flush().map_err(io_err(&tpath))?;
        }
    }
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub results_path: PathBuf,
    pub n_errors: usize,
}

/// Runs every configured method over the suite; writes results and traces.
pub fn cmd_run(cfg: &CampaignConfig, suite: &Path) -> Result<RunOutput, CampaignError> {
    cfg.validate()?;
    let methods = cfg.resolved_methods()?;
    let cases = load_suite(suite)?;
    let runs = run_methods(cfg, &methods, &cases, cfg.parallelism)?;
    let header = ResultsHeader {
        schema_id: RESULTS_SCHEMA.into(),
        campaign_seed: cfg.campaign_seed,
        n_cases: cases.len(),
        methods: methods.iter().map(|m| MethodInfo::of(m, None)).collect(),
        sweep_of: None,
    };
    let n_errors = runs
        .iter()
        .flatten()
        .filter(|(l, _)| matches!(l, ResultLine::Error(_)))
        .count();
    let results_path = write_outputs(&cfg.output_dir, RESULTS_FILE, &header, &methods, &runs, true)?;
    Ok(RunOutput { results_path, n_errors })
}

/// Variants of the sweep method: each threshold, a no-early-stop reference,
/// and each `(w0, beta0)` pair.
pub fn sweep_methods(cfg: &CampaignConfig) -> Result<Vec<(Method, SweepVariant)>, CampaignError> {
    let spec = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CampaignError::Config("config has no [sweep] table".into()))?;
    let base = cfg
        .methods
        .iter()
        .find(|m| m.name == spec.method)
        .ok_or_else(|| CampaignError::Config(format!("sweep method {:?} not configured", spec.method)))?
        .resolve()?;
    let Method::Diagnose { name, cfg: dcfg, judge } = base else {
        return Err(CampaignError::Config("sweep method must be a diagnosis method".into()));
    };
    let mut taus = spec.tau_env.clone();
    if !taus.contains(&1.0) && !taus.is_empty() {
        taus.push(1.0);
    }
    let mut out = Vec::new();
    for tau in taus {
        out.push((
            Method::Diagnose {
                name: format!("{name}@tau={tau}"),
                cfg: DiagnosisConfig {
                    tau_env: tau,
                    ..dcfg.clone()
                },
                judge,
            },
            SweepVariant::Tau { tau_env: tau },
        ));
    }
    for &[w0, beta0] in &spec.likelihoods {
        let params = dcfg
            .params
            .with_base(w0, beta0)
            .map_err(|e| CampaignError::Config(e.to_string()))?;
        out.push((
            Method::Diagnose {
                name: format!("{name}@w0={w0},beta0={beta0}"),
                cfg: DiagnosisConfig { params, ..dcfg.clone() },
                judge,
            },
            SweepVariant::Likelihood { w0, beta0 },
        ));
    }
    Ok(out)
}

/// Runs the configured sweep over the suite; writes a results file.
pub fn cmd_sweep(cfg: &CampaignConfig, suite: &Path) -> Result<RunOutput, CampaignError> {
    cfg.validate()?;
    let variants = sweep_methods(cfg)?;
    let methods: Vec<Method> = variants.iter().map(|(m, _)| m.clone()).collect();
    let cases = load_suite(suite)?;
    let runs = run_methods(cfg, &methods, &cases, cfg.parallelism)?;
    let header = ResultsHeader {
        schema_id: RESULTS_SCHEMA.into(),
        campaign_seed: cfg.campaign_seed,
        n_cases: cases.len(),
        methods: variants.iter().map(|(m, v)| MethodInfo::of(m, Some(*v))).collect(),
        sweep_of: cfg.sweep.as_ref().map(|s| s.method.clone()),
    };
    let n_errors = runs
        .iter()
        .flatten()
        .filter(|(l, _)| matches!(l, ResultLine::Error(_)))
        .count();
    let results_path = write_outputs(&cfg.output_dir, SWEEP_RESULTS_FILE, &header, &methods, &runs, false)?;
    Ok(RunOutput { results_path, n_errors })
}

/// Reads a results file, rejecting unknown schema versions.
pub fn read_results(path: &Path) -> Result<ResultsFile, CampaignError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or_else(|| CampaignError::Runtime(format!("{}: empty results file", path.display())))?
        .map_err(io_err(path))?;
    let head: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| CampaignError::Runtime(format!("{}: line 1: {e}", path.display())))?;
    let found = head.get("schema_id").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if found != RESULTS_SCHEMA {
        return Err(CampaignError::Migration {
            found: found.into(),
            expected: RESULTS_SCHEMA.into(),
        });
    }
    let header: ResultsHeader =
        serde_json::from_value(head).map_err(|e| CampaignError::Runtime(format!("{}: line 1: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| CampaignError::Runtime(format!("{}: line {}: {e}", path.display(), i + 2)))?;
        let sid = v.get("schema_id").and_then(|s| s.as_str()).unwrap_or("<missing>");
        if sid != CASE_RESULT_SCHEMA && sid != CASE_ERROR_SCHEMA {
            return Err(CampaignError::Migration {
                found: sid.into(),
                expected: CASE_RESULT_SCHEMA.into(),
            });
        }
        out.push(
            serde_json::from_value(v)
                .map_err(|e| CampaignError::Runtime(format!("{}: line {}: {e}", path.display(), i + 2)))?,
        );
    }
    Ok(ResultsFile { header, lines: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    use crate::campaign::SweepSpec;

    #[test]
    fn case_seeds_are_stable_and_distinct() {
        let seeds: BTreeSet<u64> = (0..1000).map(|i| case_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_eq!(case_seed(7, 3), case_seed(7, 3));
        assert_ne!(case_seed(7, 3), case_seed(8, 3));
    }

    #[test]
    fn sweep_adds_a_reference_threshold() {
        let mut cfg = CampaignConfig {
            sweep: Some(SweepSpec {
                method: "diag-x1".into(),
                tau_env: vec![0.7, 0.8],
                likelihoods: vec![[0.7, 0.2]],
            }),
            ..CampaignConfig::default()
        };
        let names: Vec<String> = sweep_methods(&cfg)
            .unwrap()
            .iter()
            .map(|(m, _)| m.name().to_string())
            .collect();
        assert_eq!(
            names,
            [
                "diag-x1@tau=0.7",
                "diag-x1@tau=0.8",
                "diag-x1@tau=1",
                "diag-x1@w0=0.7,beta0=0.2"
            ]
        );
        cfg.sweep = None;
        assert!(matches!(sweep_methods(&cfg), Err(CampaignError::Config(_))));
    }

    #[test]
    fn method_info_records_diagnosis_settings() {
        let cfg = CampaignConfig::default();
        let methods = cfg.resolved_methods().unwrap();
        let infos: Vec<MethodInfo> = methods.iter().map(|m| MethodInfo::of(m, None)).collect();
        assert_eq!(infos[0].kind, "diagnose");
        assert_eq!(infos[1].rounds, Some(2));
        assert!(infos[2].ordering.is_none() && infos[2].tau_env.is_none());
    }
}
