//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use failattr::agent::Verdict;
use failattr::attribution::{
    binary_entropy, check_stop, expected_information_gain, success_probability, update, Outcome, ProbeType, StopKind,
};
use failattr::campaign::run::SWEEP_RESULTS_FILE;
use failattr::campaign::{build_report, cmd_gen, cmd_run, cmd_sweep, read_results, CampaignConfig, Report};
use failattr::diagnosis::Ordering;
use failattr::judge::{dim_weights_from_category, Category, DimPriorTable};
use failattr::metrics::Subset;
use failattr::world::GroundTruth;
use failattr::{Likelihoods, Params, Score};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

struct Check {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Check {
    Check {
        pass,
        detail: detail.into(),
    }
}

fn staircase() -> Check {
    let t0 = Instant::now();
    let params = Params::default();
    let mut score = Score::neutral();
    let mut ps = Vec::new();
    for t in [ProbeType::B, ProbeType::C, ProbeType::A] {
        ps.push(score.apply(Outcome::Fail, &params.branch(t)).unwrap());
    }
    let expected = [0.6667, 0.8333, 0.8929];
    let ok = ps.iter().zip(expected).all(|(p, e)| (p - e).abs() <= 0.005);
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        ok && secs < 1.0,
        format!("p = {ps:.4?}, expected {expected:?} +/- 0.005, {secs:.3}s"),
    )
}

fn laplace() -> Check {
    let w = dim_weights_from_category(Category::WrongTarget, &DimPriorTable::default()).unwrap();
    verdict(w == [0.6, 0.2, 0.2], format!("wrong_target weights {w:?}"))
}

fn random_likelihoods(rng: &mut ChaCha8Rng) -> (f64, Likelihoods) {
    let w = rng.gen_range(0.05..0.95);
    let beta = rng.gen_range(0.0..w);
    let gamma = rng.gen_range(0.05..=1.0);
    let t = [ProbeType::A, ProbeType::B, ProbeType::C][rng.gen_range(0..3)];
    (rng.gen_range(0.02..0.98), Likelihoods::new(w, beta, gamma, t).unwrap())
}

fn eig_vs_monte_carlo() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples = 100_000;
    let mut worst = 0.0f64;
    let tuples = 60;
    for _ in 0..tuples {
        let (p, bl) = random_likelihoods(&mut rng);
        let closed = expected_information_gain(p, &bl).unwrap();
        let s = success_probability(p, &bl);
        let h_succ = binary_entropy(update(p, Outcome::VerifiedSuccess, &bl).unwrap()).unwrap();
        let h_fail = binary_entropy(update(p, Outcome::Fail, &bl).unwrap()).unwrap();
        let total: f64 = (0..samples)
            .map(|_| if rng.gen_bool(s) { h_succ } else { h_fail })
            .sum();
        let mc = binary_entropy(p).unwrap() - total / samples as f64;
        worst = worst.max((closed - mc).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        worst <= 0.01 && secs < 30.0,
        format!("{tuples} tuples, 1e5 samples each, max |closed - MC| = {worst:.5}, {secs:.2}s"),
    )
}

fn commutativity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=10);
        let p0 = rng.gen_range(0.05..0.95);
        let mut updates: Vec<(Outcome, Likelihoods)> = (0..n)
            .map(|_| {
                let (_, bl) = random_likelihoods(&mut rng);
                let o = if rng.gen_bool(0.3) {
                    Outcome::VerifiedSuccess
                } else {
                    Outcome::Fail
                };
                (o, bl)
            })
            .collect();
        let run = |us: &[(Outcome, Likelihoods)]| us.iter().fold(p0, |p, (o, bl)| update(p, *o, bl).unwrap());
        let reference = run(&updates);
        for _ in 0..5 {
            updates.shuffle(&mut rng);
            worst = worst.max((run(&updates) - reference).abs());
        }
    }
    verdict(
        worst <= 1e-12,
        format!("1000 multisets, max permutation drift {worst:.2e}"),
    )
}

fn stop_arithmetic() -> Check {
    let params = Params::default();
    let mut score = Score::neutral();
    let p1 = score.apply(Outcome::Fail, &params.branch(ProbeType::A)).unwrap();
    let d1 = check_stop(&score, Outcome::Fail, 0.7).unwrap().kind;
    let p2 = score.apply(Outcome::Fail, &params.branch(ProbeType::B)).unwrap();
    let d2 = check_stop(&score, Outcome::Fail, 0.7).unwrap().kind;
    let ok = (p1 - 0.625).abs() <= 1e-4
        && (p2 - 0.7692).abs() <= 1e-4
        && d1 == StopKind::Continue
        && d2 == StopKind::StopFail;
    verdict(ok, format!("A fail {p1:.4} ({d1:?}), then B fail {p2:.4} ({d2:?})"))
}

fn fn_summary<'a>(report: &'a Report, method: &str) -> &'a failattr::metrics::CampaignSummary {
    &report
        .rows
        .iter()
        .find(|r| r.method == method && r.subset == Subset::All)
        .unwrap_or_else(|| panic!("no row for {method}"))
        .summary
}

fn recovery_trend(report: &Report, secs: f64) -> Check {
    let x1 = fn_summary(report, "diag-x1");
    let x2 = fn_summary(report, "diag-x2");
    let r1 = fn_summary(report, "retry-1");
    let (d1, d2, rr) = (
        x1.fn_recovery_rate.unwrap_or(0.0),
        x2.fn_recovery_rate.unwrap_or(0.0),
        r1.fn_recovery_rate.unwrap_or(0.0),
    );
    let ok = x1.fn_count >= 80 && d1 - rr >= 0.10 && d2 >= d1 && secs < 300.0;
    verdict(
        ok,
        format!(
            "{} FN cases; x1 {d1:.4}, x2 {d2:.4}, retry-1 {rr:.4}; single-threaded run {secs:.2}s",
            x1.fn_count
        ),
    )
}

fn ordering(report: &Report) -> Check {
    let row = |o: Ordering| report.ordering.iter().find(|r| r.ordering == o).expect("ordering row");
    let (eig, rnd) = (row(Ordering::Eig), row(Ordering::Random));
    let (fe, fr) = (
        eig.first_branch_success_rate.unwrap_or(0.0),
        rnd.first_branch_success_rate.unwrap_or(0.0),
    );
    let (pe, pr) = (
        eig.probes_per_recovered.unwrap_or(f64::INFINITY),
        rnd.probes_per_recovered.unwrap_or(0.0),
    );
    verdict(
        fe >= fr && pe <= pr,
        format!("first-branch success eig {fe:.4} vs random {fr:.4}; probes/recovered eig {pe:.4} vs random {pr:.4}"),
    )
}

fn tau_sweep(report: &Report) -> Check {
    let swept: Vec<_> = report.tau_sweep.iter().filter(|r| r.tau_env < 1.0).collect();
    let saved: Vec<i64> = swept.iter().map(|r| r.saved_probes).collect();
    let monotone = saved.windows(2).all(|w| w[0] >= w[1]);
    let truncated = swept
        .iter()
        .find(|r| (r.tau_env - 0.9).abs() < 1e-9)
        .map(|r| r.truncated_recovered);
    verdict(
        swept.len() == 6 && monotone && truncated == Some(0),
        format!("saved probes over tau 0.65..0.90: {saved:?}; truncation at 0.90: {truncated:?}"),
    )
}

fn witness_soundness(files: &[PathBuf]) -> Check {
    let (mut checked, mut bad, mut literal) = (0usize, 0usize, 0usize);
    for f in files {
        let file = read_results(f).unwrap();
        for m in &file.header.methods {
            for r in file
                .results_for(&m.name)
                .filter(|r| r.ground_truth == GroundTruth::EnvFail)
            {
                let pass = r.final_verdict == Verdict::Pass;
                literal += usize::from(pass);
                if m.kind == "diagnose" && r.diagnosed() {
                    checked += 1;
                    bad += usize::from(pass);
                }
            }
        }
    }
    verdict(
        checked > 0 && bad == 0,
        format!(
            "{bad} of {checked} diagnosed EnvFail cases end Pass across {} results files; \
             EnvFail Pass without a witness (hallucinated first rollouts, baseline reruns): {literal}",
            files.len()
        ),
    )
}

fn auc(report: &Report) -> Check {
    let a = fn_summary(report, "diag-x1").roc_auc;
    verdict(a.is_some_and(|a| a > 0.5), format!("diag-x1 ROC-AUC {a:.4?}"))
}

fn determinism() -> Check {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let cfg = |dir: &Path, parallelism| CampaignConfig {
        n_cases: 100,
        parallelism,
        output_dir: dir.to_path_buf(),
        ..CampaignConfig::default()
    };
    let (ca, cb) = (cfg(a.path(), 1), cfg(b.path(), 8));
    let ra = cmd_run(&ca, &cmd_gen(&ca).unwrap()).unwrap().results_path;
    let rb = cmd_run(&cb, &cmd_gen(&cb).unwrap()).unwrap().results_path;
    let (x, y) = (fs::read(&ra).unwrap(), fs::read(&rb).unwrap());
    verdict(
        x == y,
        format!("100 cases, parallelism 1 vs 8: {} vs {} bytes", x.len(), y.len()),
    )
}

fn main() -> ExitCode {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let work = TempDir::new().unwrap();

    let main_cfg = CampaignConfig {
        parallelism: 1,
        output_dir: work.path().join("main"),
        ..CampaignConfig::default()
    };
    let t0 = Instant::now();
    let main_results = cmd_run(&main_cfg, &cmd_gen(&main_cfg).unwrap()).unwrap().results_path;
    let main_secs = t0.elapsed().as_secs_f64();
    let main_report = build_report(&read_results(&main_results).unwrap(), None);

    let mut ord_cfg = CampaignConfig::load(&root.join("configs/ordering-sweep.toml")).unwrap();
    ord_cfg.output_dir = work.path().join("ordering");
    let suite = cmd_gen(&ord_cfg).unwrap();
    let ord_results = cmd_run(&ord_cfg, &suite).unwrap().results_path;
    cmd_sweep(&ord_cfg, &suite).unwrap();
    let sweep_results = ord_cfg.output_dir.join(SWEEP_RESULTS_FILE);
    let ord_report = build_report(
        &read_results(&ord_results).unwrap(),
        Some(&read_results(&sweep_results).unwrap()),
    );

    let checks: Vec<Check> = vec![
        staircase(),
        laplace(),
        eig_vs_monte_carlo(),
        commutativity(),
        stop_arithmetic(),
        recovery_trend(&main_report, main_secs),
        ordering(&ord_report),
        tau_sweep(&ord_report),
        witness_soundness(&[main_results, ord_results, sweep_results]),
        auc(&main_report),
        determinism(),
    ];
    let mut failed = 0;
    for (i, c) in checks.iter().enumerate() {
        println!(
            "criterion {}: {} ({})",
            i + 1,
            if c.pass { "PASS" } else { "FAIL" },
            c.detail
        );
        failed += usize::from(!c.pass);
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
