//! Closed-form attribution machinery.
//!
//! The attribution score `p` is a scalar preference toward an environment-side
//! failure (`EnvFail`) as opposed to an evaluator-side failure (`AgentFail`).
//! Probe outcomes move it through a branch-typed likelihood update; probes are
//! ranked by the expected drop in binary entropy of the score.
//!
//! Everything here is a pure function over a generic [`Real`] scalar.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttributionError {
    #[error("{name} = {value} outside {range}")]
    Domain {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("fail update undefined for p = 0 with gamma = 0")]
    UndefinedForm,
    #[error("verified success contradicts p = 1 when beta = 0")]
    ContradictoryEvidence,
    #[error("invalid likelihood parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T, E = AttributionError> = std::result::Result<T, E>;

/// Probe dimension: alternative transition, observation expansion, reproducibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProbeType {
    A,
    B,
    C,
}

impl ProbeType {
    pub const ALL: [ProbeType; 3] = [ProbeType::A, ProbeType::B, ProbeType::C];

    pub fn index(self) -> usize {
        match self {
            ProbeType::A => 0,
            ProbeType::B => 1,
            ProbeType::C => 2,
        }
    }
}

impl std::fmt::Display for ProbeType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ProbeType::A => "A",
            ProbeType::B => "B",
            ProbeType::C => "C",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    VerifiedSuccess,
    Fail,
}

fn check_range<T: Real>(
    name: &'static str,
    v: T,
    lo: T,
    lo_open: bool,
    hi: T,
    hi_open: bool,
    range: &'static str,
) -> Result<T> {
    let below = if lo_open { v <= lo } else { v < lo };
    let above = if hi_open { v >= hi } else { v > hi };
    if !v.is_finite() || below || above {
        return Err(AttributionError::Domain {
            name,
            value: v.as_f64(),
            range,
        });
    }
    Ok(v)
}

fn check_prob<T: Real>(name: &'static str, p: T) -> Result<T> {
    check_range(name, p, T::zero(), false, T::one(), false, "[0, 1]")
}

/// Global likelihood parameters: the base success pair and the per-type fail
/// likelihoods under `AgentFail`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodParams<T> {
    pub w0: T,
    pub beta0: T,
    pub gamma_a: T,
    pub gamma_b: T,
    pub gamma_c: T,
}

impl<T: Real> LikelihoodParams<T> {
    pub fn new(w0: T, beta0: T, gamma_a: T, gamma_b: T, gamma_c: T) -> Result<Self> {
        let one = T::one();
        let zero = T::zero();
        check_range("w0", w0, zero, true, one, false, "(0, 1]")?;
        check_range("beta0", beta0, zero, false, one, true, "[0, 1)")?;
        for (name, g) in [("gamma_a", gamma_a), ("gamma_b", gamma_b), ("gamma_c", gamma_c)] {
            check_range(name, g, zero, true, one, false, "(0, 1]")?;
        }
        if !(gamma_a > gamma_b && gamma_b > gamma_c) {
            return Err(AttributionError::InvalidParams(format!(
                "expected gamma_a > gamma_b > gamma_c, got {gamma_a}, {gamma_b}, {gamma_c}"
            )));
        }
        if beta0 > w0 {
            return Err(AttributionError::InvalidParams(format!(
                "beta0 = {beta0} exceeds w0 = {w0}"
            )));
        }
        Ok(Self {
            w0,
            beta0,
            gamma_a,
            gamma_b,
            gamma_c,
        })
    }

    /// Same fail likelihoods with a different base success pair.
    pub fn with_base(&self, w0: T, beta0: T) -> Result<Self> {
        Self::new(w0, beta0, self.gamma_a, self.gamma_b, self.gamma_c)
    }

    pub fn gamma(&self, probe_type: ProbeType) -> T {
        match probe_type {
            ProbeType::A => self.gamma_a,
            ProbeType::B => self.gamma_b,
            ProbeType::C => self.gamma_c,
        }
    }

    /// Default branch likelihoods: `w_b = w0`, `beta_d = beta0`, type-specific gamma.
    pub fn branch(&self, probe_type: ProbeType) -> BranchLikelihoods<T> {
        BranchLikelihoods {
            w_b: self.w0,
            beta_d: self.beta0,
            gamma_d: self.gamma(probe_type),
            probe_type,
            source: LikelihoodSource::Default,
        }
    }
}

impl<T: Real> Default for LikelihoodParams<T> {
    /// `(w0, beta0) = (0.60, 0.20)`, `(gamma_A, gamma_B, gamma_C) = (0.60, 0.50, 0.40)`.
    fn default() -> Self {
        Self {
            w0: T::lit(0.60),
            beta0: T::lit(0.20),
            gamma_a: T::lit(0.60),
            gamma_b: T::lit(0.50),
            gamma_c: T::lit(0.40),
        }
    }
}

/// Where a branch's likelihood triple came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodSource {
    Default,
    JudgeOverride,
}

/// Likelihood triple attached to one branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchLikelihoods<T> {
    /// P(verified_success | AgentFail).
    pub w_b: T,
    /// P(verified_success | EnvFail).
    pub beta_d: T,
    /// P(fail | AgentFail).
    pub gamma_d: T,
    pub probe_type: ProbeType,
    pub source: LikelihoodSource,
}

impl<T: Real> BranchLikelihoods<T> {
    pub fn new(w_b: T, beta_d: T, gamma_d: T, probe_type: ProbeType) -> Result<Self> {
        let one = T::one();
        let zero = T::zero();
        check_range("w_b", w_b, zero, true, one, false, "(0, 1]")?;
        check_range("beta_d", beta_d, zero, false, one, true, "[0, 1)")?;
        check_range("gamma_d", gamma_d, zero, true, one, false, "(0, 1]")?;
        if beta_d > w_b {
            return Err(AttributionError::InvalidParams(format!(
                "beta_d = {beta_d} exceeds w_b = {w_b}"
            )));
        }
        Ok(Self {
            w_b,
            beta_d,
            gamma_d,
            probe_type,
            source: LikelihoodSource::Default,
        })
    }

    /// Replaces the success pair, keeping the type's gamma. Marks the triple as
    /// judge-supplied.
    pub fn overridden(self, w_b: T, beta_d: T) -> Result<Self> {
        let mut bl = Self::new(w_b, beta_d, self.gamma_d, self.probe_type)?;
        bl.source = LikelihoodSource::JudgeOverride;
        Ok(bl)
    }
}

/// Binary entropy in bits, with `0 log 0 = 0`.
pub fn binary_entropy<T: Real>(p: T) -> Result<T> {
    let p = check_prob("p", p)?;
    let term = |x: T| if x <= T::zero() { T::zero() } else { -x * x.log2() };
    Ok(term(p) + term(T::one() - p))
}

/// Score after a failed probe whose fail likelihood under `AgentFail` is `gamma_d`.
/// The fail likelihood under `EnvFail` is 1.
pub fn update_on_fail<T: Real>(p: T, gamma_d: T) -> Result<T> {
    let p = check_prob("p", p)?;
    if p == T::zero() && gamma_d == T::zero() {
        return Err(AttributionError::UndefinedForm);
    }
    let gamma_d = check_range("gamma_d", gamma_d, T::zero(), true, T::one(), false, "(0, 1]")?;
    let post = p / (p + (T::one() - p) * gamma_d);
    Ok(post.max(p).min(T::one()))
}

/// Score after a verified success.
pub fn update_on_success<T: Real>(p: T, w_b: T, beta_d: T) -> Result<T> {
    let p = check_prob("p", p)?;
    let w_b = check_range("w_b", w_b, T::zero(), true, T::one(), false, "(0, 1]")?;
    let beta_d = check_range("beta_d", beta_d, T::zero(), false, T::one(), true, "[0, 1)")?;
    if p == T::one() && beta_d == T::zero() {
        return Err(AttributionError::ContradictoryEvidence);
    }
    let num = beta_d * p;
    let post = num / (w_b * (T::one() - p) + num);
    Ok(post.max(T::zero()).min(T::one()))
}

/// Applies the update selected by `outcome`.
pub fn update<T: Real>(p: T, outcome: Outcome, bl: &BranchLikelihoods<T>) -> Result<T> {
    match outcome {
        Outcome::Fail => update_on_fail(p, bl.gamma_d),
        Outcome::VerifiedSuccess => update_on_success(p, bl.w_b, bl.beta_d),
    }
}

/// Probability of a verified success under the two-outcome model at score `p`.
pub fn success_probability<T: Real>(p: T, bl: &BranchLikelihoods<T>) -> T {
    bl.w_b * (T::one() - p) + bl.beta_d * p
}

/// Expected drop in binary entropy of the score if the branch were executed.
pub fn expected_information_gain<T: Real>(p: T, bl: &BranchLikelihoods<T>) -> Result<T> {
    let prior = binary_entropy(p)?;
    let p_succ = success_probability(p, bl);
    let p_fail = T::one() - p_succ;
    let mut expected = T::zero();
    if p_succ > T::zero() {
        expected = expected + p_succ * binary_entropy(update_on_success(p, bl.w_b, bl.beta_d)?)?;
    }
    if p_fail > T::zero() {
        expected = expected + p_fail * binary_entropy(update_on_fail(p, bl.gamma_d)?)?;
    }
    Ok(prior - expected)
}

/// Entropy drop from `p0` to `p_end`; negative when diagnosis ends less certain.
pub fn delta_entropy<T: Real>(p0: T, p_end: T) -> Result<T> {
    Ok(binary_entropy(p0)? - binary_entropy(p_end)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStep<T> {
    pub probe_type: ProbeType,
    pub outcome: Outcome,
    pub p_after: T,
}

/// The running attribution score and its update history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionScore<T> {
    p: T,
    trace: Vec<ScoreStep<T>>,
}

impl<T: Real> AttributionScore<T> {
    pub fn new(p0: T) -> Result<Self> {
        Ok(Self {
            p: check_prob("p0", p0)?,
            trace: Vec::new(),
        })
    }

    /// Neutral prior 0.5.
    pub fn neutral() -> Self {
        Self {
            p: T::lit(0.5),
            trace: Vec::new(),
        }
    }

    pub fn p(&self) -> T {
        self.p
    }

    pub fn trace(&self) -> &[ScoreStep<T>] {
        &self.trace
    }

    pub fn apply(&mut self, outcome: Outcome, bl: &BranchLikelihoods<T>) -> Result<T> {
        self.p = update(self.p, outcome, bl)?;
        self.trace.push(ScoreStep {
            probe_type: bl.probe_type,
            outcome,
            p_after: self.p,
        });
        Ok(self.p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopKind {
    Continue,
    StopPass,
    StopFail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    SuccessWitness,
    EnvThreshold,
    BudgetExhausted,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopDecision {
    pub kind: StopKind,
    pub reason: StopReason,
}

impl StopDecision {
    pub const CONTINUE: StopDecision = StopDecision {
        kind: StopKind::Continue,
        reason: StopReason::None,
    };
    pub const PASS: StopDecision = StopDecision {
        kind: StopKind::StopPass,
        reason: StopReason::SuccessWitness,
    };
    pub const ENV_THRESHOLD: StopDecision = StopDecision {
        kind: StopKind::StopFail,
        reason: StopReason::EnvThreshold,
    };
    pub const BUDGET_EXHAUSTED: StopDecision = StopDecision {
        kind: StopKind::StopFail,
        reason: StopReason::BudgetExhausted,
    };
}

pub fn validate_tau<T: Real>(tau_env: T) -> Result<T> {
    check_range("tau_env", tau_env, T::lit(0.5), true, T::one(), false, "(0.5, 1]")
}

/// A verified success stops with `Pass` regardless of the score; otherwise a
/// score at or above `tau_env` stops with `Fail`.
pub fn check_stop<T: Real>(score: &AttributionScore<T>, last: Outcome, tau_env: T) -> Result<StopDecision> {
    let tau_env = validate_tau(tau_env)?;
    Ok(match last {
        Outcome::VerifiedSuccess => StopDecision::PASS,
        Outcome::Fail if score.p() >= tau_env => StopDecision::ENV_THRESHOLD,
        Outcome::Fail => StopDecision::CONTINUE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn defaults() -> LikelihoodParams<f64> {
        LikelihoodParams::default()
    }

    #[test]
    fn entropy_reference_points() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        // mpmath, 30 digits
        assert_abs_diff_eq!(binary_entropy(0.25).unwrap(), 0.811_278_124_459_132_9, epsilon = 1e-12);
        assert_abs_diff_eq!(binary_entropy(0.25f32).unwrap(), 0.811_278_1f32, epsilon = 1e-5);
    }

    #[test]
    fn entropy_rejects_out_of_range() {
        assert!(matches!(binary_entropy(-0.1), Err(AttributionError::Domain { .. })));
        assert!(matches!(binary_entropy(1.5), Err(AttributionError::Domain { .. })));
        assert!(binary_entropy(f64::NAN).is_err());
    }

    #[test]
    fn fail_update_staircase() {
        let p1 = update_on_fail(0.5, 0.5).unwrap();
        let p2 = update_on_fail(p1, 0.4).unwrap();
        let p3 = update_on_fail(p2, 0.6).unwrap();
        assert_abs_diff_eq!(p1, 0.6667, epsilon = 0.005);
        assert_abs_diff_eq!(p2, 0.8333, epsilon = 0.005);
        assert_abs_diff_eq!(p3, 0.8929, epsilon = 0.005);
        assert_eq!(update_on_fail(0.3, 1.0).unwrap(), 0.3);
    }

    #[test]
    fn fail_update_errors() {
        assert_eq!(update_on_fail(0.0, 0.0), Err(AttributionError::UndefinedForm));
        assert!(matches!(update_on_fail(0.5, 0.0), Err(AttributionError::Domain { .. })));
        assert!(matches!(update_on_fail(0.5, 1.2), Err(AttributionError::Domain { .. })));
        assert!(matches!(update_on_fail(1.1, 0.5), Err(AttributionError::Domain { .. })));
    }

    #[test]
    fn fail_update_absorbing_states() {
        assert_eq!(update_on_fail(0.0, 0.4).unwrap(), 0.0);
        assert_eq!(update_on_fail(1.0, 0.4).unwrap(), 1.0);
    }

    #[test]
    fn success_update_examples() {
        // 0.1 / 0.4
        assert_abs_diff_eq!(update_on_success(0.5, 0.6, 0.2).unwrap(), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(update_on_success(0.5, 0.4, 0.4).unwrap(), 0.5, epsilon = 1e-15);
        // 0.16 / 0.28
        assert_abs_diff_eq!(update_on_success(0.8, 0.6, 0.2).unwrap(), 0.5714, epsilon = 0.0005);
        assert_eq!(update_on_success(0.0, 0.6, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn success_update_contradiction() {
        assert_eq!(
            update_on_success(1.0, 0.6, 0.0),
            Err(AttributionError::ContradictoryEvidence)
        );
        assert!(update_on_success(0.5, 0.0, 0.0).is_err());
        assert!(update_on_success(0.5, 0.6, 1.0).is_err());
    }

    #[test]
    fn eig_examples() {
        let a = defaults().branch(ProbeType::A);
        // mpmath: 1 - (0.4 H(0.25) + 0.6 H(0.625))
        assert_abs_diff_eq!(
            expected_information_gain(0.5, &a).unwrap(),
            0.102_828_348_461_367_9,
            epsilon = 1e-12
        );
        let flat = BranchLikelihoods::new(0.5, 0.5, 1.0, ProbeType::A).unwrap();
        assert_abs_diff_eq!(expected_information_gain(0.5, &flat).unwrap(), 0.0, epsilon = 1e-15);
        for t in ProbeType::ALL {
            let g = expected_information_gain(0.999, &defaults().branch(t)).unwrap();
            assert!(g < 0.011_407_757_737_461_14);
        }
    }

    #[test]
    fn eig_goes_negative_when_fail_likelihood_is_not_complementary() {
        // gamma is not (1 - w) / (1 - beta), so the posteriors are not a martingale
        let bl = BranchLikelihoods::new(0.21, 0.2, 0.6, ProbeType::A).unwrap();
        // mpmath, 30 digits
        assert_abs_diff_eq!(
            expected_information_gain(0.3, &bl).unwrap(),
            -0.075_531_554_568_575_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn eig_orders_types_at_neutral_prior() {
        let eig = |t| expected_information_gain(0.5, &defaults().branch(t)).unwrap();
        assert!(eig(ProbeType::C) > eig(ProbeType::B));
        assert!(eig(ProbeType::B) > eig(ProbeType::A));
    }

    #[test]
    fn stop_rule() {
        let params = defaults();
        let mut s = AttributionScore::new(0.10).unwrap();
        assert_eq!(
            check_stop(&s, Outcome::VerifiedSuccess, 0.7).unwrap(),
            StopDecision::PASS
        );

        s = AttributionScore::neutral();
        s.apply(Outcome::Fail, &params.branch(ProbeType::A)).unwrap();
        assert_abs_diff_eq!(s.p(), 0.625, epsilon = 1e-12);
        assert_eq!(check_stop(&s, Outcome::Fail, 0.7).unwrap(), StopDecision::CONTINUE);
        s.apply(Outcome::Fail, &params.branch(ProbeType::B)).unwrap();
        assert_abs_diff_eq!(s.p(), 0.769_230_769_230_769_2, epsilon = 1e-12);
        assert_eq!(check_stop(&s, Outcome::Fail, 0.7).unwrap(), StopDecision::ENV_THRESHOLD);
        assert_eq!(s.trace().len(), 2);

        assert!(check_stop(&s, Outcome::Fail, 0.5).is_err());
        assert!(check_stop(&s, Outcome::Fail, 1.01).is_err());
    }

    #[test]
    fn delta_entropy_examples() {
        // mpmath: 1 - H(0.8929) = 0.508894
        assert_abs_diff_eq!(delta_entropy(0.5, 0.8929).unwrap(), 0.508_894, epsilon = 1e-6);
        assert_eq!(delta_entropy(0.5, 0.5).unwrap(), 0.0);
        assert_abs_diff_eq!(delta_entropy(0.5, 0.25).unwrap(), 0.1887, epsilon = 0.002);
        assert!(delta_entropy(0.9, 0.5).unwrap() < 0.0);
    }

    #[test]
    fn params_validation() {
        assert!(LikelihoodParams::new(0.6, 0.2, 0.5, 0.5, 0.4).is_err());
        assert!(LikelihoodParams::new(0.2, 0.6, 0.6, 0.5, 0.4).is_err());
        assert!(LikelihoodParams::new(0.0, 0.0, 0.6, 0.5, 0.4).is_err());
        assert!(LikelihoodParams::new(0.5, 0.5, 0.6, 0.5, 0.4).is_ok());
        let p = defaults();
        assert_eq!(p.branch(ProbeType::C).gamma_d, 0.4);
        assert!(BranchLikelihoods::new(0.3, 0.4, 0.6, ProbeType::A).is_err());
        let o = p.branch(ProbeType::A).overridden(0.9, 0.1).unwrap();
        assert_eq!(o.source, LikelihoodSource::JudgeOverride);
        assert_eq!(o.gamma_d, 0.6);
    }
}
