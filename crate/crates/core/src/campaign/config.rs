use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CampaignError;
use crate::agent::SouConfig;
use crate::baselines::BaselineKind;
use crate::diagnosis::{DiagnosisConfig, Ordering, PriorMode};
use crate::world::ScenarioConfig;
use crate::Params;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub version: u32,
    pub n_cases: usize,
    pub campaign_seed: u64,
    pub agent_budget: usize,
    pub parallelism: usize,
    pub output_dir: PathBuf,
    pub scenario: ScenarioConfig,
    pub sou: SouConfig,
    pub methods: Vec<MethodSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Diagnose,
    Retry,
    Majority,
    BestOf,
    Nr,
    NrIe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    #[default]
    Heuristic,
    Oracle,
}

/// One `[[methods]]` table. Diagnosis fields left out take the documented
/// defaults; setting them on a baseline is an error.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    pub kind: Option<MethodKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_env: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordering: Option<Ordering>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_mode: Option<PriorMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defer_stop_to_round_end: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gammas: Option<[f64; 3]>,
}

impl MethodSpec {
    pub fn diagnose(name: &str, rounds: u32) -> Self {
        Self {
            name: name.into(),
            kind: Some(MethodKind::Diagnose),
            rounds: Some(rounds),
            ..Default::default()
        }
    }

    pub fn baseline(name: &str, kind: MethodKind, n: Option<u32>) -> Self {
        Self {
            name: name.into(),
            kind: Some(kind),
            n,
            ..Default::default()
        }
    }

    fn has_diagnosis_fields(&self) -> bool {
        self.rounds.is_some()
            || self.pool_size.is_some()
            || self.budget_k.is_some()
            || self.tau_env.is_some()
            || self.ordering.is_some()
            || self.prior_mode.is_some()
            || self.judge.is_some()
            || self.defer_stop_to_round_end.is_some()
            || self.w0.is_some()
            || self.beta0.is_some()
            || self.gammas.is_some()
    }

    pub fn resolve(&self) -> Result<Method, CampaignError> {
        let err = |m: String| CampaignError::Config(format!("method {:?}: {m}", self.name));
        let kind = self.kind.ok_or_else(|| err("missing kind".into()))?;
        if kind != MethodKind::Diagnose {
            if self.has_diagnosis_fields() {
                return Err(err("diagnosis settings on a baseline".into()));
            }
            let n = || self.n.ok_or_else(|| err("missing n".into()));
            let kind = match kind {
                MethodKind::Retry => BaselineKind::RetryN { n: n()? },
                MethodKind::Majority => BaselineKind::MajorityN { n: n()? },
                MethodKind::BestOf => BaselineKind::BestOfN { n: n()? },
                MethodKind::Nr => BaselineKind::Nr { n: n()? },
                MethodKind::NrIe => {
                    if self.n.is_some() {
                        return Err(err("nr_ie takes no n".into()));
                    }
                    BaselineKind::NrIe
                }
                MethodKind::Diagnose => unreachable!(),
            };
            kind.validate().map_err(|e| err(e.to_string()))?;
            return Ok(Method::Baseline {
                name: self.name.clone(),
                kind,
            });
        }
        if self.n.is_some() {
            return Err(err("diagnose takes rounds, not n".into()));
        }
        let d = DiagnosisConfig::default();
        let base = Params::default();
        let [ga, gb, gc] = self.gammas.unwrap_or([base.gamma_a, base.gamma_b, base.gamma_c]);
        let params = Params::new(self.w0.unwrap_or(base.w0), self.beta0.unwrap_or(base.beta0), ga, gb, gc)
            .map_err(|e| err(e.to_string()))?;
        let cfg = DiagnosisConfig {
            rounds: self.rounds.unwrap_or(d.rounds),
            pool_size: self.pool_size.unwrap_or(d.pool_size),
            budget_k: self.budget_k.unwrap_or(d.budget_k),
            tau_env: self.tau_env.unwrap_or(d.tau_env),
            params,
            prior_mode: self.prior_mode.unwrap_or(d.prior_mode),
            ordering: self.ordering.unwrap_or(d.ordering),
            defer_stop_to_round_end: self.defer_stop_to_round_end.unwrap_or(false),
        };
        cfg.validate().map_err(|e| err(e.to_string()))?;
        Ok(Method::Diagnose {
            name: self.name.clone(),
            cfg,
            judge: self.judge.unwrap_or_default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Diagnose {
        name: String,
        cfg: DiagnosisConfig,
        judge: JudgeKind,
    },
    Baseline {
        name: String,
        kind: BaselineKind,
    },
}

impl Method {
    pub fn name(&self) -> &str {
        match self {
            Method::Diagnose { name, .. } | Method::Baseline { name, .. } => name,
        }
    }
}

/// Threshold and likelihood sweeps over one diagnosis method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub method: String,
    pub tau_env: Vec<f64>,
    /// `(w0, beta0)` pairs.
    #[serde(default)]
    pub likelihoods: Vec<[f64; 2]>,
}

impl CampaignConfig {
    pub fn from_toml(text: &str) -> Result<Self, CampaignError> {
        let cfg: CampaignConfig = toml::from_str(text).map_err(|e| CampaignError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CampaignError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CampaignError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        let err = |m: String| Err(CampaignError::Config(m));
        if self.version != CONFIG_VERSION {
            return err(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if self.n_cases == 0 {
            return err("n_cases must be at least 1".into());
        }
        if self.agent_budget == 0 {
            return err("agent_budget must be at least 1".into());
        }
        if self.parallelism == 0 {
            return err("parallelism must be at least 1".into());
        }
        self.scenario
            .validate()
            .map_err(|e| CampaignError::Config(e.to_string()))?;
        self.sou.validate().map_err(|e| CampaignError::Config(e.to_string()))?;
        if self.methods.is_empty() {
            return err("no methods configured".into());
        }
        let mut names = BTreeSet::new();
        for m in &self.methods {
            if m.name.is_empty() || m.name.contains(['/', '\\', '@']) {
                return err(format!("invalid method name {:?}", m.name));
            }
            if !names.insert(m.name.as_str()) {
                return err(format!("duplicate method name {:?}", m.name));
            }
            m.resolve()?;
        }
        if let Some(s) = &self.sweep {
            let base = self
                .methods
                .iter()
                .find(|m| m.name == s.method)
                .ok_or_else(|| CampaignError::Config(format!("sweep method {:?} not configured", s.method)))?;
            if base.kind != Some(MethodKind::Diagnose) {
                return err(format!("sweep method {:?} is not a diagnosis method", s.method));
            }
            if s.tau_env.is_empty() && s.likelihoods.is_empty() {
                return err("sweep has nothing to vary".into());
            }
            for &t in &s.tau_env {
                crate::attribution::validate_tau(t).map_err(|e| CampaignError::Config(e.to_string()))?;
            }
            for &[w0, b0] in &s.likelihoods {
                Params::default()
                    .with_base(w0, b0)
                    .map_err(|e| CampaignError::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn resolved_methods(&self) -> Result<Vec<Method>, CampaignError> {
        self.methods.iter().map(MethodSpec::resolve).collect()
    }
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            n_cases: 300,
            campaign_seed: 2024,
            agent_budget: 15,
            parallelism: 1,
            output_dir: PathBuf::from("campaign-out"),
            scenario: ScenarioConfig::default(),
            sou: SouConfig::default(),
            methods: vec![
                MethodSpec::diagnose("diag-x1", 1),
                MethodSpec::diagnose("diag-x2", 2),
                MethodSpec::baseline("retry-1", MethodKind::Retry, Some(1)),
                MethodSpec::baseline("majority-3", MethodKind::Majority, Some(3)),
                MethodSpec::baseline("best-of-3", MethodKind::BestOf, Some(3)),
                MethodSpec::baseline("nr", MethodKind::Nr, Some(1)),
                MethodSpec::baseline("nr-ie", MethodKind::NrIe, None),
            ],
            sweep: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = CampaignConfig::default();
        let text = cfg.to_toml();
        assert_eq!(CampaignConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_methods_rejected() {
        let text = CampaignConfig::default().to_toml();
        let extra = text.replacen("n_cases", "surprise = 1\nn_cases", 1);
        assert!(matches!(
            CampaignConfig::from_toml(&extra),
            Err(CampaignError::Config(_))
        ));
        let bad_kind = text.replacen("kind = \"retry\"", "kind = \"reboot\"", 1);
        assert!(matches!(
            CampaignConfig::from_toml(&bad_kind),
            Err(CampaignError::Config(_))
        ));
    }

    #[test]
    fn baseline_with_diagnosis_fields_rejected() {
        let mut spec = MethodSpec::baseline("r", MethodKind::Retry, Some(1));
        spec.tau_env = Some(0.8);
        assert!(spec.resolve().is_err());
        assert!(MethodSpec::baseline("m", MethodKind::Majority, Some(1))
            .resolve()
            .is_err());
        assert!(MethodSpec::baseline("r", MethodKind::Retry, None).resolve().is_err());
    }

    #[test]
    fn zero_cases_rejected() {
        let cfg = CampaignConfig {
            n_cases: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
