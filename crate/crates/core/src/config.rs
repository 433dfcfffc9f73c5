//! Experiment configuration, read from TOML or JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{Protocol, StreamConfig};
use crate::moe::MoeConfig;
use crate::optim::OptimizerConfig;
use crate::ppo::{EnvConfig, PpoConfig};
use crate::sphere::SphereConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Continual supervised task stream.
    #[default]
    Supervised,
    /// Continual point-mass reaching with PPO.
    PpoToy,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Suite::Supervised),
            "ppo-toy" | "ppo_toy" => Ok(Suite::PpoToy),
            other => Err(Error::Config(format!("unknown suite `{other}` (expected supervised or ppo-toy)"))),
        }
    }
}

/// One arm of a study. Arms share seeds and the probe batch; the first arm
/// is the baseline for paired deltas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    /// Overrides the top-level protocol.
    #[serde(default)]
    pub protocol: Option<Protocol>,
    /// Overrides the top-level sphere section.
    #[serde(default)]
    pub sphere: Option<SphereConfig>,
}

fn d_goals() -> usize {
    4
}
fn d_critic() -> Vec<usize> {
    vec![64, 64]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoSuiteConfig {
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default = "d_goals")]
    pub num_goals: usize,
    #[serde(default = "d_critic")]
    pub critic_widths: Vec<usize>,
}

impl Default for PpoSuiteConfig {
    fn default() -> Self {
        PpoSuiteConfig { env: EnvConfig::default(), ppo: PpoConfig::default(), num_goals: d_goals(), critic_widths: d_critic() }
    }
}

fn d_probe_seed() -> u64 {
    777
}
fn d_probe_size() -> usize {
    64
}
fn d_log_every() -> usize {
    250
}
fn d_moe() -> MoeConfig {
    MoeConfig::new(0, 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub suite: Suite,
    pub seeds: Vec<u64>,
    #[serde(default = "d_probe_seed")]
    pub probe_seed: u64,
    #[serde(default = "d_probe_size")]
    pub probe_size: usize,
    /// Log interval in optimizer steps (supervised) or PPO iterations.
    #[serde(default = "d_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub protocol: Protocol,
    /// Input and output dims are taken from the stream or environment.
    #[serde(default = "d_moe")]
    pub moe: MoeConfig,
    #[serde(default)]
    pub sphere: SphereConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub stream: StreamConfig,
    #[serde(default)]
    pub ppo_toy: PpoSuiteConfig,
    #[serde(default)]
    pub arms: Vec<ArmConfig>,
    /// Arm every other arm is paired against; defaults to the first.
    #[serde(default)]
    pub baseline: Option<String>,
}

/// An arm with its overrides applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedArm {
    pub name: String,
    pub protocol: Protocol,
    pub sphere: SphereConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string().trim_end().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses by extension: `.json` as JSON, anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: must list at least one seed".into()));
        }
        if self.probe_size == 0 {
            return Err(Error::Config("probe_size: must be positive".into()));
        }
        self.sphere.validate()?;
        self.optimizer.validate()?;
        match self.suite {
            Suite::Supervised => {
                self.stream.validate()?;
                self.model_config().validate()?;
            }
            Suite::PpoToy => {
                self.ppo_toy.ppo.validate()?;
                if self.ppo_toy.num_goals < 2 {
                    return Err(Error::Config("ppo_toy.num_goals: must be at least 2".into()));
                }
            }
        }
        let mut names = std::collections::HashSet::new();
        for arm in &self.arms {
            if arm.name.is_empty() || arm.name.contains(['/', '\\']) {
                return Err(Error::Config(format!("arms: invalid arm name `{}`", arm.name)));
            }
            if !names.insert(&arm.name) {
                return Err(Error::Config(format!("arms: duplicate arm name `{}`", arm.name)));
            }
            if let Some(s) = &arm.sphere {
                s.validate()?;
            }
        }
        if let Some(b) = &self.baseline {
            if !self.resolved_arms().iter().any(|a| &a.name == b) {
                return Err(Error::Config(format!("baseline: no arm named `{b}`")));
            }
        }
        Ok(())
    }

    /// MoE config with dims filled in from the stream (supervised suite).
    pub fn model_config(&self) -> MoeConfig {
        MoeConfig { input_dim: self.stream.input_dim, output_dim: self.stream.output_dim, ..self.moe.clone() }
    }

    /// Arms with overrides applied; a config without arms has a single arm
    /// named `main`.
    pub fn resolved_arms(&self) -> Vec<ResolvedArm> {
        if self.arms.is_empty() {
            return vec![ResolvedArm { name: "main".into(), protocol: self.protocol, sphere: self.sphere.clone() }];
        }
        self.arms
            .iter()
            .map(|a| ResolvedArm {
                name: a.name.clone(),
                protocol: a.protocol.unwrap_or(self.protocol),
                sphere: a.sphere.clone().unwrap_or_else(|| self.sphere.clone()),
            })
            .collect()
    }

    /// Index of the baseline arm within [`Self::resolved_arms`].
    pub fn baseline_index(&self) -> usize {
        self.baseline
            .as_ref()
            .and_then(|b| self.resolved_arms().iter().position(|a| &a.name == b))
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::Variant;

    #[test]
    fn minimal_toml_gets_defaults() {
        let c = ExperimentConfig::from_toml_str("seeds = [1, 2]").unwrap();
        assert_eq!(c.seeds, vec![1, 2]);
        assert_eq!(c.stream.steps_per_task, 2000);
        assert_eq!(c.moe.num_experts, 10);
        assert_eq!(c.resolved_arms().len(), 1);
        assert_eq!(c.model_config().input_dim, 8);
    }

    #[test]
    fn missing_seeds_names_the_field() {
        let err = ExperimentConfig::from_toml_str("probe_seed = 3").unwrap_err().to_string();
        assert!(err.contains("seeds"), "{err}");
    }

    #[test]
    fn bad_value_reports_line() {
        let err = ExperimentConfig::from_toml_str("seeds = [0]\n\n[sphere]\nvariant = \"nope\"\n").unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
    }

    #[test]
    fn json_and_toml_agree() {
        let t = ExperimentConfig::from_toml_str(
            "seeds = [0]\n[sphere]\nratio = 0.001\nvariant = \"per_expert_sum\"\n[[arms]]\nname = \"base\"\n",
        )
        .unwrap();
        let j = ExperimentConfig::from_json_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(t, j);
        assert_eq!(t.sphere.variant, Variant::PerExpertSum);
        assert_eq!(t.resolved_arms()[0].sphere.ratio, 0.001);
    }

    #[test]
    fn rejects_empty_seeds_and_duplicate_arms() {
        assert!(ExperimentConfig::from_toml_str("seeds = []").is_err());
        let dup = "seeds = [0]\n[[arms]]\nname = \"a\"\n[[arms]]\nname = \"a\"\n";
        assert!(ExperimentConfig::from_toml_str(dup).is_err());
        assert!(ExperimentConfig::from_toml_str("seeds = [0]\nbogus = 1").is_err());
    }

    #[test]
    fn baseline_arm_is_resolved_by_name() {
        let arms = "[[arms]]\nname = \"iso\"\n[[arms]]\nname = \"seq\"\n";
        let cfg = ExperimentConfig::from_toml_str(&format!("seeds = [0]\nbaseline = \"seq\"\n{arms}")).unwrap();
        assert_eq!(cfg.baseline_index(), 1);
        assert_eq!(ExperimentConfig::from_toml_str(&format!("seeds = [0]\n{arms}")).unwrap().baseline_index(), 0);
        let err = ExperimentConfig::from_toml_str(&format!("seeds = [0]\nbaseline = \"nope\"\n{arms}")).unwrap_err();
        assert!(err.to_string().contains("baseline"));
    }
}
