//! Runs an [`ExperimentConfig`] over its arms and seeds and writes the
//! output directory.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{ExperimentConfig, ResolvedArm, Suite};
use crate::error::{Error, Result};
use crate::harness::{probe_batch, run_protocol_with_model, RunRecord, StepTiming, TaskStream, TrainSettings};
use crate::io::{self, ArmTiming, Checkpoint, RunManifest, Summary};
use crate::linalg::Matrix;
use crate::moe::{MoeConfig, MoeModel};
use crate::ppo::{self, CrlSettings};

pub struct SeedRun {
    pub record: RunRecord,
    /// Final model (the actor for the PPO suite).
    pub model: MoeModel,
}

pub struct ArmOutcome {
    pub arm: ResolvedArm,
    pub runs: Vec<SeedRun>,
}

impl ArmOutcome {
    pub fn timing(&self) -> StepTiming {
        self.runs.iter().fold(StepTiming::default(), |acc, r| StepTiming {
            steps: acc.steps + r.record.timing.steps,
            seconds: acc.seconds + r.record.timing.seconds,
        })
    }
}

pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub probe: Matrix,
    pub arms: Vec<ArmOutcome>,
    pub summary: Summary,
}

/// Probe batch shared by every arm and seed of an experiment.
pub fn experiment_probe(cfg: &ExperimentConfig) -> Result<Matrix> {
    match cfg.suite {
        Suite::Supervised => {
            let stream = TaskStream::generate(&cfg.stream, 0)?;
            Ok(probe_batch(&stream, cfg.probe_size, cfg.probe_seed))
        }
        Suite::PpoToy => {
            let goals = ppo::goal_sequence(cfg.ppo_toy.num_goals, cfg.ppo_toy.env.goal_radius);
            Ok(ppo::probe_states(&cfg.ppo_toy.env, goals[0], cfg.probe_size, cfg.probe_seed))
        }
    }
}

pub fn num_tasks(cfg: &ExperimentConfig) -> usize {
    match cfg.suite {
        Suite::Supervised => cfg.stream.num_tasks,
        Suite::PpoToy => cfg.ppo_toy.num_goals,
    }
}

fn run_one(cfg: &ExperimentConfig, arm: &ResolvedArm, probe: &Matrix, seed: u64) -> Result<SeedRun> {
    match cfg.suite {
        Suite::Supervised => {
            let stream = TaskStream::generate(&cfg.stream, seed)?;
            let settings =
                TrainSettings { sphere: arm.sphere.clone(), optimizer: cfg.optimizer.clone(), log_every: cfg.log_every };
            let (record, model) = run_protocol_with_model(&stream, &cfg.model_config(), arm.protocol, &settings, probe, seed)?;
            Ok(SeedRun { record, model })
        }
        Suite::PpoToy => {
            let suite = &cfg.ppo_toy;
            let settings = CrlSettings {
                env: suite.env.clone(),
                ppo: suite.ppo.clone(),
                actor: MoeConfig { input_dim: ppo::STATE_DIM, output_dim: ppo::ACTION_DIM, ..cfg.moe.clone() },
                critic_widths: suite.critic_widths.clone(),
                sphere: arm.sphere.clone(),
                optimizer: cfg.optimizer.clone(),
                protocol: arm.protocol,
                log_every: cfg.log_every,
            };
            let goals = ppo::goal_sequence(suite.num_goals, suite.env.goal_radius);
            let (record, agent) = ppo::run_crl_sequence_with_agent(&goals, &settings, probe, seed)?;
            Ok(SeedRun { record, model: agent.actor })
        }
    }
}

/// Runs every (arm, seed) pair on a pool of `jobs` threads. Non-finite
/// losses abort only the affected seed.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let probe = experiment_probe(cfg)?;
    let arms = cfg.resolved_arms();
    let work: Vec<(usize, u64)> = (0..arms.len()).flat_map(|a| cfg.seeds.iter().map(move |&s| (a, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let results: Vec<Result<SeedRun>> =
        pool.install(|| work.par_iter().map(|&(a, seed)| run_one(cfg, &arms[a], &probe, seed)).collect());
    let mut outcomes: Vec<ArmOutcome> = arms.into_iter().map(|arm| ArmOutcome { arm, runs: vec![] }).collect();
    for ((a, _), r) in work.into_iter().zip(results) {
        outcomes[a].runs.push(r?);
    }
    let records: Vec<(ResolvedArm, Vec<RunRecord>)> = outcomes
        .iter()
        .map(|o| (o.arm.clone(), o.runs.iter().map(|r| r.record.clone()).collect()))
        .collect();
    let summary = Summary::of(cfg.suite, num_tasks(cfg), &records, cfg.baseline_index());
    Ok(ExperimentOutcome { config: cfg.clone(), probe, arms: outcomes, summary })
}

/// Where each artifact of a run lives.
pub struct OutputLayout {
    pub dir: PathBuf,
}

impl OutputLayout {
    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }
    pub fn probe(&self) -> PathBuf {
        self.dir.join("probe.json")
    }
    pub fn metrics(&self, arm: &str, seed: u64) -> PathBuf {
        self.dir.join(arm).join(format!("seed{seed}.csv"))
    }
    pub fn checkpoint(&self, arm: &str, seed: u64) -> PathBuf {
        self.dir.join(arm).join(format!("seed{seed}.checkpoint.json"))
    }
}

/// Writes manifest, summary, probe, per-seed CSVs and final checkpoints.
pub fn write_outputs(
    outcome: &ExperimentOutcome,
    config_path: &Path,
    dir: &Path,
    jobs: usize,
    started_unix: f64,
) -> Result<RunManifest> {
    let layout = OutputLayout { dir: dir.to_path_buf() };
    std::fs::create_dir_all(dir)?;
    for arm in &outcome.arms {
        std::fs::create_dir_all(dir.join(&arm.arm.name))?;
        for run in &arm.runs {
            let file = std::fs::File::create(layout.metrics(&arm.arm.name, run.record.seed))?;
            io::write_metrics_csv(std::io::BufWriter::new(file), &run.record.logs)?;
            io::write_json(&layout.checkpoint(&arm.arm.name, run.record.seed), &Checkpoint::from_model(&run.model))?;
        }
    }
    io::write_json(&layout.probe(), &outcome.probe)?;
    io::write_json(&layout.summary(), &outcome.summary)?;
    let manifest = RunManifest {
        config_path: config_path.display().to_string(),
        config_hash: io::config_hash(&outcome.config)?,
        resolved_config: outcome.config.clone(),
        seeds: outcome.config.seeds.clone(),
        output_dir: dir.display().to_string(),
        git_describe: io::git_describe(),
        started_unix,
        finished_unix: io::unix_now(),
        jobs,
        timing: outcome
            .arms
            .iter()
            .map(|a| {
                let t = a.timing();
                ArmTiming { arm: a.arm.name.clone(), steps: t.steps, mean_step_seconds: t.mean_step_seconds() }
            })
            .collect(),
    };
    io::write_json(&layout.manifest(), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"
seeds = [0, 1]
log_every = 10
[stream]
num_tasks = 2
steps_per_task = 20
eval_size = 32
[moe]
num_experts = 3
expert_widths = [8]
gate_widths = [4]
[[arms]]
name = "base"
[[arms]]
name = "sphere"
sphere = { ratio = 0.001 }
"#;

    #[test]
    fn runs_are_deterministic_and_paired() {
        let cfg = ExperimentConfig::from_toml_str(TINY).unwrap();
        let a = run_experiment(&cfg, 1).unwrap();
        let b = run_experiment(&cfg, 2).unwrap();
        assert_eq!(serde_json::to_string(&a.summary).unwrap(), serde_json::to_string(&b.summary).unwrap());
        assert_eq!(a.summary.paired.len(), 1);
        assert_eq!(a.summary.paired[0].per_seed.len(), 2);
        assert_eq!(a.arms[1].runs[0].record.logs.len(), 4);
    }

    #[test]
    fn ppo_suite_runs() {
        let cfg = ExperimentConfig::from_toml_str(
            "suite = \"ppo_toy\"\nseeds = [0]\n[moe]\nnum_experts = 2\nexpert_widths = [4]\ngate_widths = []\n\
             [ppo_toy]\nnum_goals = 2\ncritic_widths = [8]\n[ppo_toy.ppo]\niterations_per_task = 1\nrollout_steps = 64\nepochs = 1\neval_episodes = 2\n",
        )
        .unwrap();
        let out = run_experiment(&cfg, 1).unwrap();
        assert_eq!(out.summary.arms[0].per_task.len(), 2);
        assert_eq!(out.arms[0].runs[0].model.config().output_dim, ppo::ACTION_DIM);
    }
}
