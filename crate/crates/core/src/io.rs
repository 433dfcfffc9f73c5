//! On-disk formats: tensors, checkpoints, metrics CSV, summaries and run
//! manifests.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, ResolvedArm};
use crate::error::{Error, Result};
use crate::harness::{MetricsRecord, Protocol, RunRecord};
use crate::linalg::Matrix;
use crate::moe::{MoeConfig, MoeModel};
use crate::sphere::SphereConfig;

pub const CHECKPOINT_FORMAT: &str = "sphere-lab-checkpoint/1";

/// Model configuration plus the flat parameter vector.
///
/// Parameter order: gate layers first, then expert layers grouped by expert
/// and then by layer. Each layer contributes its bias-augmented weight
/// matrix `W` (`fan_out × (fan_in + 1)`, bias in the last column) in
/// column-major order, so `z = W [a; 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config: MoeConfig,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &MoeModel) -> Self {
        Checkpoint { format: CHECKPOINT_FORMAT.into(), config: model.config().clone(), params: model.flat_params() }
    }

    pub fn to_model(&self) -> Result<MoeModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unsupported checkpoint format `{}`", self.format)));
        }
        self.config.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("checkpoint contains non-finite parameters".into()));
        }
        MoeModel::from_flat(self.config.clone(), &self.params).map_err(|e| Error::Format(format!("checkpoint params: {e}")))
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MoeModel> {
    read_json::<Checkpoint>(path)?.to_model()
}

/// Reads a `{shape, data}` tensor; one-dimensional tensors become one row.
pub fn load_tensor(path: &Path) -> Result<Matrix> {
    read_json::<Matrix>(path)
}

pub const METRICS_CSV_HEADER: &str = "# sphere-lab metrics v1";

/// Writes one CSV row per log point after the version comment line.
pub fn write_metrics_csv<W: Write>(out: W, logs: &[MetricsRecord]) -> Result<()> {
    let mut out = out;
    writeln!(out, "{METRICS_CSV_HEADER}")?;
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(out);
    for rec in logs {
        w.serialize(rec).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: BufRead>(mut input: R) -> Result<Vec<MetricsRecord>> {
    let mut first = String::new();
    input.read_line(&mut first)?;
    if first.trim_end() != METRICS_CSV_HEADER {
        return Err(Error::Format(format!("expected `{METRICS_CSV_HEADER}`, found `{}`", first.trim_end())));
    }
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Stat { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Stat { mean, std, n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: usize,
    pub success: Stat,
    pub eval_loss: Stat,
    pub re_k: Stat,
}

/// Per-seed aggregates over the task sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub mean_success: f64,
    pub final_success: f64,
    pub first_re_k: f64,
    pub end_re_k: f64,
    pub completed: bool,
}

impl SeedSummary {
    pub fn of(run: &RunRecord, num_tasks: usize) -> Option<Self> {
        let (first, last) = (run.finals.first()?, run.finals.last()?);
        Some(SeedSummary {
            seed: run.seed,
            mean_success: run.finals.iter().map(|f| f.success).sum::<f64>() / run.finals.len() as f64,
            final_success: last.success,
            first_re_k: first.re_k,
            end_re_k: last.re_k,
            completed: run.aborted.is_none() && run.finals.len() == num_tasks,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbortNote {
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    pub protocol: Protocol,
    pub sphere: SphereConfig,
    pub per_seed: Vec<SeedSummary>,
    pub aborted: Vec<AbortNote>,
    pub per_task: Vec<TaskSummary>,
    pub mean_success: Stat,
    pub final_success: Stat,
    pub first_re_k: Stat,
    pub end_re_k: Stat,
}

impl ArmSummary {
    pub fn of(arm: &ResolvedArm, runs: &[RunRecord], num_tasks: usize) -> Self {
        let per_seed: Vec<SeedSummary> = runs.iter().filter_map(|r| SeedSummary::of(r, num_tasks)).collect();
        let done: Vec<&SeedSummary> = per_seed.iter().filter(|s| s.completed).collect();
        let pick = |f: fn(&SeedSummary) -> f64| Stat::of(&done.iter().map(|s| f(s)).collect::<Vec<_>>());
        let per_task = (0..num_tasks)
            .map(|t| {
                let finals: Vec<_> = runs.iter().filter_map(|r| r.finals.get(t)).collect();
                TaskSummary {
                    task: t,
                    success: Stat::of(&finals.iter().map(|f| f.success).collect::<Vec<_>>()),
                    eval_loss: Stat::of(&finals.iter().map(|f| f.eval_loss).collect::<Vec<_>>()),
                    re_k: Stat::of(&finals.iter().map(|f| f.re_k).collect::<Vec<_>>()),
                }
            })
            .collect();
        ArmSummary {
            name: arm.name.clone(),
            protocol: arm.protocol,
            sphere: arm.sphere.clone(),
            aborted: runs
                .iter()
                .filter_map(|r| r.aborted.as_ref().map(|a| AbortNote { seed: r.seed, reason: a.clone() }))
                .collect(),
            per_task,
            mean_success: pick(|s| s.mean_success),
            final_success: pick(|s| s.final_success),
            first_re_k: pick(|s| s.first_re_k),
            end_re_k: pick(|s| s.end_re_k),
            per_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedDelta {
    pub seed: u64,
    pub mean_success: f64,
    pub end_re_k: f64,
}

/// An arm compared seed-by-seed with the baseline arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub arm: String,
    pub baseline: String,
    pub per_seed: Vec<SeedDelta>,
    pub mean_success: Stat,
    pub end_re_k: Stat,
    pub positive_success_seeds: usize,
    pub positive_re_k_seeds: usize,
}

impl PairedDelta {
    pub fn of(arm: &ArmSummary, baseline: &ArmSummary) -> Self {
        let per_seed: Vec<SeedDelta> = arm
            .per_seed
            .iter()
            .filter(|s| s.completed)
            .filter_map(|s| {
                let b = baseline.per_seed.iter().find(|b| b.seed == s.seed && b.completed)?;
                Some(SeedDelta { seed: s.seed, mean_success: s.mean_success - b.mean_success, end_re_k: s.end_re_k - b.end_re_k })
            })
            .collect();
        PairedDelta {
            arm: arm.name.clone(),
            baseline: baseline.name.clone(),
            mean_success: Stat::of(&per_seed.iter().map(|d| d.mean_success).collect::<Vec<_>>()),
            end_re_k: Stat::of(&per_seed.iter().map(|d| d.end_re_k).collect::<Vec<_>>()),
            positive_success_seeds: per_seed.iter().filter(|d| d.mean_success > 0.0).count(),
            positive_re_k_seeds: per_seed.iter().filter(|d| d.end_re_k > 0.0).count(),
            per_seed,
        }
    }
}

/// Per-task finals and seed statistics for every arm, plus paired deltas
/// of every other arm against the baseline arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub suite: crate::config::Suite,
    pub num_tasks: usize,
    pub probe_note: String,
    pub arms: Vec<ArmSummary>,
    pub paired: Vec<PairedDelta>,
}

impl Summary {
    pub fn of(
        suite: crate::config::Suite,
        num_tasks: usize,
        arms: &[(ResolvedArm, Vec<RunRecord>)],
        baseline: usize,
    ) -> Self {
        let summaries: Vec<ArmSummary> = arms.iter().map(|(a, runs)| ArmSummary::of(a, runs, num_tasks)).collect();
        let paired = summaries
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != baseline)
            .map(|(_, s)| PairedDelta::of(s, &summaries[baseline]))
            .collect();
        let probe_note = match suite {
            crate::config::Suite::Supervised => "probe: Gaussian inputs of the first task's distribution, reserved seed",
            crate::config::Suite::PpoToy => "probe: states visited by a uniform random policy on the first goal, reserved seed",
        };
        Summary { suite, num_tasks, probe_note: probe_note.into(), arms: summaries, paired }
    }

    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn paired(&self, arm: &str) -> Option<&PairedDelta> {
        self.paired.iter().find(|p| p.arm == arm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmTiming {
    pub arm: String,
    pub steps: usize,
    pub mean_step_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_path: String,
    /// SHA-256 of the resolved config serialized as compact JSON.
    pub config_hash: String,
    pub resolved_config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub git_describe: Option<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub jobs: usize,
    pub timing: Vec<ArmTiming>,
}

pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let canonical = serde_json::to_string(cfg)?;
    Ok(Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

/// `git describe --always --dirty`, if a repository is reachable.
pub fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git").args(["describe", "--always", "--dirty", "--tags"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_owned()).filter(|s| !s.is_empty())
}

pub fn unix_now() -> f64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}
