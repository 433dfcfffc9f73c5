//! Synthetic continual task streams, isolated and sequential training
//! protocols, and the per-step diagnostics battery.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::entk;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::moe::{self, init_model, ForwardTrace, GradBundle, MoeConfig, MoeModel};
use crate::optim::{clip_global_norm, Optimizer, OptimizerConfig};
use crate::spectral::{routing_trace_weights, BlockPartition, SpsdMatrix};
use crate::sphere::{self, SphereConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    /// Fixed random teacher applied to a task-specific rotation of the input.
    #[default]
    RotatingRegression,
    /// Nearest-prototype classes on rotated inputs with permuted labels.
    PiecewiseClassification,
}

fn d_num_tasks() -> usize {
    10
}
fn d_steps() -> usize {
    2000
}
fn d_batch() -> usize {
    64
}
fn d_eval() -> usize {
    256
}
fn d_input() -> usize {
    8
}
fn d_output() -> usize {
    1
}
fn d_teacher() -> usize {
    16
}
fn d_threshold() -> f64 {
    0.1
}
fn d_gain() -> f64 {
    1.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    #[serde(default)]
    pub kind: StreamKind,
    #[serde(default = "d_num_tasks")]
    pub num_tasks: usize,
    #[serde(default = "d_steps")]
    pub steps_per_task: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_eval")]
    pub eval_size: usize,
    #[serde(default = "d_input")]
    pub input_dim: usize,
    /// Regression outputs, or number of classes.
    #[serde(default = "d_output")]
    pub output_dim: usize,
    /// Hidden width of the regression teacher.
    #[serde(default = "d_teacher")]
    pub teacher_width: usize,
    /// Input weight scale of the regression teacher; larger is less smooth.
    #[serde(default = "d_gain")]
    pub teacher_gain: f64,
    /// Squared-error threshold of the regression success proxy, relative to
    /// unit-variance targets.
    #[serde(default = "d_threshold")]
    pub success_threshold: f64,
    /// Offset added to the run seed when generating the stream.
    #[serde(default)]
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            kind: StreamKind::RotatingRegression,
            num_tasks: d_num_tasks(),
            steps_per_task: d_steps(),
            batch_size: d_batch(),
            eval_size: d_eval(),
            input_dim: d_input(),
            output_dim: d_output(),
            teacher_width: d_teacher(),
            teacher_gain: d_gain(),
            success_threshold: d_threshold(),
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks < 2 {
            return Err(Error::Config("stream.num_tasks must be at least 2".into()));
        }
        if self.steps_per_task == 0 || self.batch_size == 0 || self.eval_size == 0 {
            return Err(Error::Config("stream sizes must be positive".into()));
        }
        if !(self.teacher_gain > 0.0) {
            return Err(Error::Config("stream.teacher_gain must be positive".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.teacher_width == 0 {
            return Err(Error::Config("stream dimensions must be positive".into()));
        }
        if self.kind == StreamKind::PiecewiseClassification && self.output_dim < 2 {
            return Err(Error::Config("classification streams need output_dim >= 2".into()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * Distribution::<f64>::sample(&StandardNormal, rng))
}

/// Haar-random orthogonal matrix via Gram–Schmidt on a Gaussian matrix.
fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    let g = gaussian(rng, d, d, 1.0);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    for i in 0..d {
        let mut v = g.row(i).to_vec();
        for _ in 0..2 {
            for u in &q {
                let c = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
            }
        }
        let n = crate::linalg::norm(&v);
        v.iter_mut().for_each(|a| *a /= n);
        q.push(v);
    }
    Matrix::from_rows(&q)
}

/// Random two-layer tanh network shared by every task of a regression stream.
#[derive(Clone, Debug)]
struct Teacher {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    scale: f64,
}

impl Teacher {
    fn new(rng: &mut ChaCha8Rng, d: usize, width: usize, out: usize, gain: f64) -> Self {
        let w1 = gaussian(rng, width, d, gain / (d as f64).sqrt());
        let b1 = (0..width).map(|_| 0.5 * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>();
        let w2 = gaussian(rng, out, width, 1.0 / (width as f64).sqrt());
        let mut t = Teacher { w1, b1, w2, scale: 1.0 };
        let calib = gaussian(rng, 2048, d, 1.0);
        let y = t.apply(&calib);
        let mean = y.data().iter().sum::<f64>() / y.data().len() as f64;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.data().len() as f64;
        t.scale = 1.0 / var.sqrt().max(1e-12);
        t
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut h = x.matmul_t(&self.w1);
        for i in 0..h.rows() {
            h.row_mut(i).iter_mut().zip(&self.b1).for_each(|(v, b)| *v = (*v + b).tanh());
        }
        h.matmul_t(&self.w2).scale(self.scale)
    }
}

#[derive(Clone, Debug)]
enum Target {
    Regression { teacher: Teacher },
    Classification { prototypes: Matrix, labels: Vec<usize> },
}

/// One task of a stream: an input distribution (standard normal), a target
/// map and a fixed evaluation set.
#[derive(Clone, Debug)]
pub struct Task {
    pub index: usize,
    rotation: Matrix,
    target: Target,
    pub eval_inputs: Matrix,
    pub eval_targets: Matrix,
    sampler_seed: u64,
}

impl Task {
    pub fn input_dim(&self) -> usize {
        self.rotation.rows()
    }

    pub fn targets(&self, x: &Matrix) -> Matrix {
        let z = x.matmul_t(&self.rotation);
        match &self.target {
            Target::Regression { teacher } => teacher.apply(&z),
            Target::Classification { prototypes, labels } => {
                let scores = z.matmul_t(prototypes);
                Matrix::from_fn(x.rows(), labels.len(), |i, c| {
                    let best = argmax(scores.row(i));
                    if labels[best] == c {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
        }
    }

    /// Generator of this task's training minibatches.
    pub fn sampler(&self, salt: u64) -> TaskSampler {
        TaskSampler { rng: ChaCha8Rng::seed_from_u64(self.sampler_seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)) }
    }

    pub fn sample(&self, sampler: &mut TaskSampler, n: usize) -> (Matrix, Matrix) {
        let x = gaussian(&mut sampler.rng, n, self.input_dim(), 1.0);
        let y = self.targets(&x);
        (x, y)
    }
}

pub struct TaskSampler {
    rng: ChaCha8Rng,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct TaskStream {
    pub config: StreamConfig,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn generate(config: &StreamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(config.seed));
        let d = config.input_dim;
        let shared = match config.kind {
            StreamKind::RotatingRegression => {
                Target::Regression { teacher: Teacher::new(&mut rng, d, config.teacher_width, config.output_dim, config.teacher_gain) }
            }
            StreamKind::PiecewiseClassification => Target::Classification {
                prototypes: gaussian(&mut rng, config.output_dim, d, 1.0),
                labels: (0..config.output_dim).collect(),
            },
        };
        let mut tasks = Vec::with_capacity(config.num_tasks);
        for index in 0..config.num_tasks {
            let rotation = if index == 0 { Matrix::identity(d) } else { random_rotation(&mut rng, d) };
            let target = match &shared {
                Target::Classification { prototypes, labels } => {
                    let mut labels = labels.clone();
                    if index > 0 {
                        for i in (1..labels.len()).rev() {
                            labels.swap(i, rng.random_range(0..=i));
                        }
                    }
                    Target::Classification { prototypes: prototypes.clone(), labels }
                }
                other => other.clone(),
            };
            let sampler_seed = rng.random();
            let eval_inputs = gaussian(&mut rng, config.eval_size, d, 1.0);
            let mut task = Task {
                index,
                rotation,
                target,
                eval_inputs,
                eval_targets: Matrix::zeros(0, 0),
                sampler_seed,
            };
            task.eval_targets = task.targets(&task.eval_inputs);
            tasks.push(task);
        }
        Ok(TaskStream { config: config.clone(), tasks })
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn is_classification(&self) -> bool {
        self.config.kind == StreamKind::PiecewiseClassification
    }

    /// Task loss and its cotangent with respect to the outputs.
    pub fn loss(&self, output: &Matrix, targets: &Matrix) -> (f64, Matrix) {
        if self.is_classification() {
            cross_entropy(output, targets)
        } else {
            mse(output, targets)
        }
    }

    /// `(loss, success)` on a labelled set.
    pub fn evaluate(&self, model: &MoeModel, inputs: &Matrix, targets: &Matrix) -> Result<(f64, f64)> {
        let (y, _) = moe::forward(model, inputs)?;
        let (loss, _) = self.loss(&y, targets);
        let n = inputs.rows();
        let hits = (0..n)
            .filter(|&i| {
                if self.is_classification() {
                    argmax(y.row(i)) == argmax(targets.row(i))
                } else {
                    let se: f64 = y.row(i).iter().zip(targets.row(i)).map(|(a, b)| (a - b).powi(2)).sum();
                    se / (self.output_dim() as f64) < self.config.success_threshold
                }
            })
            .count();
        Ok((loss, hits as f64 / n as f64))
    }
}

/// Stream generation with default sizes.
pub fn generate_task_stream(seed: u64, num_tasks: usize, kind: StreamKind) -> Result<TaskStream> {
    let output_dim = if kind == StreamKind::PiecewiseClassification { 4 } else { 1 };
    TaskStream::generate(&StreamConfig { kind, num_tasks, output_dim, ..Default::default() }, seed)
}

/// Mean squared error over all entries and its output cotangent.
pub fn mse(output: &Matrix, targets: &Matrix) -> (f64, Matrix) {
    let count = output.data().len().max(1) as f64;
    let diff = output.sub(targets);
    (diff.frobenius_norm_sq() / count, diff.scale(2.0 / count))
}

/// Mean softmax cross-entropy against one-hot targets and its cotangent.
pub fn cross_entropy(logits: &Matrix, targets: &Matrix) -> (f64, Matrix) {
    let n = logits.rows().max(1) as f64;
    let mut cot = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + z.ln();
        for (c, (&l, &t)) in row.iter().zip(targets.row(i)).enumerate() {
            loss -= t * (l - log_z);
            cot[(i, c)] = ((l - log_z).exp() - t) / n;
        }
    }
    (loss / n, cot)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Fresh initialization for every task.
    Isolated,
    /// One model carried across all tasks.
    #[default]
    Sequential,
}

/// Fraction of last-hidden expert units whose mean absolute activation over
/// the batch is at most `1e-6` times the layer mean.
pub fn dormant_ratio(trace: &ForwardTrace) -> f64 {
    let Some(acts) = trace.expert_act.iter().map(|a| a.last()).collect::<Option<Vec<_>>>() else {
        return 0.0;
    };
    let n = trace.batch_size().max(1) as f64;
    let means: Vec<f64> = acts
        .iter()
        .flat_map(|a| (0..a.cols()).map(move |u| a.column(u).iter().map(|v| v.abs()).sum::<f64>() / n))
        .collect();
    if means.is_empty() {
        return 0.0;
    }
    let layer_mean = means.iter().sum::<f64>() / means.len() as f64;
    means.iter().filter(|&&m| m <= 1e-6 * layer_mean).count() as f64 / means.len() as f64
}

/// Frobenius norm of the gating-weighted last hidden feature matrix.
pub fn feature_norm(trace: &ForwardTrace) -> f64 {
    let hidden = trace.expert_act.first().map_or(0, Vec::len);
    if hidden == 0 {
        return 0.0;
    }
    moe::weighted_feature_matrix(trace, hidden).map_or(0.0, |phi| phi.frobenius_norm())
}

pub fn grad_norm(bundle: &GradBundle) -> f64 {
    bundle.norm()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecializationMetrics {
    pub overlap: f64,
    pub orthogonality: f64,
    pub max_vio: f64,
    pub active_ratio: f64,
    pub routing_entropy: f64,
    pub beta: Vec<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = crate::linalg::norm(a) * crate::linalg::norm(b);
    if d > 0.0 {
        dot(a, b) / d
    } else {
        0.0
    }
}

/// Load statistics `(max_vio, active_ratio, routing_entropy)` from per-expert
/// selection counts.
pub fn load_metrics(counts: &[usize]) -> (f64, f64, f64) {
    let e = counts.len();
    let total: usize = counts.iter().sum();
    if e == 0 || total == 0 {
        return (0.0, 0.0, 0.0);
    }
    let mean = total as f64 / e as f64;
    let max_vio = counts.iter().map(|&c| (c as f64 - mean).abs() / mean).fold(0.0, f64::max);
    let active = counts.iter().filter(|&&c| c > 0).count() as f64 / e as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    let normalized = if e > 1 { entropy / (e as f64).ln() } else { 1.0 };
    (max_vio, active, normalized)
}

pub fn specialization_metrics(trace: &ForwardTrace) -> Result<SpecializationMetrics> {
    let num_e = trace.gating.cols();
    if trace.selected.first().is_some_and(|s| s.len() < 2) {
        return Err(Error::UndefinedForK1);
    }
    let hidden = trace.expert_act.first().map_or(0, Vec::len);
    if hidden == 0 {
        return Err(Error::BadLayer { layer: 1, hidden: 0 });
    }
    let feats: Vec<&Matrix> = trace.expert_act.iter().map(|a| &a[hidden - 1]).collect();
    let (mut sum_cos, mut sum_orth, mut pairs) = (0.0, 0.0, 0usize);
    let mut counts = vec![0usize; num_e];
    for (i, sel) in trace.selected.iter().enumerate() {
        for (a, &e) in sel.iter().enumerate() {
            counts[e] += 1;
            for &f in &sel[a + 1..] {
                let c = cosine(feats[e].row(i), feats[f].row(i));
                sum_cos += c;
                sum_orth += 1.0 - c.abs();
                pairs += 1;
            }
        }
    }
    let (max_vio, active_ratio, routing_entropy) = load_metrics(&counts);
    let phi = moe::weighted_feature_matrix(trace, hidden)?;
    let width = phi.cols() / num_e;
    let beta = routing_trace_weights(&SpsdMatrix::gram_of_rows(&phi), &BlockPartition::uniform(num_e, width)?)
        .unwrap_or_else(|_| vec![0.0; num_e]);
    let p = pairs.max(1) as f64;
    Ok(SpecializationMetrics {
        overlap: sum_cos / p,
        orthogonality: sum_orth / p,
        max_vio,
        active_ratio,
        routing_entropy,
        beta,
    })
}

/// One logged point of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub task: usize,
    pub task_step: usize,
    pub global_step: usize,
    pub train_loss: f64,
    pub penalty: f64,
    pub lambda: f64,
    pub eval_loss: f64,
    pub eval_success: f64,
    pub re_k: f64,
    pub dormant_ratio: f64,
    pub feature_norm: f64,
    pub grad_norm: f64,
}

/// Evaluation at the end of a task segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFinal {
    pub task: usize,
    pub eval_loss: f64,
    pub success: f64,
    pub re_k: f64,
    pub specialization: Option<SpecializationMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub logs: Vec<MetricsRecord>,
    pub finals: Vec<TaskFinal>,
    /// Reason the run stopped early, if it did.
    pub aborted: Option<String>,
    /// Wall-clock time of the optimizer steps alone.
    #[serde(default)]
    pub timing: StepTiming,
}

/// Accumulated wall-clock time of training steps, excluding logging and
/// evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub steps: usize,
    pub seconds: f64,
}

impl StepTiming {
    pub fn mean_step_seconds(&self) -> f64 {
        if self.steps == 0 {
            return 0.0;
        }
        self.seconds / self.steps as f64
    }
}

/// Training settings shared by every task segment.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub sphere: SphereConfig,
    pub optimizer: OptimizerConfig,
    pub log_every: usize,
}

/// Gradient of `task + λ · SPHERE` for one minibatch, with λ adaptive unless
/// fixed. Returns the combined gradient and the loss pieces.
pub fn total_gradient(
    model: &MoeModel,
    x: &Matrix,
    output_loss: impl Fn(&Matrix) -> (f64, Matrix),
    sphere_cfg: &SphereConfig,
) -> Result<(GradBundle, f64, f64, f64, ForwardTrace)> {
    let (y, trace) = moe::forward(model, x)?;
    let (task_loss, cot) = output_loss(&y);
    if sphere_cfg.is_disabled() {
        let g = moe::backward(model, &trace, &cot)?;
        return Ok((g, task_loss, 0.0, 0.0, trace));
    }
    let mut term = sphere::sphere_term(model, &trace, &cot, sphere_cfg)?;
    if let Some(lambda) = sphere_cfg.fixed_lambda {
        term.scale(lambda);
        let mut cots = term.as_cotangents();
        cots.output = Some(&cot);
        let g = moe::backward_with(model, &trace, &cots)?;
        return Ok((g, task_loss, term.penalty, lambda, trace));
    }
    let mut g = moe::backward(model, &trace, &cot)?;
    let gs = moe::backward_with(model, &trace, &term.as_cotangents())?;
    let lambda = sphere::adaptive_lambda(g.norm(), gs.norm(), sphere_cfg);
    g.add_scaled(lambda, &gs);
    Ok((g, task_loss, term.penalty, lambda, trace))
}

/// Trains `model` on one task segment. Returns the step logs; `Err` only for
/// invalid inputs or a non-finite loss.
#[allow(clippy::too_many_arguments)]
pub fn train_on_task(
    model: &mut MoeModel,
    opt: &mut Optimizer,
    stream: &TaskStream,
    task: &Task,
    settings: &TrainSettings,
    probe: &Matrix,
    seed: u64,
    global_offset: usize,
    timing: &mut StepTiming,
) -> Result<Vec<MetricsRecord>> {
    let steps = stream.config.steps_per_task;
    let mut sampler = task.sampler(seed);
    let mut logs = Vec::new();
    for step in 0..steps {
        let (x, t) = task.sample(&mut sampler, stream.config.batch_size);
        let clock = Instant::now();
        let (grad, task_loss, penalty, lambda, trace) =
            total_gradient(model, &x, |y| stream.loss(y, &t), &settings.sphere)?;
        if !task_loss.is_finite() || !(penalty.is_finite()) {
            return Err(Error::NonFiniteLoss { step: global_offset + step });
        }
        let mut flat = grad.flatten();
        let pre_norm = clip_global_norm(&mut [&mut flat], settings.optimizer.max_grad_norm);
        let mut params = model.flat_params();
        opt.step(&mut params, &flat, settings.optimizer.lr_at(step, steps));
        model.set_flat_params(&params)?;
        timing.seconds += clock.elapsed().as_secs_f64();
        timing.steps += 1;
        let last = step + 1 == steps;
        if last || (settings.log_every > 0 && (step + 1) % settings.log_every == 0) {
            let (eval_loss, eval_success) = stream.evaluate(model, &task.eval_inputs, &task.eval_targets)?;
            logs.push(MetricsRecord {
                seed,
                task: task.index,
                task_step: step + 1,
                global_step: global_offset + step + 1,
                train_loss: task_loss,
                penalty,
                lambda,
                eval_loss,
                eval_success,
                re_k: entk::spectral_plasticity_exact(model, probe)?,
                dormant_ratio: dormant_ratio(&trace),
                feature_norm: feature_norm(&trace),
                grad_norm: pre_norm,
            });
        }
    }
    Ok(logs)
}

/// Frozen probe batch drawn from the first task's input distribution.
pub fn probe_batch(stream: &TaskStream, size: usize, probe_seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    gaussian(&mut rng, size, stream.input_dim(), 1.0)
}

/// Runs every task of `stream` under `protocol` for one seed.
pub fn run_protocol(
    stream: &TaskStream,
    moe_cfg: &MoeConfig,
    protocol: Protocol,
    settings: &TrainSettings,
    probe: &Matrix,
    seed: u64,
) -> Result<RunRecord> {
    Ok(run_protocol_with_model(stream, moe_cfg, protocol, settings, probe, seed)?.0)
}

/// [`run_protocol`] that also returns the model at the end of the last
/// segment it completed.
pub fn run_protocol_with_model(
    stream: &TaskStream,
    moe_cfg: &MoeConfig,
    protocol: Protocol,
    settings: &TrainSettings,
    probe: &Matrix,
    seed: u64,
) -> Result<(RunRecord, MoeModel)> {
    let mut cfg = moe_cfg.clone();
    cfg.input_dim = stream.input_dim();
    cfg.output_dim = stream.output_dim();
    cfg.seed = seed;
    let mut model = init_model(&cfg)?;
    let mut opt = Optimizer::new(settings.optimizer.kind, model.param_count());
    let mut record = RunRecord { seed, logs: vec![], finals: vec![], aborted: None, timing: StepTiming::default() };
    let steps = stream.config.steps_per_task;
    for task in &stream.tasks {
        if protocol == Protocol::Isolated {
            cfg.seed = seed.wrapping_mul(1_000_003).wrapping_add(task.index as u64);
            model = init_model(&cfg)?;
            opt = Optimizer::new(settings.optimizer.kind, model.param_count());
        }
        let offset = task.index * steps;
        match train_on_task(&mut model, &mut opt, stream, task, settings, probe, seed, offset, &mut record.timing) {
            Ok(logs) => record.logs.extend(logs),
            Err(e @ Error::NonFiniteLoss { .. }) => {
                record.aborted = Some(e.to_string());
                return Ok((record, model));
            }
            Err(e) => return Err(e),
        }
        let (eval_loss, success) = stream.evaluate(&model, &task.eval_inputs, &task.eval_targets)?;
        let (_, trace) = moe::forward(&model, probe)?;
        let specialization = match specialization_metrics(&trace) {
            Ok(m) => Some(m),
            Err(Error::UndefinedForK1 | Error::BadLayer { .. }) => None,
            Err(e) => return Err(e),
        };
        record.finals.push(TaskFinal {
            task: task.index,
            eval_loss,
            success,
            re_k: entk::spectral_plasticity_exact(&model, probe)?,
            specialization,
        });
    }
    Ok((record, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{Activation, ForwardTrace};

    fn fake_trace(acts: Vec<Matrix>, gating: Matrix, selected: Vec<Vec<usize>>) -> ForwardTrace {
        ForwardTrace::synthetic(selected, gating, acts.into_iter().map(|a| vec![a]).collect())
    }

    #[test]
    fn stream_is_deterministic_and_shares_dims() {
        let a = generate_task_stream(3, 4, StreamKind::RotatingRegression).unwrap();
        let b = generate_task_stream(3, 4, StreamKind::RotatingRegression).unwrap();
        for (s, t) in a.tasks.iter().zip(&b.tasks) {
            assert_eq!(s.eval_targets, t.eval_targets);
            assert_eq!(s.input_dim(), 8);
        }
        assert_ne!(a.tasks[0].eval_targets, a.tasks[1].eval_targets);
        let c = generate_task_stream(3, 3, StreamKind::PiecewiseClassification).unwrap();
        let counts: Vec<f64> = (0..4).map(|k| c.tasks[0].eval_targets.column(k).iter().sum()).collect();
        assert!(counts.iter().filter(|&&x| x > 0.0).count() >= 2);
        assert!(generate_task_stream(0, 1, StreamKind::RotatingRegression).is_err());
    }

    #[test]
    fn loss_cotangents_match_finite_differences() {
        let y = Matrix::from_rows(&[[0.3, -1.0, 0.2], [1.5, 0.1, -0.4]]);
        let t = Matrix::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]);
        for f in [mse, cross_entropy] {
            let (_, cot) = f(&y, &t);
            for k in 0..6 {
                let mut up = y.clone();
                up.data_mut()[k] += 1e-6;
                let mut down = y.clone();
                down.data_mut()[k] -= 1e-6;
                let fd = (f(&up, &t).0 - f(&down, &t).0) / 2e-6;
                assert!((fd - cot.data()[k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn dormant_examples() {
        let n = 3;
        let gating = Matrix::from_fn(n, 1, |_, _| 1.0);
        let sel = vec![vec![0]; n];
        assert_eq!(dormant_ratio(&fake_trace(vec![Matrix::zeros(n, 4)], gating.clone(), sel.clone())), 1.0);
        let pos = Matrix::from_fn(n, 4, |i, j| 1.0 + (i + j) as f64);
        assert_eq!(dormant_ratio(&fake_trace(vec![pos.clone()], gating.clone(), sel.clone())), 0.0);
        let mut dead = pos;
        for i in 0..n {
            dead[(i, 2)] = 0.0;
        }
        assert_eq!(dormant_ratio(&fake_trace(vec![dead], gating, sel)), 0.25);
    }

    #[test]
    fn load_examples() {
        let (vio, active, ent) = load_metrics(&[3, 1]);
        assert!((vio - 0.5).abs() < 1e-15 && active == 1.0);
        assert!((ent - 0.8113).abs() < 1e-4);
        let (vio, _, ent) = load_metrics(&[5, 5, 5]);
        assert_eq!(vio, 0.0);
        assert!((ent - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_expert_features_overlap_fully() {
        let n = 4;
        let f = Matrix::from_fn(n, 3, |i, j| (i * 3 + j) as f64 + 0.5);
        let gating = Matrix::from_fn(n, 2, |_, _| 0.5);
        let trace = fake_trace(vec![f.clone(), f], gating, vec![vec![0, 1]; n]);
        let m = specialization_metrics(&trace).unwrap();
        assert!((m.overlap - 1.0).abs() < 1e-12 && m.orthogonality.abs() < 1e-12);
        assert_eq!(m.max_vio, 0.0);
        assert!((m.beta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let one = fake_trace(vec![Matrix::zeros(n, 3)], Matrix::from_fn(n, 1, |_, _| 1.0), vec![vec![0]; n]);
        assert!(matches!(specialization_metrics(&one), Err(Error::UndefinedForK1)));
    }

    fn tiny_stream() -> TaskStream {
        let cfg = StreamConfig { num_tasks: 2, steps_per_task: 200, batch_size: 32, eval_size: 64, input_dim: 4, ..Default::default() };
        TaskStream::generate(&cfg, 1).unwrap()
    }

    fn tiny_moe() -> MoeConfig {
        MoeConfig {
            num_experts: 3,
            top_k: 2,
            expert_widths: vec![8],
            gate_widths: vec![4],
            activation: Activation::Tanh,
            ..MoeConfig::new(4, 1)
        }
    }

    fn settings(sphere: SphereConfig) -> TrainSettings {
        TrainSettings {
            sphere,
            optimizer: OptimizerConfig { lr_start: 1e-2, lr_end: 3e-3, ..Default::default() },
            log_every: 50,
        }
    }

    #[test]
    fn loss_decreases_on_first_task() {
        let stream = tiny_stream();
        let probe = probe_batch(&stream, 16, 7);
        let run = run_protocol(&stream, &tiny_moe(), Protocol::Sequential, &settings(SphereConfig::default()), &probe, 0)
            .unwrap();
        let first = &run.logs[0];
        let end = run.logs.iter().filter(|l| l.task == 0).last().unwrap();
        assert!(end.eval_loss < first.eval_loss, "{} vs {}", end.eval_loss, first.eval_loss);
        assert!(run.logs.len() >= 2);
        assert!(run.logs.iter().all(|l| l.re_k >= 1.0 - 1e-9 && l.re_k <= 16.0 + 1e-9));
        assert_eq!(run.finals.len(), 2);
    }

    #[test]
    fn zero_ratio_matches_disabled_penalty_bitwise() {
        let stream = tiny_stream();
        let probe = probe_batch(&stream, 8, 7);
        let off = run_protocol(&stream, &tiny_moe(), Protocol::Sequential, &settings(SphereConfig::default()), &probe, 4).unwrap();
        let zero = SphereConfig { variant: sphere::Variant::PerExpertSum, ..SphereConfig::with_ratio(0.0) };
        let on = run_protocol(&stream, &tiny_moe(), Protocol::Sequential, &settings(zero), &probe, 4).unwrap();
        let losses = |r: &RunRecord| r.logs.iter().map(|l| l.train_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&off), losses(&on));
    }

    #[test]
    fn sphere_run_stays_finite() {
        let stream = tiny_stream();
        let probe = probe_batch(&stream, 8, 7);
        let run = run_protocol(&stream, &tiny_moe(), Protocol::Isolated, &settings(SphereConfig::with_ratio(1e-1)), &probe, 2)
            .unwrap();
        assert!(run.aborted.is_none());
        assert!(run.logs.iter().all(|l| l.penalty.is_finite() && l.lambda > 0.0));
    }
}
