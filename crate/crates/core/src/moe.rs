//! Top-K mixture-of-experts MLP with hand-written reverse and forward mode.
//!
//! Every layer stores a bias-absorbed weight `W̃ = [W b]` of shape
//! `d_out × (d_in + 1)` and acts on the augmented input `[a; 1]`.
//!
//! Flat parameter order (checkpoints, Jacobian columns, gradients): gate
//! layers first, then experts in `(expert, layer)` order. Each matrix is
//! flattened column-major, so the per-sample gradient `g ãᵀ` of a layer
//! flattens to `ã ⊗ g`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::spectral::SpsdMatrix;

/// Largest Jacobian (`N · P` entries) materialized by [`per_sample_jacobian`].
pub const JACOBIAN_CAP: usize = 1 << 24;
/// Largest expert-layer block built by [`expert_block_gram_exact`].
pub const EXPERT_BLOCK_CAP: usize = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and the activation `a`.
    /// The ReLU subgradient at zero is zero.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

fn default_num_experts() -> usize {
    10
}
fn default_top_k() -> usize {
    2
}
fn default_widths() -> Vec<usize> {
    vec![32, 32]
}
fn default_gate_widths() -> Vec<usize> {
    vec![32]
}
fn default_temperature() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    #[serde(default)]
    pub input_dim: usize,
    #[serde(default)]
    pub output_dim: usize,
    #[serde(default = "default_num_experts")]
    pub num_experts: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Hidden widths of every expert.
    #[serde(default = "default_widths")]
    pub expert_widths: Vec<usize>,
    /// Hidden widths of the gate network.
    #[serde(default = "default_gate_widths")]
    pub gate_widths: Vec<usize>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

impl MoeConfig {
    /// Desk-scale defaults: 10 experts, top-2, two hidden layers of 32.
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        MoeConfig {
            input_dim,
            output_dim,
            num_experts: default_num_experts(),
            top_k: default_top_k(),
            expert_widths: default_widths(),
            gate_widths: default_gate_widths(),
            temperature: default_temperature(),
            activation: Activation::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("input_dim and output_dim must be positive".into()));
        }
        if self.num_experts == 0 {
            return Err(Error::Config("num_experts must be at least 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k must lie in 1..={}, got {}",
                self.num_experts, self.top_k
            )));
        }
        if self.expert_widths.contains(&0) || self.gate_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    fn chain(input: usize, hidden: &[usize], output: usize) -> Vec<(usize, usize)> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        dims.windows(2).map(|w| (w[1], w[0] + 1)).collect()
    }

    /// Bias-absorbed shapes of the gate layers.
    pub fn gate_shapes(&self) -> Vec<(usize, usize)> {
        Self::chain(self.input_dim, &self.gate_widths, self.num_experts)
    }

    /// Bias-absorbed shapes of one expert's layers.
    pub fn expert_shapes(&self) -> Vec<(usize, usize)> {
        Self::chain(self.input_dim, &self.expert_widths, self.output_dim)
    }

    pub fn gate_param_count(&self) -> usize {
        self.gate_shapes().iter().map(|(r, c)| r * c).sum()
    }

    pub fn expert_param_count(&self) -> usize {
        self.num_experts * self.expert_shapes().iter().map(|(r, c)| r * c).sum::<usize>()
    }

    pub fn param_count(&self) -> usize {
        self.gate_param_count() + self.expert_param_count()
    }

    pub fn num_hidden(&self) -> usize {
        self.expert_widths.len()
    }
}

/// Which matrix a flat-parameter segment belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamBlock {
    Gate { layer: usize },
    Expert { expert: usize, layer: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamSegment {
    pub block: ParamBlock,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSegment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Segments of the flat parameter vector, in storage order.
pub fn param_layout(config: &MoeConfig) -> Vec<ParamSegment> {
    let mut out = Vec::new();
    let mut offset = 0;
    let mut push = |block, (rows, cols): (usize, usize)| {
        out.push(ParamSegment { block, offset, rows, cols });
        offset += rows * cols;
    };
    for (layer, s) in config.gate_shapes().into_iter().enumerate() {
        push(ParamBlock::Gate { layer }, s);
    }
    for expert in 0..config.num_experts {
        for (layer, s) in config.expert_shapes().into_iter().enumerate() {
            push(ParamBlock::Expert { expert, layer }, s);
        }
    }
    out
}

/// Gate network plus `E` expert networks.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeModel {
    config: MoeConfig,
    pub(crate) gate: Vec<Matrix>,
    pub(crate) experts: Vec<Vec<Matrix>>,
}

pub fn init_model(config: &MoeConfig) -> Result<MoeModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut layer = |(rows, cols): (usize, usize)| {
        let fan_in = cols - 1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Matrix::from_fn(rows, cols, |_, j| {
            if j == fan_in {
                0.0
            } else {
                rng.random_range(-bound..bound)
            }
        })
    };
    let gate = config.gate_shapes().into_iter().map(&mut layer).collect();
    let experts = (0..config.num_experts)
        .map(|_| config.expert_shapes().into_iter().map(&mut layer).collect())
        .collect();
    Ok(MoeModel { config: config.clone(), gate, experts })
}

impl MoeModel {
    /// Assembles a model from explicit bias-absorbed matrices.
    pub fn from_weights(config: MoeConfig, gate: Vec<Matrix>, experts: Vec<Vec<Matrix>>) -> Result<Self> {
        config.validate()?;
        let check = |got: &[Matrix], want: &[(usize, usize)], what: &str| -> Result<()> {
            if got.len() != want.len() || got.iter().zip(want).any(|(m, s)| m.shape() != *s) {
                return Err(Error::ShapeMismatch(format!("{what} weights do not match the config")));
            }
            Ok(())
        };
        check(&gate, &config.gate_shapes(), "gate")?;
        if experts.len() != config.num_experts {
            return Err(Error::ShapeMismatch("wrong number of experts".into()));
        }
        for e in &experts {
            check(e, &config.expert_shapes(), "expert")?;
        }
        Ok(MoeModel { config, gate, experts })
    }

    pub fn from_flat(config: MoeConfig, params: &[f64]) -> Result<Self> {
        let mut model = init_model(&MoeConfig { seed: 0, ..config.clone() })?;
        model.config = config;
        model.set_flat_params(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &MoeConfig {
        &self.config
    }

    pub fn gate_weights(&self) -> &[Matrix] {
        &self.gate
    }

    pub fn expert_weights(&self) -> &[Vec<Matrix>] {
        &self.experts
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    pub fn gate_param_count(&self) -> usize {
        self.config.gate_param_count()
    }

    pub fn expert_param_count(&self) -> usize {
        self.config.expert_param_count()
    }

    fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        self.gate.iter().chain(self.experts.iter().flatten())
    }

    fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.gate.iter_mut().chain(self.experts.iter_mut().flatten())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for m in self.matrices() {
            out.extend(m.vec_col_major());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut at = 0;
        for m in self.matrices_mut() {
            let (r, c) = m.shape();
            *m = Matrix::from_col_major(r, c, &params[at..at + r * c])?;
            at += r * c;
        }
        Ok(())
    }

    /// `θ += c · grad`.
    pub fn apply_update(&mut self, c: f64, grad: &GradBundle) {
        for (m, g) in self.matrices_mut().zip(grad.matrices()) {
            m.add_scaled(c, g);
        }
    }

    fn signature(&self) -> Vec<(usize, usize)> {
        self.matrices().map(Matrix::shape).collect()
    }
}

/// Indices of the `k` largest logits, ties to the lowest index, plus the
/// softmax of `logits / τ` restricted to that set (zero elsewhere).
pub fn topk_route(logits: &[f64], k: usize, temperature: f64) -> (Vec<usize>, Vec<f64>) {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    let mut h = vec![0.0; logits.len()];
    let top = order.iter().map(|&e| logits[e] / temperature).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &e in &order {
        let w = (logits[e] / temperature - top).exp();
        h[e] = w;
        z += w;
    }
    for &e in &order {
        h[e] /= z;
    }
    (order, h)
}

/// Everything forward computes for a batch, kept for the backward passes and
/// the Gram builders.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// Gate pre-activations per layer; the last entry is the logits.
    pub gate_pre: Vec<Matrix>,
    /// Gate hidden activations.
    pub gate_act: Vec<Matrix>,
    pub selected: Vec<Vec<usize>>,
    /// `N × E` gating weights, zero off the selected set.
    pub gating: Matrix,
    /// `[expert][layer]` pre-activations; the last layer holds the expert
    /// output. Experts are evaluated on routed rows only; other rows are zero.
    pub expert_pre: Vec<Vec<Matrix>>,
    /// `[expert][hidden]` activations.
    pub expert_act: Vec<Vec<Matrix>>,
    pub output: Matrix,
    signature: Vec<(usize, usize)>,
}

impl ForwardTrace {
    /// Trace holding only routing and hidden activations, for metric tests.
    #[cfg(test)]
    pub(crate) fn synthetic(selected: Vec<Vec<usize>>, gating: Matrix, expert_act: Vec<Vec<Matrix>>) -> Self {
        let n = gating.rows();
        ForwardTrace {
            input: Matrix::zeros(n, 0),
            gate_pre: vec![],
            gate_act: vec![],
            selected,
            gating,
            expert_pre: expert_act.iter().map(|_| vec![]).collect(),
            expert_act,
            output: Matrix::zeros(n, 0),
            signature: vec![],
        }
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    pub fn logits(&self) -> &Matrix {
        self.gate_pre.last().expect("gate has an output layer")
    }

    pub fn expert_output(&self, e: usize) -> &Matrix {
        self.expert_pre[e].last().expect("expert has an output layer")
    }

    /// Input of expert layer `layer` (0-based), without the bias column.
    pub fn expert_layer_input(&self, e: usize, layer: usize) -> &Matrix {
        if layer == 0 {
            &self.input
        } else {
            &self.expert_act[e][layer - 1]
        }
    }

    fn gate_layer_input(&self, layer: usize) -> &Matrix {
        if layer == 0 {
            &self.input
        } else {
            &self.gate_act[layer - 1]
        }
    }
}

/// `[a 1] W̃ᵀ`.
fn affine(a: &Matrix, w: &Matrix) -> Matrix {
    let d_in = a.cols();
    debug_assert_eq!(w.cols(), d_in + 1);
    let mut out = Matrix::zeros(a.rows(), w.rows());
    for i in 0..a.rows() {
        let ai = a.row(i);
        let oi = out.row_mut(i);
        for (o, v) in oi.iter_mut().enumerate() {
            let wo = w.row(o);
            *v = dot(ai, &wo[..d_in]) + wo[d_in];
        }
    }
    out
}

/// `affine` evaluated on `rows` only; other rows stay zero.
fn affine_rows(a: &Matrix, w: &Matrix, rows: &[usize]) -> Matrix {
    let d_in = a.cols();
    let mut out = Matrix::zeros(a.rows(), w.rows());
    for &i in rows {
        let ai = a.row(i);
        let oi = out.row_mut(i);
        for (o, v) in oi.iter_mut().enumerate() {
            let wo = w.row(o);
            *v = dot(ai, &wo[..d_in]) + wo[d_in];
        }
    }
    out
}

fn activate(z: &Matrix, act: Activation) -> Matrix {
    let mut a = z.clone();
    a.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
    a
}

/// Multiplies a cotangent on activations by the activation derivative.
fn through_activation(da: &mut Matrix, z: &Matrix, a: &Matrix, act: Activation) {
    for ((d, &zv), &av) in da.data_mut().iter_mut().zip(z.data()).zip(a.data()) {
        *d *= act.derivative(zv, av);
    }
}

/// Gradient `δᵀ [a 1]` of a bias-absorbed layer.
fn layer_grad(delta: &Matrix, a: &Matrix) -> Matrix {
    let d_in = a.cols();
    let mut g = Matrix::zeros(delta.cols(), d_in + 1);
    for i in 0..delta.rows() {
        let ai = a.row(i);
        for (o, &d) in delta.row(i).iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let go = g.row_mut(o);
            axpy(d, ai, &mut go[..d_in]);
            go[d_in] += d;
        }
    }
    g
}

/// Cotangent on the layer input, `δ W` without the bias column.
fn input_cotangent(delta: &Matrix, w: &Matrix) -> Matrix {
    let d_in = w.cols() - 1;
    let mut out = Matrix::zeros(delta.rows(), d_in);
    for i in 0..delta.rows() {
        let oi = out.row_mut(i);
        for (o, &d) in delta.row(i).iter().enumerate() {
            if d != 0.0 {
                axpy(d, &w.row(o)[..d_in], oi);
            }
        }
    }
    out
}

fn scale_rows(m: &Matrix, weights: impl Fn(usize) -> f64) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let w = weights(i);
        out.row_mut(i).iter_mut().for_each(|v| *v *= w);
    }
    out
}

pub fn forward(model: &MoeModel, batch: &Matrix) -> Result<(Matrix, ForwardTrace)> {
    let cfg = &model.config;
    if batch.cols() != cfg.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "batch has {} features, model expects {}",
            batch.cols(),
            cfg.input_dim
        )));
    }
    let n = batch.rows();
    let act = cfg.activation;

    let mut gate_pre = Vec::with_capacity(model.gate.len());
    let mut gate_act = Vec::with_capacity(model.gate.len() - 1);
    for (l, w) in model.gate.iter().enumerate() {
        let input = if l == 0 { batch } else { &gate_act[l - 1] };
        let z = affine(input, w);
        if l + 1 < model.gate.len() {
            gate_act.push(activate(&z, act));
        }
        gate_pre.push(z);
    }
    let logits = gate_pre.last().expect("gate output layer");
    let mut gating = Matrix::zeros(n, cfg.num_experts);
    let mut selected = Vec::with_capacity(n);
    for i in 0..n {
        let (s, h) = topk_route(logits.row(i), cfg.top_k, cfg.temperature);
        gating.row_mut(i).copy_from_slice(&h);
        selected.push(s);
    }

    let mut expert_pre = Vec::with_capacity(cfg.num_experts);
    let mut expert_act = Vec::with_capacity(cfg.num_experts);
    let mut output = Matrix::zeros(n, cfg.output_dim);
    let mut routed: Vec<Vec<usize>> = vec![Vec::new(); cfg.num_experts];
    for (i, s) in selected.iter().enumerate() {
        s.iter().for_each(|&e| routed[e].push(i));
    }
    for (e, layers) in model.experts.iter().enumerate() {
        let mut pre = Vec::with_capacity(layers.len());
        let mut acts: Vec<Matrix> = Vec::with_capacity(layers.len() - 1);
        for (l, w) in layers.iter().enumerate() {
            let input = if l == 0 { batch } else { &acts[l - 1] };
            let z = affine_rows(input, w, &routed[e]);
            if l + 1 < layers.len() {
                acts.push(activate(&z, act));
            }
            pre.push(z);
        }
        let out_e = pre.last().expect("expert output layer");
        for i in 0..n {
            let h = gating[(i, e)];
            if h != 0.0 {
                axpy(h, out_e.row(i), output.row_mut(i));
            }
        }
        expert_pre.push(pre);
        expert_act.push(acts);
    }

    let trace = ForwardTrace {
        input: batch.clone(),
        gate_pre,
        gate_act,
        selected,
        gating,
        expert_pre,
        expert_act,
        output: output.clone(),
        signature: model.signature(),
    };
    Ok((output, trace))
}

/// Gradients shaped like the model, plus the pre-activation cotangents
/// `∂L/∂z` of every layer (rows are samples).
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    pub gate: Vec<Matrix>,
    pub experts: Vec<Vec<Matrix>>,
    /// `∂L/∂z` per gate layer; the last entry is the logit cotangent.
    pub gate_pre_grads: Vec<Matrix>,
    /// `∂L/∂z` per `[expert][layer]`, including the gating-weight factor.
    pub expert_pre_grads: Vec<Vec<Matrix>>,
}

impl GradBundle {
    pub fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        self.gate.iter().chain(self.experts.iter().flatten())
    }

    fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.gate.iter_mut().chain(self.experts.iter_mut().flatten())
    }

    /// Flattened in the model's parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in self.matrices() {
            out.extend(m.vec_col_major());
        }
        out
    }

    pub fn norm_sq(&self) -> f64 {
        self.matrices().map(Matrix::frobenius_norm_sq).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.matrices_mut().for_each(|m| m.scale_in_place(c));
    }

    /// `self += c · other` on the parameter gradients.
    pub fn add_scaled(&mut self, c: f64, other: &GradBundle) {
        for (a, b) in self.matrices_mut().zip(other.matrices()) {
            a.add_scaled(c, b);
        }
    }

    pub fn zeros_like(model: &MoeModel) -> GradBundle {
        GradBundle {
            gate: model.gate.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
            experts: model
                .experts
                .iter()
                .map(|ls| ls.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect())
                .collect(),
            gate_pre_grads: vec![],
            expert_pre_grads: vec![],
        }
    }
}

/// Cotangents fed into [`backward_with`].
#[derive(Clone, Debug, Default)]
pub struct Cotangents<'a> {
    /// `∂L/∂y`, `N × output_dim`.
    pub output: Option<&'a Matrix>,
    /// `∂L/∂Φ_ℓ` for weighted feature matrices, keyed by 1-based hidden layer.
    pub features: Vec<(usize, &'a Matrix)>,
    /// Direct cotangent on the gating weights, `N × E`.
    pub gating: Option<&'a Matrix>,
}

pub fn backward(model: &MoeModel, trace: &ForwardTrace, output_cotangent: &Matrix) -> Result<GradBundle> {
    backward_with(model, trace, &Cotangents { output: Some(output_cotangent), ..Default::default() })
}

/// Reverse mode with the top-K sets held fixed.
pub fn backward_with(model: &MoeModel, trace: &ForwardTrace, cot: &Cotangents<'_>) -> Result<GradBundle> {
    if trace.signature != model.signature() {
        return Err(Error::TraceMismatch("layer shapes differ".into()));
    }
    let cfg = &model.config;
    let n = trace.batch_size();
    let act = cfg.activation;
    let num_e = cfg.num_experts;
    if let Some(c) = cot.output {
        if c.shape() != (n, cfg.output_dim) {
            return Err(Error::ShapeMismatch("output cotangent shape".into()));
        }
    }
    let hidden = cfg.num_hidden();
    let width_of = |layer: usize| cfg.expert_widths[layer - 1];
    for &(layer, m) in &cot.features {
        if layer == 0 || layer > hidden {
            return Err(Error::BadLayer { layer, hidden });
        }
        if m.shape() != (n, num_e * width_of(layer)) {
            return Err(Error::ShapeMismatch(format!("feature cotangent for layer {layer}")));
        }
    }

    let mut dh = match cot.gating {
        Some(g) if g.shape() == (n, num_e) => g.clone(),
        Some(_) => return Err(Error::ShapeMismatch("gating cotangent shape".into())),
        None => Matrix::zeros(n, num_e),
    };

    let mut expert_grads = Vec::with_capacity(num_e);
    let mut expert_pre_grads = Vec::with_capacity(num_e);
    for (e, layers) in model.experts.iter().enumerate() {
        let h_col = |i: usize| trace.gating[(i, e)];
        let depth = layers.len();
        let mut grads = vec![Matrix::zeros(0, 0); depth];
        let mut pre_grads = vec![Matrix::zeros(0, 0); depth];
        let out_e = trace.expert_output(e);
        let mut delta = match cot.output {
            Some(c) => {
                for i in 0..n {
                    if h_col(i) != 0.0 {
                        dh[(i, e)] += dot(c.row(i), out_e.row(i));
                    }
                }
                scale_rows(c, h_col)
            }
            None => Matrix::zeros(n, cfg.output_dim),
        };
        for l in (0..depth).rev() {
            let input = trace.expert_layer_input(e, l);
            grads[l] = layer_grad(&delta, input);
            if l > 0 {
                let mut da = input_cotangent(&delta, &layers[l]);
                for &(layer, fc) in cot.features.iter().filter(|(layer, _)| *layer == l) {
                    let w = width_of(layer);
                    for i in 0..n {
                        let block = &fc.row(i)[e * w..(e + 1) * w];
                        let h = h_col(i);
                        if h != 0.0 {
                            dh[(i, e)] += dot(block, input.row(i));
                            axpy(h, block, da.row_mut(i));
                        }
                    }
                }
                through_activation(&mut da, &trace.expert_pre[e][l - 1], input, act);
                pre_grads[l] = std::mem::replace(&mut delta, da);
            } else {
                pre_grads[l] = std::mem::replace(&mut delta, Matrix::zeros(0, 0));
            }
        }
        expert_grads.push(grads);
        expert_pre_grads.push(pre_grads);
    }

    // Subset softmax: ∂L/∂s_j = h_j (∂L/∂h_j − Σ_k h_k ∂L/∂h_k) / τ on S.
    let mut delta = Matrix::zeros(n, num_e);
    for i in 0..n {
        let h = trace.gating.row(i);
        let dhi = dh.row(i);
        let mean: f64 = trace.selected[i].iter().map(|&k| h[k] * dhi[k]).sum();
        for &j in &trace.selected[i] {
            delta[(i, j)] = h[j] * (dhi[j] - mean) / cfg.temperature;
        }
    }
    let depth = model.gate.len();
    let mut gate_grads = vec![Matrix::zeros(0, 0); depth];
    let mut gate_pre_grads = vec![Matrix::zeros(0, 0); depth];
    for l in (0..depth).rev() {
        let input = trace.gate_layer_input(l);
        gate_grads[l] = layer_grad(&delta, input);
        if l > 0 {
            let mut da = input_cotangent(&delta, &model.gate[l]);
            through_activation(&mut da, &trace.gate_pre[l - 1], input, act);
            gate_pre_grads[l] = std::mem::replace(&mut delta, da);
        } else {
            gate_pre_grads[l] = std::mem::replace(&mut delta, Matrix::zeros(0, 0));
        }
    }

    Ok(GradBundle { gate: gate_grads, experts: expert_grads, gate_pre_grads, expert_pre_grads })
}

/// Directional derivative of every sample's projected output `1ᵀf(x_i)`
/// along the flat parameter direction `direction`.
pub fn jvp(model: &MoeModel, trace: &ForwardTrace, direction: &[f64]) -> Result<Vec<f64>> {
    if direction.len() != model.param_count() {
        return Err(Error::ShapeMismatch("tangent has the wrong length".into()));
    }
    if trace.signature != model.signature() {
        return Err(Error::TraceMismatch("layer shapes differ".into()));
    }
    let cfg = &model.config;
    let n = trace.batch_size();
    let act = cfg.activation;
    let mut dirs = Vec::new();
    let mut at = 0;
    for m in model.matrices() {
        let (r, c) = m.shape();
        dirs.push(Matrix::from_col_major(r, c, &direction[at..at + r * c])?);
        at += r * c;
    }
    let (gate_dirs, expert_dirs) = dirs.split_at(model.gate.len());

    // Tangent of one MLP given its weights, tangents and recorded activations.
    let propagate = |weights: &[Matrix], tangents: &[Matrix], pre: &[Matrix], inputs: &[&Matrix]| {
        let mut dz = Matrix::zeros(n, 0);
        for (l, (w, dw)) in weights.iter().zip(tangents).enumerate() {
            let input = inputs[l];
            let mut next = affine(input, dw);
            if l > 0 {
                let mut da = dz.clone();
                through_activation(&mut da, &pre[l - 1], input, act);
                let d_in = w.cols() - 1;
                for i in 0..n {
                    let dai = da.row(i).to_vec();
                    for (o, v) in next.row_mut(i).iter_mut().enumerate() {
                        *v += dot(&w.row(o)[..d_in], &dai);
                    }
                }
            }
            dz = next;
        }
        dz
    };

    let gate_inputs: Vec<&Matrix> = (0..model.gate.len()).map(|l| trace.gate_layer_input(l)).collect();
    let ds = propagate(&model.gate, gate_dirs, &trace.gate_pre, &gate_inputs);
    let layers_per_expert = model.experts.first().map_or(0, Vec::len);
    let mut out = vec![0.0; n];
    for e in 0..cfg.num_experts {
        let tangents = &expert_dirs[e * layers_per_expert..(e + 1) * layers_per_expert];
        let inputs: Vec<&Matrix> = (0..layers_per_expert).map(|l| trace.expert_layer_input(e, l)).collect();
        let dm = propagate(&model.experts[e], tangents, &trace.expert_pre[e], &inputs);
        let m = trace.expert_output(e);
        for (i, o) in out.iter_mut().enumerate() {
            let h = trace.gating[(i, e)];
            if h == 0.0 {
                continue;
            }
            let mean: f64 =
                trace.selected[i].iter().map(|&k| trace.gating[(i, k)] * ds[(i, k)]).sum::<f64>();
            let dh = h * (ds[(i, e)] - mean) / cfg.temperature;
            let m_sum: f64 = m.row(i).iter().sum();
            let dm_sum: f64 = dm.row(i).iter().sum();
            *o += dh * m_sum + h * dm_sum;
        }
    }
    Ok(out)
}

/// `N × P` matrix whose row `i` is `∇_θ 1ᵀf(x_i)` in flat parameter order.
pub fn per_sample_jacobian(model: &MoeModel, batch: &Matrix) -> Result<Matrix> {
    let (_, trace) = forward(model, batch)?;
    jacobian_from_trace(model, &trace)
}

pub fn jacobian_from_trace(model: &MoeModel, trace: &ForwardTrace) -> Result<Matrix> {
    let n = trace.batch_size();
    let p = model.param_count();
    if n * p > JACOBIAN_CAP {
        return Err(Error::TooLarge { size: n * p, cap: JACOBIAN_CAP });
    }
    let ones = Matrix::from_fn(n, model.config.output_dim, |_, _| 1.0);
    let bundle = backward(model, trace, &ones)?;
    let mut jac = Matrix::zeros(n, p);
    for seg in param_layout(&model.config) {
        let (delta, input) = match seg.block {
            ParamBlock::Gate { layer } => (&bundle.gate_pre_grads[layer], trace.gate_layer_input(layer)),
            ParamBlock::Expert { expert, layer } => {
                (&bundle.expert_pre_grads[expert][layer], trace.expert_layer_input(expert, layer))
            }
        };
        for i in 0..n {
            let row = &mut jac.row_mut(i)[seg.range()];
            let d = delta.row(i);
            for (c, &a) in input.row(i).iter().chain(std::iter::once(&1.0)).enumerate() {
                axpy(a, d, &mut row[c * seg.rows..(c + 1) * seg.rows]);
            }
        }
    }
    Ok(jac)
}

fn check_hidden(trace: &ForwardTrace, layer: usize) -> Result<()> {
    let hidden = trace.expert_act.first().map_or(0, Vec::len);
    if layer == 0 || layer > hidden {
        return Err(Error::BadLayer { layer, hidden });
    }
    Ok(())
}

/// Gating-weighted concatenation `[h_1 a_1 | … | h_E a_E]` of the hidden
/// expert activations at 1-based hidden layer `layer`.
pub fn weighted_feature_matrix(trace: &ForwardTrace, layer: usize) -> Result<Matrix> {
    check_hidden(trace, layer)?;
    Ok(concat_weighted(trace, |e| &trace.expert_act[e][layer - 1], false))
}

/// Gating-weighted, bias-augmented inputs `[h_e ã_e]` of expert weight layer
/// `layer` (0-based); these are the activation factors of that layer's
/// Jacobian rows.
pub fn weighted_input_matrix(trace: &ForwardTrace, layer: usize) -> Result<Matrix> {
    let depth = trace.expert_pre.first().map_or(0, Vec::len);
    if layer >= depth {
        return Err(Error::BadLayer { layer, hidden: depth });
    }
    Ok(concat_weighted(trace, |e| trace.expert_layer_input(e, layer), true))
}

fn concat_weighted<'t>(trace: &'t ForwardTrace, block: impl Fn(usize) -> &'t Matrix, augment: bool) -> Matrix {
    let num_e = trace.gating.cols();
    let w = block(0).cols() + usize::from(augment);
    let n = trace.batch_size();
    let mut phi = Matrix::zeros(n, num_e * w);
    for e in 0..num_e {
        let a = block(e);
        for i in 0..n {
            let h = trace.gating[(i, e)];
            if h == 0.0 {
                continue;
            }
            let dst = &mut phi.row_mut(i)[e * w..(e + 1) * w];
            for (d, &v) in dst.iter_mut().zip(a.row(i)) {
                *d = h * v;
            }
            if augment {
                dst[w - 1] = h;
            }
        }
    }
    phi
}

/// Unweighted expert backprop vectors `∂(1ᵀm_e)/∂z_{e,ℓ}` for every sample,
/// expert and layer. Rows outside an expert's routed set are evaluated at the
/// zero pre-activations recorded there.
pub fn expert_output_backprop(model: &MoeModel, trace: &ForwardTrace) -> Result<Vec<Vec<Matrix>>> {
    if trace.signature != model.signature() {
        return Err(Error::TraceMismatch("layer shapes differ".into()));
    }
    let n = trace.batch_size();
    let act = model.config.activation;
    let mut out = Vec::with_capacity(model.experts.len());
    for (e, layers) in model.experts.iter().enumerate() {
        let depth = layers.len();
        let mut per_layer = vec![Matrix::zeros(0, 0); depth];
        let mut delta = Matrix::from_fn(n, model.config.output_dim, |_, _| 1.0);
        for l in (0..depth).rev() {
            if l > 0 {
                let mut da = input_cotangent(&delta, &layers[l]);
                through_activation(&mut da, &trace.expert_pre[e][l - 1], trace.expert_layer_input(e, l), act);
                per_layer[l] = std::mem::replace(&mut delta, da);
            } else {
                per_layer[l] = std::mem::replace(&mut delta, Matrix::zeros(0, 0));
            }
        }
        out.push(per_layer);
    }
    Ok(out)
}

/// Concatenation `[g_1 | … | g_E]` of unweighted backprop vectors at expert
/// weight layer `layer` (0-based).
pub fn backprop_matrix(backprop: &[Vec<Matrix>], layer: usize) -> Result<Matrix> {
    let depth = backprop.first().map_or(0, Vec::len);
    if layer >= depth {
        return Err(Error::BadLayer { layer, hidden: depth });
    }
    let blocks: Vec<&Matrix> = backprop.iter().map(|b| &b[layer]).collect();
    let n = blocks[0].rows();
    let w = blocks[0].cols();
    Ok(Matrix::from_fn(n, w * blocks.len(), |i, j| blocks[j / w][(i, j % w)]))
}

pub fn feature_gram(phi: &Matrix) -> Result<SpsdMatrix> {
    if phi.rows() == 0 || phi.cols() == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(SpsdMatrix::gram_of_rows(phi))
}

pub fn gradient_gram(psi: &Matrix) -> Result<SpsdMatrix> {
    feature_gram(psi)
}

/// Exact same-layer Gauss–Newton block of expert weight layer `layer`
/// (0-based): `(1/N) Σ_i` of the per-expert `h h' (ã ã'ᵀ) ⊗ (g g'ᵀ)` blocks,
/// indexed like the Jacobian columns of that layer across experts.
pub fn expert_block_gram_exact(model: &MoeModel, trace: &ForwardTrace, layer: usize) -> Result<SpsdMatrix> {
    let shapes = model.config.expert_shapes();
    let &(rows, cols) = shapes.get(layer).ok_or(Error::BadLayer { layer, hidden: shapes.len() })?;
    let num_e = model.config.num_experts;
    let block = rows * cols;
    let dim = num_e * block;
    if dim > EXPERT_BLOCK_CAP {
        return Err(Error::TooLarge { size: dim, cap: EXPERT_BLOCK_CAP });
    }
    let g = expert_output_backprop(model, trace)?;
    let n = trace.batch_size();
    let mut out = Matrix::zeros(dim, dim);
    let mut row_e = vec![0.0; block];
    let mut row_f = vec![0.0; block];
    let fill = |row: &mut [f64], e: usize, i: usize| {
        let h = trace.gating[(i, e)];
        let a = trace.expert_layer_input(e, layer).row(i);
        let gi = g[e][layer].row(i);
        for c in 0..cols {
            let ac = if c + 1 == cols { h } else { h * a[c] };
            for r in 0..rows {
                row[c * rows + r] = ac * gi[r];
            }
        }
    };
    for i in 0..n {
        for &e in &trace.selected[i] {
            fill(&mut row_e, e, i);
            for &f in &trace.selected[i] {
                fill(&mut row_f, f, i);
                for (p, &x) in row_e.iter().enumerate() {
                    if x != 0.0 {
                        let dst = &mut out.row_mut(e * block + p)[f * block..(f + 1) * block];
                        axpy(x, &row_f, dst);
                    }
                }
            }
        }
    }
    out.scale_in_place(1.0 / n as f64);
    Ok(SpsdMatrix::from_trusted(out))
}
