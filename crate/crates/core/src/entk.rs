//! Empirical NTK diagnostics: exact and matrix-free kernels, stochastic
//! Lanczos quadrature, Gauss–Newton block structure and Kronecker proxies.
//!
//! Vector outputs are reduced to the per-sample scalar `1ᵀf(x)` everywhere a
//! Jacobian appears.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, tridiagonal_eigen, Matrix};
use crate::moe::{self, param_layout, ForwardTrace, MoeModel, ParamBlock};
use crate::spectral::{self, entropy_perturbation_bound, SpsdMatrix, Spectrum};

pub const ENTK_CAP: usize = 512;
pub const GAUSS_NEWTON_CAP: usize = 4096;

/// A symmetric linear map known only through matrix-vector products.
pub trait SymmetricOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

impl SymmetricOperator for Matrix {
    fn dim(&self) -> usize {
        self.rows()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols() {
            return Err(Error::ShapeMismatch(format!("vector of length {} for {} columns", v.len(), self.cols())));
        }
        Ok(self.matvec(v))
    }
}

impl SymmetricOperator for SpsdMatrix {
    fn dim(&self) -> usize {
        SpsdMatrix::dim(self)
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.matrix().apply(v)
    }
}

/// `v ↦ J Jᵀ v` on a probe batch without forming `J`.
pub struct EntkOperator<'m> {
    model: &'m MoeModel,
    trace: ForwardTrace,
}

impl<'m> EntkOperator<'m> {
    pub fn new(model: &'m MoeModel, batch: &Matrix) -> Result<Self> {
        let (_, trace) = moe::forward(model, batch)?;
        Ok(EntkOperator { model, trace })
    }

    pub fn trace(&self) -> &ForwardTrace {
        &self.trace
    }

    /// `Jᵀv` as a flat parameter vector.
    pub fn vjp(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.trace.batch_size();
        if v.len() != n {
            return Err(Error::ShapeMismatch(format!("vector of length {} for batch of {n}", v.len())));
        }
        let cot = Matrix::from_fn(n, self.model.config().output_dim, |i, _| v[i]);
        Ok(moe::backward(self.model, &self.trace, &cot)?.flatten())
    }
}

impl SymmetricOperator for EntkOperator<'_> {
    fn dim(&self) -> usize {
        self.trace.batch_size()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        moe::jvp(self.model, &self.trace, &self.vjp(v)?)
    }
}

fn jacobian(model: &MoeModel, batch: &Matrix) -> Result<Matrix> {
    moe::per_sample_jacobian(model, batch)
}

/// `K = J Jᵀ` on `batch`.
pub fn exact_entk(model: &MoeModel, batch: &Matrix) -> Result<SpsdMatrix> {
    if batch.rows() > ENTK_CAP {
        return Err(Error::TooLarge { size: batch.rows(), cap: ENTK_CAP });
    }
    Ok(SpsdMatrix::from_trusted(jacobian(model, batch)?.outer_gram()))
}

/// `(1/N) JᵀJ` on `batch`.
pub fn gauss_newton(model: &MoeModel, batch: &Matrix) -> Result<SpsdMatrix> {
    let p = model.param_count();
    if p > GAUSS_NEWTON_CAP {
        return Err(Error::TooLarge { size: p, cap: GAUSS_NEWTON_CAP });
    }
    let mut g = jacobian(model, batch)?.gram();
    g.scale_in_place(1.0 / batch.rows().max(1) as f64);
    Ok(SpsdMatrix::from_trusted(g))
}

pub fn spectral_plasticity_exact(model: &MoeModel, probe_batch: &Matrix) -> Result<f64> {
    exact_entk(model, probe_batch)?.effective_rank()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlqConfig {
    pub num_probes: usize,
    pub lanczos_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub reorthogonalize: bool,
}

fn yes() -> bool {
    true
}

impl Default for SlqConfig {
    fn default() -> Self {
        SlqConfig { num_probes: 16, lanczos_steps: 30, seed: 0, reorthogonalize: true }
    }
}

impl SlqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_probes == 0 {
            return Err(Error::invalid("SLQ needs at least one probe"));
        }
        if self.lanczos_steps < 2 {
            return Err(Error::invalid("SLQ needs at least two Lanczos steps"));
        }
        Ok(())
    }
}

/// Lanczos tridiagonalization from `start`. Stops early when the Krylov space
/// is exhausted, so the returned tridiagonal may be shorter than `steps`.
pub fn lanczos(
    op: &dyn SymmetricOperator,
    start: &[f64],
    steps: usize,
    reorthogonalize: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = op.dim();
    let z_norm = norm(start);
    if start.len() != n || !(z_norm > 0.0) {
        return Err(Error::invalid("Lanczos needs a nonzero start vector of the operator's size"));
    }
    let steps = steps.min(n);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut alpha = Vec::with_capacity(steps);
    let mut beta: Vec<f64> = Vec::with_capacity(steps);
    let mut q: Vec<f64> = start.iter().map(|x| x / z_norm).collect();
    let mut scale = 0.0_f64;
    for j in 0..steps {
        let mut w = op.apply(&q)?;
        let a = dot(&w, &q);
        axpy(-a, &q, &mut w);
        if j > 0 {
            axpy(-beta[j - 1], &basis[j - 1], &mut w);
        }
        if reorthogonalize {
            for _ in 0..2 {
                for b in basis.iter().chain(std::iter::once(&q)) {
                    let c = dot(&w, b);
                    axpy(-c, b, &mut w);
                }
            }
        }
        alpha.push(a);
        basis.push(std::mem::take(&mut q));
        let b = norm(&w);
        scale = scale.max(a.abs()).max(b);
        if j + 1 == steps || b <= 1e-10 * scale {
            break;
        }
        beta.push(b);
        q = w.into_iter().map(|x| x / b).collect();
    }
    Ok((alpha, beta))
}

/// `x log x`, zero at and below `floor`.
fn x_log_x(x: f64, floor: f64) -> f64 {
    if x > floor {
        x * x.ln()
    } else {
        0.0
    }
}

/// Per-probe quadrature values and the resulting effective-rank estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlqEstimate {
    /// `zᵀKz` per probe.
    pub probe_traces: Vec<f64>,
    /// Gauss-quadrature `zᵀ f(K) z` per probe, `f(x) = x log x`.
    pub probe_trace_f: Vec<f64>,
    pub trace: f64,
    pub trace_f: f64,
    pub effective_rank: f64,
}

/// Probe vectors used by [`slq_estimate`]: Gaussian directions rescaled to
/// norm `√dim`, so `E[z zᵀ] = I`. Probe `p` draws from stream `p`.
pub fn slq_probes(dim: usize, cfg: &SlqConfig) -> Vec<Vec<f64>> {
    (0..cfg.num_probes)
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(p as u64);
            let mut z: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let c = (dim as f64).sqrt() / norm(&z);
            z.iter_mut().for_each(|x| *x *= c);
            z
        })
        .collect()
}

pub fn slq_estimate(op: &dyn SymmetricOperator, cfg: &SlqConfig) -> Result<SlqEstimate> {
    cfg.validate()?;
    let probes = slq_probes(op.dim(), cfg);
    let per_probe = probes
        .par_iter()
        .map(|z| {
            let (alpha, beta) = lanczos(op, z, cfg.lanczos_steps, cfg.reorthogonalize)?;
            let eig = tridiagonal_eigen(&alpha, &beta);
            let z2 = dot(z, z);
            let top = eig.values.iter().fold(0.0_f64, |m, &v| m.max(v));
            let floor = spectral::CLIP_RELATIVE * top;
            let (mut t, mut f) = (0.0, 0.0);
            for (k, &theta) in eig.values.iter().enumerate() {
                let w = eig.vectors[(0, k)].powi(2);
                t += w * theta;
                f += w * x_log_x(theta, floor);
            }
            Ok((z2 * t, z2 * f))
        })
        .collect::<Result<Vec<_>>>()?;
    let (probe_traces, probe_trace_f): (Vec<f64>, Vec<f64>) = per_probe.into_iter().unzip();
    let m = cfg.num_probes as f64;
    let trace = probe_traces.iter().sum::<f64>() / m;
    let trace_f = probe_trace_f.iter().sum::<f64>() / m;
    if !(trace > 0.0) {
        return Err(Error::ZeroTrace);
    }
    let effective_rank = (trace.ln() - trace_f / trace).exp();
    Ok(SlqEstimate { probe_traces, probe_trace_f, trace, trace_f, effective_rank })
}

/// Matrix-free estimate of `r_e(K) = exp(log Tr K − Tr f(K)/Tr K)`.
pub fn spectral_plasticity_slq(op: &dyn SymmetricOperator, cfg: &SlqConfig) -> Result<f64> {
    Ok(slq_estimate(op, cfg)?.effective_rank)
}

/// One plain gradient step of rate `eta` on `L = Σ_i c_i 1ᵀf(x_i)`; returns
/// `max_i |Δf_i + η (K c)_i|`, the deviation from the linearized update.
pub fn functional_update_check(model: &MoeModel, batch: &Matrix, loss_cotangent: &[f64], eta: f64) -> Result<f64> {
    let op = EntkOperator::new(model, batch)?;
    let grad = op.vjp(loss_cotangent)?;
    let kc = moe::jvp(model, op.trace(), &grad)?;
    let mut stepped = model.clone();
    let mut params = model.flat_params();
    axpy(-eta, &grad, &mut params);
    stepped.set_flat_params(&params)?;
    let project = |y: &Matrix| (0..y.rows()).map(|i| y.row(i).iter().sum::<f64>()).collect::<Vec<_>>();
    let before = project(&op.trace().output);
    let after = project(&moe::forward(&stepped, batch)?.0);
    Ok(before
        .iter()
        .zip(&after)
        .zip(&kc)
        .map(|((b, a), k)| (a - b + eta * k).abs())
        .fold(0.0, f64::max))
}

/// Which parameter group a layer block belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "layer", rename_all = "snake_case")]
pub enum LayerKind {
    Gate(usize),
    /// Weight layer `ℓ` (0-based) of every expert together.
    Expert(usize),
}

#[derive(Clone, Debug)]
pub struct LayerBlock {
    pub kind: LayerKind,
    /// Flat parameter indices of this layer, in flattening order.
    pub indices: Vec<usize>,
    pub block: SpsdMatrix,
    pub nuclear_norm: f64,
}

/// Gauss–Newton matrix split by the parameter flattening into the gate,
/// expert and cross blocks and into per-layer diagonal blocks.
#[derive(Clone, Debug)]
pub struct GnBlocks {
    pub gate_params: usize,
    pub gate: SpsdMatrix,
    pub expert: SpsdMatrix,
    /// `P_gate × P_expert`.
    pub cross: Matrix,
    pub layers: Vec<LayerBlock>,
    /// Nuclear-norm shares of the layer blocks.
    pub alpha: Vec<f64>,
}

impl GnBlocks {
    pub fn param_count(&self) -> usize {
        self.gate.dim() + self.expert.dim()
    }

    /// Reassembles the full Gauss–Newton matrix.
    pub fn assemble(&self) -> SpsdMatrix {
        let pg = self.gate_params;
        let mut out = Matrix::zeros(self.param_count(), self.param_count());
        out.set_block(0, 0, self.gate.matrix());
        out.set_block(pg, pg, self.expert.matrix());
        out.set_block(0, pg, &self.cross);
        out.set_block(pg, 0, &self.cross.transpose());
        SpsdMatrix::from_trusted(out)
    }

    /// Layerwise block-diagonal approximation placed at the original indices.
    pub fn layer_block_diagonal(&self) -> SpsdMatrix {
        let p = self.param_count();
        let mut out = Matrix::zeros(p, p);
        for lb in &self.layers {
            for (a, &i) in lb.indices.iter().enumerate() {
                for (b, &j) in lb.indices.iter().enumerate() {
                    out.data_mut()[i * p + j] = lb.block.matrix()[(a, b)];
                }
            }
        }
        SpsdMatrix::from_trusted(out)
    }

    /// `exp(H(α) + Σ α_ℓ log r_e(block_ℓ))` over the layer blocks.
    pub fn mixture_effective_rank(&self) -> Result<f64> {
        let blocks: Vec<SpsdMatrix> = self.layers.iter().map(|l| l.block.clone()).collect();
        spectral::block_effrank_mixture(&blocks)
    }
}

fn layer_indices(model: &MoeModel) -> Vec<(LayerKind, Vec<usize>)> {
    let mut out: Vec<(LayerKind, Vec<usize>)> = Vec::new();
    let gate_layers = model.gate_weights().len();
    let expert_layers = model.config().expert_shapes().len();
    for l in 0..gate_layers {
        out.push((LayerKind::Gate(l), vec![]));
    }
    for l in 0..expert_layers {
        out.push((LayerKind::Expert(l), vec![]));
    }
    for seg in param_layout(model.config()) {
        let slot = match seg.block {
            ParamBlock::Gate { layer } => layer,
            ParamBlock::Expert { layer, .. } => gate_layers + layer,
        };
        out[slot].1.extend(seg.range());
    }
    out
}

pub fn gn_partition(model: &MoeModel, batch: &Matrix) -> Result<GnBlocks> {
    let full = gauss_newton(model, batch)?;
    let g = full.matrix();
    let pg = model.gate_param_count();
    let p = model.param_count();
    let gate = SpsdMatrix::from_trusted(g.block(0, 0, pg, pg));
    let expert = SpsdMatrix::from_trusted(g.block(pg, pg, p - pg, p - pg));
    let cross = g.block(0, pg, pg, p - pg);
    let layers: Vec<LayerBlock> = layer_indices(model)
        .into_iter()
        .map(|(kind, indices)| {
            let block = SpsdMatrix::from_trusted(g.select(&indices, &indices));
            let nuclear_norm = block.trace();
            LayerBlock { kind, indices, block, nuclear_norm }
        })
        .collect();
    let total: f64 = layers.iter().map(|l| l.nuclear_norm).sum();
    if !(total > 0.0) {
        return Err(Error::ZeroTrace);
    }
    let alpha = layers.iter().map(|l| l.nuclear_norm / total).collect();
    Ok(GnBlocks { gate_params: pg, gate, expert, cross, layers, alpha })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCosine {
    pub cosine: f64,
    /// Relative size of the dropped cross blocks, `√P ‖Δ_bd‖_F / tr`.
    pub epsilon: f64,
    /// Bound on `|log r_e(G) − log r_e(blockdiag G)|`.
    pub bound: f64,
    pub actual_gap: f64,
}

/// Normalized gate–expert block cosine and the effective-rank gap bound it
/// implies for the gate/expert block-diagonal approximation.
pub fn gate_expert_block_cosine(blocks: &GnBlocks) -> Result<BlockCosine> {
    let cross = blocks.cross.frobenius_norm();
    let denom = (blocks.gate.matrix().frobenius_norm() * blocks.expert.matrix().frobenius_norm()).sqrt();
    let cosine = if cross == 0.0 {
        0.0
    } else if denom > 0.0 {
        cross / denom
    } else {
        return Err(Error::ZeroBlock);
    };
    let trace = blocks.gate.trace() + blocks.expert.trace();
    if !(trace > 0.0) {
        return Err(Error::ZeroTrace);
    }
    let p = blocks.param_count();
    let epsilon = (p as f64).sqrt() * std::f64::consts::SQRT_2 * cross / trace;
    let full = blocks.assemble().spectrum().entropy()?;
    let split = spectral::effrank_mixture_from_spectra(&[blocks.gate.spectrum(), blocks.expert.spectrum()])?.ln();
    Ok(BlockCosine { cosine, epsilon, bound: entropy_perturbation_bound(epsilon, p), actual_gap: (full - split).abs() })
}

/// Gate–expert block cosine computed from `N × N` per-block kernels instead of
/// the `P × P` Gauss–Newton matrix; agrees with
/// [`gate_expert_block_cosine`] at any parameter count.
pub fn gate_expert_cosine(model: &MoeModel, batch: &Matrix) -> Result<f64> {
    let j = moe::per_sample_jacobian(model, batch)?;
    let pg = model.gate_param_count();
    let rows: Vec<usize> = (0..j.rows()).collect();
    let kg = j.select(&rows, &(0..pg).collect::<Vec<_>>()).outer_gram();
    let ke = j.select(&rows, &(pg..j.cols()).collect::<Vec<_>>()).outer_gram();
    let cross_sq: f64 = kg.data().iter().zip(ke.data()).map(|(a, b)| a * b).sum();
    if !(cross_sq > 0.0) {
        return Ok(0.0);
    }
    Ok(cross_sq.sqrt() / (kg.frobenius_norm() * ke.frobenius_norm()).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KronProxy {
    /// `r_e(A) · r_e(G)`.
    pub effective_rank: f64,
    /// `k / (κ(A) κ(G))`.
    pub lower_bound: f64,
}

pub fn kron_proxy(a: &SpsdMatrix, g: &SpsdMatrix, k: usize) -> Result<KronProxy> {
    let (sa, sg) = (a.spectrum(), g.spectrum());
    let kappa = sa.condition_number() * sg.condition_number();
    if !kappa.is_finite() {
        return Err(Error::SingularInput);
    }
    Ok(KronProxy {
        effective_rank: sa.effective_rank()? * sg.effective_rank()?,
        lower_bound: k as f64 / kappa,
    })
}

/// Frobenius inner products `⟨x_s x_sᵀ − X̄, x_t x_tᵀ − X̄⟩` for all token pairs,
/// with `X̄` the mean outer product.
fn centered_outer_inner(tokens: &[Vec<f64>]) -> Matrix {
    let t = tokens.len();
    let raw = Matrix::from_fn(t, t, |s, u| dot(&tokens[s], &tokens[u]).powi(2));
    let row_mean: Vec<f64> = (0..t).map(|s| raw.row(s).iter().sum::<f64>() / t as f64).collect();
    let mean = row_mean.iter().sum::<f64>() / t as f64;
    Matrix::from_fn(t, t, |s, u| raw[(s, u)] - row_mean[s] - row_mean[u] + mean)
}

/// `(lhs, rhs)` for the K-FAC factorization residual
/// `‖(1/T) Σ_t (g gᵀ) ⊗ (a aᵀ) − Ḡ ⊗ Ā‖_F ≤ rms‖g gᵀ − Ḡ‖_F · rms‖a aᵀ − Ā‖_F`.
pub fn kfac_residual_bound(token_features: &[Vec<f64>], token_grads: &[Vec<f64>]) -> Result<(f64, f64)> {
    if token_features.is_empty() || token_grads.is_empty() {
        return Err(Error::EmptyInput);
    }
    if token_features.len() != token_grads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature tokens versus {} gradient tokens",
            token_features.len(),
            token_grads.len()
        )));
    }
    let t = token_features.len() as f64;
    let ca = centered_outer_inner(token_features);
    let cg = centered_outer_inner(token_grads);
    // ‖Σ_t ΔG_t ⊗ ΔA_t‖² = Σ_{s,u} ⟨ΔG_s, ΔG_u⟩⟨ΔA_s, ΔA_u⟩.
    let lhs = (dot(ca.data(), cg.data()).max(0.0)).sqrt() / t;
    let rms = |c: &Matrix| (c.trace().max(0.0) / t).sqrt();
    Ok((lhs, rms(&cg) * rms(&ca)))
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch(format!("{} versus {} samples", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::DegenerateVariance);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    let tol = 1e-24 * n;
    if sxx <= tol * mx.abs().max(1.0).powi(2) || syy <= tol * my.abs().max(1.0).powi(2) {
        return Err(Error::DegenerateVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Activation and backprop factors of expert weight layer `layer`
/// (0-based) and the dimension of its exact block.
pub fn layer_factors(model: &MoeModel, trace: &ForwardTrace, layer: usize) -> Result<(SpsdMatrix, SpsdMatrix, usize)> {
    let shapes = model.config().expert_shapes();
    let &(rows, cols) = shapes.get(layer).ok_or(Error::BadLayer { layer, hidden: shapes.len() })?;
    let a = moe::feature_gram(&moe::weighted_input_matrix(trace, layer)?)?;
    let backprop = moe::expert_output_backprop(model, trace)?;
    let g = moe::gradient_gram(&moe::backprop_matrix(&backprop, layer)?)?;
    Ok((a, g, model.config().num_experts * rows * cols))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProxyReport {
    pub layer: usize,
    pub proxy_effective_rank: f64,
    pub lower_bound: f64,
    /// Present when the exact block is small enough to form.
    pub exact_effective_rank: Option<f64>,
}

/// Kronecker proxy and lower bound for one expert weight layer, with both
/// factors shifted by `ridge` to make them invertible.
pub fn layer_proxy_report(model: &MoeModel, trace: &ForwardTrace, layer: usize, ridge: f64) -> Result<LayerProxyReport> {
    let (a, g, k) = layer_factors(model, trace, layer)?;
    let proxy = kron_proxy(&spectral::ridge_shift(&a, ridge)?, &spectral::ridge_shift(&g, ridge)?, k)?;
    let exact_effective_rank = match moe::expert_block_gram_exact(model, trace, layer) {
        Ok(block) => Some(block.effective_rank()?),
        Err(Error::TooLarge { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(LayerProxyReport {
        layer,
        proxy_effective_rank: proxy.effective_rank,
        lower_bound: proxy.lower_bound,
        exact_effective_rank,
    })
}

/// Which per-batch quantities to correlate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationPair {
    /// `r_e` of the last hidden weighted feature Gram against `r_e(K)`.
    FeatureVsEntk,
    /// Kronecker proxy of the last hidden expert weight layer against its
    /// exact block. The output layer is used only when there are no hidden
    /// layers; its backprop factor is constant under the summed-output
    /// Jacobian, which would make the comparison trivial.
    ProxyVsExpertBlock,
}

/// The two per-batch effective ranks compared by `pair`.
pub fn correlation_sample(model: &MoeModel, batch: &Matrix, pair: CorrelationPair) -> Result<(f64, f64)> {
    match pair {
        CorrelationPair::FeatureVsEntk => {
            let (_, trace) = moe::forward(model, batch)?;
            let hidden = model.config().num_hidden();
            let phi = moe::weighted_feature_matrix(&trace, hidden)?;
            let x = moe::feature_gram(&phi)?.effective_rank()?;
            Ok((x, spectral_plasticity_exact(model, batch)?))
        }
        CorrelationPair::ProxyVsExpertBlock => {
            let (_, trace) = moe::forward(model, batch)?;
            let last = model.config().num_hidden().saturating_sub(1);
            let (a, g, _) = layer_factors(model, &trace, last)?;
            let x = a.effective_rank()? * g.effective_rank()?;
            let y = moe::expert_block_gram_exact(model, &trace, last)?.effective_rank()?;
            Ok((x, y))
        }
    }
}

pub const MIN_CORRELATION_BATCHES: usize = 10;

/// Pearson correlation of the `pair` quantities across batches.
pub fn proxy_target_correlation(model: &MoeModel, batches: &[Matrix], pair: CorrelationPair) -> Result<f64> {
    if batches.len() < MIN_CORRELATION_BATCHES {
        return Err(Error::invalid(format!(
            "correlation needs at least {MIN_CORRELATION_BATCHES} batches, got {}",
            batches.len()
        )));
    }
    let samples = batches
        .par_iter()
        .map(|b| correlation_sample(model, b, pair))
        .collect::<Result<Vec<_>>>()?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = samples.into_iter().unzip();
    pearson(&xs, &ys)
}

/// Spectrum of the operator's dense matrix, assembled from basis vectors.
pub fn materialize(op: &dyn SymmetricOperator) -> Result<Matrix> {
    let n = op.dim();
    let mut out = Matrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = op.apply(&e)?;
        e[j] = 0.0;
        for (i, v) in col.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// Exact Hutchinson–quadrature target `zᵀ f(K) z` for a dense symmetric matrix.
pub fn exact_quadratic_form_f(k: &Matrix, z: &[f64]) -> f64 {
    let eig = crate::linalg::symmetric_eigen(k);
    let top = eig.values.iter().fold(0.0_f64, |m, &v| m.max(v));
    let floor = spectral::CLIP_RELATIVE * top;
    let mut total = 0.0;
    for (j, &lambda) in eig.values.iter().enumerate() {
        let proj: f64 = (0..z.len()).map(|i| eig.vectors[(i, j)] * z[i]).sum();
        total += proj * proj * x_log_x(lambda, floor);
    }
    total
}

/// Effective rank from a spectrum without validation, for callers that
/// already hold eigenvalues.
pub fn effective_rank_of_values(values: Vec<f64>) -> Result<f64> {
    Spectrum::new(values)?.effective_rank()
}
