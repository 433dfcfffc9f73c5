//! SPHERE isotropy penalty on gating-weighted expert feature Grams.
//!
//! For a feature matrix `Φ ∈ R^{N×m}` with Gram `A = ΦᵀΦ/N`, the penalty is
//! `‖A − (tr A/m) I‖_F² = ‖A‖_F² − tr(A)²/m`. The value and gradient are
//! formed on whichever Gram side is smaller; the isotropic reference always
//! uses the feature dimension `m`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::moe::{self, ForwardTrace, MoeConfig, MoeModel};
use crate::spectral::SpsdMatrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    LastLayer,
    AllLayers,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Penalty on the concatenated gating-weighted features.
    #[default]
    WeightedConcat,
    /// Penalty on every expert block separately, summed.
    PerExpertSum,
    /// Penalty on the output-layer backprop Gram.
    GradientGram,
    /// Penalty on the Kronecker proxy of the feature and backprop Grams.
    ProxyKron,
}

fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereConfig {
    /// Ratio ρ of the regularizer gradient norm to the task gradient norm.
    /// Zero disables the penalty; negative values flip its sign.
    #[serde(default)]
    pub ratio: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default)]
    pub variant: Variant,
    /// Constant coefficient used instead of the adaptive one.
    #[serde(default)]
    pub fixed_lambda: Option<f64>,
}

impl Default for SphereConfig {
    fn default() -> Self {
        SphereConfig {
            ratio: 0.0,
            eps: default_eps(),
            placement: Placement::LastLayer,
            variant: Variant::WeightedConcat,
            fixed_lambda: None,
        }
    }
}

impl SphereConfig {
    pub fn with_ratio(ratio: f64) -> Self {
        SphereConfig { ratio, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config("sphere.eps must be positive".into()));
        }
        if !self.ratio.is_finite() || self.fixed_lambda.is_some_and(|l| !l.is_finite()) {
            return Err(Error::Config("sphere.ratio and sphere.fixed_lambda must be finite".into()));
        }
        if self.placement == Placement::AllLayers
            && matches!(self.variant, Variant::GradientGram | Variant::ProxyKron)
        {
            return Err(Error::Config(
                "sphere.placement = \"all_layers\" is only defined for weighted_concat and per_expert_sum".into(),
            ));
        }
        Ok(())
    }

    /// True when the penalty contributes nothing to training.
    pub fn is_disabled(&self) -> bool {
        match self.fixed_lambda {
            Some(l) => l == 0.0,
            None => self.ratio == 0.0,
        }
    }
}

/// Which Gram is formed when evaluating the penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GramSide {
    /// `ΦᵀΦ/N`, `m × m`.
    Feature,
    /// `ΦΦᵀ/N`, `N × N`.
    Sample,
}

impl GramSide {
    pub fn cheaper(phi: &Matrix) -> Self {
        if phi.cols() <= phi.rows() {
            GramSide::Feature
        } else {
            GramSide::Sample
        }
    }
}

fn side_gram(phi: &Matrix, side: GramSide) -> Matrix {
    let n = phi.rows().max(1) as f64;
    let mut g = match side {
        GramSide::Feature => phi.gram(),
        GramSide::Sample => phi.outer_gram(),
    };
    g.scale_in_place(1.0 / n);
    g
}

pub fn sphere_loss_on(phi: &Matrix, side: GramSide) -> f64 {
    let g = side_gram(phi, side);
    let tr = g.trace();
    g.frobenius_norm_sq() - tr * tr / phi.cols() as f64
}

pub fn sphere_loss(phi: &Matrix) -> f64 {
    sphere_loss_on(phi, GramSide::cheaper(phi))
}

/// Penalty value and its gradient with respect to `Φ`.
pub fn sphere_loss_and_grad(phi: &Matrix) -> (f64, Matrix) {
    let side = GramSide::cheaper(phi);
    let n = phi.rows().max(1) as f64;
    let m = phi.cols() as f64;
    let mut g = side_gram(phi, side);
    let tr = g.trace();
    let value = g.frobenius_norm_sq() - tr * tr / m;
    g.add_diagonal(-tr / m);
    let mut grad = match side {
        GramSide::Feature => phi.matmul(&g),
        GramSide::Sample => g.matmul(phi),
    };
    grad.scale_in_place(4.0 / n);
    (value, grad)
}

/// [`sphere_loss_and_grad`] for `Φ` split into `blocks` equal column blocks
/// that are zero on most rows, as gating-weighted expert features are. The
/// sample-side Gram is accumulated over the nonzero rows of each block.
pub fn sphere_loss_and_grad_blocked(phi: &Matrix, blocks: usize) -> (f64, Matrix) {
    let (n, m) = phi.shape();
    if blocks <= 1 || m % blocks != 0 || GramSide::cheaper(phi) == GramSide::Feature {
        return sphere_loss_and_grad(phi);
    }
    let w = m / blocks;
    let seg = |i: usize, b: usize| &phi.row(i)[b * w..(b + 1) * w];
    let active: Vec<Vec<usize>> = (0..blocks)
        .map(|b| (0..n).filter(|&i| seg(i, b).iter().any(|&v| v != 0.0)).collect())
        .collect();
    let mut g = Matrix::zeros(n, n);
    for (b, rows) in active.iter().enumerate() {
        for (x, &i) in rows.iter().enumerate() {
            for &j in &rows[x..] {
                g[(i, j)] += dot(seg(i, b), seg(j, b));
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            g[(i, j)] = g[(j, i)];
        }
    }
    let inv_n = 1.0 / n.max(1) as f64;
    g.scale_in_place(inv_n);
    let tr = g.trace();
    let value = g.frobenius_norm_sq() - tr * tr / m as f64;
    g.add_diagonal(-tr / m as f64);
    let mut grad = Matrix::zeros(n, m);
    for (b, rows) in active.iter().enumerate() {
        for i in 0..n {
            let gi = g.row(i);
            let dst = &mut grad.row_mut(i)[b * w..(b + 1) * w];
            for &j in rows {
                crate::linalg::axpy(4.0 * inv_n * gi[j], seg(j, b), dst);
            }
        }
    }
    (value, grad)
}

pub fn sphere_loss_grad(phi: &Matrix) -> Matrix {
    sphere_loss_and_grad(phi).1
}

/// `‖M − λ̄ I‖_F²` with `λ̄ = tr(M)/m`.
pub fn gram_penalty(m: &SpsdMatrix) -> f64 {
    let tr = m.trace();
    m.matrix().frobenius_norm_sq() - tr * tr / m.dim() as f64
}

/// `∇_M ‖M − λ̄ I‖_F² = 2 (M − λ̄ I)`.
pub fn gram_penalty_gradient(m: &SpsdMatrix) -> Matrix {
    let mut g = m.matrix().scale(2.0);
    g.add_diagonal(-2.0 * m.trace() / m.dim() as f64);
    g
}

/// One gradient step of size `η` on the Gram penalty:
/// `(1 − 2η) M + 2η λ̄ I`.
pub fn gram_gradient_step(m: &SpsdMatrix, eta: f64) -> Result<SpsdMatrix> {
    if !(0.0..=0.5).contains(&eta) {
        return Err(Error::EtaOutOfRange(eta));
    }
    let mut out = m.matrix().clone();
    out.add_scaled(-eta, &gram_penalty_gradient(m));
    Ok(SpsdMatrix::from_trusted(out))
}

/// `ρ · ‖∇ task‖ / (‖∇ sphere‖ + ε)`, or the fixed coefficient when set.
pub fn adaptive_lambda(task_grad_norm: f64, sphere_grad_norm: f64, cfg: &SphereConfig) -> f64 {
    match cfg.fixed_lambda {
        Some(l) => l,
        None => cfg.ratio * task_grad_norm / (sphere_grad_norm + cfg.eps),
    }
}

fn split_blocks(phi: &Matrix, num_experts: usize) -> Result<Vec<Matrix>> {
    if num_experts == 0 || phi.cols() % num_experts != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} feature columns do not split into {num_experts} experts",
            phi.cols()
        )));
    }
    let w = phi.cols() / num_experts;
    Ok((0..num_experts).map(|e| phi.block(0, e * w, phi.rows(), w)).collect())
}

/// The penalty as configured: variant, placement and expert count.
#[derive(Clone, Debug)]
pub struct SphereObjective {
    pub variant: Variant,
    pub placement: Placement,
    pub num_experts: usize,
    pub num_hidden: usize,
}

impl SphereObjective {
    pub fn new(cfg: &SphereConfig, moe: &MoeConfig) -> Self {
        SphereObjective {
            variant: cfg.variant,
            placement: cfg.placement,
            num_experts: moe.num_experts,
            num_hidden: moe.num_hidden(),
        }
    }

    /// Number of matrices [`SphereObjective::penalty`] expects.
    pub fn expected_inputs(&self) -> usize {
        match (self.variant, self.placement) {
            (Variant::ProxyKron, _) => 2,
            (_, Placement::AllLayers) => self.num_hidden,
            _ => 1,
        }
    }

    fn check(&self, inputs: &[Matrix]) -> Result<()> {
        if inputs.len() != self.expected_inputs() {
            return Err(Error::PlacementMismatch { expected: self.expected_inputs(), got: inputs.len() });
        }
        Ok(())
    }

    /// Penalty value and gradient with respect to every input matrix.
    pub fn penalty_and_grads(&self, inputs: &[Matrix]) -> Result<(f64, Vec<Matrix>)> {
        self.check(inputs)?;
        match self.variant {
            Variant::WeightedConcat | Variant::GradientGram => {
                let mut total = 0.0;
                let mut grads = Vec::with_capacity(inputs.len());
                for phi in inputs {
                    let (v, g) = sphere_loss_and_grad_blocked(phi, self.num_experts);
                    total += v;
                    grads.push(g);
                }
                Ok((total, grads))
            }
            Variant::PerExpertSum => {
                let mut total = 0.0;
                let mut grads = Vec::with_capacity(inputs.len());
                for phi in inputs {
                    let mut grad = Matrix::zeros(phi.rows(), phi.cols());
                    let blocks = split_blocks(phi, self.num_experts)?;
                    let w = phi.cols() / self.num_experts;
                    for (e, b) in blocks.iter().enumerate() {
                        let (v, g) = sphere_loss_and_grad(b);
                        total += v;
                        grad.set_block(0, e * w, &g);
                    }
                    grads.push(grad);
                }
                Ok((total, grads))
            }
            Variant::ProxyKron => {
                let (phi, psi) = (&inputs[0], &inputs[1]);
                let n = phi.rows().max(1) as f64;
                let a = SpsdMatrix::gram_of_rows(phi);
                let g = SpsdMatrix::gram_of_rows(psi);
                let (ma, mg) = (a.dim() as f64, g.dim() as f64);
                let (tra, trg) = (a.trace(), g.trace());
                let g_fro2 = g.matrix().frobenius_norm_sq();
                let value = a.matrix().frobenius_norm_sq() * g_fro2 - (tra * trg).powi(2) / (ma * mg);
                // ∂/∂A = 2‖G‖² A − 2 tr(A) tr(G)² / (m_a m_g) I, pulled back through A = ΦᵀΦ/N.
                let mut da = a.matrix().scale(g_fro2);
                da.add_diagonal(-tra * trg * trg / (ma * mg));
                let mut grad_phi = phi.matmul(&da);
                grad_phi.scale_in_place(4.0 / n);
                let mut dg = g.matrix().scale(a.matrix().frobenius_norm_sq());
                dg.add_diagonal(-tra * tra * trg / (ma * mg));
                let mut grad_psi = psi.matmul(&dg);
                grad_psi.scale_in_place(4.0 / n);
                Ok((value, vec![grad_phi, grad_psi]))
            }
        }
    }

    pub fn penalty(&self, inputs: &[Matrix]) -> Result<f64> {
        Ok(self.penalty_and_grads(inputs)?.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub penalty: f64,
    pub lambda: f64,
    pub total: f64,
}

/// `task + λ · penalty(inputs)`.
pub fn total_loss(
    task_loss: f64,
    inputs: &[Matrix],
    lambda: f64,
    objective: &SphereObjective,
) -> Result<(f64, LossBreakdown)> {
    let penalty = if lambda == 0.0 { 0.0 } else { objective.penalty(inputs)? };
    let total = if lambda == 0.0 { task_loss } else { task_loss + lambda * penalty };
    Ok((total, LossBreakdown { task: task_loss, penalty, lambda, total }))
}

/// Output-layer backprop matrix `[h_1 c | … | h_E c]` for an output
/// cotangent `c`, the backprop factor used by the gradient-Gram variants.
pub fn output_backprop_matrix(trace: &ForwardTrace, output_cotangent: &Matrix) -> Matrix {
    let num_e = trace.gating.cols();
    let w = output_cotangent.cols();
    Matrix::from_fn(trace.batch_size(), num_e * w, |i, j| {
        trace.gating[(i, j / w)] * output_cotangent[(i, j % w)]
    })
}

/// Penalty evaluated on a forward trace, with the cotangents that carry its
/// gradient back into the network.
#[derive(Clone, Debug)]
pub struct SphereTerm {
    pub penalty: f64,
    /// Cotangents on weighted feature matrices, keyed by 1-based hidden layer.
    pub feature_cotangents: Vec<(usize, Matrix)>,
    /// Cotangent on the gating weights (gradient-based variants).
    pub gating_cotangent: Option<Matrix>,
}

impl SphereTerm {
    pub fn scale(&mut self, c: f64) {
        self.feature_cotangents.iter_mut().for_each(|(_, m)| m.scale_in_place(c));
        if let Some(g) = self.gating_cotangent.as_mut() {
            g.scale_in_place(c);
        }
    }

    pub fn as_cotangents(&self) -> moe::Cotangents<'_> {
        moe::Cotangents {
            output: None,
            features: self.feature_cotangents.iter().map(|(l, m)| (*l, m)).collect(),
            gating: self.gating_cotangent.as_ref(),
        }
    }
}

/// Builds the configured penalty inputs from a trace and differentiates them.
/// `output_cotangent` is the task-loss cotangent, used only by the
/// gradient-based variants and treated as a constant there.
pub fn sphere_term(
    model: &MoeModel,
    trace: &ForwardTrace,
    output_cotangent: &Matrix,
    cfg: &SphereConfig,
) -> Result<SphereTerm> {
    let objective = SphereObjective::new(cfg, model.config());
    let hidden = model.config().num_hidden();
    if hidden == 0 && cfg.variant != Variant::GradientGram {
        return Err(Error::BadLayer { layer: 1, hidden: 0 });
    }
    let layers: Vec<usize> = match cfg.placement {
        Placement::LastLayer => vec![hidden],
        Placement::AllLayers => (1..=hidden).collect(),
    };
    match cfg.variant {
        Variant::WeightedConcat | Variant::PerExpertSum => {
            let inputs =
                layers.iter().map(|&l| moe::weighted_feature_matrix(trace, l)).collect::<Result<Vec<_>>>()?;
            let (penalty, grads) = objective.penalty_and_grads(&inputs)?;
            Ok(SphereTerm { penalty, feature_cotangents: layers.into_iter().zip(grads).collect(), gating_cotangent: None })
        }
        Variant::GradientGram => {
            let psi = output_backprop_matrix(trace, output_cotangent);
            let (penalty, grads) = objective.penalty_and_grads(std::slice::from_ref(&psi))?;
            let gating = gating_cotangent(&grads[0], output_cotangent);
            Ok(SphereTerm { penalty, feature_cotangents: vec![], gating_cotangent: Some(gating) })
        }
        Variant::ProxyKron => {
            let phi = moe::weighted_feature_matrix(trace, hidden)?;
            let psi = output_backprop_matrix(trace, output_cotangent);
            let (penalty, mut grads) = objective.penalty_and_grads(&[phi, psi])?;
            let gating = gating_cotangent(&grads[1], output_cotangent);
            grads.truncate(1);
            Ok(SphereTerm {
                penalty,
                feature_cotangents: vec![(hidden, grads.pop().expect("one gradient"))],
                gating_cotangent: Some(gating),
            })
        }
    }
}

/// Pulls a gradient on `[h_1 c | … | h_E c]` back to the gating weights.
fn gating_cotangent(grad_psi: &Matrix, output_cotangent: &Matrix) -> Matrix {
    let w = output_cotangent.cols();
    Matrix::from_fn(grad_psi.rows(), grad_psi.cols() / w, |i, e| {
        dot(&grad_psi.row(i)[e * w..(e + 1) * w], output_cotangent.row(i))
    })
}
