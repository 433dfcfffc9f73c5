//! Offline diagnostics of a checkpoint on a probe batch.

use serde::{Deserialize, Serialize};

use crate::entk::{self, BlockCosine, EntkOperator, LayerProxyReport, SlqConfig};
use crate::error::{Error, Result};
use crate::harness::{specialization_metrics, SpecializationMetrics};
use crate::linalg::Matrix;
use crate::moe::{self, MoeModel};
use crate::spectral::{effrank_stability_bound, SpsdMatrix, StabilityReport};

#[derive(Clone, Debug, PartialEq)]
pub struct DiagOptions {
    /// Skip everything that materializes the Jacobian.
    pub slq_only: bool,
    pub slq: SlqConfig,
    /// Ridge added to both Kronecker factors before taking condition numbers.
    pub ridge: f64,
}

impl Default for DiagOptions {
    fn default() -> Self {
        DiagOptions { slq_only: false, slq: SlqConfig::default(), ridge: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlqReport {
    pub effective_rank: f64,
    pub num_probes: usize,
    pub lanczos_steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineReport {
    pub cosine: f64,
    /// Full decoupling certificate; needs the Gauss–Newton matrix, so only
    /// present for small models.
    pub certificate: Option<BlockCosine>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiag {
    pub layer: usize,
    pub proxy: Option<LayerProxyReport>,
    pub note: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inequality {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl Inequality {
    fn of(lhs: f64, rhs: f64) -> Self {
        Inequality { lhs, rhs, holds: lhs <= rhs + 1e-9 * rhs.abs().max(1.0) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCertificates {
    /// Entropy gap between `K` and its expert-only part `J_e J_eᵀ`.
    pub expert_kernel_stability: Option<StabilityReport>,
    /// K-FAC residual per expert layer, treating samples as tokens.
    pub kfac_residual: Vec<Inequality>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagReport {
    pub param_count: usize,
    pub probe_size: usize,
    pub re_k_exact: Option<f64>,
    pub re_k_slq: SlqReport,
    pub block_cosines: Option<CosineReport>,
    pub layers: Vec<LayerDiag>,
    pub specialization: Option<SpecializationMetrics>,
    pub bounds: BoundCertificates,
}

fn kernel(j: &Matrix, cols: std::ops::Range<usize>) -> SpsdMatrix {
    let rows: Vec<usize> = (0..j.rows()).collect();
    SpsdMatrix::from_trusted(j.select(&rows, &cols.collect::<Vec<_>>()).outer_gram())
}

/// Runs the full battery; parts that exceed their size caps are omitted.
pub fn diagnose(model: &MoeModel, probe: &Matrix, opts: &DiagOptions) -> Result<DiagReport> {
    if probe.cols() != model.config().input_dim {
        return Err(Error::Format(format!(
            "probe has {} columns but the model expects {} inputs",
            probe.cols(),
            model.config().input_dim
        )));
    }
    if probe.rows() == 0 {
        return Err(Error::Format("probe batch is empty".into()));
    }
    let op = EntkOperator::new(model, probe)?;
    let slq = SlqReport {
        effective_rank: entk::spectral_plasticity_slq(&op, &opts.slq)?,
        num_probes: opts.slq.num_probes,
        lanczos_steps: opts.slq.lanczos_steps,
        seed: opts.slq.seed,
    };
    let trace = op.trace();

    let (mut re_k_exact, mut block_cosines, mut stability) = (None, None, None);
    if !opts.slq_only && probe.rows() <= entk::ENTK_CAP {
        match moe::jacobian_from_trace(model, trace) {
            Ok(j) => {
                let pg = model.gate_param_count();
                let full = SpsdMatrix::from_trusted(j.outer_gram());
                re_k_exact = Some(full.effective_rank()?);
                let certificate = match entk::gn_partition(model, probe) {
                    Ok(blocks) => Some(entk::gate_expert_block_cosine(&blocks)?),
                    Err(Error::TooLarge { .. }) => None,
                    Err(e) => return Err(e),
                };
                block_cosines = Some(CosineReport { cosine: entk::gate_expert_cosine(model, probe)?, certificate });
                let expert = kernel(&j, pg..j.cols());
                stability = match effrank_stability_bound(&full, &expert) {
                    Ok(s) => Some(s),
                    Err(Error::ZeroTrace) => None,
                    Err(e) => return Err(e),
                };
            }
            Err(Error::TooLarge { .. }) => {}
            Err(e) => return Err(e),
        }
    }

    let depth = model.config().expert_widths.len() + 1;
    let backprop = moe::expert_output_backprop(model, trace)?;
    let mut layers = Vec::with_capacity(depth);
    let mut kfac = Vec::with_capacity(depth);
    for layer in 0..depth {
        let diag = match entk::layer_proxy_report(model, trace, layer, opts.ridge) {
            Ok(r) => LayerDiag { layer, proxy: Some(r), note: None },
            Err(e @ (Error::SingularInput | Error::ZeroSpectrum | Error::ZeroTrace)) => {
                LayerDiag { layer, proxy: None, note: Some(e.to_string()) }
            }
            Err(e) => return Err(e),
        };
        layers.push(diag);
        let feats = moe::weighted_input_matrix(trace, layer)?;
        let grads = moe::backprop_matrix(&backprop, layer)?;
        let rows = |m: &Matrix| (0..m.rows()).map(|i| m.row(i).to_vec()).collect::<Vec<_>>();
        let (lhs, rhs) = entk::kfac_residual_bound(&rows(&feats), &rows(&grads))?;
        kfac.push(Inequality::of(lhs, rhs));
    }

    let specialization = match specialization_metrics(trace) {
        Ok(m) => Some(m),
        Err(Error::UndefinedForK1 | Error::BadLayer { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(DiagReport {
        param_count: model.param_count(),
        probe_size: probe.rows(),
        re_k_exact,
        re_k_slq: slq,
        block_cosines,
        layers,
        specialization,
        bounds: BoundCertificates { expert_kernel_stability: stability, kfac_residual: kfac },
    })
}
