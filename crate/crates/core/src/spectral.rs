//! Spectral quantities of small symmetric positive-semidefinite matrices.
//!
//! The effective rank used throughout the crate is the exponentiated Shannon
//! entropy of the trace-normalized spectrum. Eigenvalues at or below
//! [`CLIP_RELATIVE`]` · tr(M)` count as zero, both for the entropy and when
//! deciding whether a matrix is singular.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, symmetric_eigenvalues, Matrix, SymmetricEigen};

/// Relative eigenvalue clipping threshold.
pub const CLIP_RELATIVE: f64 = 1e-12;
/// Relative asymmetry accepted by [`SpsdMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Relative negativity accepted before clipping.
pub const NEGATIVITY_TOL: f64 = 1e-10;
/// Relative eigenvalue spread under which a matrix counts as a scaled identity.
pub const SCALED_IDENTITY_TOL: f64 = 1e-8;
/// Largest product dimension the Tracy–Singh builder will materialize.
pub const TRACY_SINGH_CAP: usize = 64;

/// Symmetric positive-semidefinite matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct SpsdMatrix(Matrix);

impl TryFrom<Matrix> for SpsdMatrix {
    type Error = Error;
    fn try_from(m: Matrix) -> Result<Self> {
        SpsdMatrix::new(m)
    }
}

impl From<SpsdMatrix> for Matrix {
    fn from(m: SpsdMatrix) -> Matrix {
        m.0
    }
}

impl SpsdMatrix {
    /// Validates symmetry and semidefiniteness; the stored matrix is exactly
    /// symmetrized.
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::ShapeMismatch(format!("{}x{} is not square", m.rows(), m.cols())));
        }
        if !m.is_finite() {
            return Err(Error::invalid("matrix has non-finite entries"));
        }
        let scale = m.max_abs();
        let asym = m.max_asymmetry();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric(asym));
        }
        let m = m.symmetrized();
        let tr = m.trace();
        if let Some(&lowest) = symmetric_eigenvalues(&m).last() {
            if lowest < -NEGATIVITY_TOL * tr.abs().max(scale) {
                return Err(Error::NotPositiveSemidefinite(lowest));
            }
        }
        Ok(SpsdMatrix(m))
    }

    /// Wraps a matrix that is SPSD by construction (Gram matrices, Kronecker
    /// products of SPSD factors and the like).
    pub(crate) fn from_trusted(m: Matrix) -> Self {
        debug_assert!(m.is_square());
        SpsdMatrix(m.symmetrized())
    }

    pub fn identity(n: usize) -> Self {
        SpsdMatrix(Matrix::identity(n))
    }

    pub fn zeros(n: usize) -> Self {
        SpsdMatrix(Matrix::zeros(n, n))
    }

    pub fn diag(values: &[f64]) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::NotPositiveSemidefinite(*v));
        }
        Ok(SpsdMatrix(Matrix::from_diag(values)))
    }

    /// `(1/N) ΦᵀΦ` for an `N × m` row matrix.
    pub fn gram_of_rows(rows: &Matrix) -> Self {
        let n = rows.rows().max(1) as f64;
        SpsdMatrix(rows.gram().scale(1.0 / n))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Equal to the trace for SPSD matrices.
    pub fn nuclear_norm(&self) -> f64 {
        self.trace()
    }

    pub fn eigen(&self) -> SymmetricEigen {
        symmetric_eigen(&self.0)
    }

    pub fn spectrum(&self) -> Spectrum {
        Spectrum::clipped(symmetric_eigenvalues(&self.0))
    }

    pub fn effective_rank(&self) -> Result<f64> {
        self.spectrum().effective_rank()
    }

    pub fn condition_number(&self) -> f64 {
        self.spectrum().condition_number()
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        if !(c >= 0.0) {
            return Err(Error::invalid("SPSD matrices may only be scaled by c >= 0"));
        }
        Ok(SpsdMatrix(self.0.scale(c)))
    }

    pub fn principal_submatrix(&self, keep: &[usize]) -> Result<Self> {
        validate_indices(keep, self.dim())?;
        Ok(SpsdMatrix(self.0.select(keep, keep)))
    }
}

fn validate_indices(keep: &[usize], dim: usize) -> Result<()> {
    if keep.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut seen = vec![false; dim];
    for &k in keep {
        if k >= dim || std::mem::replace(&mut seen[k], true) {
            return Err(Error::invalid(format!("index {k} is out of range or repeated")));
        }
    }
    Ok(())
}

/// Eigenvalues sorted non-increasing, all non-negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    values: Vec<f64>,
}

impl Spectrum {
    /// Sorts the values; rejects entries below `−1e-10 · Σ|λ|` and clips the
    /// remaining negatives to zero.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("spectrum has non-finite values"));
        }
        let mass: f64 = values.iter().map(|v| v.abs()).sum();
        if let Some(&v) = values.iter().find(|&&v| v < -NEGATIVITY_TOL * mass) {
            return Err(Error::NotPositiveSemidefinite(v));
        }
        values.iter_mut().for_each(|v| *v = v.max(0.0));
        values.sort_by(|a, b| b.total_cmp(a));
        Ok(Spectrum { values })
    }

    fn clipped(mut values: Vec<f64>) -> Self {
        values.iter_mut().for_each(|v| *v = v.max(0.0));
        values.sort_by(|a, b| b.total_cmp(a));
        Spectrum { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn trace(&self) -> f64 {
        self.values.iter().sum()
    }

    fn threshold(&self) -> f64 {
        CLIP_RELATIVE * self.trace()
    }

    /// Number of eigenvalues above the clipping threshold.
    pub fn rank(&self) -> usize {
        let t = self.threshold();
        self.values.iter().filter(|&&v| v > t).count()
    }

    /// Shannon entropy (nats) of the normalized positive eigenvalues.
    pub fn entropy(&self) -> Result<f64> {
        let tr = self.trace();
        if !(tr > 0.0) || !tr.is_finite() {
            return Err(Error::ZeroSpectrum);
        }
        let t = CLIP_RELATIVE * tr;
        let kept: f64 = self.values.iter().filter(|&&v| v > t).sum();
        Ok(self
            .values
            .iter()
            .filter(|&&v| v > t)
            .map(|&v| {
                let p = v / kept;
                -p * p.ln()
            })
            .sum())
    }

    pub fn effective_rank(&self) -> Result<f64> {
        Ok(self.entropy()?.exp())
    }

    /// `λ_max / λ_min`, or `+∞` when the smallest eigenvalue is clipped.
    pub fn condition_number(&self) -> f64 {
        let (Some(&hi), Some(&lo)) = (self.values.first(), self.values.last()) else {
            return f64::INFINITY;
        };
        if !(hi > 0.0) || lo <= self.threshold() {
            return f64::INFINITY;
        }
        hi / lo
    }

    pub fn is_scaled_identity(&self) -> bool {
        match (self.values.first(), self.values.last()) {
            (Some(&hi), Some(&lo)) if hi > 0.0 => (hi - lo) / hi <= SCALED_IDENTITY_TOL,
            _ => false,
        }
    }
}

/// Anything with an eigenvalue spectrum.
pub trait HasSpectrum {
    fn spectrum(&self) -> Spectrum;
}

impl HasSpectrum for SpsdMatrix {
    fn spectrum(&self) -> Spectrum {
        SpsdMatrix::spectrum(self)
    }
}

impl HasSpectrum for Spectrum {
    fn spectrum(&self) -> Spectrum {
        self.clone()
    }
}

pub fn effective_rank(m: &impl HasSpectrum) -> Result<f64> {
    m.spectrum().effective_rank()
}

pub fn condition_number(m: &impl HasSpectrum) -> f64 {
    m.spectrum().condition_number()
}

/// Sizes of the diagonal blocks of a symmetric block partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct BlockPartition(Vec<usize>);

impl TryFrom<Vec<usize>> for BlockPartition {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        BlockPartition::new(v)
    }
}

impl From<BlockPartition> for Vec<usize> {
    fn from(p: BlockPartition) -> Self {
        p.0
    }
}

impl BlockPartition {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::EmptyInput);
        }
        if sizes.contains(&0) {
            return Err(Error::PartitionMismatch("block sizes must be positive".into()));
        }
        Ok(BlockPartition(sizes))
    }

    pub fn uniform(blocks: usize, size: usize) -> Result<Self> {
        BlockPartition::new(vec![size; blocks])
    }

    pub fn sizes(&self) -> &[usize] {
        &self.0
    }

    pub fn num_blocks(&self) -> usize {
        self.0.len()
    }

    pub fn dim(&self) -> usize {
        self.0.iter().sum()
    }

    /// Start offset of every block.
    pub fn offsets(&self) -> Vec<usize> {
        self.0
            .iter()
            .scan(0, |acc, &s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect()
    }

    fn check_covers(&self, dim: usize, what: &str) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::PartitionMismatch(format!(
                "partition of {} does not cover {what} of dimension {dim}",
                self.dim()
            )));
        }
        Ok(())
    }

    fn block_of(&self, m: &Matrix, e: usize, f: usize) -> Matrix {
        let off = self.offsets();
        m.block(off[e], off[f], self.0[e], self.0[f])
    }
}

pub fn ridge_shift(m: &SpsdMatrix, eps: f64) -> Result<SpsdMatrix> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid(format!("ridge shift needs eps > 0, got {eps}")));
    }
    let mut out = m.matrix().clone();
    out.add_diagonal(eps);
    Ok(SpsdMatrix(out))
}

pub fn kronecker(a: &SpsdMatrix, b: &SpsdMatrix) -> SpsdMatrix {
    SpsdMatrix(a.matrix().kron(b.matrix()))
}

pub fn block_direct_sum(blocks: &[SpsdMatrix]) -> Result<SpsdMatrix> {
    if blocks.is_empty() {
        return Err(Error::EmptyInput);
    }
    let dim = blocks.iter().map(SpsdMatrix::dim).sum();
    let mut out = Matrix::zeros(dim, dim);
    let mut at = 0;
    for b in blocks {
        out.set_block(at, at, b.matrix());
        at += b.dim();
    }
    Ok(SpsdMatrix(out))
}

/// Effective rank of a block-diagonal assembly from per-block quantities:
/// `exp(H(α) + Σ_b α_b log r_e(M_b))` with `α_b` the nuclear-norm shares.
pub fn block_effrank_mixture(blocks: &[SpsdMatrix]) -> Result<f64> {
    let spectra: Vec<Spectrum> = blocks.iter().map(SpsdMatrix::spectrum).collect();
    effrank_mixture_from_spectra(&spectra)
}

pub(crate) fn effrank_mixture_from_spectra(spectra: &[Spectrum]) -> Result<f64> {
    if spectra.is_empty() {
        return Err(Error::EmptyInput);
    }
    let norms: Vec<f64> = spectra.iter().map(Spectrum::trace).collect();
    let total: f64 = norms.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroSpectrum);
    }
    let mut log_re = 0.0;
    for (s, n) in spectra.iter().zip(&norms) {
        let alpha = n / total;
        if alpha > 0.0 {
            log_re += -alpha * alpha.ln() + alpha * s.entropy()?;
        }
    }
    Ok(log_re.exp())
}

/// `(1−β)M + β (tr M / m) I`.
pub fn spectral_contraction_step(m: &SpsdMatrix, beta: f64) -> Result<SpsdMatrix> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("contraction needs beta in [0, 1], got {beta}")));
    }
    let mean = m.trace() / m.dim() as f64;
    let mut out = m.matrix().scale(1.0 - beta);
    out.add_diagonal(beta * mean);
    Ok(SpsdMatrix(out))
}

fn check_pair(a: &SpsdMatrix, g: &SpsdMatrix, pa: &BlockPartition, pg: &BlockPartition) -> Result<()> {
    if pa.num_blocks() != pg.num_blocks() {
        return Err(Error::PartitionMismatch(format!(
            "{} blocks versus {} blocks",
            pa.num_blocks(),
            pg.num_blocks()
        )));
    }
    pa.check_covers(a.dim(), "the first factor")?;
    pg.check_covers(g.dim(), "the second factor")
}

/// Blockwise Kronecker product: block `(e, e′)` is `A_{e,e′} ⊗ G_{e,e′}`.
pub fn khatri_rao_block(
    a: &SpsdMatrix,
    g: &SpsdMatrix,
    pa: &BlockPartition,
    pg: &BlockPartition,
) -> Result<SpsdMatrix> {
    check_pair(a, g, pa, pg)?;
    let sizes: Vec<usize> = pa.sizes().iter().zip(pg.sizes()).map(|(x, y)| x * y).collect();
    let out_part = BlockPartition(sizes);
    let off = out_part.offsets();
    let dim = out_part.dim();
    let mut out = Matrix::zeros(dim, dim);
    for e in 0..pa.num_blocks() {
        for f in 0..pa.num_blocks() {
            let blk = pa.block_of(a.matrix(), e, f).kron(&pg.block_of(g.matrix(), e, f));
            out.set_block(off[e], off[f], &blk);
        }
    }
    Ok(SpsdMatrix::from_trusted(out))
}

/// All-pairs blockwise Kronecker product.
///
/// Rows are grouped by block pairs `(i, k)` in row-major pair order; block
/// `((i,k), (j,l))` is `A_{ij} ⊗ G_{kl}`. The returned indices select the
/// diagonal pairs `(e, e)`, whose principal submatrix is the Khatri–Rao
/// product in its native ordering.
pub fn tracy_singh(
    a: &SpsdMatrix,
    g: &SpsdMatrix,
    pa: &BlockPartition,
    pg: &BlockPartition,
) -> Result<(SpsdMatrix, Vec<usize>)> {
    check_pair(a, g, pa, pg)?;
    let dim = a.dim() * g.dim();
    if dim > TRACY_SINGH_CAP {
        return Err(Error::DimTooLarge { dim, cap: TRACY_SINGH_CAP });
    }
    let nb = pa.num_blocks();
    let pair_size = |i: usize, k: usize| pa.sizes()[i] * pg.sizes()[k];
    let mut pair_offset = vec![0; nb * nb];
    let mut at = 0;
    for i in 0..nb {
        for k in 0..nb {
            pair_offset[i * nb + k] = at;
            at += pair_size(i, k);
        }
    }
    let mut out = Matrix::zeros(dim, dim);
    for i in 0..nb {
        for k in 0..nb {
            for j in 0..nb {
                for l in 0..nb {
                    let blk = pa.block_of(a.matrix(), i, j).kron(&pg.block_of(g.matrix(), k, l));
                    out.set_block(pair_offset[i * nb + k], pair_offset[j * nb + l], &blk);
                }
            }
        }
    }
    let selection = (0..nb)
        .flat_map(|e| {
            let o = pair_offset[e * nb + e];
            o..o + pair_size(e, e)
        })
        .collect();
    Ok((SpsdMatrix::from_trusted(out), selection))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterlacingReport {
    /// `k / κ(M)`.
    pub bound: f64,
    /// Effective rank of the kept principal submatrix.
    pub actual: f64,
}

impl InterlacingReport {
    pub fn holds(&self, slack: f64) -> bool {
        self.actual >= self.bound - slack
    }
}

pub fn interlacing_lower_bound(m: &SpsdMatrix, keep: &[usize]) -> Result<InterlacingReport> {
    let sub = m.principal_submatrix(keep)?;
    let kappa = m.condition_number();
    if !kappa.is_finite() {
        return Err(Error::SingularInput);
    }
    Ok(InterlacingReport { bound: keep.len() as f64 / kappa, actual: sub.effective_rank()? })
}

/// Binary entropy in nats, with `h(0) = h(1) = 0`.
pub fn binary_entropy(eps: f64) -> f64 {
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(eps) + term(1.0 - eps)
}

/// `ε log(n−1) + h(ε)` when `ε ≤ 1 − 1/n`, `+∞` otherwise.
pub fn entropy_perturbation_bound(eps: f64, n: usize) -> f64 {
    let n_f = n as f64;
    if !(eps <= 1.0 - 1.0 / n_f) {
        return f64::INFINITY;
    }
    let spread = if eps > 0.0 { eps * (n_f - 1.0).ln() } else { 0.0 };
    spread + binary_entropy(eps)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub epsilon: f64,
    pub bound: f64,
    pub actual_gap: f64,
}

impl StabilityReport {
    pub fn holds(&self, slack: f64) -> bool {
        self.actual_gap <= self.bound + slack
    }
}

pub fn effrank_stability_bound(k: &SpsdMatrix, k_tilde: &SpsdMatrix) -> Result<StabilityReport> {
    if k.dim() != k_tilde.dim() {
        return Err(Error::ShapeMismatch(format!("{} versus {}", k.dim(), k_tilde.dim())));
    }
    let tau = k.trace().min(k_tilde.trace());
    if !(tau > 0.0) {
        return Err(Error::ZeroTrace);
    }
    let n = k.dim();
    let epsilon = (n as f64).sqrt() * k.matrix().sub(k_tilde.matrix()).frobenius_norm() / tau;
    let gap = (k.spectrum().entropy()? - k_tilde.spectrum().entropy()?).abs();
    Ok(StabilityReport { epsilon, bound: entropy_perturbation_bound(epsilon, n), actual_gap: gap })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub eps_delta: f64,
    pub effrank_bound: f64,
    /// Weyl bound on κ(A); `+∞` when the off-block norm reaches λ_min(bd).
    pub kappa_bound: f64,
    /// `|log r_e(A) − log r_e(bd)|`.
    pub actual_gap: f64,
    pub kappa: f64,
}

/// Splits `A` into its block diagonal and the cross-block remainder `Δ`.
pub fn block_diagonal_part(a: &SpsdMatrix, p: &BlockPartition) -> Result<SpsdMatrix> {
    p.check_covers(a.dim(), "the matrix")?;
    let mut bd = Matrix::zeros(a.dim(), a.dim());
    for (e, &o) in p.offsets().iter().enumerate() {
        bd.set_block(o, o, &p.block_of(a.matrix(), e, e));
    }
    Ok(SpsdMatrix(bd))
}

pub fn cross_coupling_bounds(a: &SpsdMatrix, p: &BlockPartition) -> Result<CouplingReport> {
    let tau = a.trace();
    if !(tau > 0.0) {
        return Err(Error::ZeroTrace);
    }
    let bd = block_diagonal_part(a, p)?;
    let delta = a.matrix().sub(bd.matrix());
    let d = a.dim();
    let eps_delta = (d as f64).sqrt() * delta.frobenius_norm() / tau;
    let delta_eigs = symmetric_eigenvalues(&delta);
    let delta_norm = delta_eigs.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let bd_spec = bd.spectrum();
    let hi = bd_spec.values()[0];
    let lo = *bd_spec.values().last().unwrap_or(&0.0);
    let denom = lo - delta_norm;
    let kappa_bound = if denom > 0.0 { (hi + delta_norm) / denom } else { f64::INFINITY };
    let gap = (a.spectrum().entropy()? - bd_spec.entropy()?).abs();
    Ok(CouplingReport {
        eps_delta,
        effrank_bound: entropy_perturbation_bound(eps_delta, d),
        kappa_bound,
        actual_gap: gap,
        kappa: a.condition_number(),
    })
}

/// Trace share of every diagonal block.
pub fn routing_trace_weights(a: &SpsdMatrix, p: &BlockPartition) -> Result<Vec<f64>> {
    p.check_covers(a.dim(), "the matrix")?;
    let tau = a.trace();
    if !(tau > 0.0) {
        return Err(Error::ZeroTrace);
    }
    Ok((0..p.num_blocks()).map(|e| p.block_of(a.matrix(), e, e).trace() / tau).collect())
}
