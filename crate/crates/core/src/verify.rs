//! Property suites behind `sphere-lab verify`. Each suite draws random
//! instances from its own seeded stream and compares library results with
//! an independent computation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::entk::{self, SlqConfig};
use crate::error::Result;
use crate::harness::{mse, total_gradient};
use crate::linalg::{symmetric_eigen, symmetric_eigenvalues, Matrix};
use crate::moe::{self, init_model, Activation, MoeConfig, MoeModel};
use crate::ppo;
use crate::spectral::{self, BlockPartition, SpsdMatrix};
use crate::sphere::{self, SphereConfig, Variant};

/// Deliberate defects for checking that the suites can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Gram contraction steps move up the penalty gradient.
    ContractionSign,
}

impl std::str::FromStr for Fault {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contraction-sign" => Ok(Fault::ContractionSign),
            other => Err(crate::Error::InvalidArgument(format!("unknown fault `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub cases: usize,
    /// Largest violation measure seen; compared against `tolerance`.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub note: String,
}

struct Ctx {
    rng: ChaCha8Rng,
    fault: Option<Fault>,
}

/// Running maximum of a violation measure.
struct Worst {
    value: f64,
    cases: usize,
}

impl Worst {
    fn new() -> Self {
        Worst { value: 0.0, cases: 0 }
    }

    fn see(&mut self, v: f64) {
        self.cases += 1;
        self.value = if v.is_nan() { f64::INFINITY } else { self.value.max(v) };
    }

    fn check(self, name: &'static str, tolerance: f64) -> Check {
        Check { name, cases: self.cases, worst: self.value, tolerance, passed: self.value <= tolerance, note: String::new() }
    }
}

type SuiteFn = fn(&mut Ctx) -> Result<Check>;

const SUITES: &[(&str, SuiteFn)] = &[
    ("effrank_identity", effrank_identity),
    ("effrank_scale_invariance", effrank_scale_invariance),
    ("kronecker_effrank", kronecker_effrank),
    ("kronecker_preservation", kronecker_preservation),
    ("kronecker_proxy_bound", kronecker_proxy_bound),
    ("block_mixture", block_mixture),
    ("tracy_singh_spectrum", tracy_singh_spectrum),
    ("interlacing_bound", interlacing_bound),
    ("entk_gauss_newton_spectrum", entk_gauss_newton_spectrum),
    ("gradient_finite_difference", gradient_finite_difference),
    ("contraction_monotonicity", contraction_monotonicity),
    ("slq_agreement", slq_agreement),
    ("stability_bound", stability_bound),
    ("decoupling_bound", decoupling_bound),
    ("kfac_residual_bound", kfac_bound),
    ("dense_degeneration", dense_degeneration),
    ("gae_telescoping", gae_telescoping),
];

pub fn suite_names() -> Vec<&'static str> {
    SUITES.iter().map(|(n, _)| *n).collect()
}

/// Runs every suite whose name contains `filter` (case-insensitive).
pub fn run_verify(filter: Option<&str>, fault: Option<Fault>) -> Vec<Check> {
    let filter = filter.map(str::to_lowercase);
    SUITES
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| filter.as_deref().map_or(true, |f| name.contains(f)))
        .map(|(i, (name, suite))| {
            let mut ctx = Ctx { rng: ChaCha8Rng::seed_from_u64(0x5EED_0000 + i as u64), fault };
            suite(&mut ctx).unwrap_or_else(|e| Check {
                name,
                cases: 0,
                worst: f64::INFINITY,
                tolerance: 0.0,
                passed: false,
                note: format!("error: {e}"),
            })
        })
        .collect()
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// `B Bᵀ + δ I` with `δ ∈ [0.05, 0.5)`: well-conditioned SPD.
pub fn random_spd(rng: &mut impl Rng, n: usize) -> SpsdMatrix {
    let b = random_matrix(rng, n, n);
    let mut m = b.outer_gram();
    m.add_diagonal(rng.random_range(0.05..0.5));
    SpsdMatrix::new(m.symmetrized()).expect("B Bᵀ + δI is SPD")
}

/// Effective rank straight from eigenvalues, independent of `Spectrum`.
fn oracle_effrank(m: &Matrix) -> f64 {
    let vals = symmetric_eigenvalues(m);
    let tr: f64 = vals.iter().map(|v| v.max(0.0)).sum();
    let h: f64 = vals
        .iter()
        .filter(|&&v| v > 1e-12 * tr)
        .map(|&v| {
            let p = v / tr;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn effrank_identity(_: &mut Ctx) -> Result<Check> {
    let mut w = Worst::new();
    for n in 1..=64 {
        w.see((SpsdMatrix::identity(n).effective_rank()? - n as f64).abs());
    }
    Ok(w.check("effrank_identity", 1e-9))
}

fn effrank_scale_invariance(ctx: &mut Ctx) -> Result<Check> {
    let mut w = Worst::new();
    for _ in 0..50 {
        let n = ctx.rng.random_range(2..12);
        let a = random_spd(&mut ctx.rng, n);
        let c = 10f64.powf(ctx.rng.random_range(-3.0..3.0));
        w.see(rel(a.scale(c)?.effective_rank()?, a.effective_rank()?));
    }
    Ok(w.check("effrank_scale_invariance", 1e-10))
}

fn kronecker_effrank(ctx: &mut Ctx) -> Result<Check> {
    let mut w = Worst::new();
    for _ in 0..200 {
        let (p, q) = (ctx.rng.random_range(1..7), ctx.rng.random_range(1..7));
        let (a, b) = (random_spd(&mut ctx.rng, p), random_spd(&mut ctx.rng, q));
        let direct = oracle_effrank(&a.matrix().kron(b.matrix()));
        w.see(rel(spectral::kronecker(&a, &b).effective_rank()?, direct));
        w.see(rel(a.effective_rank()? * b.effective_rank()?, direct));
    }
    Ok(w.check("kronecker_effrank", 1e-9))
}

/// Contraction on one factor never raises the Kronecker condition number.
fn kronecker_preservation(ctx: &mut Ctx) -> Result<Check> {
    let mut w = Worst::new();
    for _ in 0..40 {
        let (a, b) = (random_spd(&mut ctx.rng, 4), random_spd(&mut ctx.rng, 3));
        let eta = ctx.rng.random_range(0.0..0.5);
        let a2 = contraction(&a, eta, ctx.fault)?;
        let before = spectral::kronecker(&a, &b).condition_number();
        let after = spectral::kronecker(&a2, &b).condition_number();
        w.see(((after - before) / before).max(0.0));
    }
    Ok(w.check("kronecker_preservation", 1e-9))
}

/// `r_e` of the Khatri–Rao principal submatrix is at least `k/(κ(A)κ(G))`.
fn kronecker_proxy_bound(ctx: &mut Ctx) -> Result<Check> {
    let mut w = Worst::new();
    for _ in 0..30 {
        let blocks = ctx.rng.random_range(1..4);
        let sa: Vec<usize> = (0..blocks).map(|_| ctx.rng.random_range(1..3)).collect();
        let sg: Vec<usize> = (0..blocks).map(|_| ctx.rng.random_range(1..3)).collect();
        let (pa, pg) = (BlockPartition::new(sa)?, BlockPartition::new(sg)?);
        let a = random_spd(&mut ctx.rng, pa.dim());
        let g = random_spd(&mut ctx.rng, pg.dim());
        let kr = spectral::khatri_rao_block(&a, &g, &pa, &pg)?;
        let proxy = entk::kron_proxy(&a, &g, kr.dim())?;
        w.see((proxy.lower_bound - kr.effective_rank()?).max(0.0));
    }
    Ok(w.check("kronecker_proxy_bound", 1e-9))
}

fn block_mixture(ctx: &mut Ctx) -> Result<Check> {
    let mut w = Worst::new();
    for _ in 0..200 {
        let nb = ctx.rng.random_range(1..5);
        let blocks: Vec<SpsdMatrix> = (0..nb)
            .map(|_| {
                let n = ctx.rng.random_range(1..6);
                random_spd(&mut ctx.rng, n)
            })
            .collect();
        let direct = oracle_effrank(spectral::block_direct_sum(&blocks)?.matrix());
        w.see(rel(spectral::block_effrank_mixture(&blocks)?, direct));
    }
    Ok(w.check("block_mixture", 1e-9))
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

fn tracy_singh_spectrum(ctx: &mut Ctx) -> Result<Check> {
    let mut w = Worst::new();
    for _ in 0..20 {
        let blocks = ctx.rng.random_range(1..4);
        let sa: Vec<usize> = (0..blocks).map(|_| ctx.rng.random_range(1..3)).collect();
        let sg: Vec<usize> = (0..blocks).map(|_| ctx.rng.random_range(1..3)).collect();
        let (pa, pg) = (BlockPartition::new(sa)?, BlockPartition::new(sg)?);
        if pa.dim() * pg.dim() > spectral::TRACY_SINGH_CAP {
            continue;
        }
        let a = random_spd(&mut ctx.rng, pa.dim());
        let g = random_spd(&mut ctx.rng, pg.dim());
        let (ts, _) = spectral::tracy_singh(&a, &g, &pa, &pg)?;
        let x = sorted_desc(symmetric_eigenvalues(ts.matrix()));
        let y = sorted_desc(symmetric_eigenvalues(&a.matrix().kron(g.matrix())));
        let scale = y[0];
        w.see(x.iter().zip(&y).map(|(p, q)| (p - q).abs() / scale).fold(0.0, f64::max));
    }
    Ok(w.check("tracy_singh_spectrum", 1e-8))
}

fn interlacing_bound(ctx: &mut Ctx) -> Result<Check> {
    let mut w = Worst::new();
    for _ in 0..50 {
        let n = ctx.rng.random_range(2..10);
        let m = random_spd(&mut ctx.rng, n);
        let mut keep: Vec<usize> = (0..n).filter(|_| ctx.rng.random_bool(0.5)).collect();
        if keep.is_empty() {
            keep.push(0);
        }
        let r = spectral::interlacing_lower_bound(&m, &keep)?;
        w.see((r.bound - r.actual).max(0.0));
    }
    Ok(w.check("interlacing_bound", 1e-9))
}

fn tiny_model(rng: &mut impl Rng, activation: Activation) -> Result<MoeModel> {
    let cfg = MoeConfig {
        num_experts: rng.random_range(2..5),
        top_k: 2,
        expert_widths: vec![rng.random_range(3..6)],
        gate_widths: vec![3],
        activation,
        seed: rng.random(),
        ..MoeConfig::new(3, 2)
    };
    let mut m = init_model(&cfg)?;
    let p = random_matrix(rng, 1, m.param_count()).scale(0.8);
    m.set_flat_params(p.data())?;
    Ok(m)
}

fn entk_gauss_newton_spectrum(ctx: &mut Ctx) -> Result<Check> {
    let mut w = Worst::new();
    for _ in 0..5 {
        let m = tiny_model(&mut ctx.rng, Activation::Tanh)?;
        let x = random_matrix(&mut ctx.rng, 12, 3);
        let k = entk::exact_entk(&m, &x)?.effective_rank()?;
        let g = entk::gauss_newton(&m, &x)?.effective_rank()?;
        w.see(rel(k, g));
    }
    Ok(w.check("entk_gauss_newton_spectrum", 1e-6))
}

/// Task MSE plus `λ` times the SPHERE penalty with the output cotangent held
/// fixed at `frozen_cot`.
fn objective(model: &MoeModel, x: &Matrix, t: &Matrix, cfg: &SphereConfig, frozen_cot: &Matrix) -> Result<f64> {
    let (y, trace) = moe::forward(model, x)?;
    let task = mse(&y, t).0;
    let term = sphere::sphere_term(model, &trace, frozen_cot, cfg)?;
    Ok(task + cfg.fixed_lambda.unwrap_or(0.0) * term.penalty)
}

fn gradient_finite_difference(ctx: &mut Ctx) -> Result<Check> {
    let mut w = Worst::new();
    let variants = [Variant::WeightedConcat, Variant::PerExpertSum, Variant::GradientGram, Variant::ProxyKron];
    for (i, variant) in variants.into_iter().enumerate() {
        let model = tiny_model(&mut ctx.rng, Activation::Tanh)?;
        let x = random_matrix(&mut ctx.rng, 6, 3);
        let t = random_matrix(&mut ctx.rng, 6, 2);
        let cfg = SphereConfig { fixed_lambda: Some(0.3 + 0.2 * i as f64), variant, ..SphereConfig::default() };
        let (y, _) = moe::forward(&model, &x)?;
        let cot = mse(&y, &t).1;
        let grad = total_gradient(&model, &x, |y| mse(y, &t), &cfg)?.0.flatten();
        let base = model.flat_params();
        let h = 1e-6;
        for k in 0..base.len() {
            let at = |d: f64| -> Result<f64> {
                let mut p = base.clone();
                p[k] += d;
                let mut m = model.clone();
                m.set_flat_params(&p)?;
                objective(&m, &x, &t, &cfg, &cot)
            };
            let fd = (at(h)? - at(-h)?) / (2.0 * h);
            w.see((fd - grad[k]).abs() / (fd.abs().max(grad[k].abs()) + 1e-8));
        }
    }
    Ok(w.check("gradient_finite_difference", 1e-4))
}

fn contraction(m: &SpsdMatrix, eta: f64, fault: Option<Fault>) -> Result<SpsdMatrix> {
    match fault {
        Some(Fault::ContractionSign) => {
            let mut out = m.matrix().clone();
            out.add_scaled(eta, &sphere::gram_penalty_gradient(m));
            SpsdMatrix::new(out.symmetrized())
        }
        None => sphere::gram_gradient_step(m, eta),
    }
}

fn contraction_monotonicity(ctx: &mut Ctx) -> Result<Check> {
    let mut w = Worst::new();
    for _ in 0..40 {
        let n = ctx.rng.random_range(2..8);
        let a = random_spd(&mut ctx.rng, n);
        for eta in [0.05, 0.25, 0.5] {
            let b = match contraction(&a, eta, ctx.fault) {
                Ok(b) => b,
                Err(_) => {
                    w.see(f64::INFINITY);
                    continue;
                }
            };
            w.see(rel(b.trace(), a.trace()) * 1e4);
            let (ka, kb) = (a.condition_number(), b.condition_number());
            w.see(((kb - ka) / ka).max(0.0) * 1e4);
            let (pa, pb) = (sphere::gram_penalty(&a), sphere::gram_penalty(&b));
            let expected = (1.0 - 2.0 * eta).powi(2) * pa;
            w.see((pb - expected).abs() / pa.max(1e-300) * 1e4);
        }
    }
    Ok(w.check("contraction_monotonicity", 1e-4))
}

fn slq_agreement(ctx: &mut Ctx) -> Result<Check> {
    let mut w = Worst::new();
    let n = 40;
    let q = symmetric_eigen(&random_spd(&mut ctx.rng, n).into_matrix()).vectors;
    let levels = [0.0, 0.5, 1.0, 2.0, 7.0];
    let d: Vec<f64> = (0..n).map(|i| levels[i % levels.len()]).collect();
    let k = q.matmul(&Matrix::from_diag(&d)).matmul_t(&q).symmetrized();
    let cfg = SlqConfig { num_probes: 4, lanczos_steps: 10, seed: ctx.rng.random(), ..SlqConfig::default() };
    let est = entk::slq_estimate(&k, &cfg)?;
    for (z, got) in entk::slq_probes(n, &cfg).iter().zip(&est.probe_trace_f) {
        let want = entk::exact_quadratic_form_f(&k, z);
        w.see((got - want).abs() / want.abs().max(1.0));
    }
    let alpha = Matrix::identity(n).scale(3.0);
    let scaled = entk::slq_estimate(&alpha, &cfg)?;
    w.see(rel(scaled.effective_rank, n as f64));
    Ok(w.check("slq_agreement", 1e-8))
}

fn stability_bound(ctx: &mut Ctx) -> Result<Check> {
    let mut w = Worst::new();
    for _ in 0..100 {
        let n = ctx.rng.random_range(2..10);
        let k = random_spd(&mut ctx.rng, n);
        let size = 10f64.powf(ctx.rng.random_range(-4.0..0.0));
        let e = random_matrix(&mut ctx.rng, n, n).scale(size);
        let mut pert = k.matrix().add(&e.matmul_t(&e));
        pert = pert.symmetrized();
        let r = spectral::effrank_stability_bound(&k, &SpsdMatrix::new(pert)?)?;
        w.see((r.actual_gap - r.bound).max(0.0));
    }
    Ok(w.check("stability_bound", 1e-9))
}

fn decoupling_bound(ctx: &mut Ctx) -> Result<Check> {
    let mut w = Worst::new();
    for _ in 0..100 {
        let nb = ctx.rng.random_range(2..4);
        let sizes: Vec<usize> = (0..nb).map(|_| ctx.rng.random_range(1..4)).collect();
        let p = BlockPartition::new(sizes)?;
        let a = random_spd(&mut ctx.rng, p.dim());
        let r = spectral::cross_coupling_bounds(&a, &p)?;
        w.see((r.actual_gap - r.effrank_bound).max(0.0));
        w.see(((r.kappa - r.kappa_bound) / r.kappa).max(0.0));
    }
    Ok(w.check("decoupling_bound", 1e-9))
}

fn kfac_bound(ctx: &mut Ctx) -> Result<Check> {
    let mut w = Worst::new();
    for _ in 0..100 {
        let t = ctx.rng.random_range(1..12);
        let (da, dg) = (ctx.rng.random_range(1..5), ctx.rng.random_range(1..5));
        let feats: Vec<Vec<f64>> = (0..t).map(|_| (0..da).map(|_| ctx.rng.random_range(-1.0..1.0)).collect()).collect();
        let grads: Vec<Vec<f64>> = (0..t).map(|_| (0..dg).map(|_| ctx.rng.random_range(-1.0..1.0)).collect()).collect();
        let (lhs, rhs) = entk::kfac_residual_bound(&feats, &grads)?;
        w.see((lhs - rhs).max(0.0) / rhs.max(1e-12));
    }
    Ok(w.check("kfac_residual_bound", 1e-9))
}

/// Plain MLP on the single expert's weights, as a reference.
pub fn reference_mlp(model: &MoeModel, x: &Matrix) -> Matrix {
    let layers = &model.expert_weights()[0];
    let act = model.config().activation;
    let mut h = x.clone();
    for (l, w) in layers.iter().enumerate() {
        let fan_in = w.cols() - 1;
        let mut z = Matrix::zeros(h.rows(), w.rows());
        for i in 0..h.rows() {
            for o in 0..w.rows() {
                let mut s = w[(o, fan_in)];
                for j in 0..fan_in {
                    s += w[(o, j)] * h[(i, j)];
                }
                z[(i, o)] = if l + 1 < layers.len() { act.apply(s) } else { s };
            }
        }
        h = z;
    }
    h
}

fn dense_degeneration(ctx: &mut Ctx) -> Result<Check> {
    let mut w = Worst::new();
    for activation in [Activation::Relu, Activation::Tanh] {
        let cfg = MoeConfig {
            num_experts: 1,
            top_k: 1,
            expert_widths: vec![5, 4],
            gate_widths: vec![3],
            activation,
            seed: ctx.rng.random(),
            ..MoeConfig::new(3, 2)
        };
        let model = init_model(&cfg)?;
        let x = random_matrix(&mut ctx.rng, 10, 3);
        let (y, _) = moe::forward(&model, &x)?;
        w.see(y.sub(&reference_mlp(&model, &x)).max_abs());
        let j = moe::per_sample_jacobian(&model, &x)?;
        let pg = model.gate_param_count();
        let gate_max = (0..j.rows()).flat_map(|i| j.row(i)[..pg].iter()).fold(0.0_f64, |m, v| m.max(v.abs()));
        w.see(gate_max);
    }
    Ok(w.check("dense_degeneration", 1e-12))
}

fn gae_telescoping(ctx: &mut Ctx) -> Result<Check> {
    let mut w = Worst::new();
    for _ in 0..20 {
        let t = ctx.rng.random_range(1..60);
        let r: Vec<f64> = (0..t).map(|_| ctx.rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..t).map(|_| ctx.rng.random_range(-1.0..1.0)).collect();
        let gamma = ctx.rng.random_range(0.5..0.999);
        let (adv, _) = ppo::gae(&r, &v, &vec![false; t], 0.0, gamma, 1.0);
        for s in 0..t {
            let ret: f64 = (s..t).map(|k| gamma.powi((k - s) as i32) * r[k]).sum();
            w.see((adv[s] - (ret - v[s])).abs());
        }
    }
    Ok(w.check("gae_telescoping", 1e-10))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for c in run_verify(None, None) {
            assert!(c.passed, "{c:?}");
            assert!(c.cases > 0, "{c:?}");
        }
    }

    #[test]
    fn filter_selects_by_substring() {
        let names: Vec<_> = run_verify(Some("Kronecker"), None).into_iter().map(|c| c.name).collect();
        assert_eq!(names, ["kronecker_effrank", "kronecker_preservation", "kronecker_proxy_bound"]);
    }

    #[test]
    fn injected_sign_fault_is_caught() {
        let checks = run_verify(Some("contraction"), Some(Fault::ContractionSign));
        assert!(checks.iter().any(|c| !c.passed));
    }
}
