//! Acceptance criteria, one line of output per criterion.
//!
//! The process exits zero whatever the outcome so that `cargo test` reports
//! the table; set `SPHERE_LAB_STRICT=1` to exit non-zero on any failure.
//! `SPHERE_LAB_ACCEPT=3,5` restricts the run to the listed criteria.

mod common;

use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sphere_core::config::ExperimentConfig;
use sphere_core::entk::{self, CorrelationPair, EntkOperator, SlqConfig};
use sphere_core::harness::{mse, probe_batch, run_protocol_with_model, total_gradient, Protocol, StreamConfig, TaskStream, TrainSettings};
use sphere_core::linalg::Matrix;
use sphere_core::moe::{self, init_model, Activation, MoeConfig, MoeModel};
use sphere_core::optim::OptimizerConfig;
use sphere_core::ppo::{self, CrlSettings, EnvConfig, PointMassEnv, PpoConfig};
use sphere_core::runner::{self, ExperimentOutcome};
use sphere_core::spectral::{self, BlockPartition, SpsdMatrix};
use sphere_core::sphere::{self, SphereConfig, Variant};
use sphere_core::Result;

const REFERENCE: &str = include_str!("../../../configs/reference.toml");
const PPO_TOY: &str = include_str!("../../../configs/ppo_toy.toml");

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict { passed, detail: detail.into() })
}

fn spd(rng: &mut impl Rng, n: usize) -> (Dense, SpsdMatrix) {
    let delta = rng.random_range(0.05..0.5);
    let d = random_spd(rng, n, delta);
    let s = SpsdMatrix::new(matrix(&d).symmetrized()).expect("SPD by construction");
    (d, s)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn c1_effrank_identities() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ident = 0.0_f64;
    for n in 1..=64 {
        ident = ident.max((SpsdMatrix::identity(n).effective_rank()? - n as f64).abs());
    }
    let mut scale = 0.0_f64;
    let mut kron_err = 0.0_f64;
    for _ in 0..200 {
        let (p, q) = (rng.random_range(1..7), rng.random_range(1..7));
        let ((da, a), (db, b)) = (spd(&mut rng, p), spd(&mut rng, q));
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        scale = scale.max(rel(a.scale(c)?.effective_rank()?, a.effective_rank()?));
        let oracle = effrank_of(&kron(&da, &db));
        kron_err = kron_err.max(rel(spectral::kronecker(&a, &b).effective_rank()?, oracle));
        kron_err = kron_err.max(rel(a.effective_rank()? * b.effective_rank()?, oracle));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        ident <= 1e-9 && scale <= 1e-10 && kron_err <= 1e-9 && secs < 5.0,
        format!("identity {ident:.1e}, scale {scale:.1e}, kronecker {kron_err:.1e} over 200 pairs, {secs:.2}s"),
    )
}

fn c2_block_mixture() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let nb = rng.random_range(1..6);
        let (dense_blocks, blocks): (Vec<Dense>, Vec<SpsdMatrix>) = (0..nb)
            .map(|_| {
                let n = rng.random_range(1..6);
                spd(&mut rng, n)
            })
            .unzip();
        let oracle = effrank_of(&block_diag(&dense_blocks));
        worst = worst.max(rel(spectral::block_effrank_mixture(&blocks)?, oracle));
    }
    verdict(worst <= 1e-9, format!("max rel error {worst:.1e} over 200 block lists"))
}

fn tanh_moe(rng: &mut impl Rng, input: usize, output: usize) -> Result<MoeModel> {
    let cfg = MoeConfig {
        num_experts: rng.random_range(2..6),
        top_k: 2,
        expert_widths: vec![rng.random_range(4..12), rng.random_range(4..10)],
        gate_widths: vec![rng.random_range(3..8)],
        activation: Activation::Tanh,
        seed: rng.random(),
        ..MoeConfig::new(input, output)
    };
    init_model(&cfg)
}

/// Rows of `∂(1ᵀf(x_i))/∂θ` by central differences.
fn fd_jacobian(model: &MoeModel, x: &Matrix) -> Result<Dense> {
    let base = model.flat_params();
    let h = 1e-6;
    let mut cols = Vec::with_capacity(base.len());
    let mut m = model.clone();
    for k in 0..base.len() {
        let mut p = base.clone();
        let mut eval = |d: f64| -> Result<Vec<f64>> {
            p[k] = base[k] + d;
            m.set_flat_params(&p)?;
            let (y, _) = moe::forward(&m, x)?;
            Ok((0..y.rows()).map(|i| y.row(i).iter().sum()).collect())
        };
        let (up, down) = (eval(h)?, eval(-h)?);
        cols.push(up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * h)).collect::<Vec<f64>>());
    }
    Ok((0..x.rows()).map(|i| cols.iter().map(|c| c[i]).collect()).collect())
}

fn c3_entk_gauss_newton() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst, mut oracle_worst, mut max_p) = (0.0_f64, 0.0_f64, 0);
    for _ in 0..20 {
        let model = tanh_moe(&mut rng, 4, 2)?;
        assert!(model.param_count() <= 1500);
        max_p = max_p.max(model.param_count());
        let n = rng.random_range(8..=32);
        let x = Matrix::from_fn(n, 4, |_, _| rng.random_range(-1.5..1.5));
        let k = entk::exact_entk(&model, &x)?;
        let g = entk::gauss_newton(&model, &x)?;
        worst = worst.max(rel(k.effective_rank()?, g.effective_rank()?));
        let j = fd_jacobian(&model, &x)?;
        let k_fd: Dense = j.iter().map(|a| j.iter().map(|b| a.iter().zip(b).map(|(u, v)| u * v).sum()).collect()).collect();
        oracle_worst = oracle_worst.max(rel(k.effective_rank()?, effrank_of(&k_fd)));
    }
    verdict(
        worst <= 1e-6 && oracle_worst <= 1e-5,
        format!("r_e(K) vs r_e(G) {worst:.1e}; vs finite-difference K {oracle_worst:.1e}; P <= {max_p}, N <= 32"),
    )
}

fn c4_gradient_exactness() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let variants = [Variant::WeightedConcat, Variant::PerExpertSum, Variant::GradientGram, Variant::ProxyKron];
    let (mut worst, mut params, mut gate_checked) = (0.0_f64, 0, 0);
    for i in 0..20 {
        let cfg = MoeConfig {
            num_experts: rng.random_range(2..5),
            top_k: 2,
            expert_widths: vec![rng.random_range(3..6)],
            gate_widths: vec![3],
            activation: Activation::Tanh,
            seed: rng.random(),
            ..MoeConfig::new(3, 2)
        };
        let mut model = init_model(&cfg)?;
        let p: Vec<f64> = (0..model.param_count()).map(|_| rng.random_range(-0.8..0.8)).collect();
        model.set_flat_params(&p)?;
        let x = Matrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let t = Matrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        let sph = SphereConfig { fixed_lambda: Some(rng.random_range(0.1..1.0)), variant: variants[i % 4], ..SphereConfig::default() };
        let (y, _) = moe::forward(&model, &x)?;
        let cot = mse(&y, &t).1;
        let objective = |m: &MoeModel| -> Result<f64> {
            let (y, trace) = moe::forward(m, &x)?;
            let penalty = sphere::sphere_term(m, &trace, &cot, &sph)?.penalty;
            Ok(mse(&y, &t).0 + sph.fixed_lambda.unwrap() * penalty)
        };
        let grad = total_gradient(&model, &x, |y| mse(y, &t), &sph)?.0.flatten();
        let base = model.flat_params();
        let pg = model.gate_param_count();
        let h = 1e-6;
        for k in 0..base.len() {
            let mut m = model.clone();
            let mut shifted = base.clone();
            shifted[k] = base[k] + h;
            m.set_flat_params(&shifted)?;
            let up = objective(&m)?;
            shifted[k] = base[k] - h;
            m.set_flat_params(&shifted)?;
            let fd = (up - objective(&m)?) / (2.0 * h);
            worst = worst.max((fd - grad[k]).abs() / (fd.abs().max(grad[k].abs()) + 1e-8));
            if k < pg && grad[k].abs() > 1e-8 {
                gate_checked += 1;
            }
        }
        params += base.len();
    }
    verdict(
        worst <= 1e-4 && gate_checked > 0,
        format!("max rel error {worst:.1e} over {params} parameters of 20 tanh models ({gate_checked} non-zero gate entries)"),
    )
}

fn c5_contraction() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut tr, mut kappa_up, mut decay, mut kron_up) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
    for _ in 0..200 {
        let n = rng.random_range(2..9);
        let (da, a) = spd(&mut rng, n);
        let m = rng.random_range(1..4);
        let (db, _) = spd(&mut rng, m);
        let ka = condition(&jacobi_eigenvalues(&da));
        let kab = condition(&jacobi_eigenvalues(&kron(&da, &db)));
        let pen = {
            let mu = trace(&da) / n as f64;
            frobenius(&sub(&da, &(0..n).map(|i| (0..n).map(|j| if i == j { mu } else { 0.0 }).collect()).collect())).powi(2)
        };
        for eta in [0.05, 0.25, 0.5] {
            let b = sphere::gram_gradient_step(&a, eta)?;
            let db2 = dense(b.matrix());
            tr = tr.max(rel(trace(&db2), trace(&da)));
            let kb = condition(&jacobi_eigenvalues(&db2));
            kappa_up = kappa_up.max((kb - ka) / ka);
            let mu = trace(&db2) / n as f64;
            let iso: Dense = (0..n).map(|i| (0..n).map(|j| if i == j { mu } else { 0.0 }).collect()).collect();
            let after = frobenius(&sub(&db2, &iso)).powi(2);
            decay = decay.max((after - (1.0 - 2.0 * eta).powi(2) * pen).abs() / pen);
            let kbb = condition(&jacobi_eigenvalues(&kron(&db2, &db)));
            kron_up = kron_up.max((kbb - kab) / kab);
        }
    }
    verdict(
        tr <= 1e-12 && kappa_up <= 1e-10 && decay <= 1e-8 && kron_up <= 1e-10,
        format!("trace {tr:.1e}, κ rise {kappa_up:.1e}, decay error {decay:.1e}, κ(A'⊗B) rise {kron_up:.1e} over 600 steps"),
    )
}

/// Small MoE trained briefly on a regression stream.
fn trained_checkpoint(seed: u64, cfg: MoeConfig, steps: usize) -> Result<(MoeModel, Matrix)> {
    let stream_cfg = StreamConfig {
        num_tasks: 2,
        steps_per_task: steps,
        input_dim: cfg.input_dim,
        output_dim: cfg.output_dim,
        eval_size: 32,
        ..StreamConfig::default()
    };
    let stream = TaskStream::generate(&stream_cfg, seed)?;
    let probe = probe_batch(&stream, 64, 777 + seed);
    let settings = TrainSettings {
        sphere: SphereConfig::default(),
        optimizer: OptimizerConfig { lr_start: 3e-3, lr_end: 1e-3, ..OptimizerConfig::default() },
        log_every: steps,
    };
    let (_, model) = run_protocol_with_model(&stream, &cfg, Protocol::Sequential, &settings, &probe, seed)?;
    Ok((model, probe))
}

fn small_cfg(seed: u64, activation: Activation) -> MoeConfig {
    MoeConfig {
        num_experts: 4,
        top_k: 2,
        expert_widths: vec![8, 8],
        gate_widths: vec![8],
        activation,
        seed,
        ..MoeConfig::new(4, 1)
    }
}

fn c6_interlacing_and_proxy() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = f64::INFINITY;
    for _ in 0..200 {
        let n = rng.random_range(2..10);
        let (_, m) = spd(&mut rng, n);
        let mut keep: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
        if keep.is_empty() {
            keep.push(rng.random_range(0..n));
        }
        let r = spectral::interlacing_lower_bound(&m, &keep)?;
        worst = worst.min(r.actual - r.bound);

        let blocks = rng.random_range(1..4);
        let pa = BlockPartition::new((0..blocks).map(|_| rng.random_range(1..3)).collect())?;
        let pg = BlockPartition::new((0..blocks).map(|_| rng.random_range(1..3)).collect())?;
        let ((_, a), (_, g)) = (spd(&mut rng, pa.dim()), spd(&mut rng, pg.dim()));
        let kr = spectral::khatri_rao_block(&a, &g, &pa, &pg)?;
        let bound = entk::kron_proxy(&a, &g, kr.dim())?.lower_bound;
        worst = worst.min(effrank_of(&dense(kr.matrix())) - bound);
    }
    let random_slack = worst;
    let mut checks = 0;
    for seed in 0..20 {
        let (model, probe) = trained_checkpoint(seed, small_cfg(seed, Activation::Relu), 150)?;
        let probe = probe.select(&(0..24).collect::<Vec<_>>(), &(0..probe.cols()).collect::<Vec<_>>());
        let k = entk::exact_entk(&model, &probe)?;
        let keep: Vec<usize> = (0..k.dim()).filter(|_| rng.random_bool(0.5)).collect();
        if !keep.is_empty() {
            match spectral::interlacing_lower_bound(&k, &keep) {
                Ok(r) => worst = worst.min(r.actual - r.bound),
                Err(sphere_core::Error::SingularInput) => {}
                Err(e) => return Err(e),
            }
            checks += 1;
        }
        let (_, trace) = moe::forward(&model, &probe)?;
        for (layer, &(rows, cols)) in model.config().expert_shapes().iter().enumerate() {
            let (a, g, _) = entk::layer_factors(&model, &trace, layer)?;
            let a = spectral::ridge_shift(&a, 1e-6)?;
            let g = spectral::ridge_shift(&g, 1e-6)?;
            let e = model.config().num_experts;
            let kr = spectral::khatri_rao_block(&a, &g, &BlockPartition::uniform(e, cols)?, &BlockPartition::uniform(e, rows)?)?;
            let bound = entk::kron_proxy(&a, &g, kr.dim())?.lower_bound;
            worst = worst.min(kr.effective_rank()? - bound);
            checks += 1;
        }
    }
    verdict(
        worst >= -1e-9,
        format!("min slack {worst:.2e} (random {random_slack:.2e}); 400 random and {checks} checkpoint checks on 20 trained models"),
    )
}

fn c7_tracy_singh() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst, mut cases) = (0.0_f64, 0);
    while cases < 50 {
        let blocks = rng.random_range(1..4);
        let pa = BlockPartition::new((0..blocks).map(|_| rng.random_range(1..4)).collect())?;
        let pg = BlockPartition::new((0..blocks).map(|_| rng.random_range(1..4)).collect())?;
        if pa.dim() * pg.dim() > 36 {
            continue;
        }
        cases += 1;
        let ((da, a), (dg, g)) = (spd(&mut rng, pa.dim()), spd(&mut rng, pg.dim()));
        let (ts, _) = spectral::tracy_singh(&a, &g, &pa, &pg)?;
        let x = jacobi_eigenvalues(&dense(ts.matrix()));
        let y = jacobi_eigenvalues(&kron(&da, &dg));
        worst = worst.max(x.iter().zip(&y).map(|(p, q)| (p - q).abs() / y[0]).fold(0.0, f64::max));
    }
    verdict(worst <= 1e-8, format!("max eigenvalue deviation {worst:.1e} (relative to λ_max) on 50 pairs"))
}

fn c8_slq_fidelity() -> Result<Verdict> {
    let cfg = SlqConfig { num_probes: 16, lanczos_steps: 30, ..SlqConfig::default() };
    let (mut worst, mut max_p) = (0.0_f64, 0);
    for seed in 0..20 {
        let mc = MoeConfig { expert_widths: vec![16, 16], gate_widths: vec![8], ..small_cfg(100 + seed, Activation::Relu) };
        let mc = MoeConfig { input_dim: 8, ..mc };
        let (model, probe) = trained_checkpoint(seed, mc, 200)?;
        assert!(model.param_count() <= 2000 && probe.rows() == 64);
        max_p = max_p.max(model.param_count());
        let exact = effrank_of(&dense(entk::exact_entk(&model, &probe)?.matrix()));
        let op = EntkOperator::new(&model, &probe)?;
        let slq = entk::spectral_plasticity_slq(&op, &SlqConfig { seed, ..cfg.clone() })?;
        worst = worst.max(rel(slq, exact));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut exact_err = 0.0_f64;
    for _ in 0..5 {
        let n = 48;
        let q = sphere_core::linalg::symmetric_eigen(&matrix(&random_spd(&mut rng, n, 0.1))).vectors;
        let levels: Vec<f64> = (0..rng.random_range(2..=30)).map(|_| rng.random_range(0.0..5.0)).collect();
        let d: Vec<f64> = (0..n).map(|i| levels[i % levels.len()]).collect();
        let k = q.matmul(&Matrix::from_diag(&d)).matmul_t(&q).symmetrized();
        let c = SlqConfig { seed: rng.random(), ..cfg.clone() };
        let est = entk::slq_estimate(&k, &c)?;
        let tr: f64 = d.iter().sum();
        let top = d.iter().cloned().fold(0.0, f64::max);
        for (z, got) in entk::slq_probes(n, &c).iter().zip(&est.probe_trace_f) {
            let want: f64 = (0..n)
                .map(|j| {
                    let proj: f64 = (0..n).map(|i| q[(i, j)] * z[i]).sum();
                    let lam = d[j];
                    proj * proj * if lam > 1e-12 * top { lam * lam.ln() } else { 0.0 }
                })
                .sum();
            exact_err = exact_err.max((got - want).abs() / (tr * tr.ln().abs()).max(1.0));
        }
    }
    verdict(
        worst <= 0.10 && exact_err <= 1e-8,
        format!("SLQ vs exact max rel error {worst:.3} on 20 checkpoints (P <= {max_p}, N = 64); few-eigenvalue quadrature error {exact_err:.1e}"),
    )
}

fn c9_perturbation_bounds() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut stab, mut dec, mut kfac) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for _ in 0..500 {
        let n = rng.random_range(2..10);
        let (dk, k) = spd(&mut rng, n);
        let size = 10f64.powf(rng.random_range(-4.0..0.0));
        let e: Dense = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0) * size).collect()).collect();
        let dt: Dense = (0..n).map(|i| (0..n).map(|j| dk[i][j] + (0..n).map(|l| e[i][l] * e[j][l]).sum::<f64>()).collect()).collect();
        let kt = SpsdMatrix::new(matrix(&dt).symmetrized())?;
        let report = spectral::effrank_stability_bound(&k, &kt)?;
        let gap = (entropy(&jacobi_eigenvalues(&dk)) - entropy(&jacobi_eigenvalues(&dt))).abs();
        let eps = (n as f64).sqrt() * frobenius(&sub(&dk, &dt)) / trace(&dk).min(trace(&dt));
        assert!(rel(report.bound.min(1e300), entropy_bound(eps, n).min(1e300)) < 1e-9);
        stab = stab.min(entropy_bound(eps, n) - gap);

        let nb = rng.random_range(2..4);
        let sizes: Vec<usize> = (0..nb).map(|_| rng.random_range(1..4)).collect();
        let p = BlockPartition::new(sizes.clone())?;
        let (da, a) = spd(&mut rng, p.dim());
        let mut bd = vec![vec![0.0; p.dim()]; p.dim()];
        let offs: Vec<usize> = sizes.iter().scan(0, |s, &x| { let o = *s; *s += x; Some(o) }).collect();
        for (b, &o) in offs.iter().enumerate() {
            for i in o..o + sizes[b] {
                for j in o..o + sizes[b] {
                    bd[i][j] = da[i][j];
                }
            }
        }
        let gap = (entropy(&jacobi_eigenvalues(&da)) - entropy(&jacobi_eigenvalues(&bd))).abs();
        let eps = (p.dim() as f64).sqrt() * frobenius(&sub(&da, &bd)) / trace(&da);
        let r = spectral::cross_coupling_bounds(&a, &p)?;
        dec = dec.min(entropy_bound(eps, p.dim()) - gap).min(r.kappa_bound - r.kappa);

        let t = rng.random_range(1..10);
        let (na, ng) = (rng.random_range(1..4), rng.random_range(1..4));
        let feats: Vec<Vec<f64>> = (0..t).map(|_| (0..na).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let grads: Vec<Vec<f64>> = (0..t).map(|_| (0..ng).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mean = |xs: &[Dense]| -> Dense {
            let mut m = vec![vec![0.0; xs[0].len()]; xs[0].len()];
            for x in xs {
                for (r, row) in m.iter_mut().zip(x) {
                    for (v, y) in r.iter_mut().zip(row) {
                        *v += y / xs.len() as f64;
                    }
                }
            }
            m
        };
        let aa: Vec<Dense> = feats.iter().map(|f| outer(f)).collect();
        let gg: Vec<Dense> = grads.iter().map(|g| outer(g)).collect();
        let (abar, gbar) = (mean(&aa), mean(&gg));
        let pairs: Vec<Dense> = gg.iter().zip(&aa).map(|(g, a)| kron(g, a)).collect();
        let lhs = frobenius(&sub(&mean(&pairs), &kron(&gbar, &abar)));
        let rms = |xs: &[Dense], bar: &Dense| (xs.iter().map(|x| frobenius(&sub(x, bar)).powi(2)).sum::<f64>() / t as f64).sqrt();
        let rhs = rms(&gg, &gbar) * rms(&aa, &abar);
        let (lib_lhs, lib_rhs) = entk::kfac_residual_bound(&feats, &grads)?;
        assert!((lib_lhs - lhs).abs() <= 1e-9 * (1.0 + lhs) && (lib_rhs - rhs).abs() <= 1e-9 * (1.0 + rhs));
        kfac = kfac.min(rhs - lhs + 1e-12 * rhs);
    }

    let mut cosines = Vec::new();
    for seed in 0..10 {
        let (model, probe) = trained_checkpoint(seed, small_cfg(200 + seed, Activation::Relu), 150)?;
        cosines.push(entk::gate_expert_cosine(&model, &probe)?);
    }
    let max_cos = cosines.iter().cloned().fold(0.0, f64::max);
    if max_cos > 0.5 {
        eprintln!("warning: gate–expert cosine {max_cos:.3} exceeds 0.5 on a trained toy checkpoint");
    }
    verdict(
        stab >= -1e-9 && dec >= -1e-9 && kfac >= 0.0,
        format!(
            "min slack: stability {stab:.2e}, decoupling {dec:.2e}, K-FAC {kfac:.2e} (500 each); gate–expert cosine max {max_cos:.3} over 10 checkpoints"
        ),
    )
}

struct Studies {
    reference: ExperimentOutcome,
    ppo: ExperimentOutcome,
}

fn run_studies() -> Result<Studies> {
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let reference = runner::run_experiment(&ExperimentConfig::from_toml_str(REFERENCE)?, jobs)?;
    let ppo = runner::run_experiment(&ExperimentConfig::from_toml_str(PPO_TOY)?, jobs)?;
    Ok(Studies { reference, ppo })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Per-seed values of `f` for `arm`, recomputed from the raw run records.
fn per_seed(outcome: &ExperimentOutcome, arm: &str, f: impl Fn(&sphere_core::harness::RunRecord) -> f64) -> Vec<f64> {
    let a = outcome.arms.iter().find(|a| a.arm.name == arm).expect("arm present");
    a.runs.iter().map(|r| f(&r.record)).collect()
}

fn end_re(r: &sphere_core::harness::RunRecord) -> f64 {
    r.finals.last().map_or(f64::NAN, |f| f.re_k)
}

fn c10_plasticity_loss(s: &Studies) -> Result<Verdict> {
    let o = &s.reference;
    let last = |r: &sphere_core::harness::RunRecord| r.finals.last().map_or(f64::NAN, |f| f.success);
    let avg = |r: &sphere_core::harness::RunRecord| mean(&r.finals.iter().map(|f| f.success).collect::<Vec<_>>());
    let (iso_last, seq_last) = (mean(&per_seed(o, "baseline_isolated", last)), mean(&per_seed(o, "baseline", last)));
    let a = seq_last < iso_last;
    let first = mean(&per_seed(o, "baseline", |r| r.finals[0].re_k));
    let seq_end = mean(&per_seed(o, "baseline", end_re));
    let b = seq_end < first;
    let sph_end = mean(&per_seed(o, "sphere", end_re));
    let (base_avg, sph_avg) = (per_seed(o, "baseline", avg), per_seed(o, "sphere", avg));
    let positive = base_avg.iter().zip(&sph_avg).filter(|(b, s)| s > b).count();
    let c = sph_end > seq_end && mean(&sph_avg) >= mean(&base_avg) && positive >= 4;
    verdict(
        a && b && c,
        format!(
            "(a) final-task success sequential {seq_last:.3} vs isolated {iso_last:.3} [{}]; \
             (b) r_e {first:.2} -> {seq_end:.2} [{}]; \
             (c) end r_e sphere {sph_end:.2} vs {seq_end:.2}, mean success {:.3} vs {:.3}, paired positive {positive}/5 [{}]",
            pass(a),
            pass(b),
            mean(&sph_avg),
            mean(&base_avg),
            pass(c)
        ),
    )
}

fn c11_sign_flip(s: &Studies) -> Result<Verdict> {
    let sup = (mean(&per_seed(&s.reference, "sphere_flip", end_re)), mean(&per_seed(&s.reference, "sphere", end_re)));
    let rl = (mean(&per_seed(&s.ppo, "sphere_flip", end_re)), mean(&per_seed(&s.ppo, "sphere", end_re)));
    verdict(
        sup.0 < sup.1 && rl.0 < rl.1,
        format!("end r_e (−ρ vs +ρ): supervised {:.2} vs {:.2}, ppo-toy {:.2} vs {:.2}", sup.0, sup.1, rl.0, rl.1),
    )
}

fn c12_proxy_correlations() -> Result<Verdict> {
    let goals = ppo::goal_sequence(2, 1.0);
    let env = EnvConfig::default();
    let settings = CrlSettings {
        env: env.clone(),
        ppo: PpoConfig { iterations_per_task: 20, ..PpoConfig::default() },
        actor: MoeConfig {
            num_experts: 4,
            expert_widths: vec![10, 10],
            gate_widths: vec![8],
            activation: Activation::Tanh,
            ..MoeConfig::new(ppo::STATE_DIM, ppo::ACTION_DIM)
        },
        critic_widths: vec![32, 32],
        sphere: SphereConfig::default(),
        optimizer: OptimizerConfig { lr_start: 1e-3, lr_end: 3e-4, ..OptimizerConfig::default() },
        protocol: Protocol::Sequential,
        log_every: 100,
    };
    let probe = ppo::probe_states(&env, goals[0], 64, 777);
    let (_, mut agent) = ppo::run_crl_sequence_with_agent(&goals, &settings, &probe, 12)?;
    let num_batches = 32;
    let mut envs: Vec<PointMassEnv> = (0..8).map(|i| PointMassEnv::new(env.clone(), goals[1], 5000 + i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let steps = 8;
    let buffer = ppo::collect_rollout(&mut envs, &mut agent, steps * num_batches, &settings.ppo, &mut rng)?;
    // The buffer is env-major; each batch takes the same time window from every env.
    let per_env = steps * num_batches;
    let batches: Vec<Matrix> = (0..num_batches)
        .map(|b| {
            let rows: Vec<usize> = (0..8).flat_map(|e| (0..steps).map(move |t| e * per_env + b * steps + t)).collect();
            buffer.observations.select(&rows, &(0..ppo::STATE_DIM).collect::<Vec<_>>())
        })
        .collect();
    let actor = &agent.actor;
    let samples = |pair| -> Result<(Vec<f64>, Vec<f64>)> {
        Ok(batches.iter().map(|b| entk::correlation_sample(actor, b, pair)).collect::<Result<Vec<_>>>()?.into_iter().unzip())
    };
    let (fx, fy) = samples(CorrelationPair::FeatureVsEntk)?;
    let (px, py) = samples(CorrelationPair::ProxyVsExpertBlock)?;
    let (r1, r2) = (pearson(&fx, &fy), pearson(&px, &py));
    let lib1 = entk::proxy_target_correlation(actor, &batches, CorrelationPair::FeatureVsEntk)?;
    assert!((lib1 - r1).abs() < 1e-9);
    verdict(
        r1 >= 0.5 && r2 >= 0.5,
        format!("Pearson over {num_batches} rollout batches: feature-Gram vs eNTK {r1:.3}, proxy vs exact expert block {r2:.3}"),
    )
}

fn c13_overhead(s: &Studies) -> Result<Verdict> {
    let timing = |arm: &str| s.reference.arms.iter().find(|a| a.arm.name == arm).map(|a| a.timing().mean_step_seconds());
    let (base, sph) = (timing("baseline").unwrap(), timing("sphere").unwrap());
    let ratio = sph / base;
    verdict(ratio <= 1.15, format!("step time sphere {:.3} ms vs baseline {:.3} ms, ratio {ratio:.2}", sph * 1e3, base * 1e3))
}

fn c14_dense_degeneration() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (mut out_err, mut gate_max, mut moved) = (0.0_f64, 0.0_f64, 0.0_f64);
    for trial in 0..10 {
        let cfg = MoeConfig {
            num_experts: 1,
            top_k: 1,
            expert_widths: (0..rng.random_range(1..4)).map(|_| rng.random_range(2..10)).collect(),
            gate_widths: vec![rng.random_range(2..6)],
            activation: if trial % 2 == 0 { Activation::Relu } else { Activation::Tanh },
            seed: rng.random(),
            ..MoeConfig::new(rng.random_range(1..6), rng.random_range(1..4))
        };
        let model = init_model(&cfg)?;
        let x = Matrix::from_fn(12, cfg.input_dim, |_, _| rng.random_range(-2.0..2.0));
        let (y, _) = moe::forward(&model, &x)?;
        out_err = out_err.max(frobenius(&sub(&dense(&y), &plain_mlp(&model, &x))).max(0.0));
        for (i, row) in plain_mlp(&model, &x).iter().enumerate() {
            for (o, v) in row.iter().enumerate() {
                out_err = out_err.max((y[(i, o)] - v).abs());
            }
        }
        let j = moe::per_sample_jacobian(&model, &x)?;
        let pg = model.gate_param_count();
        for i in 0..j.rows() {
            gate_max = gate_max.max(j.row(i)[..pg].iter().fold(0.0_f64, |m, v| m.max(v.abs())));
        }
        let mut p = model.flat_params();
        p[..pg].iter_mut().for_each(|v| *v += rng.random_range(-1.0..1.0));
        let mut shifted = model.clone();
        shifted.set_flat_params(&p)?;
        moved = moved.max(moe::forward(&shifted, &x)?.0.sub(&y).max_abs());
    }
    verdict(
        out_err <= 1e-12 && gate_max == 0.0 && moved == 0.0,
        format!("output vs plain MLP {out_err:.1e}; gate Jacobian max {gate_max:.1e}; output change under gate perturbation {moved:.1e}"),
    )
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "fail"
    }
}

fn main() {
    let selected: Option<Vec<usize>> =
        std::env::var("SPHERE_LAB_ACCEPT").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| selected.as_ref().map_or(true, |s| s.contains(&n));
    let strict = std::env::var("SPHERE_LAB_STRICT").is_ok_and(|v| v == "1");

    let mut results: Vec<(usize, &str, Result<Verdict>, f64)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &dyn Fn() -> Result<Verdict>| {
        if wanted(n) {
            let t = Instant::now();
            let v = f();
            let secs = t.elapsed().as_secs_f64();
            print_line(n, name, &v, secs);
            results.push((n, name, v, secs));
        }
    };
    record(1, "effective-rank identities", &c1_effrank_identities);
    record(2, "block-diagonal mixture", &c2_block_mixture);
    record(3, "eNTK and Gauss-Newton spectra", &c3_entk_gauss_newton);
    record(4, "gradient exactness", &c4_gradient_exactness);
    record(5, "spectral contraction", &c5_contraction);
    record(6, "interlacing and proxy bounds", &c6_interlacing_and_proxy);
    record(7, "Tracy-Singh spectrum", &c7_tracy_singh);
    record(8, "SLQ fidelity", &c8_slq_fidelity);
    record(9, "perturbation bounds", &c9_perturbation_bounds);
    if [10, 11, 13].into_iter().any(wanted) {
        let t = Instant::now();
        let studies = run_studies();
        eprintln!("reference and ppo-toy studies took {:.0}s", t.elapsed().as_secs_f64());
        let studies = studies.as_ref().map_err(|e| e.to_string());
        let studies = &studies;
        let with = |f: fn(&Studies) -> Result<Verdict>| -> Box<dyn Fn() -> Result<Verdict> + '_> {
            Box::new(move || match studies {
                Ok(s) => f(s),
                Err(e) => Err(sphere_core::Error::InvalidArgument(format!("study failed: {e}"))),
            })
        };
        record(10, "plasticity loss on the reference stream", &*with(c10_plasticity_loss));
        record(11, "sign-flip intervention", &*with(c11_sign_flip));
        record(13, "SPHERE step-time overhead", &*with(c13_overhead));
    }
    record(12, "proxy correlations", &c12_proxy_correlations);
    record(14, "dense degeneration", &c14_dense_degeneration);

    let failed = results.iter().filter(|(_, _, v, _)| !matches!(v, Ok(Verdict { passed: true, .. }))).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if strict && failed > 0 {
        std::process::exit(1);
    }
}

fn print_line(n: usize, name: &str, v: &Result<Verdict>, secs: f64) {
    match v {
        Ok(v) => println!("{} [{n:>2}] {name}: {} ({secs:.1}s)", if v.passed { "PASS" } else { "FAIL" }, v.detail),
        Err(e) => println!("FAIL [{n:>2}] {name}: error: {e} ({secs:.1}s)"),
    }
}
