//! Reference computations shared by the integration and acceptance tests.
//! Everything here is written against plain `Vec`s so it does not lean on
//! the library's own eigensolver or products.

#![allow(dead_code)]

use rand::Rng;
use sphere_core::linalg::Matrix;
use sphere_core::moe::{Activation, MoeModel};

pub type Dense = Vec<Vec<f64>>;

pub fn dense(m: &Matrix) -> Dense {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn matrix(d: &Dense) -> Matrix {
    Matrix::from_rows(d)
}

/// `B Bᵀ + δ I` with entries of `B` uniform in `[-1, 1)`.
pub fn random_spd(rng: &mut impl Rng, n: usize, delta: f64) -> Dense {
    let b: Dense = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            m[i][j] = (0..n).map(|k| b[i][k] * b[j][k]).sum::<f64>();
        }
        m[i][i] += delta;
    }
    m
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(m: &Dense) -> Vec<f64> {
    let n = m.len();
    let mut a = m.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j].powi(2)).sum();
        let scale: f64 = (0..n).map(|i| a[i][i].powi(2)).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut vals: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    vals.sort_by(|x, y| y.total_cmp(x));
    vals
}

/// Eigenvalues below `1e-12 · trace` count as zero.
pub fn clipped(vals: &[f64]) -> Vec<f64> {
    let tr: f64 = vals.iter().map(|v| v.max(0.0)).sum();
    vals.iter().map(|&v| if v > 1e-12 * tr { v } else { 0.0 }).collect()
}

pub fn entropy(vals: &[f64]) -> f64 {
    let v = clipped(vals);
    let tr: f64 = v.iter().sum();
    v.iter().filter(|&&x| x > 0.0).map(|&x| -(x / tr) * (x / tr).ln()).sum()
}

pub fn effrank(vals: &[f64]) -> f64 {
    entropy(vals).exp()
}

pub fn effrank_of(m: &Dense) -> f64 {
    effrank(&jacobi_eigenvalues(m))
}

pub fn condition(vals: &[f64]) -> f64 {
    let v = clipped(vals);
    let hi = v.iter().cloned().fold(0.0, f64::max);
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

pub fn trace(m: &Dense) -> f64 {
    (0..m.len()).map(|i| m[i][i]).sum()
}

pub fn kron(a: &Dense, b: &Dense) -> Dense {
    let (p, q) = (a.len(), b.len());
    let (pc, qc) = (a[0].len(), b[0].len());
    let mut out = vec![vec![0.0; pc * qc]; p * q];
    for i in 0..p {
        for j in 0..pc {
            for k in 0..q {
                for l in 0..qc {
                    out[i * q + k][j * qc + l] = a[i][j] * b[k][l];
                }
            }
        }
    }
    out
}

pub fn block_diag(blocks: &[Dense]) -> Dense {
    let n: usize = blocks.iter().map(Vec::len).sum();
    let mut out = vec![vec![0.0; n]; n];
    let mut off = 0;
    for b in blocks {
        for i in 0..b.len() {
            for j in 0..b.len() {
                out[off + i][off + j] = b[i][j];
            }
        }
        off += b.len();
    }
    out
}

pub fn frobenius(m: &Dense) -> f64 {
    m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn sub(a: &Dense, b: &Dense) -> Dense {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u - v).collect()).collect()
}

pub fn outer(x: &[f64]) -> Dense {
    x.iter().map(|a| x.iter().map(|b| a * b).collect()).collect()
}

/// `ε log(n−1) + h(ε)`, infinite outside `ε ≤ 1 − 1/n`.
pub fn entropy_bound(eps: f64, n: usize) -> f64 {
    if eps > 1.0 - 1.0 / n as f64 {
        return f64::INFINITY;
    }
    let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    let spread = if eps > 0.0 { eps * ((n - 1) as f64).ln() } else { 0.0 };
    spread + h(eps) + h(1.0 - eps)
}

/// Plain MLP read straight from the flat parameter layout of a model with a
/// single expert: gate parameters first, then each expert layer's
/// `fan_out × (fan_in + 1)` matrix stored column-major, bias last.
pub fn plain_mlp(model: &MoeModel, x: &Matrix) -> Dense {
    let cfg = model.config();
    let params = model.flat_params();
    let mut dims = vec![cfg.input_dim];
    dims.extend(&cfg.expert_widths);
    dims.push(cfg.output_dim);
    let mut off = model.gate_param_count();
    let mut h = dense(x);
    for (l, w) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weight = |o: usize, j: usize| params[off + j * fan_out + o];
        let last = l + 2 == dims.len();
        h = h
            .iter()
            .map(|row| {
                (0..fan_out)
                    .map(|o| {
                        let z = weight(o, fan_in) + (0..fan_in).map(|j| weight(o, j) * row[j]).sum::<f64>();
                        match (last, cfg.activation) {
                            (true, _) => z,
                            (false, Activation::Relu) => z.max(0.0),
                            (false, Activation::Tanh) => z.tanh(),
                        }
                    })
                    .collect()
            })
            .collect();
        off += fan_out * (fan_in + 1);
    }
    h
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
