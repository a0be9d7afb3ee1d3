//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the library's linear algebra or kernels; library
//! types only carry inputs.

#![allow(dead_code, clippy::needless_range_loop, clippy::type_complexity)]

use std::f64::consts::{E, PI};

use fmbo_core::kernel::{FamilyAtom, SpdMatrix};
use fmbo_core::{DiscSpectrum, FactorGraph, FmFunction, Hyperparams, KernelForm, MixedPoint, SearchSpace};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Mat = Vec<Vec<f64>>;

pub fn zeros(n: usize) -> Mat {
    vec![vec![0.0; n]; n]
}

pub fn laplacian(n: usize, edges: &[(usize, usize, f64)]) -> Mat {
    let mut l = zeros(n);
    for &(i, j, w) in edges {
        l[i][j] -= w;
        l[j][i] -= w;
        l[i][i] += w;
        l[j][j] += w;
    }
    l
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
/// eigenvalues and the eigenvectors as columns (`vecs[row][k]`).
pub fn jacobi_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.len();
    let mut a = a.clone();
    let mut v = zeros(n);
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
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
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// `Σ_k u_k[v] u_k[w] h(λ_k)` from a Jacobi decomposition of the Laplacian.
pub fn spectral_entry(eig: &(Vec<f64>, Mat), v: usize, w: usize, h: impl Fn(f64) -> f64) -> f64 {
    let (vals, vecs) = eig;
    vals.iter()
        .enumerate()
        .map(|(k, &l)| vecs[v][k] * vecs[w][k] * h(l.max(0.0)))
        .sum()
}

pub fn sq_dist(c: &[f64], c2: &[f64], theta: &[f64]) -> f64 {
    c.iter().zip(c2).zip(theta).map(|((a, b), t)| ((a - b) / t).powi(2)).sum()
}

/// Gauss-Jordan inverse with partial pivoting, plus log|det|.
pub fn inverse_and_logdet(a: &Mat) -> (Mat, f64) {
    let n = a.len();
    let mut m: Mat = a.clone();
    let mut inv = zeros(n);
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let mut logdet = 0.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, piv);
        inv.swap(col, piv);
        let d = m[col][col];
        logdet += d.abs().ln();
        for k in 0..n {
            m[col][k] /= d;
            inv[col][k] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for k in 0..n {
                        m[r][k] -= f * m[col][k];
                        inv[r][k] -= f * inv[col][k];
                    }
                }
            }
        }
    }
    (inv, logdet)
}

pub fn mat_vec(a: &Mat, x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Textbook Ackley with a = 20, b = 0.2, c = 2π.
pub fn ackley(x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let s1 = x.iter().map(|v| v * v).sum::<f64>() / d;
    let s2 = x.iter().map(|v| (2.0 * PI * v).cos()).sum::<f64>() / d;
    -20.0 * (-0.2 * s1.sqrt()).exp() - s2.exp() + 20.0 + E
}

/// Monte Carlo `E[max(best − Y, 0)]` for `Y ~ N(μ, σ²)`; returns (mean, standard error).
pub fn mc_expected_improvement<R: Rng>(rng: &mut R, mu: f64, sigma: f64, best: f64, samples: usize) -> (f64, f64) {
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        let z: f64 = StandardNormal.sample(rng);
        let imp = (best - (mu + sigma * z)).max(0.0);
        s += imp;
        s2 += imp * imp;
    }
    let n = samples as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Connected Erdős–Rényi graph with weights in (0.1, 2].
pub fn random_connected_edges<R: Rng>(rng: &mut R, n: usize) -> Vec<(usize, usize, f64)> {
    loop {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(0.5) {
                    edges.push((i, j, 2.0 - rng.random_range(0.0..1.9)));
                }
            }
        }
        if connected(n, &edges) {
            return edges;
        }
    }
}

pub fn connected(n: usize, edges: &[(usize, usize, f64)]) -> bool {
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &(i, j, _) in edges {
            let other = if i == v { j } else if j == v { i } else { continue };
            if !seen[other] {
                seen[other] = true;
                stack.push(other);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

pub struct Instance {
    pub edges: Vec<(usize, Vec<(usize, usize, f64)>)>,
    pub eigs: Vec<(Vec<f64>, Mat)>,
    pub space: SearchSpace,
}

pub fn random_instance(rng: &mut ChaCha8Rng, max_factors: usize, max_n: usize) -> Instance {
    let dim = rng.random_range(1..=3);
    let bounds: Vec<(f64, f64)> = (0..dim)
        .map(|_| {
            let lo = rng.random_range(-2.0..0.0);
            (lo, lo + rng.random_range(0.5..3.0))
        })
        .collect();
    let p = rng.random_range(1..=max_factors);
    let edges: Vec<_> = (0..p)
        .map(|_| {
            let n = rng.random_range(2..=max_n);
            (n, random_connected_edges(rng, n))
        })
        .collect();
    let graphs = edges.iter().map(|(n, e)| FactorGraph::from_weighted_edges(*n, e).unwrap()).collect();
    let eigs = edges.iter().map(|(n, e)| jacobi_eigen(&laplacian(*n, e))).collect();
    Instance { edges, eigs, space: SearchSpace::new(bounds, graphs).unwrap() }
}

pub fn random_hp(rng: &mut ChaCha8Rng, space: &SearchSpace) -> Hyperparams {
    let sigma_f2 = rng.random_range(0.2..3.0);
    Hyperparams {
        theta: space.widths().iter().map(|w| w * rng.random_range(0.2..2.0)).collect(),
        alpha: (0..space.n_factors()).map(|_| rng.random_range(0.05..3.0)).collect(),
        beta: (0..space.n_factors()).map(|_| rng.random_range(0.05..2.0)).collect(),
        sigma_f2,
        sigma_n2: sigma_f2 * 10f64.powf(rng.random_range(-3.0..-1.0)),
    }
}

pub fn random_point(rng: &mut ChaCha8Rng, space: &SearchSpace) -> MixedPoint {
    MixedPoint::new(
        space.bounds().iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect(),
        space.factor_sizes().iter().map(|&n| rng.random_range(0..n)).collect(),
    )
}

pub fn nn_oracle(c: &[f64], c2: &[f64]) -> f64 {
    // Σ = I
    let q = |a: &[f64], b: &[f64]| dot(a, b);
    (2.0 / std::f64::consts::PI) * (2.0 * q(c, c2) / ((1.0 + q(c, c)) * (1.0 + q(c2, c2)))).asin()
}

/// Reference value of every kernel form from the Jacobi spectra.
pub fn oracle_kernel(inst: &Instance, form: &KernelForm, hp: &Hyperparams, x: &MixedPoint, x2: &MixedPoint) -> f64 {
    let s = sq_dist(&x.cont, &x2.cont, &hp.theta);
    let factor = |p: usize, h: &dyn Fn(f64) -> f64| spectral_entry(&inst.eigs[p], x.disc[p], x2.disc[p], h);
    let disc = |spec: DiscSpectrum| -> f64 {
        (0..inst.edges.len())
            .map(|p| {
                let b = hp.beta[p];
                match spec {
                    DiscSpectrum::Lap => factor(p, &|l| 1.0 / (1.0 + b * l)),
                    DiscSpectrum::Dif => factor(p, &|l| (-b * l).exp()),
                }
            })
            .product()
    };
    let rbf = (-s).exp();
    let k = match form {
        KernelForm::Mod(f) => (0..inst.edges.len())
            .map(|p| {
                let (a, b) = (hp.alpha[p], hp.beta[p]);
                match f {
                    FmFunction::Lap => factor(p, &|l| 1.0 / (1.0 + b * l + a * s)),
                    FmFunction::Dif => factor(p, &|l| (-(1.0 + a * s) * b * l).exp()),
                    FmFunction::Family(atoms) => factor(p, &|l| {
                        atoms
                            .iter()
                            .map(|t| t.weight * (1.0 + b * l + a * s.powf(t.exponent / 2.0)).powi(-(t.power as i32)))
                            .sum()
                    }),
                    FmFunction::NnExt(_) => {
                        let knn = nn_oracle(&x.cont, &x2.cont);
                        factor(p, &|l| 1.0 / (2.0 + b * l - knn))
                    }
                }
            })
            .product(),
        KernelForm::Prod(sp) => rbf * disc(*sp),
        KernelForm::Add(sp) => 0.5 * (rbf + disc(*sp)),
        KernelForm::ContOnly => rbf,
        KernelForm::DiscOnly(sp) => disc(*sp),
    };
    hp.sigma_f2 * k
}

pub fn all_forms(dim: usize) -> Vec<KernelForm> {
    vec![
        KernelForm::Mod(FmFunction::Lap),
        KernelForm::Mod(FmFunction::Dif),
        KernelForm::Mod(FmFunction::Family(vec![
            FamilyAtom { weight: 0.7, exponent: 2.0, power: 1 },
            FamilyAtom { weight: 0.4, exponent: 1.2, power: 2 },
            FamilyAtom { weight: 0.1, exponent: 0.5, power: 4 },
        ])),
        KernelForm::Mod(FmFunction::NnExt(SpdMatrix::identity(dim))),
        KernelForm::Prod(DiscSpectrum::Lap),
        KernelForm::Prod(DiscSpectrum::Dif),
        KernelForm::Add(DiscSpectrum::Lap),
        KernelForm::Add(DiscSpectrum::Dif),
        KernelForm::ContOnly,
        KernelForm::DiscOnly(DiscSpectrum::Lap),
    ]
}

/// Dense-inverse reference for the GP marginal likelihood and posterior.
pub struct DenseGp {
    pub kinv: Mat,
    pub logdet: f64,
    pub y: Vec<f64>,
}

impl DenseGp {
    pub fn new(k: &Mat, y: &[f64]) -> Self {
        let (kinv, logdet) = inverse_and_logdet(k);
        Self { kinv, logdet, y: y.to_vec() }
    }

    pub fn lml(&self) -> f64 {
        let n = self.y.len() as f64;
        -0.5 * dot(&self.y, &mat_vec(&self.kinv, &self.y)) - 0.5 * self.logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    pub fn predict(&self, ks: &[f64], kss: f64) -> (f64, f64) {
        let w = mat_vec(&self.kinv, ks);
        (dot(&w, &self.y), kss - dot(ks, &w))
    }
}

