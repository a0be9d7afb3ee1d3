//! Expected improvement and its optimization over mixed spaces.
//!
//! Candidates (uniform random plus spray points around the incumbent) are
//! ranked by EI; the best few seed a local search alternating discrete hill
//! climbing with a bounded continuous step.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::optim::{minimize_box, numerical_gradient, BoxOptions};
use crate::par;
use crate::space::{MixedPoint, SearchSpace};
use crate::util::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquireConfig {
    pub n_random: usize,
    pub n_spray: usize,
    pub n_starts: usize,
    pub max_alternations: usize,
    pub tol: f64,
    /// Gaussian perturbation scale relative to each box width.
    pub spray_cont_sigma: f64,
    pub spray_disc_moves: usize,
}

impl Default for AcquireConfig {
    fn default() -> Self {
        Self {
            n_random: 2000,
            n_spray: 20,
            n_starts: 10,
            max_alternations: 100,
            tol: 1e-8,
            spray_cont_sigma: 1e-2,
            spray_disc_moves: 1,
        }
    }
}

impl AcquireConfig {
    /// `n_spray` and `max_alternations` may be zero (pure random search over candidates).
    pub fn validate(&self) -> Result<()> {
        if self.n_random == 0 || self.n_starts == 0 {
            return Err(Error::Config("acquire: n_random and n_starts must be at least 1".into()));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::Config(format!("acquire: tol must be positive, got {}", self.tol)));
        }
        if !(self.spray_cont_sigma >= 0.0 && self.spray_cont_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "acquire: spray_cont_sigma must be nonnegative, got {}",
                self.spray_cont_sigma
            )));
        }
        Ok(())
    }
}

fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// EI for minimization from a predictive mean and standard deviation.
pub fn ei_from_moments(mu: f64, sigma: f64, best: f64) -> f64 {
    if !(sigma > 0.0) {
        return (best - mu).max(0.0);
    }
    let z = (best - mu) / sigma;
    (sigma * (z * norm_cdf(z) + norm_pdf(z))).max(0.0)
}

pub fn expected_improvement(model: &GpModel, x: &MixedPoint, best: f64) -> Result<f64> {
    let (mu, var) = model.predict(x)?;
    Ok(ei_from_moments(mu, var.sqrt(), best))
}

fn ei_unchecked(model: &GpModel, x: &MixedPoint, best: f64) -> f64 {
    match model.predict_unchecked(x) {
        Ok((mu, var)) => ei_from_moments(mu, var.sqrt(), best),
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Perturbations of `incumbent`: Gaussian jitter on the continuous part,
/// `spray_disc_moves` random neighbor moves on the discrete part.
pub fn spray_points(
    space: &SearchSpace,
    incumbent: &MixedPoint,
    cfg: &AcquireConfig,
    seed: u64,
) -> Result<Vec<MixedPoint>> {
    space.validate(incumbent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = space.widths();
    let out = (0..cfg.n_spray)
        .map(|_| {
            let mut x = incumbent.clone();
            for (c, w) in x.cont.iter_mut().zip(&widths) {
                let z: f64 = rng.sample(StandardNormal);
                *c += z * cfg.spray_cont_sigma * w;
            }
            space.clip_cont(&mut x.cont);
            if space.n_factors() > 0 {
                for _ in 0..cfg.spray_disc_moves {
                    let p = rng.random_range(0..space.n_factors());
                    let nb = space.factors()[p].neighbors(x.disc[p]);
                    if !nb.is_empty() {
                        x.disc[p] = nb[rng.random_range(0..nb.len())];
                    }
                }
            }
            x
        })
        .collect();
    Ok(out)
}

/// Greedy ascent over single-factor neighbor moves, returning the local
/// maximum and its objective value.
pub fn hill_climb_discrete<F>(space: &SearchSpace, objective: &mut F, x: &MixedPoint) -> (MixedPoint, f64)
where
    F: FnMut(&MixedPoint) -> f64,
{
    let mut cur = x.clone();
    let mut fx = objective(&cur);
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        let mut probe = cur.clone();
        for (p, g) in space.factors().iter().enumerate() {
            let v = cur.disc[p];
            for &u in g.neighbors(v) {
                probe.disc[p] = u;
                let fu = objective(&probe);
                if fu > best.map_or(fx, |b| b.2) {
                    best = Some((p, u, fu));
                }
            }
            probe.disc[p] = v;
        }
        match best {
            Some((p, u, fu)) => {
                cur.disc[p] = u;
                fx = fu;
            }
            None => return (cur, fx),
        }
    }
}

/// One projected quasi-Newton pass over the continuous coordinates with the
/// discrete part frozen. Works in unit-box coordinates; the numerical
/// gradient step is `1e-6` of each width.
pub fn continuous_step<F>(space: &SearchSpace, objective: &mut F, x: &MixedPoint) -> (MixedPoint, f64)
where
    F: FnMut(&MixedPoint) -> f64,
{
    let f0 = objective(x);
    let d = space.dim_cont();
    if d == 0 {
        return (x.clone(), f0);
    }
    let bounds = space.bounds().to_vec();
    let mut probe = x.clone();
    let mut neg = |u: &[f64]| -> f64 {
        for (k, (&ui, &(lo, hi))) in u.iter().zip(&bounds).enumerate() {
            probe.cont[k] = (lo + ui * (hi - lo)).clamp(lo, hi);
        }
        let v = objective(&probe);
        if v.is_finite() {
            -v
        } else {
            f64::INFINITY
        }
    };
    let lower = vec![0.0; d];
    let upper = vec![1.0; d];
    let steps = vec![1e-6; d];
    let u0: Vec<f64> = x
        .cont
        .iter()
        .zip(&bounds)
        .map(|(&c, &(lo, hi))| ((c - lo) / (hi - lo)).clamp(0.0, 1.0))
        .collect();
    let opts = BoxOptions {
        max_iter: 1,
        ftol: 0.0,
        gtol: 0.0,
        initial_step: 0.1,
    };
    let m = minimize_box(
        |u| {
            let g = numerical_gradient(&mut neg, u, &steps, &lower, &upper);
            (neg(u), g)
        },
        &u0,
        &lower,
        &upper,
        &opts,
    );
    let fm = -m.value;
    if !(fm > f0) {
        return (x.clone(), f0);
    }
    let mut out = x.clone();
    for (k, (&ui, &(lo, hi))) in m.x.iter().zip(&bounds).enumerate() {
        out.cont[k] = (lo + ui * (hi - lo)).clamp(lo, hi);
    }
    (out, fm)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Suggestion {
    pub point: MixedPoint,
    pub ei: f64,
    /// Highest EI among the initial (random + spray) candidates.
    pub best_initial_ei: f64,
    /// The EI argmax was an evaluated point and a runner-up was returned.
    pub deduplicated: bool,
}

/// Maximize EI against the model's own training data as history.
pub fn acquire_next(model: &GpModel, cfg: &AcquireConfig, seed: u64) -> Result<Suggestion> {
    cfg.validate()?;
    let space = model.spec().space();
    let history = model.data();
    let (inc_idx, best) = history
        .targets()
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &y)| if y < acc.1 { (i, y) } else { acc });
    let incumbent = &history.points()[inc_idx];

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
    let mut candidates: Vec<MixedPoint> = (0..cfg.n_random).map(|_| space.sample_uniform(&mut rng)).collect();
    candidates.extend(spray_points(space, incumbent, cfg, derive_seed(seed, &[1]))?);
    let scores = par::map_range(candidates.len(), |i| ei_unchecked(model, &candidates[i], best));

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let best_initial_ei = scores[order[0]];

    let starts: Vec<usize> = order.iter().copied().take(cfg.n_starts).collect();
    let searched = par::map_range(starts.len(), |s| {
        let mut obj = |x: &MixedPoint| ei_unchecked(model, x, best);
        let mut x = candidates[starts[s]].clone();
        let mut fx = scores[starts[s]];
        for _ in 0..cfg.max_alternations {
            let (xd, _) = hill_climb_discrete(space, &mut obj, &x);
            let (xc, fc) = continuous_step(space, &mut obj, &xd);
            let gain = fc - fx;
            x = xc;
            fx = fc;
            if !(gain > cfg.tol) {
                break;
            }
        }
        (x, fx)
    });

    // Ranked pool: local-search results first (they dominate their starts), then the raw candidates.
    let mut pool: Vec<(MixedPoint, f64)> = searched;
    pool.extend(order.iter().map(|&i| (candidates[i].clone(), scores[i])));
    let mut ranked: Vec<usize> = (0..pool.len()).collect();
    ranked.sort_by(|&a, &b| pool[b].1.total_cmp(&pool[a].1).then(a.cmp(&b)));

    let seen = |x: &MixedPoint| history.points().iter().any(|p| p == x);
    let top = ranked[0];
    if let Some(&i) = ranked.iter().find(|&&i| !seen(&pool[i].0)) {
        return Ok(Suggestion {
            point: pool[i].0.clone(),
            ei: pool[i].1,
            best_initial_ei,
            deduplicated: i != top && seen(&pool[top].0),
        });
    }
    // Every candidate was already evaluated: try fresh random draws before giving up.
    for _ in 0..1000 {
        let x = space.sample_uniform(&mut rng);
        if !seen(&x) {
            let ei = ei_unchecked(model, &x, best);
            return Ok(Suggestion { point: x, ei, best_initial_ei, deduplicated: true });
        }
    }
    Ok(Suggestion {
        point: pool[top].0.clone(),
        ei: pool[top].1,
        best_initial_ei,
        deduplicated: false,
    })
}
