//! Gaussian-process regression: marginal likelihood, multi-start fitting and prediction.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Hyperparams, KernelSpec, ParamLayout};
use crate::optim::{minimize_box, BoxOptions};
use crate::par;
use crate::space::MixedPoint;
use crate::util::derive_seed;

/// Multipliers of the mean diagonal tried after the bare noise level.
const JITTER_LADDER: [f64; 3] = [1e-10, 1e-8, 1e-6];

const SIGMA_BOUNDS: (f64, f64) = (1e-8, 1e3);
const SHAPE_BOUNDS: (f64, f64) = (1e-6, 1e3);
const THETA_BOUNDS: (f64, f64) = (1e-3, 1e3);

#[derive(Debug, Clone)]
pub struct Dataset {
    points: Vec<MixedPoint>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(points: Vec<MixedPoint>, targets: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidSize("dataset needs at least one point".into()));
        }
        if points.len() != targets.len() {
            return Err(Error::Shape {
                expected: points.len(),
                got: targets.len(),
            });
        }
        if let Some(y) = targets.iter().find(|y| !y.is_finite()) {
            return Err(Error::NonFinite {
                context: "dataset target".into(),
                value: *y,
            });
        }
        Ok(Self { points, targets })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[MixedPoint] {
        &self.points
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
}

/// Affine map between raw targets and the unit-variance scale the GP works in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub scale: f64,
}

impl Standardizer {
    pub fn identity() -> Self {
        Self { mean: 0.0, scale: 1.0 }
    }

    /// Center and scale to unit (population) variance; constant targets keep scale 1.
    pub fn from_targets(y: &[f64]) -> Self {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        let scale = if sd > 1e-12 * (1.0 + mean.abs()) { sd } else { 1.0 };
        Self { mean, scale }
    }

    fn apply(&self, y: &[f64]) -> DVector<f64> {
        DVector::from_iterator(y.len(), y.iter().map(|v| (v - self.mean) / self.scale))
    }
}

struct Factor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

/// Cholesky of `K + σ_n² I`, escalating the jitter when finite precision breaks PSD-ness.
fn factorize(k: &DMatrix<f64>, sigma_n2: f64) -> Result<Factor> {
    let n = k.nrows();
    let mut ky = k.clone();
    for i in 0..n {
        ky[(i, i)] += sigma_n2;
    }
    let mean_diag = ky.diagonal().mean().abs().max(f64::MIN_POSITIVE);
    for jitter in std::iter::once(0.0).chain(JITTER_LADDER.iter().map(|j| j * mean_diag)) {
        let mut m = ky.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = m.cholesky() {
            return Ok(Factor { chol, jitter });
        }
    }
    let min_eig = SymmetricEigen::new(ky).eigenvalues.min();
    Err(Error::NonPsd { min_eig })
}

fn lml_from(factor: &Factor, y: &DVector<f64>) -> (f64, DVector<f64>) {
    let alpha = factor.chol.solve(y);
    let n = y.len() as f64;
    let log_det_half: f64 = factor.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    let lml = -0.5 * y.dot(&alpha) - log_det_half - 0.5 * n * (2.0 * PI).ln();
    (lml, alpha)
}

/// `−½ yᵀ(K + σ_n² I)⁻¹ y − ½ log det(K + σ_n² I) − (n/2) log 2π` on the raw targets.
pub fn log_marginal_likelihood(spec: &KernelSpec, hp: &Hyperparams, data: &Dataset) -> Result<f64> {
    let k = spec.gram(hp, data.points())?;
    let factor = factorize(&k, hp.sigma_n2)?;
    let y = DVector::from_column_slice(data.targets());
    Ok(lml_from(&factor, &y).0)
}

/// Log-space parameter vector: layout parameters followed by `log σ_n²`.
#[derive(Debug, Clone)]
pub(crate) struct Packing {
    layout: ParamLayout,
    template: Hyperparams,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Packing {
    pub(crate) fn new(spec: &KernelSpec, template: Hyperparams) -> Self {
        let layout = spec.layout();
        let widths = spec.space().widths();
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for w in widths.iter().take(layout.n_theta) {
            lower.push((THETA_BOUNDS.0 * w).ln());
            upper.push((THETA_BOUNDS.1 * w).ln());
        }
        for _ in 0..(layout.n_alpha + layout.n_beta) {
            lower.push(SHAPE_BOUNDS.0.ln());
            upper.push(SHAPE_BOUNDS.1.ln());
        }
        // A connected factor's diagonal is at least f(0)/|V|, so the product
        // kernel can need up to Π|V| more amplitude than a single factor.
        let amplitude: f64 = spec
            .space()
            .factor_sizes()
            .iter()
            .map(|&n| n as f64)
            .product::<f64>()
            .min(1e12);
        lower.push(SIGMA_BOUNDS.0.ln());
        upper.push((SIGMA_BOUNDS.1 * amplitude).ln());
        lower.push(SIGMA_BOUNDS.0.ln());
        upper.push(SIGMA_BOUNDS.1.ln());
        Self { layout, template, lower, upper }
    }

    #[cfg(test)]
    fn len(&self) -> usize {
        self.layout.len() + 1
    }

    pub(crate) fn pack(&self, hp: &Hyperparams) -> Vec<f64> {
        let l = &self.layout;
        let mut v: Vec<f64> = hp.theta[..l.n_theta]
            .iter()
            .chain(&hp.alpha[..l.n_alpha])
            .chain(&hp.beta[..l.n_beta])
            .map(|x| x.ln())
            .collect();
        v.push(hp.sigma_f2.ln());
        v.push(hp.sigma_n2.ln());
        for (x, (lo, hi)) in v.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *x = x.clamp(*lo, *hi);
        }
        v
    }

    pub(crate) fn unpack(&self, v: &[f64]) -> Hyperparams {
        let l = &self.layout;
        let mut hp = self.template.clone();
        let mut it = v.iter().map(|x| x.exp());
        for t in hp.theta.iter_mut().take(l.n_theta) {
            *t = it.next().unwrap();
        }
        for a in hp.alpha.iter_mut().take(l.n_alpha) {
            *a = it.next().unwrap();
        }
        for b in hp.beta.iter_mut().take(l.n_beta) {
            *b = it.next().unwrap();
        }
        hp.sigma_f2 = it.next().unwrap();
        hp.sigma_n2 = it.next().unwrap();
        hp
    }
}

/// Log marginal likelihood on (already standardized) targets and its
/// gradient with respect to the packed log-parameters.
pub(crate) fn lml_and_grad(
    spec: &KernelSpec,
    hp: &Hyperparams,
    points: &[MixedPoint],
    y: &DVector<f64>,
) -> Result<(f64, Vec<f64>)> {
    let (k, dk) = spec.gram_with_grads(hp, points)?;
    let factor = factorize(&k, hp.sigma_n2)?;
    let (lml, alpha) = lml_from(&factor, y);
    let kinv = factor.chol.inverse();
    let w = &alpha * alpha.transpose() - kinv;
    let mut grad: Vec<f64> = dk.iter().map(|d| 0.5 * w.component_mul(d).sum()).collect();
    grad.push(0.5 * hp.sigma_n2 * w.trace());
    Ok((lml, grad))
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub restarts: usize,
    pub seed: u64,
    /// Used as restart #0 in place of a random initialization.
    pub warm_start: Option<Hyperparams>,
    pub max_iter: usize,
    pub ftol: f64,
    /// Standardize targets before fitting (predictions are mapped back).
    pub standardize: bool,
}

impl FitOptions {
    pub fn new(restarts: usize, seed: u64) -> Self {
        Self {
            restarts,
            seed,
            warm_start: None,
            max_iter: 200,
            ftol: 1e-6,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartOutcome {
    pub init: Hyperparams,
    /// Log marginal likelihood at the initialization (`-inf` if it failed).
    pub init_objective: f64,
    pub objective: f64,
    pub hyperparams: Hyperparams,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct GpModel {
    spec: KernelSpec,
    hp: Hyperparams,
    data: Dataset,
    standardizer: Standardizer,
    chol: Cholesky<f64, Dyn>,
    alpha_vec: DVector<f64>,
    jitter: f64,
    lml: f64,
    restarts: Vec<RestartOutcome>,
}

impl GpModel {
    /// Condition on `data` with fixed hyperparameters and raw targets.
    pub fn condition(spec: &KernelSpec, hp: Hyperparams, data: Dataset) -> Result<Self> {
        Self::condition_scaled(spec, hp, data, Standardizer::identity())
    }

    pub fn condition_scaled(
        spec: &KernelSpec,
        hp: Hyperparams,
        data: Dataset,
        standardizer: Standardizer,
    ) -> Result<Self> {
        let k = spec.gram(&hp, data.points())?;
        let factor = factorize(&k, hp.sigma_n2)?;
        let y = standardizer.apply(data.targets());
        let (lml, alpha_vec) = lml_from(&factor, &y);
        Ok(Self {
            spec: spec.clone(),
            hp,
            data,
            standardizer,
            chol: factor.chol,
            alpha_vec,
            jitter: factor.jitter,
            lml,
            restarts: Vec::new(),
        })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn standardizer(&self) -> Standardizer {
        self.standardizer
    }

    /// Lower Cholesky factor of `K + (σ_n² + jitter) I`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `(K + σ_n² I)⁻¹ y` on the standardized targets.
    pub fn alpha_vec(&self) -> &DVector<f64> {
        &self.alpha_vec
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Log marginal likelihood on the standardized targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    pub fn restarts(&self) -> &[RestartOutcome] {
        &self.restarts
    }

    /// Observation noise variance on the raw target scale.
    pub fn noise_variance(&self) -> f64 {
        self.hp.sigma_n2 * self.standardizer.scale.powi(2)
    }

    /// Predictive mean and latent variance (noise excluded) on the raw target scale.
    pub fn predict(&self, x: &MixedPoint) -> Result<(f64, f64)> {
        self.spec.space().validate(x)?;
        self.predict_unchecked(x)
    }

    pub(crate) fn predict_unchecked(&self, x: &MixedPoint) -> Result<(f64, f64)> {
        let ks = self.spec.cross_unchecked(&self.hp, self.data.points(), x)?;
        let kss = self.spec.eval_unchecked(&self.hp, x, x)?;
        let mu = ks.dot(&self.alpha_vec);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .ok_or_else(|| Error::Fit("singular Cholesky factor".into()))?;
        let var = (kss - v.norm_squared()).clamp(0.0, kss.max(0.0));
        let s = self.standardizer;
        Ok((s.mean + s.scale * mu, var * s.scale * s.scale))
    }
}

/// Random initialization. σ_f² is set so the prior variance averaged over the
/// training inputs equals the target variance.
fn sample_init<R: Rng>(spec: &KernelSpec, points: &[MixedPoint], rng: &mut R, y_var: f64) -> Hyperparams {
    let space = spec.space();
    let mut hp = Hyperparams::default_for(space);
    let (lo, hi) = (0.1f64.ln(), 10f64.ln());
    for (t, w) in hp.theta.iter_mut().zip(space.widths()) {
        *t = w * rng.random_range(lo..hi).exp();
    }
    for a in hp.alpha.iter_mut().chain(hp.beta.iter_mut()) {
        *a = rng.random_range(0.1..2.0);
    }
    hp.sigma_f2 = 1.0;
    let mean_diag = points
        .iter()
        .map(|x| spec.eval_unchecked(&hp, x, x).unwrap_or(1.0))
        .sum::<f64>()
        / points.len() as f64;
    hp.sigma_f2 = if mean_diag > 0.0 && mean_diag.is_finite() { y_var / mean_diag } else { y_var };
    hp.sigma_n2 = 1e-2 * y_var;
    hp
}

/// Multi-start maximization of the log marginal likelihood.
pub fn fit(spec: &KernelSpec, data: &Dataset, restarts: usize, seed: u64) -> Result<GpModel> {
    fit_with(spec, data, &FitOptions::new(restarts, seed))
}

pub fn fit_with(spec: &KernelSpec, data: &Dataset, opts: &FitOptions) -> Result<GpModel> {
    if opts.restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be at least 1".into()));
    }
    for x in data.points() {
        spec.space().validate(x)?;
    }
    let standardizer = if opts.standardize {
        Standardizer::from_targets(data.targets())
    } else {
        Standardizer::identity()
    };
    let y = standardizer.apply(data.targets());
    let n = y.len() as f64;
    let mean = y.mean();
    let y_var = {
        let v = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if v > 1e-12 {
            v
        } else {
            1.0
        }
    };

    let packing = Packing::new(spec, Hyperparams::default_for(spec.space()));
    let box_opts = BoxOptions {
        max_iter: opts.max_iter,
        ftol: opts.ftol,
        gtol: 1e-8,
        initial_step: 1.0,
    };

    let outcomes = par::map_range(opts.restarts, |r| {
        let init = match (&opts.warm_start, r) {
            (Some(hp), 0) => hp.clone(),
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[r as u64]));
                sample_init(spec, data.points(), &mut rng, y_var)
            }
        };
        let x0 = packing.pack(&init);
        let init = packing.unpack(&x0);
        let objective = |x: &[f64]| -> (f64, Vec<f64>) {
            let hp = packing.unpack(x);
            match lml_and_grad(spec, &hp, data.points(), &y) {
                Ok((lml, g)) if lml.is_finite() && g.iter().all(|v| v.is_finite()) => {
                    (-lml, g.into_iter().map(|v| -v).collect())
                }
                _ => (f64::INFINITY, vec![0.0; x.len()]),
            }
        };
        let init_objective = -objective(&x0).0;
        let m = minimize_box(objective, &x0, &packing.lower, &packing.upper, &box_opts);
        RestartOutcome {
            init,
            init_objective,
            objective: -m.value,
            hyperparams: packing.unpack(&m.x),
            iterations: m.iterations,
        }
    });

    let best = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.objective.is_finite())
        .fold(None::<(usize, f64)>, |acc, (i, o)| match acc {
            Some((_, v)) if v >= o.objective => acc,
            _ => Some((i, o.objective)),
        });
    let Some((best, _)) = best else {
        return Err(Error::Fit(format!(
            "all {} restarts failed to produce a finite marginal likelihood",
            opts.restarts
        )));
    };
    let hp = outcomes[best].hyperparams.clone();
    let mut model = GpModel::condition_scaled(spec, hp, data.clone(), standardizer)?;
    model.restarts = outcomes;
    Ok(model)
}
