//! Frequency-modulated kernels on mixed spaces and their additive/product baselines.
//!
//! An FM kernel lets the continuous distance act on every graph frequency
//! separately:
//!
//! ```text
//! k((c, v), (c', v')) = σ_f² ∏_p Σ_i U^p[v_p, i] f(λ_i^p, ‖c − c'‖²_θ | α_p, β_p) U^p[v'_p, i]
//! ```
//!
//! The distance is shared by all factors. Baseline kernels combine an RBF
//! kernel `exp(−‖c − c'‖²_θ)` with a graph kernel `∏_p [U^p h(Λ^p) U^pᵀ]` by
//! product or (averaged) sum.
//!
//! Evaluation sums over [`SpectralGroup`](crate::graph::SpectralGroup)s rather
//! than individual eigenpairs. Repeated eigenvalues collapse into one
//! projector, which turns the 17 eigenpairs of `K_17` into two terms.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::space::{MixedPoint, SearchSpace};

/// Kernel values with magnitude below this are flushed to zero.
const FLUSH: f64 = 1e-300;
/// Slack allowed on the arcsine argument of the neural-network kernel.
const ASIN_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Continuous lengthscales, one per dimension.
    pub theta: Vec<f64>,
    /// Per-factor modulation strength.
    pub alpha: Vec<f64>,
    /// Per-factor spectral decay.
    pub beta: Vec<f64>,
    pub sigma_f2: f64,
    pub sigma_n2: f64,
}

impl Hyperparams {
    /// Lengthscales equal to the box widths, unit α and β, σ_f² = 1, σ_n² = 1e-2.
    pub fn default_for(space: &SearchSpace) -> Self {
        Self {
            theta: space.widths(),
            alpha: vec![1.0; space.n_factors()],
            beta: vec![1.0; space.n_factors()],
            sigma_f2: 1.0,
            sigma_n2: 1e-2,
        }
    }

    pub fn validate(&self, space: &SearchSpace) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidHyperparams(msg));
        if self.theta.len() != space.dim_cont() {
            return bad(format!("|theta| = {} but D_C = {}", self.theta.len(), space.dim_cont()));
        }
        if self.alpha.len() != space.n_factors() || self.beta.len() != space.n_factors() {
            return bad(format!(
                "|alpha| = {}, |beta| = {} but P = {}",
                self.alpha.len(),
                self.beta.len(),
                space.n_factors()
            ));
        }
        if let Some(t) = self.theta.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return bad(format!("lengthscale {t} must be positive"));
        }
        if let Some(a) = self
            .alpha
            .iter()
            .chain(&self.beta)
            .find(|a| !(a.is_finite() && **a >= 0.0))
        {
            return bad(format!("alpha/beta entry {a} must be nonnegative"));
        }
        for (name, v) in [("sigma_f2", self.sigma_f2), ("sigma_n2", self.sigma_n2)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        Ok(())
    }
}

/// One atom `a (1 + βλ + α t^τ)^(−ρ)` of a discrete-measure FM family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyAtom {
    pub weight: f64,
    pub exponent: f64,
    pub power: u32,
}

/// Symmetric positive definite matrix for the neural-network kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SpdMatrix(DMatrix<f64>);

impl SpdMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidArgument("Sigma must be square".into()));
        }
        if (&m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
            return Err(Error::InvalidArgument("Sigma must be symmetric".into()));
        }
        if m.nrows() > 0 && m.clone().cholesky().is_none() {
            return Err(Error::InvalidArgument("Sigma must be positive definite".into()));
        }
        Ok(Self(m))
    }

    pub fn identity(d: usize) -> Self {
        Self(DMatrix::identity(d, d))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

impl TryFrom<Vec<Vec<f64>>> for SpdMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument("Sigma rows must have equal length".into()));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }
}

impl From<SpdMatrix> for Vec<Vec<f64>> {
    fn from(m: SpdMatrix) -> Self {
        m.0.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

/// Frequency modulating function `f(λ, t | α, β)`.
///
/// The second argument is the squared weighted distance for every variant
/// except `NnExt`, which receives the neural-network kernel value instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FmFunction {
    /// `1 / (1 + βλ + α t)`
    Lap,
    /// `exp(−(1 + α t) βλ)`; violates the modulation principle.
    Dif,
    /// `Σ_n a_n (1 + βλ + α t^(τ_n / 2))^(−ρ_n)`
    Family(Vec<FamilyAtom>),
    /// `1 / (2 + βλ − k_NN)`
    NnExt(SpdMatrix),
}

/// Value and partial derivatives of a modulating function.
#[derive(Debug, Clone, Copy, Default)]
struct FmPartials {
    value: f64,
    d_alpha: f64,
    d_beta: f64,
    d_input: f64,
}

impl FmFunction {
    /// Atoms `0.5 (..)^-1 + 0.3 (..)^-2 + 0.2 (..)^-3` with exponents 2, 1.5, 1.
    pub fn default_family() -> Self {
        FmFunction::Family(vec![
            FamilyAtom { weight: 0.5, exponent: 2.0, power: 1 },
            FamilyAtom { weight: 0.3, exponent: 1.5, power: 2 },
            FamilyAtom { weight: 0.2, exponent: 1.0, power: 3 },
        ])
    }

    pub fn validate(&self) -> Result<()> {
        if let FmFunction::Family(atoms) = self {
            if atoms.iter().any(|a| !(a.weight >= 0.0 && a.weight.is_finite())) {
                return Err(Error::InvalidArgument("family weights must be nonnegative".into()));
            }
            if !atoms.iter().any(|a| a.weight > 0.0) {
                return Err(Error::InvalidArgument("family needs a positive weight".into()));
            }
            if atoms.iter().any(|a| !(a.exponent > 0.0 && a.exponent <= 2.0)) {
                return Err(Error::InvalidArgument("family exponents must lie in (0, 2]".into()));
            }
            if atoms.iter().any(|a| a.power == 0) {
                return Err(Error::InvalidArgument("family powers must be positive".into()));
            }
        }
        Ok(())
    }

    /// Whether the second argument is a kernel value (larger = more similar)
    /// rather than a distance.
    pub fn modulated_by_kernel(&self) -> bool {
        matches!(self, FmFunction::NnExt(_))
    }

    pub fn eval(&self, lambda: f64, input: f64, alpha: f64, beta: f64) -> Result<f64> {
        let value = self.partials(lambda, input, alpha, beta).value;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("modulating function at lambda = {lambda}, input = {input}"),
                value,
            });
        }
        Ok(value)
    }

    fn partials(&self, lambda: f64, input: f64, alpha: f64, beta: f64) -> FmPartials {
        match self {
            FmFunction::Lap => {
                let f = 1.0 / (1.0 + beta * lambda + alpha * input);
                let f2 = f * f;
                FmPartials {
                    value: f,
                    d_alpha: -input * f2,
                    d_beta: -lambda * f2,
                    d_input: -alpha * f2,
                }
            }
            FmFunction::Dif => {
                let scale = 1.0 + alpha * input;
                let f = (-scale * beta * lambda).exp();
                FmPartials {
                    value: f,
                    d_alpha: -input * beta * lambda * f,
                    d_beta: -scale * lambda * f,
                    d_input: -alpha * beta * lambda * f,
                }
            }
            FmFunction::Family(atoms) => {
                let mut out = FmPartials::default();
                for atom in atoms {
                    let half = atom.exponent / 2.0;
                    let t = if input > 0.0 { input.powf(half) } else { 0.0 };
                    let base = 1.0 + beta * lambda + alpha * t;
                    let rho = atom.power as i32;
                    let term = atom.weight * base.powi(-rho);
                    // d/d(base) of a * base^-rho
                    let slope = -(rho as f64) * term / base;
                    out.value += term;
                    out.d_alpha += slope * t;
                    out.d_beta += slope * lambda;
                    if input > 0.0 {
                        out.d_input += slope * alpha * half * t / input;
                    }
                }
                out
            }
            FmFunction::NnExt(_) => {
                let f = 1.0 / (2.0 + beta * lambda - input);
                let f2 = f * f;
                FmPartials {
                    value: f,
                    d_alpha: 0.0,
                    d_beta: -lambda * f2,
                    d_input: f2,
                }
            }
        }
    }
}

/// Spectrum function of the plain graph kernel used by the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscSpectrum {
    /// Regularized Laplacian `1 / (1 + βλ)`.
    Lap,
    /// Diffusion `exp(−βλ)`.
    Dif,
}

impl DiscSpectrum {
    pub fn eval(self, lambda: f64, beta: f64) -> f64 {
        self.value_and_dbeta(lambda, beta).0
    }

    fn value_and_dbeta(self, lambda: f64, beta: f64) -> (f64, f64) {
        match self {
            DiscSpectrum::Lap => {
                let f = 1.0 / (1.0 + beta * lambda);
                (f, -lambda * f * f)
            }
            DiscSpectrum::Dif => {
                let f = (-beta * lambda).exp();
                (f, -lambda * f)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelForm {
    /// Product-form FM kernel with the given modulating function.
    Mod(FmFunction),
    /// `σ_f² k_RBF k_disc`
    Prod(DiscSpectrum),
    /// `σ_f² (k_RBF + k_disc) / 2`
    Add(DiscSpectrum),
    /// `σ_f² k_RBF`
    ContOnly,
    /// `σ_f² k_disc`
    DiscOnly(DiscSpectrum),
}

pub const KERNEL_NAMES: [&str; 8] = [
    "modlap", "moddif", "modfamily", "modnn", "prodlap", "proddif", "addlap", "adddif",
];

impl KernelForm {
    /// Parse a configuration name. `modnn` uses `Σ = I` of dimension `dim_cont`.
    pub fn from_name(name: &str, dim_cont: usize) -> Result<Self> {
        Ok(match name.to_ascii_lowercase().as_str() {
            "modlap" => KernelForm::Mod(FmFunction::Lap),
            "moddif" => KernelForm::Mod(FmFunction::Dif),
            "modfamily" => KernelForm::Mod(FmFunction::default_family()),
            "modnn" => KernelForm::Mod(FmFunction::NnExt(SpdMatrix::identity(dim_cont))),
            "prodlap" => KernelForm::Prod(DiscSpectrum::Lap),
            "proddif" => KernelForm::Prod(DiscSpectrum::Dif),
            "addlap" => KernelForm::Add(DiscSpectrum::Lap),
            "adddif" => KernelForm::Add(DiscSpectrum::Dif),
            "contonly" => KernelForm::ContOnly,
            "disconlylap" => KernelForm::DiscOnly(DiscSpectrum::Lap),
            "disconlydif" => KernelForm::DiscOnly(DiscSpectrum::Dif),
            other => {
                return Err(Error::Config(format!(
                    "unknown kernel `{other}` (expected one of {})",
                    KERNEL_NAMES.join(", ")
                )))
            }
        })
    }
}

/// Which hyperparameters a kernel actually reads, in gradient order:
/// `log θ_d`, `log α_p`, `log β_p`, `log σ_f²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_theta: usize,
    pub n_alpha: usize,
    pub n_beta: usize,
}

impl ParamLayout {
    /// Kernel parameters only; σ_n² is handled by the GP.
    pub fn len(&self) -> usize {
        self.n_theta + self.n_alpha + self.n_beta + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn alpha_offset(&self) -> usize {
        self.n_theta
    }

    fn beta_offset(&self) -> usize {
        self.n_theta + self.n_alpha
    }

    fn sigma_offset(&self) -> usize {
        self.n_theta + self.n_alpha + self.n_beta
    }
}

#[derive(Debug, Clone)]
pub struct KernelSpec {
    form: KernelForm,
    space: SearchSpace,
}

impl KernelSpec {
    pub fn new(form: KernelForm, space: SearchSpace) -> Result<Self> {
        if let KernelForm::Mod(f) = &form {
            f.validate()?;
            if let FmFunction::NnExt(sigma) = f {
                if sigma.dim() != space.dim_cont() {
                    return Err(Error::Shape {
                        expected: space.dim_cont(),
                        got: sigma.dim(),
                    });
                }
            }
        }
        Ok(Self { form, space })
    }

    pub fn from_name(name: &str, space: SearchSpace) -> Result<Self> {
        let form = KernelForm::from_name(name, space.dim_cont())?;
        Self::new(form, space)
    }

    pub fn form(&self) -> &KernelForm {
        &self.form
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn layout(&self) -> ParamLayout {
        let d = self.space.dim_cont();
        let p = self.space.n_factors();
        let (theta, alpha, beta) = match &self.form {
            KernelForm::Mod(FmFunction::NnExt(_)) => (false, false, true),
            KernelForm::Mod(_) => (true, true, true),
            KernelForm::Prod(_) | KernelForm::Add(_) => (true, false, true),
            KernelForm::ContOnly => (true, false, false),
            KernelForm::DiscOnly(_) => (false, false, true),
        };
        ParamLayout {
            n_theta: if theta { d } else { 0 },
            n_alpha: if alpha { p } else { 0 },
            n_beta: if beta { p } else { 0 },
        }
    }

    fn check_inputs(&self, hp: &Hyperparams, points: &[&MixedPoint]) -> Result<()> {
        hp.validate(&self.space)?;
        points.iter().try_for_each(|x| self.space.validate(x))
    }

    /// Kernel value `k(x, x2)`.
    pub fn eval(&self, hp: &Hyperparams, x: &MixedPoint, x2: &MixedPoint) -> Result<f64> {
        self.check_inputs(hp, &[x, x2])?;
        self.eval_inner(hp, x, x2, None)
    }

    pub(crate) fn eval_unchecked(&self, hp: &Hyperparams, x: &MixedPoint, x2: &MixedPoint) -> Result<f64> {
        self.eval_inner(hp, x, x2, None)
    }

    /// Kernel value plus its gradient with respect to the log-parameters in
    /// [`ParamLayout`] order. `grad` must have length `layout().len()`.
    pub fn eval_with_grad(
        &self,
        hp: &Hyperparams,
        x: &MixedPoint,
        x2: &MixedPoint,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_inputs(hp, &[x, x2])?;
        let layout = self.layout();
        if grad.len() != layout.len() {
            return Err(Error::Shape {
                expected: layout.len(),
                got: grad.len(),
            });
        }
        self.eval_inner(hp, x, x2, Some(grad))
    }

    /// Gram matrix over `points`; only the upper triangle is evaluated.
    pub fn gram(&self, hp: &Hyperparams, points: &[MixedPoint]) -> Result<DMatrix<f64>> {
        if points.is_empty() {
            return Err(Error::InvalidSize("gram needs at least one point".into()));
        }
        self.check_inputs(hp, &points.iter().collect::<Vec<_>>())?;
        self.gram_unchecked(hp, points)
    }

    pub(crate) fn gram_unchecked(
        &self,
        hp: &Hyperparams,
        points: &[MixedPoint],
    ) -> Result<DMatrix<f64>> {
        let n = points.len();
        let rows = par::map_range(n, |i| {
            (i..n)
                .map(|j| self.eval_inner(hp, &points[i], &points[j], None))
                .collect::<Result<Vec<f64>>>()
        });
        let mut k = DMatrix::zeros(n, n);
        for (i, row) in rows.into_iter().enumerate() {
            for (off, v) in row?.into_iter().enumerate() {
                k[(i, i + off)] = v;
                k[(i + off, i)] = v;
            }
        }
        Ok(k)
    }

    /// Gram matrix and one derivative matrix per layout parameter.
    pub(crate) fn gram_with_grads(
        &self,
        hp: &Hyperparams,
        points: &[MixedPoint],
    ) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        let n = points.len();
        let m = self.layout().len();
        let rows = par::map_range(n, |i| {
            let mut out = Vec::with_capacity((n - i) * (m + 1));
            let mut g = vec![0.0; m];
            for j in i..n {
                g.iter_mut().for_each(|v| *v = 0.0);
                let v = self.eval_inner(hp, &points[i], &points[j], Some(&mut g))?;
                out.push(v);
                out.extend_from_slice(&g);
            }
            Ok::<_, Error>(out)
        });
        let mut k = DMatrix::zeros(n, n);
        let mut dk = vec![DMatrix::zeros(n, n); m];
        for (i, row) in rows.into_iter().enumerate() {
            let row: Vec<f64> = row?;
            for (off, chunk) in row.chunks_exact(m + 1).enumerate() {
                let j = i + off;
                k[(i, j)] = chunk[0];
                k[(j, i)] = chunk[0];
                for (q, &d) in chunk[1..].iter().enumerate() {
                    dk[q][(i, j)] = d;
                    dk[q][(j, i)] = d;
                }
            }
        }
        Ok((k, dk))
    }

    /// `[k(x, p_1), ..., k(x, p_n)]` without validating inputs.
    pub(crate) fn cross_unchecked(
        &self,
        hp: &Hyperparams,
        points: &[MixedPoint],
        x: &MixedPoint,
    ) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(points.len());
        for (i, p) in points.iter().enumerate() {
            out[i] = self.eval_inner(hp, p, x, None)?;
        }
        Ok(out)
    }

    /// FM kernel value for vertex tuples `v`, `v2` at a given modulation input
    /// (squared distance, or `k_NN` for the kernel-modulated variant).
    pub fn mod_value_at(
        &self,
        hp: &Hyperparams,
        v: &[usize],
        v2: &[usize],
        input: f64,
    ) -> Result<f64> {
        let KernelForm::Mod(f) = &self.form else {
            return Err(Error::InvalidArgument("mod_value_at needs an FM kernel".into()));
        };
        let mut prod = hp.sigma_f2;
        for (p, g) in self.space.factors().iter().enumerate() {
            let mut s = 0.0;
            for grp in g.groups() {
                let w = grp.projector[(v[p], v2[p])];
                s += w * f.eval(grp.lambda, input, hp.alpha[p], hp.beta[p])?;
            }
            prod *= s;
        }
        Ok(flush(prod))
    }

    fn eval_inner(
        &self,
        hp: &Hyperparams,
        x: &MixedPoint,
        x2: &MixedPoint,
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        let value = match &self.form {
            KernelForm::Mod(f) => self.eval_mod(f, hp, x, x2, grad),
            form => self.eval_baseline(form, hp, x, x2, grad),
        };
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "kernel evaluation".into(),
                value,
            });
        }
        Ok(flush(value))
    }

    fn eval_mod(
        &self,
        f: &FmFunction,
        hp: &Hyperparams,
        x: &MixedPoint,
        x2: &MixedPoint,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let input = match f {
            FmFunction::NnExt(sigma) => nn_value(&x.cont, &x2.cont, sigma.matrix()),
            _ => sq_dist_unchecked(&x.cont, &x2.cont, &hp.theta),
        };
        let factors = self.space.factors();
        let want_grad = grad.is_some();
        let mut parts = Vec::with_capacity(factors.len());
        for (p, g) in factors.iter().enumerate() {
            let (v, w) = (x.disc[p], x2.disc[p]);
            let mut acc = FmPartials::default();
            for grp in g.groups() {
                let proj = grp.projector[(v, w)];
                let e = f.partials(grp.lambda, input, hp.alpha[p], hp.beta[p]);
                acc.value += proj * e.value;
                if want_grad {
                    acc.d_alpha += proj * e.d_alpha;
                    acc.d_beta += proj * e.d_beta;
                    acc.d_input += proj * e.d_input;
                }
            }
            parts.push(acc);
        }
        let values: Vec<f64> = parts.iter().map(|a| a.value).collect();
        let k = hp.sigma_f2 * values.iter().product::<f64>();

        if let Some(grad) = grad {
            let layout = self.layout();
            let others = products_excluding(&values);
            let mut d_input = 0.0;
            for (p, part) in parts.iter().enumerate() {
                let scale = hp.sigma_f2 * others[p];
                if layout.n_alpha > 0 {
                    grad[layout.alpha_offset() + p] = scale * part.d_alpha * hp.alpha[p];
                }
                if layout.n_beta > 0 {
                    grad[layout.beta_offset() + p] = scale * part.d_beta * hp.beta[p];
                }
                d_input += scale * part.d_input;
            }
            if layout.n_theta > 0 {
                write_theta_grad(grad, d_input, &x.cont, &x2.cont, &hp.theta);
            }
            grad[layout.sigma_offset()] = k;
        }
        k
    }

    fn eval_baseline(
        &self,
        form: &KernelForm,
        hp: &Hyperparams,
        x: &MixedPoint,
        x2: &MixedPoint,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let (spectrum, uses_rbf, uses_disc) = match *form {
            KernelForm::Prod(s) | KernelForm::Add(s) => (Some(s), true, true),
            KernelForm::ContOnly => (None, true, false),
            KernelForm::DiscOnly(s) => (Some(s), false, true),
            KernelForm::Mod(_) => unreachable!("handled by eval_mod"),
        };
        let rbf = if uses_rbf {
            (-sq_dist_unchecked(&x.cont, &x2.cont, &hp.theta)).exp()
        } else {
            1.0
        };

        let mut values = Vec::new();
        let mut d_beta = Vec::new();
        if let (Some(spectrum), true) = (spectrum, uses_disc) {
            for (p, g) in self.space.factors().iter().enumerate() {
                let (v, w) = (x.disc[p], x2.disc[p]);
                let (mut s, mut ds) = (0.0, 0.0);
                for grp in g.groups() {
                    let proj = grp.projector[(v, w)];
                    let (fv, fd) = spectrum.value_and_dbeta(grp.lambda, hp.beta[p]);
                    s += proj * fv;
                    ds += proj * fd;
                }
                values.push(s);
                d_beta.push(ds);
            }
        }
        let disc: f64 = values.iter().product();

        let is_add = matches!(form, KernelForm::Add(_));
        let k = match form {
            KernelForm::Add(_) => hp.sigma_f2 * 0.5 * (rbf + disc),
            _ => hp.sigma_f2 * rbf * disc,
        };

        if let Some(grad) = grad {
            let layout = self.layout();
            // dk/d(rbf) and dk/d(disc)
            let (k_rbf, k_disc) = if is_add {
                (0.5 * hp.sigma_f2, 0.5 * hp.sigma_f2)
            } else {
                (hp.sigma_f2 * disc, hp.sigma_f2 * rbf)
            };
            if layout.n_theta > 0 {
                // d rbf / d s = -rbf
                write_theta_grad(grad, -k_rbf * rbf, &x.cont, &x2.cont, &hp.theta);
            }
            if layout.n_beta > 0 {
                let others = products_excluding(&values);
                for p in 0..values.len() {
                    grad[layout.beta_offset() + p] = k_disc * others[p] * d_beta[p] * hp.beta[p];
                }
            }
            grad[layout.sigma_offset()] = k;
        }
        k
    }
}

fn flush(v: f64) -> f64 {
    if v.abs() < FLUSH {
        0.0
    } else {
        v
    }
}

/// `out[p] = ∏_{q ≠ p} values[q]`, without division.
fn products_excluding(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut out = vec![1.0; n];
    let mut acc = 1.0;
    for p in 0..n {
        out[p] = acc;
        acc *= values[p];
    }
    acc = 1.0;
    for p in (0..n).rev() {
        out[p] *= acc;
        acc *= values[p];
    }
    out
}

/// Chain rule through `s = Σ (c_d − c'_d)² / θ_d²`: `ds/dlog θ_d = −2 (c_d − c'_d)² / θ_d²`.
fn write_theta_grad(grad: &mut [f64], dk_ds: f64, c: &[f64], c2: &[f64], theta: &[f64]) {
    for d in 0..theta.len() {
        let r = (c[d] - c2[d]) / theta[d];
        grad[d] = dk_ds * (-2.0 * r * r);
    }
}

fn sq_dist_unchecked(c: &[f64], c2: &[f64], theta: &[f64]) -> f64 {
    c.iter()
        .zip(c2)
        .zip(theta)
        .map(|((a, b), t)| {
            let r = (a - b) / t;
            r * r
        })
        .sum()
}

/// `Σ_d (c_d − c2_d)² / θ_d²`.
pub fn weighted_sq_dist(c: &[f64], c2: &[f64], theta: &[f64]) -> Result<f64> {
    if c.len() != c2.len() || c.len() != theta.len() {
        return Err(Error::Shape {
            expected: c.len(),
            got: if c2.len() != c.len() { c2.len() } else { theta.len() },
        });
    }
    Ok(sq_dist_unchecked(c, c2, theta))
}

fn quad(a: &[f64], m: &DMatrix<f64>, b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let mut row = 0.0;
        for j in 0..b.len() {
            row += m[(i, j)] * b[j];
        }
        s += a[i] * row;
    }
    s
}

fn nn_argument(c: &[f64], c2: &[f64], sigma: &DMatrix<f64>) -> f64 {
    // averaging both bilinear orders makes the value exactly symmetric
    let cross = 0.5 * (quad(c, sigma, c2) + quad(c2, sigma, c));
    let q1 = quad(c, sigma, c);
    let q2 = quad(c2, sigma, c2);
    2.0 * cross / ((1.0 + q1) * (1.0 + q2))
}

fn nn_value(c: &[f64], c2: &[f64], sigma: &DMatrix<f64>) -> f64 {
    (2.0 / PI) * nn_argument(c, c2, sigma).clamp(-1.0, 1.0).asin()
}

/// Neural-network kernel `(2/π) asin(2 cᵀΣc' / ((1 + cᵀΣc)(1 + c'ᵀΣc')))`.
pub fn nn_kernel_eval(c: &[f64], c2: &[f64], sigma: &SpdMatrix) -> Result<f64> {
    for len in [c.len(), c2.len()] {
        if len != sigma.dim() {
            return Err(Error::Shape {
                expected: sigma.dim(),
                got: len,
            });
        }
    }
    let arg = nn_argument(c, c2, sigma.matrix());
    if !arg.is_finite() || arg.abs() > 1.0 + ASIN_SLACK {
        return Err(Error::NonFinite {
            context: "neural-network kernel arcsine argument".into(),
            value: arg,
        });
    }
    Ok((2.0 / PI) * arg.clamp(-1.0, 1.0).asin())
}

/// Product-form FM kernel value; errors if `spec` is not an FM form.
pub fn fm_kernel_eval(
    spec: &KernelSpec,
    hp: &Hyperparams,
    x: &MixedPoint,
    x2: &MixedPoint,
) -> Result<f64> {
    if !matches!(spec.form(), KernelForm::Mod(_)) {
        return Err(Error::InvalidArgument("fm_kernel_eval needs an FM kernel".into()));
    }
    spec.eval(hp, x, x2)
}

/// Additive/product/single-part baseline value; errors on FM forms.
pub fn baseline_kernel_eval(
    spec: &KernelSpec,
    hp: &Hyperparams,
    x: &MixedPoint,
    x2: &MixedPoint,
) -> Result<f64> {
    if matches!(spec.form(), KernelForm::Mod(_)) {
        return Err(Error::InvalidArgument("baseline_kernel_eval needs a baseline kernel".into()));
    }
    spec.eval(hp, x, x2)
}
