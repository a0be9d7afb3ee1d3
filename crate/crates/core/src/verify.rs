//! Executable property checks for FM kernels and graph spectral transforms,
//! including counterexample searches.
//!
//! Every check is deterministic given its seed: trial `i` draws from its own
//! stream, trials may run in parallel, and reductions break ties by index.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_4;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{FactorGraph, GraphDecl};
use crate::kernel::{FamilyAtom, FmFunction, Hyperparams, KernelForm, KernelSpec, SpdMatrix};
use crate::par;
use crate::space::{MixedPoint, SearchSpace};
use crate::util::derive_seed;

pub const PSD_TOL: f64 = -1e-8;
pub const NONNEG_TOL: f64 = -1e-7;
pub const NEGATIVE_ENTRY_THRESHOLD: f64 = -1e-6;
pub const MONOTONE_TOL: f64 = 1e-9;
pub const CONVEXITY_TOL: f64 = -1e-9;
const DECREASE_TOL: f64 = 1e-12;
const DISTANCE_GRID: usize = 50;
const LAMBDA_GRID: usize = 64;
const MAX_DISTANCE: f64 = 3.0;

/// How a report's `passed` flag is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// A property that must hold; the witness is the worst offender on failure.
    Gated,
    /// Passes when a counterexample is found; the witness is that counterexample.
    Existence,
    /// Reported only; the witness is the worst violation, if any.
    Informational,
}

/// Enough state to rebuild and re-evaluate an offending trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub trial: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub graphs: Vec<GraphDecl>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bounds: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelForm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fm: Option<FmFunction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperparams: Option<Hyperparams>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<MixedPoint>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scalars: BTreeMap<String, f64>,
    /// The offending quantity (same meaning as the report margin).
    pub value: f64,
}

impl Witness {
    fn new(trial: usize, value: f64) -> Self {
        Self {
            trial,
            graphs: Vec::new(),
            bounds: Vec::new(),
            kernel: None,
            fm: None,
            hyperparams: None,
            points: Vec::new(),
            scalars: BTreeMap::new(),
            value,
        }
    }

    fn scalar(&self, key: &str) -> Result<f64> {
        self.scalars
            .get(key)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("witness lacks scalar '{key}'")))
    }

    fn graphs(&self) -> Result<Vec<FactorGraph>> {
        self.graphs.iter().map(GraphDecl::build).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub kind: CheckKind,
    pub trials: usize,
    /// Worst value of the checked quantity over all trials.
    pub margin: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl CheckReport {
    /// Whether this report should fail a verification run.
    pub fn is_failure(&self) -> bool {
        self.kind != CheckKind::Informational && !self.passed
    }
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[trial as u64]))
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..hi.ln()).exp()
}

/// Erdős–Rényi graph (edge probability 0.5) conditioned on connectivity,
/// weights uniform on (0.1, 2].
pub fn random_connected_graph<R: Rng>(rng: &mut R, n: usize) -> FactorGraph {
    loop {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(0.5) {
                    edges.push((i, j, 2.0 - 1.9 * rng.random::<f64>()));
                }
            }
        }
        let g = FactorGraph::from_weighted_edges(n, &edges).expect("valid edges");
        if g.is_connected() {
            return g;
        }
    }
}

fn random_graph_sized<R: Rng>(rng: &mut R) -> FactorGraph {
    let n = rng.random_range(2..=12);
    random_connected_graph(rng, n)
}

/// Extreme-to-average eigenvalue ratio `min λ(K) / (tr K / n)`.
pub fn normalized_min_eigenvalue(k: &DMatrix<f64>) -> f64 {
    let n = k.nrows() as f64;
    let scale = (k.trace() / n).abs().max(f64::MIN_POSITIVE);
    SymmetricEigen::new(k.clone()).eigenvalues.min() / scale
}

// ---------------------------------------------------------------- PSD

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsdFamily {
    ModLap,
    ModDif,
    ModFamily,
    ModNn,
}

impl PsdFamily {
    pub const ALL: [PsdFamily; 4] = [PsdFamily::ModLap, PsdFamily::ModDif, PsdFamily::ModFamily, PsdFamily::ModNn];

    pub fn name(self) -> &'static str {
        match self {
            PsdFamily::ModLap => "modlap",
            PsdFamily::ModDif => "moddif",
            PsdFamily::ModFamily => "modfamily",
            PsdFamily::ModNn => "modnn",
        }
    }

    fn sample_fm<R: Rng>(self, rng: &mut R, dim: usize) -> FmFunction {
        match self {
            PsdFamily::ModLap => FmFunction::Lap,
            PsdFamily::ModDif => FmFunction::Dif,
            PsdFamily::ModFamily => FmFunction::Family(
                (0..3)
                    .map(|_| FamilyAtom {
                        weight: rng.random_range(0.1..1.0),
                        exponent: rng.random_range(0.2..=2.0),
                        power: rng.random_range(1..=3),
                    })
                    .collect(),
            ),
            PsdFamily::ModNn => {
                let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
                let m = &a * a.transpose() / dim as f64 + DMatrix::identity(dim, dim) * 0.1;
                FmFunction::NnExt(SpdMatrix::new(m).expect("shifted Gram is SPD"))
            }
        }
    }
}

impl std::str::FromStr for PsdFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PsdFamily::ALL
            .into_iter()
            .find(|f| f.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown PSD family '{s}'")))
    }
}

struct PsdTrial {
    space: SearchSpace,
    form: KernelForm,
    hp: Hyperparams,
    points: Vec<MixedPoint>,
}

fn sample_psd_trial(family: PsdFamily, seed: u64, trial: usize) -> PsdTrial {
    let mut rng = trial_rng(seed, trial);
    let dim = rng.random_range(1..=3);
    let n_factors = rng.random_range(1..=3);
    let bounds = vec![(-1.0, 1.0); dim];
    let graphs = (0..n_factors).map(|_| random_graph_sized(&mut rng)).collect();
    let space = SearchSpace::new(bounds, graphs).unwrap();
    let form = KernelForm::Mod(family.sample_fm(&mut rng, dim));
    let hp = Hyperparams {
        theta: (0..dim).map(|_| log_uniform(&mut rng, 0.1, 10.0)).collect(),
        alpha: (0..n_factors).map(|_| log_uniform(&mut rng, 0.01, 10.0)).collect(),
        beta: (0..n_factors).map(|_| log_uniform(&mut rng, 0.01, 10.0)).collect(),
        sigma_f2: log_uniform(&mut rng, 0.1, 10.0),
        sigma_n2: 1e-2,
    };
    let n_points = rng.random_range(2..=20);
    let points = (0..n_points).map(|_| space.sample_uniform(&mut rng)).collect();
    PsdTrial { space, form, hp, points }
}

fn psd_margin(spec: &KernelSpec, hp: &Hyperparams, points: &[MixedPoint], negate: bool) -> Result<f64> {
    let mut k = spec.gram(hp, points)?;
    if negate {
        k = -k;
    }
    Ok(normalized_min_eigenvalue(&k))
}

/// Minimum normalized Gram eigenvalue over random graphs, hyperparameters and points.
pub fn check_psd(family: PsdFamily, trials: usize, seed: u64) -> CheckReport {
    check_psd_with(family, trials, seed, false)
}

/// `negate` multiplies every Gram matrix by −1 (the kernel built from −f on a
/// single factor), a failure-path hook for testing the reporting machinery.
pub fn check_psd_with(family: PsdFamily, trials: usize, seed: u64, negate: bool) -> CheckReport {
    let margins = par::map_range(trials, |t| {
        let tr = sample_psd_trial(family, seed, t);
        let spec = KernelSpec::new(tr.form, tr.space).expect("sampled kernel is valid");
        psd_margin(&spec, &tr.hp, &tr.points, negate).unwrap_or(f64::NEG_INFINITY)
    });
    let (worst, margin) = argmin(&margins);
    let passed = margin >= PSD_TOL;
    let witness = (!passed).then(|| {
        let tr = sample_psd_trial(family, seed, worst);
        let mut w = Witness::new(worst, margin);
        w.graphs = tr.space.factors().iter().map(|g| g.to_decl()).collect();
        w.bounds = tr.space.bounds().to_vec();
        w.kernel = Some(tr.form);
        w.hyperparams = Some(tr.hp);
        w.points = tr.points;
        w.scalars.insert("negated".into(), if negate { 1.0 } else { 0.0 });
        w
    });
    let name = if negate {
        format!("psd[{}-negated]", family.name())
    } else {
        format!("psd[{}]", family.name())
    };
    CheckReport {
        check: name,
        kind: CheckKind::Gated,
        trials,
        margin,
        tolerance: PSD_TOL,
        passed,
        witness,
        notes: Vec::new(),
    }
}

pub fn recheck_psd(w: &Witness) -> Result<f64> {
    let space = SearchSpace::new(w.bounds.clone(), w.graphs()?)?;
    let form = w.kernel.clone().ok_or_else(|| Error::InvalidArgument("witness lacks kernel".into()))?;
    let spec = KernelSpec::new(form, space)?;
    let hp = w.hyperparams.as_ref().ok_or_else(|| Error::InvalidArgument("witness lacks hyperparams".into()))?;
    psd_margin(&spec, hp, &w.points, w.scalar("negated")? != 0.0)
}

fn argmin(v: &[f64]) -> (usize, f64) {
    v.iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &x)| if x < acc.1 || (i == 0 && x.is_nan()) { (i, x) } else { acc })
}

fn argmax(v: &[f64]) -> (usize, f64) {
    let (i, m) = argmin(&v.iter().map(|x| -x).collect::<Vec<_>>());
    (i, -m)
}

// ---------------------------------------------------------------- spectra

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spectrum {
    /// `1 / (1 + βλ)`
    RegLap,
    /// `exp(−βλ)`
    Diffusion,
}

impl Spectrum {
    pub fn name(self) -> &'static str {
        match self {
            Spectrum::RegLap => "reglap",
            Spectrum::Diffusion => "diffusion",
        }
    }

    pub fn eval(self, lambda: f64, beta: f64) -> f64 {
        match self {
            Spectrum::RegLap => 1.0 / (1.0 + beta * lambda),
            Spectrum::Diffusion => (-beta * lambda).exp(),
        }
    }
}

/// Smallest entry of `U h(Λ) Uᵀ`; the graph must be connected.
pub fn min_transform_entry<H: Fn(f64) -> f64>(g: &FactorGraph, h: H) -> Result<f64> {
    if !g.is_connected() {
        return Err(Error::InvalidArgument("nonnegativity requires a connected graph".into()));
    }
    Ok(g.spectral_transform(h)?.min())
}

pub fn check_nonnegativity(spectrum: Spectrum, trials: usize, seed: u64) -> CheckReport {
    let sample = |t: usize| {
        let mut rng = trial_rng(seed, t);
        let g = random_graph_sized(&mut rng);
        let beta = log_uniform(&mut rng, 0.01, 10.0);
        (g, beta)
    };
    let mins = par::map_range(trials, |t| {
        let (g, beta) = sample(t);
        min_transform_entry(&g, |l| spectrum.eval(l, beta)).unwrap_or(f64::NEG_INFINITY)
    });
    let (worst, margin) = argmin(&mins);
    let passed = margin >= NONNEG_TOL;
    let witness = (!passed).then(|| {
        let (g, beta) = sample(worst);
        let mut w = Witness::new(worst, margin);
        w.graphs = vec![g.to_decl()];
        w.scalars.insert("beta".into(), beta);
        w
    });
    CheckReport {
        check: format!("nonnegativity[{}]", spectrum.name()),
        kind: CheckKind::Gated,
        trials,
        margin,
        tolerance: NONNEG_TOL,
        passed,
        witness,
        notes: Vec::new(),
    }
}

pub fn recheck_nonnegativity(spectrum: Spectrum, w: &Witness) -> Result<f64> {
    let g = w.graphs()?.remove(0);
    let beta = w.scalar("beta")?;
    min_transform_entry(&g, |l| spectrum.eval(l, beta))
}

/// `cos(λ̃ π/4)` with `λ̃ = 2λ/λ_max ∈ [0, 2]`.
pub fn inverse_cosine(lambda: f64, lambda_max: f64) -> f64 {
    (2.0 * lambda / lambda_max * FRAC_PI_4).cos()
}

/// Search random connected graphs for an entry of `U h(Λ, λ_max) Uᵀ` below
/// the negativity threshold; passes when one is found.
pub fn search_negative_entries<H>(name: &str, h: H, trials: usize, seed: u64) -> CheckReport
where
    H: Fn(f64, f64) -> f64 + Sync + Send,
{
    let found = par::map_range(trials, |t| {
        let mut rng = trial_rng(seed, t);
        let g = random_graph_sized(&mut rng);
        let lmax = g.lambda_max();
        match g.spectral_transform(|l| h(l, lmax)) {
            Ok(m) => {
                let (mut bi, mut bj, mut bv) = (0, 0, f64::INFINITY);
                for j in 0..m.ncols() {
                    for i in 0..m.nrows() {
                        if m[(i, j)] < bv {
                            (bi, bj, bv) = (i, j, m[(i, j)]);
                        }
                    }
                }
                (bv, g, bi, bj)
            }
            Err(_) => (f64::INFINITY, g, 0, 0),
        }
    });
    let mins: Vec<f64> = found.iter().map(|f| f.0).collect();
    let (worst, margin) = argmin(&mins);
    let passed = margin < NEGATIVE_ENTRY_THRESHOLD;
    let witness = passed.then(|| {
        let (v, g, i, j) = &found[worst];
        let mut w = Witness::new(worst, *v);
        w.graphs = vec![g.to_decl()];
        w.scalars.insert("row".into(), *i as f64);
        w.scalars.insert("col".into(), *j as f64);
        w
    });
    let hits = mins.iter().filter(|&&m| m < NEGATIVE_ENTRY_THRESHOLD).count();
    CheckReport {
        check: format!("negative_entry[{name}]"),
        kind: CheckKind::Existence,
        trials,
        margin,
        tolerance: NEGATIVE_ENTRY_THRESHOLD,
        passed,
        witness,
        notes: vec![format!("{hits} of {trials} graphs have an entry below {NEGATIVE_ENTRY_THRESHOLD:e}")],
    }
}

pub fn find_negative_inverse_cosine(trials: usize, seed: u64) -> CheckReport {
    search_negative_entries("inverse_cosine", inverse_cosine, trials, seed)
}

/// Re-evaluate the recorded entry of a negative-entry witness.
pub fn recheck_negative_entry<H: Fn(f64, f64) -> f64>(w: &Witness, h: H) -> Result<f64> {
    let g = w.graphs()?.remove(0);
    let lmax = g.lambda_max();
    let m = g.spectral_transform(|l| h(l, lmax))?;
    Ok(m[(w.scalar("row")? as usize, w.scalar("col")? as usize)])
}

// ---------------------------------------------------------------- similarity

fn distance_grid() -> Vec<f64> {
    (0..DISTANCE_GRID)
        .map(|i| MAX_DISTANCE * i as f64 / (DISTANCE_GRID - 1) as f64)
        .collect()
}

struct MonoTrial {
    spec: KernelSpec,
    hp: Hyperparams,
    v: Vec<usize>,
    v2: Vec<usize>,
}

fn sample_mono_trial(f: &FmFunction, seed: u64, trial: usize) -> MonoTrial {
    let mut rng = trial_rng(seed, trial);
    let n_factors = rng.random_range(1..=2);
    let graphs: Vec<FactorGraph> = (0..n_factors).map(|_| random_graph_sized(&mut rng)).collect();
    let v: Vec<usize> = graphs.iter().map(|g| rng.random_range(0..g.n())).collect();
    let same = rng.random_bool(0.2);
    let v2 = if same { v.clone() } else { graphs.iter().map(|g| rng.random_range(0..g.n())).collect() };
    let space = SearchSpace::new(vec![(0.0, 1.0)], graphs).unwrap();
    let hp = Hyperparams {
        theta: vec![1.0],
        alpha: (0..n_factors).map(|_| log_uniform(&mut rng, 0.01, 10.0)).collect(),
        beta: (0..n_factors).map(|_| log_uniform(&mut rng, 0.01, 10.0)).collect(),
        sigma_f2: 1.0,
        sigma_n2: 1e-2,
    };
    let spec = KernelSpec::new(KernelForm::Mod(f.clone()), space).unwrap();
    MonoTrial { spec, hp, v, v2 }
}

/// Largest increase between consecutive grid distances and where it occurs.
fn max_increase(spec: &KernelSpec, hp: &Hyperparams, v: &[usize], v2: &[usize]) -> Result<(f64, usize)> {
    let values = distance_grid()
        .iter()
        .map(|t| spec.mod_value_at(hp, v, v2, t * t))
        .collect::<Result<Vec<f64>>>()?;
    let incs: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    let (i, m) = argmax(&incs);
    Ok((m, i))
}

/// Kernel value along an increasing distance grid at fixed vertex pairs;
/// gated for distance-modulated functions that respect the FM principle,
/// informational for the diffusion variant.
pub fn check_similarity_monotonicity(f: &FmFunction, trials: usize, seed: u64) -> Result<CheckReport> {
    if f.modulated_by_kernel() {
        return Err(Error::InvalidArgument(
            "similarity monotonicity is defined for distance-modulated functions".into(),
        ));
    }
    f.validate()?;
    let results = par::map_range(trials, |t| {
        let tr = sample_mono_trial(f, seed, t);
        max_increase(&tr.spec, &tr.hp, &tr.v, &tr.v2).unwrap_or((f64::INFINITY, 0))
    });
    let incs: Vec<f64> = results.iter().map(|r| r.0).collect();
    let (worst, margin) = argmax(&incs);
    let passed = margin <= MONOTONE_TOL;
    let kind = if matches!(f, FmFunction::Dif) { CheckKind::Informational } else { CheckKind::Gated };
    let violations = incs.iter().filter(|&&m| m > MONOTONE_TOL).count();
    let witness = (!passed).then(|| {
        let tr = sample_mono_trial(f, seed, worst);
        let mut w = Witness::new(worst, margin);
        w.graphs = tr.spec.space().factors().iter().map(|g| g.to_decl()).collect();
        w.fm = Some(f.clone());
        w.hyperparams = Some(tr.hp);
        w.points = vec![MixedPoint::new(vec![], tr.v), MixedPoint::new(vec![], tr.v2)];
        let t = distance_grid();
        w.scalars.insert("t1".into(), t[results[worst].1]);
        w.scalars.insert("t2".into(), t[results[worst].1 + 1]);
        w
    });
    Ok(CheckReport {
        check: format!("similarity_monotonicity[{}]", fm_name(f)),
        kind,
        trials,
        margin,
        tolerance: MONOTONE_TOL,
        passed,
        witness,
        notes: vec![format!("{violations} of {trials} trials increase with distance")],
    })
}

/// `k(t2) − k(t1)` for a monotonicity or violation witness (positive = violation).
pub fn recheck_monotonicity(w: &Witness) -> Result<f64> {
    let f = w.fm.clone().ok_or_else(|| Error::InvalidArgument("witness lacks fm".into()))?;
    let space = SearchSpace::new(vec![(0.0, 1.0)], w.graphs()?)?;
    let spec = KernelSpec::new(KernelForm::Mod(f), space)?;
    let hp = w.hyperparams.as_ref().ok_or_else(|| Error::InvalidArgument("witness lacks hyperparams".into()))?;
    let (v, v2) = match w.points.as_slice() {
        [a, b] => (&a.disc, &b.disc),
        _ => return Err(Error::InvalidArgument("witness needs two vertex tuples".into())),
    };
    let (t1, t2) = (w.scalar("t1")?, w.scalar("t2")?);
    Ok(spec.mod_value_at(hp, v, v2, t2 * t2)? - spec.mod_value_at(hp, v, v2, t1 * t1)?)
}

fn fm_name(f: &FmFunction) -> &'static str {
    match f {
        FmFunction::Lap => "lap",
        FmFunction::Dif => "dif",
        FmFunction::Family(_) => "family",
        FmFunction::NnExt(_) => "nn",
    }
}

/// Direct search for `k(t1) < k(t2)` with `t1 < t2` under the diffusion FM
/// function, over complete graphs (even trials) and random graphs (odd trials).
pub fn find_moddif_violation(trials: usize, seed: u64) -> CheckReport {
    let sample = |t: usize| {
        let mut rng = trial_rng(seed, t);
        let n = rng.random_range(2..=12);
        let g = if t.is_multiple_of(2) { FactorGraph::complete(n).unwrap() } else { random_connected_graph(&mut rng, n) };
        let v = vec![rng.random_range(0..n)];
        let v2 = vec![rng.random_range(0..n)];
        let hp = Hyperparams {
            theta: vec![1.0],
            alpha: vec![log_uniform(&mut rng, 0.01, 10.0)],
            beta: vec![log_uniform(&mut rng, 0.01, 10.0)],
            sigma_f2: 1.0,
            sigma_n2: 1e-2,
        };
        let a = rng.random_range(0.0..MAX_DISTANCE);
        let b = rng.random_range(0.0..MAX_DISTANCE);
        let spec = KernelSpec::new(KernelForm::Mod(FmFunction::Dif), SearchSpace::new(vec![(0.0, 1.0)], vec![g]).unwrap()).unwrap();
        (spec, hp, v, v2, a.min(b), a.max(b))
    };
    let gaps = par::map_range(trials, |t| {
        let (spec, hp, v, v2, t1, t2) = sample(t);
        let k1 = spec.mod_value_at(&hp, &v, &v2, t1 * t1).unwrap_or(f64::NAN);
        let k2 = spec.mod_value_at(&hp, &v, &v2, t2 * t2).unwrap_or(f64::NAN);
        k2 - k1
    });
    let (worst, margin) = argmax(&gaps);
    let passed = margin <= MONOTONE_TOL;
    let mut notes = Vec::new();
    for (label, parity) in [("complete", 0), ("random", 1)] {
        let stratum: Vec<f64> = gaps.iter().enumerate().filter(|(i, _)| i % 2 == parity).map(|(_, g)| *g).collect();
        let hits = stratum.iter().filter(|&&g| g > MONOTONE_TOL).count();
        let worst = stratum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        notes.push(format!(
            "{label} graphs: {hits} of {} trials violate, worst increase {worst:.3e}",
            stratum.len()
        ));
    }
    let witness = (!passed).then(|| {
        let (spec, hp, v, v2, t1, t2) = sample(worst);
        let mut w = Witness::new(worst, margin);
        w.graphs = spec.space().factors().iter().map(|g| g.to_decl()).collect();
        w.fm = Some(FmFunction::Dif);
        w.hyperparams = Some(hp);
        w.points = vec![MixedPoint::new(vec![], v), MixedPoint::new(vec![], v2)];
        w.scalars.insert("t1".into(), t1);
        w.scalars.insert("t2".into(), t2);
        w
    });
    CheckReport {
        check: "moddif_violation".into(),
        kind: CheckKind::Informational,
        trials,
        margin,
        tolerance: MONOTONE_TOL,
        passed,
        witness,
        notes,
    }
}

// ---------------------------------------------------------------- FM properties

struct FmTrial {
    alpha: f64,
    beta: f64,
    lambda_max: f64,
    /// Modulation inputs ordered so the first is the more similar one.
    near: f64,
    far: f64,
}

fn sample_fm_trial(f: &FmFunction, seed: u64, trial: usize) -> FmTrial {
    let mut rng = trial_rng(seed, trial);
    let alpha = log_uniform(&mut rng, 0.01, 10.0);
    let beta = log_uniform(&mut rng, 0.01, 10.0);
    let lambda_max = rng.random_range(1.0..24.0);
    let (near, far) = if f.modulated_by_kernel() {
        // larger kernel value means more similar
        let a: f64 = rng.random_range(-1.0..=1.0);
        let b: f64 = rng.random_range(-1.0..=1.0);
        (a.max(b), a.min(b))
    } else {
        let a: f64 = rng.random_range(0.0..MAX_DISTANCE);
        let b: f64 = rng.random_range(0.0..MAX_DISTANCE);
        (a.min(b).powi(2), a.max(b).powi(2))
    };
    FmTrial { alpha, beta, lambda_max, near, far }
}

fn lambda_grid(lambda_max: f64) -> Vec<f64> {
    (0..LAMBDA_GRID)
        .map(|i| lambda_max * i as f64 / (LAMBDA_GRID - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    min_value: f64,
    max_increase: f64,
    min_second_diff: f64,
}

impl Shape {
    fn of(values: &[f64]) -> Self {
        let min_value = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_increase = values.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_second_diff = values
            .windows(3)
            .map(|w| w[2] - 2.0 * w[1] + w[0])
            .fold(f64::INFINITY, f64::min);
        Self { min_value, max_increase, min_second_diff }
    }

    fn positive_decreasing(&self) -> bool {
        self.min_value > 0.0 && self.max_increase <= DECREASE_TOL
    }

    fn convex(&self) -> bool {
        self.min_second_diff >= CONVEXITY_TOL
    }
}

fn fm_shapes(f: &FmFunction, tr: &FmTrial) -> Result<(Shape, Shape)> {
    let grid = lambda_grid(tr.lambda_max);
    let near = grid
        .iter()
        .map(|&l| f.eval(l, tr.near, tr.alpha, tr.beta))
        .collect::<Result<Vec<_>>>()?;
    let far = grid
        .iter()
        .map(|&l| f.eval(l, tr.far, tr.alpha, tr.beta))
        .collect::<Result<Vec<_>>>()?;
    let h: Vec<f64> = near.iter().zip(&far).map(|(a, b)| a - b).collect();
    Ok((Shape::of(&near), Shape::of(&h)))
}

/// Grid checks of a modulating function: P1 (`f` positive and nonincreasing
/// in λ) and P3 (the difference `f(·, near) − f(·, far)` positive, decreasing
/// and convex in λ). For the kernel-modulated function "near" is the larger
/// kernel value. P3 is informational for the diffusion function.
pub fn check_fm_properties(f: &FmFunction, trials: usize, seed: u64) -> Result<Vec<CheckReport>> {
    f.validate()?;
    let shapes = par::map_range(trials, |t| {
        fm_shapes(f, &sample_fm_trial(f, seed, t)).ok()
    });
    let name = fm_name(f);
    let witness_for = |trial: usize, value: f64| {
        let tr = sample_fm_trial(f, seed, trial);
        let mut w = Witness::new(trial, value);
        w.fm = Some(f.clone());
        for (k, v) in [("alpha", tr.alpha), ("beta", tr.beta), ("lambda_max", tr.lambda_max), ("near", tr.near), ("far", tr.far)] {
            w.scalars.insert(k.into(), v);
        }
        w
    };

    // P1 margin: the largest increase along λ, or the most negative value if worse.
    let p1: Vec<f64> = shapes
        .iter()
        .map(|s| match s {
            Some((f1, _)) => f1.max_increase.max(-f1.min_value),
            None => f64::MAX,
        })
        .collect();
    let (w1, m1) = argmax(&p1);
    let pass1 = shapes.iter().all(|s| s.as_ref().is_some_and(|(f1, _)| f1.positive_decreasing()));
    let r1 = CheckReport {
        check: format!("fm_p1[{name}]"),
        kind: CheckKind::Gated,
        trials,
        margin: m1,
        tolerance: DECREASE_TOL,
        passed: pass1,
        witness: (!pass1).then(|| witness_for(w1, m1)),
        notes: Vec::new(),
    };

    // P3 margin: the worst of min value, negated max increase and min second
    // difference.
    let ok3 = |s: &Shape| s.positive_decreasing() && s.convex();
    let p3: Vec<f64> = shapes
        .iter()
        .map(|s| match s {
            Some((_, h)) => h.min_value.min(-h.max_increase).min(h.min_second_diff),
            None => f64::MIN,
        })
        .collect();
    let (w3, m3) = argmin(&p3);
    let fails: Vec<&Shape> = shapes.iter().flatten().map(|(_, h)| h).filter(|h| !ok3(h)).collect();
    let not_pos = fails.iter().filter(|h| !(h.min_value > 0.0)).count();
    let not_dec = fails.iter().filter(|h| !(h.max_increase <= DECREASE_TOL)).count();
    let not_cvx = fails.iter().filter(|h| !h.convex()).count();
    let pass3 = shapes.iter().all(|s| s.as_ref().is_some_and(|(_, h)| ok3(h)));
    let kind3 = if matches!(f, FmFunction::Dif) { CheckKind::Informational } else { CheckKind::Gated };
    let mut notes = vec![format!(
        "violations over {trials} trials: nonpositive {not_pos}, not decreasing {not_dec}, not convex {not_cvx}"
    )];
    if f.modulated_by_kernel() {
        notes.push("premise reversed: near = larger kernel value".into());
    }
    let r3 = CheckReport {
        check: format!("fm_p3[{name}]"),
        kind: kind3,
        trials,
        margin: m3,
        tolerance: CONVEXITY_TOL,
        passed: pass3,
        witness: (!pass3).then(|| witness_for(w3, m3)),
        notes,
    };
    Ok(vec![r1, r3])
}
