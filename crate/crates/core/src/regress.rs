//! Regression ablation on tabular data: repeated random train/test splits,
//! GP fit per kernel, test NLL and RMSE.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{fit, Dataset, GpModel};
use crate::graph::FactorGraph;
use crate::kernel::{KernelForm, KernelSpec};
use crate::par;
use crate::space::{MixedPoint, SearchSpace};
use crate::util::derive_seed;

/// Which CSV columns feed the model; together they must name every column once.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnRoles {
    #[serde(default)]
    pub continuous: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
    pub target: String,
    #[serde(default)]
    pub ignore: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressData {
    pub continuous_names: Vec<String>,
    pub categorical_names: Vec<String>,
    /// Row-major continuous values.
    pub cont: Vec<Vec<f64>>,
    /// Row-major categorical labels.
    pub cat: Vec<Vec<String>>,
    pub y: Vec<f64>,
}

impl RegressData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Apply `ln` to the targets; all must be positive.
    pub fn log_target(mut self) -> Result<Self> {
        if let Some(v) = self.y.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::InvalidArgument(format!("log target needs positive values, found {v}")));
        }
        self.y.iter_mut().for_each(|v| *v = v.ln());
        Ok(self)
    }
}

pub fn load_csv(path: &Path, roles: &ColumnRoles) -> Result<RegressData> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    read_csv(file, roles)
}

pub fn read_csv<R: Read>(reader: R, roles: &ColumnRoles) -> Result<RegressData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(String::from).collect();

    let mut assigned: BTreeMap<&str, &str> = BTreeMap::new();
    let named = roles
        .continuous
        .iter()
        .map(|c| (c, "continuous"))
        .chain(roles.categorical.iter().map(|c| (c, "categorical")))
        .chain(std::iter::once((&roles.target, "target")))
        .chain(roles.ignore.iter().map(|c| (c, "ignore")));
    for (col, role) in named {
        if !headers.contains(col) {
            return Err(Error::Config(format!("column '{col}' ({role}) not in CSV header")));
        }
        if let Some(prev) = assigned.insert(col, role) {
            return Err(Error::Config(format!("column '{col}' assigned twice ({prev}, {role})")));
        }
    }
    if let Some(h) = headers.iter().find(|h| !assigned.contains_key(h.as_str())) {
        return Err(Error::Config(format!("column '{h}' has no role")));
    }
    let index = |c: &String| headers.iter().position(|h| h == c).unwrap();
    let cont_idx: Vec<usize> = roles.continuous.iter().map(index).collect();
    let cat_idx: Vec<usize> = roles.categorical.iter().map(index).collect();
    let y_idx = index(&roles.target);

    let mut data = RegressData {
        continuous_names: roles.continuous.clone(),
        categorical_names: roles.categorical.clone(),
        cont: Vec::new(),
        cat: Vec::new(),
        y: Vec::new(),
    };
    let parse = |rec: &csv::StringRecord, i: usize, line: usize| -> Result<f64> {
        let s = &rec[i];
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Config(format!("row {line}: column '{}' value '{s}' is not a finite number", headers[i])))
    };
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        data.cont.push(cont_idx.iter().map(|&i| parse(&rec, i, line + 1)).collect::<Result<_>>()?);
        data.cat.push(cat_idx.iter().map(|&i| rec[i].to_string()).collect());
        data.y.push(parse(&rec, y_idx, line + 1)?);
    }
    if data.is_empty() {
        return Err(Error::Config("CSV has no data rows".into()));
    }
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressOptions {
    pub kernels: Vec<String>,
    pub splits: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for RegressOptions {
    fn default() -> Self {
        Self {
            kernels: vec!["modlap".into(), "moddif".into(), "addlap".into(), "prodlap".into()],
            splits: 20,
            train_fraction: 0.8,
            seed: 0,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub kernel: String,
    pub split: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSummary {
    pub kernel: String,
    pub nll_mean: f64,
    pub nll_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub completed: usize,
    pub skipped: usize,
}

/// Mean per-point Gaussian negative log density and RMSE on a test set.
/// The predictive variance includes the observation noise.
pub fn test_metrics(model: &GpModel, test: &[(MixedPoint, f64)]) -> Result<(f64, f64)> {
    let noise = model.noise_variance();
    let mut nll = 0.0;
    let mut sse = 0.0;
    for (x, y) in test {
        let (mu, var) = model.predict(x)?;
        let v = (var + noise).max(f64::MIN_POSITIVE);
        nll += 0.5 * (2.0 * std::f64::consts::PI * v).ln() + (y - mu).powi(2) / (2.0 * v);
        sse += (y - mu).powi(2);
    }
    let n = test.len() as f64;
    Ok((nll / n, (sse / n).sqrt()))
}

/// Seeded permutation split: the first `round(fraction·n)` rows train.
pub fn split_indices(n: usize, fraction: f64, seed: u64, split: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[split as u64]));
    idx.shuffle(&mut rng);
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let test = idx.split_off(n_train);
    (idx, test)
}

struct Encoded {
    space: SearchSpace,
    train: Vec<(MixedPoint, f64)>,
    test: Vec<(MixedPoint, f64)>,
}

/// Continuous bounds span the whole file; categorical vertices are the labels
/// seen in the training rows (complete graph).
fn encode(data: &RegressData, train: &[usize], test: &[usize]) -> Result<Encoded> {
    let d = data.continuous_names.len();
    let bounds: Vec<(f64, f64)> = (0..d)
        .map(|k| {
            let (lo, hi) = data
                .cont
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[k]), hi.max(r[k])));
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        })
        .collect();
    let vocab: Vec<Vec<String>> = (0..data.categorical_names.len())
        .map(|k| {
            train
                .iter()
                .map(|&i| data.cat[i][k].clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        })
        .collect();
    let graphs = vocab
        .iter()
        .map(|v| FactorGraph::complete(v.len()))
        .collect::<Result<Vec<_>>>()?;
    let space = SearchSpace::new(bounds, graphs)?;
    let point = |i: usize| -> Result<(MixedPoint, f64)> {
        let disc = vocab
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let label = &data.cat[i][k];
                v.binary_search(label).map_err(|_| {
                    Error::InvalidPoint(format!(
                        "label '{label}' of column '{}' unseen in training rows",
                        data.categorical_names[k]
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((MixedPoint::new(data.cont[i].clone(), disc), data.y[i]))
    };
    Ok(Encoded {
        train: train.iter().map(|&i| point(i)).collect::<Result<_>>()?,
        test: test.iter().map(|&i| point(i)).collect::<Result<_>>()?,
        space,
    })
}

fn run_split(data: &RegressData, opts: &RegressOptions, kernel: &str, split: usize) -> Result<(f64, f64)> {
    let (train, test) = split_indices(data.len(), opts.train_fraction, opts.seed, split);
    let enc = encode(data, &train, &test)?;
    let spec = KernelSpec::from_name(kernel, enc.space)?;
    let (pts, ys): (Vec<_>, Vec<_>) = enc.train.into_iter().unzip();
    let model = fit(&spec, &Dataset::new(pts, ys)?, opts.restarts, derive_seed(opts.seed, &[split as u64, 1]))?;
    test_metrics(&model, &enc.test)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, s)
}

/// All (kernel, split) fits, then mean ± sample std per kernel over the
/// splits that completed.
pub fn run_regression(data: &RegressData, opts: &RegressOptions) -> Result<(Vec<SplitResult>, Vec<KernelSummary>)> {
    if opts.splits == 0 || opts.restarts == 0 {
        return Err(Error::Config("regress: splits and restarts must be at least 1".into()));
    }
    if !(opts.train_fraction > 0.0 && opts.train_fraction < 1.0) {
        return Err(Error::Config(format!("regress: train_fraction must lie in (0, 1), got {}", opts.train_fraction)));
    }
    if data.len() < 2 {
        return Err(Error::Config("regress: need at least two rows".into()));
    }
    for k in &opts.kernels {
        KernelForm::from_name(k, data.continuous_names.len())?;
    }
    let jobs: Vec<(usize, usize)> = (0..opts.kernels.len())
        .flat_map(|k| (0..opts.splits).map(move |s| (k, s)))
        .collect();
    let results: Vec<SplitResult> = par::map_range(jobs.len(), |j| {
        let (k, split) = jobs[j];
        let kernel = opts.kernels[k].clone();
        match run_split(data, opts, &kernel, split) {
            Ok((nll, rmse)) => SplitResult { kernel, split, nll: Some(nll), rmse: Some(rmse), error: None },
            Err(e) => SplitResult { kernel, split, nll: None, rmse: None, error: Some(e.to_string()) },
        }
    });
    let summaries = opts
        .kernels
        .iter()
        .map(|k| {
            let mine: Vec<&SplitResult> = results.iter().filter(|r| &r.kernel == k).collect();
            let nll: Vec<f64> = mine.iter().filter_map(|r| r.nll).collect();
            let rmse: Vec<f64> = mine.iter().filter_map(|r| r.rmse).collect();
            let (nll_mean, nll_std) = mean_std(&nll);
            let (rmse_mean, rmse_std) = mean_std(&rmse);
            KernelSummary {
                kernel: k.clone(),
                nll_mean,
                nll_std,
                rmse_mean,
                rmse_std,
                completed: nll.len(),
                skipped: mine.len() - nll.len(),
            }
        })
        .collect();
    Ok((results, summaries))
}

/// Plain-text table of per-kernel summaries.
pub fn format_table(summaries: &[KernelSummary]) -> String {
    let mut out = format!("{:<12} {:>22} {:>22} {:>8}\n", "kernel", "NLL", "RMSE", "splits");
    for s in summaries {
        out.push_str(&format!(
            "{:<12} {:>22} {:>22} {:>8}\n",
            s.kernel,
            format!("{:.4} ± {:.4}", s.nll_mean, s.nll_std),
            format!("{:.4} ± {:.4}", s.rmse_mean, s.rmse_std),
            format!("{}/{}", s.completed, s.completed + s.skipped),
        ));
    }
    out
}

/// Per-label amplitude and slope of the interaction generator.
const INTERACTION_AMPLITUDE: [f64; 5] = [1.5, 1.0, 0.5, 0.0, -0.5];
const INTERACTION_SLOPE: [f64; 5] = [1.0, -1.0, 2.0, 0.0, -2.0];
const INTERACTION_LABELS: [&str; 5] = ["a", "b", "c", "d", "e"];

/// Synthetic data with a continuous-discrete interaction:
/// `y = A_v sin(2π c1) + B_v (c2 − 0.5) + cos(2π c2)/2 + ε`, with `c ~ U[0,1]²`,
/// `v` uniform over five labels (`A = [1.5, 1, 0.5, 0, −0.5]`,
/// `B = [1, −1, 2, 0, −2]`, in label order `a..e`) and `ε ~ N(0, 0.1²)`.
/// Columns: `c1,c2,group,y`.
pub fn interaction_dataset(n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["c1", "c2", "group", "y"]).unwrap();
    let tau = 2.0 * std::f64::consts::PI;
    for _ in 0..n {
        let c1: f64 = rng.random();
        let c2: f64 = rng.random();
        let v = rng.random_range(0..INTERACTION_LABELS.len());
        let eps: f64 = rng.sample::<f64, _>(StandardNormal) * 0.1;
        let y = INTERACTION_AMPLITUDE[v] * (tau * c1).sin()
            + INTERACTION_SLOPE[v] * (c2 - 0.5)
            + 0.5 * (tau * c2).cos()
            + eps;
        w.write_record([
            format!("{c1:.6}"),
            format!("{c2:.6}"),
            INTERACTION_LABELS[v].to_string(),
            format!("{y:.6}"),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

pub fn interaction_roles() -> ColumnRoles {
    ColumnRoles {
        continuous: vec!["c1".into(), "c2".into()],
        categorical: vec!["group".into()],
        target: "y".into(),
        ignore: vec![],
    }
}
