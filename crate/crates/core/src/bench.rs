//! Synthetic mixed-variable benchmarks and a random-search baseline.

use std::fmt;
use std::sync::Arc;

use crate::acquire::AcquireConfig;
use crate::bo::{run, BoConfig, BoHistory};
use crate::error::{Error, Result};
use crate::graph::FactorGraph;
use crate::space::{MixedPoint, SearchSpace};

pub const BENCHMARK_NAMES: [&str; 3] = ["ackley5c", "func2c", "func3c"];

type Objective = Arc<dyn Fn(&MixedPoint) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct Benchmark {
    name: String,
    space: SearchSpace,
    evaluate: Objective,
    known_optimum: Option<f64>,
    surrogate: bool,
}

impl fmt::Debug for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Benchmark")
            .field("name", &self.name)
            .field("space", &self.space)
            .field("known_optimum", &self.known_optimum)
            .field("surrogate", &self.surrogate)
            .finish()
    }
}

impl Benchmark {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn known_optimum(&self) -> Option<f64> {
        self.known_optimum
    }

    /// True when the objective is a documented stand-in rather than the
    /// reference definition.
    pub fn surrogate(&self) -> bool {
        self.surrogate
    }

    pub fn evaluate(&self, x: &MixedPoint) -> Result<f64> {
        self.space.validate(x)?;
        Ok((self.evaluate)(x))
    }

    /// Replace the factor graphs (same vertex counts), e.g. to encode an
    /// ordering among categories.
    pub fn with_factors(mut self, factors: Vec<FactorGraph>) -> Result<Self> {
        let want = self.space.factor_sizes();
        let got: Vec<usize> = factors.iter().map(|g| g.n()).collect();
        if want != got {
            return Err(Error::InvalidArgument(format!(
                "benchmark {} needs factors of sizes {want:?}, got {got:?}",
                self.name
            )));
        }
        self.space = SearchSpace::new(self.space.bounds().to_vec(), factors)?;
        Ok(self)
    }
}

pub fn by_name(name: &str) -> Result<Benchmark> {
    match name.to_ascii_lowercase().as_str() {
        "ackley5c" => Ok(ackley5c()),
        "func2c" => Ok(func2c()),
        "func3c" => Ok(func3c()),
        other => Err(Error::InvalidArgument(format!(
            "unknown benchmark '{other}' (expected one of {})",
            BENCHMARK_NAMES.join(", ")
        ))),
    }
}

fn complete_factors(sizes: &[usize]) -> Vec<FactorGraph> {
    sizes.iter().map(|&n| FactorGraph::complete(n).expect("n >= 1")).collect()
}

/// Ackley (a = 20, b = 0.2, c = 2π) written as a sum of two nonnegative terms
/// so the optimum evaluates to exactly zero.
pub fn ackley(x: &[f64]) -> f64 {
    let (a, b, c) = (20.0, 0.2, 2.0 * std::f64::consts::PI);
    let d = x.len() as f64;
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / d).sqrt();
    let mean_cos = x.iter().map(|v| (c * v).cos()).sum::<f64>() / d;
    a * (1.0 - (-b * rms).exp()) + (std::f64::consts::E - mean_cos.exp())
}

/// Category `j` of a 17-way factor placed at `−1 + 2j/16`.
pub fn ackley_grid(j: usize) -> f64 {
    -1.0 + 2.0 * j as f64 / 16.0
}

/// One continuous dimension on `[−1, 1]` and five 17-way categorical
/// variables embedded on a uniform grid; optimum 0 at `c = 0`, all indices 8.
pub fn ackley5c() -> Benchmark {
    let space = SearchSpace::new(vec![(-1.0, 1.0)], complete_factors(&[17; 5])).unwrap();
    Benchmark {
        name: "ackley5c".into(),
        space,
        evaluate: Arc::new(|x: &MixedPoint| {
            let v: Vec<f64> = x.cont.iter().copied().chain(x.disc.iter().map(|&j| ackley_grid(j))).collect();
            ackley(&v)
        }),
        known_optimum: Some(0.0),
        surrogate: false,
    }
}

fn rosenbrock(x: f64, y: f64) -> f64 {
    (100.0 * (y - x * x).powi(2) + (1.0 - x).powi(2)) / 300.0
}

fn six_hump_camel(x: f64, y: f64) -> f64 {
    ((4.0 - 2.1 * x * x + x.powi(4) / 3.0) * x * x + x * y + (-4.0 + 4.0 * y * y) * y * y) / 10.0
}

fn beale(x: f64, y: f64) -> f64 {
    ((1.5 - x + x * y).powi(2) + (2.25 - x + x * y * y).powi(2) + (2.625 - x + x * y.powi(3)).powi(2)) / 50.0
}

/// Category-indexed sum of scaled Rosenbrock / six-hump camel / Beale terms
/// on `2c`; the evaluation-noise term of the reference is dropped.
fn mixture(x: &MixedPoint) -> f64 {
    let (u, v) = (2.0 * x.cont[0], 2.0 * x.cont[1]);
    let mut f = match x.disc[0] {
        0 => rosenbrock(u, v),
        1 => six_hump_camel(u, v),
        _ => beale(u, v),
    };
    f += match x.disc[1] {
        0 => rosenbrock(u, v),
        1 => six_hump_camel(u, v),
        _ => beale(u, v),
    };
    if let Some(&h) = x.disc.get(2) {
        f += match h {
            0 => 5.0 * six_hump_camel(u, v),
            1 => 2.0 * rosenbrock(u, v),
            _ => h as f64 * beale(u, v),
        };
    }
    f
}

fn mixture_benchmark(name: &str, sizes: &[usize]) -> Benchmark {
    let space = SearchSpace::new(vec![(-1.0, 1.0); 2], complete_factors(sizes)).unwrap();
    Benchmark {
        name: name.into(),
        space,
        evaluate: Arc::new(mixture),
        known_optimum: None,
        surrogate: true,
    }
}

/// `[−1, 1]²` with categorical variables of sizes 3 and 5.
pub fn func2c() -> Benchmark {
    mixture_benchmark("func2c", &[3, 5])
}

/// `[−1, 1]²` with categorical variables of sizes 3, 5 and 4.
pub fn func3c() -> Benchmark {
    mixture_benchmark("func3c", &[3, 5, 4])
}

/// Uniform random search; draws coincide with the initial design of a BO run
/// with the same seed.
pub fn random_search(bench: &Benchmark, budget: usize, seed: u64) -> Result<BoHistory> {
    let cfg = BoConfig {
        kernel: "modlap".into(),
        acquire: AcquireConfig::default(),
        n_init: budget,
        budget,
        restarts: 1,
        seed,
        warm_start: false,
    };
    run::<_, Vec<u8>>(&cfg, bench.space(), |x| bench.evaluate(x), None).map_err(|f| f.error)
}
