//! Browser demo: factor kernel heatmaps, ModLap vs ModDif similarity curves
//! and a step-by-step BO run. The plain functions are usable natively; the
//! `wasm_bindgen` wrappers turn errors into JS exceptions.

use fmbo_core::bench::{self, Benchmark};
use fmbo_core::bo::{BoConfig, BoState};
use fmbo_core::{GraphDecl, Hyperparams, KernelSpec, SearchSpace};
use wasm_bindgen::prelude::*;

const FM_KERNELS: [&str; 3] = ["modlap", "moddif", "modfamily"];

fn fm_spec(graph: &str, kernel: &str) -> Result<KernelSpec, String> {
    if !FM_KERNELS.contains(&kernel) {
        return Err(format!("kernel must be one of {}", FM_KERNELS.join(", ")));
    }
    let g = GraphDecl::Short(graph.to_string()).build().map_err(|e| e.to_string())?;
    let space = SearchSpace::new(vec![(0.0, 1.0)], vec![g]).map_err(|e| e.to_string())?;
    KernelSpec::from_name(kernel, space).map_err(|e| e.to_string())
}

fn hyperparams(spec: &KernelSpec, alpha: f64, beta: f64) -> Result<Hyperparams, String> {
    let mut hp = Hyperparams::default_for(spec.space());
    hp.alpha = vec![alpha];
    hp.beta = vec![beta];
    hp.validate(spec.space()).map_err(|e| e.to_string())?;
    Ok(hp)
}

/// Row-major `n × n` kernel values between vertices of one factor graph
/// (`"complete(n)"` or `"path(n)"`) at squared distance `sq_dist`.
pub fn heatmap(graph: &str, kernel: &str, alpha: f64, beta: f64, sq_dist: f64) -> Result<Vec<f64>, String> {
    let spec = fm_spec(graph, kernel)?;
    let hp = hyperparams(&spec, alpha, beta)?;
    let n = spec.space().factors()[0].n();
    let mut out = Vec::with_capacity(n * n);
    for v in 0..n {
        for v2 in 0..n {
            out.push(spec.mod_value_at(&hp, &[v], &[v2], sq_dist).map_err(|e| e.to_string())?);
        }
    }
    Ok(out)
}

/// Kernel value between vertices `v` and `v2` at `points` distances evenly
/// spaced on `[0, max_dist]`.
#[allow(clippy::too_many_arguments)]
pub fn similarity_curve(
    graph: &str,
    kernel: &str,
    alpha: f64,
    beta: f64,
    v: usize,
    v2: usize,
    points: usize,
    max_dist: f64,
) -> Result<Vec<f64>, String> {
    let spec = fm_spec(graph, kernel)?;
    let hp = hyperparams(&spec, alpha, beta)?;
    let n = spec.space().factors()[0].n();
    if v >= n || v2 >= n {
        return Err(format!("vertices must be below {n}"));
    }
    if points < 2 || max_dist.is_nan() || max_dist <= 0.0 {
        return Err("need at least 2 points and a positive max distance".into());
    }
    (0..points)
        .map(|i| {
            let d = max_dist * i as f64 / (points - 1) as f64;
            spec.mod_value_at(&hp, &[v], &[v2], d * d).map_err(|e| e.to_string())
        })
        .collect()
}

/// BO on a built-in benchmark, one evaluation per `step`.
pub struct Stepper {
    bench: Benchmark,
    state: BoState,
}

impl Stepper {
    pub fn new(benchmark: &str, kernel: &str, seed: u64, budget: usize) -> Result<Self, String> {
        let bench = bench::by_name(benchmark).map_err(|e| e.to_string())?;
        let mut cfg = BoConfig { kernel: kernel.into(), budget, seed, restarts: 3, ..BoConfig::default() };
        cfg.n_init = cfg.n_init.min(budget);
        cfg.acquire.n_random = 500;
        let state = BoState::new(cfg, bench.space().clone()).map_err(|e| e.to_string())?;
        Ok(Self { bench, state })
    }

    /// Evaluate the next suggestion; returns the record as JSON, or `None`
    /// once the budget is spent.
    pub fn step(&mut self) -> Result<Option<String>, String> {
        if self.state.is_done() {
            return Ok(None);
        }
        let x = self.state.ask();
        let y = self.bench.evaluate(&x).map_err(|e| e.to_string())?;
        let rec = self.state.tell(x, y).map_err(|e| e.to_string())?;
        serde_json::to_string(rec).map(Some).map_err(|e| e.to_string())
    }

    pub fn incumbents(&self) -> Vec<f64> {
        self.state.history().incumbents()
    }

    pub fn is_done(&self) -> bool {
        self.state.is_done()
    }
}

#[wasm_bindgen(js_name = kernelHeatmap)]
pub fn kernel_heatmap_js(graph: &str, kernel: &str, alpha: f64, beta: f64, sq_dist: f64) -> Result<Vec<f64>, JsError> {
    heatmap(graph, kernel, alpha, beta, sq_dist).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = similarityCurve)]
#[allow(clippy::too_many_arguments)]
pub fn similarity_curve_js(
    graph: &str,
    kernel: &str,
    alpha: f64,
    beta: f64,
    v: usize,
    v2: usize,
    points: usize,
    max_dist: f64,
) -> Result<Vec<f64>, JsError> {
    similarity_curve(graph, kernel, alpha, beta, v, v2, points, max_dist).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = BoDemo)]
pub struct BoDemo(Stepper);

#[wasm_bindgen(js_class = BoDemo)]
impl BoDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(benchmark: &str, kernel: &str, seed: u32, budget: usize) -> Result<BoDemo, JsError> {
        Stepper::new(benchmark, kernel, seed as u64, budget).map(BoDemo).map_err(|e| JsError::new(&e))
    }

    pub fn step(&mut self) -> Result<Option<String>, JsError> {
        self.0.step().map_err(|e| JsError::new(&e))
    }

    pub fn incumbents(&self) -> Vec<f64> {
        self.0.incumbents()
    }

    #[wasm_bindgen(js_name = isDone)]
    pub fn is_done(&self) -> bool {
        self.0.is_done()
    }
}
