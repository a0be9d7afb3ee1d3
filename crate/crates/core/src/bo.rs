//! Ask/tell Bayesian-optimization loop (minimization).

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquire::{acquire_next, AcquireConfig};
use crate::error::{Error, Result};
use crate::gp::{fit_with, Dataset, FitOptions};
use crate::kernel::{Hyperparams, KernelSpec};
use crate::space::{MixedPoint, SearchSpace};
use crate::util::derive_seed;

// Seed stream tags.
const STREAM_INIT: u64 = 0;
const STREAM_FIT: u64 = 1;
const STREAM_FALLBACK: u64 = 2;
const STREAM_ACQUIRE: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    pub kernel: String,
    pub acquire: AcquireConfig,
    pub n_init: usize,
    pub budget: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Reuse the previous round's hyperparameters as the first restart.
    pub warm_start: bool,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            kernel: "modlap".into(),
            acquire: AcquireConfig::default(),
            n_init: 10,
            budget: 50,
            restarts: 10,
            seed: 0,
            warm_start: true,
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_init == 0 {
            return Err(Error::Config("bo: n_init must be at least 1".into()));
        }
        if self.budget < self.n_init {
            return Err(Error::Config(format!(
                "bo: budget ({}) must be at least n_init ({})",
                self.budget, self.n_init
            )));
        }
        if self.restarts == 0 {
            return Err(Error::Config("bo: restarts must be at least 1".into()));
        }
        self.acquire.validate()
    }
}

/// One evaluated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub round: usize,
    pub point: MixedPoint,
    pub y: f64,
    pub incumbent: f64,
    pub fit_seconds: f64,
    pub acquire_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperparams: Option<Hyperparams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoHistory {
    pub records: Vec<Record>,
}

impl BoHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn incumbents(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.incumbent).collect()
    }

    pub fn final_incumbent(&self) -> Option<f64> {
        self.records.last().map(|r| r.incumbent)
    }

    pub fn best(&self) -> Option<&Record> {
        self.records
            .iter()
            .fold(None, |acc: Option<&Record>, r| match acc {
                Some(b) if b.y <= r.y => Some(b),
                _ => Some(r),
            })
    }

    pub(crate) fn push(&mut self, mut record: Record) -> &Record {
        record.round = self.records.len();
        record.incumbent = self.final_incumbent().map_or(record.y, |b| b.min(record.y));
        self.records.push(record);
        self.records.last().unwrap()
    }

    /// `round,incumbent` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["round", "incumbent"])?;
        for r in &self.records {
            out.write_record([r.round.to_string(), r.incumbent.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Parse a JSONL trace back into a history.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<Record>, _>>()?;
        Ok(Self { records })
    }
}

/// JSONL writer adding fixed tags (e.g. benchmark name) to every record.
pub struct TraceSink<W: Write> {
    writer: W,
    tags: serde_json::Map<String, serde_json::Value>,
}

impl<W: Write> TraceSink<W> {
    pub fn new(writer: W) -> Self {
        Self { writer, tags: serde_json::Map::new() }
    }

    pub fn with_tag(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.tags.insert(key.to_string(), value.into());
        self
    }

    pub fn write(&mut self, record: &Record) -> Result<()> {
        let mut v = serde_json::to_value(record)?;
        if let serde_json::Value::Object(m) = &mut v {
            for (k, t) in &self.tags {
                m.insert(k.clone(), t.clone());
            }
        }
        serde_json::to_writer(&mut self.writer, &v)?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.writer
    }
}

#[cfg(not(target_arch = "wasm32"))]
fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = std::time::Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

#[cfg(target_arch = "wasm32")]
fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    (f(), 0.0)
}

#[derive(Debug, Clone, Default)]
struct Pending {
    point: Option<MixedPoint>,
    fit_seconds: f64,
    acquire_seconds: f64,
    hyperparams: Option<Hyperparams>,
    note: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BoState {
    spec: KernelSpec,
    cfg: BoConfig,
    history: BoHistory,
    last_hp: Option<Hyperparams>,
    pending: Pending,
}

impl BoState {
    pub fn new(cfg: BoConfig, space: SearchSpace) -> Result<Self> {
        cfg.validate()?;
        let spec = KernelSpec::from_name(&cfg.kernel, space)?;
        Ok(Self {
            spec,
            cfg,
            history: BoHistory::default(),
            last_hp: None,
            pending: Pending::default(),
        })
    }

    pub fn config(&self) -> &BoConfig {
        &self.cfg
    }

    pub fn space(&self) -> &SearchSpace {
        self.spec.space()
    }

    pub fn history(&self) -> &BoHistory {
        &self.history
    }

    pub fn into_history(self) -> BoHistory {
        self.history
    }

    pub fn is_done(&self) -> bool {
        self.history.len() >= self.cfg.budget
    }

    pub fn incumbent(&self) -> Option<f64> {
        self.history.final_incumbent()
    }

    fn random_point(&self, stream: u64, round: usize) -> MixedPoint {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[stream, round as u64]));
        self.space().sample_uniform(&mut rng)
    }

    /// Next point to evaluate: seeded random during the initial design,
    /// otherwise the EI maximizer of a GP refit on the full history.
    pub fn ask(&mut self) -> MixedPoint {
        let round = self.history.len();
        self.pending = Pending::default();
        if round < self.cfg.n_init {
            let x = self.random_point(STREAM_INIT, round);
            self.pending.point = Some(x.clone());
            return x;
        }
        let data = Dataset::new(
            self.history.records.iter().map(|r| r.point.clone()).collect(),
            self.history.records.iter().map(|r| r.y).collect(),
        )
        .expect("history holds finite targets");
        let mut opts = FitOptions::new(self.cfg.restarts, derive_seed(self.cfg.seed, &[STREAM_FIT, round as u64]));
        if self.cfg.warm_start {
            opts.warm_start = self.last_hp.clone();
        }
        let (fitted, fit_seconds) = timed(|| fit_with(&self.spec, &data, &opts));
        self.pending.fit_seconds = fit_seconds;
        let model = match fitted {
            Ok(m) => m,
            Err(e) => {
                log::warn!("round {round}: GP fit failed ({e}); falling back to a random point");
                self.pending.note = Some(format!("fit failed: {e}"));
                let x = self.random_point(STREAM_FALLBACK, round);
                self.pending.point = Some(x.clone());
                return x;
            }
        };
        self.last_hp = Some(model.hyperparams().clone());
        self.pending.hyperparams = Some(model.hyperparams().clone());
        let acq_seed = derive_seed(self.cfg.seed, &[STREAM_ACQUIRE, round as u64]);
        let (suggested, acquire_seconds) = timed(|| acquire_next(&model, &self.cfg.acquire, acq_seed));
        self.pending.acquire_seconds = acquire_seconds;
        let x = match suggested {
            Ok(s) => {
                if s.deduplicated {
                    self.pending.note = Some("EI argmax duplicated an evaluated point".into());
                }
                s.point
            }
            Err(e) => {
                log::warn!("round {round}: acquisition failed ({e}); falling back to a random point");
                self.pending.note = Some(format!("acquisition failed: {e}"));
                self.random_point(STREAM_FALLBACK, round)
            }
        };
        self.pending.point = Some(x.clone());
        x
    }

    /// Record an evaluation. Diagnostics from the matching `ask` are attached
    /// when `x` is the point it returned.
    pub fn tell(&mut self, x: MixedPoint, y: f64) -> Result<&Record> {
        if !y.is_finite() {
            return Err(Error::NonFinite { context: "objective value".into(), value: y });
        }
        self.space().validate(&x)?;
        let pending = std::mem::take(&mut self.pending);
        let matched = pending.point.as_ref() == Some(&x);
        let record = Record {
            round: 0,
            point: x,
            y,
            incumbent: y,
            fit_seconds: if matched { pending.fit_seconds } else { 0.0 },
            acquire_seconds: if matched { pending.acquire_seconds } else { 0.0 },
            hyperparams: if matched { pending.hyperparams } else { None },
            note: if matched { pending.note } else { None },
        };
        Ok(self.history.push(record))
    }
}

/// A run aborted by the objective or the trace writer; `history` holds
/// everything evaluated before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub history: BoHistory,
    pub error: Error,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run aborted after {} evaluations: {}", self.history.len(), self.error)
    }
}

impl std::error::Error for RunFailure {}

/// Run `budget` ask/tell rounds, streaming each record to `trace` if given.
pub fn run<F, W>(
    cfg: &BoConfig,
    space: &SearchSpace,
    mut objective: F,
    mut trace: Option<&mut TraceSink<W>>,
) -> std::result::Result<BoHistory, RunFailure>
where
    F: FnMut(&MixedPoint) -> Result<f64>,
    W: Write,
{
    let mut state = BoState::new(cfg.clone(), space.clone()).map_err(|error| RunFailure {
        history: BoHistory::default(),
        error,
    })?;
    while !state.is_done() {
        let x = state.ask();
        let step = objective(&x).and_then(|y| {
            let rec = state.tell(x, y)?.clone();
            if let Some(t) = trace.as_deref_mut() {
                t.write(&rec)?;
            }
            Ok(())
        });
        if let Err(error) = step {
            return Err(RunFailure { history: state.into_history(), error });
        }
    }
    Ok(state.into_history())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::FactorGraph;

    fn space() -> SearchSpace {
        SearchSpace::new(vec![(-1.0, 1.0)], vec![FactorGraph::complete(5).unwrap(), FactorGraph::complete(4).unwrap()]).unwrap()
    }

    fn objective(x: &MixedPoint) -> Result<f64> {
        Ok(x.cont[0].powi(2) + (x.disc[0] as f64 - 2.0).abs() + 0.5 * x.disc[1] as f64)
    }

    fn small_cfg(budget: usize, seed: u64) -> BoConfig {
        BoConfig {
            budget,
            n_init: 4,
            restarts: 2,
            seed,
            acquire: AcquireConfig { n_random: 100, n_starts: 3, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(BoConfig::default().validate().is_ok());
        assert!(BoConfig { n_init: 0, ..Default::default() }.validate().is_err());
        assert!(BoConfig { budget: 5, ..Default::default() }.validate().is_err());
        assert!(BoState::new(BoConfig { kernel: "nope".into(), ..Default::default() }, space()).is_err());
    }

    #[test]
    fn tell_updates_incumbent() {
        let mut st = BoState::new(small_cfg(10, 0), space()).unwrap();
        let x = st.ask();
        st.tell(x.clone(), 3.0).unwrap();
        st.tell(x.clone(), 2.0).unwrap();
        assert_eq!(st.incumbent(), Some(2.0));
        st.tell(x.clone(), 7.0).unwrap();
        assert_eq!(st.incumbent(), Some(2.0));
        assert!(st.tell(x, f64::NAN).is_err());
        assert_eq!(st.history().len(), 3);
    }

    #[test]
    fn random_phase_is_seeded() {
        let mut a = BoState::new(small_cfg(10, 7), space()).unwrap();
        let mut b = BoState::new(small_cfg(10, 7), space()).unwrap();
        assert_eq!(a.ask(), b.ask());
        let mut c = BoState::new(small_cfg(10, 8), space()).unwrap();
        assert_ne!(a.ask(), c.ask());
    }

    #[test]
    fn budget_equal_n_init_is_random_search() {
        let cfg = BoConfig { budget: 4, ..small_cfg(4, 1) };
        let h = run::<_, Vec<u8>>(&cfg, &space(), objective, None).unwrap();
        assert_eq!(h.len(), 4);
        let m = h.records.iter().map(|r| r.y).fold(f64::INFINITY, f64::min);
        assert_eq!(h.final_incumbent(), Some(m));
        assert!(h.records.iter().all(|r| r.hyperparams.is_none()));
    }

    #[test]
    fn run_is_reproducible_and_traced() {
        let cfg = small_cfg(9, 3);
        let mut sink = TraceSink::new(Vec::new()).with_tag("benchmark", "toy");
        let a = run(&cfg, &space(), objective, Some(&mut sink)).unwrap();
        let b = run::<_, Vec<u8>>(&cfg, &space(), objective, None).unwrap();
        assert_eq!(a.len(), 9);
        let pa: Vec<_> = a.records.iter().map(|r| &r.point).collect();
        let pb: Vec<_> = b.records.iter().map(|r| &r.point).collect();
        assert_eq!(pa, pb);
        let inc = a.incumbents();
        assert!(inc.windows(2).all(|w| w[1] <= w[0]));
        assert!(a.records[5].hyperparams.is_some());

        let text = String::from_utf8(sink.into_inner()).unwrap();
        assert_eq!(text.lines().count(), 9);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["benchmark"], "toy");
        for key in ["round", "point", "y", "incumbent", "fit_seconds", "acquire_seconds"] {
            assert!(first.get(key).is_some(), "{key}");
        }
        let parsed = BoHistory::from_jsonl(&text).unwrap();
        assert_eq!(parsed.incumbents(), a.incumbents());

        let mut csv = Vec::new();
        a.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("round,incumbent\n0,"));
        assert_eq!(csv.lines().count(), 10);
    }

    #[test]
    fn replayed_trace_gives_identical_incumbents() {
        let cfg = small_cfg(7, 5);
        let h = run::<_, Vec<u8>>(&cfg, &space(), objective, None).unwrap();
        let mut st = BoState::new(cfg, space()).unwrap();
        for r in &h.records {
            st.tell(r.point.clone(), r.y).unwrap();
        }
        assert_eq!(st.history().incumbents(), h.incumbents());
    }

    #[test]
    fn objective_error_keeps_partial_history() {
        let cfg = small_cfg(8, 2);
        let mut calls = 0;
        let failing = |x: &MixedPoint| {
            calls += 1;
            if calls == 6 {
                Err(Error::InvalidArgument("boom".into()))
            } else {
                objective(x)
            }
        };
        let err = run::<_, Vec<u8>>(&cfg, &space(), failing, None).unwrap_err();
        assert_eq!(err.history.len(), 5);
    }
}
