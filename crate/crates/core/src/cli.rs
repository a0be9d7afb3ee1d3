//! Run configuration and the `bo`, `regress` and `verify` commands.
//!
//! Argument parsing lives in the binary; everything here is callable from
//! tests and returns an exit status instead of exiting.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acquire::AcquireConfig;
use crate::bench::{self, Benchmark};
use crate::bo::{run, BoConfig, BoHistory, TraceSink};
use crate::error::Error;
use crate::graph::GraphDecl;
use crate::kernel::{FmFunction, KernelForm, SpdMatrix};
use crate::par;
use crate::regress::{self, ColumnRoles, RegressOptions};
use crate::verify::{self, CheckReport, PsdFamily, Spectrum};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoSection {
    pub benchmark: String,
    pub kernel: String,
    pub budget: usize,
    pub n_init: usize,
    pub restarts: usize,
    pub seeds: Vec<u64>,
    pub warm_start: bool,
    /// Replacement factor graphs for the benchmark (same vertex counts).
    pub graphs: Option<Vec<GraphDecl>>,
}

impl Default for BoSection {
    fn default() -> Self {
        let d = BoConfig::default();
        Self {
            benchmark: "ackley5c".into(),
            kernel: d.kernel,
            budget: d.budget,
            n_init: d.n_init,
            restarts: d.restarts,
            seeds: vec![0, 1, 2, 3, 4],
            warm_start: d.warm_start,
            graphs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressSection {
    pub csv: Option<PathBuf>,
    pub continuous: Vec<String>,
    pub categorical: Vec<String>,
    pub target: Option<String>,
    pub ignore: Vec<String>,
    pub kernels: Vec<String>,
    pub splits: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub restarts: usize,
    pub log_target: bool,
}

impl Default for RegressSection {
    fn default() -> Self {
        let d = RegressOptions::default();
        Self {
            csv: None,
            continuous: Vec::new(),
            categorical: Vec::new(),
            target: None,
            ignore: Vec::new(),
            kernels: d.kernels,
            splits: d.splits,
            train_fraction: d.train_fraction,
            seed: d.seed,
            restarts: d.restarts,
            log_target: false,
        }
    }
}

pub const CHECK_NAMES: [&str; 6] = [
    "psd",
    "nonnegativity",
    "inverse_cosine",
    "monotonicity",
    "moddif_violation",
    "fm_properties",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub checks: Vec<String>,
    /// Overrides every check's default trial count.
    pub trials: Option<usize>,
    pub seed: u64,
    /// Run the PSD check on a negated kernel as well (failure-path hook).
    pub inject_negated: bool,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            checks: CHECK_NAMES.iter().map(|s| s.to_string()).collect(),
            trials: None,
            seed: 0,
            inject_negated: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub log_level: String,
    pub bo: BoSection,
    pub acquire: AcquireConfig,
    pub regress: RegressSection,
    pub verify: VerifySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("fmbo-out"),
            log_level: "info".into(),
            bo: BoSection::default(),
            acquire: AcquireConfig::default(),
            regress: RegressSection::default(),
            verify: VerifySection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CmdError> {
        toml::from_str(text).map_err(|e| CmdError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CmdError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CmdError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

/// Command failure split by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CmdError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => 2,
            CmdError::Runtime(_) => 1,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CmdError {
    CmdError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CmdError {
    CmdError::Runtime(e.to_string())
}

/// Refuse to clobber existing outputs unless `force`; creates the directory.
fn prepare_outputs(dir: &Path, files: &[PathBuf], force: bool) -> Result<(), CmdError> {
    if !force {
        if let Some(f) = files.iter().find(|f| f.exists()) {
            return Err(CmdError::Usage(format!(
                "{} already exists (use --force to overwrite)",
                f.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CmdError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| runtime(format!("cannot create {}: {e}", path.display())))
}

/// What a command did, for the caller to print.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub exit_code: i32,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

pub fn bo_benchmark(cfg: &RunConfig) -> Result<Benchmark, CmdError> {
    let b = bench::by_name(&cfg.bo.benchmark).map_err(usage)?;
    match &cfg.bo.graphs {
        Some(decls) => {
            let graphs = decls.iter().map(GraphDecl::build).collect::<Result<Vec<_>, _>>().map_err(usage)?;
            b.with_factors(graphs).map_err(usage)
        }
        None => Ok(b),
    }
}

pub fn bo_config(cfg: &RunConfig, seed: u64) -> BoConfig {
    BoConfig {
        kernel: cfg.bo.kernel.clone(),
        acquire: cfg.acquire.clone(),
        n_init: cfg.bo.n_init,
        budget: cfg.bo.budget,
        restarts: cfg.bo.restarts,
        seed,
        warm_start: cfg.bo.warm_start,
    }
}

/// Per-round mean incumbent and standard error (sample std / √seeds).
pub fn summarize_incumbents(histories: &[BoHistory]) -> Vec<(usize, f64, f64)> {
    let rounds = histories.iter().map(|h| h.len()).min().unwrap_or(0);
    let k = histories.len() as f64;
    (0..rounds)
        .map(|r| {
            let v: Vec<f64> = histories.iter().map(|h| h.records[r].incumbent).collect();
            let mean = v.iter().sum::<f64>() / k;
            let se = if histories.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() / k.sqrt()
            } else {
                0.0
            };
            (r, mean, se)
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(w: W, rows: &[(usize, f64, f64)]) -> crate::error::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["round", "mean", "stderr"])?;
    for (r, m, s) in rows {
        out.write_record([r.to_string(), m.to_string(), s.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// One BO run per seed, each with its own JSONL trace and CSV, plus a
/// summary CSV across seeds.
pub fn cmd_bo(cfg: &RunConfig, force: bool) -> Result<Outcome, CmdError> {
    let bench = bo_benchmark(cfg)?;
    if cfg.bo.seeds.is_empty() {
        return Err(usage("bo: seeds must not be empty"));
    }
    for &seed in &cfg.bo.seeds {
        bo_config(cfg, seed).validate().map_err(usage)?;
    }
    KernelForm::from_name(&cfg.bo.kernel, bench.space().dim_cont()).map_err(usage)?;

    let dir = &cfg.output_dir;
    let stem = format!("{}_{}", bench.name(), cfg.bo.kernel);
    let trace_path = |s: u64| dir.join(format!("{stem}_seed{s}.jsonl"));
    let csv_path = |s: u64| dir.join(format!("{stem}_seed{s}.csv"));
    let summary_path = dir.join(format!("{stem}_summary.csv"));
    let mut files: Vec<PathBuf> = cfg.bo.seeds.iter().flat_map(|&s| [trace_path(s), csv_path(s)]).collect();
    files.push(summary_path.clone());
    prepare_outputs(dir, &files, force)?;

    let runs = par::map_range(cfg.bo.seeds.len(), |i| {
        let seed = cfg.bo.seeds[i];
        let file = create(&trace_path(seed))?;
        let mut sink = TraceSink::new(file)
            .with_tag("benchmark", bench.name())
            .with_tag("kernel", cfg.bo.kernel.as_str())
            .with_tag("seed", seed)
            .with_tag("surrogate", bench.surrogate());
        let history = match run(&bo_config(cfg, seed), bench.space(), |x| bench.evaluate(x), Some(&mut sink)) {
            Ok(h) => h,
            Err(fail) => {
                let _ = fail.history.write_csv(create(&csv_path(seed))?);
                return Err(runtime(format!("seed {seed}: {fail}")));
            }
        };
        history.write_csv(create(&csv_path(seed))?).map_err(runtime)?;
        log::info!("seed {seed}: final incumbent {}", history.final_incumbent().unwrap_or(f64::NAN));
        Ok(history)
    });
    let histories = runs.into_iter().collect::<Result<Vec<_>, CmdError>>()?;
    let rows = summarize_incumbents(&histories);
    write_summary_csv(create(&summary_path)?, &rows).map_err(runtime)?;

    let mut summary = format!("{stem}: {} seeds, budget {}\n", histories.len(), cfg.bo.budget);
    if let Some((r, m, s)) = rows.last() {
        summary.push_str(&format!("final incumbent (round {r}): {m:.6} ± {s:.6}\n"));
    }
    if bench.surrogate() {
        summary.push_str(&format!("note: {} uses a documented surrogate definition\n", bench.name()));
    }
    Ok(Outcome { exit_code: 0, summary, files })
}

pub fn cmd_regress(cfg: &RunConfig, force: bool) -> Result<Outcome, CmdError> {
    let r = &cfg.regress;
    let csv = r.csv.as_ref().ok_or_else(|| usage("regress: csv path is required"))?;
    if !csv.exists() {
        return Err(usage(format!("regress: {} does not exist", csv.display())));
    }
    let target = r.target.clone().ok_or_else(|| usage("regress: target column is required"))?;
    let roles = ColumnRoles {
        continuous: r.continuous.clone(),
        categorical: r.categorical.clone(),
        target,
        ignore: r.ignore.clone(),
    };
    let mut data = regress::load_csv(csv, &roles).map_err(usage)?;
    if r.log_target {
        data = data.log_target().map_err(usage)?;
    }
    let opts = RegressOptions {
        kernels: r.kernels.clone(),
        splits: r.splits,
        train_fraction: r.train_fraction,
        seed: r.seed,
        restarts: r.restarts,
    };
    let dir = &cfg.output_dir;
    let splits_path = dir.join("regress_splits.jsonl");
    let summary_path = dir.join("regress_summary.csv");
    let files = vec![splits_path.clone(), summary_path.clone()];
    prepare_outputs(dir, &files, force)?;

    let (results, summaries) = regress::run_regression(&data, &opts).map_err(|e| match e {
        Error::Config(_) | Error::InvalidArgument(_) => usage(e),
        other => runtime(other),
    })?;
    let mut w = create(&splits_path)?;
    for res in &results {
        serde_json::to_writer(&mut w, res).map_err(runtime)?;
        w.write_all(b"\n").map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    let mut out = csv::Writer::from_writer(create(&summary_path)?);
    for s in &summaries {
        out.serialize(s).map_err(runtime)?;
    }
    out.flush().map_err(runtime)?;

    let mut summary = regress::format_table(&summaries);
    for res in results.iter().filter(|r| r.error.is_some()) {
        summary.push_str(&format!(
            "skipped {} split {}: {}\n",
            res.kernel,
            res.split,
            res.error.as_deref().unwrap_or_default()
        ));
    }
    let exit_code = if summaries.iter().any(|s| s.completed == 0) { 1 } else { 0 };
    Ok(Outcome { exit_code, summary, files })
}

fn default_trials(check: &str) -> usize {
    match check {
        "psd" => 200,
        "nonnegativity" => 500,
        "inverse_cosine" => 2000,
        "monotonicity" => 300,
        "moddif_violation" => 1000,
        _ => 200,
    }
}

/// Run the configured checks; a check name outside [`CHECK_NAMES`] is a usage error.
pub fn run_checks(v: &VerifySection) -> Result<Vec<CheckReport>, CmdError> {
    let mut reports = Vec::new();
    for check in &v.checks {
        let trials = v.trials.unwrap_or_else(|| default_trials(check));
        if trials == 0 {
            return Err(usage("verify: trials must be at least 1"));
        }
        let seed = v.seed;
        match check.as_str() {
            "psd" => {
                for fam in PsdFamily::ALL {
                    reports.push(verify::check_psd(fam, trials, seed));
                }
                if v.inject_negated {
                    reports.push(verify::check_psd_with(PsdFamily::ModLap, trials, seed, true));
                }
            }
            "nonnegativity" => {
                for s in [Spectrum::RegLap, Spectrum::Diffusion] {
                    reports.push(verify::check_nonnegativity(s, trials, seed));
                }
            }
            "inverse_cosine" => reports.push(verify::find_negative_inverse_cosine(trials, seed)),
            "monotonicity" => {
                for f in [FmFunction::Lap, FmFunction::default_family(), FmFunction::Dif] {
                    reports.push(verify::check_similarity_monotonicity(&f, trials, seed).map_err(runtime)?);
                }
            }
            "moddif_violation" => reports.push(verify::find_moddif_violation(trials, seed)),
            "fm_properties" => {
                let fs = [
                    FmFunction::Lap,
                    FmFunction::default_family(),
                    FmFunction::Dif,
                    FmFunction::NnExt(SpdMatrix::identity(2)),
                ];
                for f in fs {
                    reports.extend(verify::check_fm_properties(&f, trials, seed).map_err(runtime)?);
                }
            }
            other => {
                return Err(usage(format!(
                    "unknown check '{other}' (expected one of {})",
                    CHECK_NAMES.join(", ")
                )))
            }
        }
    }
    Ok(reports)
}

pub fn format_reports(reports: &[CheckReport]) -> String {
    let mut out = format!("{:<36} {:<13} {:>7} {:>14} {:>10}  result\n", "check", "kind", "trials", "margin", "tolerance");
    for r in reports {
        let result = match (r.kind, r.passed) {
            (verify::CheckKind::Informational, true) => "info: none found",
            (verify::CheckKind::Informational, false) => "info: violations",
            (_, true) => "PASS",
            (_, false) => "FAIL",
        };
        let kind = match r.kind {
            verify::CheckKind::Gated => "gated",
            verify::CheckKind::Existence => "existence",
            verify::CheckKind::Informational => "informational",
        };
        out.push_str(&format!(
            "{:<36} {:<13} {:>7} {:>14.6e} {:>10.1e}  {result}\n",
            r.check, kind, r.trials, r.margin, r.tolerance
        ));
        for n in &r.notes {
            out.push_str(&format!("    {n}\n"));
        }
    }
    out
}

/// Exit 0 iff every gated and existence check passes.
pub fn cmd_verify(cfg: &RunConfig, force: bool) -> Result<Outcome, CmdError> {
    let dir = &cfg.output_dir;
    let path = dir.join("verify_reports.jsonl");
    // validate check names before touching the filesystem
    if let Some(bad) = cfg.verify.checks.iter().find(|c| !CHECK_NAMES.contains(&c.as_str())) {
        return Err(usage(format!("unknown check '{bad}' (expected one of {})", CHECK_NAMES.join(", "))));
    }
    prepare_outputs(dir, std::slice::from_ref(&path), force)?;
    let reports = run_checks(&cfg.verify)?;
    let mut w = create(&path)?;
    for r in &reports {
        serde_json::to_writer(&mut w, r).map_err(runtime)?;
        w.write_all(b"\n").map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    let failed = reports.iter().filter(|r| r.is_failure()).count();
    let mut summary = format_reports(&reports);
    summary.push_str(&format!("{} checks, {failed} failed\n", reports.len()));
    Ok(Outcome { exit_code: if failed > 0 { 1 } else { 0 }, summary, files: vec![path] })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_sections() {
        let cfg = RunConfig::from_toml_str(
            r#"
            output_dir = "x"
            [bo]
            benchmark = "func2c"
            seeds = [1, 2]
            graphs = ["path(3)", { n = 5, edges = [[0, 1, 1.0], [1, 2, 1.0], [2, 3, 1.0], [3, 4, 1.0]] }]
            [acquire]
            n_random = 50
            [verify]
            checks = ["psd"]
            trials = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.bo.seeds, vec![1, 2]);
        assert_eq!(cfg.bo.budget, 50);
        assert_eq!(cfg.acquire.n_random, 50);
        assert_eq!(cfg.acquire.n_spray, 20);
        let b = bo_benchmark(&cfg).unwrap();
        assert_eq!(b.space().factors()[1].neighbors(4), &[3]);
        assert!(RunConfig::from_toml_str("[bo]\nbogus = 1").is_err());
    }

    #[test]
    fn summary_stats() {
        let mk = |v: &[f64]| BoHistory {
            records: v
                .iter()
                .enumerate()
                .map(|(i, &y)| crate::bo::Record {
                    round: i,
                    point: crate::space::MixedPoint::new(vec![], vec![]),
                    y,
                    incumbent: y,
                    fit_seconds: 0.0,
                    acquire_seconds: 0.0,
                    hyperparams: None,
                    note: None,
                })
                .collect(),
        };
        let rows = summarize_incumbents(&[mk(&[3.0, 1.0]), mk(&[5.0, 3.0])]);
        assert_eq!(rows[0], (0, 4.0, 2f64.sqrt() / 2f64.sqrt()));
        assert_eq!(rows[1].1, 2.0);
    }

    #[test]
    fn unknown_names_are_usage_errors() {
        let mut cfg = RunConfig::default();
        cfg.bo.benchmark = "nope".into();
        assert_eq!(cmd_bo(&cfg, false).unwrap_err().exit_code(), 2);
        let mut cfg = RunConfig::default();
        cfg.bo.kernel = "nope".into();
        assert_eq!(cmd_bo(&cfg, false).unwrap_err().exit_code(), 2);
        let mut cfg = RunConfig::default();
        cfg.verify.checks = vec!["nope".into()];
        assert_eq!(cmd_verify(&cfg, false).unwrap_err().exit_code(), 2);
    }
}
