//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//! Runs without the libtest harness so the lines always reach the output.

#![allow(clippy::type_complexity)]

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use fmbo_core::acquire::{ei_from_moments, expected_improvement};
use fmbo_core::bench;
use fmbo_core::bo::BoHistory;
use fmbo_core::cli::{cmd_bo, run_checks, RunConfig, VerifySection};
use fmbo_core::gp::{log_marginal_likelihood, Dataset, GpModel};
use fmbo_core::regress::{self, RegressOptions};
use fmbo_core::verify::{CheckKind, CheckReport};
use fmbo_core::{FactorGraph, FmFunction, Hyperparams, KernelForm, KernelSpec, MixedPoint, SearchSpace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn checks(names: &[&str]) -> Vec<CheckReport> {
    let v = VerifySection { checks: names.iter().map(|s| s.to_string()).collect(), ..VerifySection::default() };
    run_checks(&v).expect("checks run")
}

fn find<'a>(reports: &'a [CheckReport], name: &str) -> &'a CheckReport {
    reports.iter().find(|r| r.check == name).unwrap_or_else(|| panic!("no report {name}"))
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let reports = checks(&["psd"]);
    let secs = t.elapsed().as_secs_f64();
    let names = ["psd[modlap]", "psd[moddif]", "psd[modfamily]", "psd[modnn]"];
    let ok = names.iter().all(|n| {
        let r = find(&reports, n);
        r.kind == CheckKind::Gated && r.passed && r.trials >= 200 && r.margin >= -1e-8
    });
    let worst = reports.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
    verdict(
        ok && secs < 120.0,
        format!("4 families x 200 trials, worst normalized min eigenvalue {worst:.3e} (>= -1e-8), {secs:.2}s (< 120s)"),
    )
}

fn criterion_2() -> Verdict {
    let t = Instant::now();
    let reports = checks(&["nonnegativity", "inverse_cosine"]);
    let secs = t.elapsed().as_secs_f64();
    let lap = find(&reports, "nonnegativity[reglap]");
    let dif = find(&reports, "nonnegativity[diffusion]");
    let inv = find(&reports, "negative_entry[inverse_cosine]");
    let ok = lap.passed
        && dif.passed
        && lap.trials >= 500
        && dif.trials >= 500
        && lap.margin >= -1e-7
        && dif.margin >= -1e-7
        && inv.passed
        && inv.margin < -1e-6;
    verdict(
        ok && secs < 120.0,
        format!(
            "min entries reglap {:.3e}, diffusion {:.3e} over 500 graphs (>= -1e-7); inverse cosine entry {:.3e} (< -1e-6); {secs:.2}s (< 120s)",
            lap.margin, dif.margin, inv.margin
        ),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for n in 2..=10 {
        let space = SearchSpace::new(vec![(0.0, 1.0)], vec![FactorGraph::complete(n).unwrap()]).unwrap();
        let spec = KernelSpec::new(KernelForm::Mod(FmFunction::Lap), space).unwrap();
        for _ in 0..20 {
            let (alpha, beta, theta) = (rng.random_range(0.01..5.0), rng.random_range(0.01..5.0), rng.random_range(0.1..2.0));
            let hp = Hyperparams { theta: vec![theta], alpha: vec![alpha], beta: vec![beta], sigma_f2: 1.0, sigma_n2: 0.01 };
            let (c, c2) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let s = ((c - c2) / theta).powi(2);
            let f = |l: f64| 1.0 / (1.0 + beta * l + alpha * s);
            let nf = n as f64;
            for v in 0..n {
                for w in 0..n {
                    let want = if v == w { (f(0.0) + (nf - 1.0) * f(nf)) / nf } else { (f(0.0) - f(nf)) / nf };
                    let k = spec.eval(&hp, &MixedPoint::new(vec![c], vec![v]), &MixedPoint::new(vec![c2], vec![w])).unwrap();
                    worst = worst.max((k - want).abs());
                }
            }
        }
    }
    verdict(worst <= 1e-10, format!("K_n closed form, n = 2..10, max abs error {worst:.3e} (<= 1e-10)"))
}

fn criterion_4() -> Verdict {
    let reports = checks(&["monotonicity", "moddif_violation"]);
    let lap = find(&reports, "similarity_monotonicity[lap]");
    let fam = find(&reports, "similarity_monotonicity[family]");
    let dif = find(&reports, "similarity_monotonicity[dif]");
    let viol = find(&reports, "moddif_violation");
    let gated = [lap, fam].iter().all(|r| r.kind == CheckKind::Gated && r.passed && r.trials >= 300 && r.margin <= 1e-9);
    let info = dif.kind == CheckKind::Informational && viol.kind == CheckKind::Informational && !viol.notes.is_empty();
    verdict(
        gated && info,
        format!(
            "max increase lap {:.3e}, family {:.3e} (<= 1e-9, 300 trials); moddif informational: {}",
            lap.margin,
            fam.margin,
            viol.notes.join("; ")
        ),
    )
}

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_lml, mut worst_mu, mut worst_var) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let inst = random_instance(&mut rng, 3, 6);
        let forms = all_forms(inst.space.dim_cont());
        let form = forms[rng.random_range(0..forms.len())].clone();
        let hp = random_hp(&mut rng, &inst.space);
        let n = rng.random_range(1..=25);
        let pts: Vec<MixedPoint> = (0..n).map(|_| random_point(&mut rng, &inst.space)).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut k = zeros(n);
        for i in 0..n {
            for j in 0..n {
                k[i][j] = oracle_kernel(&inst, &form, &hp, &pts[i], &pts[j]) + if i == j { hp.sigma_n2 } else { 0.0 };
            }
        }
        let oracle = DenseGp::new(&k, &ys);
        let spec = KernelSpec::new(form.clone(), inst.space.clone()).unwrap();
        let data = Dataset::new(pts.clone(), ys.clone()).unwrap();
        let want = oracle.lml();
        let lml = log_marginal_likelihood(&spec, &hp, &data).unwrap();
        worst_lml = worst_lml.max((lml - want).abs() / want.abs().max(1.0));
        let model = GpModel::condition(&spec, hp.clone(), data).unwrap();
        let y_scale = ys.iter().fold(0.0f64, |m, y| m.max(y.abs()));
        for _ in 0..5 {
            let x = random_point(&mut rng, &inst.space);
            let ks: Vec<f64> = pts.iter().map(|p| oracle_kernel(&inst, &form, &hp, p, &x)).collect();
            let kss = oracle_kernel(&inst, &form, &hp, &x, &x);
            let (mu_o, var_o) = oracle.predict(&ks, kss);
            let (mu, var) = model.predict(&x).unwrap();
            worst_mu = worst_mu.max((mu - mu_o).abs() / mu_o.abs().max(y_scale));
            worst_var = worst_var.max((var - var_o.max(0.0)).abs() / kss.max(var_o.abs()));
        }
    }
    let worst = worst_lml.max(worst_mu).max(worst_var);
    verdict(
        worst <= 1e-8,
        format!("100 instances (n <= 25) vs dense inverse: rel error lml {worst_lml:.2e}, mean {worst_mu:.2e}, variance {worst_var:.2e} (<= 1e-8)"),
    )
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mc = ChaCha8Rng::seed_from_u64(60);
    let inst = random_instance(&mut rng, 2, 5);
    let hp = random_hp(&mut rng, &inst.space);
    let pts: Vec<MixedPoint> = (0..10).map(|_| random_point(&mut rng, &inst.space)).collect();
    let ys: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
    let spec = KernelSpec::new(KernelForm::Mod(FmFunction::Lap), inst.space.clone()).unwrap();
    let model = GpModel::condition(&spec, hp, Dataset::new(pts, ys).unwrap()).unwrap();
    let mut worst_z = 0.0f64;
    for i in 0..50 {
        // alternate model-derived moments and free triples
        let (mu, sigma, ei) = if i % 2 == 0 {
            let x = random_point(&mut rng, &inst.space);
            let (mu, var) = model.predict(&x).unwrap();
            let best = mu + var.sqrt() * rng.random_range(-2.5..2.5);
            let ei = expected_improvement(&model, &x, best).unwrap();
            (mu, var.sqrt(), (ei, best))
        } else {
            let mu = rng.random_range(-3.0..3.0);
            let sigma = 10f64.powf(rng.random_range(-2.0..1.0));
            let best = mu + sigma * rng.random_range(-2.5..2.5);
            (mu, sigma, (ei_from_moments(mu, sigma, best), best))
        };
        let (ei, best) = ei;
        let (m, se) = mc_expected_improvement(&mut mc, mu, sigma, best, 1_000_000);
        worst_z = worst_z.max((ei - m).abs() / se.max(1e-300));
    }
    verdict(worst_z <= 3.0, format!("50 triples vs 1e6-sample Monte Carlo, worst deviation {worst_z:.2} SE (<= 3)"))
}

fn final_values(h: &[BoHistory]) -> Vec<f64> {
    h.iter().map(|h| h.final_incumbent().unwrap()).collect()
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn histories(dir: &Path, stem: &str, seeds: &[u64]) -> Vec<BoHistory> {
    seeds
        .iter()
        .map(|s| BoHistory::from_jsonl(&std::fs::read_to_string(dir.join(format!("{stem}_seed{s}.jsonl"))).unwrap()).unwrap())
        .collect()
}

fn criterion_7() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig { output_dir: dir.path().to_path_buf(), ..RunConfig::default() };
    cfg.bo.benchmark = "ackley5c".into();
    cfg.bo.kernel = "modlap".into();
    cfg.bo.budget = 50;
    cfg.bo.seeds = vec![0, 1, 2, 3, 4];
    let t = Instant::now();
    if let Err(e) = cmd_bo(&cfg, false) {
        return verdict(false, format!("bo run failed: {e}"));
    }
    let secs = t.elapsed().as_secs_f64();
    let bo = final_values(&histories(dir.path(), "ackley5c_modlap", &cfg.bo.seeds));
    let b = bench::ackley5c();
    let rs: Vec<BoHistory> = cfg.bo.seeds.iter().map(|&s| bench::random_search(&b, 50, s).unwrap()).collect();
    let rs = final_values(&rs);
    let ((mb, sb), (mr, sr)) = (mean_sd(&bo), mean_sd(&rs));
    let pooled_se = ((sb * sb + sr * sr) / bo.len() as f64).sqrt();
    verdict(
        mr - mb >= 2.0 * pooled_se && secs < 1800.0,
        format!(
            "ackley5c budget 50, 5 seeds: BO-ModLap {mb:.4} ± {sb:.4}, random {mr:.4} ± {sr:.4}; gap {:.4} vs 2 x pooled SE {:.4}; {secs:.1}s (< 1800s)",
            mr - mb,
            2.0 * pooled_se
        ),
    )
}

fn data_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/interaction.csv")
}

fn criterion_8() -> Verdict {
    let text = std::fs::read_to_string(data_path()).expect("shipped dataset");
    if text != regress::interaction_dataset(100, 0) {
        return verdict(false, "data/interaction.csv differs from interaction_dataset(100, 0)".into());
    }
    let data = regress::read_csv(text.as_bytes(), &regress::interaction_roles()).unwrap();
    let opts = RegressOptions {
        kernels: vec!["modlap".into(), "addlap".into(), "moddif".into()],
        ..RegressOptions::default()
    };
    let (_, summaries) = regress::run_regression(&data, &opts).unwrap();
    let get = |k: &str| summaries.iter().find(|s| s.kernel == k).unwrap();
    let (lap, add, dif) = (get("modlap"), get("addlap"), get("moddif"));
    let complete = [lap, add, dif].iter().all(|s| s.completed == opts.splits);
    let (l, a, d) = (lap.nll_mean, add.nll_mean, dif.nll_mean);
    verdict(
        complete && l <= a && d > l,
        format!("test NLL over 20 splits (80/20): modlap {l:.4}, addlap {a:.4}, moddif {d:.4}; need modlap <= addlap and moddif > modlap"),
    )
}

fn criterion_9() -> Verdict {
    let reports = checks(&["fm_properties"]);
    let gated = ["fm_p1[lap]", "fm_p3[lap]", "fm_p1[family]", "fm_p3[family]", "fm_p1[dif]", "fm_p1[nn]", "fm_p3[nn]"];
    let gated_ok = gated.iter().all(|n| {
        let r = find(&reports, n);
        r.kind == CheckKind::Gated && r.passed
    });
    let dif3 = find(&reports, "fm_p3[dif]");
    let cvx_reported = dif3.kind == CheckKind::Informational
        && dif3.notes.iter().any(|n| n.contains("not convex") && !n.contains("not convex 0"));
    let reversed = find(&reports, "fm_p3[nn]").notes.iter().any(|n| n.contains("premise reversed"));
    verdict(
        gated_ok && cvx_reported && reversed,
        format!("P1/P3 lap and family, P1 dif, reversed-premise P3 nn pass; dif P3 informational: {}", dif3.notes.join("; ")),
    )
}

fn criterion_10() -> Verdict {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig { output_dir: dir.path().to_path_buf(), ..RunConfig::default() };
        cfg.bo.budget = 16;
        cfg.bo.n_init = 6;
        cfg.bo.seeds = vec![0, 1];
        cmd_bo(&cfg, false).unwrap();
        let summary = std::fs::read(dir.path().join("ackley5c_modlap_summary.csv")).unwrap();
        let points: Vec<Vec<MixedPoint>> = histories(dir.path(), "ackley5c_modlap", &cfg.bo.seeds)
            .iter()
            .map(|h| h.records.iter().map(|r| r.point.clone()).collect())
            .collect();
        (summary, points)
    };
    let (a, b) = (run(), run());
    verdict(
        a == b && a.1.iter().all(|p| p.len() == 16),
        format!("two identical ackley5c runs (seeds 0, 1, budget 16): {} summary bytes and 32 suggestions identical", a.0.len()),
    )
}

fn main() {
    // cargo may pass libtest flags; `--list` and a non-matching name filter skip the suite
    let raw: Vec<String> = std::env::args().skip(1).collect();
    if raw.iter().any(|a| a == "--list") {
        return;
    }
    let args: Vec<&String> = raw.iter().filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("PSD suite", criterion_1),
        ("nonnegativity suite", criterion_2),
        ("complete-graph closed form", criterion_3),
        ("similarity monotonicity", criterion_4),
        ("GP numeric equivalence", criterion_5),
        ("EI oracle", criterion_6),
        ("BO dominance over random search", criterion_7),
        ("regression ablation trend", criterion_8),
        ("FM-property grids", criterion_9),
        ("determinism", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let v = f();
        if !v.passed {
            failed += 1;
        }
        println!(
            "criterion {:>2} {} {name}: {} [{:.1}s]",
            i + 1,
            if v.passed { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("reported only: func2c budget-200 target needs the external reference definitions; the bundled func2c is a surrogate, not run");
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
