//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line each and exits nonzero if any fails.
//!
//! Monte Carlo criteria at R = 200 reuse the first 200 replications of the
//! R = 500 runs; replication `r` depends only on `(seed, r)`, so this equals
//! a fresh R = 200 run.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use r2ive::elasticnet::{enet_kkt_violation, fit_elastic_net};
use r2ive::estimator::{EstimatorTag, R2iveConfig};
use r2ive::grouplasso::{fit_group_lasso, group_kkt_violation, lambda_max, BlockDesign};
use r2ive::simulation::{format_report, run_monte_carlo, Model, ReportStyle, SimConfig, SimulationReport};
use r2ive::SolverOptions;

use EstimatorTag::{Naive, OracleTsls, R2ive, Sisvive, Tsls};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Runs are cached by name; the R = 200 criteria truncate the R = 500 runs.
struct Runs {
    workers: usize,
    cache: BTreeMap<String, SimulationReport>,
}

impl Runs {
    fn get(&mut self, name: &str, cfg: SimConfig) -> &SimulationReport {
        let workers = self.workers;
        self.cache.entry(name.to_string()).or_insert_with(|| {
            let t = Instant::now();
            let report = run_monte_carlo(&cfg, &EstimatorTag::ALL, &R2iveConfig::default(), workers)
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            eprintln!("  ran {name} (R = {}) in {:.0}s", cfg.reps, t.elapsed().as_secs_f64());
            report
        })
    }

    fn preset(&mut self, name: &str, reps: usize) -> SimulationReport {
        let mut cfg = SimConfig::preset(name).expect("known preset");
        let full = 500;
        cfg.reps = full;
        let report = self.get(name, cfg);
        if reps == full {
            report.clone()
        } else {
            report.truncated(reps).expect("truncation")
        }
    }
}

fn mse(r: &SimulationReport, tag: EstimatorTag) -> f64 {
    r.summary(tag).expect("estimator in report").mse
}

fn criterion_1(runs: &mut Runs) -> Verdict {
    let r = runs.preset("linear-s2-10", 200);
    let ours = r.summary(R2ive).unwrap();
    let tsls = r.summary(Tsls).unwrap();
    let freq = ours.invalid.as_ref().and_then(|s| s.freq).unwrap_or(0.0);
    let pass = ours.bias.abs() <= 0.01 && ours.mse <= 0.002 && tsls.bias >= 0.4 && freq >= 0.95;
    verdict(
        pass,
        format!(
            "R2IVE bias {:.4} (|.| <= 0.01), mse {:.4} (<= 0.002), invalid freq {:.3} (>= 0.95); TSLS bias {:.4} (>= 0.4)",
            ours.bias, ours.mse, freq, tsls.bias
        ),
    )
}

fn criterion_2(runs: &mut Runs) -> Verdict {
    let mut cfg = SimConfig::preset("linear-s2-0").unwrap();
    cfg.reps = 200;
    let r = runs.get("linear-s2-0", cfg);
    let ours = r.summary(R2ive).unwrap();
    let mean_size = ours.invalid.as_ref().map_or(f64::INFINITY, |s| s.mean);
    verdict(
        ours.bias.abs() <= 0.01 && mean_size <= 1.0,
        format!("R2IVE bias {:.4} (|.| <= 0.01), mean |A_I| {mean_size:.2} (<= 1.0)", ours.bias),
    )
}

fn criterion_3(runs: &mut Runs) -> Verdict {
    let sizes = ["linear-n200", "linear-n500", "linear-n1000"];
    let reports: Vec<SimulationReport> = sizes.iter().map(|p| runs.preset(p, 200)).collect();
    let mses: Vec<f64> = reports.iter().map(|r| mse(r, R2ive)).collect();
    let exact: Vec<f64> = reports
        .iter()
        .map(|r| r.summary(R2ive).unwrap().exact_invalid_rate.unwrap_or(0.0))
        .collect();
    let pass = mses[2] <= mses[0] && exact.windows(2).all(|w| w[1] >= w[0]);
    verdict(
        pass,
        format!(
            "R2IVE mse n=200/500/1000: {:.5}/{:.5}/{:.5}; P(A_I exact): {:.3}/{:.3}/{:.3}",
            mses[0], mses[1], mses[2], exact[0], exact[1], exact[2]
        ),
    )
}

fn criterion_4(runs: &mut Runs) -> Verdict {
    let r = runs.preset("nonlinear-s2-20", 200);
    let ours = r.summary(R2ive).unwrap();
    let naive = r.summary(Naive).unwrap();
    verdict(
        ours.bias.abs() <= 0.02 && naive.bias >= 0.1,
        format!(
            "R2IVE bias {:.4} (|.| <= 0.02); NAIVE bias {:.4} (>= 0.1)",
            ours.bias, naive.bias
        ),
    )
}

/// Every preset with invalid instruments, without the alias of `linear-s2-30`.
const INVALID_PRESETS: [&str; 10] = [
    "linear-s2-10",
    "linear-s2-30",
    "linear-s1-4",
    "linear-s1-20",
    "linear-n200",
    "linear-n500",
    "linear-n1000",
    "nonlinear-s2-20-n200",
    "nonlinear-s2-20",
    "nonlinear-s1-12",
];

fn criterion_5(runs: &mut Runs) -> Verdict {
    let mut failing = Vec::new();
    let mut cells = Vec::new();
    for p in INVALID_PRESETS {
        let r = runs.preset(p, 500);
        let m = [OracleTsls, R2ive, Sisvive, Tsls].map(|t| mse(&r, t));
        let ordered = m.windows(2).all(|w| w[0] <= w[1]);
        cells.push(format!("{p} {:.4}<={:.4}<={:.4}<={:.4}", m[0], m[1], m[2], m[3]));
        if !ordered {
            failing.push(p);
        }
    }
    verdict(
        failing.is_empty(),
        format!(
            "MSE ORACLE_TSLS <= R2IVE <= SISVIVE <= TSLS; violated on [{}]; {}",
            failing.join(", "),
            cells.join("; ")
        ),
    )
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
}

fn gvec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn blocks(sizes: &[usize]) -> Vec<std::ops::Range<usize>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&m| {
            start += m;
            start - m..start
        })
        .collect()
}

fn enet_objective(y: &DVector<f64>, z: &DMatrix<f64>, b: &DVector<f64>, l1: f64, l2: f64, w: &[f64]) -> f64 {
    let pen: f64 = b.iter().zip(w).map(|(v, w)| w * v.abs()).sum();
    (y - z * b).norm_squared() + l2 * b.norm_squared() + l1 * pen
}

/// Global elastic-net minimizer: solve the stationarity system on every
/// sign pattern in {-1, 0, 1}^p and keep the sign-consistent solution with
/// the smallest objective.
fn sign_pattern_oracle(y: &DVector<f64>, z: &DMatrix<f64>, l1: f64, l2: f64, w: &[f64]) -> DVector<f64> {
    let p = z.ncols();
    let g = z.tr_mul(z);
    let c = z.tr_mul(y);
    let mut best = DVector::zeros(p);
    let mut best_obj = enet_objective(y, z, &best, l1, l2, w);
    for code in 1..3usize.pow(p as u32) {
        let mut signs = [0.0; 6];
        let mut rem = code;
        for s in signs.iter_mut().take(p) {
            *s = [0.0, 1.0, -1.0][rem % 3];
            rem /= 3;
        }
        let act: Vec<usize> = (0..p).filter(|&j| signs[j] != 0.0).collect();
        let k = act.len();
        let a = DMatrix::from_fn(k, k, |r, s| g[(act[r], act[s])] + if r == s { l2 } else { 0.0 });
        let rhs = DVector::from_fn(k, |r, _| c[act[r]] - 0.5 * l1 * w[act[r]] * signs[act[r]]);
        let Some(sol) = a.cholesky().map(|ch| ch.solve(&rhs)) else { continue };
        if act.iter().enumerate().any(|(r, &j)| sol[r] * signs[j] <= 0.0) {
            continue;
        }
        let mut b = DVector::zeros(p);
        for (r, &j) in act.iter().enumerate() {
            b[j] = sol[r];
        }
        let obj = enet_objective(y, z, &b, l1, l2, w);
        if obj < best_obj {
            best_obj = obj;
            best = b;
        }
    }
    best
}

fn criterion_6() -> Verdict {
    let t = Instant::now();
    let defaults = SolverOptions::default();
    // the default rule stops on coefficient change; certifying gradients to
    // 1e-6 needs a finer one
    let certify = SolverOptions {
        tol: 1e-10,
        max_iter: 100_000,
    };
    let tight = SolverOptions {
        tol: 1e-13,
        max_iter: 200_000,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    // (a) KKT certification
    let mut worst_group: f64 = 0.0;
    let mut worst_enet: f64 = 0.0;
    let mut all_converged = true;
    for _ in 0..100 {
        let n = rng.random_range(30..80);
        let sizes: Vec<usize> = (0..rng.random_range(3..9)).map(|_| rng.random_range(1..5)).collect();
        let p: usize = sizes.iter().sum();
        let mut x = gaussian(&mut rng, n, p);
        // correlated columns make the blocks non-orthogonal
        for j in 1..p {
            let prev = x.column(j - 1).clone_owned();
            x.column_mut(j).axpy(0.5, &prev, 1.0);
        }
        let truth = DVector::from_fn(p, |j, _| if j < 3 { 1.0 } else { 0.0 });
        let d = &x * truth + gvec(&mut rng, n);
        let design = BlockDesign::new(x.clone(), blocks(&sizes)).unwrap();
        let w: Vec<f64> = (0..sizes.len()).map(|_| rng.random_range(0.5..2.0)).collect();
        let lam = rng.random_range(0.05..0.9) * lambda_max(d.as_slice(), &design, &w);
        let fit = fit_group_lasso(d.as_slice(), &design, lam, &w, &certify, None).unwrap();
        all_converged &= fit.converged;
        worst_group = worst_group.max(group_kkt_violation(d.as_slice(), &design, &fit));

        let we: Vec<f64> = (0..p).map(|_| rng.random_range(0.5..2.0)).collect();
        let l1 = rng.random_range(0.5..20.0);
        let l2 = rng.random_range(0.0..0.2) * n as f64;
        let fit = fit_elastic_net(&d, &x, l1, l2, &we, &certify).unwrap();
        all_converged &= fit.converged;
        worst_enet = worst_enet.max(enet_kkt_violation(&d, &x, &fit));
    }
    let a = all_converged && worst_group <= 1e-6 && worst_enet <= 1e-6;

    // (b) closed forms on orthonormal designs
    let mut worst_closed: f64 = 0.0;
    for _ in 0..20 {
        let n = 40;
        let sizes = [2, 3, 1, 4];
        let q = gaussian(&mut rng, n, 10).qr().q();
        let d = gvec(&mut rng, n) * 3.0;
        let design = BlockDesign::new(q.clone(), blocks(&sizes)).unwrap();
        let w = [1.0, 0.5, 2.0, 1.5];
        let lam = 0.4 * lambda_max(d.as_slice(), &design, &w);
        let fit = fit_group_lasso(d.as_slice(), &design, lam, &w, &defaults, None).unwrap();
        let c = q.tr_mul(&d);
        for (j, g) in blocks(&sizes).into_iter().enumerate() {
            let cj = c.rows(g.start, g.len());
            let shrink = (1.0 - lam * w[j] / (2.0 * cj.norm())).max(0.0);
            for (k, col) in g.enumerate() {
                worst_closed = worst_closed.max((fit.gamma[col] - shrink * cj[k]).abs());
            }
        }
        let (l1, l2) = (rng.random_range(0.5..4.0), rng.random_range(0.0..3.0));
        let fit = fit_elastic_net(&d, &q, l1, l2, &[1.0; 10], &defaults).unwrap();
        for j in 0..10 {
            let soft = c[j].signum() * (c[j].abs() - l1 / 2.0).max(0.0);
            worst_closed = worst_closed.max((fit.raw[j] - soft / (1.0 + l2)).abs());
            let rescaled = soft / (1.0 + l2) * (1.0 + l2 / n as f64);
            worst_closed = worst_closed.max((fit.alpha[j] - rescaled).abs());
        }
    }
    let b = worst_closed <= 1e-8;

    // (c) no penalty gives least squares
    let mut worst_ls: f64 = 0.0;
    for _ in 0..20 {
        let n = 60;
        let sizes = [3, 2, 4, 1];
        let x = gaussian(&mut rng, n, 10);
        let d = gvec(&mut rng, n);
        let ls = x.clone().svd(true, true).solve(&d, 1e-14).unwrap();
        let design = BlockDesign::new(x.clone(), blocks(&sizes)).unwrap();
        let fit = fit_group_lasso(d.as_slice(), &design, 0.0, &[1.0; 4], &tight, None).unwrap();
        let enet = fit_elastic_net(&d, &x, 0.0, 0.0, &[1.0; 10], &tight).unwrap();
        for j in 0..10 {
            worst_ls = worst_ls.max((fit.gamma[j] - ls[j]).abs()).max((enet.alpha[j] - ls[j]).abs());
        }
    }
    let c = worst_ls <= 1e-8;

    // (d) elastic net against the exhaustive sign-pattern oracle
    let mut worst_oracle: f64 = 0.0;
    for _ in 0..50 {
        let n = 25;
        let z = gaussian(&mut rng, n, 6);
        let y = gvec(&mut rng, n) * 3.0;
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(0.2..3.0)).collect();
        let l1 = rng.random_range(1.0..20.0);
        let l2 = rng.random_range(0.0..5.0);
        let fit = fit_elastic_net(&y, &z, l1, l2, &w, &tight).unwrap();
        let oracle = sign_pattern_oracle(&y, &z, l1, l2, &w);
        for j in 0..6 {
            worst_oracle = worst_oracle.max((fit.raw[j] - oracle[j]).abs());
        }
    }
    let d = worst_oracle <= 1e-8;

    let secs = t.elapsed().as_secs_f64();
    verdict(
        a && b && c && d && secs <= 60.0,
        format!(
            "(a) KKT group {worst_group:.1e} enet {worst_enet:.1e} (<= 1e-6, all converged: {all_converged}); \
             (b) closed forms {worst_closed:.1e}; (c) least squares {worst_ls:.1e}; \
             (d) sign-pattern oracle {worst_oracle:.1e} (each <= 1e-8); {secs:.1}s (<= 60s)"
        ),
    )
}

fn criterion_7(runs: &mut Runs) -> Verdict {
    let cfg = SimConfig {
        reps: 500,
        ..SimConfig::new(500, 100, 10, 10, 7, Model::Linear)
    };
    let r = runs.get("linear-s2-10-n500", cfg);
    let ours = r.summary(R2ive).unwrap();
    let cov = ours.coverage.unwrap_or(0.0);
    verdict(
        (0.90..=0.98).contains(&cov),
        format!(
            "coverage of beta_hat +- 1.96 se {cov:.3} (in [0.90, 0.98]); mean se {:.4}, sd {:.4}",
            ours.mean_se.unwrap_or(f64::NAN),
            ours.std_dev
        ),
    )
}

fn criterion_8(workers: usize) -> Verdict {
    let mut cfg = SimConfig::preset("nonlinear-s2-20-n200").unwrap();
    cfg.reps = 6;
    cfg.seed = 8;
    let config = R2iveConfig::default();
    let render = |w: usize| {
        let report = run_monte_carlo(&cfg, &EstimatorTag::ALL, &config, w).unwrap();
        [ReportStyle::Markdown, ReportStyle::Csv, ReportStyle::Json]
            .map(|s| format_report(&report, s).unwrap())
    };
    let first = render(1);
    let same = render(1) == first && render(workers.max(2)) == first;
    verdict(same, format!("3 renderings x 3 runs (1, 1 and {} workers) byte-identical: {same}", workers.max(2)))
}

fn main() -> ExitCode {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut runs = Runs {
        workers,
        cache: BTreeMap::new(),
    };
    // bare numbers on the command line select criteria; flags from the test
    // runner are ignored
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |k: usize| picked.is_empty() || picked.contains(&k);
    let mut verdicts: Vec<(usize, Verdict)> = Vec::new();
    // cheap criteria first
    for k in [6, 8, 1, 2, 3, 4, 5, 7] {
        if !wanted(k) {
            continue;
        }
        let v = match k {
            1 => criterion_1(&mut runs),
            2 => criterion_2(&mut runs),
            3 => criterion_3(&mut runs),
            4 => criterion_4(&mut runs),
            5 => criterion_5(&mut runs),
            6 => criterion_6(),
            7 => criterion_7(&mut runs),
            _ => criterion_8(workers),
        };
        println!("{} criterion {k}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        verdicts.push((k, v));
    }

    verdicts.sort_by_key(|(k, _)| *k);
    println!();
    for (k, v) in &verdicts {
        println!("{} criterion {k}", if v.pass { "PASS" } else { "FAIL" });
    }
    let failed = verdicts.iter().filter(|(_, v)| !v.pass).count();
    println!("{} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
