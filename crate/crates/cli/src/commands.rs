use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use georls::behavior::{behavior_dimension, identify_subspace, BehaviorEstimate};
use georls::control::{
    identification_error, identify as identify_system, nominal_controller, receding_horizon, ClosedLoopLog,
    ControlConfig, NoiseModel, NoiseScale,
};
use georls::io;
use georls::oracle::{dense_top_k, random_problem, random_vector, verify as run_verify, SelectorFamily, VerifyOptions};
use georls::solver::{build_a, solve as run_solve, top_k_eigs, SolverResult};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{echo, load_control, load_solve};
use crate::{BenchArgs, CliResult, Common, ControlArgs, Failure, IdentifyArgs, Selectors, SolveArgs, VerifyArgs};

/// One output directory per seed when repeating.
fn run_dirs(common: &Common, base_seed: u64) -> Vec<(u64, PathBuf)> {
    (0..common.repeat)
        .map(|i| {
            let seed = base_seed + i;
            let dir = if common.repeat == 1 {
                common.out.clone()
            } else {
                common.out.join(format!("seed_{seed}"))
            };
            (seed, dir)
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Usage(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

/// Runs `f` for each seed and returns the first failure, if any, after all finished.
fn for_each_seed<T: Send>(
    runs: Vec<(u64, PathBuf)>,
    f: impl Fn(u64, &Path) -> CliResult<T> + Sync + Send,
) -> CliResult<Vec<T>> {
    let results: Vec<CliResult<T>> = runs.par_iter().map(|(seed, dir)| f(*seed, dir)).collect();
    results.into_iter().collect()
}

pub fn identify(common: &Common, args: &IdentifyArgs) -> CliResult<()> {
    let base = load_control(common, &args.system)?;
    let sys = base.system.build()?;
    let data = match &args.data {
        Some(path) => Some(io::read_trajectory(fs::File::open(path)?)?),
        None => None,
    };
    let runs = run_dirs(common, base.seed);
    for_each_seed(runs, |seed, dir| {
        let cfg = ControlConfig { seed, ..base.clone() };
        echo(dir, &cfg)?;
        let estimate = match &data {
            Some(w) => {
                let k = args
                    .k
                    .unwrap_or_else(|| behavior_dimension(sys.m(), sys.n_x(), cfg.depth()));
                let est = identify_subspace(w, cfg.depth(), k)?;
                println!(
                    "seed {seed}: identified Gr({k}, {}) from {} samples",
                    est.subspace.n_amb(),
                    w.len()
                );
                est
            }
            None => {
                let id = identify_system(&sys, &cfg, cfg.sigma)?;
                io::write_trajectory(io::create(&dir.join("identification.csv"))?, &id.data.measured)?;
                let err = identification_error(&sys, &id.estimate)?;
                println!(
                    "seed {seed}: GPE rank {}/{} after {} draw(s); noise std {:.4} (output RMS {:.3}); k = {}; chordal error to model behavior {err:.3e}",
                    id.gpe.rank,
                    id.gpe.expected,
                    id.attempts,
                    id.noise.std_dev(),
                    id.output_rms,
                    id.estimate.k()
                );
                id.estimate
            }
        };
        io::save_estimate(&dir.join("estimate.json"), &estimate)?;
        write_singular_values(&dir.join("singular_values.csv"), &estimate)?;
        Ok(())
    })?;
    Ok(())
}

fn write_singular_values(path: &Path, est: &BehaviorEstimate) -> CliResult<()> {
    let mut text = String::from("index,value\n");
    for (i, s) in est.singular_values.iter().enumerate() {
        text.push_str(&format!("{},{s}\n", i + 1));
    }
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct SolutionReport<'a> {
    converged: bool,
    iterations: usize,
    cost: f64,
    gradnorm: f64,
    lambda_star: f64,
    distance: f64,
    radius: f64,
    boundary: bool,
    nonmonotone_steps: usize,
    degenerate_events: usize,
    wall_time_s: f64,
    x_star: &'a [f64],
    w_star: &'a [f64],
}

fn write_solution(dir: &Path, res: &SolverResult, radius: f64, wall: Duration) -> CliResult<()> {
    io::write_solver_trace(io::create(&dir.join("trace.csv"))?, res)?;
    let report = SolutionReport {
        converged: res.converged,
        iterations: res.iterations,
        cost: res.inner.value,
        gradnorm: *res.gradnorm_trace.last().unwrap_or(&f64::NAN),
        lambda_star: res.inner.lambda_star,
        distance: res.inner.distance,
        radius,
        boundary: res.inner.boundary,
        nonmonotone_steps: res.nonmonotone_steps,
        degenerate_events: res.degenerate_events,
        wall_time_s: wall.as_secs_f64(),
        x_star: res.x_star.as_slice(),
        w_star: res.w_star.as_slice(),
    };
    write_json(&dir.join("solution.json"), &report)?;
    if !res.stationarity_trace.is_empty() {
        let mut text = String::from("iter,residual,frobenius,spectral_radius\n");
        for (i, s) in res.stationarity_trace.iter().enumerate() {
            text.push_str(&format!("{i},{},{},{}\n", s.residual, s.frobenius, s.spectral_radius));
        }
        fs::write(dir.join("stationarity.csv"), text)?;
    }
    Ok(())
}

pub fn solve(common: &Common, args: &SolveArgs) -> CliResult<()> {
    let mut base = load_solve(common)?;
    let center = match &args.estimate {
        Some(p) => {
            let est = io::load_estimate(p)?;
            base.n = est.subspace.n_amb();
            base.k = est.k();
            Some(est.subspace)
        }
        None => None,
    };
    let runs = run_dirs(common, base.seed);
    let outcomes = for_each_seed(runs, |seed, dir| {
        let cfg = crate::config::SolveConfig { seed, ..base.clone() };
        echo(dir, &cfg)?;
        let prob = cfg.problem(center.as_ref())?;
        let opts = georls::solver::SolverOptions {
            record_stationarity: args.stationarity,
            ..cfg.options()
        };
        let start = Instant::now();
        let res = run_solve(&prob, &opts)?;
        let wall = start.elapsed();
        write_solution(dir, &res, cfg.rho(), wall)?;
        println!(
            "seed {seed}: {} after {} iterations ({:.1} ms): cost {:.6e}, gradnorm {:.2e}, lambda* {:.4e}, d(Y*, Yhat) = {:.6} (rho {:.6})",
            if res.converged { "converged" } else { "NOT converged" },
            res.iterations,
            wall.as_secs_f64() * 1e3,
            res.inner.value,
            res.gradnorm_trace.last().unwrap_or(&f64::NAN),
            res.inner.lambda_star,
            res.inner.distance,
            cfg.rho()
        );
        Ok(res.converged)
    })?;
    let failed = outcomes.iter().filter(|c| !**c).count();
    if failed > 0 {
        return Err(Failure::Numerical(format!(
            "{failed} of {} solves stopped at max_iter without reaching tolx",
            outcomes.len()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct LoopSummary {
    seed: u64,
    settling_step: Option<usize>,
    terminal_error: f64,
    max_error_last_quarter: f64,
    mean_lambda: f64,
    nonconverged_steps: usize,
    total_iterations: usize,
}

fn summarize(seed: u64, log: &ClosedLoopLog) -> LoopSummary {
    let n = log.records.len();
    let last = &log.records[n - 1];
    let lambdas = log.lambda_trace();
    LoopSummary {
        seed,
        settling_step: log.settling_step(0.1),
        terminal_error: last
            .y_true
            .iter()
            .zip(&last.reference)
            .map(|(y, r)| (y - r).abs())
            .fold(0.0, f64::max),
        max_error_last_quarter: log.max_tracking_error(n - n / 4),
        mean_lambda: lambdas.iter().sum::<f64>() / n as f64,
        nonconverged_steps: log.records.iter().filter(|r| !r.converged).count(),
        total_iterations: log.records.iter().map(|r| r.iterations).sum(),
    }
}

fn write_loop(dir: &Path, stem: &str, log: &ClosedLoopLog) -> CliResult<()> {
    io::write_closed_loop(io::create(&dir.join(format!("{stem}.csv")))?, log)?;
    io::write_lambda_trace(io::create(&dir.join(format!("{stem}_lambda.csv")))?, log)?;
    Ok(())
}

fn print_summary(label: &str, s: &LoopSummary) {
    println!(
        "seed {} {label}: settling step (band 0.1) {}, terminal error {:.4}, max error over last quarter {:.4}, mean lambda* {:.4e}, {} non-converged steps",
        s.seed,
        s.settling_step.map_or("none".to_string(), |t| t.to_string()),
        s.terminal_error,
        s.max_error_last_quarter,
        s.mean_lambda,
        s.nonconverged_steps
    );
}

pub fn control(common: &Common, args: &ControlArgs) -> CliResult<()> {
    let base = load_control(common, &args.system)?;
    let sys = base.system.build()?;
    let loaded = match &args.estimate {
        Some(p) => Some(io::load_estimate(p)?),
        None => None,
    };
    let runs = run_dirs(common, base.seed);
    let rows = for_each_seed(runs, |seed, dir| {
        let cfg = ControlConfig { seed, ..base.clone() };
        echo(dir, &cfg)?;
        let (estimate, noise) = match (&loaded, cfg.noise_scale) {
            (Some(est), NoiseScale::Unit) => (est.clone(), NoiseModel::new(cfg.sigma, seed, 1.0)?),
            (Some(est), NoiseScale::IdentificationRms) => (est.clone(), identify_system(&sys, &cfg, cfg.sigma)?.noise),
            (None, _) => {
                let id = identify_system(&sys, &cfg, cfg.sigma)?;
                io::save_estimate(&dir.join("estimate.json"), &id.estimate)?;
                (id.estimate, id.noise)
            }
        };
        info!("seed {seed}: noise std {}", noise.std_dev());
        let log = receding_horizon(&sys, &estimate, &cfg, &noise)?;
        write_loop(dir, "closed_loop", &log)?;
        let robust = summarize(seed, &log);
        print_summary("robust ", &robust);
        let nominal = if args.no_nominal {
            None
        } else {
            let clean = identify_system(&sys, &cfg, 0.0)?;
            let log = nominal_controller(&sys, &clean.estimate, &cfg)?;
            write_loop(dir, "nominal", &log)?;
            let s = summarize(seed, &log);
            print_summary("nominal", &s);
            Some(s)
        };
        write_json(
            &dir.join("summary.json"),
            &serde_json::json!({ "robust": &robust, "nominal": &nominal }),
        )?;
        Ok((robust, nominal))
    })?;

    if common.repeat > 1 {
        let mut text = String::from(
            "seed,controller,settling_step,terminal_error,max_error_last_quarter,mean_lambda,nonconverged_steps\n",
        );
        for (r, n) in &rows {
            for (label, s) in [("robust", Some(r)), ("nominal", n.as_ref())] {
                if let Some(s) = s {
                    text.push_str(&format!(
                        "{},{label},{},{},{},{},{}\n",
                        s.seed,
                        s.settling_step.map_or(String::new(), |t| t.to_string()),
                        s.terminal_error,
                        s.max_error_last_quarter,
                        s.mean_lambda,
                        s.nonconverged_steps
                    ));
                }
            }
        }
        fs::create_dir_all(&common.out)?;
        fs::write(common.out.join("summary.csv"), text)?;
        let tail: Vec<f64> = rows.iter().map(|(r, _)| r.max_error_last_quarter).collect();
        println!(
            "{} runs: median max error over last quarter {:.4}, worst {:.4}",
            rows.len(),
            median(tail.clone()),
            tail.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct VerifyEcho {
    seed: u64,
    inject_fault: bool,
    instances: usize,
    selectors: String,
}

pub fn verify(common: &Common, args: &VerifyArgs) -> CliResult<()> {
    for (flag, set) in [
        ("--sigma", common.sigma.is_some()),
        ("--rho-deg", common.rho_deg.is_some()),
        ("--gamma", common.gamma.is_some()),
    ] {
        if set {
            log::warn!("{flag} is ignored by verify; the oracle suite sweeps its own parameters");
        }
    }
    if common.config.is_some() {
        log::warn!("--config is ignored by verify");
    }
    if args.instances == 0 {
        return Err(Failure::Usage("--instances must be at least 1".into()));
    }
    let selectors = match args.selectors {
        Selectors::Full => SelectorFamily::Full,
        Selectors::Partial => SelectorFamily::Partial,
        Selectors::Any => SelectorFamily::Any,
    };
    let runs = run_dirs(common, common.seed.unwrap_or(0));
    let reports = for_each_seed(runs, |seed, dir| {
        let opts = VerifyOptions {
            seed,
            inject_fault: args.inject_fault,
            instances: args.instances,
            selectors,
        };
        echo(
            dir,
            &VerifyEcho {
                seed,
                inject_fault: args.inject_fault,
                instances: args.instances,
                selectors: format!("{:?}", args.selectors).to_lowercase(),
            },
        )?;
        let report = run_verify(&opts)?;
        write_json(&dir.join("verify.json"), &report)?;
        Ok(report)
    })?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "seed {}{}:",
            r.seed,
            if r.fault_injected { " (fault injected)" } else { "" }
        );
        println!("{r}");
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Failure::Verification(format!(
            "{failed} of {} verification runs failed",
            reports.len()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    n: usize,
    k: usize,
    gamma: f64,
    rho: f64,
    tolx: f64,
    runs: usize,
    iterations: usize,
    converged: bool,
    wall_median_s: f64,
    wall_min_s: f64,
    per_iteration_us: f64,
    eig_s: f64,
    lambda_search_s: f64,
    gradient_s: f64,
    eig_comparison: Option<EigComparison>,
}

#[derive(Serialize)]
struct EigComparison {
    n: usize,
    k: usize,
    structured_ms: f64,
    dense_ms: f64,
    chordal_difference: f64,
}

fn eig_comparison(seed: u64) -> CliResult<EigComparison> {
    let (n, k) = (140, 108);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prob = random_problem(n, k, 4.0, 0.3, SelectorFamily::Partial, &mut rng)?;
    let x = random_vector(n, &mut rng);
    let a = build_a(&x, &prob);
    let center = prob.ball().center();
    let reps = 50u32;
    let t = Instant::now();
    let mut fast = None;
    for _ in 0..reps {
        fast = Some(top_k_eigs(&a, 3.0, center).0);
    }
    let structured = t.elapsed() / reps;
    let t = Instant::now();
    let mut dense = None;
    for _ in 0..reps {
        dense = Some(dense_top_k(&a, 3.0, center)?.0);
    }
    let dense_t = t.elapsed() / reps;
    let d = georls::manifold::chordal_distance(&fast.expect("reps > 0"), &dense.expect("reps > 0"))?;
    Ok(EigComparison {
        n,
        k,
        structured_ms: structured.as_secs_f64() * 1e3,
        dense_ms: dense_t.as_secs_f64() * 1e3,
        chordal_difference: d,
    })
}

pub fn bench(common: &Common, args: &BenchArgs) -> CliResult<()> {
    let cfg = crate::config::SolveConfig {
        tolx: args.tolx,
        ..load_solve(common)?
    };
    echo(&common.out, &cfg)?;
    let prob = cfg.problem(None)?;
    let opts = cfg.options();
    // Timed sequentially so runs do not compete for cores.
    let mut walls = Vec::new();
    let mut last = None;
    for _ in 0..common.repeat {
        let start = Instant::now();
        let res = run_solve(&prob, &opts)?;
        walls.push(start.elapsed());
        last = Some(res);
    }
    let res = last.expect("repeat >= 1");
    let median = Duration::from_secs_f64(median(walls.iter().map(Duration::as_secs_f64).collect()));
    io::write_solver_trace(io::create(&common.out.join("trace.csv"))?, &res)?;
    let eig = if args.no_eig {
        None
    } else {
        Some(eig_comparison(cfg.seed)?)
    };
    let report = BenchReport {
        n: cfg.n,
        k: cfg.k,
        gamma: cfg.gamma,
        rho: cfg.rho(),
        tolx: cfg.tolx,
        runs: walls.len(),
        iterations: res.iterations,
        converged: res.converged,
        wall_median_s: median.as_secs_f64(),
        wall_min_s: walls.iter().min().expect("repeat >= 1").as_secs_f64(),
        per_iteration_us: median.as_secs_f64() * 1e6 / (res.iterations + 1) as f64,
        eig_s: res.timings.eig.as_secs_f64(),
        lambda_search_s: res.timings.lambda_search.as_secs_f64(),
        gradient_s: res.timings.gradient.as_secs_f64(),
        eig_comparison: eig,
    };
    write_json(&common.out.join("bench.json"), &report)?;
    println!(
        "Gr({}, {}) gamma={} rho={:.4}: {} iterations to gradnorm {:.1e} ({}), median wall {:.2} ms over {} run(s), {:.1} us/iteration",
        report.k,
        report.n,
        report.gamma,
        report.rho,
        report.iterations,
        report.tolx,
        if report.converged { "converged" } else { "not converged" },
        report.wall_median_s * 1e3,
        report.runs,
        report.per_iteration_us
    );
    println!(
        "  phases: eigen {:.2} ms, multiplier search {:.2} ms, gradient {:.2} ms",
        report.eig_s * 1e3,
        report.lambda_search_s * 1e3,
        report.gradient_s * 1e3
    );
    if let Some(e) = &report.eig_comparison {
        println!(
            "  top-k at n={} k={}: structured {:.3} ms vs dense {:.3} ms per call ({:.1}x), subspaces agree to {:.1e}",
            e.n,
            e.k,
            e.structured_ms,
            e.dense_ms,
            e.dense_ms / e.structured_ms,
            e.chordal_difference
        );
    }
    if !res.converged {
        return Err(Failure::Numerical(format!(
            "bench solve stopped after {} iterations above tolx",
            res.iterations
        )));
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 0 {
        0.5 * (v[mid - 1] + v[mid])
    } else {
        v[mid]
    }
}
