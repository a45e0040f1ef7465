//! Brute-force cross-checks for the closed-form solver.
//!
//! Nothing in the solver depends on this module; it exists for tests and the
//! `verify` command.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::manifold::{chordal_distance, gap_distance, orthonormalize, StiefelPoint, SubspaceBall};
use crate::solver::{
    build_a, find_lambda, grad_x, stationarity_residual, top_k_eigs, RankTwoSym, ReducedPencil, RobustLsqProblem,
    Selector, SolverOptions, Spectrum,
};

/// Exhaustive grid over lines in `R^n`, `n ≤ 4`, by hyperspherical angles.
///
/// The first `n − 2` angles run over `[0, π]` inclusive and the last over
/// `[0, 2π)`; for `n = 2` the single angle runs over `[0, π)`, which already
/// covers every line once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct GridSpec {
    pub resolution: usize,
    pub n_amb: usize,
}

impl GridSpec {
    pub fn new(n_amb: usize, resolution: usize) -> Result<Self> {
        if !(2..=4).contains(&n_amb) {
            return Err(Error::InvalidParameter(format!(
                "grid oracle supports 2 <= n <= 4, got {n_amb}"
            )));
        }
        if resolution < 100 {
            return Err(Error::InvalidParameter(format!(
                "grid resolution {resolution} below 100"
            )));
        }
        Ok(Self { resolution, n_amb })
    }

    /// `10⁴` lines for `n = 2`, 100 points per angle otherwise.
    pub fn standard(n_amb: usize) -> Result<Self> {
        Self::new(n_amb, if n_amb == 2 { 10_000 } else { 100 })
    }

    fn steps(&self) -> Vec<f64> {
        let r = self.resolution as f64;
        let n = self.n_amb;
        if n == 2 {
            return vec![std::f64::consts::PI / r];
        }
        let mut h = vec![std::f64::consts::PI / (r - 1.0); n - 2];
        h.push(2.0 * std::f64::consts::PI / r);
        h
    }

    pub fn len(&self) -> usize {
        self.resolution.pow(self.n_amb as u32 - 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Upper bound on the angle from any unit vector to its nearest grid point.
    ///
    /// Each hyperspherical angle moves the point at unit speed at most, so
    /// the bound is half the sum of the angular steps.
    pub fn covering_radius(&self) -> f64 {
        0.5 * self.steps().iter().sum::<f64>()
    }

    /// Unit vector for the flat grid index `idx`.
    pub fn point(&self, idx: usize) -> DVector<f64> {
        let n = self.n_amb;
        let r = self.resolution;
        let h = self.steps();
        let mut angles = Vec::with_capacity(n - 1);
        let mut rest = idx;
        for step in h.iter() {
            angles.push((rest % r) as f64 * step);
            rest /= r;
        }
        let mut v = DVector::zeros(n);
        let mut s = 1.0;
        for (i, a) in angles.iter().enumerate() {
            v[i] = s * a.cos();
            s *= a.sin();
        }
        v[n - 1] = s;
        v
    }
}

/// Lipschitz constant of `θ ↦ f(x, span(v(θ)))` along unit-speed curves on the sphere.
///
/// `d/dθ (v vᵀ x)` has norm at most `‖x‖`, and the residual is bounded by
/// `‖x‖ + ‖b‖`, so `|df/dθ| ≤ 2(1 + γ)‖x‖(‖x‖ + ‖b‖) + 2μ·0`.
pub fn angular_lipschitz(x: &DVector<f64>, prob: &RobustLsqProblem) -> f64 {
    2.0 * (1.0 + prob.gamma()) * x.norm() * (x.norm() + prob.b().norm())
}

/// Worst-case error of the grid maximum: a feasible grid point lies within
/// twice the covering radius of any maximiser (step towards the center first).
pub fn grid_error_bound(x: &DVector<f64>, prob: &RobustLsqProblem, grid: &GridSpec) -> f64 {
    angular_lipschitz(x, prob) * 2.0 * grid.covering_radius()
}

#[derive(Clone, Debug)]
pub struct GridMax {
    pub best: StiefelPoint,
    pub value: f64,
    /// Grid lines inside the ball.
    pub feasible: usize,
}

/// Maximises `f(x, ·)` over every grid line inside the ball.
pub fn brute_force_inner_max(x: &DVector<f64>, prob: &RobustLsqProblem, grid: &GridSpec) -> Result<GridMax> {
    let center = prob.ball().center();
    if center.k() != 1 || center.n_amb() != grid.n_amb || x.len() != grid.n_amb {
        return Err(Error::DimensionMismatch(format!(
            "grid over lines in R^{}, ball in Gr({}, {}), x in R^{}",
            grid.n_amb,
            center.k(),
            center.n_amb(),
            x.len()
        )));
    }
    let yh = center.basis().column(0).into_owned();
    let rho2 = prob.ball().radius().powi(2);
    let b = prob.b();
    let gamma = prob.gamma();
    let mu_term = prob.mu() * x.norm_squared();
    let rows = prob.selector().rows();
    let mut best = (f64::NEG_INFINITY, 0usize);
    let mut feasible = 0;
    for idx in 0..grid.len() {
        let v = grid.point(idx);
        let c = v.dot(&yh);
        // d² = 1 − (vᵀŷ)² for lines.
        if 1.0 - c * c > rho2 {
            continue;
        }
        feasible += 1;
        let s = v.dot(x);
        let r = v * s - b;
        let mr: f64 = rows.iter().map(|&i| r[i] * r[i]).sum();
        let f = r.norm_squared() + gamma * mr + mu_term;
        if f > best.0 {
            best = (f, idx);
        }
    }
    if feasible == 0 {
        return Err(Error::InvalidParameter(
            "no grid line falls inside the ball; raise the resolution".into(),
        ));
    }
    let v = grid.point(best.1);
    Ok(GridMax {
        best: StiefelPoint::new(DMatrix::from_column_slice(v.len(), 1, v.as_slice()))?,
        value: best.0,
        feasible,
    })
}

/// Central differences `(g(x + h eᵢ) − g(x − h eᵢ)) / 2h`.
pub fn fd_gradient<F: FnMut(&DVector<f64>) -> f64>(mut objective: F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let xi = probe[i];
        probe[i] = xi + h;
        let fp = objective(&probe);
        probe[i] = xi - h;
        let fm = objective(&probe);
        probe[i] = xi;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// The robust objective `x ↦ f(x, Y*(x))` evaluated through the closed form.
pub fn robust_objective(x: &DVector<f64>, prob: &RobustLsqProblem, opts: &SolverOptions) -> Result<f64> {
    let a = build_a(x, prob);
    Ok(find_lambda(x, &a, prob, opts)?.value)
}

/// Top-`k` invariant subspace of `A + λŶŶᵀ` from a dense symmetric
/// eigendecomposition, and the gap between the k-th and (k+1)-th eigenvalues.
pub fn dense_top_k(a: &RankTwoSym, lambda: f64, y_hat: &StiefelPoint) -> Result<(StiefelPoint, f64)> {
    let n = y_hat.n_amb();
    let k = y_hat.k();
    let b = a.dense() + y_hat.basis() * y_hat.basis().transpose() * lambda;
    let eig = SymmetricEigen::new(b);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let cols: Vec<_> = idx[..k]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();
    let gap = if k < n {
        eig.eigenvalues[idx[k - 1]] - eig.eigenvalues[idx[k]]
    } else {
        f64::INFINITY
    };
    Ok((orthonormalize(&DMatrix::from_columns(&cols))?, gap))
}

/// Chordal distance between the structured and the dense top-`k` subspaces.
pub fn dense_eig_crosscheck(a: &RankTwoSym, lambda: f64, y_hat: &StiefelPoint) -> Result<f64> {
    if y_hat.n_amb() > 512 {
        return Err(Error::InvalidParameter(format!(
            "dense cross-check limited to n <= 512, got {}",
            y_hat.n_amb()
        )));
    }
    let (structured, _) = top_k_eigs(a, lambda, y_hat);
    let (dense, _) = dense_top_k(a, lambda, y_hat)?;
    chordal_distance(&structured, &dense)
}

/// Spectral gap of `A + λŶŶᵀ` at position `k`, from the reduced spectrum.
pub fn spectral_gap(a: &RankTwoSym, lambda: f64, y_hat: &StiefelPoint) -> f64 {
    let pencil = ReducedPencil::new(a, y_hat);
    let spec: Spectrum = pencil.spectrum(lambda);
    let values = spec.values();
    let k = y_hat.k();
    if values.len() <= k {
        return f64::INFINITY;
    }
    values[k - 1] - values[k]
}

/// Random selector of `l` distinct rows out of `n`.
pub fn random_selector<R: Rng + ?Sized>(n: usize, l: usize, rng: &mut R) -> Selector {
    let rows = rand::seq::index::sample(rng, n, l).into_vec();
    Selector::new(n, rows).expect("distinct rows in range")
}

pub fn random_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| Distribution::<f64>::sample(&StandardNormal, rng)))
}

/// Which family of selectors `M` random instances draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorFamily {
    /// `M = I`: every coordinate penalised.
    Full,
    /// A uniformly random number `1 ≤ l < n` of random rows.
    Partial,
    /// Either of the above, or empty.
    Any,
}

pub fn random_problem<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    gamma: f64,
    rho: f64,
    family: SelectorFamily,
    rng: &mut R,
) -> Result<RobustLsqProblem> {
    let y_hat = StiefelPoint::random(n, k, rng);
    let l = match family {
        SelectorFamily::Full => n,
        SelectorFamily::Partial => rng.random_range(1..n),
        SelectorFamily::Any => rng.random_range(0..=n),
    };
    let sel = random_selector(n, l, rng);
    RobustLsqProblem::new(SubspaceBall::new(y_hat, rho)?, random_vector(n, rng), sel, gamma, 0.0)
}

/// Outcome of one named check in the verification suite.
#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub failures: usize,
    /// Largest observed violation, in the check's own units.
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:<28} cases={:<5} failures={:<4} worst={:.3e} tol={:.1e}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.failures,
            self.worst,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub fault_injected: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        write!(
            f,
            "{} ({} of {} checks passed)",
            if self.passed() { "OK" } else { "FAILED" },
            self.checks.iter().filter(|c| c.passed).count(),
            self.checks.len()
        )
    }
}

/// Gradient formula under test; swapped out by fault injection.
pub type GradFn = fn(&DVector<f64>, &StiefelPoint, &RobustLsqProblem) -> Result<DVector<f64>>;

/// The analytic gradient with the sign of the consistency term flipped.
pub fn faulty_grad_x(x: &DVector<f64>, y: &StiefelPoint, prob: &RobustLsqProblem) -> Result<DVector<f64>> {
    let mirrored = RobustLsqProblem::new(
        prob.ball().clone(),
        prob.b().clone(),
        prob.selector().clone(),
        0.0,
        prob.mu(),
    )?;
    let plain = grad_x(x, y, &mirrored)?;
    let full = grad_x(x, y, prob)?;
    Ok(&plain * 2.0 - full)
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Replace the gradient formula by [`faulty_grad_x`].
    pub inject_fault: bool,
    pub instances: usize,
    /// Selector family for checks whose outcome depends on `M`.
    pub selectors: SelectorFamily,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            inject_fault: false,
            instances: 50,
            selectors: SelectorFamily::Full,
        }
    }
}

struct Tally {
    name: &'static str,
    tolerance: f64,
    cases: usize,
    failures: usize,
    worst: f64,
}

impl Tally {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            cases: 0,
            failures: 0,
            worst: 0.0,
        }
    }

    /// Records one case with violation `excess` (≤ 0 means satisfied).
    fn record(&mut self, violation: f64, ok: bool) {
        self.cases += 1;
        if !ok {
            self.failures += 1;
        }
        if violation > self.worst || violation.is_nan() {
            self.worst = violation;
        }
    }

    fn finish(self, detail: impl Into<String>) -> CheckResult {
        CheckResult {
            name: self.name.into(),
            passed: self.failures == 0 && self.cases > 0,
            cases: self.cases,
            failures: self.failures,
            worst: self.worst,
            tolerance: self.tolerance,
            detail: detail.into(),
        }
    }
}

/// Grid sandwich for `k = 1`: the closed-form value is feasible-optimal up to
/// the grid error bound, and never below the grid maximum by more than `1e-3`.
pub fn check_inner_max(opts: &VerifyOptions, n: usize, gamma: f64, rho: f64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (n as u64) << 8 ^ gamma.to_bits() ^ rho.to_bits());
    let grid = GridSpec::standard(n)?;
    let solver = SolverOptions::default();
    let mut t = Tally::new("inner_max_grid_sandwich", 1e-3);
    let mut max_ratio: f64 = 0.0;
    for _ in 0..opts.instances {
        let prob = random_problem(n, 1, gamma, rho, opts.selectors, &mut rng)?;
        let x = random_vector(n, &mut rng);
        let closed = find_lambda(&x, &build_a(&x, &prob), &prob, &solver)?;
        let g = brute_force_inner_max(&x, &prob, &grid)?;
        let eps = grid_error_bound(&x, &prob, &grid);
        let below = g.value - closed.value;
        let above = closed.value - g.value;
        max_ratio = max_ratio.max(above / eps);
        let ok = below <= 1e-3 && above <= eps;
        t.record(below.max(above - eps), ok);
    }
    Ok(t.finish(format!(
        "n={n} k=1 gamma={gamma} rho={rho:.4}; max (closed - grid)/eps = {max_ratio:.3}"
    )))
}

/// Relative error between the analytic gradient at `Y*(x)` and central
/// differences of the robust objective, skipping near-degenerate spectra.
pub fn check_gradient(opts: &VerifyOptions, grad: GradFn) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(101));
    // The multiplier must be resolved far below the difference step, or the
    // root-finding slack shows up as O(λ·tol/h) noise in the quotient.
    let solver = SolverOptions {
        lambda_tol: Some(1e-14),
        ..Default::default()
    };
    let tol = 1e-5;
    let mut t = Tally::new("gradient_vs_finite_diff", tol);
    let mut skipped = 0;
    while t.cases < opts.instances.max(1) * 2 {
        let (n, k) = [(6, 2), (10, 4), (15, 5)][t.cases % 3];
        let rho = rng.random_range(0.05..0.6);
        let prob = random_problem(n, k, 4.0, rho, opts.selectors, &mut rng)?;
        let x = random_vector(n, &mut rng);
        let a = build_a(&x, &prob);
        let inner = find_lambda(&x, &a, &prob, &solver)?;
        if inner.degenerate || spectral_gap(&a, inner.lambda_star, prob.ball().center()) < 1e-6 {
            skipped += 1;
            continue;
        }
        let analytic = grad(&x, &inner.y_star, &prob)?;
        let fd = fd_gradient(|z| robust_objective(z, &prob, &solver).unwrap_or(f64::NAN), &x, 1e-6);
        let rel = (&analytic - &fd).norm() / analytic.norm().max(1e-8);
        t.record(rel, rel <= tol);
    }
    Ok(t.finish(format!("gamma=4, skipped {skipped} near-degenerate points")))
}

/// Structured top-k against a dense eigensolver on random instances.
pub fn check_dense_eig(opts: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(202));
    let tol = 1e-8;
    let mut t = Tally::new("structured_vs_dense_eig", tol);
    let mut skipped = 0;
    while t.cases < opts.instances {
        let n = rng.random_range(2..=40);
        let k = rng.random_range(1..n);
        let prob = random_problem(n, k, 4.0, 0.3, SelectorFamily::Any, &mut rng)?;
        let x = random_vector(n, &mut rng);
        let a = build_a(&x, &prob);
        let lambda = rng.random_range(0.0..10.0);
        let (_, gap) = dense_top_k(&a, lambda, prob.ball().center())?;
        if gap < 1e-6 {
            skipped += 1;
            continue;
        }
        let d = dense_eig_crosscheck(&a, lambda, prob.ball().center())?;
        t.record(d, d <= tol);
    }
    Ok(t.finish(format!("n in [2, 40], skipped {skipped} instances without a gap")))
}

/// `d_gap ≤ d_chordal ≤ √k·d_gap` on random pairs.
pub fn check_metric_equivalence(opts: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(303));
    let mut t = Tally::new("metric_equivalence", 1e-12);
    for _ in 0..opts.instances {
        let n = rng.random_range(2..=20);
        let k = rng.random_range(1..=n);
        let y1 = StiefelPoint::random(n, k, &mut rng);
        let y2 = StiefelPoint::random(n, k, &mut rng);
        let c = chordal_distance(&y1, &y2)?;
        let g = gap_distance(&y1, &y2)?;
        let viol = (g - c).max(c - (k as f64).sqrt() * g);
        t.record(viol, viol <= 1e-12);
    }
    Ok(t.finish("random pairs, n <= 20"))
}

/// Complementary slackness and inner stationarity along random solves.
pub fn check_slackness(opts: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(404));
    let solver = SolverOptions::default();
    let mut t = Tally::new("slackness_and_stationarity", 1e-8);
    for _ in 0..opts.instances {
        let n = rng.random_range(3..=30);
        let k = rng.random_range(1..n);
        let rho = rng.random_range(0.0..(k as f64).sqrt() * 0.5);
        let prob = random_problem(n, k, 4.0, rho, opts.selectors, &mut rng)?;
        let x = random_vector(n, &mut rng);
        let a = build_a(&x, &prob);
        let inner = find_lambda(&x, &a, &prob, &solver)?;
        let lt = solver.lambda_tol(k);
        let slack = if inner.boundary {
            (inner.distance - rho).abs() - lt
        } else {
            (inner.distance - rho - lt).max(inner.lambda_star.abs())
        };
        let (r, scale) = stationarity_residual(&a, inner.lambda_star, prob.ball().center(), &inner.y_star);
        let stat = r - 1e-8 * scale;
        let ok = slack <= 1e-12 && stat <= 0.0;
        t.record(slack.max(stat), ok);
    }
    Ok(t.finish("random (n, k, rho), gamma=4"))
}

/// Runs every check; exits clean iff the closed-form solver agrees with all oracles.
pub fn verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let grad: GradFn = if opts.inject_fault { faulty_grad_x } else { grad_x };
    let mut checks = Vec::new();
    for n in 2..=4 {
        for gamma in [0.0, 4.0] {
            for deg in [10.0f64, 30.0] {
                checks.push(check_inner_max(opts, n, gamma, deg.to_radians().sin())?);
            }
        }
    }
    checks.push(check_gradient(opts, grad)?);
    checks.push(check_dense_eig(opts)?);
    checks.push(check_metric_equivalence(opts)?);
    checks.push(check_slackness(opts)?);
    Ok(VerifyReport {
        seed: opts.seed,
        fault_injected: opts.inject_fault,
        checks,
    })
}
