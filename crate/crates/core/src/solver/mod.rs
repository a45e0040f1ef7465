//! Robust least squares over a chordal ball on the Grassmannian:
//!
//! ```text
//! min_x  max_{d(Y, Ŷ) ≤ ρ}  ‖P_Y x − b‖² + γ‖M P_Y x − M b‖²  (+ μ‖x‖²)
//! ```
//!
//! The inner maximiser is the top-k eigenspace of `A(x; γ) + λ*·ŶŶᵀ`, with
//! λ* chosen so the maximiser sits on the ball boundary when the constraint
//! binds. The outer problem is convex and is solved by fixed-step gradient
//! descent.

mod multiplier;
mod structured;

use std::time::{Duration, Instant};

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{StiefelPoint, SubspaceBall};

pub use multiplier::{find_lambda, InnerSolution};
pub use structured::{build_a, top_k_eigs, RankTwoSym, ReducedPencil, Selection, Spectrum, TieRule, TIE_TOL};

/// Row selector `M` with `M·Mᵀ = I`: each row picks one distinct coordinate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selector {
    n: usize,
    rows: Vec<usize>,
}

impl Selector {
    pub fn new(n: usize, rows: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; n];
        for &r in &rows {
            if r >= n {
                return Err(Error::DimensionMismatch(format!(
                    "selector row {r} out of range for dimension {n}"
                )));
            }
            if std::mem::replace(&mut seen[r], true) {
                return Err(Error::InvalidParameter(format!("selector picks coordinate {r} twice")));
            }
        }
        Ok(Self { n, rows })
    }

    /// `[I_l 0]`.
    pub fn leading(l: usize, n: usize) -> Result<Self> {
        Self::new(n, (0..l).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `M·v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|&r| v[r]))
    }

    /// `MᵀM·v`: zeroes every coordinate the selector does not pick.
    pub fn mask(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for &r in &self.rows {
            out[r] = v[r];
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows.len(), self.n);
        for (i, &r) in self.rows.iter().enumerate() {
            m[(i, r)] = 1.0;
        }
        m
    }
}

/// One instance of the regularised robust least-squares problem.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustLsqProblem {
    ball: SubspaceBall,
    b: DVector<f64>,
    selector: Selector,
    gamma: f64,
    mu: f64,
}

impl RobustLsqProblem {
    pub fn new(ball: SubspaceBall, b: DVector<f64>, selector: Selector, gamma: f64, mu: f64) -> Result<Self> {
        let n = ball.center().n_amb();
        if b.len() != n || selector.n() != n {
            return Err(Error::DimensionMismatch(format!(
                "ambient dimension {n}, b has {}, selector acts on {}",
                b.len(),
                selector.n()
            )));
        }
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidParameter(format!("gamma = {gamma}")));
        }
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(Error::InvalidParameter(format!("mu = {mu}")));
        }
        Ok(Self {
            ball,
            b,
            selector,
            gamma,
            mu,
        })
    }

    pub fn ball(&self) -> &SubspaceBall {
        &self.ball
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn selector(&self) -> &Selector {
        &self.selector
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn n_amb(&self) -> usize {
        self.b.len()
    }

    pub fn with_b(&self, b: DVector<f64>) -> Result<Self> {
        Self::new(self.ball.clone(), b, self.selector.clone(), self.gamma, self.mu)
    }

    pub fn with_radius(&self, rho: f64) -> Result<Self> {
        let ball = SubspaceBall::new(self.ball.center().clone(), rho)?;
        Self::new(ball, self.b.clone(), self.selector.clone(), self.gamma, self.mu)
    }
}

/// Per-`√k` tolerance on the boundary distance. The robust value moves by
/// about `2λρ` per unit of distance error, so this bounds the value noise
/// well below the per-step monotonicity slack of `1e-10`.
pub const DEFAULT_LAMBDA_TOL: f64 = 1e-13;

/// What to do when `alpha` violates `alpha < 1/(1+γ)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPolicy {
    #[default]
    Strict,
    /// Warn and use `0.99/(1+γ)` instead.
    Clamp,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverOptions {
    pub alpha: f64,
    pub tolx: f64,
    pub max_iter: usize,
    /// Tolerance on `|d(Y*, Ŷ) − ρ|`; `None` means `DEFAULT_LAMBDA_TOL·√k`.
    pub lambda_tol: Option<f64>,
    pub x0: Option<DVector<f64>>,
    pub step_policy: StepPolicy,
    /// Record the inner stationarity residual at every iterate.
    #[serde(default)]
    pub record_stationarity: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            tolx: 1e-6,
            max_iter: 10_000,
            lambda_tol: None,
            x0: None,
            step_policy: StepPolicy::Strict,
            record_stationarity: false,
        }
    }
}

impl SolverOptions {
    pub fn lambda_tol(&self, k: usize) -> f64 {
        self.lambda_tol.unwrap_or(DEFAULT_LAMBDA_TOL * (k as f64).sqrt())
    }

    /// The step size actually used for a problem with penalty `gamma`.
    pub fn step_size(&self, gamma: f64) -> Result<f64> {
        let bound = 1.0 / (1.0 + gamma);
        if self.alpha > 0.0 && self.alpha < bound {
            return Ok(self.alpha);
        }
        match self.step_policy {
            StepPolicy::Strict => Err(Error::InvalidStepSize {
                alpha: self.alpha,
                bound,
            }),
            StepPolicy::Clamp => {
                warn!("step size {} outside (0, {bound}); clamping", self.alpha);
                Ok(0.99 * bound)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tolx > 0.0) {
            return Err(Error::InvalidParameter(format!("tolx = {}", self.tolx)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter = 0".into()));
        }
        if let Some(t) = self.lambda_tol {
            if !(t > 0.0) {
                return Err(Error::InvalidParameter(format!("lambda_tol = {t}")));
            }
        }
        Ok(())
    }
}

/// `‖(I − Y*Y*ᵀ)·B·Y*‖_F` at one iterate with two scales for it.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Stationarity {
    pub residual: f64,
    /// `‖B‖_F`.
    pub frobenius: f64,
    /// Largest absolute eigenvalue of `B`.
    pub spectral_radius: f64,
}

/// Wall time spent in each phase of [`solve`].
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct PhaseTimings {
    /// Reduction to the small pencil and materialising `Y*`.
    pub eig: Duration,
    /// Multiplier bracketing and bisection.
    pub lambda_search: Duration,
    pub gradient: Duration,
}

#[derive(Clone, Debug)]
pub struct SolverResult {
    pub x_star: DVector<f64>,
    pub inner: InnerSolution,
    /// `P_{Y*}·x*`.
    pub w_star: DVector<f64>,
    /// Gradient steps taken.
    pub iterations: usize,
    pub cost_trace: Vec<f64>,
    pub gradnorm_trace: Vec<f64>,
    pub lambda_trace: Vec<f64>,
    pub boundary_trace: Vec<bool>,
    /// Chordal distance of `Y*` from the ball center per iterate.
    pub distance_trace: Vec<f64>,
    /// Inner stationarity per iterate, when requested.
    pub stationarity_trace: Vec<Stationarity>,
    pub converged: bool,
    /// Steps where the robust cost rose by more than 1e-10.
    pub nonmonotone_steps: usize,
    /// Iterates whose inner maximiser sat on a tied eigenvalue.
    pub degenerate_events: usize,
    pub timings: PhaseTimings,
}

fn check_dims(x: &DVector<f64>, y: &StiefelPoint, prob: &RobustLsqProblem) -> Result<()> {
    if x.len() != prob.n_amb() || y.n_amb() != prob.n_amb() {
        return Err(Error::DimensionMismatch(format!(
            "x has {}, Y lives in R^{}, problem in R^{}",
            x.len(),
            y.n_amb(),
            prob.n_amb()
        )));
    }
    Ok(())
}

/// `P_Y·v` through the `k`-dimensional coefficients.
pub fn project(y: &StiefelPoint, v: &DVector<f64>) -> DVector<f64> {
    y.basis() * (y.basis().transpose() * v)
}

/// `f(x, Y) = ‖P_Y x − b‖² + γ‖M(P_Y x − b)‖² + μ‖x‖²`.
pub fn cost(x: &DVector<f64>, y: &StiefelPoint, prob: &RobustLsqProblem) -> Result<f64> {
    check_dims(x, y, prob)?;
    let r = project(y, x) - prob.b();
    let mr: f64 = prob.selector().rows().iter().map(|&i| r[i] * r[i]).sum();
    Ok(r.norm_squared() + prob.gamma() * mr + prob.mu() * x.norm_squared())
}

/// `∇ₓf = 2P_Y(x − b) + 2γ·P_Y·MᵀM(P_Y x − b) + 2μx`.
pub fn grad_x(x: &DVector<f64>, y: &StiefelPoint, prob: &RobustLsqProblem) -> Result<DVector<f64>> {
    check_dims(x, y, prob)?;
    let px = project(y, x);
    let mut g = (&px - project(y, prob.b())) * 2.0;
    if prob.gamma() != 0.0 && !prob.selector().is_empty() {
        let masked = prob.selector().mask(&(px - prob.b()));
        g += project(y, &masked) * (2.0 * prob.gamma());
    }
    if prob.mu() != 0.0 {
        g += x * (2.0 * prob.mu());
    }
    Ok(g)
}

/// `‖(I − Y*Y*ᵀ)·B(x, λ)·Y*‖_F` and `‖B‖_F`, the inner stationarity residual
/// and its natural scale.
pub fn stationarity_residual(a: &RankTwoSym, lambda: f64, y_hat: &StiefelPoint, y: &StiefelPoint) -> (f64, f64) {
    let yb = y.basis();
    let hb = y_hat.basis();
    let by = a.apply(yb) + hb * (hb.transpose() * yb) * lambda;
    let resid = &by - yb * (yb.transpose() * &by);
    // ‖A + λŶŶᵀ‖_F² = ‖A‖_F² + 2λ·tr(ŶᵀAŶ) + λ²k.
    let (e1, e2) = a.eigenvalues();
    let ay = a.apply(hb);
    let tr = (hb.transpose() * ay).trace();
    let b_fro_sq = e1 * e1 + e2 * e2 + 2.0 * lambda * tr + lambda * lambda * y_hat.k() as f64;
    (resid.norm(), b_fro_sq.max(0.0).sqrt())
}

/// Fixed-step gradient descent on `x ↦ f(x, Y*(x))`.
pub fn solve(prob: &RobustLsqProblem, opts: &SolverOptions) -> Result<SolverResult> {
    opts.validate()?;
    let alpha = opts.step_size(prob.gamma())?;
    let mut x = match &opts.x0 {
        Some(x0) if x0.len() != prob.n_amb() => {
            return Err(Error::DimensionMismatch(format!(
                "x0 has {}, problem in R^{}",
                x0.len(),
                prob.n_amb()
            )))
        }
        Some(x0) => x0.clone(),
        None => prob.b().clone(),
    };

    let mut timings = PhaseTimings::default();
    let mut cost_trace = Vec::new();
    let mut gradnorm_trace = Vec::new();
    let mut lambda_trace = Vec::new();
    let mut boundary_trace = Vec::new();
    let mut distance_trace = Vec::new();
    let mut stationarity_trace = Vec::new();
    let mut nonmonotone_steps = 0;
    let mut degenerate_events = 0;
    let mut iterations = 0;

    loop {
        let t0 = Instant::now();
        let a = build_a(&x, prob);
        let inner = find_lambda(&x, &a, prob, opts)?;
        let t1 = Instant::now();
        let g = grad_x(&x, &inner.y_star, prob)?;
        let t2 = Instant::now();
        // find_lambda interleaves both phases; attribute by probe count.
        let search = (t1 - t0).mul_f64(inner.evaluations as f64 / (inner.evaluations as f64 + 2.0));
        timings.lambda_search += search;
        timings.eig += (t1 - t0) - search;
        timings.gradient += t2 - t1;

        let gnorm = g.norm();
        if let Some(&prev) = cost_trace.last() {
            if inner.value > prev + 1e-10 {
                nonmonotone_steps += 1;
                warn!(
                    "robust cost increased at iteration {iterations}: {prev} -> {}",
                    inner.value
                );
            }
        }
        if inner.degenerate && inner.boundary {
            degenerate_events += 1;
        }
        cost_trace.push(inner.value);
        gradnorm_trace.push(gnorm);
        lambda_trace.push(inner.lambda_star);
        boundary_trace.push(inner.boundary);
        distance_trace.push(inner.distance);
        if opts.record_stationarity {
            let center = prob.ball().center();
            let (residual, frobenius) = stationarity_residual(&a, inner.lambda_star, center, &inner.y_star);
            let spectral_radius = ReducedPencil::new(&a, center).spectrum(inner.lambda_star).radius();
            stationarity_trace.push(Stationarity {
                residual,
                frobenius,
                spectral_radius,
            });
        }

        let converged = gnorm <= opts.tolx;
        if converged || iterations >= opts.max_iter {
            let w_star = project(&inner.y_star, &x);
            return Ok(SolverResult {
                x_star: x,
                inner,
                w_star,
                iterations,
                cost_trace,
                gradnorm_trace,
                lambda_trace,
                boundary_trace,
                distance_trace,
                stationarity_trace,
                converged,
                nonmonotone_steps,
                degenerate_events,
                timings,
            });
        }
        x.axpy(-alpha, &g, 1.0);
        iterations += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{chordal_distance, orthonormalize};
    use nalgebra::{dmatrix, dvector, SymmetricEigen};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
    }

    fn problem(y_hat: StiefelPoint, rho: f64, b: DVector<f64>, sel: Selector, gamma: f64) -> RobustLsqProblem {
        RobustLsqProblem::new(SubspaceBall::new(y_hat, rho).unwrap(), b, sel, gamma, 0.0).unwrap()
    }

    /// Rank-two factor whose dense form is the given 2×2 matrix `[[p, q], [q, r]]`
    /// with indefinite or semidefinite spectrum, built through a problem so the
    /// public surface is exercised.
    fn a_from(x: DVector<f64>, b: DVector<f64>) -> RankTwoSym {
        let n = x.len();
        let prob = problem(
            StiefelPoint::coordinate(n, 1).unwrap(),
            0.5,
            b,
            Selector::leading(0, n).unwrap(),
            0.0,
        );
        build_a(&x, &prob)
    }

    #[test]
    fn cost_examples() {
        let y = StiefelPoint::coordinate(2, 1).unwrap();
        let prob = problem(
            y.clone(),
            0.3,
            dvector![0.0, 1.0],
            Selector::leading(1, 2).unwrap(),
            1.0,
        );
        assert!((cost(&dvector![1.0, 0.0], &y, &prob).unwrap() - 3.0).abs() < 1e-14);

        let zero = problem(
            y.clone(),
            0.3,
            dvector![0.0, 0.0],
            Selector::leading(1, 2).unwrap(),
            4.0,
        );
        assert_eq!(cost(&dvector![0.0, 5.0], &y, &zero).unwrap(), 0.0);

        let x = dvector![2.0, -1.0];
        let on = problem(y.clone(), 0.3, project(&y, &x), Selector::leading(2, 2).unwrap(), 7.0);
        assert!(cost(&x, &y, &on).unwrap().abs() < 1e-14);

        let bad = dvector![1.0, 2.0, 3.0];
        assert!(matches!(cost(&bad, &y, &prob), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn selector_validation() {
        assert!(Selector::new(3, vec![0, 0]).is_err());
        assert!(Selector::new(3, vec![3]).is_err());
        let s = Selector::new(4, vec![2, 0]).unwrap();
        let m = s.to_dense();
        assert_eq!(&m * m.transpose(), DMatrix::identity(2, 2));
        let v = dvector![1.0, 2.0, 3.0, 4.0];
        assert_eq!(s.apply(&v), dvector![3.0, 1.0]);
        assert_eq!(s.mask(&v), m.transpose() * (&m * &v));
    }

    #[test]
    fn build_a_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let b = randn(n, &mut rng);
        let sel = Selector::new(n, vec![1, 4, 5]).unwrap();
        let y = StiefelPoint::random(n, 2, &mut rng);

        let prob = problem(y.clone(), 0.4, b.clone(), sel.clone(), 4.0);
        assert_eq!(build_a(&DVector::zeros(n), &prob).dense(), DMatrix::zeros(n, n));

        let p0 = problem(y.clone(), 0.4, b.clone(), sel.clone(), 0.0);
        let d = build_a(&b, &p0).dense() + &b * b.transpose();
        assert!(d.norm() < 1e-12);

        let x = randn(n, &mut rng);
        let a = build_a(&x, &prob).dense();
        let mtm = sel.to_dense().transpose() * sel.to_dense();
        let dense = &x * x.transpose() - &x * b.transpose() - &b * x.transpose()
            + (&x * x.transpose() - &mtm * &b * x.transpose() - &x * b.transpose() * &mtm) * 4.0;
        assert!((&a - &dense).amax() < 1e-12);
        assert!((&a - a.transpose()).amax() < 1e-15);
    }

    #[test]
    fn top_k_examples() {
        let y_hat = StiefelPoint::coordinate(3, 1).unwrap();
        // xxᵀ with x = e₁: u = x/2 gives x uᵀ + u xᵀ = xxᵀ.
        let a = a_from(dvector![1.0, 0.0], dvector![0.0, 0.0]);
        let (y, _) = top_k_eigs(&a, 0.0, &StiefelPoint::coordinate(2, 1).unwrap());
        assert!((y.basis()[(0, 0)].abs() - 1.0).abs() < 1e-14);

        // diag(1, 2, 0) = e₁e₁ᵀ + 2e₂e₂ᵀ is not rank-two-indefinite; realise it
        // as λŶŶᵀ + A with Ŷ = [e₁ e₂] scaled: A = e₂e₂ᵀ, λ = 1.
        let y2 = StiefelPoint::coordinate(3, 2).unwrap();
        let a = a_from(dvector![0.0, 1.0, 0.0], dvector![0.0, 0.0, 0.0]);
        let (y, _) = top_k_eigs(&a, 1.0, &y2);
        assert!(chordal_distance(&y, &y2).unwrap() < 1e-14);
        let _ = y_hat;
    }

    #[test]
    fn top_k_matches_dense_eigensolver() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let n = 8;
            let k = 3;
            let y_hat = StiefelPoint::random(n, k, &mut rng);
            let b = randn(n, &mut rng);
            let x = randn(n, &mut rng);
            let prob = problem(y_hat.clone(), 0.5, b, Selector::new(n, vec![0, 3, 6]).unwrap(), 4.0);
            let a = build_a(&x, &prob);
            let lambda = 0.3 * (trial + 1) as f64;
            let (y, degenerate) = top_k_eigs(&a, lambda, &y_hat);
            assert!(!degenerate);

            let dense = a.dense() + y_hat.basis() * y_hat.basis().transpose() * lambda;
            let eig = SymmetricEigen::new(dense);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
            let cols: Vec<_> = idx[..k]
                .iter()
                .map(|&i| eig.eigenvectors.column(i).into_owned())
                .collect();
            let reference = orthonormalize(&DMatrix::from_columns(&cols)).unwrap();
            assert!(chordal_distance(&y, &reference).unwrap() <= 1e-9, "trial {trial}");
        }
    }

    #[test]
    fn find_lambda_two_by_two_closed_form() {
        // [[0,1],[1,0]] = x uᵀ + u xᵀ with x = e₁, u = e₂.
        // In the builder, u = ½x − b for γ = 0, so b = ½e₁ − e₂.
        let x = dvector![1.0, 0.0];
        let b = dvector![0.5, -1.0];
        let y_hat = StiefelPoint::coordinate(2, 1).unwrap();
        let rho = 30f64.to_radians().sin();
        let prob = problem(y_hat.clone(), rho, b, Selector::leading(0, 2).unwrap(), 0.0);
        let a = build_a(&x, &prob);
        assert!((a.dense() - dmatrix![0.0, 1.0; 1.0, 0.0]).amax() < 1e-15);

        let sol = find_lambda(&x, &a, &prob, &SolverOptions::default()).unwrap();
        assert!(sol.boundary);
        assert!((sol.lambda_star - 2.0 / 3f64.sqrt()).abs() < 1e-7);
        assert!((sol.distance - rho).abs() <= 1e-8);
        let v = sol.y_star.basis().column(0);
        assert!((v[0].abs() - 30f64.to_radians().cos()).abs() < 1e-8);
    }

    #[test]
    fn find_lambda_degenerate_tie() {
        // diag(0, 1) = x uᵀ + u xᵀ needs rank one: x = e₂, u = ½e₂, b = 0.
        let x = dvector![0.0, 1.0];
        let b = dvector![0.0, 0.0];
        let y_hat = StiefelPoint::coordinate(2, 1).unwrap();
        let rho = 0.5;
        let prob = problem(y_hat, rho, b, Selector::leading(0, 2).unwrap(), 0.0);
        let a = build_a(&x, &prob);
        assert!((a.dense() - dmatrix![0.0, 0.0; 0.0, 1.0]).amax() < 1e-15);

        let sol = find_lambda(&x, &a, &prob, &SolverOptions::default()).unwrap();
        assert!(sol.boundary && sol.degenerate && sol.jump);
        assert!((sol.lambda_star - 1.0).abs() < 1e-9);
        assert!((sol.distance - 0.5).abs() < 1e-12);
        let v = sol.y_star.basis().column(0);
        assert!((v[0].abs() - 30f64.to_radians().cos()).abs() < 1e-12);
        assert!((v[1].abs() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn find_lambda_inactive_when_ball_covers_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, k) = (7, 3);
        let y_hat = StiefelPoint::random(n, k, &mut rng);
        let prob = problem(
            y_hat,
            (k as f64).sqrt(),
            randn(n, &mut rng),
            Selector::leading(2, n).unwrap(),
            4.0,
        );
        for _ in 0..10 {
            let x = randn(n, &mut rng);
            let sol = find_lambda(&x, &build_a(&x, &prob), &prob, &SolverOptions::default()).unwrap();
            assert_eq!(sol.lambda_star, 0.0);
            assert!(!sol.boundary);
        }
    }

    #[test]
    fn zero_radius_returns_center() {
        let y_hat = StiefelPoint::coordinate(4, 2).unwrap();
        let x = dvector![1.0, 2.0, 3.0, 4.0];
        let prob = problem(y_hat.clone(), 0.0, x.clone(), Selector::leading(2, 4).unwrap(), 4.0);
        let sol = find_lambda(&x, &build_a(&x, &prob), &prob, &SolverOptions::default()).unwrap();
        assert!(sol.boundary);
        assert_eq!(sol.distance, 0.0);
        assert_eq!(sol.y_star, y_hat);
    }

    #[test]
    fn grad_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 5;
        let y = StiefelPoint::random(n, 2, &mut rng);
        let b = randn(n, &mut rng);
        let p0 = problem(y.clone(), 0.2, b.clone(), Selector::leading(3, n).unwrap(), 0.0);
        assert!(grad_x(&b, &y, &p0).unwrap().amax() < 1e-15);

        let pz = problem(y.clone(), 0.2, DVector::zeros(n), Selector::leading(3, n).unwrap(), 4.0);
        assert_eq!(grad_x(&DVector::zeros(n), &y, &pz).unwrap(), DVector::zeros(n));

        // Fixed-Y gradient agrees with central differences of the cost.
        let prob = problem(y.clone(), 0.2, b, Selector::leading(3, n).unwrap(), 4.0);
        let x = randn(n, &mut rng);
        let g = grad_x(&x, &y, &prob).unwrap();
        for i in 0..n {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (cost(&xp, &y, &prob).unwrap() - cost(&xm, &y, &prob).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()));
        }
    }

    #[test]
    fn step_size_policy() {
        let strict = SolverOptions {
            alpha: 0.3,
            ..Default::default()
        };
        assert!(matches!(strict.step_size(4.0), Err(Error::InvalidStepSize { .. })));
        let clamp = SolverOptions {
            alpha: 0.3,
            step_policy: StepPolicy::Clamp,
            ..Default::default()
        };
        assert!((clamp.step_size(4.0).unwrap() - 0.99 / 5.0).abs() < 1e-15);
        assert_eq!(SolverOptions::default().step_size(4.0).unwrap(), 0.1);
    }

    #[test]
    fn solve_zero_radius_feasible_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, k) = (10, 4);
        let y_hat = StiefelPoint::random(n, k, &mut rng);
        let b = y_hat.basis() * randn(k, &mut rng);
        let prob = problem(y_hat.clone(), 0.0, b.clone(), Selector::leading(n, n).unwrap(), 4.0);
        let res = solve(&prob, &SolverOptions::default()).unwrap();
        assert!(res.converged);
        assert!((project(&y_hat, &res.x_star) - &b).norm() < 1e-6);
        assert!(*res.cost_trace.last().unwrap() < 1e-10);
    }

    #[test]
    fn solve_converges_with_monotone_cost_full_selector() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let (n, k) = (12, 5);
        let y_hat = StiefelPoint::random(n, k, &mut rng);
        let prob = problem(y_hat, 0.3, randn(n, &mut rng), Selector::leading(n, n).unwrap(), 4.0);
        let res = solve(&prob, &SolverOptions::default()).unwrap();
        assert!(res.converged);
        assert!(*res.gradnorm_trace.last().unwrap() <= 1e-6);
        assert_eq!(res.nonmonotone_steps, 0);
        assert!(res.inner.boundary);
        assert!((res.inner.distance - 0.3).abs() <= 1e-8 * (k as f64).sqrt());
        let a = build_a(&res.x_star, &prob);
        let (r, scale) = stationarity_residual(&a, res.inner.lambda_star, prob.ball().center(), &res.inner.y_star);
        assert!(r <= 1e-8 * scale.max(1.0), "residual {r}, scale {scale}");
    }
}
