//! Search for the ball multiplier λ* that puts the worst-case subspace on
//! the boundary of the chordal ball.

use log::{debug, warn};
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::manifold::{chordal_distance, gap_distance, orthonormalize, StiefelPoint};

use super::structured::{RankTwoSym, ReducedPencil, Selection, TieRule, TIE_TOL};
use super::{cost, RobustLsqProblem, SolverOptions};

/// Closed-form inner maximiser at a fixed `x`.
#[derive(Clone, Debug)]
pub struct InnerSolution {
    pub y_star: StiefelPoint,
    pub lambda_star: f64,
    /// Inner objective `f(x, Y*)`.
    pub value: f64,
    /// True iff the ball constraint is active.
    pub boundary: bool,
    /// Chordal distance of `Y*` from the ball center.
    pub distance: f64,
    /// k-th and (k+1)-th eigenvalues of `B(x, λ*)` tied.
    pub degenerate: bool,
    /// `d(λ)` crossed ρ discontinuously; `Y*` was rotated inside the tied eigenspace.
    pub jump: bool,
    /// Number of reduced eigenproblems solved.
    pub evaluations: usize,
}

const MAX_BISECTIONS: usize = 200;
const SCAN_POINTS: usize = 200;
/// Safety factor on the ε·‖B‖/gap eigenvector noise bound.
const NOISE_FACTOR: f64 = 1e3;
/// Relative k-th gap treated as an exact tie.
const NUMERICAL_TIE: f64 = 1e5 * f64::EPSILON;
/// Endpoint separation always bridged by interpolation at a collapsed bracket,
/// beyond the eigenvector noise bound.
const INTERPOLATION_SPAN: f64 = 1e-6;

struct Probe<'p, 'y> {
    pencil: &'p ReducedPencil<'y>,
    evaluations: usize,
}

impl Probe<'_, '_> {
    fn at(&mut self, lambda: f64) -> Selection {
        self.evaluations += 1;
        let spec = self.pencil.spectrum(lambda);
        self.pencil.select(&spec, TieRule::ClosestToCenter, TIE_TOL)
    }
}

/// Computes `Y*(x)` and `λ*` for `A = build_a(x, prob)`.
///
/// With ρ = 0 the ball is the single point Ŷ; no finite multiplier exists
/// and λ* is reported as 0 with `boundary = true`.
pub fn find_lambda(
    x: &DVector<f64>,
    a: &RankTwoSym,
    prob: &RobustLsqProblem,
    opts: &SolverOptions,
) -> Result<InnerSolution> {
    let y_hat = prob.ball().center();
    let rho = prob.ball().radius();
    let k = y_hat.k();
    let tol = opts.lambda_tol(k);

    let finish = |y: StiefelPoint, lambda: f64, boundary: bool, degenerate: bool, jump: bool, evals: usize| {
        let value = cost(x, &y, prob)?;
        let distance = chordal_distance(&y, y_hat)?;
        Ok(InnerSolution {
            y_star: y,
            lambda_star: lambda,
            value,
            boundary,
            distance,
            degenerate,
            jump,
            evaluations: evals,
        })
    };

    if rho == 0.0 {
        return finish(y_hat.clone(), 0.0, true, false, false, 0);
    }

    let pencil = ReducedPencil::new(a, y_hat);
    let mut probe = Probe {
        pencil: &pencil,
        evaluations: 0,
    };

    let sel0 = probe.at(0.0);
    if sel0.distance() <= rho + tol {
        let y = pencil.materialize(&sel0);
        return finish(y, 0.0, false, sel0.degenerate, false, probe.evaluations);
    }

    // Bracket: d(lo) > ρ + tol, d(hi) ≤ ρ + tol.
    let scale = a.spectral_norm().max(1.0);
    let mut lo = 0.0;
    let mut d_lo = sel0.distance();
    let mut hi = 1.0 + a.trace_norm();
    let mut sel_hi = probe.at(hi);
    while sel_hi.distance() > rho + tol {
        if hi > 1e12 * scale {
            return Err(Error::BracketFailure {
                lambda_hi: hi,
                distance: sel_hi.distance(),
                rho,
            });
        }
        lo = hi;
        d_lo = sel_hi.distance();
        hi *= 2.0;
        sel_hi = probe.at(hi);
    }
    if (sel_hi.distance() - rho).abs() <= tol {
        let y = pencil.materialize(&sel_hi);
        return finish(y, hi, true, sel_hi.degenerate, false, probe.evaluations);
    }
    let mut d_hi = sel_hi.distance();

    let mut scanned = false;
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let sel = probe.at(mid);
        let d = sel.distance();
        if (d - rho).abs() <= tol {
            let y = pencil.materialize(&sel);
            return finish(y, mid, true, sel.degenerate, false, probe.evaluations);
        }
        let slack = 1e-12 * (1.0 + d);
        if !scanned && (d > d_lo + slack || d < d_hi - slack) {
            warn!("d(lambda) not monotone on [{lo:e}, {hi:e}]: d(lo)={d_lo}, d(mid)={d}, d(hi)={d_hi}; scanning");
            scanned = true;
            (lo, d_lo, hi, d_hi) = log_scan(&mut probe, lo, hi, rho);
            continue;
        }
        if d > rho {
            lo = mid;
            d_lo = d;
        } else {
            hi = mid;
            d_hi = d;
        }
    }

    // The bracket collapsed to adjacent floats without reaching the tolerance.
    let spec = pencil.spectrum(hi);
    let radius = spec.radius().max(f64::MIN_POSITIVE);
    let h = probe.at(hi);
    let gap = (h.kth_value - h.next_value.unwrap_or(f64::NEG_INFINITY)).abs() / radius;
    // Eigenvector rounding moves d by about ε·‖B‖/gap; a larger step across
    // adjacent floats, or a gap at rounding level, is an eigenvalue crossing.
    let noise = NOISE_FACTOR * f64::EPSILON / gap.max(f64::EPSILON);
    if gap > NUMERICAL_TIE && (d_lo - d_hi).abs() <= noise.max(tol) {
        debug!("multiplier resolution limit at lambda={hi:e}: d(lo)={d_lo}, d(hi)={d_hi}, relative gap {gap:e}");
        let y_lo = pencil.materialize(&probe.at(lo));
        let y_hi = pencil.materialize(&h);
        if gap_distance(&y_lo, &y_hi)? <= INTERPOLATION_SPAN.max(noise) {
            // λ itself is resolved; bridge the last float step along the chord.
            let y = interpolate_to_radius(&y_lo, &y_hi, y_hat, rho, tol)?;
            return finish(y, hi, true, h.degenerate, false, probe.evaluations);
        }
        let (lambda, y, degenerate) = if (d_hi - rho).abs() <= (d_lo - rho).abs() {
            (hi, y_hi, h.degenerate)
        } else {
            (lo, y_lo, false)
        };
        return finish(y, lambda, true, degenerate, false, probe.evaluations);
    }

    // A genuine crossing: d jumps from above ρ to below ρ. Every subspace of
    // the tied eigenspace maximises the Lagrangian at this λ, so pick the one
    // at distance exactly ρ.
    debug!("multiplier jump at lambda={hi:e}: d(lo)={d_lo}, d(hi)={d_hi}");
    let gap_tol = TIE_TOL.max(4.0 * gap);
    let sel = pencil.select(&spec, TieRule::TargetDistanceSq(rho * rho), gap_tol);
    let y = pencil.materialize(&sel);
    finish(y, hi, true, true, true, probe.evaluations)
}

/// Point on the chord from `from` to `to` (bases Procrustes-aligned) at
/// distance ρ from the center; `d(from) > ρ > d(to)`.
fn interpolate_to_radius(
    from: &StiefelPoint,
    to: &StiefelPoint,
    center: &StiefelPoint,
    rho: f64,
    tol: f64,
) -> Result<StiefelPoint> {
    let svd = (from.basis().transpose() * to.basis()).svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let start = from.basis() * (u * v_t);
    let end = to.basis();
    let at = |t: f64| orthonormalize(&(&start * (1.0 - t) + end * t));
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = to.clone();
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let y = at(mid)?;
        let d = chordal_distance(&y, center)?;
        let done = (d - rho).abs() <= tol;
        if d > rho {
            lo = mid;
        } else {
            hi = mid;
        }
        best = y;
        if done {
            break;
        }
    }
    Ok(best)
}

/// Locates a sign change of `d(λ) − ρ` on a log grid over `[lo, hi]`.
fn log_scan(probe: &mut Probe, lo: f64, hi: f64, rho: f64) -> (f64, f64, f64, f64) {
    let start = if lo > 0.0 { lo } else { hi * 1e-12 };
    let ratio = (hi / start).ln();
    let mut prev = (lo, probe.at(lo).distance());
    for i in 1..=SCAN_POINTS {
        let l = start * (ratio * i as f64 / SCAN_POINTS as f64).exp();
        let d = probe.at(l).distance();
        if d <= rho {
            return (prev.0, prev.1, l, d);
        }
        prev = (l, d);
    }
    let d_hi = probe.at(hi).distance();
    (prev.0, prev.1, hi, d_hi)
}
