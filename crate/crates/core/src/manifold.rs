//! Grassmannian points stored as orthonormal (Stiefel) bases.
//!
//! Subspaces never materialise their `n × n` projector unless asked to:
//! distances and tangent projections are computed from `n × k` products.

use nalgebra::{DMatrix, SVD};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Max-abs tolerance on `YᵀY − I` accepted by [`StiefelPoint::new`].
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// Relative singular-value cutoff used by [`orthonormalize`].
pub const RANK_TOL: f64 = 1e-12;

/// An `n × k` matrix with orthonormal columns, representing a point of Gr(k, n).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StiefelPoint {
    basis: DMatrix<f64>,
}

impl StiefelPoint {
    /// Wraps `basis` after checking `basisᵀ·basis = I` to [`ORTHONORMAL_TOL`].
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        let (n, k) = basis.shape();
        if k == 0 || k > n {
            return Err(Error::DimensionMismatch(format!(
                "Stiefel basis must satisfy 1 <= k <= n, got {n}x{k}"
            )));
        }
        let gram = basis.transpose() * &basis;
        let err = (gram - DMatrix::identity(k, k)).amax();
        if err > ORTHONORMAL_TOL {
            return Err(Error::InvalidParameter(format!(
                "basis is not orthonormal (max |YᵀY - I| = {err:e})"
            )));
        }
        Ok(Self { basis })
    }

    pub(crate) fn from_orthonormal(basis: DMatrix<f64>) -> Self {
        debug_assert!(basis.ncols() >= 1 && basis.ncols() <= basis.nrows());
        Self { basis }
    }

    /// Span of the first `k` standard basis vectors of `R^n`.
    pub fn coordinate(n: usize, k: usize) -> Result<Self> {
        Self::new(DMatrix::identity(n, k))
    }

    /// Haar-distributed random subspace (QR of a Gaussian matrix).
    pub fn random<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Self {
        loop {
            let raw = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
            if let Ok(y) = orthonormalize(&raw) {
                return y;
            }
        }
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn into_basis(self) -> DMatrix<f64> {
        self.basis
    }

    pub fn n_amb(&self) -> usize {
        self.basis.nrows()
    }

    pub fn k(&self) -> usize {
        self.basis.ncols()
    }
}

/// Symmetric idempotent matrix of rank `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub matrix: DMatrix<f64>,
    pub rank: usize,
}

/// Chordal-distance ball around a subspace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceBall {
    center: StiefelPoint,
    radius: f64,
}

impl SubspaceBall {
    pub fn new(center: StiefelPoint, radius: f64) -> Result<Self> {
        let max = (center.k() as f64).sqrt();
        if !(radius >= 0.0) || radius > max + 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "ball radius {radius} outside [0, sqrt(k) = {max}]"
            )));
        }
        Ok(Self {
            center,
            radius: radius.min(max),
        })
    }

    pub fn center(&self) -> &StiefelPoint {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn contains(&self, y: &StiefelPoint, slack: f64) -> Result<bool> {
        Ok(chordal_distance(&self.center, y)? <= self.radius + slack)
    }
}

/// Flips each column so that its first entry of largest magnitude is positive.
pub(crate) fn fix_column_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mut best = 0.0_f64;
        let mut sign = 1.0;
        for &v in col.iter() {
            if v.abs() > best {
                best = v.abs();
                sign = v.signum();
            }
        }
        if sign < 0.0 {
            col.neg_mut();
        }
    }
}

/// Numerical rank: singular values above `rel_tol · σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Orthonormal basis of the column space of `raw` with the crate-wide sign convention.
pub fn orthonormalize(raw: &DMatrix<f64>) -> Result<StiefelPoint> {
    let (n, k) = raw.shape();
    if k == 0 || k > n {
        return Err(Error::DimensionMismatch(format!(
            "cannot orthonormalize a {n}x{k} matrix"
        )));
    }
    let rank = numerical_rank(raw, RANK_TOL);
    if rank < k {
        return Err(Error::RankDeficient { rank, expected: k });
    }
    let mut q = raw.clone().qr().q();
    // Householder QR loses a little orthogonality on ill-conditioned input;
    // one more pass restores it to machine precision.
    q = q.qr().q();
    fix_column_signs(&mut q);
    Ok(StiefelPoint::from_orthonormal(q))
}

pub fn projector(y: &StiefelPoint) -> Projector {
    let b = y.basis();
    let mut matrix = b * b.transpose();
    // Exact symmetry regardless of summation order.
    let n = matrix.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (matrix[(i, j)] + matrix[(j, i)]);
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
    }
    Projector { matrix, rank: y.k() }
}

fn check_same_shape(y1: &StiefelPoint, y2: &StiefelPoint) -> Result<()> {
    if y1.n_amb() != y2.n_amb() || y1.k() != y2.k() {
        return Err(Error::DimensionMismatch(format!(
            "Gr({}, {}) vs Gr({}, {})",
            y1.k(),
            y1.n_amb(),
            y2.k(),
            y2.n_amb()
        )));
    }
    Ok(())
}

/// `(I − Y1·Y1ᵀ)·Y2` without forming any `n × n` matrix.
fn residual(y1: &StiefelPoint, y2: &StiefelPoint) -> DMatrix<f64> {
    let coeff = y1.basis().transpose() * y2.basis();
    y2.basis() - y1.basis() * coeff
}

/// Squared chordal distance `Tr(P⊥₁ P₂)`.
///
/// Evaluated as `‖P⊥₁ Y₂‖²_F`, symmetrised over both argument orders. This is
/// the same quantity as `k − ‖Y₁ᵀY₂‖²_F` but keeps full relative accuracy for
/// nearly coincident subspaces, where the difference form cancels to ~1e-7.
pub fn chordal_distance_sq(y1: &StiefelPoint, y2: &StiefelPoint) -> Result<f64> {
    check_same_shape(y1, y2)?;
    let a = residual(y1, y2).norm_squared();
    let b = residual(y2, y1).norm_squared();
    Ok((0.5 * (a + b)).clamp(0.0, y1.k() as f64))
}

pub fn chordal_distance(y1: &StiefelPoint, y2: &StiefelPoint) -> Result<f64> {
    Ok(chordal_distance_sq(y1, y2)?.sqrt())
}

/// Gap metric `‖P₁ − P₂‖₂`, the sine of the largest principal angle.
pub fn gap_distance(y1: &StiefelPoint, y2: &StiefelPoint) -> Result<f64> {
    check_same_shape(y1, y2)?;
    let r = residual(y1, y2);
    let s = SVD::new(r, false, false).singular_values.max();
    Ok(s.clamp(0.0, 1.0))
}

/// Projection onto the tangent space at `Y`: `(I − Y·Yᵀ)·G`.
pub fn tangent_project(y: &StiefelPoint, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if g.shape() != y.basis().shape() {
        return Err(Error::DimensionMismatch(format!(
            "tangent vector {:?} vs basis {:?}",
            g.shape(),
            y.basis().shape()
        )));
    }
    Ok(g - y.basis() * (y.basis().transpose() * g))
}

/// Principal-angle cosines (singular values of `Y₁ᵀY₂`), descending.
pub fn principal_cosines(y1: &StiefelPoint, y2: &StiefelPoint) -> Result<Vec<f64>> {
    check_same_shape(y1, y2)?;
    let m = y1.basis().transpose() * y2.basis();
    let mut s: Vec<f64> = m.singular_values().iter().map(|v| v.min(1.0)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}
