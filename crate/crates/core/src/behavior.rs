//! Restricted behaviors of LTI systems: Hankel matrices, persistency of
//! excitation, and subspace identification from trajectory data.
//!
//! Samples are stacked as `w(t) = col(u(t), y(t))` throughout.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::LtiSystem;
use crate::error::{Error, Result};
use crate::manifold::{fix_column_signs, numerical_rank, orthonormalize, StiefelPoint};

/// Default relative singular-value cutoff for rank decisions on Hankel matrices.
pub const GPE_TOL: f64 = 1e-8;

/// A finite signal `w(1), …, w(T)` in `R^q`, one sample per column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    samples: DMatrix<f64>,
}

impl Trajectory {
    pub fn new(samples: DMatrix<f64>) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "trajectory needs q >= 1 and T >= 1, got {}x{}",
                samples.nrows(),
                samples.ncols()
            )));
        }
        Ok(Self { samples })
    }

    pub fn from_samples(samples: &[DVector<f64>]) -> Result<Self> {
        let q = samples.first().map_or(0, |s| s.len());
        if let Some(bad) = samples.iter().find(|s| s.len() != q) {
            return Err(Error::DimensionMismatch(format!(
                "sample of dimension {} in a trajectory of dimension {q}",
                bad.len()
            )));
        }
        Self::new(DMatrix::from_columns(samples))
    }

    /// Interleaves inputs (`m × T`) and outputs (`p × T`) into `col(u, y)` samples.
    pub fn from_io(inputs: &DMatrix<f64>, outputs: &DMatrix<f64>) -> Result<Self> {
        if inputs.ncols() != outputs.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} input samples, {} output samples",
                inputs.ncols(),
                outputs.ncols()
            )));
        }
        let (m, p) = (inputs.nrows(), outputs.nrows());
        let mut w = DMatrix::zeros(m + p, inputs.ncols());
        w.rows_mut(0, m).copy_from(inputs);
        w.rows_mut(m, p).copy_from(outputs);
        Self::new(w)
    }

    pub fn q(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn sample(&self, t: usize) -> DVector<f64> {
        self.samples.column(t).into_owned()
    }

    /// `col(w(start), …, w(start + len − 1))`, zero-based.
    pub fn window(&self, start: usize, len: usize) -> Result<DVector<f64>> {
        if start + len > self.len() {
            return Err(Error::HorizonTooShort {
                len: self.len(),
                depth: start + len,
            });
        }
        let block = self.samples.columns(start, len);
        Ok(DVector::from_iterator(block.len(), block.iter().copied()))
    }
}

/// Identified restricted behavior `B|[1, L]` as a point of Gr(k, qL).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorEstimate {
    pub subspace: StiefelPoint,
    pub depth: usize,
    /// All singular values of the Hankel matrix, descending.
    pub singular_values: Vec<f64>,
}

impl BehaviorEstimate {
    pub fn k(&self) -> usize {
        self.subspace.k()
    }

    pub fn q(&self) -> usize {
        self.subspace.n_amb() / self.depth
    }

    /// Ratio of the k-th to the (k+1)-th singular value; infinite when the
    /// Hankel has exactly rank k.
    pub fn spectral_gap(&self) -> f64 {
        let k = self.k();
        match (self.singular_values.get(k - 1), self.singular_values.get(k)) {
            (Some(&a), Some(&b)) if b > 0.0 => a / b,
            _ => f64::INFINITY,
        }
    }
}

/// Block-Hankel matrix of depth `depth`: column `j` is `col(w(j), …, w(j + depth − 1))`.
pub fn hankel(w: &Trajectory, depth: usize) -> Result<DMatrix<f64>> {
    let t = w.len();
    if depth == 0 || t < depth {
        return Err(Error::HorizonTooShort { len: t, depth });
    }
    let q = w.q();
    let cols = t - depth + 1;
    let mut h = DMatrix::zeros(q * depth, cols);
    for j in 0..cols {
        for i in 0..depth {
            h.view_mut((i * q, j), (q, 1)).copy_from(&w.samples.column(j + i));
        }
    }
    Ok(h)
}

/// Dimension of the restricted behavior: `m·L + n_x`.
pub fn behavior_dimension(m: usize, n_x: usize, depth: usize) -> usize {
    m * depth + n_x
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct GpeReport {
    pub rank: usize,
    pub expected: usize,
    pub satisfied: bool,
}

/// Generalised persistency of excitation: numerical rank of `h` equals `expected_rank`.
pub fn gpe_check(h: &DMatrix<f64>, expected_rank: usize, rel_tol: f64) -> GpeReport {
    let rank = numerical_rank(h, rel_tol);
    GpeReport {
        rank,
        expected: expected_rank,
        satisfied: rank == expected_rank,
    }
}

/// Top-`k` left singular subspace of the depth-`depth` Hankel matrix of `w`.
pub fn identify_subspace(w: &Trajectory, depth: usize, k: usize) -> Result<BehaviorEstimate> {
    let h = hankel(w, depth)?;
    if k == 0 || k > h.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "subspace dimension {k} outside [1, {}]",
            h.nrows()
        )));
    }
    if h.ncols() < k {
        return Err(Error::InsufficientColumns {
            columns: h.ncols(),
            needed: k,
        });
    }
    let svd = h.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let cols: Vec<_> = order[..k].iter().map(|&i| u.column(i).into_owned()).collect();
    let mut basis = DMatrix::from_columns(&cols);
    fix_column_signs(&mut basis);
    Ok(BehaviorEstimate {
        subspace: StiefelPoint::new(basis)?,
        depth,
        singular_values: order.iter().map(|&i| svd.singular_values[i]).collect(),
    })
}

/// `[C; CA; …; CA^{depth−1}]`.
pub fn observability_matrix(sys: &LtiSystem, depth: usize) -> DMatrix<f64> {
    let (p, n) = (sys.p(), sys.n_x());
    let mut o = DMatrix::zeros(p * depth, n);
    let mut block = sys.c().clone();
    for i in 0..depth {
        o.rows_mut(i * p, p).copy_from(&block);
        block = &block * sys.a();
    }
    o
}

/// Smallest `ℓ` at which the observability rank stops growing.
pub fn lag(sys: &LtiSystem) -> Result<usize> {
    let n = sys.n_x();
    let rank = |d: usize| numerical_rank(&observability_matrix(sys, d), GPE_TOL);
    let mut prev = rank(1);
    for l in 1..=n.max(1) {
        let next = rank(l + 1);
        if next == prev {
            if prev < n {
                return Err(Error::NotDetectable { achieved: prev, n_x: n });
            }
            return Ok(l);
        }
        prev = next;
    }
    Err(Error::NotDetectable { achieved: prev, n_x: n })
}

/// Model-based restricted behavior: the span of every window generated by
/// some initial state and input sequence.
pub fn restricted_behavior(sys: &LtiSystem, depth: usize) -> Result<StiefelPoint> {
    let (n, m, p) = (sys.n_x(), sys.m(), sys.p());
    let q = m + p;
    let mut gen = DMatrix::zeros(q * depth, n + m * depth);
    // Free response from each unit initial state.
    let o = observability_matrix(sys, depth);
    for t in 0..depth {
        gen.view_mut((t * q + m, 0), (p, n)).copy_from(&o.rows(t * p, p));
    }
    // Forced response to a unit impulse on input channel `c` at time `s`.
    let mut markov = vec![sys.d().clone()];
    let mut ab = sys.b().clone();
    for _ in 1..depth {
        markov.push(sys.c() * &ab);
        ab = sys.a() * ab;
    }
    for s in 0..depth {
        for c in 0..m {
            let col = n + s * m + c;
            gen[(s * q + c, col)] = 1.0;
            for t in s..depth {
                gen.view_mut((t * q + m, col), (p, 1))
                    .copy_from(&markov[t - s].column(c));
            }
        }
    }
    orthonormalize(&gen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{double_integrator, laplacian3};

    use nalgebra::dmatrix;

    fn scalar(values: &[f64]) -> Trajectory {
        Trajectory::new(DMatrix::from_row_slice(1, values.len(), values)).unwrap()
    }

    #[test]
    fn hankel_examples() {
        let h = hankel(&scalar(&[1.0, 2.0, 3.0, 4.0]), 2).unwrap();
        assert_eq!(h, dmatrix![1.0, 2.0, 3.0; 2.0, 3.0, 4.0]);

        let w = Trajectory::new(DMatrix::zeros(2, 115)).unwrap();
        assert_eq!(hankel(&w, 35).unwrap().shape(), (70, 81));

        let c = Trajectory::new(DMatrix::from_fn(3, 20, |i, _| i as f64 + 1.0)).unwrap();
        let h = hankel(&c, 4).unwrap();
        assert!(h.column_iter().all(|col| col == h.column(0)));
        assert_eq!(numerical_rank(&h, GPE_TOL), 1);
        assert!(gpe_check(&h, 1, GPE_TOL).satisfied);

        assert!(matches!(
            hankel(&scalar(&[1.0, 2.0]), 3),
            Err(Error::HorizonTooShort { len: 2, depth: 3 })
        ));
    }

    #[test]
    fn behavior_dimension_examples() {
        assert_eq!(behavior_dimension(1, 2, 35), 37);
        assert_eq!(behavior_dimension(3, 3, 35), 108);
        assert_eq!(behavior_dimension(0, 1, 5), 1);
    }

    #[test]
    fn lag_examples() {
        assert_eq!(lag(&double_integrator()).unwrap(), 2);
        assert_eq!(lag(&laplacian3()).unwrap(), 3);
        let full = LtiSystem::new(
            dmatrix![0.5, 1.0; 0.0, 0.3],
            dmatrix![1.0; 0.0],
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
        )
        .unwrap();
        assert_eq!(lag(&full).unwrap(), 1);
    }

    #[test]
    fn undetectable_system_reports_rank() {
        let sys = LtiSystem::new(
            DMatrix::identity(2, 2),
            dmatrix![1.0; 0.0],
            dmatrix![1.0, 0.0],
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        assert!(matches!(lag(&sys), Err(Error::NotDetectable { achieved: 1, n_x: 2 })));
    }

    #[test]
    fn model_behavior_has_expected_dimension() {
        let di = restricted_behavior(&double_integrator(), 35).unwrap();
        assert_eq!((di.n_amb(), di.k()), (70, 37));
        let lap = restricted_behavior(&laplacian3(), 35).unwrap();
        assert_eq!((lap.n_amb(), lap.k()), (140, 108));
    }

    #[test]
    fn fat_hankel_is_recovered_exactly() {
        let w = Trajectory::new(DMatrix::from_fn(2, 12, |i, j| ((i + 1) * (j * j + 1)) as f64)).unwrap();
        let h = hankel(&w, 3).unwrap();
        let r = numerical_rank(&h, GPE_TOL);
        let est = identify_subspace(&w, 3, r).unwrap();
        let yb = est.subspace.basis();
        let resid = &h - yb * (yb.transpose() * &h);
        assert!(resid.norm() <= 1e-12 * h.norm());
    }

    #[test]
    fn identify_rejects_short_data() {
        let w = Trajectory::new(DMatrix::zeros(2, 40)).unwrap();
        assert!(matches!(
            identify_subspace(&w, 35, 37),
            Err(Error::InsufficientColumns { columns: 6, needed: 37 })
        ));
    }
}
