//! Structured eigensolver for `B(λ) = A + λ·Ŷŷᵀ` with `A` of rank two.
//!
//! `A(x; γ) = xxᵀ − xbᵀ − bxᵀ + γ(xxᵀ − MᵀMbxᵀ − xbᵀMᵀM)` collapses to
//! `x·uᵀ + u·xᵀ` with `u = ½(1+γ)x − b − γMᵀMb`. Every eigenvector of `B`
//! outside `span{Ŷ, x, u}` has eigenvalue 0, and inside `span(Ŷ)` every
//! direction orthogonal to `Ŷᵀx, Ŷᵀu` is an eigenvector with eigenvalue λ.
//! What remains is a pencil of size at most 4, independent of `n` and `k`,
//! so each λ probe in the multiplier search costs a 4×4 eigenproblem.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::manifold::{fix_column_signs, StiefelPoint};

use super::RobustLsqProblem;

/// Relative tolerance used to decide that two eigenvalues of `B` coincide.
pub const TIE_TOL: f64 = 1e-10;

/// Symmetric rank-two matrix `x·uᵀ + u·xᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct RankTwoSym {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
}

impl RankTwoSym {
    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        &self.x * self.u.transpose() + &self.u * self.x.transpose()
    }

    /// `A·V` for a block of vectors.
    pub fn apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let xt_v = self.x.transpose() * v;
        let ut_v = self.u.transpose() * v;
        &self.x * ut_v + &self.u * xt_v
    }

    /// The two possibly-nonzero eigenvalues, `xᵀu ± ‖x‖‖u‖`.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let c = self.x.dot(&self.u);
        let r = self.x.norm() * self.u.norm();
        (c + r, c - r)
    }

    pub fn spectral_norm(&self) -> f64 {
        let (a, b) = self.eigenvalues();
        a.abs().max(b.abs())
    }

    pub fn trace_norm(&self) -> f64 {
        let (a, b) = self.eigenvalues();
        a.abs() + b.abs()
    }
}

/// `A(x; γ)` in factored form.
pub fn build_a(x: &DVector<f64>, prob: &RobustLsqProblem) -> RankTwoSym {
    let g = prob.gamma();
    let mb = prob.selector().mask(prob.b());
    let u = x * (0.5 * (1.0 + g)) - prob.b() - mb * g;
    RankTwoSym { x: x.clone(), u }
}

/// One basis direction of an eigenspace of `B`.
#[derive(Clone, Debug)]
enum Direction {
    /// Reduced coordinates in the active basis.
    Active(DVector<f64>),
    /// Column `j` of the passive part of rotated `Ŷ` (eigenvalue λ).
    Passive(usize),
    /// `j`-th vector of the common null space (eigenvalue 0).
    Null(usize),
}

#[derive(Clone, Debug)]
struct Member {
    dir: Direction,
    /// Squared norm of the component orthogonal to `Ŷ`.
    deficit: f64,
}

/// A column of the selected basis: a unit combination of at most two members.
#[derive(Clone, Debug)]
struct Column {
    terms: Vec<(f64, Direction)>,
}

/// Eigenvalues of `B(λ)` grouped by where their eigenvectors live.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub lambda: f64,
    /// Eigenpairs of the reduced pencil, descending.
    active: Vec<(f64, DVector<f64>)>,
    pub passive_count: usize,
    pub null_count: usize,
}

impl Spectrum {
    /// Largest absolute eigenvalue of `B(λ)`.
    pub fn radius(&self) -> f64 {
        self.active
            .iter()
            .map(|(v, _)| v.abs())
            .fold(if self.passive_count > 0 { self.lambda.abs() } else { 0.0 }, f64::max)
    }

    /// All eigenvalues with multiplicity, descending.
    pub fn values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.active.iter().map(|(e, _)| *e).collect();
        v.extend(std::iter::repeat_n(self.lambda, self.passive_count));
        v.extend(std::iter::repeat_n(0.0, self.null_count));
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }
}

/// How to choose inside a tied eigenspace at position `k`.
#[derive(Clone, Copy, Debug)]
pub enum TieRule {
    /// Maximise overlap with `Ŷ` (the deterministic default).
    ClosestToCenter,
    /// Hit total squared distance `target` from `Ŷ` as closely as the tied
    /// eigenspace allows.
    TargetDistanceSq(f64),
}

/// The outcome of choosing `k` eigenvectors.
#[derive(Clone, Debug)]
pub struct Selection {
    columns: Vec<Column>,
    /// Squared chordal distance of the selected subspace from `Ŷ`.
    pub distance_sq: f64,
    /// The k-th and (k+1)-th eigenvalues coincide within the tie tolerance.
    pub degenerate: bool,
    pub kth_value: f64,
    pub next_value: Option<f64>,
}

impl Selection {
    pub fn distance(&self) -> f64 {
        self.distance_sq.sqrt()
    }
}

/// λ-independent reduction of `B(λ)` around a fixed `Ŷ`.
pub struct ReducedPencil<'a> {
    y_hat: &'a StiefelPoint,
    /// `Ŷ·H`, with `H` orthogonal; first `r_y` columns span `Ŷᵀ{x, u}`.
    rotated: DMatrix<f64>,
    r_y: usize,
    /// Orthonormal basis of `(I − ŶŶᵀ){x, u}`.
    perp: DMatrix<f64>,
    x_red: DVector<f64>,
    u_red: DVector<f64>,
}

/// Householder vector mapping `v[start..]` onto a multiple of `e_start`.
fn householder(v: &DVector<f64>, start: usize) -> Option<DVector<f64>> {
    let tail = v.rows(start, v.len() - start);
    let alpha = tail.norm();
    if alpha == 0.0 {
        return None;
    }
    let mut h = DVector::zeros(v.len());
    h.rows_mut(start, v.len() - start).copy_from(&tail);
    let s = if v[start] >= 0.0 { 1.0 } else { -1.0 };
    h[start] += s * alpha;
    let nrm = h.norm();
    h /= nrm;
    Some(h)
}

fn reflect_vec(h: &DVector<f64>, v: &mut DVector<f64>) {
    let c = 2.0 * h.dot(v);
    v.axpy(-c, h, 1.0);
}

/// `M ← M·(I − 2hhᵀ)`.
fn reflect_cols(m: &mut DMatrix<f64>, h: &DVector<f64>) {
    let mh = &*m * h;
    m.ger(-2.0, &mh, h, 1.0);
}

impl<'a> ReducedPencil<'a> {
    pub fn new(a: &RankTwoSym, y_hat: &'a StiefelPoint) -> Self {
        let yb = y_hat.basis();
        let k = yb.ncols();
        let scale = a.x.norm().max(a.u.norm());
        let tol = 1e-13 * scale;

        // Ŷ-coordinates, triangularised by at most two reflectors.
        let mut cy = [yb.transpose() * &a.x, yb.transpose() * &a.u];
        let mut rotated = yb.clone();
        let mut r_y = 0;
        for i in 0..2 {
            if r_y >= k {
                break;
            }
            let tail = cy[i].rows(r_y, k - r_y).norm();
            if tail <= tol {
                continue;
            }
            if let Some(h) = householder(&cy[i], r_y) {
                for c in cy.iter_mut() {
                    reflect_vec(&h, c);
                }
                reflect_cols(&mut rotated, &h);
                r_y += 1;
            }
        }

        // Components orthogonal to Ŷ, Gram-Schmidt with one reorthogonalisation.
        let mut perp_cols: Vec<DVector<f64>> = Vec::with_capacity(2);
        for v in [&a.x, &a.u] {
            let mut w = v - yb * (yb.transpose() * v);
            for _ in 0..2 {
                w -= yb * (yb.transpose() * &w);
                for q in &perp_cols {
                    let c = q.dot(&w);
                    w.axpy(-c, q, 1.0);
                }
            }
            let nrm = w.norm();
            if nrm > tol {
                perp_cols.push(w / nrm);
            }
        }
        let n = yb.nrows();
        let perp = if perp_cols.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(&perp_cols)
        };
        let r = r_y + perp.ncols();
        let reduce = |v: &DVector<f64>, cyv: &DVector<f64>| {
            let mut out = DVector::zeros(r);
            out.rows_mut(0, r_y).copy_from(&cyv.rows(0, r_y));
            if perp.ncols() > 0 {
                out.rows_mut(r_y, perp.ncols()).copy_from(&(perp.transpose() * v));
            }
            out
        };
        let x_red = reduce(&a.x, &cy[0]);
        let u_red = reduce(&a.u, &cy[1]);
        Self {
            y_hat,
            rotated,
            r_y,
            perp,
            x_red,
            u_red,
        }
    }

    pub fn k(&self) -> usize {
        self.y_hat.k()
    }

    pub fn n_amb(&self) -> usize {
        self.y_hat.n_amb()
    }

    /// Dimension of the active pencil.
    pub fn active_dim(&self) -> usize {
        self.x_red.len()
    }

    fn deficit_of(&self, z: &DVector<f64>) -> f64 {
        z.rows(self.r_y, z.len() - self.r_y).norm_squared()
    }

    pub fn spectrum(&self, lambda: f64) -> Spectrum {
        let r = self.active_dim();
        let mut active = Vec::with_capacity(r);
        if r > 0 {
            let mut c = &self.x_red * self.u_red.transpose() + &self.u_red * self.x_red.transpose();
            for i in 0..self.r_y {
                c[(i, i)] += lambda;
            }
            let eig = SymmetricEigen::new(c);
            for (i, &val) in eig.eigenvalues.iter().enumerate() {
                active.push((val, eig.eigenvectors.column(i).into_owned()));
            }
            active.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then(self.deficit_of(&a.1).total_cmp(&self.deficit_of(&b.1)))
            });
        }
        Spectrum {
            lambda,
            active,
            passive_count: self.k() - self.r_y,
            null_count: self.n_amb() - self.k() - self.perp.ncols(),
        }
    }

    /// Picks the top-`k` invariant subspace, resolving a tie at position `k`
    /// with `rule`. `tie_tol` is relative to the spectral radius.
    pub fn select(&self, spec: &Spectrum, rule: TieRule, tie_tol: f64) -> Selection {
        let k = self.k();
        // (value, member-or-group) entries, descending.
        #[derive(Clone, Copy)]
        enum Entry {
            Active(usize),
            Passive,
            Null,
        }
        let mut entries: Vec<(f64, Entry, usize)> = spec
            .active
            .iter()
            .enumerate()
            .map(|(i, (v, _))| (*v, Entry::Active(i), 1))
            .collect();
        if spec.passive_count > 0 {
            entries.push((spec.lambda, Entry::Passive, spec.passive_count));
        }
        if spec.null_count > 0 {
            entries.push((0.0, Entry::Null, spec.null_count));
        }
        // Ties between groups: Ŷ directions first, null space last.
        let rank = |e: &Entry| match e {
            Entry::Passive => 0,
            Entry::Active(_) => 1,
            Entry::Null => 2,
        };
        entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(rank(&a.1).cmp(&rank(&b.1))));

        let mut seen = 0;
        let mut kth = 0.0;
        let mut next = None;
        for (v, _, c) in &entries {
            if seen < k && seen + c >= k {
                kth = *v;
                if seen + c > k {
                    next = Some(*v);
                }
            } else if seen >= k && next.is_none() {
                next = Some(*v);
            }
            seen += c;
        }
        let tol = tie_tol * spec.radius().max(f64::MIN_POSITIVE);

        let mut columns = Vec::with_capacity(k);
        let mut deficit = 0.0;
        let mut cluster: Vec<Member> = Vec::new();
        let mut cluster_active: Vec<DVector<f64>> = Vec::new();
        for (v, e, c) in &entries {
            let above = *v > kth + tol;
            let tied = (*v - kth).abs() <= tol;
            if !above && !tied {
                continue;
            }
            match e {
                Entry::Active(i) => {
                    let z = spec.active[*i].1.clone();
                    if above {
                        deficit += self.deficit_of(&z);
                        columns.push(Column {
                            terms: vec![(1.0, Direction::Active(z))],
                        });
                    } else {
                        cluster_active.push(z);
                    }
                }
                Entry::Passive => {
                    for j in 0..*c {
                        if above {
                            columns.push(Column {
                                terms: vec![(1.0, Direction::Passive(j))],
                            });
                        } else {
                            cluster.push(Member {
                                dir: Direction::Passive(j),
                                deficit: 0.0,
                            });
                        }
                    }
                }
                Entry::Null => {
                    // Null directions beyond k can never be selected.
                    for j in 0..(*c).min(k) {
                        if above {
                            deficit += 1.0;
                            columns.push(Column {
                                terms: vec![(1.0, Direction::Null(j))],
                            });
                        } else {
                            cluster.push(Member {
                                dir: Direction::Null(j),
                                deficit: 1.0,
                            });
                        }
                    }
                }
            }
        }

        // Diagonalise the deficit form on the tied active eigenvectors so the
        // cluster basis is orthogonal in both the Euclidean and Ŷ-overlap sense.
        if !cluster_active.is_empty() {
            let zc = DMatrix::from_columns(&cluster_active);
            let tail = zc.rows(self.r_y, zc.nrows() - self.r_y);
            let g = tail.transpose() * tail;
            let eig = SymmetricEigen::new(g);
            for (i, &d) in eig.eigenvalues.iter().enumerate() {
                let z = &zc * eig.eigenvectors.column(i);
                cluster.push(Member {
                    dir: Direction::Active(z),
                    deficit: d.clamp(0.0, 1.0),
                });
            }
        }
        cluster.sort_by(|a, b| a.deficit.total_cmp(&b.deficit));

        let need = k - columns.len();
        let degenerate = cluster.len() > need;
        let mut chosen: Vec<Column> = cluster[..need]
            .iter()
            .map(|m| Column {
                terms: vec![(1.0, m.dir.clone())],
            })
            .collect();
        let mut cluster_deficit: f64 = cluster[..need].iter().map(|m| m.deficit).sum();

        if let TieRule::TargetDistanceSq(target) = rule {
            let want = target - deficit;
            // Rotate the lowest-deficit choices, last first, toward the
            // highest-deficit spares until the total matches.
            let spare = cluster.len() - need;
            for t in 0..need.min(spare) {
                if cluster_deficit >= want {
                    break;
                }
                let i = need - 1 - t;
                let j = cluster.len() - 1 - t;
                let (di, dj) = (cluster[i].deficit, cluster[j].deficit);
                let full = cluster_deficit - di + dj;
                if full >= want && dj > di {
                    let s2 = ((want - cluster_deficit) / (dj - di)).clamp(0.0, 1.0);
                    let (s, c) = (s2.sqrt(), (1.0 - s2).sqrt());
                    chosen[i] = Column {
                        terms: vec![(c, cluster[i].dir.clone()), (s, cluster[j].dir.clone())],
                    };
                    cluster_deficit += s2 * (dj - di);
                    break;
                }
                chosen[i] = Column {
                    terms: vec![(1.0, cluster[j].dir.clone())],
                };
                cluster_deficit = full;
            }
        }

        columns.extend(chosen);
        Selection {
            columns,
            distance_sq: (deficit + cluster_deficit).clamp(0.0, k as f64),
            degenerate,
            kth_value: kth,
            next_value: next,
        }
    }

    /// Orthonormal vectors spanning the complement of `span{Ŷ, perp}`,
    /// by Gram-Schmidt on the standard basis.
    fn null_vectors(&self, count: usize) -> Vec<DVector<f64>> {
        let n = self.n_amb();
        let yb = self.y_hat.basis();
        let mut out: Vec<DVector<f64>> = Vec::with_capacity(count);
        for i in 0..n {
            if out.len() == count {
                break;
            }
            let mut w = DVector::zeros(n);
            w[i] = 1.0;
            for _ in 0..2 {
                w -= yb * (yb.transpose() * &w);
                if self.perp.ncols() > 0 {
                    w -= &self.perp * (self.perp.transpose() * &w);
                }
                for q in &out {
                    let c = q.dot(&w);
                    w.axpy(-c, q, 1.0);
                }
            }
            let nrm = w.norm();
            if nrm > 1e-8 {
                out.push(w / nrm);
            }
        }
        out
    }

    pub fn materialize(&self, sel: &Selection) -> StiefelPoint {
        let n = self.n_amb();
        let k = self.k();
        let max_null = sel
            .columns
            .iter()
            .flat_map(|c| c.terms.iter())
            .filter_map(|(_, d)| match d {
                Direction::Null(j) => Some(j + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let nulls = self.null_vectors(max_null);
        let r_y = self.r_y;
        let mut out = DMatrix::zeros(n, k);
        for (ci, col) in sel.columns.iter().enumerate() {
            let mut v = DVector::zeros(n);
            for (coef, dir) in &col.terms {
                match dir {
                    Direction::Active(z) => {
                        let zy = z.rows(0, r_y);
                        v += (self.rotated.columns(0, r_y) * zy) * *coef;
                        if self.perp.ncols() > 0 {
                            v += (&self.perp * z.rows(r_y, self.perp.ncols())) * *coef;
                        }
                    }
                    Direction::Passive(j) => v.axpy(*coef, &self.rotated.column(r_y + j), 1.0),
                    Direction::Null(j) => v.axpy(*coef, &nulls[*j], 1.0),
                }
            }
            out.set_column(ci, &v);
        }
        fix_column_signs(&mut out);
        StiefelPoint::from_orthonormal(out)
    }
}

/// Top-`k` invariant subspace of `A + λ·ŶŶᵀ` via the reduced pencil.
///
/// Returns the subspace and whether the k-th eigenvalue was tied.
pub fn top_k_eigs(a: &RankTwoSym, lambda: f64, y_hat: &StiefelPoint) -> (StiefelPoint, bool) {
    let pencil = ReducedPencil::new(a, y_hat);
    let spec = pencil.spectrum(lambda);
    let sel = pencil.select(&spec, TieRule::ClosestToCenter, TIE_TOL);
    (pencil.materialize(&sel), sel.degenerate)
}
