//! Dense symmetric linear algebra kernels.
//!
//! Everything the smoothing parameter updates need from a matrix library:
//! log pseudo-determinant and Moore-Penrose pseudo-inverse of semi-definite
//! penalty totals, factorization-reusing traces of the form `tr(A^-1 S_j)`,
//! and eigenvalue-clamping repair of indefinite Hessians. All decompositions
//! are deterministic given input bytes.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Shared relative eigenvalue threshold for rank decisions, so the rank used
/// by the pseudo-determinant and the pseudo-inverse is always consistent.
pub const DEFAULT_RANK_TOL: f64 = 1e-7;

/// Maximum relative asymmetry accepted by [`SymMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

pub type CholFactor = Cholesky<f64, Dyn>;

/// Dense symmetric matrix. The upper triangle is authoritative: construction
/// mirrors it down so later arithmetic sees an exactly symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    mat: DMatrix<f64>,
}

impl SymMatrix {
    /// Validates symmetry (relative to the largest entry) and finiteness,
    /// then mirrors the upper triangle onto the lower.
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} matrix is not square",
                mat.nrows(),
                mat.ncols()
            )));
        }
        let mut scale = 0.0_f64;
        for v in mat.iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite);
            }
            scale = scale.max(v.abs());
        }
        let n = mat.nrows();
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((mat[(i, j)] - mat[(j, i)]).abs());
            }
        }
        if scale > 0.0 && worst > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric(worst / scale));
        }
        let mut mat = mat;
        for i in 0..n {
            for j in (i + 1)..n {
                mat[(j, i)] = mat[(i, j)];
            }
        }
        Ok(Self { mat })
    }

    /// Builds `0.5 * (M + M')` without a symmetry check, for results of
    /// floating point arithmetic that are symmetric up to roundoff.
    pub fn symmetrize(mat: DMatrix<f64>) -> Self {
        let n = mat.nrows();
        debug_assert_eq!(n, mat.ncols());
        let mut out = mat;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (out[(i, j)] + out[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Self { mat: out }
    }

    /// Gram matrix `A' A` (positive semi-definite by construction).
    pub fn from_gram(a: &DMatrix<f64>) -> Self {
        Self::symmetrize(a.transpose() * a)
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            mat: DMatrix::zeros(n, n),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mat: DMatrix::identity(n, n),
        }
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self {
            mat: DMatrix::from_diagonal(&DVector::from_row_slice(d)),
        }
    }

    pub fn n(&self) -> usize {
        self.mat.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.mat
    }

    /// Quadratic form `v' S v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        (v.transpose() * &self.mat * v)[(0, 0)]
    }

    pub fn trace(&self) -> f64 {
        self.mat.trace()
    }

    /// Principal sub-matrix gathered on `idx` (sorted, unique indices).
    pub fn gather(&self, idx: &[usize]) -> SymMatrix {
        let q = idx.len();
        let mut out = DMatrix::zeros(q, q);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                out[(a, b)] = self.mat[(i, j)];
            }
        }
        SymMatrix { mat: out }
    }

    /// Symmetric eigendecomposition with eigenvalues sorted descending.
    pub fn eigen(&self, rank_tol: f64) -> EigenSystem {
        EigenSystem::new(self, rank_tol)
    }

    /// Cholesky factorization; fails on non positive definite input.
    pub fn cholesky(&self) -> Result<CholFactor> {
        Cholesky::new(self.mat.clone())
            .ok_or_else(|| Error::NotPd(format!("{}x{} Cholesky failed", self.n(), self.n())))
    }

    pub fn scale(&self, c: f64) -> SymMatrix {
        SymMatrix {
            mat: &self.mat * c,
        }
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix {
            mat: &self.mat + &other.mat,
        }
    }
}

/// Eigendecomposition of a [`SymMatrix`], values descending, with the count
/// of values above `rank_tol * max(values)` recorded as the numerical rank.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
    pub rank: usize,
}

impl EigenSystem {
    pub fn new(s: &SymMatrix, rank_tol: f64) -> Self {
        let eig = SymmetricEigen::new(s.mat.clone());
        let n = eig.eigenvalues.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(n, n);
        for (col, &i) in order.iter().enumerate() {
            vectors.set_column(col, &eig.eigenvectors.column(i));
        }
        let max = if n > 0 { values[0] } else { 0.0 };
        let rank = if max > 0.0 {
            values.iter().filter(|&&v| v > rank_tol * max).count()
        } else {
            0
        };
        EigenSystem {
            values,
            vectors,
            rank,
        }
    }

    /// Largest absolute eigenvalue.
    pub fn spectral_radius(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
    }
}

/// Log pseudo-determinant: the sum of `log e_i` over eigenvalues above
/// `rank_tol * max(e)`, together with their count.
pub fn log_pseudo_det(s: &SymMatrix, rank_tol: f64) -> Result<(f64, usize)> {
    let eig = s.eigen(rank_tol);
    check_psd(&eig, rank_tol)?;
    let max = eig.values[0];
    if max <= 0.0 {
        return Err(Error::AllZero);
    }
    let thr = rank_tol * max;
    let mut logdet = 0.0;
    let mut rank = 0;
    for &v in eig.values.iter() {
        if v > thr {
            logdet += v.ln();
            rank += 1;
        }
    }
    if rank == 0 {
        return Err(Error::AllZero);
    }
    Ok((logdet, rank))
}

/// Log pseudo-determinant when the rank is known structurally (for penalty
/// totals whose rank does not depend on the smoothing parameters). Summing
/// the top `rank` eigenvalues avoids misclassifying directions whose scale
/// is many orders of magnitude below the dominant smoothing parameter.
pub fn log_pseudo_det_fixed_rank(s: &SymMatrix, rank: usize) -> Result<f64> {
    if rank == 0 {
        return Err(Error::AllZero);
    }
    let eig = s.eigen(DEFAULT_RANK_TOL);
    if rank > eig.values.len() {
        return Err(Error::DimensionMismatch(format!(
            "rank {} exceeds dimension {}",
            rank,
            eig.values.len()
        )));
    }
    let mut logdet = 0.0;
    for i in 0..rank {
        let v = eig.values[i];
        if v <= 0.0 {
            return Err(Error::NonPsd(v));
        }
        logdet += v.ln();
    }
    Ok(logdet)
}

/// Moore-Penrose pseudo-inverse via eigendecomposition, inverting only the
/// eigenvalues above `rank_tol * max(e)`.
pub fn pseudo_inverse(s: &SymMatrix, rank_tol: f64) -> Result<SymMatrix> {
    let eig = s.eigen(rank_tol);
    check_psd(&eig, rank_tol)?;
    let n = s.n();
    let max = if n > 0 { eig.values[0] } else { 0.0 };
    let thr = rank_tol * max;
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let v = eig.values[i];
        if max > 0.0 && v > thr {
            let u = eig.vectors.column(i);
            // out += u u' / v
            for r in 0..n {
                for c in 0..n {
                    out[(r, c)] += u[r] * u[c] / v;
                }
            }
        }
    }
    Ok(SymMatrix::symmetrize(out))
}

/// Pseudo-inverse inverting exactly the `rank` largest eigenvalues, for
/// matrices whose rank is known structurally (see
/// [`log_pseudo_det_fixed_rank`]).
pub fn pseudo_inverse_fixed_rank(s: &SymMatrix, rank: usize) -> Result<SymMatrix> {
    let n = s.n();
    if rank > n {
        return Err(Error::DimensionMismatch(format!(
            "rank {rank} exceeds dimension {n}"
        )));
    }
    let eig = s.eigen(DEFAULT_RANK_TOL);
    let mut out = DMatrix::zeros(n, n);
    for i in 0..rank {
        let v = eig.values[i];
        if v <= 0.0 {
            return Err(Error::NonPsd(v));
        }
        let u = eig.vectors.column(i);
        for r in 0..n {
            for c in 0..n {
                out[(r, c)] += u[r] * u[c] / v;
            }
        }
    }
    Ok(SymMatrix::symmetrize(out))
}

fn check_psd(eig: &EigenSystem, rank_tol: f64) -> Result<()> {
    let scale = eig.spectral_radius();
    let min = eig.values[eig.values.len() - 1];
    if min < -rank_tol * scale {
        return Err(Error::NonPsd(min));
    }
    Ok(())
}

/// `tr(A^-1 S_j)` for a positive definite `A` given its Cholesky factor and a
/// penalty block `block` occupying rows/columns `[offset, offset + q)`.
/// Solves only against the `q` columns the block touches: `O(p^2 q)`, the
/// inverse is never formed.
pub fn trace_inv_times(chol: &CholFactor, block: &SymMatrix, offset: usize) -> Result<f64> {
    let p = chol.l_dirty().nrows();
    let q = block.n();
    if offset + q > p {
        return Err(Error::OutOfRange {
            offset,
            offset_end: offset + q,
            p,
        });
    }
    for i in 0..p {
        if chol.l_dirty()[(i, i)] <= 0.0 || !chol.l_dirty()[(i, i)].is_finite() {
            return Err(Error::SingularFactor);
        }
    }
    let mut rhs = DMatrix::zeros(p, q);
    for m in 0..q {
        rhs[(offset + m, m)] = 1.0;
    }
    let x = chol.solve(&rhs); // x[k, m] = (A^-1)[k, offset + m]
    let mut tr = 0.0;
    for k in 0..q {
        for m in 0..q {
            tr += x[(offset + k, m)] * block.as_matrix()[(m, k)];
        }
    }
    Ok(tr)
}

/// Log determinant of a positive definite matrix from its Cholesky factor.
pub fn log_det_chol(chol: &CholFactor) -> f64 {
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..l.nrows() {
        acc += l[(i, i)].ln();
    }
    2.0 * acc
}

/// Eigenvalue-clamping repair: eigenvalues below `floor * max(|e|)` are
/// raised to that level, preserving the eigenvectors. Already positive
/// definite inputs with min eigenvalue above the floor pass through
/// unchanged. Total on symmetric input; a zero matrix is floored at `floor`.
pub fn nearest_pd(h: &SymMatrix, floor: f64) -> SymMatrix {
    let eig = h.eigen(DEFAULT_RANK_TOL);
    let scale = eig.spectral_radius();
    let tau = if scale > 0.0 { floor * scale } else { floor };
    let min = eig.values[eig.values.len() - 1];
    if min >= tau {
        return h.clone();
    }
    let n = h.n();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        d[(i, i)] = eig.values[i].max(tau);
    }
    SymMatrix::symmetrize(&eig.vectors * d * eig.vectors.transpose())
}

/// Seeded random matrix builders shared by tests across modules.
#[cfg(test)]
pub(crate) mod tests_support {
    use super::SymMatrix;
    use nalgebra::DMatrix;
    use rand::RngExt;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    pub(crate) fn random_psd(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> SymMatrix {
        let a = random_matrix(rng, rank, n);
        SymMatrix::from_gram(&a)
    }

    pub(crate) fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
        let a = random_matrix(rng, n + 2, n);
        let mut g = a.transpose() * a;
        for i in 0..n {
            g[(i, i)] += 0.5;
        }
        SymMatrix::symmetrize(g)
    }
}
