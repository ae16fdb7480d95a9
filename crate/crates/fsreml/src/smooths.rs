//! Basis matrices and penalty blocks for smooth terms: P-splines, adaptive
//! smooths with overlapping penalties, cubic regression splines, tensor
//! product interactions and i.i.d. random effect blocks, plus the design
//! assembly that stitches terms into one model matrix with sum-to-zero
//! identifiability constraints absorbed.

use nalgebra::{DMatrix, DVector};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{SymMatrix, DEFAULT_RANK_TOL};
use crate::penalties::{PenaltyBlock, PenaltySet};

/// Kind and shape of one smooth term in a model formula.
#[derive(Debug, Clone, PartialEq)]
pub enum TermKind {
    /// B-spline basis with a single difference penalty.
    Pspline {
        k: usize,
        degree: usize,
        pen_order: usize,
    },
    /// B-spline basis with `n_lambda` overlapping weighted difference
    /// penalties, letting smoothness vary along the covariate.
    Adaptive {
        k: usize,
        degree: usize,
        pen_order: usize,
        n_lambda: usize,
    },
    /// Cubic regression spline with the integrated squared second
    /// derivative penalty.
    Crs { k: usize },
    /// Two-margin tensor product of P-spline bases, one penalty per margin.
    Tensor {
        k: [usize; 2],
        degree: usize,
        pen_order: usize,
    },
    /// Indicator columns for a factor with an identity (ridge) penalty.
    RandEffect,
}

/// One term of a model formula: which covariate column(s) it uses and how
/// the basis is built.
#[derive(Debug, Clone)]
pub struct TermSpec {
    pub label: String,
    pub covariates: Vec<String>,
    pub kind: TermKind,
}

/// Design matrix assembly plan: response, optional intercept, parametric
/// columns, then smooth terms.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub response: String,
    /// Event indicator column for survival models; unused otherwise.
    pub status: Option<String>,
    /// Offset column added to the linear predictor; unused by Gaussian fits.
    pub offset: Option<String>,
    pub intercept: bool,
    pub parametric: Vec<String>,
    pub terms: Vec<TermSpec>,
}

/// A realized term: evaluated basis columns, its penalty blocks with offsets
/// local to those columns, and bookkeeping for identifiability.
#[derive(Debug, Clone)]
pub struct TermRealization {
    pub columns: DMatrix<f64>,
    pub blocks: Vec<PenaltyBlock>,
    /// Dimension of the null space of the summed penalty.
    pub null_dim: usize,
    /// Description of the identifiability transform, if one was applied.
    pub centering: Option<String>,
    /// Knot vector (covariate space) where applicable; level codes for
    /// random effects; empty for tensor products.
    pub knots: Vec<f64>,
}

impl TermRealization {
    pub fn k(&self) -> usize {
        self.columns.ncols()
    }
}

/// Maximum number of coefficients a tensor product may produce.
pub const TENSOR_DIM_CAP: usize = 10_000;

// ---------------------------------------------------------------------------
// B-spline machinery
// ---------------------------------------------------------------------------

/// Extended uniform knot vector for `k` B-splines of `degree` spanning
/// `[a, b]`: `k + degree + 1` equally spaced knots with `degree + 1` knots
/// at or beyond each boundary.
fn uniform_knots(a: f64, b: f64, k: usize, degree: usize) -> Vec<f64> {
    let h = (b - a) / (k - degree) as f64;
    (0..k + degree + 1)
        .map(|i| a + (i as f64 - degree as f64) * h)
        .collect()
}

/// Non-vanishing B-spline values at `x`: returns the first active basis
/// index and the `degree + 1` values (Cox-de Boor triangular recurrence).
fn bspline_nonzero(knots: &[f64], degree: usize, k: usize, x: f64) -> (usize, Vec<f64>) {
    // Locate the knot span, treating the right boundary as inclusive.
    let lo = degree;
    let hi = k - 1;
    let mut span = hi;
    if x < knots[hi] {
        span = lo;
        while span < hi && x >= knots[span + 1] {
            span += 1;
        }
    }
    let mut vals = vec![0.0; degree + 1];
    vals[0] = 1.0;
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = vals[r] / (right[r + 1] + left[j - r]);
            vals[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        vals[j] = saved;
    }
    (span - degree, vals)
}

/// Dense `n x k` B-spline design over the given knot vector.
fn bspline_design(x: &[f64], knots: &[f64], degree: usize, k: usize) -> DMatrix<f64> {
    let a = knots[degree];
    let b = knots[k];
    let mut out = DMatrix::zeros(x.len(), k);
    for (i, &xi) in x.iter().enumerate() {
        let xc = xi.clamp(a, b);
        let (start, vals) = bspline_nonzero(knots, degree, k, xc);
        for (j, v) in vals.iter().enumerate() {
            out[(i, start + j)] = *v;
        }
    }
    out
}

/// Difference matrix of the given order: `(k - order) x k`.
fn difference_matrix(k: usize, order: usize) -> DMatrix<f64> {
    let mut d = DMatrix::identity(k, k);
    for step in 0..order {
        let rows = k - step - 1;
        let mut next = DMatrix::zeros(rows, k);
        for i in 0..rows {
            for j in 0..k {
                next[(i, j)] = d[(i + 1, j)] - d[(i, j)];
            }
        }
        d = next;
    }
    d
}

// ---------------------------------------------------------------------------
// Term constructors
// ---------------------------------------------------------------------------

fn covariate_range(x: &[f64], name: &str) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in x {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return Err(Error::DegenerateCovariate(name.to_string()));
    }
    Ok((lo, hi))
}

/// B-spline design on equally spaced knots with a single order-`pen_order`
/// difference penalty `D'D`; the penalty null space holds the polynomials
/// of degree below `pen_order`.
pub fn build_pspline(
    x: &[f64],
    k: usize,
    degree: usize,
    pen_order: usize,
    label: &str,
) -> Result<TermRealization> {
    if !(1..=3).contains(&pen_order) {
        return Err(Error::Invalid(format!(
            "penalty order {pen_order} outside 1..=3"
        )));
    }
    if k <= degree + 1 || k < pen_order + 2 {
        return Err(Error::InsufficientBasis {
            k,
            need: format!("degree {degree} P-spline with order {pen_order} penalty"),
        });
    }
    let (lo, hi) = covariate_range(x, label)?;
    let knots = uniform_knots(lo, hi, k, degree);
    let columns = bspline_design(x, &knots, degree, k);
    let d = difference_matrix(k, pen_order);
    let penalty = SymMatrix::from_gram(&d);
    Ok(TermRealization {
        columns,
        blocks: vec![PenaltyBlock::new(penalty, 0, label)],
        null_dim: pen_order,
        centering: None,
        knots,
    })
}

/// P-spline basis with `n_lambda` overlapping penalties
/// `S_j = D' diag(b_j) D`, where the weights `b_j` are a partition-of-unity
/// B-spline basis evaluated at the difference locations, so that
/// `sum_j S_j = D'D` exactly. `n_lambda = 1` reduces to [`build_pspline`].
pub fn build_adaptive(
    x: &[f64],
    k: usize,
    degree: usize,
    pen_order: usize,
    n_lambda: usize,
    label: &str,
) -> Result<TermRealization> {
    if n_lambda == 0 {
        return Err(Error::Invalid("adaptive smooth needs n_lambda >= 1".into()));
    }
    if k < n_lambda + pen_order {
        return Err(Error::InsufficientBasis {
            k,
            need: format!("adaptive smooth with {n_lambda} penalties of order {pen_order}"),
        });
    }
    let base = build_pspline(x, k, degree, pen_order, label)?;
    if n_lambda == 1 {
        return Ok(base);
    }
    let d = difference_matrix(k, pen_order);
    let rows = k - pen_order;
    // Weight basis over the difference locations mapped to [0, 1]. Degree 2
    // needs n_lambda >= 3 for a positive knot spacing; hat functions cover
    // the two-penalty case.
    let wdeg = (n_lambda - 1).min(2);
    let wknots = uniform_knots(0.0, 1.0, n_lambda, wdeg);
    let locs: Vec<f64> = (0..rows)
        .map(|i| {
            if rows == 1 {
                0.5
            } else {
                i as f64 / (rows - 1) as f64
            }
        })
        .collect();
    let weights = bspline_design(&locs, &wknots, wdeg, n_lambda);
    let mut blocks = Vec::with_capacity(n_lambda);
    for j in 0..n_lambda {
        let mut wd = DMatrix::zeros(rows, k);
        for r in 0..rows {
            let w = weights[(r, j)];
            for c in 0..k {
                wd[(r, c)] = w * d[(r, c)];
            }
        }
        let s = SymMatrix::symmetrize(d.transpose() * wd);
        blocks.push(PenaltyBlock::new(s, 0, format!("{label}:{}", j + 1)));
    }
    Ok(TermRealization {
        columns: base.columns,
        blocks,
        null_dim: pen_order,
        centering: None,
        knots: base.knots,
    })
}

/// Cubic regression spline on `k` knots at quantiles of the unique covariate
/// values, with the exact integrated squared second derivative penalty
/// (banded construction from the knot spacings). The basis is cardinal:
/// coefficient `j` is the spline value at knot `j`.
pub fn build_crs(x: &[f64], k: usize, label: &str) -> Result<TermRealization> {
    if k < 3 {
        return Err(Error::InsufficientBasis {
            k,
            need: "cubic regression spline (k >= 3)".into(),
        });
    }
    covariate_range(x, label)?;
    let mut uniq: Vec<f64> = x.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    if uniq.len() < k {
        return Err(Error::DuplicateKnots(label.to_string()));
    }
    let m = uniq.len();
    let knots: Vec<f64> = (0..k)
        .map(|j| {
            let pos = j as f64 / (k - 1) as f64 * (m - 1) as f64;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            if lo + 1 < m {
                uniq[lo] * (1.0 - frac) + uniq[lo + 1] * frac
            } else {
                uniq[m - 1]
            }
        })
        .collect();
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    if h.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::DuplicateKnots(label.to_string()));
    }

    // delta = B^-1 D beta gives the spline's second derivatives at the
    // interior knots (natural boundary conditions at the ends).
    let mut dmat = DMatrix::zeros(k - 2, k);
    let mut bmat = DMatrix::zeros(k - 2, k - 2);
    for i in 0..k - 2 {
        dmat[(i, i)] = 1.0 / h[i];
        dmat[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
        dmat[(i, i + 2)] = 1.0 / h[i + 1];
        bmat[(i, i)] = (h[i] + h[i + 1]) / 3.0;
        if i + 1 < k - 2 {
            bmat[(i, i + 1)] = h[i + 1] / 6.0;
            bmat[(i + 1, i)] = h[i + 1] / 6.0;
        }
    }
    let chol = SymMatrix::symmetrize(bmat.clone())
        .cholesky()
        .map_err(|_| Error::DuplicateKnots(label.to_string()))?;
    let f_interior = chol.solve(&dmat); // (k-2) x k
    let mut f_full = DMatrix::zeros(k, k);
    for i in 0..k - 2 {
        for j in 0..k {
            f_full[(i + 1, j)] = f_interior[(i, j)];
        }
    }
    let penalty = SymMatrix::symmetrize(dmat.transpose() * &f_interior);

    let mut columns = DMatrix::zeros(x.len(), k);
    for (row, &xi) in x.iter().enumerate() {
        let xc = xi.clamp(knots[0], knots[k - 1]);
        let mut j = match knots.binary_search_by(|t| t.total_cmp(&xc)) {
            Ok(pos) => pos,
            Err(pos) => pos.saturating_sub(1),
        };
        if j >= k - 1 {
            j = k - 2;
        }
        let hj = h[j];
        let dl = knots[j + 1] - xc;
        let dr = xc - knots[j];
        let am = dl / hj;
        let ap = dr / hj;
        let cm = (dl * dl * dl / hj - hj * dl) / 6.0;
        let cp = (dr * dr * dr / hj - hj * dr) / 6.0;
        columns[(row, j)] += am;
        columns[(row, j + 1)] += ap;
        for c in 0..k {
            columns[(row, c)] += cm * f_full[(j, c)] + cp * f_full[(j + 1, c)];
        }
    }
    Ok(TermRealization {
        columns,
        blocks: vec![PenaltyBlock::new(penalty, 0, label)],
        null_dim: 2,
        centering: None,
        knots,
    })
}

/// Kronecker product `a (x) b`.
fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let v = a[(i, j)];
            for r in 0..br {
                for c in 0..bc {
                    out[(i * br + r, j * bc + c)] = v * b[(r, c)];
                }
            }
        }
    }
    out
}

/// Tensor product of two realized margins: row-wise Kronecker design with
/// blocks `S_x (x) I` and `I (x) S_z`, one smoothing parameter per margin.
/// Margins must each carry a single penalty block.
pub fn build_tensor(
    mx: &TermRealization,
    mz: &TermRealization,
    label: &str,
) -> Result<TermRealization> {
    let (kx, kz) = (mx.k(), mz.k());
    if kx * kz > TENSOR_DIM_CAP {
        return Err(Error::DimensionOverflow {
            got: kx * kz,
            cap: TENSOR_DIM_CAP,
        });
    }
    if mx.blocks.len() != 1 || mz.blocks.len() != 1 {
        return Err(Error::Invalid(
            "tensor margins must each have a single penalty".into(),
        ));
    }
    if mx.columns.nrows() != mz.columns.nrows() {
        return Err(Error::DimensionMismatch(
            "tensor margins built on different row counts".into(),
        ));
    }
    let n = mx.columns.nrows();
    let mut columns = DMatrix::zeros(n, kx * kz);
    for i in 0..n {
        for a in 0..kx {
            let v = mx.columns[(i, a)];
            for b in 0..kz {
                columns[(i, a * kz + b)] = v * mz.columns[(i, b)];
            }
        }
    }
    let sx = kron(mx.blocks[0].matrix.as_matrix(), &DMatrix::identity(kz, kz));
    let sz = kron(&DMatrix::identity(kx, kx), mz.blocks[0].matrix.as_matrix());
    let blocks = vec![
        PenaltyBlock::new(SymMatrix::symmetrize(sx), 0, format!("{label}:1")),
        PenaltyBlock::new(SymMatrix::symmetrize(sz), 0, format!("{label}:2")),
    ];
    Ok(TermRealization {
        columns,
        blocks,
        null_dim: mx.null_dim * mz.null_dim,
        centering: None,
        knots: Vec::new(),
    })
}

/// Indicator design for a factor with an identity penalty: an i.i.d.
/// Gaussian random effect per level. Level codes are the sorted distinct
/// covariate values.
pub fn build_randeffect(levels: &[f64], label: &str) -> Result<TermRealization> {
    let mut codes: Vec<f64> = levels.to_vec();
    codes.sort_by(f64::total_cmp);
    codes.dedup();
    let l = codes.len();
    if l < 2 {
        return Err(Error::SingleLevel);
    }
    let mut columns = DMatrix::zeros(levels.len(), l);
    for (i, v) in levels.iter().enumerate() {
        let j = codes
            .binary_search_by(|c| c.total_cmp(v))
            .map_err(|_| Error::Invalid(format!("level lookup failed for '{label}'")))?;
        columns[(i, j)] = 1.0;
    }
    Ok(TermRealization {
        columns,
        blocks: vec![PenaltyBlock::new(SymMatrix::identity(l), 0, label)],
        null_dim: 0,
        centering: None,
        knots: codes,
    })
}

/// Realizes a single term spec against the data.
pub fn realize_term(term: &TermSpec, data: &Dataset) -> Result<TermRealization> {
    match &term.kind {
        TermKind::Pspline {
            k,
            degree,
            pen_order,
        } => {
            let x = data.finite_column(&term.covariates[0])?;
            build_pspline(x, *k, *degree, *pen_order, &term.label)
        }
        TermKind::Adaptive {
            k,
            degree,
            pen_order,
            n_lambda,
        } => {
            let x = data.finite_column(&term.covariates[0])?;
            build_adaptive(x, *k, *degree, *pen_order, *n_lambda, &term.label)
        }
        TermKind::Crs { k } => {
            let x = data.finite_column(&term.covariates[0])?;
            build_crs(x, *k, &term.label)
        }
        TermKind::Tensor {
            k,
            degree,
            pen_order,
        } => {
            if term.covariates.len() != 2 {
                return Err(Error::Invalid(format!(
                    "tensor term '{}' needs two covariates",
                    term.label
                )));
            }
            let x = data.finite_column(&term.covariates[0])?;
            let z = data.finite_column(&term.covariates[1])?;
            let mx = build_pspline(x, k[0], *degree, *pen_order, &format!("{}x", term.label))?;
            let mz = build_pspline(z, k[1], *degree, *pen_order, &format!("{}z", term.label))?;
            build_tensor(&mx, &mz, &term.label)
        }
        TermKind::RandEffect => {
            let x = data.finite_column(&term.covariates[0])?;
            build_randeffect(x, &term.label)
        }
    }
}

// ---------------------------------------------------------------------------
// Design assembly
// ---------------------------------------------------------------------------

/// Placement of one term's columns inside the assembled design.
#[derive(Debug, Clone)]
pub struct TermLayout {
    pub label: String,
    pub col_start: usize,
    pub n_cols: usize,
    pub null_dim: usize,
    pub centered: bool,
}

/// Assembled model: design matrix, penalty set over its columns, and the
/// column layout needed for reporting.
#[derive(Debug, Clone)]
pub struct AssembledDesign {
    pub x: DMatrix<f64>,
    pub penalties: PenaltySet,
    pub layout: Vec<TermLayout>,
    pub intercept: bool,
    pub parametric: Vec<String>,
    pub warnings: Vec<String>,
}

impl AssembledDesign {
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Total null space dimension of the penalty total within the design.
    pub fn null_dim(&self) -> usize {
        self.p() - self.penalties.structural_rank(DEFAULT_RANK_TOL)
    }
}

/// Orthonormal basis of the hyperplane orthogonal to `w` (a `k x (k-1)`
/// matrix), via one Householder reflection.
fn sum_to_zero_basis(w: &DVector<f64>) -> DMatrix<f64> {
    let k = w.len();
    let norm = w.norm();
    let mut v = w.clone();
    v[0] += w[0].signum() * norm;
    let vtv = v.dot(&v);
    let mut h = DMatrix::identity(k, k);
    if vtv > 0.0 {
        for i in 0..k {
            for j in 0..k {
                h[(i, j)] -= 2.0 * v[i] * v[j] / vtv;
            }
        }
    }
    h.columns(1, k - 1).into_owned()
}

/// Applies the sum-to-zero constraint `1'C gamma = 0` to a realization by
/// reparameterizing onto an orthonormal basis of the constraint null space;
/// penalties transform congruently so they stay PSD.
fn center_term(real: TermRealization) -> TermRealization {
    let k = real.k();
    let col_sums = DVector::from_iterator(k, (0..k).map(|j| real.columns.column(j).sum()));
    if col_sums.norm() <= 1e-12 {
        return real; // already orthogonal to the intercept
    }
    let z = sum_to_zero_basis(&col_sums);
    let columns = &real.columns * &z;
    let blocks = real
        .blocks
        .iter()
        .map(|b| {
            let s = SymMatrix::symmetrize(z.transpose() * b.matrix.as_matrix() * &z);
            PenaltyBlock::new(s, 0, b.label.clone())
        })
        .collect();
    TermRealization {
        columns,
        blocks,
        null_dim: real.null_dim.saturating_sub(1),
        centering: Some("sum-to-zero (Householder reparameterization)".into()),
        knots: real.knots,
    }
}

/// Builds the full design matrix and penalty set for a model spec:
/// intercept and parametric columns first, then each term's columns with
/// sum-to-zero centering applied to every smooth sharing the intercept
/// (random effect blocks are left alone; their penalty is full rank).
pub fn assemble_design(spec: &ModelSpec, data: &Dataset) -> Result<AssembledDesign> {
    assemble_design_with(spec, data, spec.intercept)
}

/// [`assemble_design`] with the smooth-centering decision made explicitly.
/// Likelihoods that are invariant to constant shifts of the linear
/// predictor (the Cox partial likelihood) need centered smooths even
/// though they carry no intercept column.
pub fn assemble_design_with(
    spec: &ModelSpec,
    data: &Dataset,
    center_smooths: bool,
) -> Result<AssembledDesign> {
    let n = data.n_rows();
    if n == 0 {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let mut warnings = Vec::new();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    if spec.intercept {
        cols.push(DVector::from_element(n, 1.0));
    }
    for name in &spec.parametric {
        let c = data.finite_column(name)?;
        cols.push(DVector::from_column_slice(c));
    }

    let mut layout = Vec::new();
    let mut blocks = Vec::new();
    let mut col_start = cols.len();
    let mut term_cols: Vec<DMatrix<f64>> = Vec::new();
    for term in &spec.terms {
        let mut real = realize_term(term, data)?;
        let center = center_smooths && !matches!(term.kind, TermKind::RandEffect);
        if center {
            real = center_term(real);
        }
        for b in &real.blocks {
            blocks.push(PenaltyBlock::new(
                b.matrix.clone(),
                col_start + b.offset,
                b.label.clone(),
            ));
        }
        layout.push(TermLayout {
            label: term.label.clone(),
            col_start,
            n_cols: real.k(),
            null_dim: real.null_dim,
            centered: real.centering.is_some(),
        });
        col_start += real.k();
        term_cols.push(real.columns);
    }

    let p = col_start;
    if n < p {
        warnings.push(format!("n = {n} below p = {p}; fit may be unstable"));
    }
    let mut x = DMatrix::zeros(n, p);
    for (j, c) in cols.iter().enumerate() {
        x.set_column(j, c);
    }
    let mut at = cols.len();
    for tc in &term_cols {
        for j in 0..tc.ncols() {
            x.set_column(at + j, &tc.column(j));
        }
        at += tc.ncols();
    }
    for v in x.iter() {
        if !v.is_finite() {
            return Err(Error::NonFiniteData("design matrix".into()));
        }
    }
    let penalties = PenaltySet::new(blocks, p)?;
    Ok(AssembledDesign {
        x,
        penalties,
        layout,
        intercept: spec.intercept,
        parametric: spec.parametric.clone(),
        warnings,
    })
}
