//! Comparison apparatus for the smoothing updates: the EM Q-function, plain
//! and accelerated EM steps as one-dimensional root finding problems, the
//! spectral form of the trace curve `gamma(lambda)`, and the step-ordering
//! experiment that tabulates all updates against the 1-d restricted
//! likelihood optimum.
//!
//! Everything here works in the single-parameter frame: one penalty block
//! `lambda_j S_j` is varied while all other smoothing parameters stay fixed.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{reml_gaussian, solve_pls};
use crate::linalg::{self, SymMatrix};
use crate::penalties::{embed, PenaltySet};

/// Borrowed handle on a Gaussian penalized regression problem with known
/// scale, the frame in which the update comparisons are defined.
#[derive(Debug, Clone, Copy)]
pub struct GaussianContext<'a> {
    pub x: &'a DMatrix<f64>,
    pub y: &'a DVector<f64>,
    pub set: &'a PenaltySet,
    pub sigma2: f64,
}

/// Single-block root finding problem at a reference point `lambda_prime`:
/// the rank `k` of the varied block, the scaled quadratic form `b`, and the
/// spectrum `Lambda_i` giving `gamma(lambda) = sum_i Lambda_i / (1 +
/// lambda Lambda_i)`.
#[derive(Debug, Clone)]
pub struct SingleBlockProblem<'a> {
    pub k: usize,
    pub b: f64,
    pub spectrum: Vec<f64>,
    pub lambda_prime: f64,
    ctx: GaussianContext<'a>,
    /// Full smoothing vector at the reference point.
    lambda_ref: Vec<f64>,
    /// Index of the varied block.
    target: usize,
}

impl<'a> SingleBlockProblem<'a> {
    /// Builds the problem at `lambda_ref` for block `target`: solves the
    /// penalized regression, forms `B` with `B'B = S_{-j}`, takes the QR of
    /// the stacked `[X; B]` and eigendecomposes `R^-T S_j R^-1`.
    pub fn new(ctx: GaussianContext<'a>, lambda_ref: &[f64], target: usize) -> Result<Self> {
        let set = ctx.set;
        if target >= set.len() {
            return Err(Error::Invalid(format!(
                "block index {target} out of range ({} blocks)",
                set.len()
            )));
        }
        let p = set.p();
        let s_lambda = set.assemble(lambda_ref)?;
        let (beta, _) = solve_pls(ctx.x, ctx.y, &s_lambda)?;
        let block = set.block(target);
        let b = block.quad_form(&beta) / ctx.sigma2;
        let k = block.matrix.eigen(linalg::DEFAULT_RANK_TOL).rank;

        // S_{-j} square root rows from its eigendecomposition.
        let mut s_minus = DMatrix::zeros(p, p);
        for (j, blk) in set.blocks().iter().enumerate() {
            if j == target {
                continue;
            }
            let e = embed(blk, p)?;
            s_minus += e.as_matrix() * lambda_ref[j];
        }
        let s_minus = SymMatrix::symmetrize(s_minus);
        let eig = s_minus.eigen(linalg::DEFAULT_RANK_TOL);
        let root_rows = eig.rank;
        let n = ctx.x.nrows();
        let mut stacked = DMatrix::zeros(n + root_rows, p);
        stacked.view_mut((0, 0), (n, p)).copy_from(ctx.x);
        for r in 0..root_rows {
            let scale = eig.values[r].sqrt();
            for c in 0..p {
                stacked[(n + r, c)] = scale * eig.vectors[(c, r)];
            }
        }
        let qr = stacked.qr();
        let r = qr.r();
        let s_j = embed(block, p)?;
        let t1 = r
            .transpose()
            .solve_lower_triangular(s_j.as_matrix())
            .ok_or_else(|| Error::NotPd("R factor singular in spectrum construction".into()))?;
        let w = r
            .transpose()
            .solve_lower_triangular(&t1.transpose())
            .ok_or_else(|| Error::NotPd("R factor singular in spectrum construction".into()))?;
        let m = SymMatrix::symmetrize(w.transpose());
        let spec_eig = m.eigen(linalg::DEFAULT_RANK_TOL);
        if spec_eig.rank != k {
            return Err(Error::RankMismatch(format!(
                "spectrum has {} positive values, block rank is {k}",
                spec_eig.rank
            )));
        }
        let spectrum: Vec<f64> = spec_eig.values.iter().cloned().take(k).collect();
        Ok(SingleBlockProblem {
            k,
            b,
            spectrum,
            lambda_prime: lambda_ref[target],
            ctx,
            lambda_ref: lambda_ref.to_vec(),
            target,
        })
    }

    /// Test constructor bypassing the decomposition; used to probe limit
    /// behavior of the steps.
    #[cfg(test)]
    pub(crate) fn synthetic(k: usize, b: f64, spectrum: Vec<f64>, lambda_prime: f64) -> Self {
        // a context is required structurally but not touched by the pure
        // step computations; leak tiny statics for the borrows
        use std::sync::OnceLock;
        static X: OnceLock<DMatrix<f64>> = OnceLock::new();
        static Y: OnceLock<DVector<f64>> = OnceLock::new();
        static SET: OnceLock<PenaltySet> = OnceLock::new();
        let x = X.get_or_init(|| DMatrix::identity(1, 1));
        let y = Y.get_or_init(|| DVector::zeros(1));
        let set = SET.get_or_init(|| PenaltySet::empty(1));
        SingleBlockProblem {
            k,
            b,
            spectrum,
            lambda_prime,
            ctx: GaussianContext {
                x,
                y,
                set,
                sigma2: 1.0,
            },
            lambda_ref: Vec::new(),
            target: 0,
        }
    }

    /// Full smoothing vector with the varied block set to `lambda`.
    fn lambda_at(&self, lambda: f64) -> Vec<f64> {
        let mut v = self.lambda_ref.clone();
        v[self.target] = lambda;
        v
    }

    /// Restricted likelihood along the varied coordinate.
    pub fn lr_at(&self, lambda: f64) -> Result<f64> {
        reml_gaussian(
            self.ctx.x,
            self.ctx.y,
            self.ctx.set,
            &self.lambda_at(lambda),
            self.ctx.sigma2,
        )
    }

    /// `gamma(lambda) = sum_{i=1}^k Lambda_i / (1 + lambda Lambda_i)`,
    /// the spectral form of `tr((X'X + S_lambda)^-1 S_j)` along the varied
    /// coordinate.
    pub fn spectral_gamma(&self, lambda: f64) -> f64 {
        self.spectrum
            .iter()
            .map(|&l| l / (1.0 + lambda * l))
            .sum()
    }

    /// Plain EM step: solves `k / lambda = b + gamma(lambda')`.
    pub fn em_step(&self) -> Result<f64> {
        let denom = self.b + self.spectral_gamma(self.lambda_prime);
        if denom <= 0.0 {
            return Err(Error::DegenerateB);
        }
        Ok(self.k as f64 / denom)
    }

    /// Accelerated EM step: solves `k / lambda = b + gamma(lambda)` by
    /// bisection on log lambda. The left side minus the right is strictly
    /// decreasing, so the root is unique; it exists only for `b > 0`.
    pub fn accelerated_em_step(&self) -> Result<f64> {
        if self.b <= 0.0 {
            return Err(Error::NoRoot);
        }
        let g = |t: f64| -> f64 {
            let lambda = t.exp();
            self.k as f64 / lambda - self.b - self.spectral_gamma(lambda)
        };
        let mut lo = self.lambda_prime.ln();
        let mut hi = lo;
        // expand the bracket around the reference point
        let mut width = 1.0;
        while g(lo) < 0.0 {
            lo -= width;
            width *= 2.0;
            if width > 1e6 {
                return Err(Error::NoRoot);
            }
        }
        width = 1.0;
        while g(hi) > 0.0 {
            hi += width;
            width *= 2.0;
            if width > 1e6 {
                return Err(Error::NoRoot);
            }
        }
        for _ in 0..90 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok((0.5 * (lo + hi)).exp())
    }

    /// The multiplicative update in root form: solves
    /// `k / lambda = b + gamma(lambda') lambda' / lambda`, giving
    /// `lambda* = (k - lambda' gamma(lambda')) / b`.
    pub fn fs_step(&self) -> Result<f64> {
        if self.b <= 0.0 {
            return Err(Error::DegenerateB);
        }
        let gp = self.spectral_gamma(self.lambda_prime);
        Ok((self.k as f64 - self.lambda_prime * gp) / self.b)
    }

    /// 1-d restricted likelihood maximizer along the varied coordinate:
    /// golden section on log lambda over `[lambda'/1e6, lambda' * 1e6]`.
    pub fn reml_1d_optimum(&self) -> Result<f64> {
        let (mut a, mut b) = (
            self.lambda_prime.ln() - 6.0 * std::f64::consts::LN_10,
            self.lambda_prime.ln() + 6.0 * std::f64::consts::LN_10,
        );
        let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
        let f = |t: f64| self.lr_at(t.exp());
        while b - a > 1e-8 {
            let c = b - phi * (b - a);
            let d = a + phi * (b - a);
            if f(c)? >= f(d)? {
                b = d;
            } else {
                a = c;
            }
        }
        Ok((0.5 * (a + b)).exp())
    }
}

/// The EM Q-function of the model at reference point `lambda_prime`:
/// `Q = -(||y - X b'||^2 + b'' S_lambda b')/(2 s2) + log|S_lambda/s2|_+ / 2
///      - tr((X'X + S_{lambda'})^-1 S_lambda)/2`
/// where `b'` is the penalized solution at `lambda_prime`.
pub fn q_function(
    ctx: &GaussianContext<'_>,
    lambda_prime: &[f64],
    lambda: &[f64],
) -> Result<f64> {
    let set = ctx.set;
    let s_prime = set.assemble(lambda_prime)?;
    let (beta, chol) = solve_pls(ctx.x, ctx.y, &s_prime)?;
    let rss = (ctx.y - ctx.x * &beta).norm_squared();
    let s_lambda = set.assemble(lambda)?;
    let pen = s_lambda.quad_form(&beta);
    let rank = set.structural_rank(linalg::DEFAULT_RANK_TOL);
    let log_det_s = linalg::log_pseudo_det_fixed_rank(&s_lambda, rank)?;
    let mut tr = 0.0;
    for (j, blk) in set.blocks().iter().enumerate() {
        tr += lambda[j] * linalg::trace_inv_times(&chol, &blk.matrix, blk.offset)?;
    }
    Ok(-(rss + pen) / (2.0 * ctx.sigma2)
        + (log_det_s - rank as f64 * ctx.sigma2.ln()) / 2.0
        - tr / 2.0)
}

/// One row of the step-ordering experiment.
#[derive(Debug, Clone)]
pub struct StepOrderingRow {
    pub lambda_prime: f64,
    pub em: f64,
    pub acc_em: f64,
    pub fs: f64,
    pub reml_opt: f64,
    pub lr_prime: f64,
    pub lr_em: f64,
    pub lr_acc_em: f64,
    pub lr_fs: f64,
    pub lr_reml_opt: f64,
}

/// Runs all three updates plus the 1-d restricted likelihood optimum from
/// every reference point in `grid` (the varied block's other smoothing
/// parameters stay at `lambda_base`). Rows come back in grid order.
pub fn step_ordering_experiment(
    ctx: GaussianContext<'_>,
    lambda_base: &[f64],
    target: usize,
    grid: &[f64],
) -> Result<Vec<StepOrderingRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for &lp in grid {
        let mut lambda_ref = lambda_base.to_vec();
        lambda_ref[target] = lp;
        let prob = SingleBlockProblem::new(ctx, &lambda_ref, target)?;
        let em = prob.em_step()?;
        let acc_em = prob.accelerated_em_step()?;
        let fs = prob.fs_step()?;
        let reml_opt = prob.reml_1d_optimum()?;
        rows.push(StepOrderingRow {
            lambda_prime: lp,
            em,
            acc_em,
            fs,
            reml_opt,
            lr_prime: prob.lr_at(lp)?,
            lr_em: prob.lr_at(em)?,
            lr_acc_em: prob.lr_at(acc_em)?,
            lr_fs: prob.lr_at(fs)?,
            lr_reml_opt: prob.lr_at(reml_opt)?,
        });
    }
    Ok(rows)
}

/// Log-spaced grid of `points` values covering `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .collect()
}
