//! Fellner-Schall estimation for any Fisher-regular likelihood: safeguarded
//! Newton inner solve, Laplace-approximate restricted likelihood, and the
//! general multiplicative update with observed/expected Hessian policy and
//! positive definite repair.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::EPS_BETA;
use crate::likelihoods::LikelihoodModel;
use crate::linalg::{self, CholFactor, SymMatrix};
use crate::penalties::PenaltySet;

const LN_2PI: f64 = 1.8378770664093453;

/// Which curvature matrix stands in for the posterior precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianMode {
    /// Observed Hessian, repaired to positive definite when needed.
    Observed,
    /// Expected (Fisher) information, when the family provides it.
    Expected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepControl {
    Off,
    Halving,
}

#[derive(Debug, Clone)]
pub struct GeneralOptions {
    pub lambda_init: f64,
    pub tol_rel: f64,
    pub tol_lambda: f64,
    pub max_iter: usize,
    pub k_max: usize,
    pub step_control: StepControl,
    pub lambda_cap: f64,
    pub rank_tol: f64,
    /// Relative eigenvalue floor for positive definite repair.
    pub pd_floor: f64,
    /// Inner Newton iteration cap.
    pub newton_max_iter: usize,
    /// Inner convergence: `||grad|| <= newton_tol * (|objective| + 1)`.
    pub newton_tol: f64,
    /// Update the scale parameter each outer iteration for families that
    /// have one.
    pub estimate_scale: bool,
}

impl Default for GeneralOptions {
    fn default() -> Self {
        GeneralOptions {
            lambda_init: 1.0,
            tol_rel: 1e-8,
            tol_lambda: 1e-6,
            max_iter: 200,
            k_max: 30,
            step_control: StepControl::Halving,
            lambda_cap: 1e12,
            rank_tol: linalg::DEFAULT_RANK_TOL,
            pd_floor: 1e-8,
            newton_max_iter: 100,
            newton_tol: 1e-8,
            estimate_scale: true,
        }
    }
}

/// Result of the penalized Newton solve.
#[derive(Debug)]
pub struct NewtonFit {
    pub beta: DVector<f64>,
    /// Mode Hessian of the log likelihood at the optimum (no penalty).
    pub hessian: SymMatrix,
    /// Cholesky factor of the (repaired) `H + S_lambda`.
    pub chol: CholFactor,
    /// Positive definite repair engaged at least once during the solve.
    pub repaired: bool,
    pub iterations: usize,
}

/// One accepted outer step of the general iteration.
#[derive(Debug, Clone)]
pub struct GeneralTrajectoryStep {
    pub lambda: Vec<f64>,
    pub laml: f64,
    pub halvings: usize,
    pub mode: HessianMode,
    pub repaired: bool,
}

#[derive(Debug)]
pub struct GeneralFit {
    pub beta: DVector<f64>,
    pub lambda: Vec<f64>,
    /// Estimated scale parameter, for families that carry one.
    pub phi: Option<f64>,
    pub laml: f64,
    pub edf: f64,
    pub edf_diag: Vec<f64>,
    pub chol: CholFactor,
    pub trajectory: Vec<GeneralTrajectoryStep>,
    pub iterations: usize,
    pub converged: bool,
    pub stalled: bool,
    /// Outer iterations on which positive definite repair engaged.
    pub repair_count: usize,
    pub mode: HessianMode,
}

/// Cholesky of `H + S_lambda` with eigenvalue-clamping repair on failure or
/// near-singularity (diagonal ratio of the factor below `sqrt(floor)`).
fn chol_with_repair(a: &SymMatrix, floor: f64) -> Result<(CholFactor, bool)> {
    if let Ok(chol) = a.cholesky() {
        let l = chol.l_dirty();
        let mut dmin = f64::INFINITY;
        let mut dmax = 0.0_f64;
        for i in 0..l.nrows() {
            dmin = dmin.min(l[(i, i)]);
            dmax = dmax.max(l[(i, i)]);
        }
        if dmin > 0.0 && dmin / dmax > floor.sqrt() {
            return Ok((chol, false));
        }
    }
    let repaired = linalg::nearest_pd(a, floor);
    let chol = repaired
        .cholesky()
        .map_err(|_| Error::NotPd("repair failed to produce a PD matrix".into()))?;
    Ok((chol, true))
}

fn mode_hessian(
    model: &dyn LikelihoodModel,
    beta: &DVector<f64>,
    mode: HessianMode,
) -> SymMatrix {
    match mode {
        HessianMode::Observed => model.hessian(beta),
        HessianMode::Expected => model
            .expected_hessian(beta)
            .unwrap_or_else(|| model.hessian(beta)),
    }
}

/// Maximizes `l(beta) - beta' S_lambda beta / 2` by Newton's method with
/// step halving on the penalized objective and positive definite repair of
/// the curvature when it is indefinite or near-singular.
pub fn newton_fit(
    model: &dyn LikelihoodModel,
    s_lambda: &SymMatrix,
    beta0: &DVector<f64>,
    mode: HessianMode,
    opts: &GeneralOptions,
) -> Result<NewtonFit> {
    let p = model.n_coef();
    if beta0.len() != p || beta0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("invalid Newton starting point".into()));
    }
    let objective = |b: &DVector<f64>| model.loglik(b) - 0.5 * s_lambda.quad_form(b);
    let mut beta = beta0.clone();
    let mut f = objective(&beta);
    let mut repaired_any = false;

    for iter in 0..opts.newton_max_iter {
        let g_pen = model.grad(&beta) - s_lambda.as_matrix() * &beta;
        let h = mode_hessian(model, &beta, mode);
        let a = h.add(s_lambda);
        let (chol, repaired) = chol_with_repair(&a, opts.pd_floor)?;
        repaired_any |= repaired;

        if g_pen.norm() <= opts.newton_tol * (f.abs() + 1.0) {
            return Ok(NewtonFit {
                beta,
                hessian: h,
                chol,
                repaired: repaired_any,
                iterations: iter,
            });
        }

        let delta = chol.solve(&g_pen);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.k_max {
            let cand = &beta + &delta * scale;
            let fc = objective(&cand);
            if fc.is_finite() && fc > f {
                beta = cand;
                f = fc;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // No ascent along the Newton direction: treat the current point
            // as converged if the gradient is small at a looser tolerance.
            if g_pen.norm() <= opts.newton_tol.sqrt() * (f.abs() + 1.0) {
                return Ok(NewtonFit {
                    beta,
                    hessian: h,
                    chol,
                    repaired: repaired_any,
                    iterations: iter,
                });
            }
            return Err(Error::NewtonDiverged(iter));
        }
    }
    Err(Error::NewtonDiverged(opts.newton_max_iter))
}

/// Laplace-approximate restricted likelihood value from a completed inner
/// solve:
/// `l_r = l(b) - b'Sb/2 + log|S|_+ /2 - log|H + S| /2 + M_p log(2 pi)/2`.
pub fn laml_value(
    model: &dyn LikelihoodModel,
    nt: &NewtonFit,
    set: &PenaltySet,
    lambda: &[f64],
) -> Result<f64> {
    let p = model.n_coef();
    let (log_det_s, rank_s) = if set.is_empty() {
        (0.0, 0)
    } else {
        let rank = set.structural_rank(linalg::DEFAULT_RANK_TOL);
        let s = set.assemble(lambda)?;
        (linalg::log_pseudo_det_fixed_rank(&s, rank)?, rank)
    };
    let m_p = p - rank_s;
    let s_lambda = set.assemble_or_empty(lambda, p)?;
    let pen = s_lambda.quad_form(&nt.beta);
    Ok(model.loglik(&nt.beta) - pen / 2.0 + log_det_s / 2.0 - linalg::log_det_chol(&nt.chol) / 2.0
        + m_p as f64 * LN_2PI / 2.0)
}

/// Convenience wrapper: inner solve from `beta0` then the Laplace value.
pub fn laml(
    model: &dyn LikelihoodModel,
    set: &PenaltySet,
    lambda: &[f64],
    beta0: &DVector<f64>,
    mode: HessianMode,
    opts: &GeneralOptions,
) -> Result<(f64, NewtonFit)> {
    let s = set.assemble_or_empty(lambda, model.n_coef())?;
    let nt = newton_fit(model, &s, beta0, mode, opts)?;
    let v = laml_value(model, &nt, set, lambda)?;
    Ok((v, nt))
}

/// The general multiplicative update:
/// `lambda_j* = [tr(S^- S_j) - tr(V S_j)] / (b' S_j b) * lambda_j`,
/// with `V = (H + S_lambda)^-1` from the inner solve, capped like the
/// Gaussian update.
pub fn fs_update_general(
    set: &PenaltySet,
    lambda: &[f64],
    beta: &DVector<f64>,
    chol: &CholFactor,
    lambda_cap: f64,
    rank_tol: f64,
) -> Result<Vec<f64>> {
    let beta_scale = beta.norm_squared() + 1.0;
    let mut out = Vec::with_capacity(set.len());
    for j in 0..set.len() {
        let block = set.block(j);
        let tr_pinv = set.trace_pinv_total_times(lambda, j, rank_tol)?;
        let tr_v = linalg::trace_inv_times(chol, &block.matrix, block.offset)?;
        let gap = tr_pinv - tr_v;
        let quad = block.quad_form(beta);
        let next = if quad < EPS_BETA * beta_scale * block.trace() {
            lambda_cap
        } else if gap <= 0.0 {
            lambda[j].min(lambda_cap)
        } else {
            (gap / quad * lambda[j]).min(lambda_cap)
        };
        out.push(next);
    }
    Ok(out)
}

/// EDF of the penalized fit: `tr(V H)` and its diagonal attribution.
pub fn edf_general(chol: &CholFactor, h: &SymMatrix) -> (f64, Vec<f64>) {
    let z = chol.solve(h.as_matrix());
    let diag: Vec<f64> = (0..h.n()).map(|i| z[(i, i)]).collect();
    (diag.iter().sum(), diag)
}

/// Outer iteration: alternates the inner Newton solve, an optional scale
/// refresh, the general update and (optional) step halving on the Laplace
/// approximate restricted likelihood. Switches from the observed to the
/// expected Hessian when repair engages on more than half the iterates and
/// the family provides one.
pub fn fit_general(
    model: &dyn LikelihoodModel,
    set: &PenaltySet,
    opts: &GeneralOptions,
) -> Result<GeneralFit> {
    let p = model.n_coef();
    let mut mode = HessianMode::Observed;
    let mut lambda = vec![opts.lambda_init; set.len()];
    let mut scaled: Option<Box<dyn LikelihoodModel>> = None;
    let mut phi = None;

    fn current<'a>(
        scaled: &'a Option<Box<dyn LikelihoodModel>>,
        base: &'a dyn LikelihoodModel,
    ) -> &'a dyn LikelihoodModel {
        scaled.as_deref().unwrap_or(base)
    }

    let s0 = set.assemble_or_empty(&lambda, p)?;
    let mut nt = newton_fit(current(&scaled, model), &s0, &DVector::zeros(p), mode, opts)?;
    if opts.estimate_scale && model.has_scale() {
        let (edf, _) = edf_general(&nt.chol, &nt.hessian);
        if let Some(est) = current(&scaled, model).scale_estimate(&nt.beta, edf) {
            scaled = model.with_scale(est);
            phi = Some(est);
            nt = newton_fit(current(&scaled, model), &s0, &nt.beta, mode, opts)?;
        }
    }
    let mut lr = laml_value(current(&scaled, model), &nt, set, &lambda)?;
    let mut repair_count = usize::from(nt.repaired);
    let mut trajectory = vec![GeneralTrajectoryStep {
        lambda: lambda.clone(),
        laml: lr,
        halvings: 0,
        mode,
        repaired: nt.repaired,
    }];
    let mut converged = set.is_empty();
    let mut stalled = false;
    let mut iterations = 0;

    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let lambda_star =
            fs_update_general(set, &lambda, &nt.beta, &nt.chol, opts.lambda_cap, opts.rank_tol)?;

        let (lambda_new, halvings, step_stalled) = match opts.step_control {
            StepControl::Halving => {
                let warm = nt.beta.clone();
                let m = current(&scaled, model);
                crate::gaussian::step_halving(
                    |l| laml(m, set, l, &warm, mode, opts).map(|(v, _)| v),
                    &lambda,
                    &lambda_star,
                    lr,
                    opts.k_max,
                )?
            }
            StepControl::Off => (lambda_star, 0, false),
        };

        let s = set.assemble_or_empty(&lambda_new, p)?;
        nt = newton_fit(current(&scaled, model), &s, &nt.beta, mode, opts)?;
        if opts.estimate_scale && model.has_scale() {
            let (edf, _) = edf_general(&nt.chol, &nt.hessian);
            if let Some(est) = current(&scaled, model).scale_estimate(&nt.beta, edf) {
                scaled = model.with_scale(est);
                phi = Some(est);
                nt = newton_fit(current(&scaled, model), &s, &nt.beta, mode, opts)?;
            }
        }
        let lr_new = laml_value(current(&scaled, model), &nt, set, &lambda_new)?;

        let max_dlog = lambda_new
            .iter()
            .zip(&lambda)
            .map(|(a, b)| (a.ln() - b.ln()).abs())
            .fold(0.0_f64, f64::max);
        let dlr = (lr_new - lr).abs();

        repair_count += usize::from(nt.repaired);
        lambda = lambda_new;
        lr = lr_new;
        stalled = step_stalled;
        trajectory.push(GeneralTrajectoryStep {
            lambda: lambda.clone(),
            laml: lr,
            halvings,
            mode,
            repaired: nt.repaired,
        });

        if (dlr < opts.tol_rel * (lr.abs() + 0.1) && max_dlog < opts.tol_lambda) || step_stalled {
            converged = !step_stalled || max_dlog < opts.tol_lambda;
            break;
        }

        // Hessian policy: prefer the expected information when the observed
        // curvature needs repair on most iterates.
        if mode == HessianMode::Observed
            && repair_count * 2 > iterations
            && model.expected_hessian(&nt.beta).is_some()
        {
            mode = HessianMode::Expected;
        }
    }

    // max_iter exhaustion is reported through the converged flag so the
    // partial state stays available to callers.
    let (edf, edf_diag) = edf_general(&nt.chol, &nt.hessian);
    Ok(GeneralFit {
        beta: nt.beta,
        lambda,
        phi,
        laml: lr,
        edf,
        edf_diag,
        chol: nt.chol,
        trajectory,
        iterations,
        converged,
        stalled,
        repair_count,
        mode,
    })
}
