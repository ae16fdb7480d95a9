//! Concrete Fisher-regular log likelihoods behind one interface: value,
//! gradient, observed Hessian (and the expected Hessian where the family
//! provides it), for the GLM families and the Cox partial likelihood.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;

/// A log likelihood of the model coefficients. `hessian` returns the
/// negative second derivative `H = -d^2 l / d beta d beta'`.
pub trait LikelihoodModel {
    fn loglik(&self, beta: &DVector<f64>) -> f64;
    fn grad(&self, beta: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, beta: &DVector<f64>) -> SymMatrix;
    fn expected_hessian(&self, _beta: &DVector<f64>) -> Option<SymMatrix> {
        None
    }
    fn has_scale(&self) -> bool {
        false
    }
    fn n_obs(&self) -> usize;
    fn n_coef(&self) -> usize;
    /// Pearson-type scale estimate given the fitted coefficients and model
    /// EDF; `None` for fixed-scale likelihoods.
    fn scale_estimate(&self, _beta: &DVector<f64>, _edf: f64) -> Option<f64> {
        None
    }
    /// The same model with its scale parameter replaced.
    fn with_scale(&self, _phi: f64) -> Option<Box<dyn LikelihoodModel>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Gaussian,
    Poisson,
    Binomial,
    Gamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Identity,
    Log,
    Logit,
}

impl Family {
    /// Canonical link of the family.
    pub fn canonical_link(self) -> Link {
        match self {
            Family::Gaussian => Link::Identity,
            Family::Poisson => Link::Log,
            Family::Binomial => Link::Logit,
            Family::Gamma => Link::Log, // supported non-canonical default
        }
    }

    pub fn has_scale(self) -> bool {
        matches!(self, Family::Gaussian | Family::Gamma)
    }
}

/// Generalized linear model likelihood with prior weights and a scale
/// parameter (fixed at 1 for Poisson and binomial).
#[derive(Debug, Clone)]
pub struct GlmModel {
    pub family: Family,
    pub link: Link,
    x: DMatrix<f64>,
    y: DVector<f64>,
    offset: DVector<f64>,
    weights: DVector<f64>,
    phi: f64,
}

/// Builds a GLM likelihood bundle, validating the family/link pair and the
/// response support.
pub fn glm_loglik_bundle(
    family: Family,
    link: Link,
    x: DMatrix<f64>,
    y: DVector<f64>,
    offset: Option<DVector<f64>>,
    weights: Option<DVector<f64>>,
) -> Result<GlmModel> {
    let ok = matches!(
        (family, link),
        (Family::Gaussian, Link::Identity)
            | (Family::Gaussian, Link::Log)
            | (Family::Poisson, Link::Log)
            | (Family::Binomial, Link::Logit)
            | (Family::Gamma, Link::Log)
    );
    if !ok {
        return Err(Error::InvalidFamilyLink(format!("{family:?}/{link:?}")));
    }
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "y has {} rows, X has {n}",
            y.len()
        )));
    }
    for (i, &v) in y.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::SupportViolation(format!("y[{i}] not finite")));
        }
        let bad = match family {
            Family::Poisson => v < 0.0,
            Family::Binomial => !(0.0..=1.0).contains(&v),
            Family::Gamma => v <= 0.0,
            Family::Gaussian => false,
        };
        if bad {
            return Err(Error::SupportViolation(format!(
                "y[{i}] = {v} outside the {family:?} support"
            )));
        }
    }
    let offset = offset.unwrap_or_else(|| DVector::zeros(n));
    let weights = weights.unwrap_or_else(|| DVector::from_element(n, 1.0));
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::SupportViolation("negative prior weight".into()));
    }
    Ok(GlmModel {
        family,
        link,
        x,
        y,
        offset,
        weights,
        phi: 1.0,
    })
}

impl GlmModel {
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn set_phi(&mut self, phi: f64) {
        self.phi = phi;
    }

    fn eta(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.x * beta + &self.offset
    }

    fn mean(&self, eta: f64) -> f64 {
        match self.link {
            Link::Identity => eta,
            Link::Log => eta.exp(),
            Link::Logit => 1.0 / (1.0 + (-eta).exp()),
        }
    }

    /// Per-observation log density at `mu`.
    fn ll_term(&self, y: f64, w: f64, mu: f64) -> f64 {
        match self.family {
            Family::Gaussian => {
                -w * (y - mu).powi(2) / (2.0 * self.phi)
                    - 0.5 * ((2.0 * std::f64::consts::PI * self.phi / w).ln())
            }
            Family::Poisson => w * (y * mu.ln() - mu - ln_gamma(y + 1.0)),
            // grouped binomial with y the success proportion and w the
            // trial count; the beta-independent choose term is omitted
            Family::Binomial => {
                let mut acc = 0.0;
                if y > 0.0 {
                    acc += y * mu.ln();
                }
                if y < 1.0 {
                    acc += (1.0 - y) * (1.0 - mu).ln();
                }
                w * acc
            }
            Family::Gamma => {
                let alpha = w / self.phi;
                alpha * (alpha / mu).ln() - ln_gamma(alpha) + (alpha - 1.0) * y.ln()
                    - alpha * y / mu
            }
        }
    }

    /// `d l_i / d eta_i`.
    fn score_term(&self, y: f64, w: f64, mu: f64) -> f64 {
        match (self.family, self.link) {
            (Family::Gaussian, Link::Identity) => w * (y - mu) / self.phi,
            (Family::Gaussian, Link::Log) => w * (y - mu) * mu / self.phi,
            (Family::Poisson, Link::Log) => w * (y - mu),
            (Family::Binomial, Link::Logit) => w * (y - mu),
            (Family::Gamma, Link::Log) => w / self.phi * (y / mu - 1.0),
            _ => unreachable!("validated at construction"),
        }
    }

    /// Observed `-d^2 l_i / d eta_i^2` (can go negative for non-canonical
    /// links, which is what the positive definite repair is for).
    fn obs_weight(&self, y: f64, w: f64, mu: f64) -> f64 {
        match (self.family, self.link) {
            (Family::Gaussian, Link::Identity) => w / self.phi,
            (Family::Gaussian, Link::Log) => w * (mu * mu - (y - mu) * mu) / self.phi,
            (Family::Poisson, Link::Log) => w * mu,
            (Family::Binomial, Link::Logit) => w * mu * (1.0 - mu),
            (Family::Gamma, Link::Log) => w / self.phi * y / mu,
            _ => unreachable!("validated at construction"),
        }
    }

    /// Expected `-d^2 l_i / d eta_i^2` (Fisher weight).
    fn exp_weight(&self, w: f64, mu: f64) -> f64 {
        match (self.family, self.link) {
            (Family::Gaussian, Link::Identity) => w / self.phi,
            (Family::Gaussian, Link::Log) => w * mu * mu / self.phi,
            (Family::Poisson, Link::Log) => w * mu,
            (Family::Binomial, Link::Logit) => w * mu * (1.0 - mu),
            (Family::Gamma, Link::Log) => w / self.phi,
            _ => unreachable!("validated at construction"),
        }
    }

    /// Variance function `V(mu)` for the Pearson statistic.
    fn variance(&self, mu: f64) -> f64 {
        match self.family {
            Family::Gaussian => 1.0,
            Family::Poisson => mu,
            Family::Binomial => mu * (1.0 - mu),
            Family::Gamma => mu * mu,
        }
    }

    fn weighted_gram(&self, diag: impl Fn(usize, f64) -> f64, beta: &DVector<f64>) -> SymMatrix {
        let eta = self.eta(beta);
        let n = self.x.nrows();
        let p = self.x.ncols();
        let mut out = DMatrix::zeros(p, p);
        for i in 0..n {
            let d = diag(i, self.mean(eta[i]));
            if d == 0.0 {
                continue;
            }
            let row = self.x.row(i);
            for a in 0..p {
                for b in a..p {
                    out[(a, b)] += d * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                out[(a, b)] = out[(b, a)];
            }
        }
        SymMatrix::symmetrize(out)
    }

    /// IRLS weight matrix diagonal at `beta` (the Fisher weights).
    pub fn irls_weights(&self, beta: &DVector<f64>) -> DVector<f64> {
        let eta = self.eta(beta);
        DVector::from_iterator(
            self.x.nrows(),
            eta.iter()
                .zip(self.weights.iter())
                .map(|(&e, &w)| self.exp_weight(w, self.mean(e))),
        )
    }
}

impl LikelihoodModel for GlmModel {
    fn loglik(&self, beta: &DVector<f64>) -> f64 {
        let eta = self.eta(beta);
        let mut acc = 0.0;
        for i in 0..self.x.nrows() {
            acc += self.ll_term(self.y[i], self.weights[i], self.mean(eta[i]));
        }
        acc
    }

    fn grad(&self, beta: &DVector<f64>) -> DVector<f64> {
        let eta = self.eta(beta);
        let u = DVector::from_iterator(
            self.x.nrows(),
            (0..self.x.nrows())
                .map(|i| self.score_term(self.y[i], self.weights[i], self.mean(eta[i]))),
        );
        self.x.transpose() * u
    }

    fn hessian(&self, beta: &DVector<f64>) -> SymMatrix {
        self.weighted_gram(|i, mu| self.obs_weight(self.y[i], self.weights[i], mu), beta)
    }

    fn expected_hessian(&self, beta: &DVector<f64>) -> Option<SymMatrix> {
        Some(self.weighted_gram(|i, mu| self.exp_weight(self.weights[i], mu), beta))
    }

    fn has_scale(&self) -> bool {
        self.family.has_scale()
    }

    fn n_obs(&self) -> usize {
        self.x.nrows()
    }

    fn n_coef(&self) -> usize {
        self.x.ncols()
    }

    fn scale_estimate(&self, beta: &DVector<f64>, edf: f64) -> Option<f64> {
        if !self.has_scale() {
            return None;
        }
        let eta = self.eta(beta);
        let mut chi2 = 0.0;
        for i in 0..self.x.nrows() {
            let mu = self.mean(eta[i]);
            chi2 += self.weights[i] * (self.y[i] - mu).powi(2) / self.variance(mu);
        }
        let denom = self.n_obs() as f64 - edf;
        (denom > 0.0).then(|| chi2 / denom)
    }

    fn with_scale(&self, phi: f64) -> Option<Box<dyn LikelihoodModel>> {
        if !self.has_scale() {
            return None;
        }
        let mut m = self.clone();
        m.phi = phi;
        Some(Box::new(m))
    }
}

// ---------------------------------------------------------------------------
// Cox partial likelihood
// ---------------------------------------------------------------------------

/// Cox proportional hazards partial log likelihood with Breslow handling of
/// ties. Value, gradient and observed Hessian are accumulated in one sweep
/// over the risk sets ordered by decreasing time: `O(np^2)`.
#[derive(Debug, Clone)]
pub struct CoxModel {
    x: DMatrix<f64>,
    /// Row indices sorted by decreasing time, grouped by tied values.
    order: Vec<usize>,
    time: DVector<f64>,
    status: Vec<bool>,
}

pub fn cox_partial_bundle(
    x: DMatrix<f64>,
    time: DVector<f64>,
    status: Vec<bool>,
) -> Result<CoxModel> {
    let n = x.nrows();
    if time.len() != n || status.len() != n {
        return Err(Error::DimensionMismatch(
            "time/status length differs from X rows".into(),
        ));
    }
    if time.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::SupportViolation(
            "survival times must be positive and finite".into(),
        ));
    }
    if !status.iter().any(|&s| s) {
        return Err(Error::NoEvents);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[b].total_cmp(&time[a]));
    Ok(CoxModel {
        x,
        order,
        time,
        status,
    })
}

impl CoxModel {
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Value, gradient and Hessian in one risk set sweep. The linear
    /// predictor is centered before exponentiation; the partial likelihood
    /// is invariant to that shift.
    fn sweep(&self, beta: &DVector<f64>, want_derivs: bool) -> (f64, DVector<f64>, DMatrix<f64>) {
        let p = self.x.ncols();
        let n = self.x.nrows();
        let eta_raw = &self.x * beta;
        let shift = eta_raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let eta: Vec<f64> = eta_raw.iter().map(|e| e - shift).collect();

        let mut s0 = 0.0_f64;
        let mut s1: DVector<f64> = DVector::zeros(p);
        let mut s2: DMatrix<f64> = DMatrix::zeros(p, p);
        let mut ll = 0.0_f64;
        let mut grad: DVector<f64> = DVector::zeros(p);
        let mut hess: DMatrix<f64> = DMatrix::zeros(p, p);

        let mut pos = 0;
        while pos < n {
            // add the whole tied-time group to the risk set first
            let t = self.time[self.order[pos]];
            let mut end = pos;
            while end < n && self.time[self.order[end]] == t {
                let i = self.order[end];
                let w = eta[i].exp();
                s0 += w;
                let row = self.x.row(i).transpose();
                if want_derivs {
                    s1.axpy(w, &row, 1.0);
                    for a in 0..p {
                        for b in a..p {
                            s2[(a, b)] += w * row[a] * row[b];
                        }
                    }
                }
                end += 1;
            }
            for k in pos..end {
                let i = self.order[k];
                if !self.status[i] {
                    continue;
                }
                ll += eta[i] - s0.ln();
                if want_derivs {
                    let mean = &s1 / s0;
                    grad += self.x.row(i).transpose() - &mean;
                    for a in 0..p {
                        for b in a..p {
                            hess[(a, b)] += s2[(a, b)] / s0 - mean[a] * mean[b];
                        }
                    }
                }
            }
            pos = end;
        }
        for a in 0..p {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        (ll, grad, hess)
    }
}

impl LikelihoodModel for CoxModel {
    fn loglik(&self, beta: &DVector<f64>) -> f64 {
        self.sweep(beta, false).0
    }

    fn grad(&self, beta: &DVector<f64>) -> DVector<f64> {
        self.sweep(beta, true).1
    }

    fn hessian(&self, beta: &DVector<f64>) -> SymMatrix {
        SymMatrix::symmetrize(self.sweep(beta, true).2)
    }

    fn n_obs(&self) -> usize {
        self.x.nrows()
    }

    fn n_coef(&self) -> usize {
        self.x.ncols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::RngExt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check(model: &dyn LikelihoodModel, beta: &DVector<f64>) {
        let p = beta.len();
        let grad = model.grad(beta);
        let hess = model.hessian(beta);
        let scale = grad.norm().max(1.0);
        for j in 0..p {
            let h = 1e-6 * (beta[j].abs() + 1.0);
            let mut up = beta.clone();
            let mut dn = beta.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (model.loglik(&up) - model.loglik(&dn)) / (2.0 * h);
            assert_relative_eq!(grad[j], fd, max_relative = 1e-5, epsilon = 1e-5 * scale);
            // Hessian row via finite differences of the gradient
            let gfd = (model.grad(&up) - model.grad(&dn)) / (2.0 * h);
            for i in 0..p {
                assert_relative_eq!(
                    -hess.as_matrix()[(i, j)],
                    gfd[i],
                    max_relative = 1e-4,
                    epsilon = 1e-4 * scale
                );
            }
        }
    }

    fn random_glm(
        family: Family,
        link: Link,
        seed: u64,
        n: usize,
        p: usize,
    ) -> (GlmModel, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, c| {
            if c == 0 {
                1.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        });
        let beta_true = DVector::from_fn(p, |_, _| rng.random_range(-0.6..0.6));
        let eta = &x * &beta_true;
        let y = DVector::from_iterator(
            n,
            eta.iter().map(|&e| -> f64 {
                match family {
                    Family::Gaussian => e + rng.random_range(-0.5..0.5),
                    Family::Poisson => {
                        // crude but deterministic count draw
                        let mu: f64 = if link == Link::Log { e.exp() } else { e.max(0.1) };
                        (mu + rng.random_range(0.0..1.0) * mu.sqrt()).floor().max(0.0)
                    }
                    Family::Binomial => {
                        let mu = 1.0 / (1.0 + (-e).exp());
                        if rng.random_range(0.0..1.0) < mu {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Family::Gamma => {
                        let mu: f64 = e.exp();
                        mu * rng.random_range(0.4..1.8)
                    }
                }
            }),
        );
        let m = glm_loglik_bundle(family, link, x, y, None, None).unwrap();
        let beta_at = DVector::from_fn(p, |_, _| rng.random_range(-0.4..0.4));
        (m, beta_at)
    }

    #[test]
    fn poisson_hand_case() {
        // single observation x = 1, y = 2, beta = 0:
        // l = -1 + 0*2 - log(2!), grad = 2 - 1 = 1, H = 1
        let x = DMatrix::from_element(1, 1, 1.0);
        let y = DVector::from_element(1, 2.0);
        let m = glm_loglik_bundle(Family::Poisson, Link::Log, x, y, None, None).unwrap();
        let beta = DVector::zeros(1);
        assert_relative_eq!(
            m.loglik(&beta),
            -1.0 - 2.0_f64.ln(),
            epsilon = 1e-12
        );
        assert_relative_eq!(m.grad(&beta)[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(m.hessian(&beta).as_matrix()[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_identity_hessian_is_xtx_independent_of_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(15, 3, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(15, |_, _| rng.random_range(-1.0..1.0));
        let m = glm_loglik_bundle(Family::Gaussian, Link::Identity, x.clone(), y, None, None)
            .unwrap();
        let h0 = m.hessian(&DVector::zeros(3));
        let h1 = m.hessian(&DVector::from_element(3, 2.5));
        let xtx = x.transpose() * &x;
        assert!((h0.as_matrix() - &xtx).norm() < 1e-12);
        assert!((h1.as_matrix() - &xtx).norm() < 1e-12);
    }

    #[test]
    fn canonical_links_observed_equals_expected() {
        for (family, link, seed) in [
            (Family::Poisson, Link::Log, 11),
            (Family::Binomial, Link::Logit, 12),
        ] {
            let (m, beta) = random_glm(family, link, seed, 40, 3);
            let obs = m.hessian(&beta);
            let exp = m.expected_hessian(&beta).unwrap();
            assert!(
                (obs.as_matrix() - exp.as_matrix()).norm() < 1e-12,
                "{family:?} observed != expected"
            );
        }
    }

    #[test]
    fn non_canonical_link_has_curvature_term() {
        let (m, beta) = random_glm(Family::Gamma, Link::Log, 13, 40, 3);
        let obs = m.hessian(&beta);
        let exp = m.expected_hessian(&beta).unwrap();
        assert!((obs.as_matrix() - exp.as_matrix()).norm() > 1e-6);
    }

    #[test]
    fn finite_difference_contract_all_families() {
        let cases = [
            (Family::Gaussian, Link::Identity),
            (Family::Gaussian, Link::Log),
            (Family::Poisson, Link::Log),
            (Family::Binomial, Link::Logit),
            (Family::Gamma, Link::Log),
        ];
        for (family, link) in cases {
            for seed in 0..50 {
                let (m, beta) = random_glm(family, link, 1000 + seed, 25, 3);
                fd_check(&m, &beta);
            }
        }
    }

    #[test]
    fn support_violations_are_rejected() {
        let x = DMatrix::from_element(2, 1, 1.0);
        assert!(matches!(
            glm_loglik_bundle(
                Family::Poisson,
                Link::Log,
                x.clone(),
                DVector::from_column_slice(&[1.0, -2.0]),
                None,
                None
            ),
            Err(Error::SupportViolation(_))
        ));
        assert!(matches!(
            glm_loglik_bundle(
                Family::Gamma,
                Link::Log,
                x.clone(),
                DVector::from_column_slice(&[1.0, 0.0]),
                None,
                None
            ),
            Err(Error::SupportViolation(_))
        ));
        assert!(matches!(
            glm_loglik_bundle(
                Family::Binomial,
                Link::Logit,
                x.clone(),
                DVector::from_column_slice(&[0.5, 1.5]),
                None,
                None
            ),
            Err(Error::SupportViolation(_))
        ));
        assert!(matches!(
            glm_loglik_bundle(
                Family::Poisson,
                Link::Identity,
                x,
                DVector::from_column_slice(&[1.0, 2.0]),
                None,
                None
            ),
            Err(Error::InvalidFamilyLink(_))
        ));
    }

    #[test]
    fn pearson_scale_recovers_gaussian_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 4000;
        let x = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let sigma = 0.5;
        let y = DVector::from_fn(n, |i, _| {
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            1.0 + 0.5 * x[(i, 1)] + sigma * z
        });
        let m = glm_loglik_bundle(Family::Gaussian, Link::Identity, x, y, None, None).unwrap();
        // true coefficients, EDF = p
        let beta = DVector::from_column_slice(&[1.0, 0.5]);
        let phi = m.scale_estimate(&beta, 2.0).unwrap();
        assert_relative_eq!(phi, sigma * sigma, max_relative = 0.1);
    }

    // ---- Cox ----

    #[test]
    fn cox_two_subjects_hand_case() {
        // one event at the earlier time, risk set of two, beta = 0
        let x = DMatrix::from_column_slice(2, 1, &[0.3, -0.8]);
        let time = DVector::from_column_slice(&[1.0, 2.0]);
        let m = cox_partial_bundle(x, time, vec![true, false]).unwrap();
        let beta = DVector::zeros(1);
        assert_relative_eq!(m.loglik(&beta), -(2.0_f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn cox_gradient_at_zero_is_event_minus_risk_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 25;
        let p = 3;
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let time = DVector::from_fn(n, |_, _| rng.random_range(0.1..5.0));
        let status: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) < 0.6).collect();
        let m = cox_partial_bundle(x.clone(), time.clone(), status.clone()).unwrap();
        let grad = m.grad(&DVector::zeros(p));
        // oracle: sum over events of (x_i - mean of x over the risk set)
        let mut oracle = DVector::zeros(p);
        for i in 0..n {
            if !status[i] {
                continue;
            }
            let riskers: Vec<usize> = (0..n).filter(|&j| time[j] >= time[i]).collect();
            let mut mean = DVector::zeros(p);
            for &j in &riskers {
                mean += x.row(j).transpose();
            }
            mean /= riskers.len() as f64;
            oracle += x.row(i).transpose() - mean;
        }
        assert!((grad - oracle).norm() < 1e-10);
    }

    #[test]
    fn cox_hessian_psd_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let n = 30;
        let x = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let time = DVector::from_fn(n, |_, _| rng.random_range(0.1..5.0));
        let status: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let m = cox_partial_bundle(x, time, status).unwrap();
        let h = m.hessian(&DVector::zeros(3));
        let eig = h.eigen(1e-12);
        assert!(eig.values[eig.values.len() - 1] >= -1e-10 * eig.spectral_radius());
    }

    #[test]
    fn cox_invariant_to_time_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 20;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let time = DVector::from_fn(n, |_, _| rng.random_range(0.1..5.0));
        let status: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) < 0.5).collect();
        let beta = DVector::from_column_slice(&[0.4, -0.7]);
        let m1 = cox_partial_bundle(x.clone(), time.clone(), status.clone()).unwrap();
        let shifted = DVector::from_iterator(n, time.iter().map(|t| t + 10.0));
        let m2 = cox_partial_bundle(x, shifted, status).unwrap();
        assert_relative_eq!(m1.loglik(&beta), m2.loglik(&beta), epsilon = 1e-12);
        assert!((m1.grad(&beta) - m2.grad(&beta)).norm() < 1e-12);
    }

    #[test]
    fn cox_finite_difference_contract() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
            let n = 20;
            let p = 2;
            let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
            let time = DVector::from_fn(n, |_, _| rng.random_range(0.1..5.0));
            let mut status: Vec<bool> =
                (0..n).map(|_| rng.random_range(0.0..1.0) < 0.5).collect();
            status[0] = true; // at least one event
            let m = cox_partial_bundle(x, time, status).unwrap();
            let beta = DVector::from_fn(p, |_, _| rng.random_range(-0.5..0.5));
            fd_check(&m, &beta);
        }
    }

    #[test]
    fn cox_breslow_ties_share_risk_set() {
        // three subjects, two tied events at t = 1: both use the full
        // risk set {1, 2, 3} in the Breslow approximation
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 0.0]);
        let time = DVector::from_column_slice(&[1.0, 1.0, 2.0]);
        let m = cox_partial_bundle(x, time, vec![true, true, false]).unwrap();
        let ll = m.loglik(&DVector::zeros(1));
        assert_relative_eq!(ll, -2.0 * 3.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cox_rejects_no_events_and_bad_times() {
        let x = DMatrix::from_element(2, 1, 1.0);
        assert!(matches!(
            cox_partial_bundle(
                x.clone(),
                DVector::from_column_slice(&[1.0, 2.0]),
                vec![false, false]
            ),
            Err(Error::NoEvents)
        ));
        assert!(matches!(
            cox_partial_bundle(
                x,
                DVector::from_column_slice(&[-1.0, 2.0]),
                vec![true, false]
            ),
            Err(Error::SupportViolation(_))
        ));
    }
}
