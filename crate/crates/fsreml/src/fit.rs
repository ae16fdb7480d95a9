//! Spec-level fitting entry points: assemble the design from a model spec
//! and a dataset, build the right likelihood, and run the matching outer
//! iteration.

use nalgebra::DVector;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gaussian::{self, GaussianFit, GaussianOptions};
use crate::general::{self, GeneralFit, GeneralOptions};
use crate::likelihoods::{cox_partial_bundle, glm_loglik_bundle, Family, Link};
use crate::smooths::{assemble_design, assemble_design_with, AssembledDesign, ModelSpec};

/// Which response model drives the fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Gaussian,
    Poisson,
    Binomial,
    Gamma,
    Cox,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(ModelKind::Gaussian),
            "poisson" => Ok(ModelKind::Poisson),
            "binomial" => Ok(ModelKind::Binomial),
            "gamma" => Ok(ModelKind::Gamma),
            "cox" => Ok(ModelKind::Cox),
            other => Err(Error::Invalid(format!("unknown family '{other}'"))),
        }
    }
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Gaussian => "gaussian",
            ModelKind::Poisson => "poisson",
            ModelKind::Binomial => "binomial",
            ModelKind::Gamma => "gamma",
            ModelKind::Cox => "cox",
        }
    }

    pub fn glm_family(&self) -> Option<(Family, Link)> {
        match self {
            ModelKind::Gaussian => Some((Family::Gaussian, Link::Identity)),
            ModelKind::Poisson => Some((Family::Poisson, Link::Log)),
            ModelKind::Binomial => Some((Family::Binomial, Link::Logit)),
            ModelKind::Gamma => Some((Family::Gamma, Link::Log)),
            ModelKind::Cox => None,
        }
    }
}

/// Exact-REML Gaussian fit of a model spec.
pub fn fit_gaussian_spec(
    spec: &ModelSpec,
    data: &Dataset,
    opts: &GaussianOptions,
) -> Result<(GaussianFit, AssembledDesign)> {
    let design = assemble_design(spec, data)?;
    let y = DVector::from_column_slice(data.finite_column(&spec.response)?);
    let fit = gaussian::fit_penalized(&design.x, &y, &design.penalties, opts)?;
    Ok((fit, design))
}

/// Laplace-approximate fit of a model spec under any supported family.
pub fn fit_general_spec(
    spec: &ModelSpec,
    kind: ModelKind,
    data: &Dataset,
    opts: &GeneralOptions,
) -> Result<(GeneralFit, AssembledDesign)> {
    match kind {
        ModelKind::Cox => {
            let status_col = spec
                .status
                .as_ref()
                .ok_or_else(|| Error::Invalid("cox family needs a status column".into()))?;
            if spec.intercept {
                return Err(Error::Invalid(
                    "cox models have no intercept; set intercept = false".into(),
                ));
            }
            // smooths are centered despite the missing intercept: the
            // partial likelihood cannot identify constant shifts
            let design = assemble_design_with(spec, data, true)?;
            let time = DVector::from_column_slice(data.finite_column(&spec.response)?);
            let status_raw = data.finite_column(status_col)?;
            let mut status = Vec::with_capacity(status_raw.len());
            for (i, &v) in status_raw.iter().enumerate() {
                if v == 0.0 || v == 1.0 {
                    status.push(v == 1.0);
                } else {
                    return Err(Error::SupportViolation(format!(
                        "status[{i}] = {v} is not 0/1"
                    )));
                }
            }
            let model = cox_partial_bundle(design.x.clone(), time, status)?;
            let fit = general::fit_general(&model, &design.penalties, opts)?;
            Ok((fit, design))
        }
        _ => {
            let (family, link) = kind.glm_family().expect("non-cox kinds are GLMs");
            let design = assemble_design(spec, data)?;
            let y = DVector::from_column_slice(data.finite_column(&spec.response)?);
            let offset = spec
                .offset
                .as_ref()
                .map(|c| data.finite_column(c).map(DVector::from_column_slice))
                .transpose()?;
            let model =
                glm_loglik_bundle(family, link, design.x.clone(), y, offset, None)?;
            let fit = general::fit_general(&model, &design.penalties, opts)?;
            Ok((fit, design))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{simulate, Scenario, SimParams};
    use crate::smooths::{TermKind, TermSpec};

    #[test]
    fn gaussian_spec_smoke() {
        let data = simulate(Scenario::SineGaussian, 120, 5, &SimParams::default()).unwrap();
        let spec = ModelSpec {
            response: "y".into(),
            status: None,
            offset: None,
            intercept: true,
            parametric: vec![],
            terms: vec![TermSpec {
                label: "s".into(),
                covariates: vec!["x".into()],
                kind: TermKind::Pspline {
                    k: 12,
                    degree: 3,
                    pen_order: 2,
                },
            }],
        };
        let (fit, design) = fit_gaussian_spec(&spec, &data, &GaussianOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.edf > 2.0 && fit.edf < 12.0, "edf = {}", fit.edf);
        assert_eq!(design.p(), 12); // 1 + 11 centered columns
    }

    #[test]
    fn cox_spec_requires_status_and_no_intercept() {
        let data = simulate(Scenario::SurvivalCox, 100, 5, &SimParams::default()).unwrap();
        let mut spec = ModelSpec {
            response: "time".into(),
            status: None,
            offset: None,
            intercept: false,
            parametric: vec!["x1".into()],
            terms: vec![],
        };
        assert!(matches!(
            fit_general_spec(&spec, ModelKind::Cox, &data, &GeneralOptions::default()),
            Err(Error::Invalid(_))
        ));
        spec.status = Some("status".into());
        spec.intercept = true;
        assert!(matches!(
            fit_general_spec(&spec, ModelKind::Cox, &data, &GeneralOptions::default()),
            Err(Error::Invalid(_))
        ));
        spec.intercept = false;
        let (fit, _) =
            fit_general_spec(&spec, ModelKind::Cox, &data, &GeneralOptions::default()).unwrap();
        assert!(fit.converged);
    }

    #[test]
    fn poisson_spec_smoke() {
        let data = simulate(Scenario::PoissonAdditive, 150, 5, &SimParams::default()).unwrap();
        let spec = ModelSpec {
            response: "y".into(),
            status: None,
            offset: None,
            intercept: true,
            parametric: vec![],
            terms: vec![
                TermSpec {
                    label: "s1".into(),
                    covariates: vec!["x1".into()],
                    kind: TermKind::Pspline {
                        k: 10,
                        degree: 3,
                        pen_order: 2,
                    },
                },
                TermSpec {
                    label: "s2".into(),
                    covariates: vec!["x2".into()],
                    kind: TermKind::Crs { k: 8 },
                },
            ],
        };
        let (fit, _) =
            fit_general_spec(&spec, ModelKind::Poisson, &data, &GeneralOptions::default())
                .unwrap();
        assert!(fit.converged);
        assert_eq!(fit.lambda.len(), 2);
    }
}
