//! Serializable fit reports with stable field order, shared by the Gaussian
//! and general fitters and emitted as JSON by the command line front end.

use serde::{Deserialize, Serialize};

use crate::gaussian::GaussianFit;
use crate::general::GeneralFit;
use crate::smooths::AssembledDesign;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CoefficientEntry {
    /// Which model part the coefficient belongs to: `intercept`, a
    /// parametric column name, or a smooth term label.
    pub term: String,
    /// Index within the term's column block.
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LambdaEntry {
    pub label: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TermEdf {
    pub label: String,
    pub edf: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrajectoryEntry {
    pub iter: usize,
    pub lr: f64,
    pub lambda: Vec<f64>,
    pub halvings: usize,
    /// Curvature matrix used on this iterate (general fits only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hessian_mode: Option<String>,
}

/// Converged state of one model fit in exchange form.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FitReport {
    pub family: String,
    pub n: usize,
    pub p: usize,
    pub converged: bool,
    pub stalled: bool,
    pub iterations: usize,
    /// Residual variance or GLM scale; 1 for fixed-scale families.
    pub scale: f64,
    pub lr: f64,
    pub edf_total: f64,
    pub edf_by_term: Vec<TermEdf>,
    pub lambda: Vec<LambdaEntry>,
    pub coefficients: Vec<CoefficientEntry>,
    /// Accepted outer steps; length equals `iterations`.
    pub trajectory: Vec<TrajectoryEntry>,
    pub wall_time_ms: f64,
}

fn coefficient_entries(design: &AssembledDesign, beta: &[f64]) -> Vec<CoefficientEntry> {
    let mut out = Vec::with_capacity(beta.len());
    let mut col = 0;
    if design.intercept {
        out.push(CoefficientEntry {
            term: "intercept".into(),
            index: 0,
            value: beta[col],
        });
        col += 1;
    }
    for name in &design.parametric {
        out.push(CoefficientEntry {
            term: name.clone(),
            index: 0,
            value: beta[col],
        });
        col += 1;
    }
    for layout in &design.layout {
        for i in 0..layout.n_cols {
            out.push(CoefficientEntry {
                term: layout.label.clone(),
                index: i,
                value: beta[layout.col_start + i],
            });
        }
        col += layout.n_cols;
    }
    debug_assert_eq!(col, beta.len());
    out
}

fn edf_by_term(design: &AssembledDesign, edf_diag: &[f64]) -> Vec<TermEdf> {
    design
        .layout
        .iter()
        .map(|l| TermEdf {
            label: l.label.clone(),
            edf: edf_diag[l.col_start..l.col_start + l.n_cols].iter().sum(),
        })
        .collect()
}

impl FitReport {
    pub fn from_gaussian(
        fit: &GaussianFit,
        design: &AssembledDesign,
        wall_time_ms: f64,
    ) -> FitReport {
        let beta: Vec<f64> = fit.beta.iter().cloned().collect();
        FitReport {
            family: "gaussian".into(),
            n: design.n(),
            p: design.p(),
            converged: fit.converged,
            stalled: fit.stalled,
            iterations: fit.iterations,
            scale: fit.sigma2,
            lr: fit.reml,
            edf_total: fit.edf,
            edf_by_term: edf_by_term(design, &fit.edf_diag),
            lambda: design
                .penalties
                .blocks()
                .iter()
                .zip(&fit.lambda)
                .map(|(b, &v)| LambdaEntry {
                    label: b.label.clone(),
                    value: v,
                })
                .collect(),
            coefficients: coefficient_entries(design, &beta),
            trajectory: fit
                .trajectory
                .iter()
                .skip(1)
                .enumerate()
                .map(|(i, t)| TrajectoryEntry {
                    iter: i + 1,
                    lr: t.lr,
                    lambda: t.lambda.clone(),
                    halvings: t.halvings,
                    hessian_mode: None,
                })
                .collect(),
            wall_time_ms,
        }
    }

    pub fn from_general(
        fit: &GeneralFit,
        design: &AssembledDesign,
        family: &str,
        wall_time_ms: f64,
    ) -> FitReport {
        let beta: Vec<f64> = fit.beta.iter().cloned().collect();
        FitReport {
            family: family.into(),
            n: design.n(),
            p: design.p(),
            converged: fit.converged,
            stalled: fit.stalled,
            iterations: fit.iterations,
            scale: fit.phi.unwrap_or(1.0),
            lr: fit.laml,
            edf_total: fit.edf,
            edf_by_term: edf_by_term(design, &fit.edf_diag),
            lambda: design
                .penalties
                .blocks()
                .iter()
                .zip(&fit.lambda)
                .map(|(b, &v)| LambdaEntry {
                    label: b.label.clone(),
                    value: v,
                })
                .collect(),
            coefficients: coefficient_entries(design, &beta),
            trajectory: fit
                .trajectory
                .iter()
                .skip(1)
                .enumerate()
                .map(|(i, t)| TrajectoryEntry {
                    iter: i + 1,
                    lr: t.laml,
                    lambda: t.lambda.clone(),
                    halvings: t.halvings,
                    hessian_mode: Some(
                        match t.mode {
                            crate::general::HessianMode::Observed => "observed",
                            crate::general::HessianMode::Expected => "expected",
                        }
                        .into(),
                    ),
                })
                .collect(),
            wall_time_ms,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips_through_json() {
        let report = FitReport {
            family: "gaussian".into(),
            n: 100,
            p: 12,
            converged: true,
            stalled: false,
            iterations: 2,
            scale: 0.123456789123456789,
            lr: -42.75,
            edf_total: 7.25,
            edf_by_term: vec![TermEdf {
                label: "s".into(),
                edf: 6.25,
            }],
            lambda: vec![LambdaEntry {
                label: "s".into(),
                value: 1.5e-3,
            }],
            coefficients: vec![CoefficientEntry {
                term: "intercept".into(),
                index: 0,
                value: 0.1 + 0.2, // deliberately non-representable
            }],
            trajectory: vec![
                TrajectoryEntry {
                    iter: 1,
                    lr: -43.0,
                    lambda: vec![1.0],
                    halvings: 0,
                    hessian_mode: None,
                },
                TrajectoryEntry {
                    iter: 2,
                    lr: -42.75,
                    lambda: vec![1.5e-3],
                    halvings: 1,
                    hessian_mode: None,
                },
            ],
            wall_time_ms: 12.5,
        };
        let json = serde_json::to_string_pretty(&report).unwrap();
        let back: FitReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
        assert_eq!(back.trajectory.len(), back.iterations);
    }
}
