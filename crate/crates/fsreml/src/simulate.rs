//! Deterministic data generators for the test scenarios the fitters are
//! exercised on. The same seed always produces the same dataset.

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// `y = a sin(2 pi x) + noise` on a uniform covariate.
    SineGaussian,
    /// Smooth on the left, rapidly oscillating on the right; the case an
    /// adaptive smoother handles and a single-penalty spline cannot.
    VaryingSmoothness,
    /// Two additive smooth effects on a log-linear Poisson mean.
    PoissonAdditive,
    /// Exponential survival times with a smooth log-hazard effect and
    /// three parametric covariates, independently censored.
    SurvivalCox,
    /// Balanced one-way layout with i.i.d. group effects.
    OnewayRandEffect,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine-gaussian" => Ok(Scenario::SineGaussian),
            "varying-smoothness-gaussian" => Ok(Scenario::VaryingSmoothness),
            "poisson-additive" => Ok(Scenario::PoissonAdditive),
            "survival-cox" => Ok(Scenario::SurvivalCox),
            "oneway-randeffect" => Ok(Scenario::OnewayRandEffect),
            other => Err(Error::UnknownScenario(other.to_string())),
        }
    }
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::SineGaussian => "sine-gaussian",
            Scenario::VaryingSmoothness => "varying-smoothness-gaussian",
            Scenario::PoissonAdditive => "poisson-additive",
            Scenario::SurvivalCox => "survival-cox",
            Scenario::OnewayRandEffect => "oneway-randeffect",
        }
    }

    pub fn all() -> [Scenario; 5] {
        [
            Scenario::SineGaussian,
            Scenario::VaryingSmoothness,
            Scenario::PoissonAdditive,
            Scenario::SurvivalCox,
            Scenario::OnewayRandEffect,
        ]
    }
}

/// Scenario knobs with their defaults; unknown keys are rejected upstream.
#[derive(Debug, Clone)]
pub struct SimParams {
    /// Residual standard deviation (Gaussian scenarios).
    pub noise: f64,
    /// Group effect standard deviation (one-way scenario).
    pub sigma_b: f64,
    /// Number of groups (one-way scenario).
    pub groups: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            noise: 0.3,
            sigma_b: 1.0,
            groups: 8,
        }
    }
}

/// The varying-smoothness truth: gentle on the left half, a fast
/// oscillation ramping in on the right half.
pub fn varying_smoothness_truth(x: f64) -> f64 {
    let ramp = ((x - 0.45) / 0.2).clamp(0.0, 1.0);
    let ramp = ramp * ramp * (3.0 - 2.0 * ramp); // smoothstep
    1.6 * (2.0 * std::f64::consts::PI * x).sin()
        + 1.3 * ramp * (16.0 * std::f64::consts::PI * x).sin()
}

/// Generates a dataset for the scenario; deterministic in `seed`.
pub fn simulate(scenario: Scenario, n: usize, seed: u64, params: &SimParams) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Invalid("n must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Dataset::new();
    match scenario {
        Scenario::SineGaussian => {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let f: Vec<f64> = x
                .iter()
                .map(|&v| 1.5 * (2.0 * std::f64::consts::PI * v).sin())
                .collect();
            let y: Vec<f64> = f
                .iter()
                .map(|&m| m + params.noise * normal.sample(&mut rng))
                .collect();
            data.push_column("x", x)?;
            data.push_column("y", y)?;
            data.push_column("f_true", f)?;
        }
        Scenario::VaryingSmoothness => {
            let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1).max(1) as f64).collect();
            let f: Vec<f64> = x.iter().map(|&v| varying_smoothness_truth(v)).collect();
            let y: Vec<f64> = f
                .iter()
                .map(|&m| m + params.noise * normal.sample(&mut rng))
                .collect();
            data.push_column("x", x)?;
            data.push_column("y", y)?;
            data.push_column("f_true", f)?;
        }
        Scenario::PoissonAdditive => {
            let x1: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let x2: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let eta: Vec<f64> = x1
                .iter()
                .zip(&x2)
                .map(|(&a, &b)| {
                    0.4 + 1.1 * (2.0 * std::f64::consts::PI * a).sin()
                        + 0.8 * (2.0 * std::f64::consts::PI * b).cos()
                })
                .collect();
            let y: Vec<f64> = eta
                .iter()
                .map(|&e| {
                    Poisson::new(e.exp().max(1e-12))
                        .expect("positive mean")
                        .sample(&mut rng)
                })
                .collect();
            data.push_column("x1", x1)?;
            data.push_column("x2", x2)?;
            data.push_column("y", y)?;
            data.push_column("eta_true", eta)?;
        }
        Scenario::SurvivalCox => {
            let z: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let x1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x2: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0.0..1.0) < 0.5)).collect();
            let x3: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0.0..1.0) < 0.3)).collect();
            let mut time = Vec::with_capacity(n);
            let mut status = Vec::with_capacity(n);
            let mut eta = Vec::with_capacity(n);
            for i in 0..n {
                let e = 1.2 * (4.0 * z[i]).sin() + 0.5 * x1[i] - 0.4 * x2[i] + 0.3 * x3[i];
                eta.push(e);
                let event = Exp::new(e.exp()).expect("positive rate").sample(&mut rng);
                let censor = Exp::new(0.25).expect("positive rate").sample(&mut rng);
                // keep times strictly positive
                let t = event.min(censor).max(1e-9);
                time.push(t);
                status.push(f64::from(event <= censor));
            }
            data.push_column("time", time)?;
            data.push_column("status", status)?;
            data.push_column("z", z)?;
            data.push_column("x1", x1)?;
            data.push_column("x2", x2)?;
            data.push_column("x3", x3)?;
            data.push_column("eta_true", eta)?;
        }
        Scenario::OnewayRandEffect => {
            let groups = params.groups.max(2);
            let b: Vec<f64> = (0..groups)
                .map(|_| params.sigma_b * normal.sample(&mut rng))
                .collect();
            let mut y = Vec::with_capacity(n);
            let mut g = Vec::with_capacity(n);
            for i in 0..n {
                let gi = i % groups;
                g.push(gi as f64);
                y.push(2.0 + b[gi] + 0.5 * normal.sample(&mut rng));
            }
            data.push_column("y", y)?;
            data.push_column("group", g)?;
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        for scenario in Scenario::all() {
            let a = simulate(scenario, 50, 7, &SimParams::default()).unwrap();
            let b = simulate(scenario, 50, 7, &SimParams::default()).unwrap();
            assert_eq!(a.names(), b.names());
            for name in a.names() {
                assert_eq!(a.column(name).unwrap(), b.column(name).unwrap());
            }
            let c = simulate(scenario, 50, 8, &SimParams::default()).unwrap();
            let differs = a
                .names()
                .iter()
                .any(|n| a.column(n).unwrap() != c.column(n).unwrap());
            assert!(differs, "{scenario:?} ignored the seed");
        }
    }

    #[test]
    fn unknown_scenario_is_rejected() {
        let r: Result<Scenario> = "tweedie-lss".parse();
        assert!(matches!(r, Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn zero_sigma_b_produces_no_group_signal() {
        let params = SimParams {
            sigma_b: 0.0,
            ..SimParams::default()
        };
        let d = simulate(Scenario::OnewayRandEffect, 64, 3, &params).unwrap();
        let y = d.column("y").unwrap();
        let g = d.column("group").unwrap();
        // group means differ only through noise
        let mut means = vec![0.0; 8];
        let mut counts = vec![0usize; 8];
        for (yi, gi) in y.iter().zip(g) {
            means[*gi as usize] += yi;
            counts[*gi as usize] += 1;
        }
        for (m, c) in means.iter_mut().zip(counts) {
            *m /= c as f64;
        }
        let spread = means.iter().cloned().fold(f64::MIN, f64::max)
            - means.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 1.0, "group spread {spread} too large for pure noise");
    }

    #[test]
    fn survival_times_positive_with_events() {
        let d = simulate(Scenario::SurvivalCox, 120, 11, &SimParams::default()).unwrap();
        let t = d.column("time").unwrap();
        let s = d.column("status").unwrap();
        assert!(t.iter().all(|&v| v > 0.0));
        assert!(s.iter().any(|&v| v == 1.0));
        assert!(s.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
