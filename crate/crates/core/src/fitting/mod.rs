//! Scoring function, bounded simplex optimization and the one- and
//! two-dimensional fit drivers.

mod jpd;
mod optimizer;
mod rpd;

pub use jpd::{
    fit_jpd, fit_jpd_unconstrained, ArmTargets, JpdData, JpdFit, JpdFitOptions, JpdTemplate, JpdTemplateMode,
    LossSharing,
};
pub use optimizer::{minimize, restart_seed, MinimizeOptions, StartRegion, Tolerances};
pub use rpd::{default_weighting, fit_rpd, fit_rpd_with, rpd_model, FittedMode, RpdFit};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Which physical quantity a free parameter stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    ModeMu,
    EtaSignal,
    EtaIdler,
}

/// Admissible range of a parameter, which fixes its transform to
/// unconstrained coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    /// `(0, inf)` through `exp`.
    Positive,
    /// `(0, 1)` through the logistic function.
    UnitInterval,
}

const LOG_FLOOR: f64 = 1e-300;
const LOGIT_LIMIT: f64 = 1e-15;

impl Bound {
    pub fn to_unconstrained(self, v: f64) -> f64 {
        match self {
            Bound::Positive => v.max(LOG_FLOOR).ln(),
            Bound::UnitInterval => {
                let v = v.clamp(LOGIT_LIMIT, 1.0 - LOGIT_LIMIT);
                (v / (1.0 - v)).ln()
            }
        }
    }

    pub fn from_unconstrained(self, t: f64) -> f64 {
        match self {
            Bound::Positive => t.min(700.0).exp(),
            Bound::UnitInterval => 1.0 / (1.0 + (-t).exp()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub role: ParamRole,
    /// Index of the mode (or arm group) the parameter belongs to.
    pub mode: usize,
    pub value: f64,
    pub bound: Bound,
}

/// Ordered free parameters with their transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub params: Vec<Param>,
}

impl ParamVector {
    pub fn new(params: Vec<Param>) -> Self {
        Self { params }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, i: usize) -> f64 {
        self.params[i].value
    }

    pub fn values(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.value).collect()
    }

    pub fn to_unconstrained(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.bound.to_unconstrained(p.value)).collect()
    }

    pub fn with_unconstrained(&self, theta: &[f64]) -> Self {
        let params = self
            .params
            .iter()
            .zip(theta)
            .map(|(p, &t)| Param { value: p.bound.from_unconstrained(t), ..*p })
            .collect();
        Self { params }
    }

    pub fn with_values(&self, values: &[f64]) -> Self {
        let params = self.params.iter().zip(values).map(|(p, &v)| Param { value: v, ..*p }).collect();
        Self { params }
    }
}

/// Final state of one optimizer restart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartOutcome {
    pub seed: u64,
    pub score: f64,
    pub converged: bool,
    pub evaluations: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ParamVector,
    pub score: f64,
    /// Pearson chi-squared P-value, when the data are counts and the test has
    /// positive degrees of freedom.
    pub p_value: Option<f64>,
    pub converged: bool,
    pub restarts_used: usize,
    pub best_restart: usize,
    pub best_restart_seed: u64,
    pub evaluations: usize,
    pub restarts: Vec<RestartOutcome>,
    pub notes: Vec<String>,
}

impl FitResult {
    /// Restarts that stopped at a score worse than the best by more than
    /// `rel` relative (plus `abs` absolute).
    pub fn restarts_worse_than_best(&self, rel: f64, abs: f64) -> usize {
        self.restarts
            .iter()
            .filter(|r| !(r.score <= self.score + rel * self.score.abs() + abs))
            .count()
    }
}

/// `sum(((sqrt(x) - sqrt(f)) / sigma)^2)` over all cells.
pub fn score(observed: &[f64], model: &[f64], sigmas: &[f64]) -> Result<f64> {
    if observed.len() != model.len() || observed.len() != sigmas.len() {
        return contract(format!(
            "shape mismatch: {} observed, {} model, {} sigma",
            observed.len(),
            model.len(),
            sigmas.len()
        ));
    }
    if let Some(j) = sigmas.iter().position(|s| !(*s > 0.0)) {
        return contract(format!("sigma at cell {j} is not positive"));
    }
    Ok(observed
        .iter()
        .zip(model)
        .zip(sigmas)
        .map(|((x, f), s)| ((x.max(0.0).sqrt() - f.max(0.0).sqrt()) / s).powi(2))
        .sum())
}

/// Converts a probability-scale uncertainty into the uncertainty of the
/// square root of the estimate, which is the scale the score compares on.
pub fn sqrt_scale_sigma(p: f64, sigma_p: f64) -> f64 {
    if p > 0.0 {
        sigma_p / (2.0 * p.sqrt())
    } else {
        sigma_p.sqrt() / 2.0
    }
}

/// Uncertainties assigned to exact (noise-free) probabilities on the square
/// root scale: `sqrt(x^0.6 + 3.2e-4)`.
pub fn reference_sigma(x: f64) -> f64 {
    (x.max(0.0).powf(REFERENCE_EXPONENT) + REFERENCE_FLOOR).sqrt()
}

const REFERENCE_EXPONENT: f64 = 0.6;
const REFERENCE_FLOOR: f64 = 3.2e-4;

/// How observed cells are weighted in the score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Shot noise of `trials` events.
    Counts { trials: f64 },
    /// Fixed weights for exact input, see [`reference_sigma`].
    Reference,
}

/// Observed data prepared for repeated scoring: square roots of the
/// in-window-normalized observation and inverse variances on that scale.
/// The model is normalized over the same window before comparison.
#[derive(Clone, Debug)]
pub struct SqrtResiduals {
    sqrt_x: Vec<f64>,
    inv_var: Vec<f64>,
}

impl SqrtResiduals {
    pub fn new(observed: &[f64], weighting: Weighting) -> Result<Self> {
        let total: f64 = observed.iter().sum();
        if !(total > 0.0) {
            return contract("observation carries no probability mass in the window");
        }
        let x: Vec<f64> = observed.iter().map(|v| v.max(0.0) / total).collect();
        let inv_var = x
            .iter()
            .map(|&p| {
                let s = match weighting {
                    Weighting::Counts { trials } => {
                        let sigma_p = (p / trials).sqrt().max(1.0 / trials);
                        sqrt_scale_sigma(p, sigma_p)
                    }
                    Weighting::Reference => reference_sigma(p),
                };
                1.0 / (s * s)
            })
            .collect();
        Ok(Self { sqrt_x: x.iter().map(|v| v.sqrt()).collect(), inv_var })
    }

    pub fn eval(&self, model: &[f64]) -> f64 {
        let total: f64 = model.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return f64::INFINITY;
        }
        let scale = 1.0 / total;
        self.sqrt_x
            .iter()
            .zip(model)
            .zip(&self.inv_var)
            .map(|((sx, f), w)| {
                let d = sx - (f.max(0.0) * scale).sqrt();
                d * d * w
            })
            .sum()
    }
}

/// Absolute error `sqrt(sum((x - f)^2))` between two probability vectors.
pub fn absolute_error(observed: &[f64], model: &[f64]) -> f64 {
    observed.iter().zip(model).map(|(x, f)| (x - f).powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn score_examples() {
        assert_eq!(score(&[0.2, 0.8], &[0.2, 0.8], &[0.1, 0.1]).unwrap(), 0.0);
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert!(score(&[1.0], &[1.0], &[0.0]).is_err());
        assert!(score(&[1.0, 0.0], &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn transforms_round_trip() {
        for v in [1e-6, 0.3, 1.0, 19.0, 400.0] {
            let b = Bound::Positive;
            assert_abs_diff_eq!(b.from_unconstrained(b.to_unconstrained(v)), v, epsilon = 1e-12 * v);
        }
        for v in [1e-6, 0.3, 0.5, 0.99] {
            let b = Bound::UnitInterval;
            assert_abs_diff_eq!(b.from_unconstrained(b.to_unconstrained(v)), v, epsilon = 1e-12);
        }
    }

    #[test]
    fn counts_weighting_is_uniform_on_sqrt_scale() {
        let n: f64 = 1e4;
        for p in [0.0, 1e-5, 0.01, 0.25] {
            let sigma_p = (p / n).sqrt().max(1.0 / n);
            let s = sqrt_scale_sigma(p, sigma_p);
            if p == 0.0 || p >= 1.0 / n {
                assert_abs_diff_eq!(s, 0.5 / n.sqrt(), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn residuals_match_literal_score() {
        let obs = [0.5, 0.3, 0.2, 0.0];
        let model = [0.45, 0.35, 0.15, 0.05];
        let r = SqrtResiduals::new(&obs, Weighting::Reference).unwrap();
        let sig: Vec<f64> = obs.iter().map(|&x| reference_sigma(x)).collect();
        assert_abs_diff_eq!(r.eval(&model), score(&obs, &model, &sig).unwrap(), epsilon = 1e-12);
    }
}
