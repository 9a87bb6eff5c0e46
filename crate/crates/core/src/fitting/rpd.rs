//! Fits of single-arm distributions with a fixed list of mode types.

use serde::{Deserialize, Serialize};

use super::{
    absolute_error, minimize, Bound, FitResult, MinimizeOptions, Param, ParamRole, ParamVector, SqrtResiduals,
    Weighting,
};
use crate::diagnostics::pearson_1d;
use crate::error::{contract, Result};
use crate::reduction::{Arm, Rpd};
use crate::statistics::{convolve, pmf, ModeType, Pmf};

/// One mode recovered from a single arm: its type and effective mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedMode {
    #[serde(rename = "type")]
    pub mode_type: ModeType,
    pub mu: f64,
}

impl FittedMode {
    pub fn new(mode_type: ModeType, mu: f64) -> Self {
        Self { mode_type, mu }
    }

    /// Thermal before Poissonian before single-photon, then descending mean.
    pub fn canonical_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.mode_type.cmp(&other.mode_type).then(other.mu.total_cmp(&self.mu))
    }
}

/// Result of a single-arm fit. `modes` and the parameters inside `fit` are
/// in canonical order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpdFit {
    pub arm: Arm,
    pub modes: Vec<FittedMode>,
    pub fit: FitResult,
    /// `sqrt(sum((x - f)^2))` between the window-normalized observation and
    /// model.
    pub error: f64,
    pub weighting: Weighting,
}

impl RpdFit {
    pub fn total_mu(&self) -> f64 {
        self.modes.iter().map(|m| m.mu).sum()
    }
}

fn bound_for(t: ModeType) -> Bound {
    match t {
        ModeType::SinglePhoton => Bound::UnitInterval,
        _ => Bound::Positive,
    }
}

/// Distribution of the summed photon number of independent modes.
pub fn rpd_model(modes: &[FittedMode], n_max: usize) -> Result<Pmf> {
    let mut acc = Pmf::vacuum(n_max);
    for m in modes {
        acc = convolve(&acc, &pmf(m.mode_type, m.mu, n_max)?, n_max);
    }
    Ok(acc)
}

/// Default weighting of an RPD: shot noise of its events for counts, the
/// reference weights for exact input.
pub fn default_weighting(rpd: &Rpd) -> Weighting {
    match &rpd.counts {
        Some(c) => Weighting::Counts { trials: c.iter().sum::<u64>().max(1) as f64 },
        None => Weighting::Reference,
    }
}

/// Starting means: the arm mean split geometrically over the template.
fn default_initial(template: &[ModeType], mean: f64) -> Vec<f64> {
    let mean = mean.max(1e-3);
    let weights: Vec<f64> = (0..template.len()).map(|j| 0.5f64.powi(j as i32)).collect();
    let norm: f64 = weights.iter().sum();
    template
        .iter()
        .zip(weights)
        .map(|(t, w)| {
            let mu = mean * w / norm;
            match t {
                ModeType::SinglePhoton => mu.min(0.5),
                _ => mu,
            }
        })
        .collect()
}

/// Fits the effective means of `template` to `rpd` with its default
/// weighting and optimizer settings.
pub fn fit_rpd(rpd: &Rpd, template: &[ModeType]) -> Result<RpdFit> {
    fit_rpd_with(rpd, template, default_weighting(rpd), &MinimizeOptions::default(), None)
}

pub fn fit_rpd_with(
    rpd: &Rpd,
    template: &[ModeType],
    weighting: Weighting,
    options: &MinimizeOptions,
    initial: Option<&[f64]>,
) -> Result<RpdFit> {
    if template.is_empty() {
        return contract("template must contain at least one mode");
    }
    if let Some(init) = initial {
        if init.len() != template.len() {
            return contract("initial values do not match the template");
        }
    }
    let n_max = rpd.n_max();
    let residuals = SqrtResiduals::new(&rpd.probs, weighting)?;
    let total: f64 = rpd.probs.iter().sum();
    let mean = rpd.mean() / total;
    let init = match initial {
        Some(v) => v.to_vec(),
        None => default_initial(template, mean),
    };
    let params = ParamVector::new(
        template
            .iter()
            .zip(&init)
            .enumerate()
            .map(|(j, (&t, &mu))| Param { role: ParamRole::ModeMu, mode: j, value: mu, bound: bound_for(t) })
            .collect(),
    );
    let modes_of = |p: &ParamVector| -> Vec<FittedMode> {
        template.iter().zip(&p.params).map(|(&t, q)| FittedMode::new(t, q.value)).collect()
    };
    let objective = |p: &ParamVector| match rpd_model(&modes_of(p), n_max) {
        Ok(m) => residuals.eval(m.probs()),
        Err(_) => f64::INFINITY,
    };
    let mut fit = minimize(&objective, &params, options)?;

    // canonical order for both the mode list and the parameter vector
    let mut order: Vec<usize> = (0..template.len()).collect();
    let modes = modes_of(&fit.params);
    order.sort_by(|&a, &b| modes[a].canonical_cmp(&modes[b]));
    let sorted_modes: Vec<FittedMode> = order.iter().map(|&j| modes[j]).collect();
    fit.params = ParamVector::new(
        order
            .iter()
            .enumerate()
            .map(|(new, &old)| Param { mode: new, ..fit.params.params[old] })
            .collect(),
    );
    for r in &mut fit.restarts {
        let v = r.values.clone();
        let mut pairs: Vec<(FittedMode, f64)> =
            template.iter().zip(v).map(|(&t, mu)| (FittedMode::new(t, mu), mu)).collect();
        pairs.sort_by(|a, b| a.0.canonical_cmp(&b.0));
        r.values = pairs.into_iter().map(|p| p.1).collect();
    }

    let model = rpd_model(&sorted_modes, n_max)?;
    let model_total: f64 = model.probs().iter().sum();
    let f: Vec<f64> = model.probs().iter().map(|v| v / model_total).collect();
    let x: Vec<f64> = rpd.probs.iter().map(|v| v / total).collect();
    let error = absolute_error(&x, &f);
    if let Some(counts) = &rpd.counts {
        fit.p_value = pearson_1d(counts, &f, template.len()).map(|t| t.p_value);
    }
    Ok(RpdFit { arm: rpd.arm, modes: sorted_modes, fit, error, weighting })
}
