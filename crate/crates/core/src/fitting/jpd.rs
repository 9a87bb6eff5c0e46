//! Fits of the joint distribution with a fixed mode structure.

use serde::{Deserialize, Serialize};

use super::{
    minimize, Bound, FitResult, FittedMode, MinimizeOptions, Param, ParamRole, ParamVector, SqrtResiduals,
    StartRegion, Weighting,
};
use crate::diagnostics::pearson_pvalue;
use crate::error::{contract, Result};
use crate::forward_model::{full_jpd, ModeSpec, Occupancy, ProbMatrix, SourceModel};
use crate::sampling::CountMatrix;
use crate::statistics::ModeType;

/// How conjugated transmittances are parameterized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSharing {
    /// Independent `eta_s`, `eta_i` for every conjugated mode.
    PerMode,
    /// One `eta_s` and one `eta_i` common to all conjugated modes.
    #[default]
    SharedArm,
}

/// Effective means of a conjugated mode seen by the single-arm fits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmTargets {
    pub signal: f64,
    pub idler: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JpdTemplateMode {
    pub spec: ModeSpec,
    pub targets: Option<ArmTargets>,
}

/// Structure to fit: mode types and occupancies, starting values and the
/// step-one targets of conjugated modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JpdTemplate {
    pub n_max: usize,
    pub modes: Vec<JpdTemplateMode>,
    pub loss: LossSharing,
}

fn mu_bound(t: ModeType) -> Bound {
    match t {
        ModeType::SinglePhoton => Bound::UnitInterval,
        _ => Bound::Positive,
    }
}

impl JpdTemplate {
    /// Template from single-arm results. Conjugated pairs are given as
    /// `(type, signal effective mean, idler effective mean)`.
    ///
    /// Starting point: the brighter arm of each pair starts at `eta = 0.5`
    /// and the other arm's transmittance follows from its effective mean.
    pub fn from_step_one(
        conjugated: &[(ModeType, f64, f64)],
        signal: &[FittedMode],
        idler: &[FittedMode],
        n_max: usize,
        loss: LossSharing,
    ) -> Result<Self> {
        let mut modes = Vec::new();
        let clamp_eta = |e: f64| e.clamp(1e-3, 0.999);
        match loss {
            LossSharing::PerMode => {
                for &(t, ms, mi) in conjugated {
                    let mut mu = 2.0 * ms.max(mi).max(1e-6);
                    if t == ModeType::SinglePhoton {
                        mu = mu.min(1.0);
                    }
                    let spec = ModeSpec::conjugated(t, mu, clamp_eta(ms / mu), clamp_eta(mi / mu));
                    modes.push(JpdTemplateMode { spec, targets: Some(ArmTargets { signal: ms, idler: mi }) });
                }
            }
            LossSharing::SharedArm => {
                let ss: f64 = conjugated.iter().map(|c| c.1).sum();
                let si: f64 = conjugated.iter().map(|c| c.2).sum();
                let top = ss.max(si).max(1e-9);
                let (es, ei) = (clamp_eta(0.5 * ss / top), clamp_eta(0.5 * si / top));
                for &(t, ms, mi) in conjugated {
                    let mut mu = ((ms + mi) / (es + ei)).max(1e-6);
                    if t == ModeType::SinglePhoton {
                        mu = mu.min(1.0);
                    }
                    let spec = ModeSpec::conjugated(t, mu, es, ei);
                    modes.push(JpdTemplateMode { spec, targets: Some(ArmTargets { signal: ms, idler: mi }) });
                }
            }
        }
        for m in signal {
            modes.push(JpdTemplateMode { spec: ModeSpec::signal(m.mode_type, m.mu.max(1e-6)), targets: None });
        }
        for m in idler {
            modes.push(JpdTemplateMode { spec: ModeSpec::idler(m.mode_type, m.mu.max(1e-6)), targets: None });
        }
        for m in &modes {
            m.spec.validate()?;
        }
        Ok(Self { n_max, modes, loss })
    }

    /// Template whose starting point is a given model, without targets.
    pub fn from_model(model: &SourceModel, loss: LossSharing) -> Self {
        let modes = model.modes.iter().map(|&spec| JpdTemplateMode { spec, targets: None }).collect();
        Self { n_max: model.n_max, modes, loss }
    }

    fn conjugated(&self) -> impl Iterator<Item = (usize, &JpdTemplateMode)> + '_ {
        self.modes.iter().enumerate().filter(|(_, m)| m.spec.occupancy == Occupancy::Conjugated)
    }

    pub fn has_targets(&self) -> bool {
        self.modes.iter().any(|m| m.targets.is_some())
    }

    /// Free parameters at the template's starting values.
    pub fn param_vector(&self) -> ParamVector {
        let mut params: Vec<Param> = self
            .modes
            .iter()
            .enumerate()
            .map(|(j, m)| Param {
                role: ParamRole::ModeMu,
                mode: j,
                value: m.spec.mu,
                bound: mu_bound(m.spec.mode_type),
            })
            .collect();
        match self.loss {
            LossSharing::PerMode => {
                for (j, m) in self.conjugated() {
                    params.push(Param {
                        role: ParamRole::EtaSignal,
                        mode: j,
                        value: m.spec.eta_s,
                        bound: Bound::UnitInterval,
                    });
                    params.push(Param {
                        role: ParamRole::EtaIdler,
                        mode: j,
                        value: m.spec.eta_i,
                        bound: Bound::UnitInterval,
                    });
                }
            }
            LossSharing::SharedArm => {
                if let Some((j, m)) = self.conjugated().next() {
                    params.push(Param {
                        role: ParamRole::EtaSignal,
                        mode: j,
                        value: m.spec.eta_s,
                        bound: Bound::UnitInterval,
                    });
                    params.push(Param {
                        role: ParamRole::EtaIdler,
                        mode: j,
                        value: m.spec.eta_i,
                        bound: Bound::UnitInterval,
                    });
                }
            }
        }
        ParamVector::new(params)
    }

    pub fn n_params(&self) -> usize {
        self.param_vector().len()
    }

    /// Model at the given parameters, in template order.
    pub fn build(&self, p: &ParamVector) -> SourceModel {
        let mut modes: Vec<ModeSpec> = self.modes.iter().map(|m| m.spec).collect();
        let shared = self.loss == LossSharing::SharedArm;
        for q in &p.params {
            match q.role {
                ParamRole::ModeMu => modes[q.mode].mu = q.value,
                ParamRole::EtaSignal if shared => {
                    for m in modes.iter_mut().filter(|m| m.occupancy == Occupancy::Conjugated) {
                        m.eta_s = q.value;
                    }
                }
                ParamRole::EtaIdler if shared => {
                    for m in modes.iter_mut().filter(|m| m.occupancy == Occupancy::Conjugated) {
                        m.eta_i = q.value;
                    }
                }
                ParamRole::EtaSignal => modes[q.mode].eta_s = q.value,
                ParamRole::EtaIdler => modes[q.mode].eta_i = q.value,
            }
        }
        SourceModel { n_max: self.n_max, modes }
    }

    /// Relative squared deviation of the conjugated effective means from the
    /// step-one targets.
    fn penalty(&self, model: &SourceModel) -> f64 {
        let mut acc = 0.0;
        for (m, t) in model.modes.iter().zip(&self.modes) {
            if let Some(t) = t.targets {
                if t.signal > 0.0 {
                    acc += ((m.mu * m.eta_s - t.signal) / t.signal).powi(2);
                }
                if t.idler > 0.0 {
                    acc += ((m.mu * m.eta_i - t.idler) / t.idler).powi(2);
                }
            }
        }
        acc
    }

    /// Search box used when nothing but the structure is known.
    fn blind_box(&self) -> (Vec<f64>, Vec<f64>) {
        let p = self.param_vector();
        let mut lower = Vec::with_capacity(p.len());
        let mut upper = Vec::with_capacity(p.len());
        for q in &p.params {
            let (lo, hi) = match (q.role, q.bound) {
                (ParamRole::ModeMu, Bound::Positive) => {
                    if self.modes[q.mode].spec.occupancy == Occupancy::Conjugated {
                        (0.05, 50.0)
                    } else {
                        (0.01, 5.0)
                    }
                }
                _ => (0.05, 0.95),
            };
            lower.push(q.bound.to_unconstrained(lo));
            upper.push(q.bound.to_unconstrained(hi));
        }
        (lower, upper)
    }
}

/// Observed joint distribution prepared for fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JpdData {
    pub n_max: usize,
    pub values: Vec<f64>,
    pub weighting: Weighting,
    pub counts: Option<CountMatrix>,
}

impl JpdData {
    pub fn from_counts(counts: &CountMatrix) -> Self {
        let values = counts.counts().iter().map(|&c| c as f64).collect();
        Self {
            n_max: counts.n_max(),
            values,
            weighting: Weighting::Counts { trials: counts.in_range().max(1) as f64 },
            counts: Some(counts.clone()),
        }
    }

    /// Exact distribution weighted as if measured with `nominal_trials`.
    pub fn exact(jpd: &ProbMatrix, nominal_trials: f64) -> Self {
        Self {
            n_max: jpd.n_max(),
            values: jpd.entries().to_vec(),
            weighting: Weighting::Counts { trials: nominal_trials },
            counts: None,
        }
    }

    fn single_cell(&self) -> bool {
        self.values.iter().filter(|v| **v > 0.0).count() <= 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JpdFitOptions {
    pub minimize: MinimizeOptions,
    /// Weight of the step-one consistency penalty relative to the score.
    pub penalty_weight: f64,
    /// Re-optimize without the penalty from the constrained optimum.
    pub polish: bool,
}

impl Default for JpdFitOptions {
    fn default() -> Self {
        Self { minimize: MinimizeOptions::default(), penalty_weight: 1e3, polish: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JpdFit {
    /// Fitted model in canonical order.
    pub model: SourceModel,
    pub fit: FitResult,
    /// The penalized stage, when step-one targets were used.
    pub constrained: Option<FitResult>,
    pub jpd: ProbMatrix,
}

fn score_fn<'a>(template: &'a JpdTemplate, residuals: &'a SqrtResiduals) -> impl Fn(&ParamVector) -> f64 + Sync + 'a {
    move |p: &ParamVector| match full_jpd(&template.build(p)) {
        Ok(m) => residuals.eval(m.entries()),
        Err(_) => f64::INFINITY,
    }
}

fn finish(data: &JpdData, template: &JpdTemplate, mut fit: FitResult, constrained: Option<FitResult>) -> Result<JpdFit> {
    let mut model = template.build(&fit.params);
    model.canonicalize();
    let jpd = full_jpd(&model)?;
    if let Some(c) = &data.counts {
        fit.p_value = pearson_pvalue(c, &jpd, fit.params.len()).map(|t| t.p_value);
    }
    if data.single_cell() {
        fit.converged = false;
        fit.notes.push("degenerate data: all events in one cell".into());
    }
    Ok(JpdFit { model, fit, constrained, jpd })
}

fn check(data: &JpdData, template: &JpdTemplate) -> Result<()> {
    if data.n_max != template.n_max {
        return contract(format!("data window {} differs from template window {}", data.n_max, template.n_max));
    }
    if data.values.len() != (data.n_max + 1).pow(2) {
        return contract("data is not a square matrix over the window");
    }
    Ok(())
}

/// Two-step JPD fit: the score plus a penalty tying conjugated effective
/// means to their step-one values, followed (by default) by an unpenalized
/// polish from that optimum.
pub fn fit_jpd(data: &JpdData, template: &JpdTemplate, options: &JpdFitOptions) -> Result<JpdFit> {
    check(data, template)?;
    let residuals = SqrtResiduals::new(&data.values, data.weighting)?;
    let score = score_fn(template, &residuals);
    let init = template.param_vector();
    if !template.has_targets() || options.penalty_weight <= 0.0 {
        let fit = minimize(&score, &init, &options.minimize)?;
        return finish(data, template, fit, None);
    }
    let w = options.penalty_weight;
    let penalized = |p: &ParamVector| {
        let s = score(p);
        s + w * template.penalty(&template.build(p))
    };
    let constrained = minimize(&penalized, &init, &options.minimize)?;
    if !options.polish {
        let mut fit = constrained.clone();
        fit.score = score(&fit.params);
        return finish(data, template, fit, Some(constrained));
    }
    let polish_opts = MinimizeOptions {
        restarts: 1,
        start: StartRegion::AroundInitial { half_width: 0.0 },
        initial_step: 0.05,
        ..options.minimize.clone()
    };
    let mut fit = minimize(&score, &constrained.params, &polish_opts)?;
    fit.notes.push("unpenalized polish from the constrained optimum".into());
    finish(data, template, fit, Some(constrained))
}

/// Single-step fit of the joint distribution: no step-one information, every
/// restart drawn from a broad box over the parameter space.
pub fn fit_jpd_unconstrained(data: &JpdData, template: &JpdTemplate, options: &MinimizeOptions) -> Result<JpdFit> {
    check(data, template)?;
    let residuals = SqrtResiduals::new(&data.values, data.weighting)?;
    let score = score_fn(template, &residuals);
    let (lower, upper) = template.blind_box();
    let opts = MinimizeOptions { start: StartRegion::Box { lower, upper }, ..options.clone() };
    let fit = minimize(&score, &template.param_vector(), &opts)?;
    finish(data, template, fit, None)
}
