//! End-to-end reconstruction: single-arm structures, conjugation assignment,
//! joint refinement, final fit and diagnostics.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{hillery, hillery_counts, hillery_spread, pearson_pvalue, HilleryResult, PearsonTest};
use crate::error::{contract, Error, Result};
use crate::fitting::{
    fit_jpd, fit_rpd_with, restart_seed, FitResult, FittedMode, JpdData, JpdFit, JpdFitOptions, JpdTemplate,
    LossSharing, MinimizeOptions, ParamVector, SqrtResiduals, StartRegion, Tolerances,
};
use crate::forward_model::{full_jpd, lossless_jpd, LosslessProjection, ModeSpec, Occupancy, ProbMatrix, SourceModel};
use crate::model_selection::{
    assign_conjugation_options, detect_structure, prune_modes, selection_weighting, AssignmentOutcome,
    CandidateStructure, rank_cmp, SelectionConfig, StructureDetection,
};
use crate::reduction::{marginalize, marginalize_counts, Arm, Rpd};
use crate::sampling::{substream, CountMatrix};
use crate::statistics::ModeType;

/// Input to a reconstruction: measured counts or an exact distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observed {
    Counts(CountMatrix),
    Exact(ProbMatrix),
}

impl Observed {
    pub fn n_max(&self) -> usize {
        match self {
            Observed::Counts(c) => c.n_max(),
            Observed::Exact(p) => p.n_max(),
        }
    }

    pub fn rpd(&self, arm: Arm) -> Rpd {
        match self {
            Observed::Counts(c) => marginalize_counts(c, arm),
            Observed::Exact(p) => marginalize(p, arm),
        }
    }

    /// Fitting data; exact input is weighted as `nominal_trials` events.
    pub fn jpd_data(&self, nominal_trials: f64) -> JpdData {
        match self {
            Observed::Counts(c) => JpdData::from_counts(c),
            Observed::Exact(p) => JpdData::exact(p, nominal_trials),
        }
    }

    fn counts(&self) -> Option<&CountMatrix> {
        match self {
            Observed::Counts(c) => Some(c),
            Observed::Exact(_) => None,
        }
    }

    fn is_vacuum(&self) -> bool {
        match self {
            Observed::Counts(c) => c.overflow() == 0 && c.get(0, 0) == c.n_tot(),
            Observed::Exact(p) => p.get(0, 0) >= 1.0 - 1e-12,
        }
    }

    fn check(&self) -> Result<()> {
        match self {
            Observed::Counts(c) if c.n_tot() == 0 => contract("counts hold no trials"),
            Observed::Exact(p) if p.total() <= 0.0 => contract("distribution has no mass in the window"),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionConfig {
    pub seed: u64,
    pub tolerances: Tolerances,
    /// Restarts of each single-arm candidate fit.
    pub selection_restarts: usize,
    /// Restarts of each assignment and refinement candidate.
    pub assignment_restarts: usize,
    /// Restarts of the final joint fit.
    pub final_restarts: usize,
    pub growth_threshold: f64,
    pub prune_threshold: f64,
    pub penalty_weight: f64,
    /// Most assignments fitted over all structure options.
    pub assignment_cap: usize,
    /// Alternative single-arm structures carried into assignment, per arm.
    pub max_alternatives: usize,
    pub candidate_types: Vec<ModeType>,
    pub loss_sharing: LossSharing,
    pub nominal_trials: f64,
    pub max_modes_per_arm: usize,
    /// Joint-fit search for background modes the single-arm fits missed or
    /// added in error.
    pub refine_backgrounds: bool,
    pub max_refinement_rounds: usize,
    /// Distinct leading assignments refined; the best refined fit is kept.
    pub refine_candidates: usize,
    /// Parametric bootstrap draws for the lossless Hillery uncertainties (0
    /// disables them).
    pub bootstrap_samples: usize,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tolerances: Tolerances::default(),
            selection_restarts: 4,
            assignment_restarts: 2,
            final_restarts: 8,
            growth_threshold: 10.83,
            prune_threshold: 0.01,
            penalty_weight: 1e3,
            assignment_cap: 64,
            max_alternatives: 1,
            candidate_types: ModeType::ALL.to_vec(),
            loss_sharing: LossSharing::SharedArm,
            nominal_trials: 1e6,
            max_modes_per_arm: 6,
            refine_backgrounds: true,
            max_refinement_rounds: 4,
            refine_candidates: 2,
            bootstrap_samples: 50,
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prune_threshold > 0.0 && self.prune_threshold < 1.0) {
            return contract(format!("prune_threshold must lie in (0, 1), got {}", self.prune_threshold));
        }
        if self.selection_restarts == 0 || self.assignment_restarts == 0 || self.final_restarts == 0 {
            return contract("restart counts must be at least 1");
        }
        if self.refine_candidates == 0 {
            return contract("refine_candidates must be at least 1");
        }
        if self.assignment_cap == 0 {
            return contract("assignment_cap must be at least 1");
        }
        if self.candidate_types.is_empty() {
            return contract("candidate_types is empty");
        }
        if !(self.growth_threshold >= 0.0) || !(self.penalty_weight >= 0.0) {
            return contract("thresholds and penalty weight must be non-negative");
        }
        if !(self.nominal_trials >= 1.0) {
            return contract("nominal_trials must be at least 1");
        }
        if self.bootstrap_samples == 1 {
            return contract("bootstrap_samples must be 0 or at least 2");
        }
        if !(self.tolerances.diameter > 0.0) || self.tolerances.max_evaluations == 0 {
            return contract("tolerances must be positive");
        }
        Ok(())
    }

    fn minimize(&self, restarts: usize, seed: u64) -> MinimizeOptions {
        MinimizeOptions { restarts, seed, tolerances: self.tolerances, ..Default::default() }
    }
}

/// Seeds of the randomized stages, all derived from the configured seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub selection: u64,
    pub assignment: u64,
    pub refinement: u64,
    pub final_fit: u64,
    pub bootstrap: u64,
}

impl StageSeeds {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            selection: restart_seed(seed, 1),
            assignment: restart_seed(seed, 2),
            refinement: restart_seed(seed, 3),
            final_fit: restart_seed(seed, 4),
            bootstrap: restart_seed(seed, 5),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub n_max: usize,
    pub exact: bool,
    pub n_tot: Option<u64>,
    pub in_range: Option<u64>,
    pub overflow_fraction: f64,
    pub signal_mean: f64,
    pub idler_mean: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageState {
    Done,
    Skipped,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub state: StageState,
    pub message: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Partial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub detected: Vec<FittedMode>,
    pub pruned: Vec<FittedMode>,
    pub alternatives: Vec<CandidateStructure>,
    pub ambiguous: bool,
    pub score: Option<f64>,
    pub p_value: Option<f64>,
    pub error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentEntry {
    pub rank: usize,
    pub label: String,
    pub signal_modes: Vec<FittedMode>,
    pub idler_modes: Vec<FittedMode>,
    pub score: f64,
    pub p_value: Option<f64>,
    pub n_params: usize,
    pub converged: bool,
    pub model: SourceModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementStep {
    /// Rank of the assignment being refined.
    #[serde(default)]
    pub candidate: usize,
    pub round: usize,
    /// `add` or `remove`.
    pub action: String,
    pub mode: ModeSpec,
    pub score_before: f64,
    pub score_after: f64,
    pub threshold: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalFit {
    pub model: SourceModel,
    pub fit: FitResult,
    pub n_params: usize,
    pub pearson: Option<PearsonTest>,
    /// Restarts ending more than 1e-6 relative above the best score.
    pub restarts_worse: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HillerySummary {
    /// Sums of the observed distribution, normalized over the window.
    pub measured: HilleryResult,
    /// Sums of the reconstructed state before loss, normalized over the
    /// window.
    pub lossless: Option<HilleryResult>,
    pub eta_s: Option<f64>,
    pub eta_i: Option<f64>,
    pub bootstrap_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub status: RunStatus,
    pub digest: InputDigest,
    pub stages: Vec<StageStatus>,
    pub signal: Option<ArmSummary>,
    pub idler: Option<ArmSummary>,
    pub assignments: Vec<AssignmentEntry>,
    pub assignments_enumerated: usize,
    pub assignments_truncated: bool,
    pub refinement: Vec<RefinementStep>,
    /// Rank of the assignment the final model was refined from.
    #[serde(default)]
    pub refined_from: usize,
    pub model: SourceModel,
    pub result: Option<FinalFit>,
    pub hillery: Option<HillerySummary>,
    pub warnings: Vec<String>,
    pub seeds: StageSeeds,
    pub config: ReconstructionConfig,
}

/// Intermediates behind the report's numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub signal_rpd: Rpd,
    pub idler_rpd: Rpd,
    pub signal_detection: Option<StructureDetection>,
    pub idler_detection: Option<StructureDetection>,
    pub assignment: Option<AssignmentOutcome>,
    pub refinement_fits: Vec<JpdFit>,
    pub final_fit: Option<JpdFit>,
    pub lossless: Option<LosslessProjection>,
    /// `(even_sum, odd_sum)` of every bootstrap draw.
    pub bootstrap: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub report: ReconstructionReport,
    pub artifacts: Artifacts,
}

#[derive(Default)]
struct Stages(Vec<StageStatus>);

impl Stages {
    fn push(&mut self, stage: &str, state: StageState, message: Option<String>) {
        self.0.push(StageStatus { stage: stage.into(), state, message });
    }

    fn done(&mut self, stage: &str) {
        self.push(stage, StageState::Done, None);
    }

    fn skipped(&mut self, stage: &str, why: &str) {
        self.push(stage, StageState::Skipped, Some(why.into()));
    }

    fn failed(&mut self, stage: &str, err: &Error) {
        self.push(stage, StageState::Failed, Some(err.to_string()));
    }
}

/// Reconstructs the mode structure behind measured counts.
pub fn reconstruct(observed: &CountMatrix, config: &ReconstructionConfig) -> Result<Reconstruction> {
    reconstruct_observed(&Observed::Counts(observed.clone()), config)
}

/// Reconstruction from an exact distribution, weighted as
/// `config.nominal_trials` events.
pub fn reconstruct_exact(jpd: &ProbMatrix, config: &ReconstructionConfig) -> Result<Reconstruction> {
    reconstruct_observed(&Observed::Exact(jpd.clone()), config)
}

fn digest(obs: &Observed, rs: &Rpd, ri: &Rpd) -> InputDigest {
    let mean = |r: &Rpd| {
        let t = r.total();
        if t > 0.0 {
            r.mean() / t
        } else {
            0.0
        }
    };
    let (exact, n_tot, in_range, overflow_fraction) = match obs {
        Observed::Counts(c) => (false, Some(c.n_tot()), Some(c.in_range()), c.overflow_fraction()),
        Observed::Exact(p) => (true, None, None, p.tail_mass()),
    };
    InputDigest { n_max: obs.n_max(), exact, n_tot, in_range, overflow_fraction, signal_mean: mean(rs), idler_mean: mean(ri) }
}

fn arm_summary(arm: Arm, det: &StructureDetection, pruned: &[FittedMode]) -> ArmSummary {
    ArmSummary {
        arm,
        detected: det.modes.clone(),
        pruned: pruned.to_vec(),
        alternatives: det.alternatives.clone(),
        ambiguous: det.ambiguous,
        score: det.fit.as_ref().map(|f| f.fit.score),
        p_value: det.fit.as_ref().and_then(|f| f.fit.p_value),
        error: det.fit.as_ref().map(|f| f.error),
    }
}

/// Primary structure first, then up to `max` pruned alternatives with a
/// distinct list of mode types.
fn structure_options(primary: &[FittedMode], det: Option<&StructureDetection>, threshold: f64, max: usize) -> Vec<Vec<FittedMode>> {
    let types = |m: &[FittedMode]| m.iter().map(|x| x.mode_type).collect::<Vec<_>>();
    let mut out = vec![primary.to_vec()];
    if let Some(det) = det {
        for alt in &det.alternatives {
            if out.len() > max {
                break;
            }
            let Ok(p) = prune_modes(&alt.modes, threshold) else { continue };
            if !out.iter().any(|o| types(o) == types(&p)) {
                out.push(p);
            }
        }
    }
    out
}

/// Cells with data minus fitted parameters, at least one.
fn data_dof(data: &JpdData, n_params: usize) -> f64 {
    let cells = data.values.iter().filter(|v| **v > 0.0).count();
    cells.saturating_sub(n_params + 1).max(1) as f64
}

/// Same structure with means and transmittances within 1e-4 relative.
fn same_model(a: &SourceModel, b: &SourceModel) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-4 * x.abs().max(y.abs());
    a.modes.len() == b.modes.len()
        && a.modes.iter().zip(&b.modes).all(|(x, y)| {
            x.occupancy == y.occupancy
                && x.mode_type == y.mode_type
                && close(x.mu, y.mu)
                && close(x.eta_s, y.eta_s)
                && close(x.eta_i, y.eta_i)
        })
}

fn arm_of(m: &ModeSpec) -> Option<Arm> {
    match m.occupancy {
        Occupancy::Signal => Some(Arm::Signal),
        Occupancy::Idler => Some(Arm::Idler),
        Occupancy::Conjugated => None,
    }
}

fn effective_total(model: &SourceModel, arm: Arm) -> f64 {
    match arm {
        Arm::Signal => model.signal_mean(),
        Arm::Idler => model.idler_mean(),
    }
}

/// Smallest share of an arm's mean a mode added during refinement may carry.
const MIN_ADDED_FRACTION: f64 = 1e-3;

struct Refined {
    fit: JpdFit,
    steps: Vec<RefinementStep>,
    fits: Vec<JpdFit>,
}

/// Adds or removes background modes while the joint score supports it: a
/// removal is kept when it costs less than the threshold, an addition when
/// it gains more than the threshold and its mode is populated.
fn refine_backgrounds(
    data: &JpdData,
    start: JpdFit,
    candidate: usize,
    config: &ReconstructionConfig,
    seed: u64,
) -> Result<Refined> {
    let mut current = start;
    let mut steps = Vec::new();
    let mut fits = Vec::new();
    let opts = JpdFitOptions {
        minimize: MinimizeOptions {
            start: StartRegion::AroundInitial { half_width: 0.5 },
            ..config.minimize(config.assignment_restarts, seed)
        },
        penalty_weight: 0.0,
        polish: false,
    };
    let threshold_for = |fit: &JpdFit, n_params: usize| {
        config.growth_threshold * (fit.fit.score / data_dof(data, n_params)).max(1.0)
    };
    for round in 0..config.max_refinement_rounds {
        let model = current.model.clone();
        let base = current.fit.score;

        // removals
        let removals: Vec<(usize, ModeSpec)> =
            model.modes.iter().enumerate().filter(|(_, m)| arm_of(m).is_some()).map(|(j, m)| (j, *m)).collect();
        let removal_fits: Vec<JpdFit> = removals
            .par_iter()
            .map(|&(j, _)| {
                let mut m = model.clone();
                m.modes.remove(j);
                let t = JpdTemplate::from_model(&m, config.loss_sharing);
                fit_jpd(data, &t, &opts)
            })
            .collect::<Result<_>>()?;
        let threshold = threshold_for(&current, current.fit.params.len());
        let best_removal = (0..removal_fits.len())
            .min_by(|&a, &b| removal_fits[a].fit.score.total_cmp(&removal_fits[b].fit.score));
        for (k, f) in removal_fits.iter().enumerate() {
            steps.push(RefinementStep {
                candidate,
                round,
                action: "remove".into(),
                mode: removals[k].1,
                score_before: base,
                score_after: f.fit.score,
                threshold,
                accepted: Some(k) == best_removal && f.fit.score - base < threshold,
            });
        }
        fits.extend(removal_fits.iter().cloned());
        if let Some(k) = best_removal {
            if removal_fits[k].fit.score - base < threshold {
                current = removal_fits[k].clone();
                continue;
            }
        }

        // additions
        let mut additions = Vec::new();
        for arm in [Arm::Signal, Arm::Idler] {
            let arm_mean = effective_total(&model, arm).max(1e-3);
            for &t in &config.candidate_types {
                let has_poisson = model.modes.iter().any(|m| arm_of(m) == Some(arm) && m.mode_type == ModeType::Poissonian);
                if t == ModeType::Poissonian && has_poisson {
                    continue;
                }
                let mut mu = 0.02 * arm_mean;
                if t == ModeType::SinglePhoton {
                    mu = mu.min(0.5);
                }
                let spec = match arm {
                    Arm::Signal => ModeSpec::signal(t, mu),
                    Arm::Idler => ModeSpec::idler(t, mu),
                };
                additions.push((arm, spec));
            }
        }
        let addition_fits: Vec<JpdFit> = additions
            .par_iter()
            .map(|(_, spec)| {
                let mut m = model.clone();
                m.modes.push(*spec);
                let t = JpdTemplate::from_model(&m, config.loss_sharing);
                fit_jpd(data, &t, &opts)
            })
            .collect::<Result<_>>()?;
        // the population rule is a single-arm rule; here an added mode only
        // has to stay clear of zero
        let populated = |f: &JpdFit, arm: Arm| {
            let total = effective_total(&f.model, arm);
            f.model.modes.iter().filter(|m| arm_of(m) == Some(arm)).all(|m| m.mu >= MIN_ADDED_FRACTION * total)
        };
        let thresholds: Vec<f64> = addition_fits.iter().map(|f| threshold_for(f, f.fit.params.len())).collect();
        let best_addition = (0..addition_fits.len())
            .filter(|&k| populated(&addition_fits[k], additions[k].0))
            .min_by(|&a, &b| addition_fits[a].fit.score.total_cmp(&addition_fits[b].fit.score));
        let accept = best_addition.filter(|&k| base - addition_fits[k].fit.score > thresholds[k]);
        for (k, f) in addition_fits.iter().enumerate() {
            steps.push(RefinementStep {
                candidate,
                round,
                action: "add".into(),
                mode: additions[k].1,
                score_before: base,
                score_after: f.fit.score,
                threshold: thresholds[k],
                accepted: Some(k) == accept,
            });
        }
        fits.extend(addition_fits.iter().cloned());
        match accept {
            Some(k) => current = addition_fits[k].clone(),
            None => break,
        }
    }
    Ok(Refined { fit: current, steps, fits })
}

/// Second derivatives of `f` at `theta` by central differences.
fn hessian(f: &dyn Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> DMatrix<f64> {
    let n = theta.len();
    let at = |steps: &[(usize, f64)]| {
        let mut x = theta.to_vec();
        for &(i, d) in steps {
            x[i] += d;
        }
        f(&x)
    };
    let f0 = f(theta);
    let mut hm = DMatrix::zeros(n, n);
    for i in 0..n {
        let d = (at(&[(i, 2.0 * h)]) - 2.0 * f0 + at(&[(i, -2.0 * h)])) / (4.0 * h * h);
        hm[(i, i)] = d;
        for j in 0..i {
            let v = (at(&[(i, h), (j, h)]) - at(&[(i, h), (j, -h)]) - at(&[(i, -h), (j, h)]) + at(&[(i, -h), (j, -h)]))
                / (4.0 * h * h);
            hm[(i, j)] = v;
            hm[(j, i)] = v;
        }
    }
    hm
}

/// Parameter draws from a normal approximation around the optimum, with
/// covariance `2 H^-1` of the score's Hessian in transformed coordinates.
/// Flat directions are capped at a standard deviation of 5.
fn bootstrap_params(
    score: &(dyn Fn(&ParamVector) -> f64 + Sync),
    params: &ParamVector,
    samples: usize,
    seed: u64,
) -> Vec<ParamVector> {
    let theta = params.to_unconstrained();
    let n = theta.len();
    if n == 0 {
        return vec![params.clone(); samples];
    }
    let f = |t: &[f64]| score(&params.with_unconstrained(t));
    let h = hessian(&f, &theta, 1e-3);
    let eig = SymmetricEigen::new(h);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let floor = (1e-12 * lmax).max(2.0 / 25.0);
    let scales: Vec<f64> = eig.eigenvalues.iter().map(|&l| (2.0 / l.max(floor)).sqrt()).collect();
    (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(seed, k as u64);
            let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut t = theta.clone();
            for (c, &s) in scales.iter().enumerate() {
                for r in 0..n {
                    t[r] += eig.eigenvectors[(r, c)] * s * z[c];
                }
            }
            params.with_unconstrained(&t)
        })
        .collect()
}

fn lossless_hillery(
    data: &JpdData,
    template: &JpdTemplate,
    fit: &JpdFit,
    samples: usize,
    seed: u64,
) -> Result<(HilleryResult, LosslessProjection, Vec<(f64, f64)>)> {
    let projection = lossless_jpd(&fit.model)?;
    let h = hillery(&projection.jpd.conditional());
    if samples == 0 {
        return Ok((h, projection, Vec::new()));
    }
    let residuals = SqrtResiduals::new(&data.values, data.weighting)?;
    let score = |p: &ParamVector| match full_jpd(&template.build(p)) {
        Ok(m) => residuals.eval(m.entries()),
        Err(_) => f64::INFINITY,
    };
    let draws = bootstrap_params(&score, &fit.fit.params, samples, seed);
    let mats: Vec<ProbMatrix> = draws
        .par_iter()
        .filter_map(|p| lossless_jpd(&template.build(p)).ok().map(|l| l.jpd.conditional()))
        .collect();
    let sums: Vec<(f64, f64)> = mats.iter().map(|m| {
        let r = hillery(m);
        (r.even_sum, r.odd_sum)
    }).collect();
    let h = match hillery_spread(&mats) {
        Some((se, so)) => h.with_sigmas(se, so, &format!("parametric bootstrap, {} draws, covariance 2/H of the score", mats.len())),
        None => h,
    };
    Ok((h, projection, sums))
}

/// Runs every stage on counts or exact input.
pub fn reconstruct_observed(obs: &Observed, config: &ReconstructionConfig) -> Result<Reconstruction> {
    obs.check()?;
    config.validate()?;
    let seeds = StageSeeds::from_seed(config.seed);
    let mut stages = Stages::default();
    let mut warnings = Vec::new();
    let n_max = obs.n_max();

    let rs = obs.rpd(Arm::Signal);
    let ri = obs.rpd(Arm::Idler);
    stages.done("marginals");
    let digest = digest(obs, &rs, &ri);
    let measured = match obs {
        Observed::Counts(c) => hillery_counts(c),
        Observed::Exact(p) => hillery(&p.conditional()),
    };

    let mut artifacts = Artifacts {
        signal_rpd: rs.clone(),
        idler_rpd: ri.clone(),
        signal_detection: None,
        idler_detection: None,
        assignment: None,
        refinement_fits: Vec::new(),
        final_fit: None,
        lossless: None,
        bootstrap: Vec::new(),
    };
    let mut report = ReconstructionReport {
        status: RunStatus::Complete,
        digest,
        stages: Vec::new(),
        signal: None,
        idler: None,
        assignments: Vec::new(),
        assignments_enumerated: 0,
        assignments_truncated: false,
        refinement: Vec::new(),
        refined_from: 0,
        model: SourceModel::vacuum(n_max),
        result: None,
        hillery: None,
        warnings: Vec::new(),
        seeds,
        config: config.clone(),
    };
    let summary = |lossless: Option<HilleryResult>, p: Option<&LosslessProjection>| HillerySummary {
        measured: measured.clone(),
        lossless,
        eta_s: p.and_then(|p| p.eta_s),
        eta_i: p.and_then(|p| p.eta_i),
        bootstrap_samples: config.bootstrap_samples,
    };

    if obs.is_vacuum() {
        for s in ["structure", "assignment", "refinement", "final_fit", "hillery"] {
            stages.skipped(s, "all events in the vacuum cell");
        }
        report.hillery = Some(summary(None, None));
        report.stages = stages.0;
        return Ok(Reconstruction { report, artifacts });
    }

    // single-arm structures
    let selection = SelectionConfig {
        growth_threshold: config.growth_threshold,
        prune_threshold: config.prune_threshold,
        nominal_trials: config.nominal_trials,
        max_modes_per_arm: config.max_modes_per_arm,
        candidate_types: config.candidate_types.clone(),
        minimize: config.minimize(config.selection_restarts, seeds.selection),
    };
    let mut detections = [None, None];
    for (k, (arm, rpd)) in [(Arm::Signal, &rs), (Arm::Idler, &ri)].into_iter().enumerate() {
        let stage = format!("structure_{}", arm.label());
        match detect_structure(rpd, &config.candidate_types, &selection) {
            Ok(d) => {
                if d.ambiguous {
                    warnings.push(format!("{} arm: {} alternative structure(s) within the threshold", arm.label(), d.alternatives.len()));
                }
                stages.done(&stage);
                detections[k] = Some(d);
            }
            Err(e) => stages.failed(&stage, &e),
        }
    }
    let [det_s, det_i] = detections;

    // pruning
    let prune = |d: &Option<StructureDetection>| match d {
        Some(d) => prune_modes(&d.modes, config.prune_threshold),
        None => Ok(Vec::new()),
    };
    let pruned_s = prune(&det_s)?;
    let pruned_i = prune(&det_i)?;
    stages.done("pruning");
    if let Some(d) = &det_s {
        report.signal = Some(arm_summary(Arm::Signal, d, &pruned_s));
    }
    if let Some(d) = &det_i {
        report.idler = Some(arm_summary(Arm::Idler, d, &pruned_i));
    }
    let opts_s = structure_options(&pruned_s, det_s.as_ref(), config.prune_threshold, config.max_alternatives);
    let opts_i = structure_options(&pruned_i, det_i.as_ref(), config.prune_threshold, config.max_alternatives);
    artifacts.signal_detection = det_s;
    artifacts.idler_detection = det_i;

    let finish = |mut report: ReconstructionReport, stages: Stages, warnings: Vec<String>, artifacts: Artifacts| {
        report.stages = stages.0;
        report.warnings = warnings;
        if report.stages.iter().any(|s| s.state == StageState::Failed) {
            report.status = RunStatus::Partial;
        }
        Ok(Reconstruction { report, artifacts })
    };

    if pruned_s.is_empty() && pruned_i.is_empty() {
        for s in ["assignment", "refinement", "final_fit"] {
            stages.skipped(s, "no modes detected in either arm");
        }
        report.hillery = Some(summary(None, None));
        return finish(report, stages, warnings, artifacts);
    }

    // conjugation assignment
    let data = obs.jpd_data(config.nominal_trials);
    let mut options = Vec::new();
    for s in &opts_s {
        for i in &opts_i {
            options.push((s.clone(), i.clone()));
        }
    }
    let assign_opts = JpdFitOptions {
        minimize: config.minimize(config.assignment_restarts, seeds.assignment),
        penalty_weight: config.penalty_weight,
        polish: true,
    };
    let outcome = match assign_conjugation_options(&options, &data, config.loss_sharing, &assign_opts, config.assignment_cap) {
        Ok(o) if !o.ranking.is_empty() => o,
        Ok(_) => {
            stages.push("assignment", StageState::Failed, Some("no assignment could be fitted".into()));
            for s in ["refinement", "final_fit"] {
                stages.skipped(s, "assignment failed");
            }
            report.hillery = Some(summary(None, None));
            return finish(report, stages, warnings, artifacts);
        }
        Err(e) => {
            stages.failed("assignment", &e);
            for s in ["refinement", "final_fit"] {
                stages.skipped(s, "assignment failed");
            }
            report.hillery = Some(summary(None, None));
            return finish(report, stages, warnings, artifacts);
        }
    };
    if outcome.truncated {
        warnings.push(format!("assignment cap reached: {} of {} assignments fitted", config.assignment_cap, outcome.enumerated));
    }
    report.assignments = outcome
        .ranking
        .iter()
        .enumerate()
        .map(|(rank, r)| AssignmentEntry {
            rank,
            label: r.label.clone(),
            signal_modes: r.signal_modes.clone(),
            idler_modes: r.idler_modes.clone(),
            score: r.fit.fit.score,
            p_value: r.fit.fit.p_value,
            n_params: r.fit.fit.params.len(),
            converged: r.fit.fit.converged,
            model: r.fit.model.clone(),
        })
        .collect();
    report.assignments_enumerated = outcome.enumerated;
    report.assignments_truncated = outcome.truncated;
    if let Some((a, rest)) = outcome.ranking.split_first() {
        let thr = config.growth_threshold * (a.fit.fit.score / data_dof(&data, a.fit.fit.params.len())).max(1.0);
        let rival = rest.iter().find(|b| !same_model(&a.fit.model, &b.fit.model));
        if let Some(b) = rival.filter(|b| (b.fit.fit.score - a.fit.fit.score).abs() < thr) {
            warnings.push(format!("assignment ambiguous: '{}' and '{}' differ by less than the threshold", a.label, b.label));
        }
    }
    stages.done("assignment");
    let best = outcome.ranking[0].fit.clone();

    // joint refinement of the background modes, from each of the leading
    // distinct assignments
    let refined = if config.refine_backgrounds {
        let mut starts: Vec<(usize, &JpdFit)> = Vec::new();
        for (rank, r) in outcome.ranking.iter().enumerate() {
            if starts.len() == config.refine_candidates {
                break;
            }
            if !starts.iter().any(|(_, f)| same_model(&f.model, &r.fit.model)) {
                starts.push((rank, &r.fit));
            }
        }
        let runs: Result<Vec<(usize, Refined)>> = starts
            .iter()
            .map(|&(rank, f)| {
                let seed = restart_seed(seeds.refinement, rank);
                refine_backgrounds(&data, f.clone(), rank, config, seed).map(|r| (rank, r))
            })
            .collect();
        match runs {
            Ok(runs) => {
                stages.done("refinement");
                let mut pick = 0;
                for k in 1..runs.len() {
                    let (a, b) = (&runs[pick].1.fit, &runs[k].1.fit);
                    let extra = b.fit.params.len().saturating_sub(a.fit.params.len()) as f64;
                    let thr = config.growth_threshold * (b.fit.score / data_dof(&data, b.fit.params.len())).max(1.0);
                    if a.fit.score - b.fit.score > extra * thr && rank_cmp(a, b) != std::cmp::Ordering::Equal {
                        pick = k;
                    }
                }
                report.refined_from = runs[pick].0;
                let fit = runs[pick].1.fit.clone();
                for (_, r) in runs {
                    report.refinement.extend(r.steps);
                    artifacts.refinement_fits.extend(r.fits);
                }
                fit
            }
            Err(e) => {
                stages.failed("refinement", &e);
                best
            }
        }
    } else {
        stages.skipped("refinement", "disabled");
        best
    };
    artifacts.assignment = Some(outcome);

    // final fit around the refined optimum
    let template = JpdTemplate::from_model(&refined.model, config.loss_sharing);
    let final_opts = JpdFitOptions {
        minimize: MinimizeOptions {
            start: StartRegion::AroundInitial { half_width: 0.5 },
            ..config.minimize(config.final_restarts, seeds.final_fit)
        },
        penalty_weight: 0.0,
        polish: false,
    };
    let final_fit = match fit_jpd(&data, &template, &final_opts) {
        Ok(f) => {
            stages.done("final_fit");
            f
        }
        Err(e) => {
            stages.failed("final_fit", &e);
            report.model = refined.model.clone();
            report.hillery = Some(summary(None, None));
            return finish(report, stages, warnings, artifacts);
        }
    };
    if !final_fit.fit.converged {
        warnings.push("final fit did not converge".into());
    }
    let n_params = final_fit.fit.params.len();
    let pearson = obs.counts().and_then(|c| pearson_pvalue(c, &final_fit.jpd, n_params));
    report.model = final_fit.model.clone();
    report.result = Some(FinalFit {
        model: final_fit.model.clone(),
        fit: final_fit.fit.clone(),
        n_params,
        pearson,
        restarts_worse: final_fit.fit.restarts_worse_than_best(1e-6, 1e-9),
    });

    // Hillery sums of the lossless state
    if final_fit.model.with_occupancy(Occupancy::Conjugated).next().is_none() {
        stages.skipped("hillery", "no conjugated modes");
        report.hillery = Some(summary(None, None));
    } else {
        match lossless_hillery(&data, &template, &final_fit, config.bootstrap_samples, seeds.bootstrap) {
            Ok((h, projection, sums)) => {
                stages.done("hillery");
                report.hillery = Some(summary(Some(h), Some(&projection)));
                artifacts.lossless = Some(projection);
                artifacts.bootstrap = sums;
            }
            Err(e) => {
                stages.failed("hillery", &e);
                report.hillery = Some(summary(None, None));
            }
        }
    }
    artifacts.final_fit = Some(final_fit);
    finish(report, stages, warnings, artifacts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnownStructureOptions {
    pub minimize: MinimizeOptions,
    pub penalty_weight: f64,
    pub nominal_trials: f64,
    /// Loss parameterization; `None` shares losses when every conjugated mode
    /// of the structure has the same transmittances.
    pub loss: Option<LossSharing>,
}

impl Default for KnownStructureOptions {
    fn default() -> Self {
        Self {
            minimize: MinimizeOptions { restarts: 2, ..Default::default() },
            penalty_weight: 1e3,
            nominal_trials: 1e6,
            loss: None,
        }
    }
}

/// Shared losses when every conjugated mode has the same transmittances,
/// per-mode losses otherwise.
pub fn default_loss_sharing(model: &SourceModel) -> LossSharing {
    let mut conj = model.with_occupancy(Occupancy::Conjugated);
    let shared = match conj.next() {
        Some(first) => conj.all(|m| (m.eta_s - first.eta_s).abs() < 1e-12 && (m.eta_i - first.eta_i).abs() < 1e-12),
        None => true,
    };
    if shared {
        LossSharing::SharedArm
    } else {
        LossSharing::PerMode
    }
}

/// Single-arm fit of the modes `structure` puts into `arm`; returns the
/// fitted effective mean of each mode of `structure` seen in that arm.
fn arm_means(obs: &Observed, structure: &SourceModel, arm: Arm, options: &KnownStructureOptions) -> Result<Vec<Option<f64>>> {
    let mut roles: Vec<(usize, ModeType, f64)> = Vec::new();
    for (j, m) in structure.modes.iter().enumerate() {
        let seen = match (m.occupancy, arm) {
            (Occupancy::Conjugated, Arm::Signal) => Some(m.mu * m.eta_s),
            (Occupancy::Conjugated, Arm::Idler) => Some(m.mu * m.eta_i),
            (Occupancy::Signal, Arm::Signal) | (Occupancy::Idler, Arm::Idler) => Some(m.mu),
            _ => None,
        };
        if let Some(mu) = seen {
            roles.push((j, m.mode_type, mu));
        }
    }
    let mut out = vec![None; structure.modes.len()];
    if roles.is_empty() {
        return Ok(out);
    }
    let rpd = obs.rpd(arm);
    let types: Vec<ModeType> = roles.iter().map(|r| r.1).collect();
    let weighting = selection_weighting(&rpd, options.nominal_trials);
    let fit = fit_rpd_with(&rpd, &types, weighting, &options.minimize, None)?;
    for t in ModeType::ALL {
        let mut rs: Vec<&(usize, ModeType, f64)> = roles.iter().filter(|r| r.1 == t).collect();
        rs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        let fitted = fit.modes.iter().filter(|m| m.mode_type == t);
        for (r, m) in rs.into_iter().zip(fitted) {
            out[r.0] = Some(m.mu);
        }
    }
    Ok(out)
}

/// Two-step reconstruction with the mode structure given: single-arm fits of
/// the structure's modes, matched to their roles by rank within each type,
/// then the constrained joint fit.
pub fn reconstruct_known_structure(obs: &Observed, structure: &SourceModel, options: &KnownStructureOptions) -> Result<JpdFit> {
    obs.check()?;
    structure.validate()?;
    if structure.n_max != obs.n_max() {
        return contract("structure and data windows differ");
    }
    let loss = options.loss.unwrap_or_else(|| default_loss_sharing(structure));
    let ms = arm_means(obs, structure, Arm::Signal, options)?;
    let mi = arm_means(obs, structure, Arm::Idler, options)?;
    let (mut conj, mut bs, mut bi) = (Vec::new(), Vec::new(), Vec::new());
    for (j, m) in structure.modes.iter().enumerate() {
        match m.occupancy {
            Occupancy::Conjugated => conj.push((m.mode_type, ms[j].unwrap_or(0.0), mi[j].unwrap_or(0.0))),
            Occupancy::Signal => bs.push(FittedMode::new(m.mode_type, ms[j].unwrap_or(0.0))),
            Occupancy::Idler => bi.push(FittedMode::new(m.mode_type, mi[j].unwrap_or(0.0))),
        }
    }
    let template = JpdTemplate::from_step_one(&conj, &bs, &bi, structure.n_max, loss)?;
    let fit_options = JpdFitOptions { minimize: options.minimize.clone(), penalty_weight: options.penalty_weight, polish: true };
    fit_jpd(&obs.jpd_data(options.nominal_trials), &template, &fit_options)
}

/// `sum |mu_fit - mu_true| / sum mu_true` over modes paired in canonical
/// order; `None` when the two structures differ.
pub fn relative_error(fitted: &SourceModel, truth: &SourceModel) -> Option<f64> {
    let mut a = fitted.clone();
    let mut b = truth.clone();
    a.canonicalize();
    b.canonicalize();
    if a.modes.len() != b.modes.len()
        || a.modes.iter().zip(&b.modes).any(|(x, y)| x.occupancy != y.occupancy || x.mode_type != y.mode_type)
    {
        return None;
    }
    let total: f64 = b.modes.iter().map(|m| m.mu).sum();
    if total <= 0.0 {
        return None;
    }
    Some(a.modes.iter().zip(&b.modes).map(|(x, y)| (x.mu - y.mu).abs()).sum::<f64>() / total)
}
