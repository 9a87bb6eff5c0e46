//! Mode structure from data: thermal escalation, greedy structure growth,
//! population pruning and the choice of which modes are conjugated.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::fitting::{
    absolute_error, default_weighting, fit_jpd, fit_rpd_with, minimize, FittedMode, JpdData, JpdFit, JpdFitOptions, JpdTemplate,
    LossSharing, MinimizeOptions, Param, ParamRole, ParamVector, RpdFit, SqrtResiduals, Weighting,
};
use crate::forward_model::SourceModel;
use crate::reduction::Rpd;
use crate::statistics::{ln_factorial, ModeType, Pmf};

/// One row of a thermal escalation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscalationRow {
    pub k: usize,
    pub per_mode_mu: f64,
    pub total_mu: f64,
    pub error: f64,
    pub score: f64,
    /// Means from an unconstrained fit of `k` thermal modes, when computed.
    pub free_fit: Option<Vec<f64>>,
    /// Whether every free mean lies within 2% of the shared mean.
    pub free_fit_agrees: Option<bool>,
}

/// Sum of `k` identical thermal modes: negative binomial with `k` trials.
fn equal_thermal_probs(k: usize, mu: f64, n_max: usize) -> Vec<f64> {
    let q = mu / (1.0 + mu);
    let (lq, l1q) = (q.ln(), (1.0 / (1.0 + mu)).ln());
    (0..=n_max)
        .map(|n| {
            if mu == 0.0 {
                return if n == 0 { 1.0 } else { 0.0 };
            }
            let lc = ln_factorial(n + k - 1) - ln_factorial(n) - ln_factorial(k - 1);
            (lc + n as f64 * lq + k as f64 * l1q).exp()
        })
        .collect()
}

fn window_normalized(v: &[f64]) -> Vec<f64> {
    let t: f64 = v.iter().sum();
    v.iter().map(|x| x / t).collect()
}

/// Number of free mean parameters checked against the shared fit.
const FREE_CHECK_MAX_K: usize = 4;

/// Fits `k` equally populated thermal modes for every `k` in `ks`.
pub fn escalate_thermal_at(rpd: &Rpd, ks: &[usize], options: &MinimizeOptions) -> Result<Vec<EscalationRow>> {
    if ks.iter().any(|&k| k == 0) {
        return contract("mode counts must be at least 1");
    }
    let n_max = rpd.n_max();
    let weighting = default_weighting(rpd);
    let residuals = SqrtResiduals::new(&rpd.probs, weighting)?;
    let x = window_normalized(&rpd.probs);
    let mean: f64 = x.iter().enumerate().map(|(n, p)| n as f64 * p).sum();
    ks.par_iter()
        .map(|&k| {
            let init = ParamVector::new(vec![Param {
                role: ParamRole::ModeMu,
                mode: 0,
                value: (mean / k as f64).max(1e-4),
                bound: crate::fitting::Bound::Positive,
            }]);
            let objective = |p: &ParamVector| residuals.eval(&equal_thermal_probs(k, p.value(0), n_max));
            let fit = minimize(&objective, &init, options)?;
            let mu = fit.params.value(0);
            let f = window_normalized(&equal_thermal_probs(k, mu, n_max));
            let (free_fit, free_fit_agrees) = if k <= FREE_CHECK_MAX_K {
                let template = vec![ModeType::Thermal; k];
                let start = vec![mu; k];
                let free = fit_rpd_with(rpd, &template, weighting, options, Some(&start))?;
                let mus: Vec<f64> = free.modes.iter().map(|m| m.mu).collect();
                let agrees = mus.iter().all(|m| (m - mu).abs() <= 0.02 * mu);
                (Some(mus), Some(agrees))
            } else {
                (None, None)
            };
            Ok(EscalationRow {
                k,
                per_mode_mu: mu,
                total_mu: mu * k as f64,
                error: absolute_error(&x, &f),
                score: fit.score,
                free_fit,
                free_fit_agrees,
            })
        })
        .collect()
}

/// Escalation over `k = 1..=k_max`.
pub fn escalate_thermal(rpd: &Rpd, k_max: usize, options: &MinimizeOptions) -> Result<Vec<EscalationRow>> {
    if k_max == 0 {
        return contract("k_max must be at least 1");
    }
    let ks: Vec<usize> = (1..=k_max).collect();
    escalate_thermal_at(rpd, &ks, options)
}

/// Settings of structure growth and conjugation assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Score improvement an added mode must exceed (chi-squared with one
    /// degree of freedom at p = 0.001), scaled up by the reduced chi-squared
    /// of the richer fit when that exceeds one.
    pub growth_threshold: f64,
    /// Modes below this fraction of the arm's total mean are rejected.
    pub prune_threshold: f64,
    /// Trials assumed when weighting exact (noise-free) input.
    pub nominal_trials: f64,
    pub max_modes_per_arm: usize,
    pub candidate_types: Vec<ModeType>,
    pub minimize: MinimizeOptions,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            growth_threshold: 10.83,
            prune_threshold: 0.01,
            nominal_trials: 1e6,
            max_modes_per_arm: 6,
            candidate_types: ModeType::ALL.to_vec(),
            minimize: MinimizeOptions { restarts: 4, ..Default::default() },
        }
    }
}

/// A structure considered during growth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateStructure {
    pub modes: Vec<FittedMode>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthStep {
    pub accepted: Option<CandidateStructure>,
    pub candidates: Vec<CandidateStructure>,
    /// Threshold the best candidate had to beat.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureDetection {
    pub modes: Vec<FittedMode>,
    pub fit: Option<RpdFit>,
    /// Structures that scored within the threshold of the chosen one at the
    /// last accepted step.
    pub alternatives: Vec<CandidateStructure>,
    pub ambiguous: bool,
    pub steps: Vec<GrowthStep>,
}

fn is_vacuum(rpd: &Rpd) -> bool {
    let total: f64 = rpd.probs.iter().sum();
    total <= 0.0 || rpd.probs[0] >= total * (1.0 - 1e-12)
}

/// Weighting used for structure decisions: shot noise of the data, or of
/// `nominal_trials` events for exact input.
pub(crate) fn selection_weighting(rpd: &Rpd, nominal_trials: f64) -> Weighting {
    match &rpd.counts {
        Some(c) => Weighting::Counts { trials: c.iter().sum::<u64>().max(1) as f64 },
        None => Weighting::Counts { trials: nominal_trials },
    }
}

struct Move {
    types: Vec<ModeType>,
    init: Vec<f64>,
}

fn moves(current: &[FittedMode], candidates: &[ModeType], mean: f64) -> Vec<Move> {
    let has = |t: ModeType| current.iter().any(|m| m.mode_type == t);
    let base_types: Vec<ModeType> = current.iter().map(|m| m.mode_type).collect();
    let base_mu: Vec<f64> = current.iter().map(|m| m.mu).collect();
    let seed_mu = (0.1 * mean).max(1e-3);
    let mut out = Vec::new();
    for &t in candidates {
        // two Poissonian modes are indistinguishable from one
        if t == ModeType::Poissonian && has(t) {
            continue;
        }
        let mut types = base_types.clone();
        let mut init = base_mu.clone();
        types.push(t);
        init.push(if t == ModeType::SinglePhoton { seed_mu.min(0.5) } else { seed_mu });
        out.push(Move { types, init });
    }
    if candidates.contains(&ModeType::Poissonian) && !has(ModeType::Poissonian) {
        for (i, m) in current.iter().enumerate() {
            if m.mode_type == ModeType::Thermal {
                let mut types = base_types.clone();
                types[i] = ModeType::Poissonian;
                out.push(Move { types, init: base_mu.clone() });
            }
        }
    }
    out
}

fn canonical(mut modes: Vec<FittedMode>) -> Vec<FittedMode> {
    modes.sort_by(|a, b| a.canonical_cmp(b));
    modes
}

/// Grows a mode list for one arm: at each step every admissible extension
/// (one more mode of a candidate type, or a thermal mode turned Poissonian)
/// is fitted, and the best is kept if it improves the score beyond the
/// threshold and none of its modes falls below the population threshold.
pub fn detect_structure(rpd: &Rpd, candidate_types: &[ModeType], config: &SelectionConfig) -> Result<StructureDetection> {
    let mut steps = Vec::new();
    if is_vacuum(rpd) {
        return Ok(StructureDetection { modes: Vec::new(), fit: None, alternatives: Vec::new(), ambiguous: false, steps });
    }
    let weighting = selection_weighting(rpd, config.nominal_trials);
    let residuals = SqrtResiduals::new(&rpd.probs, weighting)?;
    let n_max = rpd.n_max();
    let total: f64 = rpd.probs.iter().sum();
    let mean = rpd.mean() / total;
    let bins = rpd.probs.iter().filter(|p| **p > 0.0).count().max(2);

    let mut current: Vec<FittedMode> = Vec::new();
    let mut current_fit: Option<RpdFit> = None;
    let mut current_score = residuals.eval(Pmf::vacuum(n_max).probs());
    let mut alternatives = Vec::new();
    loop {
        if current.len() >= config.max_modes_per_arm {
            break;
        }
        let candidates = moves(&current, candidate_types, mean);
        if candidates.is_empty() {
            break;
        }
        let fits: Vec<RpdFit> = candidates
            .par_iter()
            .map(|m| fit_rpd_with(rpd, &m.types, weighting, &config.minimize, Some(&m.init)))
            .collect::<Result<_>>()?;
        let summaries: Vec<CandidateStructure> =
            fits.iter().map(|f| CandidateStructure { modes: f.modes.clone(), score: f.fit.score }).collect();
        let populated = |f: &RpdFit| {
            let t = f.total_mu();
            f.modes.iter().all(|m| m.mu >= config.prune_threshold * t)
        };
        let best = (0..fits.len())
            .filter(|&i| populated(&fits[i]))
            .min_by(|&a, &b| fits[a].fit.score.total_cmp(&fits[b].fit.score));
        let Some(best) = best else {
            steps.push(GrowthStep { accepted: None, candidates: summaries, threshold: config.growth_threshold });
            break;
        };
        let dof = bins.saturating_sub(fits[best].modes.len() + 1).max(1) as f64;
        let threshold = config.growth_threshold * (fits[best].fit.score / dof).max(1.0);
        let improvement = current_score - fits[best].fit.score;
        if !(improvement > threshold) {
            steps.push(GrowthStep { accepted: None, candidates: summaries, threshold });
            break;
        }
        let best_score = fits[best].fit.score;
        alternatives = (0..fits.len())
            .filter(|&i| i != best && populated(&fits[i]) && fits[i].fit.score - best_score < threshold)
            .map(|i| summaries[i].clone())
            .collect();
        steps.push(GrowthStep { accepted: Some(summaries[best].clone()), candidates: summaries, threshold });
        current = fits[best].modes.clone();
        current_score = best_score;
        current_fit = Some(fits.into_iter().nth(best).expect("index in range"));
    }
    let ambiguous = !alternatives.is_empty();
    Ok(StructureDetection { modes: canonical(current), fit: current_fit, alternatives, ambiguous, steps })
}

/// Drops modes whose mean is below `threshold` times the total mean.
pub fn prune_modes(modes: &[FittedMode], threshold: f64) -> Result<Vec<FittedMode>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return contract(format!("pruning threshold must lie in (0, 1), got {threshold}"));
    }
    let total: f64 = modes.iter().map(|m| m.mu).sum();
    Ok(canonical(modes.iter().copied().filter(|m| m.mu >= threshold * total).collect()))
}

/// Pairing of signal-arm modes with idler-arm modes of the same type.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Assignment {
    /// `(signal index, idler index)` of every conjugated pair.
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn label(&self, signal: &[FittedMode], idler: &[FittedMode]) -> String {
        let used_s: BTreeSet<usize> = self.pairs.iter().map(|p| p.0).collect();
        let used_i: BTreeSet<usize> = self.pairs.iter().map(|p| p.1).collect();
        let mut parts: Vec<String> = self
            .pairs
            .iter()
            .map(|&(s, i)| format!("{}[s{s}+i{i}]", signal[s].mode_type.label()))
            .collect();
        for (s, m) in signal.iter().enumerate().filter(|(s, _)| !used_s.contains(s)) {
            parts.push(format!("{}[s{s}]", m.mode_type.label()));
        }
        for (i, m) in idler.iter().enumerate().filter(|(i, _)| !used_i.contains(i)) {
            parts.push(format!("{}[i{i}]", m.mode_type.label()));
        }
        parts.join(" ")
    }
}

/// All type-consistent partial pairings, the greedy one (bright with bright,
/// as many pairs as possible) first, then by decreasing pair count.
pub fn enumerate_assignments(signal: &[FittedMode], idler: &[FittedMode]) -> Vec<Assignment> {
    fn rec(
        s: usize,
        signal: &[FittedMode],
        idler: &[FittedMode],
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        out: &mut Vec<Assignment>,
    ) {
        if s == signal.len() {
            out.push(Assignment { pairs: cur.clone() });
            return;
        }
        rec(s + 1, signal, idler, used, cur, out);
        for i in 0..idler.len() {
            if !used[i] && idler[i].mode_type == signal[s].mode_type {
                used[i] = true;
                cur.push((s, i));
                rec(s + 1, signal, idler, used, cur, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut all = Vec::new();
    rec(0, signal, idler, &mut vec![false; idler.len()], &mut Vec::new(), &mut all);

    // greedy pairing on canonically sorted lists
    let mut greedy = Vec::new();
    for t in ModeType::ALL {
        let ss: Vec<usize> = sorted_indices(signal, t);
        let ii: Vec<usize> = sorted_indices(idler, t);
        greedy.extend(ss.into_iter().zip(ii));
    }
    greedy.sort();
    let greedy = Assignment { pairs: greedy };
    let rank_gap = |a: &Assignment| -> usize {
        a.pairs
            .iter()
            .map(|&(s, i)| {
                let rs = sorted_indices(signal, signal[s].mode_type).iter().position(|&x| x == s).unwrap_or(0);
                let ri = sorted_indices(idler, idler[i].mode_type).iter().position(|&x| x == i).unwrap_or(0);
                rs.abs_diff(ri)
            })
            .sum()
    };
    all.sort_by(|a, b| {
        (*b == greedy)
            .cmp(&(*a == greedy))
            .then(b.pairs.len().cmp(&a.pairs.len()))
            .then(rank_gap(a).cmp(&rank_gap(b)))
            .then(a.cmp(b))
    });
    all
}

fn sorted_indices(modes: &[FittedMode], t: ModeType) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..modes.len()).filter(|&j| modes[j].mode_type == t).collect();
    idx.sort_by(|&a, &b| modes[b].mu.total_cmp(&modes[a].mu).then(a.cmp(&b)));
    idx
}

/// Template for one assignment of step-one modes.
pub fn assignment_template(
    assignment: &Assignment,
    signal: &[FittedMode],
    idler: &[FittedMode],
    n_max: usize,
    loss: LossSharing,
) -> Result<JpdTemplate> {
    let used_s: BTreeSet<usize> = assignment.pairs.iter().map(|p| p.0).collect();
    let used_i: BTreeSet<usize> = assignment.pairs.iter().map(|p| p.1).collect();
    let conj: Vec<(ModeType, f64, f64)> = assignment
        .pairs
        .iter()
        .map(|&(s, i)| (signal[s].mode_type, signal[s].mu, idler[i].mu))
        .collect();
    let bs: Vec<FittedMode> =
        signal.iter().enumerate().filter(|(s, _)| !used_s.contains(s)).map(|(_, m)| *m).collect();
    let bi: Vec<FittedMode> =
        idler.iter().enumerate().filter(|(i, _)| !used_i.contains(i)).map(|(_, m)| *m).collect();
    JpdTemplate::from_step_one(&conj, &bs, &bi, n_max, loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedAssignment {
    pub label: String,
    pub signal_modes: Vec<FittedMode>,
    pub idler_modes: Vec<FittedMode>,
    pub assignment: Assignment,
    pub fit: JpdFit,
}

impl RankedAssignment {
    pub fn model(&self) -> &SourceModel {
        &self.fit.model
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentOutcome {
    /// Best first.
    pub ranking: Vec<RankedAssignment>,
    pub enumerated: usize,
    /// Set when the cap cut the enumeration short.
    pub truncated: bool,
}

impl AssignmentOutcome {
    pub fn best(&self) -> Option<&RankedAssignment> {
        self.ranking.first()
    }
}

/// Orders fits by P-value (higher first), then by score. Fits whose scores
/// agree to 1e-9 relative compare equal, so a stable sort keeps them in
/// enumeration order.
pub fn rank_cmp(a: &JpdFit, b: &JpdFit) -> std::cmp::Ordering {
    let (sa, sb) = (a.fit.score, b.fit.score);
    if (sa - sb).abs() <= 1e-9 * sa.abs().max(sb.abs()) {
        return std::cmp::Ordering::Equal;
    }
    let pa = a.fit.p_value.unwrap_or(-1.0);
    let pb = b.fit.p_value.unwrap_or(-1.0);
    pb.total_cmp(&pa).then(sa.total_cmp(&sb))
}

/// Fits every assignment of every structure option (pairs of signal and idler
/// mode lists) up to `cap` assignments in total, and ranks the fits.
pub fn assign_conjugation_options(
    options: &[(Vec<FittedMode>, Vec<FittedMode>)],
    data: &JpdData,
    loss: LossSharing,
    fit_options: &JpdFitOptions,
    cap: usize,
) -> Result<AssignmentOutcome> {
    type Job = (Vec<FittedMode>, Vec<FittedMode>, Assignment);
    let per: Vec<Vec<Job>> = options
        .iter()
        .map(|(s, i)| enumerate_assignments(s, i).into_iter().map(|a| (s.clone(), i.clone(), a)).collect())
        .collect();
    let enumerated: usize = per.iter().map(Vec::len).sum();
    let truncated = enumerated > cap;
    // round-robin over structure options so a cap keeps the leading
    // assignments of each
    let longest = per.iter().map(Vec::len).max().unwrap_or(0);
    let mut jobs: Vec<Job> = Vec::with_capacity(enumerated);
    for r in 0..longest {
        for p in &per {
            if let Some(j) = p.get(r) {
                jobs.push(j.clone());
            }
        }
    }
    jobs.truncate(cap);
    let mut ranking: Vec<RankedAssignment> = jobs
        .par_iter()
        .map(|(s, i, a)| {
            let template = assignment_template(a, s, i, data.n_max, loss)?;
            let fit = fit_jpd(data, &template, fit_options)?;
            Ok(RankedAssignment {
                label: a.label(s, i),
                signal_modes: s.clone(),
                idler_modes: i.clone(),
                assignment: a.clone(),
                fit,
            })
        })
        .collect::<Result<_>>()?;
    ranking.sort_by(|a, b| rank_cmp(&a.fit, &b.fit));
    Ok(AssignmentOutcome { ranking, enumerated, truncated })
}

/// Ranks all conjugation assignments of one pair of arm structures.
pub fn assign_conjugation(
    signal_modes: &[FittedMode],
    idler_modes: &[FittedMode],
    data: &JpdData,
    loss: LossSharing,
    fit_options: &JpdFitOptions,
    cap: usize,
) -> Result<AssignmentOutcome> {
    assign_conjugation_options(&[(signal_modes.to_vec(), idler_modes.to_vec())], data, loss, fit_options, cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reduction::Arm;
    use crate::statistics::pmf;

    fn fm(t: ModeType, mu: f64) -> FittedMode {
        FittedMode::new(t, mu)
    }

    #[test]
    fn negative_binomial_matches_convolution() {
        let a = pmf(ModeType::Thermal, 0.7, 30).unwrap();
        let b = crate::statistics::convolve(&a, &a, 30);
        let c = crate::statistics::convolve(&b, &a, 30);
        let nb = equal_thermal_probs(3, 0.7, 30);
        for n in 0..=30 {
            assert!((nb[n] - c.get(n)).abs() < 1e-14);
        }
    }

    #[test]
    fn prune_examples() {
        let out = prune_modes(&[fm(ModeType::Thermal, 10.0), fm(ModeType::Thermal, 0.05)], 0.01).unwrap();
        assert_eq!(out, vec![fm(ModeType::Thermal, 10.0)]);
        let keep = vec![fm(ModeType::Thermal, 8.2), fm(ModeType::Thermal, 0.37), fm(ModeType::Poissonian, 0.1)];
        assert_eq!(prune_modes(&keep, 0.01).unwrap(), keep);
        assert!(prune_modes(&[], 0.01).unwrap().is_empty());
        assert!(prune_modes(&keep, 0.0).is_err());
    }

    #[test]
    fn vacuum_has_no_modes() {
        let rpd = Rpd::exact(Arm::Signal, &Pmf::vacuum(10));
        let d = detect_structure(&rpd, &ModeType::ALL, &SelectionConfig::default()).unwrap();
        assert!(d.modes.is_empty());
    }

    #[test]
    fn poissonian_five_is_one_poissonian_mode() {
        let rpd = Rpd::exact(Arm::Signal, &pmf(ModeType::Poissonian, 5.0, 40).unwrap());
        let d = detect_structure(&rpd, &ModeType::ALL, &SelectionConfig::default()).unwrap();
        assert_eq!(d.modes.len(), 1, "{:?}", d.modes);
        assert_eq!(d.modes[0].mode_type, ModeType::Poissonian);
        assert!((d.modes[0].mu - 5.0).abs() < 1e-4);
    }

    #[test]
    fn greedy_assignment_first() {
        let s = vec![fm(ModeType::Thermal, 8.0), fm(ModeType::Thermal, 0.4), fm(ModeType::Poissonian, 0.1)];
        let i = vec![fm(ModeType::Thermal, 10.0), fm(ModeType::Thermal, 0.5), fm(ModeType::Poissonian, 0.2)];
        let all = enumerate_assignments(&s, &i);
        assert_eq!(all.len(), 14);
        assert_eq!(all[0].pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(all.iter().any(|a| a.pairs.is_empty()));
        let none = enumerate_assignments(&s, &[]);
        assert_eq!(none.len(), 1);
        assert!(none[0].pairs.is_empty());
    }

    #[test]
    fn table_rows_two_and_ten() {
        let rpd = Rpd::exact(Arm::Signal, &pmf(ModeType::Poissonian, 5.0, 40).unwrap());
        let rows = escalate_thermal_at(&rpd, &[2, 10], &MinimizeOptions::default()).unwrap();
        assert!((rows[0].per_mode_mu - 1.3).abs() < 0.02, "{:?}", rows[0]);
        assert!((rows[0].error - 0.33).abs() < 0.02, "{:?}", rows[0]);
        assert_eq!(rows[0].free_fit_agrees, Some(true));
        assert!((rows[1].per_mode_mu - 0.42).abs() < 0.02, "{:?}", rows[1]);
        assert!((rows[1].error - 0.11).abs() < 0.02, "{:?}", rows[1]);
    }
}
