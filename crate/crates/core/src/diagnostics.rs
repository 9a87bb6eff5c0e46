//! Goodness of fit, the Hillery nonclassicality test and Monte-Carlo error
//! curves.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{contract, Result};
use crate::fitting::restart_seed;
use crate::forward_model::{full_jpd, ProbMatrix, SourceModel};
use crate::pipeline::{reconstruct_known_structure, relative_error, KnownStructureOptions, Observed};
use crate::sampling::{sample_counts_with, substream, CountMatrix};

/// Smallest expected count a bin may have before it is pooled.
pub const MIN_EXPECTED: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PearsonTest {
    pub chi2: f64,
    pub bins: usize,
    pub dof: usize,
    pub p_value: f64,
}

#[derive(Clone, Copy, Default)]
struct Bin {
    observed: f64,
    expected: f64,
}

impl std::ops::AddAssign for Bin {
    fn add_assign(&mut self, o: Self) {
        self.observed += o.observed;
        self.expected += o.expected;
    }
}

/// Pools cells with small expectation: within each group they merge into one
/// bin, and groups whose pooled bin is still small feed a single remainder
/// bin. A remainder that stays small joins the smallest regular bin.
fn pooled_test(groups: impl IntoIterator<Item = Vec<Bin>>, n_params: usize) -> Option<PearsonTest> {
    let mut bins: Vec<Bin> = Vec::new();
    let mut remainder = Bin::default();
    for group in groups {
        let mut pool = Bin::default();
        for cell in group {
            if cell.expected >= MIN_EXPECTED {
                bins.push(cell);
            } else {
                pool += cell;
            }
        }
        if pool.expected >= MIN_EXPECTED {
            bins.push(pool);
        } else {
            remainder += pool;
        }
    }
    if remainder.expected >= MIN_EXPECTED || bins.is_empty() {
        bins.push(remainder);
    } else if remainder.expected > 0.0 || remainder.observed > 0.0 {
        let smallest = (0..bins.len()).min_by(|&a, &b| bins[a].expected.total_cmp(&bins[b].expected))?;
        bins[smallest] += remainder;
    }
    let mut chi2 = 0.0;
    for b in &bins {
        if b.expected > 0.0 {
            chi2 += (b.observed - b.expected).powi(2) / b.expected;
        } else if b.observed > 0.0 {
            chi2 = f64::INFINITY;
        }
    }
    let dof = bins.len().checked_sub(n_params + 1).filter(|d| *d > 0)?;
    let p_value = if chi2.is_finite() {
        ChiSquared::new(dof as f64).ok()?.sf(chi2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Some(PearsonTest { chi2, bins: bins.len(), dof, p_value })
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let t: f64 = v.iter().sum();
    if t > 0.0 {
        v.iter().map(|x| x / t).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Pearson chi-squared test of in-window counts against a model normalized
/// over the same window. Small cells are pooled per shell of constant
/// `n_s + n_i`. Returns `None` when no degrees of freedom remain.
pub fn pearson_pvalue(observed: &CountMatrix, model: &ProbMatrix, n_fit_params: usize) -> Option<PearsonTest> {
    let dim = observed.dim();
    if model.dim() != dim {
        return None;
    }
    let n = observed.in_range() as f64;
    if n == 0.0 {
        return None;
    }
    let f = normalized(model.entries());
    let groups = (0..2 * dim - 1).map(|shell| {
        let lo = shell.saturating_sub(dim - 1);
        let hi = shell.min(dim - 1);
        (lo..=hi)
            .map(|ns| {
                let ni = shell - ns;
                Bin { observed: observed.get(ns, ni) as f64, expected: n * f[ns * dim + ni] }
            })
            .collect::<Vec<_>>()
    });
    pooled_test(groups, n_fit_params)
}

/// Pearson test of single-arm counts against a window-normalized model.
pub fn pearson_1d(counts: &[u64], model: &[f64], n_fit_params: usize) -> Option<PearsonTest> {
    if counts.len() != model.len() {
        return None;
    }
    let n: f64 = counts.iter().map(|&c| c as f64).sum();
    if n == 0.0 {
        return None;
    }
    let f = normalized(model);
    let groups = counts
        .iter()
        .zip(f)
        .map(|(&c, p)| vec![Bin { observed: c as f64, expected: n * p }]);
    pooled_test(groups, n_fit_params)
}

/// Hillery sums: probability of even `n_s + n_i >= 2` against odd totals.
/// Classical states satisfy `even_sum <= odd_sum`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HilleryResult {
    pub even_sum: f64,
    pub odd_sum: f64,
    pub vacuum: f64,
    /// Probability outside the window, whose parity is unknown.
    pub tail_mass: f64,
    pub even_sigma: Option<f64>,
    pub odd_sigma: Option<f64>,
    /// `(even - odd) / sqrt(even_sigma^2 + odd_sigma^2)`.
    pub significance: Option<f64>,
    /// How the uncertainties were obtained.
    pub sigma_method: Option<String>,
}

impl HilleryResult {
    pub fn violates(&self) -> bool {
        self.even_sum > self.odd_sum
    }

    pub fn with_sigmas(mut self, even_sigma: f64, odd_sigma: f64, method: &str) -> Self {
        let combined = (even_sigma.powi(2) + odd_sigma.powi(2)).sqrt();
        self.even_sigma = Some(even_sigma);
        self.odd_sigma = Some(odd_sigma);
        self.significance = (combined > 0.0).then(|| (self.even_sum - self.odd_sum) / combined);
        self.sigma_method = Some(method.to_string());
        self
    }
}

/// Hillery sums of a distribution as given, without uncertainties.
pub fn hillery(jpd: &ProbMatrix) -> HilleryResult {
    let dim = jpd.dim();
    let (mut even, mut odd) = (0.0, 0.0);
    for ns in 0..dim {
        for (ni, &p) in jpd.row(ns).iter().enumerate() {
            let s = ns + ni;
            if s % 2 == 1 {
                odd += p;
            } else if s >= 2 {
                even += p;
            }
        }
    }
    HilleryResult {
        even_sum: even,
        odd_sum: odd,
        vacuum: jpd.get(0, 0),
        tail_mass: jpd.tail_mass(),
        even_sigma: None,
        odd_sigma: None,
        significance: None,
        sigma_method: None,
    }
}

/// Hillery sums of measured counts, normalized over the window, with
/// binomial uncertainties of the two event fractions.
pub fn hillery_counts(counts: &CountMatrix) -> HilleryResult {
    let n = counts.in_range();
    let p: Vec<f64> = counts.counts().iter().map(|&c| c as f64 / n.max(1) as f64).collect();
    let jpd = ProbMatrix::with_tail(counts.n_max(), p);
    let h = hillery(&jpd);
    let nf = n.max(1) as f64;
    let se = (h.even_sum * (1.0 - h.even_sum) / nf).sqrt();
    let so = (h.odd_sum * (1.0 - h.odd_sum) / nf).sqrt();
    h.with_sigmas(se, so, "binomial")
}

/// Spread of Hillery sums over an ensemble of distributions, e.g. from a
/// parametric bootstrap: returns the sample standard deviations of the even
/// and odd sums.
pub fn hillery_spread(samples: &[ProbMatrix]) -> Option<(f64, f64)> {
    if samples.len() < 2 {
        return None;
    }
    let sums: Vec<(f64, f64)> = samples.iter().map(|m| {
        let h = hillery(m);
        (h.even_sum, h.odd_sum)
    }).collect();
    let k = sums.len() as f64;
    let (me, mo) = sums.iter().fold((0.0, 0.0), |a, s| (a.0 + s.0 / k, a.1 + s.1 / k));
    let ve = sums.iter().map(|s| (s.0 - me).powi(2)).sum::<f64>() / (k - 1.0);
    let vo = sums.iter().map(|s| (s.1 - mo).powi(2)).sum::<f64>() / (k - 1.0);
    Some((ve.sqrt(), vo.sqrt()))
}

/// Mean relative reconstruction error at one number of trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n_tot: u64,
    /// `None` when every repeat was excluded.
    pub mean_relative_error: Option<f64>,
    /// Standard error of the mean over the repeats used.
    pub standard_error: Option<f64>,
    pub used: usize,
    /// Repeats whose fit did not converge.
    pub excluded: usize,
}

/// Default number of repeats per point.
pub const DEFAULT_REPEATS: usize = 60;

/// Monte-Carlo error curve of the two-step reconstruction with the true
/// structure as template.
pub fn uncertainty_curve(model: &SourceModel, n_tot_list: &[u64], repeats: usize, seed: u64) -> Result<Vec<CurvePoint>> {
    uncertainty_curve_with(model, n_tot_list, repeats, seed, &KnownStructureOptions::default())
}

/// As [`uncertainty_curve`] with explicit fit settings. Repeat `r` at point
/// `t` samples from its own substream `t * repeats + r`.
pub fn uncertainty_curve_with(
    model: &SourceModel,
    n_tot_list: &[u64],
    repeats: usize,
    seed: u64,
    options: &KnownStructureOptions,
) -> Result<Vec<CurvePoint>> {
    if repeats < 2 {
        return contract(format!("repeats must be at least 2, got {repeats}"));
    }
    if n_tot_list.iter().any(|&n| n == 0) {
        return contract("every n_tot must be at least 1");
    }
    let jpd = full_jpd(model)?;
    let mut points = Vec::with_capacity(n_tot_list.len());
    for (t, &n_tot) in n_tot_list.iter().enumerate() {
        let errors: Vec<Option<f64>> = (0..repeats)
            .into_par_iter()
            .map(|r| {
                let stream = (t * repeats + r) as u64;
                let counts = sample_counts_with(&jpd, n_tot, &mut substream(seed, stream))?;
                let mut opts = options.clone();
                opts.minimize.seed = restart_seed(seed, stream as usize);
                let fit = reconstruct_known_structure(&Observed::Counts(counts), model, &opts)?;
                Ok(if fit.fit.converged { relative_error(&fit.model, model) } else { None })
            })
            .collect::<Result<_>>()?;
        let used: Vec<f64> = errors.iter().flatten().copied().collect();
        let k = used.len();
        let mean = (k > 0).then(|| used.iter().sum::<f64>() / k as f64);
        let standard_error = mean.filter(|_| k > 1).map(|m| {
            let var = used.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (k - 1) as f64;
            (var / k as f64).sqrt()
        });
        points.push(CurvePoint { n_tot, mean_relative_error: mean, standard_error, used: k, excluded: repeats - k });
    }
    Ok(points)
}
