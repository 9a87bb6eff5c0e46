//! Joint photon-number distribution of a two-arm source built from
//! conjugated (pair-generated) modes and single-arm background modes.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{contract, domain, Result};
use crate::statistics::{convolve, loss_row, pmf, ModeType, Pmf};

/// Bound on the generated-photon tail whose detected photons could still land
/// inside the truncated window.
const GENERATION_EPS: f64 = 1e-16;

/// Hard ceiling on the generation sum, in units of `n_max + 1`.
const GENERATION_CAP_FACTOR: usize = 25;

/// Which arm(s) a mode populates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Occupancy {
    Conjugated,
    Signal,
    Idler,
}

impl Occupancy {
    fn rank(self) -> u8 {
        match self {
            Occupancy::Conjugated => 0,
            Occupancy::Signal => 1,
            Occupancy::Idler => 2,
        }
    }
}

fn default_eta() -> f64 {
    1.0
}

/// One optical mode. For single-arm modes `mu` is the effective (already
/// loss-adjusted) mean and the transmittances are ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    #[serde(rename = "type")]
    pub mode_type: ModeType,
    pub mu: f64,
    pub occupancy: Occupancy,
    #[serde(default = "default_eta")]
    pub eta_s: f64,
    #[serde(default = "default_eta")]
    pub eta_i: f64,
}

impl ModeSpec {
    pub fn conjugated(mode_type: ModeType, mu: f64, eta_s: f64, eta_i: f64) -> Self {
        Self { mode_type, mu, occupancy: Occupancy::Conjugated, eta_s, eta_i }
    }

    pub fn signal(mode_type: ModeType, mu: f64) -> Self {
        Self { mode_type, mu, occupancy: Occupancy::Signal, eta_s: 1.0, eta_i: 1.0 }
    }

    pub fn idler(mode_type: ModeType, mu: f64) -> Self {
        Self { mode_type, mu, occupancy: Occupancy::Idler, eta_s: 1.0, eta_i: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.mode_type.check_mu(self.mu)?;
        for (name, eta) in [("eta_s", self.eta_s), ("eta_i", self.eta_i)] {
            if !(0.0..=1.0).contains(&eta) {
                return domain(format!("{name} must lie in [0, 1], got {eta}"));
            }
        }
        Ok(())
    }

    /// Mean photon number this mode contributes to the signal arm.
    pub fn signal_mean(&self) -> f64 {
        match self.occupancy {
            Occupancy::Conjugated => self.mu * self.eta_s,
            Occupancy::Signal => self.mu,
            Occupancy::Idler => 0.0,
        }
    }

    pub fn idler_mean(&self) -> f64 {
        match self.occupancy {
            Occupancy::Conjugated => self.mu * self.eta_i,
            Occupancy::Signal => 0.0,
            Occupancy::Idler => self.mu,
        }
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.occupancy
            .rank()
            .cmp(&other.occupancy.rank())
            .then(self.mode_type.cmp(&other.mode_type))
            .then(other.mu.total_cmp(&self.mu))
            .then(other.eta_s.total_cmp(&self.eta_s))
            .then(other.eta_i.total_cmp(&self.eta_i))
    }
}

/// A complete source: its modes and the photon-number truncation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceModel {
    pub n_max: usize,
    pub modes: Vec<ModeSpec>,
}

impl SourceModel {
    pub fn new(modes: Vec<ModeSpec>, n_max: usize) -> Result<Self> {
        let mut model = Self { n_max, modes };
        model.validate()?;
        model.canonicalize();
        Ok(model)
    }

    pub fn vacuum(n_max: usize) -> Self {
        Self { n_max, modes: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        for (j, m) in self.modes.iter().enumerate() {
            m.validate().map_err(|e| crate::error::Error::Domain(format!("mode {j}: {e}")))?;
        }
        Ok(())
    }

    /// Sorts modes into canonical order: conjugated, signal, idler; within a
    /// class thermal, Poissonian, single-photon; then descending mean.
    pub fn canonicalize(&mut self) {
        self.modes.sort_by(|a, b| a.canonical_cmp(b));
    }

    pub fn with_occupancy(&self, occupancy: Occupancy) -> impl Iterator<Item = &ModeSpec> + '_ {
        self.modes.iter().filter(move |m| m.occupancy == occupancy)
    }

    pub fn signal_mean(&self) -> f64 {
        self.modes.iter().map(ModeSpec::signal_mean).sum()
    }

    pub fn idler_mean(&self) -> f64 {
        self.modes.iter().map(ModeSpec::idler_mean).sum()
    }

    /// Swaps the roles of the two arms.
    pub fn mirrored(&self) -> Self {
        let modes = self
            .modes
            .iter()
            .map(|m| ModeSpec {
                occupancy: match m.occupancy {
                    Occupancy::Signal => Occupancy::Idler,
                    Occupancy::Idler => Occupancy::Signal,
                    Occupancy::Conjugated => Occupancy::Conjugated,
                },
                eta_s: m.eta_i,
                eta_i: m.eta_s,
                ..*m
            })
            .collect();
        let mut out = Self { n_max: self.n_max, modes };
        out.canonicalize();
        out
    }
}

/// Joint distribution `P(n_s, n_i)` on `0..=n_max` in both arms. Rows index
/// the signal photon number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbMatrix {
    n_max: usize,
    p: Vec<f64>,
    tail_mass: f64,
}

impl ProbMatrix {
    /// Builds a matrix from row-major entries; the tail is whatever the
    /// entries leave to reach one.
    pub fn from_entries(n_max: usize, p: Vec<f64>) -> Result<Self> {
        let dim = n_max + 1;
        if p.len() != dim * dim {
            return contract(format!("expected {} entries, got {}", dim * dim, p.len()));
        }
        if let Some(bad) = p.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
            return domain(format!("probability {bad} is not a non-negative number"));
        }
        let total: f64 = p.iter().sum();
        if total > 1.0 + 1e-10 {
            return domain(format!("matrix sums to {total} > 1"));
        }
        Ok(Self::with_tail(n_max, p))
    }

    pub(crate) fn with_tail(n_max: usize, p: Vec<f64>) -> Self {
        let total: f64 = p.iter().sum();
        Self { n_max, p, tail_mass: (1.0 - total).max(0.0) }
    }

    pub fn outer(signal: &Pmf, idler: &Pmf, n_max: usize) -> Self {
        let dim = n_max + 1;
        let mut p = vec![0.0; dim * dim];
        for ns in 0..dim {
            let a = signal.get(ns);
            if a == 0.0 {
                continue;
            }
            for ni in 0..dim {
                p[ns * dim + ni] = a * idler.get(ni);
            }
        }
        Self::with_tail(n_max, p)
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn dim(&self) -> usize {
        self.n_max + 1
    }

    pub fn get(&self, ns: usize, ni: usize) -> f64 {
        self.p[ns * self.dim() + ni]
    }

    pub fn entries(&self) -> &[f64] {
        &self.p
    }

    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }

    pub fn row(&self, ns: usize) -> &[f64] {
        let d = self.dim();
        &self.p[ns * d..(ns + 1) * d]
    }

    pub fn transpose(&self) -> Self {
        let d = self.dim();
        let mut p = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                p[b * d + a] = self.p[a * d + b];
            }
        }
        Self { n_max: self.n_max, p, tail_mass: self.tail_mass }
    }

    /// The distribution conditioned on both photon numbers falling inside
    /// the window, i.e. renormalized over the represented cells.
    pub fn conditional(&self) -> Self {
        let total = self.total();
        let p = if total > 0.0 { self.p.iter().map(|x| x / total).collect() } else { self.p.clone() };
        Self { n_max: self.n_max, p, tail_mass: 0.0 }
    }

    pub fn signal_marginal(&self) -> Vec<f64> {
        (0..self.dim()).map(|ns| self.row(ns).iter().sum()).collect()
    }

    pub fn idler_marginal(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        for ns in 0..d {
            for (ni, v) in self.row(ns).iter().enumerate() {
                out[ni] += v;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.p.iter().zip(&other.p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Full 2D convolution of two `dim x dim` matrices, truncated to `dim x dim`.
pub(crate) fn convolve2d(a: &[f64], b: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            let x = a[i * dim + j];
            if x == 0.0 {
                continue;
            }
            for s in 0..dim - i {
                let brow = &b[s * dim..s * dim + dim - j];
                let orow = &mut out[(i + s) * dim + j..(i + s) * dim + dim];
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
    }
    out
}

/// Convolves every column (signal axis) with `u`.
fn convolve_signal_axis(p: &[f64], u: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim * dim];
    for ns in 0..dim {
        for m in 0..=ns {
            let w = u.get(m).copied().unwrap_or(0.0);
            if w == 0.0 {
                continue;
            }
            let src = &p[(ns - m) * dim..(ns - m + 1) * dim];
            let dst = &mut out[ns * dim..(ns + 1) * dim];
            for (o, x) in dst.iter_mut().zip(src) {
                *o += w * x;
            }
        }
    }
    out
}

/// Convolves every row (idler axis) with `u`.
fn convolve_idler_axis(p: &[f64], u: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim * dim];
    for ns in 0..dim {
        let src = &p[ns * dim..(ns + 1) * dim];
        let dst = &mut out[ns * dim..(ns + 1) * dim];
        for (j, &x) in src.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (m, &w) in u.iter().take(dim - j).enumerate() {
                dst[j + m] += x * w;
            }
        }
    }
    out
}

/// Number of generated photons to sum over for one conjugated mode.
///
/// Stops at the first `k >= n_max` where the generation tail times the
/// probability that such a pair still lands in the window is negligible;
/// the binomial CDF at fixed `n_max` only decreases with `k`, so this bounds
/// everything omitted.
pub(crate) struct GenerationSum<'a> {
    pub mode_type: ModeType,
    pub mu: f64,
    pub n_max: usize,
    pub etas: &'a [f64],
}

impl GenerationSum<'_> {
    /// Calls `visit(k, p(k), rows)` for each generated photon number `k`,
    /// with `rows[a]` the loss row of the a-th transmittance.
    pub fn for_each(&self, mut visit: impl FnMut(usize, f64, &[Vec<f64>])) -> usize {
        let dim = self.n_max + 1;
        let cap = GENERATION_CAP_FACTOR * dim;
        let mut rows: Vec<Vec<f64>> = self.etas.iter().map(|_| vec![0.0; dim]).collect();
        let k_max = match self.mode_type {
            ModeType::SinglePhoton => 1,
            _ => cap,
        };
        let mut k = 0;
        loop {
            let pk = self.mode_type.prob(self.mu, k);
            for (row, &eta) in rows.iter_mut().zip(self.etas) {
                loss_row(k, eta, row);
            }
            if pk > 0.0 {
                visit(k, pk, &rows);
            }
            if k >= k_max {
                break;
            }
            if k >= self.n_max {
                let tail = self.mode_type.tail_above(self.mu, k);
                let inside = rows
                    .iter()
                    .map(|r| r.iter().sum::<f64>())
                    .fold(1.0f64, f64::min);
                if tail * inside < GENERATION_EPS || tail == 0.0 {
                    break;
                }
            }
            k += 1;
        }
        k
    }
}

/// JPD of one conjugated mode after independent loss in each arm.
fn conjugated_mode_jpd(mode: &ModeSpec, n_max: usize) -> Vec<f64> {
    let dim = n_max + 1;
    let mut out = vec![0.0; dim * dim];
    let etas = [mode.eta_s, mode.eta_i];
    let gen = GenerationSum { mode_type: mode.mode_type, mu: mode.mu, n_max, etas: &etas };
    gen.for_each(|k, pk, rows| {
        let (rs, ri) = (&rows[0], &rows[1]);
        let ms = k.min(n_max) + 1;
        let mi = k.min(n_max) + 1;
        for ns in 0..ms {
            let a = pk * rs[ns];
            if a == 0.0 {
                continue;
            }
            let dst = &mut out[ns * dim..ns * dim + mi];
            for (o, r) in dst.iter_mut().zip(&ri[..mi]) {
                *o += a * r;
            }
        }
    });
    out
}

fn delta(dim: usize) -> Vec<f64> {
    let mut p = vec![0.0; dim * dim];
    p[0] = 1.0;
    p
}

/// Distribution of the total photon number of a set of single-arm modes.
pub fn uncorrelated_pmf(modes: &[ModeSpec], n_max: usize) -> Result<Pmf> {
    if let Some(first) = modes.first() {
        if first.occupancy == Occupancy::Conjugated
            || modes.iter().any(|m| m.occupancy != first.occupancy)
        {
            return contract("uncorrelated modes must all occupy the same single arm");
        }
    }
    let mut acc = Pmf::vacuum(n_max);
    for m in modes {
        m.validate()?;
        acc = convolve(&acc, &pmf(m.mode_type, m.mu, n_max)?, n_max);
    }
    Ok(acc)
}

/// Joint distribution contributed by the conjugated modes alone.
pub fn correlated_jpd(modes: &[ModeSpec], n_max: usize) -> Result<ProbMatrix> {
    if modes.iter().any(|m| m.occupancy != Occupancy::Conjugated) {
        return contract("correlated_jpd accepts conjugated modes only");
    }
    let dim = n_max + 1;
    let mut acc: Option<Vec<f64>> = None;
    for m in modes {
        m.validate()?;
        let single = conjugated_mode_jpd(m, n_max);
        acc = Some(match acc {
            None => single,
            Some(prev) => convolve2d(&prev, &single, dim),
        });
    }
    Ok(ProbMatrix::with_tail(n_max, acc.unwrap_or_else(|| delta(dim))))
}

/// Joint distribution of the whole source.
pub fn full_jpd(model: &SourceModel) -> Result<ProbMatrix> {
    model.validate()?;
    let n_max = model.n_max;
    let dim = n_max + 1;
    let conj: Vec<ModeSpec> = model.with_occupancy(Occupancy::Conjugated).copied().collect();
    let sig: Vec<ModeSpec> = model.with_occupancy(Occupancy::Signal).copied().collect();
    let idl: Vec<ModeSpec> = model.with_occupancy(Occupancy::Idler).copied().collect();
    let us = uncorrelated_pmf(&sig, n_max)?;
    let ui = uncorrelated_pmf(&idl, n_max)?;
    if conj.is_empty() {
        return Ok(ProbMatrix::outer(&us, &ui, n_max));
    }
    let pc = correlated_jpd(&conj, n_max)?;
    let mut p = pc.p;
    if !sig.is_empty() {
        p = convolve_signal_axis(&p, us.probs(), dim);
    }
    if !idl.is_empty() {
        p = convolve_idler_axis(&p, ui.probs(), dim);
    }
    Ok(ProbMatrix::with_tail(n_max, p))
}

/// Parameters of the two-thermal-mode source with common arm losses and a
/// Poissonian background in each arm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentParams {
    pub mu1: f64,
    pub mu2: f64,
    pub eta_s: f64,
    pub eta_i: f64,
    pub mu_bs: f64,
    pub mu_bi: f64,
}

impl ExperimentParams {
    pub fn to_model(&self, n_max: usize) -> Result<SourceModel> {
        SourceModel::new(
            vec![
                ModeSpec::conjugated(ModeType::Thermal, self.mu1, self.eta_s, self.eta_i),
                ModeSpec::conjugated(ModeType::Thermal, self.mu2, self.eta_s, self.eta_i),
                ModeSpec::signal(ModeType::Poissonian, self.mu_bs),
                ModeSpec::idler(ModeType::Poissonian, self.mu_bi),
            ],
            n_max,
        )
    }
}

/// Same distribution as [`full_jpd`] for [`ExperimentParams`], computed by a
/// separate route: the two thermal modes are first summed into a total pair
/// number, which then passes through one loss channel per arm.
pub fn experiment_jpd(params: &ExperimentParams, n_max: usize) -> Result<ProbMatrix> {
    let ExperimentParams { mu1, mu2, eta_s, eta_i, mu_bs, mu_bi } = *params;
    for mu in [mu1, mu2, mu_bs, mu_bi] {
        ModeType::Thermal.check_mu(mu)?;
    }
    for eta in [eta_s, eta_i] {
        if !(0.0..=1.0).contains(&eta) {
            return domain(format!("transmittance must lie in [0, 1], got {eta}"));
        }
    }
    let dim = n_max + 1;
    let cap = GENERATION_CAP_FACTOR * dim;

    // total pair-number distribution of the two thermal modes
    let th = |mu: f64, k: usize| ModeType::Thermal.prob(mu, k);
    let tail = |mu: f64, k: usize| ModeType::Thermal.tail_above(mu, k);
    let mut p1 = Vec::with_capacity(cap + 1);
    let mut p2 = Vec::with_capacity(cap + 1);
    let mut t2 = Vec::with_capacity(cap + 1);
    let mut rs = vec![0.0; dim];
    let mut ri = vec![0.0; dim];
    let mut pc = vec![0.0; dim * dim];
    for k in 0..=cap {
        p1.push(th(mu1, k));
        p2.push(th(mu2, k));
        t2.push(tail(mu2, k));
        let q: f64 = (0..=k).map(|a| p1[a] * p2[k - a]).sum();
        loss_row(k, eta_s, &mut rs);
        loss_row(k, eta_i, &mut ri);
        if q > 0.0 {
            for ns in 0..=k.min(n_max) {
                let a = q * rs[ns];
                if a == 0.0 {
                    continue;
                }
                for ni in 0..=k.min(n_max) {
                    pc[ns * dim + ni] += a * ri[ni];
                }
            }
        }
        if k >= n_max {
            // P(K1 + K2 > k) = P(K1 > k) + sum_a P(K1 = a) P(K2 > k - a)
            let pair_tail = tail(mu1, k) + (0..=k).map(|a| p1[a] * t2[k - a]).sum::<f64>();
            let inside = rs.iter().sum::<f64>().min(ri.iter().sum::<f64>());
            if pair_tail * inside < GENERATION_EPS || pair_tail == 0.0 {
                break;
            }
        }
    }

    // backgrounds along each axis, written out as explicit sums
    let bs: Vec<f64> = (0..dim).map(|m| ModeType::Poissonian.prob(mu_bs, m)).collect();
    let bi: Vec<f64> = (0..dim).map(|m| ModeType::Poissonian.prob(mu_bi, m)).collect();
    let mut p = vec![0.0; dim * dim];
    for ns in 0..dim {
        for ni in 0..dim {
            let mut acc = 0.0;
            for ms in 0..=ns {
                let ws = bs[ms];
                if ws == 0.0 {
                    continue;
                }
                for mi in 0..=ni {
                    acc += pc[(ns - ms) * dim + (ni - mi)] * ws * bi[mi];
                }
            }
            p[ns * dim + ni] = acc;
        }
    }
    Ok(ProbMatrix::with_tail(n_max, p))
}

/// The source before loss, with the transmittances used for back-projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LosslessProjection {
    pub jpd: ProbMatrix,
    pub model: SourceModel,
    /// Transmittance used to rescale signal-only backgrounds (`None` when the
    /// model has no conjugated mode to estimate it from).
    pub eta_s: Option<f64>,
    pub eta_i: Option<f64>,
}

/// Mean-weighted transmittance of the conjugated modes in one arm.
fn arm_transmittance(model: &SourceModel, signal: bool) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for m in model.with_occupancy(Occupancy::Conjugated) {
        let eta = if signal { m.eta_s } else { m.eta_i };
        num += m.mu * eta;
        den += m.mu;
    }
    if den > 0.0 {
        Some(num / den)
    } else {
        let mut it = model.with_occupancy(Occupancy::Conjugated);
        it.next().map(|m| if signal { m.eta_s } else { m.eta_i })
    }
}

/// The generated state before any loss: conjugated transmittances set to one
/// and background means divided by the arm transmittance inferred from the
/// conjugated modes.
pub fn lossless_jpd(model: &SourceModel) -> Result<LosslessProjection> {
    model.validate()?;
    let eta_s = arm_transmittance(model, true);
    let eta_i = arm_transmittance(model, false);
    let mut modes = Vec::with_capacity(model.modes.len());
    for m in &model.modes {
        let mut m = *m;
        match m.occupancy {
            Occupancy::Conjugated => {
                m.eta_s = 1.0;
                m.eta_i = 1.0;
            }
            Occupancy::Signal => {
                if let Some(eta) = eta_s.filter(|e| *e > 0.0) {
                    m.mu /= eta;
                }
            }
            Occupancy::Idler => {
                if let Some(eta) = eta_i.filter(|e| *e > 0.0) {
                    m.mu /= eta;
                }
            }
        }
        m.validate()?;
        modes.push(m);
    }
    let lossless = SourceModel { n_max: model.n_max, modes };
    let jpd = full_jpd(&lossless)?;
    Ok(LosslessProjection { jpd, model: lossless, eta_s, eta_i })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bright_pair() -> ExperimentParams {
        ExperimentParams { mu1: 18.98, mu2: 0.93, eta_s: 0.44, eta_i: 0.53, mu_bs: 0.07, mu_bi: 0.21 }
    }

    #[test]
    fn empty_background_is_vacuum() {
        let p = uncorrelated_pmf(&[], 5).unwrap();
        assert_eq!(p, Pmf::vacuum(5));
    }

    #[test]
    fn single_background_mode() {
        let p = uncorrelated_pmf(&[ModeSpec::signal(ModeType::Poissonian, 0.07)], 10).unwrap();
        let q = pmf(ModeType::Poissonian, 0.07, 10).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn mixed_occupancy_rejected() {
        let modes = [ModeSpec::signal(ModeType::Thermal, 1.0), ModeSpec::idler(ModeType::Thermal, 1.0)];
        assert!(uncorrelated_pmf(&modes, 5).is_err());
        assert!(correlated_jpd(&[ModeSpec::signal(ModeType::Thermal, 1.0)], 5).is_err());
    }

    #[test]
    fn lossless_thermal_is_diagonal() {
        let m = ModeSpec::conjugated(ModeType::Thermal, 1.0, 1.0, 1.0);
        let p = correlated_jpd(&[m], 20).unwrap();
        for a in 0..=20 {
            for b in 0..=20 {
                let expected = if a == b { 0.5f64.powi(a as i32 + 1) } else { 0.0 };
                assert_abs_diff_eq!(p.get(a, b), expected, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn blocked_idler() {
        let m = ModeSpec::conjugated(ModeType::Thermal, 5.0, 1.0, 0.0);
        let p = correlated_jpd(&[m], 40).unwrap();
        let th = pmf(ModeType::Thermal, 5.0, 40).unwrap();
        for ns in 0..=40 {
            assert_abs_diff_eq!(p.get(ns, 0), th.get(ns), epsilon = 1e-14);
            for ni in 1..=40 {
                assert_eq!(p.get(ns, ni), 0.0);
            }
        }
    }

    #[test]
    fn independent_arms_without_conjugated_modes() {
        let model = SourceModel::new(vec![ModeSpec::signal(ModeType::Poissonian, 1.0)], 12).unwrap();
        let p = full_jpd(&model).unwrap();
        let q = pmf(ModeType::Poissonian, 1.0, 12).unwrap();
        for ns in 0..=12 {
            assert_abs_diff_eq!(p.get(ns, 0), q.get(ns), epsilon = 1e-16);
            for ni in 1..=12 {
                assert_eq!(p.get(ns, ni), 0.0);
            }
        }
    }

    #[test]
    fn all_zero_means_give_vacuum() {
        let model = SourceModel::new(
            vec![
                ModeSpec::conjugated(ModeType::Thermal, 0.0, 0.3, 0.8),
                ModeSpec::signal(ModeType::Poissonian, 0.0),
                ModeSpec::idler(ModeType::SinglePhoton, 0.0),
            ],
            6,
        )
        .unwrap();
        let p = full_jpd(&model).unwrap();
        assert_eq!(p.get(0, 0), 1.0);
        assert_abs_diff_eq!(p.total(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn bright_pair_marginal_means() {
        let model = bright_pair().to_model(40).unwrap();
        let p = full_jpd(&model).unwrap();
        // compare with unrestricted means, allowing for what sits in the tail
        let ms: f64 = p.signal_marginal().iter().enumerate().map(|(n, x)| n as f64 * x).sum();
        let mi: f64 = p.idler_marginal().iter().enumerate().map(|(n, x)| n as f64 * x).sum();
        let es = (18.98 + 0.93) * 0.44 + 0.07;
        let ei = (18.98 + 0.93) * 0.53 + 0.21;
        assert!(ms < es && ms > es - 60.0 * p.tail_mass());
        assert!(mi < ei && mi > ei - 60.0 * p.tail_mass());
        assert_abs_diff_eq!(p.total() + p.tail_mass(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn experiment_route_agrees_with_general_route() {
        let params = bright_pair();
        let a = experiment_jpd(&params, 40).unwrap();
        let b = full_jpd(&params.to_model(40).unwrap()).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12, "diff {}", a.max_abs_diff(&b));
    }

    #[test]
    fn experiment_route_special_cases() {
        let p = experiment_jpd(
            &ExperimentParams { mu1: 1.0, mu2: 0.0, eta_s: 1.0, eta_i: 1.0, mu_bs: 0.0, mu_bi: 0.0 },
            15,
        )
        .unwrap();
        for a in 0..=15 {
            assert_abs_diff_eq!(p.get(a, a), 0.5f64.powi(a as i32 + 1), epsilon = 1e-15);
        }
        let p = experiment_jpd(
            &ExperimentParams { mu1: 0.0, mu2: 0.0, eta_s: 0.3, eta_i: 0.9, mu_bs: 0.07, mu_bi: 0.21 },
            10,
        )
        .unwrap();
        let q = ProbMatrix::outer(
            &pmf(ModeType::Poissonian, 0.07, 10).unwrap(),
            &pmf(ModeType::Poissonian, 0.21, 10).unwrap(),
            10,
        );
        assert!(p.max_abs_diff(&q) < 1e-15);
    }

    #[test]
    fn lossless_projection() {
        let model = SourceModel::new(vec![ModeSpec::conjugated(ModeType::Thermal, 1.0, 0.5, 0.5)], 20).unwrap();
        let proj = lossless_jpd(&model).unwrap();
        for a in 0..=20 {
            assert_abs_diff_eq!(proj.jpd.get(a, a), 0.5f64.powi(a as i32 + 1), epsilon = 1e-15);
        }
        let already = SourceModel::new(vec![ModeSpec::conjugated(ModeType::Thermal, 1.0, 1.0, 1.0)], 20).unwrap();
        assert_eq!(lossless_jpd(&already).unwrap().jpd, full_jpd(&already).unwrap());
    }

    #[test]
    fn canonical_order() {
        let model = SourceModel::new(
            vec![
                ModeSpec::idler(ModeType::Poissonian, 0.2),
                ModeSpec::signal(ModeType::Poissonian, 0.1),
                ModeSpec::conjugated(ModeType::Poissonian, 3.0, 0.5, 0.5),
                ModeSpec::conjugated(ModeType::Thermal, 1.0, 0.5, 0.5),
                ModeSpec::conjugated(ModeType::Thermal, 2.0, 0.5, 0.5),
            ],
            5,
        )
        .unwrap();
        let order: Vec<(Occupancy, ModeType, f64)> =
            model.modes.iter().map(|m| (m.occupancy, m.mode_type, m.mu)).collect();
        assert_eq!(
            order,
            vec![
                (Occupancy::Conjugated, ModeType::Thermal, 2.0),
                (Occupancy::Conjugated, ModeType::Thermal, 1.0),
                (Occupancy::Conjugated, ModeType::Poissonian, 3.0),
                (Occupancy::Signal, ModeType::Poissonian, 0.1),
                (Occupancy::Idler, ModeType::Poissonian, 0.2),
            ]
        );
    }
}
