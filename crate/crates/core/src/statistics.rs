//! Photon-number distributions of single modes and the binomial loss channel.
//!
//! Every distribution is truncated at some `n_max` and carries the probability
//! of the unrepresented region explicitly as `tail_mass`, so truncation error
//! stays visible instead of being folded into a renormalization.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{domain, Result};

/// Default truncation, matching a detector resolving up to 40 photons.
pub const DEFAULT_N_MAX: usize = 40;

/// Above this photon number, factorials and powers are evaluated in log-space.
const LOG_SPACE_THRESHOLD: usize = 30;

const LN_FACT_TABLE: usize = 8192;

/// Photon statistics of one optical mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeType {
    /// Bose-Einstein statistics.
    Thermal,
    Poissonian,
    /// At most one photon; `mu` is the occupation probability.
    SinglePhoton,
}

impl ModeType {
    pub const ALL: [ModeType; 3] = [ModeType::Thermal, ModeType::Poissonian, ModeType::SinglePhoton];

    pub fn label(self) -> &'static str {
        match self {
            ModeType::Thermal => "thermal",
            ModeType::Poissonian => "poissonian",
            ModeType::SinglePhoton => "single_photon",
        }
    }

    pub fn check_mu(self, mu: f64) -> Result<()> {
        if !mu.is_finite() || mu < 0.0 {
            return domain(format!("mean photon number must be finite and >= 0, got {mu}"));
        }
        if self == ModeType::SinglePhoton && mu > 1.0 {
            return domain(format!("single-photon mode requires mu <= 1, got {mu}"));
        }
        Ok(())
    }

    /// Probability of strictly more than `k` photons.
    pub fn tail_above(self, mu: f64, k: usize) -> f64 {
        if mu == 0.0 {
            return 0.0;
        }
        match self {
            ModeType::Thermal => ((k as f64 + 1.0) * (mu / (1.0 + mu)).ln()).exp(),
            ModeType::Poissonian => gamma_lr(k as f64 + 1.0, mu),
            ModeType::SinglePhoton => {
                if k == 0 {
                    mu
                } else {
                    0.0
                }
            }
        }
    }

    /// Probability of exactly `k` photons.
    pub fn prob(self, mu: f64, k: usize) -> f64 {
        match self {
            ModeType::Thermal => {
                if mu == 0.0 {
                    return if k == 0 { 1.0 } else { 0.0 };
                }
                if k > LOG_SPACE_THRESHOLD {
                    (k as f64 * (mu / (1.0 + mu)).ln() - mu.ln_1p()).exp()
                } else {
                    (mu / (1.0 + mu)).powi(k as i32) / (1.0 + mu)
                }
            }
            ModeType::Poissonian => {
                if mu == 0.0 {
                    return if k == 0 { 1.0 } else { 0.0 };
                }
                if k > LOG_SPACE_THRESHOLD {
                    (-mu + k as f64 * mu.ln() - ln_factorial(k)).exp()
                } else {
                    let mut p = (-mu).exp();
                    for j in 1..=k {
                        p *= mu / j as f64;
                    }
                    p
                }
            }
            ModeType::SinglePhoton => match k {
                0 => 1.0 - mu,
                1 => mu,
                _ => 0.0,
            },
        }
    }
}

impl fmt::Display for ModeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A truncated photon-number distribution: `probs[n]` for `n = 0..=n_max`
/// plus the mass above `n_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pmf {
    probs: Vec<f64>,
    tail_mass: f64,
}

impl Pmf {
    /// Builds a distribution from raw parts. Entries must lie in `[0, 1]` and
    /// `sum + tail_mass` must be one to within `1e-9`.
    pub fn new(probs: Vec<f64>, tail_mass: f64) -> Result<Self> {
        if probs.is_empty() {
            return domain("a distribution needs at least the vacuum entry");
        }
        if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return domain(format!("probability {bad} outside [0, 1]"));
        }
        if !(tail_mass >= 0.0) {
            return domain(format!("tail mass {tail_mass} must be >= 0"));
        }
        let total: f64 = probs.iter().sum::<f64>() + tail_mass;
        if (total - 1.0).abs() > 1e-9 {
            return domain(format!("distribution sums to {total}, expected 1"));
        }
        Ok(Self { probs, tail_mass })
    }

    /// All mass at zero photons.
    pub fn vacuum(n_max: usize) -> Self {
        let mut probs = vec![0.0; n_max + 1];
        probs[0] = 1.0;
        Self { probs, tail_mass: 0.0 }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    pub fn n_max(&self) -> usize {
        self.probs.len() - 1
    }

    /// Probability held in the represented range.
    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Mean over the represented range (tail contributes nothing).
    pub fn mean(&self) -> f64 {
        self.probs.iter().enumerate().map(|(n, p)| n as f64 * p).sum()
    }

    pub fn get(&self, n: usize) -> f64 {
        self.probs.get(n).copied().unwrap_or(0.0)
    }
}

/// Distribution of a single mode of the given statistics and mean photon
/// number, truncated at `n_max`.
pub fn pmf(mode_type: ModeType, mu: f64, n_max: usize) -> Result<Pmf> {
    mode_type.check_mu(mu)?;
    let probs: Vec<f64> = (0..=n_max).map(|k| mode_type.prob(mu, k)).collect();
    let tail_mass = mode_type.tail_above(mu, n_max);
    Ok(Pmf { probs, tail_mass })
}

fn ln_fact_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = Vec::with_capacity(LN_FACT_TABLE);
        t.push(0.0);
        for i in 1..LN_FACT_TABLE {
            t.push(ln_gamma(i as f64 + 1.0));
        }
        t
    })
}

pub(crate) fn ln_factorial(k: usize) -> f64 {
    if k < LN_FACT_TABLE {
        ln_fact_table()[k]
    } else {
        ln_gamma(k as f64 + 1.0)
    }
}

fn binomial_coefficient(k: usize, n: usize) -> f64 {
    // exact in f64 for k <= 30
    let n = n.min(k - n);
    let mut c = 1.0f64;
    for j in 0..n {
        c = c * (k - j) as f64 / (j + 1) as f64;
    }
    c.round()
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return domain(format!("transmittance must lie in [0, 1], got {eta}"));
    }
    Ok(())
}

/// Probability that exactly `n` of `k` photons survive a channel of
/// transmittance `eta`.
pub fn loss_factor(n: usize, k: usize, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    if n > k {
        return domain(format!("cannot detect {n} photons out of {k}"));
    }
    Ok(loss_factor_unchecked(n, k, eta))
}

#[inline]
pub(crate) fn loss_factor_unchecked(n: usize, k: usize, eta: f64) -> f64 {
    if eta == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    if eta == 1.0 {
        return if n == k { 1.0 } else { 0.0 };
    }
    if k <= LOG_SPACE_THRESHOLD {
        binomial_coefficient(k, n) * eta.powi(n as i32) * (1.0 - eta).powi((k - n) as i32)
    } else {
        let ln = ln_factorial(k) - ln_factorial(n) - ln_factorial(k - n)
            + n as f64 * eta.ln()
            + (k - n) as f64 * (-eta).ln_1p();
        ln.exp()
    }
}

/// Fills `row[n] = L(n, k, eta)` for `n = 0..=min(k, row.len() - 1)` and zero
/// beyond. Returns the number of entries written.
pub(crate) fn loss_row(k: usize, eta: f64, row: &mut [f64]) -> usize {
    let upto = k.min(row.len() - 1);
    for (n, slot) in row.iter_mut().enumerate() {
        *slot = if n <= upto { loss_factor_unchecked(n, k, eta) } else { 0.0 };
    }
    upto + 1
}

/// Passes a distribution through a binomial loss channel and truncates the
/// result at `n_max`. Mass of the input tail stays in the output tail since
/// its shape is unknown.
pub fn apply_loss(input: &Pmf, eta: f64, n_max: usize) -> Result<Pmf> {
    check_eta(eta)?;
    let mut out = vec![0.0; n_max + 1];
    let mut row = vec![0.0; n_max + 1];
    for (k, &pk) in input.probs.iter().enumerate() {
        if pk == 0.0 {
            continue;
        }
        let m = loss_row(k, eta, &mut row);
        for n in 0..m {
            out[n] += pk * row[n];
        }
    }
    let represented: f64 = out.iter().sum();
    let overflow = (input.total() - represented).max(0.0);
    Ok(Pmf { probs: out, tail_mass: input.tail_mass + overflow })
}

/// Distribution of the sum of two independent photon numbers.
pub fn convolve(a: &Pmf, b: &Pmf, n_max: usize) -> Pmf {
    let mut out = vec![0.0; n_max + 1];
    let mut overflow = 0.0;
    for (i, &pa) in a.probs.iter().enumerate() {
        if pa == 0.0 {
            continue;
        }
        for (j, &pb) in b.probs.iter().enumerate() {
            let prod = pa * pb;
            if i + j <= n_max {
                out[i + j] += prod;
            } else {
                overflow += prod;
            }
        }
    }
    // mass involving either input tail lands somewhere beyond what we track
    let tail_mass =
        (a.tail_mass + b.tail_mass - a.tail_mass * b.tail_mass + overflow).max(0.0);
    Pmf { probs: out, tail_mass }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn check_norm(p: &Pmf) {
        assert_abs_diff_eq!(p.total() + p.tail_mass(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn thermal_closed_form() {
        let p = pmf(ModeType::Thermal, 1.0, 2).unwrap();
        assert_eq!(p.probs(), &[0.5, 0.25, 0.125]);
        assert_abs_diff_eq!(p.tail_mass(), 0.125, epsilon = 1e-15);
    }

    #[test]
    fn poissonian_vacuum() {
        let p = pmf(ModeType::Poissonian, 0.0, 3).unwrap();
        assert_eq!(p.probs(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.tail_mass(), 0.0);
    }

    #[test]
    fn single_photon_entries() {
        let p = pmf(ModeType::SinglePhoton, 0.6, 5).unwrap();
        assert_abs_diff_eq!(p.probs()[0], 0.4, epsilon = 1e-15);
        assert_eq!(p.probs()[1], 0.6);
        assert!(p.probs()[2..].iter().all(|&x| x == 0.0));
        assert_eq!(p.tail_mass(), 0.0);
        let p0 = pmf(ModeType::SinglePhoton, 0.6, 0).unwrap();
        assert_abs_diff_eq!(p0.tail_mass(), 0.6, epsilon = 1e-15);
    }

    #[test]
    fn domain_errors() {
        assert!(pmf(ModeType::Thermal, -0.1, 5).is_err());
        assert!(pmf(ModeType::SinglePhoton, 1.2, 5).is_err());
        assert!(loss_factor(3, 2, 0.5).is_err());
        assert!(loss_factor(1, 2, 1.5).is_err());
        assert!(apply_loss(&Pmf::vacuum(3), -0.2, 3).is_err());
    }

    #[test]
    fn loss_factor_small_cases() {
        assert_eq!(loss_factor(0, 0, 0.3).unwrap(), 1.0);
        assert_abs_diff_eq!(loss_factor(1, 2, 0.5).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(loss_factor(0, 5, 0.0).unwrap(), 1.0);
        assert_eq!(loss_factor(5, 5, 1.0).unwrap(), 1.0);
        assert_eq!(loss_factor(4, 5, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn loss_rows_sum_to_one() {
        for &eta in &[0.0, 0.013, 0.44, 0.5, 0.97, 1.0] {
            for k in 0..=200 {
                let s: f64 = (0..=k).map(|n| loss_factor(n, k, eta).unwrap()).sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn tails_match_complement() {
        for t in ModeType::ALL {
            for &mu in &[0.0, 0.3, 1.0, 5.0, 12.0] {
                if t == ModeType::SinglePhoton && mu > 1.0 {
                    continue;
                }
                for n_max in [0, 1, 7, 31, 40, 60] {
                    check_norm(&pmf(t, mu, n_max).unwrap());
                }
            }
        }
    }

    #[test]
    fn lossless_channel_is_identity() {
        let p = pmf(ModeType::Thermal, 3.0, 20).unwrap();
        let q = apply_loss(&p, 1.0, 20).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn thermal_loss_halves_mean() {
        let p = pmf(ModeType::Thermal, 2.0, 400).unwrap();
        let q = apply_loss(&p, 0.5, 40).unwrap();
        let expected = pmf(ModeType::Thermal, 1.0, 40).unwrap();
        for n in 0..=40 {
            assert_abs_diff_eq!(q.get(n), expected.get(n), epsilon = 1e-10);
        }
        check_norm(&q);
    }

    #[test]
    fn poissonian_loss() {
        let p = pmf(ModeType::Poissonian, 4.0, 80).unwrap();
        let q = apply_loss(&p, 0.25, 40).unwrap();
        let expected = pmf(ModeType::Poissonian, 1.0, 40).unwrap();
        for n in 0..=40 {
            assert_abs_diff_eq!(q.get(n), expected.get(n), epsilon = 1e-10);
        }
    }

    #[test]
    fn loss_never_grows_tail() {
        let p = pmf(ModeType::Thermal, 6.0, 40).unwrap();
        let q = apply_loss(&p, 0.7, 40).unwrap();
        assert!(q.tail_mass() <= p.tail_mass());
        check_norm(&q);
    }

    #[test]
    fn convolve_identity_and_additivity() {
        let x = pmf(ModeType::Thermal, 0.8, 30).unwrap();
        let y = convolve(&Pmf::vacuum(30), &x, 30);
        for n in 0..=30 {
            assert_abs_diff_eq!(y.get(n), x.get(n), epsilon = 1e-15);
        }
        let a = pmf(ModeType::Poissonian, 1.0, 40).unwrap();
        let b = pmf(ModeType::Poissonian, 2.0, 40).unwrap();
        let c = convolve(&a, &b, 40);
        let expected = pmf(ModeType::Poissonian, 3.0, 40).unwrap();
        for n in 0..=40 {
            assert_abs_diff_eq!(c.get(n), expected.get(n), epsilon = 1e-12);
        }
        assert_abs_diff_eq!(c.tail_mass(), expected.tail_mass(), epsilon = 1e-12);
    }

    #[test]
    fn triple_thermal_convolution_matches_partition_sum() {
        let n_max = 12;
        let t = pmf(ModeType::Thermal, 0.5, n_max).unwrap();
        let c = convolve(&convolve(&t, &t, n_max), &t, n_max);
        for m in 0..=n_max {
            let mut brute = 0.0;
            for k1 in 0..=m {
                for k2 in 0..=(m - k1) {
                    let k3 = m - k1 - k2;
                    brute += t.get(k1) * t.get(k2) * t.get(k3);
                }
            }
            assert_abs_diff_eq!(c.get(m), brute, epsilon = 1e-15);
        }
        check_norm(&c);
    }

    #[test]
    fn convolution_preserves_mean() {
        let a = pmf(ModeType::Thermal, 0.7, 120).unwrap();
        let b = pmf(ModeType::Poissonian, 2.5, 120).unwrap();
        let c = convolve(&a, &b, 120);
        assert_abs_diff_eq!(c.mean(), a.mean() + b.mean(), epsilon = 1e-10);
    }
}
