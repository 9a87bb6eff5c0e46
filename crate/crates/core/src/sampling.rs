//! Finite-trial measurement of a joint distribution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::forward_model::ProbMatrix;

/// Event counts `N(n_s, n_i)` on a square window plus the number of trials.
/// Trials whose photon numbers fell outside the window are counted in
/// `n_tot` but not in any cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountMatrix {
    n_max: usize,
    counts: Vec<u64>,
    n_tot: u64,
}

impl CountMatrix {
    pub fn new(n_max: usize, counts: Vec<u64>, n_tot: u64) -> Result<Self> {
        let dim = n_max + 1;
        if counts.len() != dim * dim {
            return contract(format!("expected {} cells, got {}", dim * dim, counts.len()));
        }
        let in_range: u64 = counts.iter().sum();
        if in_range > n_tot {
            return contract(format!("cells hold {in_range} events but n_tot is {n_tot}"));
        }
        Ok(Self { n_max, counts, n_tot })
    }

    /// Counts with `n_tot` equal to their sum.
    pub fn from_counts(n_max: usize, counts: Vec<u64>) -> Result<Self> {
        let n_tot = counts.iter().sum();
        Self::new(n_max, counts, n_tot)
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn dim(&self) -> usize {
        self.n_max + 1
    }

    pub fn n_tot(&self) -> u64 {
        self.n_tot
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, ns: usize, ni: usize) -> u64 {
        self.counts[ns * self.dim() + ni]
    }

    pub fn in_range(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn overflow(&self) -> u64 {
        self.n_tot - self.in_range()
    }

    pub fn overflow_fraction(&self) -> f64 {
        if self.n_tot == 0 {
            0.0
        } else {
            self.overflow() as f64 / self.n_tot as f64
        }
    }

    /// Same counts with the overflow dropped, i.e. what a file without an
    /// `n_tot` header would carry.
    pub fn without_overflow(&self) -> Self {
        Self { n_max: self.n_max, counts: self.counts.clone(), n_tot: self.in_range() }
    }
}

/// Shot-noise uncertainty of a frequency estimate `p` from `n_tot` trials,
/// floored at one event for empty cells.
pub fn shot_noise_sigma(p: f64, n_tot: u64) -> f64 {
    let n = n_tot as f64;
    (p / n).sqrt().max(1.0 / n)
}

/// RNG for one parallel worker: the ChaCha stream index separates workers
/// sharing a seed.
pub fn substream(seed: u64, worker: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(worker);
    rng
}

/// Multinomial draw of `n_tot` trials over the cells of `jpd` plus an
/// overflow cell holding its tail mass.
pub fn sample_counts(jpd: &ProbMatrix, n_tot: u64, seed: u64) -> Result<CountMatrix> {
    let mut rng = substream(seed, 0);
    sample_counts_with(jpd, n_tot, &mut rng)
}

pub fn sample_counts_with(jpd: &ProbMatrix, n_tot: u64, rng: &mut ChaCha8Rng) -> Result<CountMatrix> {
    if n_tot == 0 {
        return contract("n_tot must be at least 1");
    }
    let probs = jpd.entries();
    let mut counts = vec![0u64; probs.len()];
    let mut remaining = n_tot;
    // conditional probability mass still unassigned, overflow cell last
    let mut mass_left = probs.iter().sum::<f64>() + jpd.tail_mass();
    for (cell, &p) in counts.iter_mut().zip(probs) {
        if remaining == 0 || mass_left <= 0.0 {
            break;
        }
        if p <= 0.0 {
            continue;
        }
        let q = (p / mass_left).min(1.0);
        let draw = Binomial::new(remaining, q)
            .map_err(|e| crate::error::Error::Domain(format!("binomial draw: {e}")))?
            .sample(rng);
        *cell = draw;
        remaining -= draw;
        mass_left -= p;
    }
    CountMatrix::new(jpd.n_max(), counts, n_tot)
}

/// Frequency estimate `counts / n_tot` with its per-cell shot-noise
/// uncertainty (row-major, same layout as the matrix).
pub fn to_probabilities(counts: &CountMatrix) -> Result<(ProbMatrix, Vec<f64>)> {
    if counts.n_tot == 0 {
        return contract("n_tot must be at least 1");
    }
    let n = counts.n_tot as f64;
    let p: Vec<f64> = counts.counts.iter().map(|&c| c as f64 / n).collect();
    let sigma = p.iter().map(|&x| shot_noise_sigma(x, counts.n_tot)).collect();
    Ok((ProbMatrix::from_entries(counts.n_max, p)?, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn uniform4() -> ProbMatrix {
        ProbMatrix::from_entries(1, vec![0.25; 4]).unwrap()
    }

    #[test]
    fn zero_trials_rejected() {
        assert!(sample_counts(&uniform4(), 0, 1).is_err());
    }

    #[test]
    fn degenerate_distribution() {
        let mut p = vec![0.0; 9];
        p[0] = 1.0;
        let jpd = ProbMatrix::from_entries(2, p).unwrap();
        for seed in 0..5 {
            let c = sample_counts(&jpd, 100, seed).unwrap();
            assert_eq!(c.get(0, 0), 100);
            assert_eq!(c.in_range(), 100);
        }
    }

    #[test]
    fn uniform_cells_within_five_sigma() {
        let c = sample_counts(&uniform4(), 1_000_000, 7).unwrap();
        let sigma = (1e6f64 * 0.25 * 0.75).sqrt();
        for &x in c.counts() {
            assert!((x as f64 - 250_000.0).abs() < 5.0 * sigma, "{x}");
        }
        assert_eq!(c.in_range(), 1_000_000);
    }

    #[test]
    fn reproducible_for_fixed_seed() {
        let a = sample_counts(&uniform4(), 12345, 99).unwrap();
        let b = sample_counts(&uniform4(), 12345, 99).unwrap();
        let c = sample_counts(&uniform4(), 12345, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn probability_estimates() {
        let mut counts = vec![0u64; 4];
        counts[0] = 100;
        let c = CountMatrix::from_counts(1, counts).unwrap();
        let (p, s) = to_probabilities(&c).unwrap();
        assert_eq!(p.get(0, 0), 1.0);
        assert_abs_diff_eq!(s[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(s[1], 0.01, epsilon = 1e-15);

        assert_eq!(shot_noise_sigma(0.0, 10_000), 1e-4);
        assert_abs_diff_eq!(shot_noise_sigma(0.25, 1_000_000), 5e-4, epsilon = 1e-16);
    }

    #[test]
    fn overflow_is_recorded() {
        let p = ProbMatrix::from_entries(1, vec![0.2, 0.2, 0.2, 0.2]).unwrap();
        let c = sample_counts(&p, 100_000, 3).unwrap();
        assert!(c.overflow() > 0);
        let (est, _) = to_probabilities(&c).unwrap();
        assert_abs_diff_eq!(est.total() + c.overflow_fraction(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn counts_exceeding_total_rejected() {
        assert!(CountMatrix::new(0, vec![5], 4).is_err());
        assert!(CountMatrix::new(1, vec![5], 5).is_err());
    }
}
