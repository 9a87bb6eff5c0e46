//! Reduced (single-arm) distributions obtained by summing a joint
//! distribution over the other arm.

use serde::{Deserialize, Serialize};

use crate::forward_model::ProbMatrix;
use crate::sampling::{shot_noise_sigma, CountMatrix};
use crate::statistics::Pmf;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Signal,
    Idler,
}

impl Arm {
    pub fn label(self) -> &'static str {
        match self {
            Arm::Signal => "signal",
            Arm::Idler => "idler",
        }
    }
}

/// Reduced photon-number distribution of one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rpd {
    pub arm: Arm,
    pub probs: Vec<f64>,
    pub tail_mass: f64,
    /// Shot-noise uncertainties; `None` for exact (model-derived) input.
    pub uncertainties: Option<Vec<f64>>,
    /// Trials behind the estimate, when it came from counts.
    pub n_tot: Option<u64>,
    /// Summed counts per photon number, when it came from counts.
    pub counts: Option<Vec<u64>>,
}

impl Rpd {
    /// Wraps an exact single-arm distribution.
    pub fn exact(arm: Arm, pmf: &Pmf) -> Self {
        Self {
            arm,
            probs: pmf.probs().to_vec(),
            tail_mass: pmf.tail_mass(),
            uncertainties: None,
            n_tot: None,
            counts: None,
        }
    }

    pub fn n_max(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.probs.iter().enumerate().map(|(n, p)| n as f64 * p).sum()
    }
}

/// Row sums (signal) or column sums (idler) of a probability matrix.
pub fn marginalize(m: &ProbMatrix, arm: Arm) -> Rpd {
    let probs = match arm {
        Arm::Signal => m.signal_marginal(),
        Arm::Idler => m.idler_marginal(),
    };
    Rpd { arm, probs, tail_mass: m.tail_mass(), uncertainties: None, n_tot: None, counts: None }
}

/// Marginal of a count matrix. Counts are summed first and the uncertainty
/// of each summed bin is the shot noise of that bin.
pub fn marginalize_counts(c: &CountMatrix, arm: Arm) -> Rpd {
    let dim = c.dim();
    let mut sums = vec![0u64; dim];
    for ns in 0..dim {
        for ni in 0..dim {
            let idx = match arm {
                Arm::Signal => ns,
                Arm::Idler => ni,
            };
            sums[idx] += c.get(ns, ni);
        }
    }
    let n = c.n_tot().max(1);
    let probs: Vec<f64> = sums.iter().map(|&x| x as f64 / n as f64).collect();
    let uncertainties = probs.iter().map(|&p| shot_noise_sigma(p, n)).collect();
    Rpd {
        arm,
        probs,
        tail_mass: c.overflow_fraction(),
        uncertainties: Some(uncertainties),
        n_tot: Some(c.n_tot()),
        counts: Some(sums),
    }
}
