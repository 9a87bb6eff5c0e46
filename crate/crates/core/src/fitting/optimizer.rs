//! Nelder-Mead simplex search in unconstrained coordinates, run from several
//! starting points.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FitResult, ParamVector, RestartOutcome};
use crate::error::{contract, Result};
use crate::sampling::substream;

/// Stopping rules for one simplex run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Largest vertex distance from the best vertex, in transformed
    /// coordinates.
    pub diameter: f64,
    /// Best-score improvement over one full cycle of `n + 1` iterations.
    pub score: f64,
    pub max_evaluations: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { diameter: 1e-8, score: 1e-10, max_evaluations: 20_000 }
    }
}

/// Where restarts begin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartRegion {
    /// First restart at the initial point, the rest spread over a box of this
    /// half-width around it.
    AroundInitial { half_width: f64 },
    /// Every restart drawn from the given box, ignoring the initial values.
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizeOptions {
    pub restarts: usize,
    pub seed: u64,
    pub tolerances: Tolerances,
    pub start: StartRegion,
    /// Edge length of the starting simplex.
    pub initial_step: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            restarts: 16,
            seed: 0,
            tolerances: Tolerances::default(),
            start: StartRegion::AroundInitial { half_width: 1.0 },
            initial_step: 0.25,
        }
    }
}

struct Outcome {
    x: Vec<f64>,
    fx: f64,
    evaluations: usize,
    converged: bool,
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// One simplex run with the dimension-adaptive coefficients of Gao and Han.
fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64, tol: &Tolerances) -> Outcome {
    let n = x0.len();
    let counter = std::cell::Cell::new(0usize);
    let eval = |x: &[f64]| {
        counter.set(counter.get() + 1);
        sanitize(f(x))
    };
    if n == 0 {
        let fx = eval(x0);
        return Outcome { x: Vec::new(), fx, evaluations: counter.get(), converged: true };
    }
    let nf = n as f64;
    let (alpha, beta, gamma, delta) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf);

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step;
        let fx = eval(&x);
        simplex.push((x, fx));
    }

    let mut history: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut centroid = vec![0.0; n];
    let point = |c: &[f64], w: &[f64], t: f64| -> Vec<f64> {
        c.iter().zip(w).map(|(ci, wi)| ci + t * (ci - wi)).collect()
    };
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        history.push(best);
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| {
                x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        let cycle_done = history.len() > n + 1;
        let improvement = if cycle_done { history[history.len() - n - 2] - best } else { f64::INFINITY };
        if diameter < tol.diameter && improvement < tol.score {
            converged = true;
            break;
        }
        if counter.get() >= tol.max_evaluations {
            break;
        }

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for (x, _) in &simplex[..n] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / nf;
            }
        }
        let worst = simplex[n].0.clone();
        let (f_best, f_second, f_worst) = (simplex[0].1, simplex[n - 1].1, simplex[n].1);

        let xr = point(&centroid, &worst, alpha);
        let fr = eval(&xr);
        if fr < f_best {
            let xe = point(&centroid, &worst, alpha * beta);
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < f_second {
            simplex[n] = (xr, fr);
            continue;
        }
        if fr < f_worst {
            let xc = point(&centroid, &worst, alpha * gamma);
            let fc = eval(&xc);
            if fc <= fr {
                simplex[n] = (xc, fc);
                continue;
            }
        } else {
            let xc = point(&centroid, &worst, -gamma);
            let fc = eval(&xc);
            if fc < f_worst {
                simplex[n] = (xc, fc);
                continue;
            }
        }
        // shrink toward the best vertex
        let x_best = simplex[0].0.clone();
        for (x, fx) in simplex[1..].iter_mut() {
            for (xi, bi) in x.iter_mut().zip(&x_best) {
                *xi = bi + delta * (*xi - bi);
            }
            *fx = eval(x);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    Outcome { x, fx, evaluations: counter.get(), converged }
}

/// Repeats the simplex search from its own optimum until that no longer
/// improves the score, which guards against premature collapse.
fn polished_search(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64, tol: &Tolerances) -> Outcome {
    let mut out = nelder_mead(f, x0, step, tol);
    for _ in 0..3 {
        if !out.converged || out.evaluations >= tol.max_evaluations {
            break;
        }
        let budget = Tolerances { max_evaluations: tol.max_evaluations - out.evaluations, ..*tol };
        let again = nelder_mead(f, &out.x, (step * 0.1).max(1e-4), &budget);
        let gained = out.fx - again.fx;
        let evaluations = out.evaluations + again.evaluations;
        let better = again.fx <= out.fx;
        out = if better { Outcome { evaluations, ..again } } else { Outcome { evaluations, ..out } };
        if !(gained > tol.score) {
            break;
        }
    }
    out
}

/// Seed of one restart, derived from the master seed.
pub fn restart_seed(seed: u64, restart: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Latin-hypercube points in the unit cube: one stratum per point in every
/// coordinate, strata permuted independently per coordinate.
fn latin_hypercube(points: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = substream(seed, u64::MAX);
    let mut out = vec![vec![0.0; dim]; points];
    for d in 0..dim {
        let mut strata: Vec<usize> = (0..points).collect();
        strata.shuffle(&mut rng);
        for (p, s) in strata.into_iter().enumerate() {
            let u: f64 = rng.random();
            out[p][d] = (s as f64 + u) / points as f64;
        }
    }
    out
}

/// Minimizes `objective` over the parameter space of `initial`.
///
/// Restarts run in parallel and are merged in restart order, so the result
/// is a deterministic function of the options.
pub fn minimize(
    objective: &(dyn Fn(&ParamVector) -> f64 + Sync),
    initial: &ParamVector,
    options: &MinimizeOptions,
) -> Result<FitResult> {
    let theta0 = initial.to_unconstrained();
    let dim = theta0.len();
    let restarts = options.restarts.max(1);
    let f0 = objective(initial);
    if !f0.is_finite() {
        return contract(format!("objective is not finite at the initial point ({f0})"));
    }

    let starts: Vec<Vec<f64>> = match &options.start {
        StartRegion::AroundInitial { half_width } => {
            let mut s = vec![theta0.clone()];
            for u in latin_hypercube(restarts - 1, dim, options.seed) {
                s.push(theta0.iter().zip(u).map(|(t, u)| t + half_width * (2.0 * u - 1.0)).collect());
            }
            s
        }
        StartRegion::Box { lower, upper } => {
            if lower.len() != dim || upper.len() != dim {
                return contract("start box dimension does not match the parameter count");
            }
            latin_hypercube(restarts, dim, options.seed)
                .into_iter()
                .map(|u| (0..dim).map(|d| lower[d] + u[d] * (upper[d] - lower[d])).collect())
                .collect()
        }
    };

    let f = |theta: &[f64]| objective(&initial.with_unconstrained(theta));
    let outcomes: Vec<(u64, Outcome)> = starts
        .par_iter()
        .enumerate()
        .map(|(r, x0)| {
            let seed = restart_seed(options.seed, r);
            // the seed only perturbs the simplex orientation
            let mut rng = substream(seed, 0);
            let step = options.initial_step * (1.0 + 0.1 * rng.random::<f64>());
            (seed, polished_search(&f, x0, step, &options.tolerances))
        })
        .collect();

    let mut best_idx = 0;
    for (i, (_, o)) in outcomes.iter().enumerate() {
        if o.fx < outcomes[best_idx].1.fx {
            best_idx = i;
        }
    }
    let restarts_out: Vec<RestartOutcome> = outcomes
        .iter()
        .map(|(seed, o)| RestartOutcome {
            seed: *seed,
            score: o.fx,
            converged: o.converged,
            evaluations: o.evaluations,
            values: initial.with_unconstrained(&o.x).values(),
        })
        .collect();
    let (best_seed, best) = &outcomes[best_idx];
    Ok(FitResult {
        params: initial.with_unconstrained(&best.x),
        score: best.fx,
        p_value: None,
        converged: best.converged && best.fx.is_finite(),
        restarts_used: outcomes.len(),
        best_restart: best_idx,
        best_restart_seed: *best_seed,
        evaluations: outcomes.iter().map(|(_, o)| o.evaluations).sum(),
        restarts: restarts_out,
        notes: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitting::{Bound, Param, ParamRole};

    fn free(values: &[f64]) -> ParamVector {
        ParamVector::new(
            values
                .iter()
                .enumerate()
                .map(|(j, &v)| Param { role: ParamRole::ModeMu, mode: j, value: v, bound: Bound::Positive })
                .collect(),
        )
    }

    #[test]
    fn quadratic_minimum() {
        let objective = |p: &ParamVector| (p.value(0) - 3.0).powi(2);
        let fit = minimize(&objective, &free(&[1.0]), &MinimizeOptions { restarts: 3, ..Default::default() })
            .unwrap();
        assert!(fit.converged);
        assert!((fit.params.value(0) - 3.0).abs() < 1e-8, "{}", fit.params.value(0));
    }

    #[test]
    fn rosenbrock_in_log_coordinates() {
        let objective = |p: &ParamVector| {
            let (x, y) = (p.value(0), p.value(1));
            (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2)
        };
        let fit = minimize(&objective, &free(&[0.3, 2.0]), &MinimizeOptions::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.params.value(0) - 1.0).abs() < 1e-6);
        assert!((fit.params.value(1) - 1.0).abs() < 1e-6);
        assert_eq!(fit.restarts.len(), 16);
    }

    #[test]
    fn deterministic_across_runs() {
        let objective = |p: &ParamVector| (p.value(0) - 2.0).powi(2) + (p.value(1) - 0.5).powi(4);
        let opts = MinimizeOptions { restarts: 5, seed: 11, ..Default::default() };
        let a = minimize(&objective, &free(&[1.0, 1.0]), &opts).unwrap();
        let b = minimize(&objective, &free(&[1.0, 1.0]), &opts).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.best_restart_seed, b.best_restart_seed);
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let objective = |p: &ParamVector| {
            let (x, y) = (p.value(0), p.value(1));
            (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2)
        };
        let opts = MinimizeOptions {
            restarts: 1,
            tolerances: Tolerances { max_evaluations: 30, ..Default::default() },
            ..Default::default()
        };
        let fit = minimize(&objective, &free(&[0.3, 2.0]), &opts).unwrap();
        assert!(!fit.converged);
    }

    #[test]
    fn latin_hypercube_strata() {
        let pts = latin_hypercube(8, 3, 5);
        for d in 0..3 {
            let mut bins: Vec<usize> = pts.iter().map(|p| (p[d] * 8.0) as usize).collect();
            bins.sort();
            assert_eq!(bins, (0..8).collect::<Vec<_>>());
        }
    }
}
