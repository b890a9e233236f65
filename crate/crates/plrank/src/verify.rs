//! Independent verification oracles.
//!
//! Two instruments keep the rest of the crate honest. The permutation
//! enumerator walks every ordering of a small batch and checks that the
//! exponentiated ranking log-probabilities sum to one; it owns its own
//! permutation generator and summation and never calls into the ranking
//! module's evaluation. The finite-difference checker compares analytic
//! gradients against central differences coordinate by coordinate.
//!
//! A separate direct evaluation of the per-order probability formulas (the
//! two- and three-branch case splits) cross-checks the production
//! implementation value for value at orders up to 3.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use serde::Serialize;

/// Largest batch the enumerator will accept (6! = 720 orderings).
pub const ENUMERATION_LIMIT: usize = 6;

/// Outcome of one oracle run.
#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub seed: u64,
    pub trials: usize,
    pub max_abs_dev: f64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    pub fn new(name: impl Into<String>, seed: u64, tolerance: f64) -> Self {
        OracleReport {
            name: name.into(),
            seed,
            trials: 0,
            max_abs_dev: 0.0,
            max_rel_err: 0.0,
            tolerance,
            pass: true,
        }
    }

    /// Records one trial's deviation statistics; the report fails as soon as
    /// the relevant statistic exceeds the tolerance.
    pub fn record(&mut self, abs_dev: f64, rel_err: f64) {
        self.trials += 1;
        if !abs_dev.is_finite() || !rel_err.is_finite() {
            self.max_abs_dev = f64::INFINITY;
            self.max_rel_err = f64::INFINITY;
            self.pass = false;
            return;
        }
        self.max_abs_dev = self.max_abs_dev.max(abs_dev);
        self.max_rel_err = self.max_rel_err.max(rel_err);
        if self.max_rel_err > self.tolerance {
            self.pass = false;
        }
    }

    /// Records against an absolute tolerance instead of a relative one.
    pub fn record_abs(&mut self, abs_dev: f64) {
        self.trials += 1;
        if !abs_dev.is_finite() {
            self.max_abs_dev = f64::INFINITY;
            self.pass = false;
            return;
        }
        self.max_abs_dev = self.max_abs_dev.max(abs_dev);
        if self.max_abs_dev > self.tolerance {
            self.pass = false;
        }
    }

    pub fn one_line(&self) -> String {
        format!(
            "{} {:<44} trials={:<4} max_abs={:.3e} max_rel={:.3e} tol={:.1e} seed={}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.trials,
            self.max_abs_dev,
            self.max_rel_err,
            self.tolerance,
            self.seed
        )
    }
}

/// Visits every permutation of 0..n in a deterministic order (iterative
/// Heap's algorithm).
pub fn for_each_permutation(n: usize, mut visit: impl FnMut(&[usize])) {
    let mut items: Vec<usize> = (0..n).collect();
    let mut counters = vec![0usize; n];
    visit(&items);
    let mut i = 0;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                items.swap(0, i);
            } else {
                items.swap(counters[i], i);
            }
            visit(&items);
            counters[i] += 1;
            i = 0;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
}

/// Sums exp(logprob) over all n! orderings. The log-probability callback is
/// typically the production `pl_ranking_logprob`; everything else here is
/// independent of it.
pub fn enumerate_pl_mass(
    n: usize,
    logprob: impl Fn(&[usize]) -> Result<f64>,
) -> Result<f64> {
    if n > ENUMERATION_LIMIT {
        return Err(Error::EnumerationGuard(n));
    }
    let mut mass = 0.0;
    let mut err = None;
    for_each_permutation(n, |perm| {
        if err.is_some() {
            return;
        }
        match logprob(perm) {
            Ok(lp) => mass += lp.exp(),
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(mass)
}

/// Direct evaluation of the order-R ranking log-probability from the
/// branch-by-branch definitions, independent of the ranking module. Orders
/// up to 3; corrections arrive as value tables.
pub fn direct_ranking_logprob(
    perm: &[usize],
    theta: &[f64],
    beta: Option<&Matrix>,
    gamma: Option<&Matrix>,
    lambdas: &[f64],
    order: usize,
    centring: bool,
) -> f64 {
    let n = perm.len();
    if order == 0 {
        // Uniform pick at every position: product of 1/(n - k + 1).
        let mut lp = 0.0;
        for k in 1..=n {
            lp -= ((n - k + 1) as f64).ln();
        }
        return lp;
    }
    assert!(order <= 3, "direct oracle covers orders 0..=3");
    let mut available: Vec<usize> = (0..n).collect();
    let mut lp = 0.0;
    for k in 1..=n {
        let pick = perm[k - 1];
        let mut scores: Vec<f64> = Vec::with_capacity(available.len());
        for &d in &available {
            let mut s = theta[d];
            if order >= 2 && k >= 2 {
                if let Some(b) = beta {
                    s += lambdas[0] * b.get(perm[k - 2], d);
                }
            }
            if order >= 3 && k >= 3 {
                if let Some(g) = gamma {
                    s += lambdas[1] * g.get(perm[k - 3] * n + perm[k - 2], d);
                }
            }
            scores.push(s);
        }
        if centring {
            // Shift by the mean; a pure diagnostic since softmax ignores it.
            let mean: f64 = scores.iter().sum::<f64>() / scores.len() as f64;
            for s in &mut scores {
                *s -= mean;
            }
        }
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|&s| (s - mx).exp()).sum();
        let at = available.iter().position(|&d| d == pick).expect("pick available");
        lp += (scores[at] - mx) - z.ln();
        available.remove(at);
    }
    lp
}

/// Central-difference gradient check of a scalar function. `f` is evaluated
/// at perturbed copies of `inputs`; the analytic gradients must match with
/// relative error at most `tol`, where the denominator is floored at 1e-8.
pub fn gradcheck(
    name: &str,
    f: &dyn Fn(&[Matrix]) -> f64,
    inputs: &[Matrix],
    analytic: &[Matrix],
    step: f64,
    tol: f64,
    seed: u64,
) -> OracleReport {
    let mut report = OracleReport::new(name, seed, tol);
    assert_eq!(inputs.len(), analytic.len(), "inputs/analytic length mismatch");
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let orig = input.data()[idx];
            work[which].data_mut()[idx] = orig + step;
            let up = f(&work);
            work[which].data_mut()[idx] = orig - step;
            let down = f(&work);
            work[which].data_mut()[idx] = orig;
            if !up.is_finite() || !down.is_finite() {
                report.record(f64::INFINITY, f64::INFINITY);
                return report;
            }
            let numeric = (up - down) / (2.0 * step);
            let exact = analytic[which].data()[idx];
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            let abs_dev = (numeric - exact).abs();
            report.record(abs_dev, abs_dev / denom);
        }
    }
    report
}
