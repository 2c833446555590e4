//! Entropy-regularized optimal transport between adjacent hierarchy levels.
//!
//! The solver minimizes `<A, C> - lambda * H(A)` subject to prescribed row
//! and column sums, by alternating scaling of the Gibbs kernel
//! `exp(-C / lambda)`. The log-domain path is the default: it replaces the
//! kernel products with log-sum-exp updates and stays finite at temperatures
//! where the plain kernel underflows.

use std::fmt::Write as _;

use thiserror::Error;

use crate::hierarchy::ClusterHead;
use crate::linalg::{cosine_sim_plus, DenseMatrix, LinalgError};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("invalid sinkhorn settings: {0}")]
    InvalidSettings(String),
    #[error("invalid marginals: {0}")]
    InvalidMarginals(String),
    #[error("cost shape {rows}x{cols} does not match marginals {row_len}/{col_len}")]
    ShapeMismatch { rows: usize, cols: usize, row_len: usize, col_len: usize },
    #[error("numerical underflow in plain-kernel scaling at iteration {iteration}; use the log-domain solver")]
    NumericalUnderflow { iteration: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Solver knobs. `temperature` is the entropy-regularization weight: small
/// values give sparse, near-permutation plans, large values diffuse ones.
#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornSettings {
    pub temperature: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub log_domain: bool,
}

impl Default for SinkhornSettings {
    fn default() -> Self {
        Self {
            temperature: 0.02,
            max_iterations: 10_000,
            tolerance: 1e-8,
            log_domain: true,
        }
    }
}

impl SinkhornSettings {
    pub fn validate(&self) -> Result<(), TransportError> {
        if !(self.temperature > 0.0) {
            return Err(TransportError::InvalidSettings(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(TransportError::InvalidSettings(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// A converged (or capped-out) transport plan together with the marginals it
/// was solved against and a convergence report. Failing to converge is data,
/// not an error: ablation sweeps at extreme temperatures must complete.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub plan: DenseMatrix,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    pub temperature: f64,
    pub iterations_run: usize,
    pub marginal_violation: f64,
    pub converged: bool,
}

impl TransportPlan {
    pub fn entropy(&self) -> f64 {
        plan_entropy(self)
    }

    /// One-line CSV convergence record: `temperature,iterations,violation,entropy`.
    pub fn report_csv_line(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{:?},{},{:.16e},{:.16e}",
            self.temperature,
            self.iterations_run,
            self.marginal_violation,
            self.entropy()
        );
        s
    }
}

/// Uniform probability vector of length `n`.
pub fn uniform_marginal(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Transport cost between two cluster-center sets: `1 - sim_plus(lo, hi)`.
/// Far-apart centers get cost near 1, aligned centers near 0.
pub fn cost_from_heads(
    h_lo: &ClusterHead,
    h_hi: &ClusterHead,
) -> Result<DenseMatrix, TransportError> {
    let z = cosine_sim_plus(&h_lo.centers, &h_hi.centers)?;
    Ok(z.map(|v| 1.0 - v))
}

/// Plan entropy `H = -sum a ln a`, with `0 ln 0 := 0`.
pub fn plan_entropy(plan: &TransportPlan) -> f64 {
    entropy_of(&plan.plan)
}

fn entropy_of(m: &DenseMatrix) -> f64 {
    let mut h = 0.0;
    for &a in m.data() {
        if a > 0.0 {
            h -= a * a.ln();
        }
    }
    h
}

fn validate_marginal(m: &[f64], what: &str) -> Result<(), TransportError> {
    if m.is_empty() {
        return Err(TransportError::InvalidMarginals(format!("{what} is empty")));
    }
    if m.iter().any(|&v| !(v > 0.0)) {
        return Err(TransportError::InvalidMarginals(format!(
            "{what} must be strictly positive"
        )));
    }
    let total: f64 = m.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(TransportError::InvalidMarginals(format!(
            "{what} sums to {total}, expected 1"
        )));
    }
    Ok(())
}

/// Entropic transport via alternating scaling. Stops when the largest
/// absolute marginal deviation drops below `settings.tolerance` or when the
/// iteration cap is reached, in which case the plan comes back flagged
/// `converged = false`.
pub fn sinkhorn(
    cost: &DenseMatrix,
    settings: &SinkhornSettings,
    row_marginal: &[f64],
    col_marginal: &[f64],
) -> Result<TransportPlan, TransportError> {
    settings.validate()?;
    cost.check_finite()?;
    validate_marginal(row_marginal, "row marginal")?;
    validate_marginal(col_marginal, "column marginal")?;
    if cost.rows() != row_marginal.len() || cost.cols() != col_marginal.len() {
        return Err(TransportError::ShapeMismatch {
            rows: cost.rows(),
            cols: cost.cols(),
            row_len: row_marginal.len(),
            col_len: col_marginal.len(),
        });
    }

    let (mut plan, iterations_run) = if settings.log_domain {
        sinkhorn_log(cost, settings, row_marginal, col_marginal)
    } else {
        sinkhorn_plain(cost, settings, row_marginal, col_marginal)?
    };

    // Rescale so the total mass is exactly 1; the relative change is on the
    // order of the marginal violation and does not disturb convergence.
    let total = plan.sum();
    if total > 0.0 {
        plan = plan.scale(1.0 / total);
    }
    plan.check_finite()?;

    let violation = marginal_violation(&plan, row_marginal, col_marginal);
    let converged = violation <= settings.tolerance;
    Ok(TransportPlan {
        plan,
        row_marginal: row_marginal.to_vec(),
        col_marginal: col_marginal.to_vec(),
        temperature: settings.temperature,
        iterations_run,
        marginal_violation: violation,
        converged,
    })
}

fn marginal_violation(plan: &DenseMatrix, row_marginal: &[f64], col_marginal: &[f64]) -> f64 {
    let mut worst = 0.0_f64;
    for (sum, target) in plan.row_sums().iter().zip(row_marginal) {
        worst = worst.max((sum - target).abs());
    }
    for (sum, target) in plan.col_sums().iter().zip(col_marginal) {
        worst = worst.max((sum - target).abs());
    }
    worst
}

/// Plain-kernel scaling: `A = diag(u) exp(-C/lambda) diag(v)`. Underflow in
/// the kernel or the scaling vectors is an error here; the log-domain path
/// handles those regimes.
fn sinkhorn_plain(
    cost: &DenseMatrix,
    settings: &SinkhornSettings,
    row_marginal: &[f64],
    col_marginal: &[f64],
) -> Result<(DenseMatrix, usize), TransportError> {
    let (rows, cols) = cost.shape();
    let lambda = settings.temperature;
    let kernel = cost.map(|c| (-c / lambda).exp());
    if kernel.data().iter().any(|&k| k == 0.0) {
        return Err(TransportError::NumericalUnderflow { iteration: 0 });
    }

    let mut u = vec![1.0_f64; rows];
    let mut v = vec![1.0_f64; cols];
    let mut iterations = 0;
    for iter in 1..=settings.max_iterations {
        iterations = iter;
        for r in 0..rows {
            let kv: f64 = kernel.row(r).iter().zip(&v).map(|(k, vj)| k * vj).sum();
            if !(kv > 0.0) || !kv.is_finite() {
                return Err(TransportError::NumericalUnderflow { iteration: iter });
            }
            u[r] = row_marginal[r] / kv;
        }
        for c in 0..cols {
            let ktu: f64 = (0..rows).map(|r| kernel.get(r, c) * u[r]).sum();
            if !(ktu > 0.0) || !ktu.is_finite() {
                return Err(TransportError::NumericalUnderflow { iteration: iter });
            }
            v[c] = col_marginal[c] / ktu;
        }
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(TransportError::NumericalUnderflow { iteration: iter });
        }
        // Columns are exact after the v-update; convergence is governed by
        // the row residual.
        let mut worst = 0.0_f64;
        for r in 0..rows {
            let sum: f64 = kernel
                .row(r)
                .iter()
                .zip(&v)
                .map(|(k, vj)| u[r] * k * vj)
                .sum();
            worst = worst.max((sum - row_marginal[r]).abs());
        }
        if worst <= settings.tolerance {
            break;
        }
    }

    let mut plan = DenseMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            plan.set(r, c, u[r] * kernel.get(r, c) * v[c]);
        }
    }
    Ok((plan, iterations))
}

/// Log-domain scaling with scaled potentials `f`, `g`:
/// `A_ij = exp(-C_ij/lambda + f_i + g_j)`. Row and column updates are
/// log-sum-exp reductions, so no intermediate ever leaves the representable
/// range for finite costs.
fn sinkhorn_log(
    cost: &DenseMatrix,
    settings: &SinkhornSettings,
    row_marginal: &[f64],
    col_marginal: &[f64],
) -> (DenseMatrix, usize) {
    let (rows, cols) = cost.shape();
    let lambda = settings.temperature;
    let phi = cost.map(|c| -c / lambda);
    let log_r: Vec<f64> = row_marginal.iter().map(|r| r.ln()).collect();
    let log_c: Vec<f64> = col_marginal.iter().map(|c| c.ln()).collect();

    let mut f = vec![0.0_f64; rows];
    let mut g = vec![0.0_f64; cols];
    let mut buf = vec![0.0_f64; rows.max(cols)];
    let mut iterations = 0;
    for iter in 1..=settings.max_iterations {
        iterations = iter;
        for r in 0..rows {
            let row = phi.row(r);
            for c in 0..cols {
                buf[c] = row[c] + g[c];
            }
            f[r] = log_r[r] - log_sum_exp(&buf[..cols]);
        }
        for c in 0..cols {
            for r in 0..rows {
                buf[r] = phi.get(r, c) + f[r];
            }
            g[c] = log_c[c] - log_sum_exp(&buf[..rows]);
        }
        // Rows are exact right after the f-update; after the g-update the
        // row residual measures convergence.
        let mut worst = 0.0_f64;
        for r in 0..rows {
            let row = phi.row(r);
            for c in 0..cols {
                buf[c] = row[c] + g[c];
            }
            let sum = (f[r] + log_sum_exp(&buf[..cols])).exp();
            worst = worst.max((sum - row_marginal[r]).abs());
        }
        if worst <= settings.tolerance {
            break;
        }
    }

    let mut plan = DenseMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            plan.set(r, c, (phi.get(r, c) + f[r] + g[c]).exp());
        }
    }
    (plan, iterations)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let sum: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(temperature: f64, log_domain: bool) -> SinkhornSettings {
        SinkhornSettings { temperature, log_domain, ..SinkhornSettings::default() }
    }

    fn solve(cost: &DenseMatrix, s: &SinkhornSettings) -> TransportPlan {
        let r = uniform_marginal(cost.rows());
        let c = uniform_marginal(cost.cols());
        sinkhorn(cost, s, &r, &c).unwrap()
    }

    #[test]
    fn zero_cost_gives_independent_coupling() {
        let cost = DenseMatrix::zeros(2, 2);
        for log_domain in [true, false] {
            let plan = solve(&cost, &settings(0.5, log_domain));
            assert!(plan.converged);
            for &v in plan.plan.data() {
                assert!((v - 0.25).abs() < 1e-12, "entry {v}");
            }
        }
    }

    #[test]
    fn low_temperature_recovers_permutation() {
        let cost = DenseMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let plan = solve(&cost, &settings(0.02, true));
        assert!(plan.converged);
        assert!((plan.plan.get(0, 0) - 0.5).abs() < 1e-6);
        assert!(plan.plan.get(0, 1) < 1e-6);
        assert!(plan.plan.get(1, 0) < 1e-6);
        assert!((plan.plan.get(1, 1) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn high_temperature_tends_to_uniform() {
        let cost = DenseMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let plan = solve(&cost, &settings(100.0, true));
        assert!(plan.converged);
        // Closed form for this symmetric 2x2: a = 0.5 / (1 + exp(-1/lambda)),
        // about 0.2512 -- near uniform but visibly off it at the 1e-3 scale.
        let expected = 0.5 / (1.0 + (-1.0 / 100.0_f64).exp());
        assert!((plan.plan.get(0, 0) - expected).abs() < 1e-9);
        for &v in plan.plan.data() {
            assert!((v - 0.25).abs() < 2e-3);
        }
    }

    #[test]
    fn entropy_examples() {
        let mk = |m: DenseMatrix| TransportPlan {
            row_marginal: uniform_marginal(m.rows()),
            col_marginal: uniform_marginal(m.cols()),
            plan: m,
            temperature: 1.0,
            iterations_run: 0,
            marginal_violation: 0.0,
            converged: true,
        };
        let uniform = mk(DenseMatrix::from_rows(&[&[0.25, 0.25], &[0.25, 0.25]]));
        assert!((plan_entropy(&uniform) - 4.0_f64.ln()).abs() < 1e-12);

        let perm = mk(DenseMatrix::from_rows(&[&[0.5, 0.0], &[0.0, 0.5]]));
        assert!((plan_entropy(&perm) - 2.0_f64.ln()).abs() < 1e-12);

        let skew = mk(DenseMatrix::from_rows(&[&[0.4, 0.1], &[0.1, 0.4]]));
        assert!((plan_entropy(&skew) - 1.1935496040981332).abs() < 1e-12);
    }

    #[test]
    fn cost_from_heads_examples() {
        let single = ClusterHead::new(0, DenseMatrix::from_rows(&[&[1.0, 1.0]])).unwrap();
        let same = ClusterHead::new(1, DenseMatrix::from_rows(&[&[1.0, 1.0]])).unwrap();
        let c = cost_from_heads(&single, &same).unwrap();
        assert!(c.get(0, 0).abs() < 1e-12);

        let ortho = ClusterHead::new(1, DenseMatrix::from_rows(&[&[1.0, -1.0]])).unwrap();
        let c = cost_from_heads(&single, &ortho).unwrap();
        assert!((c.get(0, 0) - 1.0).abs() < 1e-12);

        let axis = ClusterHead::new(1, DenseMatrix::from_rows(&[&[1.0, 0.0]])).unwrap();
        let c = cost_from_heads(&single, &axis).unwrap();
        assert!((c.get(0, 0) - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn log_and_plain_paths_agree() {
        let cost = DenseMatrix::from_rows(&[
            &[0.3, 0.9, 0.2],
            &[0.7, 0.1, 0.5],
        ]);
        let a = solve(&cost, &settings(0.1, true));
        let b = solve(&cost, &settings(0.1, false));
        for (x, y) in a.plan.data().iter().zip(b.plan.data()) {
            assert!((x - y).abs() < 1e-7, "{x} vs {y}");
        }
    }

    #[test]
    fn plain_path_reports_underflow_on_extreme_costs() {
        // exp(-c/lambda) underflows to exactly 0 for c/lambda > ~745.
        let cost = DenseMatrix::from_rows(&[&[0.0, 8.0], &[8.0, 0.0]]);
        let s = settings(0.005, false);
        let err = sinkhorn(&cost, &s, &uniform_marginal(2), &uniform_marginal(2));
        assert!(matches!(err, Err(TransportError::NumericalUnderflow { .. })));

        let log = sinkhorn(&cost, &settings(0.005, true), &uniform_marginal(2), &uniform_marginal(2))
            .unwrap();
        assert!(log.converged, "violation {}", log.marginal_violation);
    }

    #[test]
    fn cost_shift_leaves_plan_unchanged() {
        let cost = DenseMatrix::from_rows(&[&[0.3, 0.9], &[0.7, 0.1]]);
        let shifted = cost.map(|v| v + 3.7);
        let a = solve(&cost, &settings(0.05, true));
        let b = solve(&shifted, &settings(0.05, true));
        for (x, y) in a.plan.data().iter().zip(b.plan.data()) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn not_converged_is_flagged_not_fatal() {
        // Asymmetric cost: one iteration cannot hit a 1e-15 residual.
        let cost = DenseMatrix::from_rows(&[&[0.0, 0.9], &[0.5, 0.1]]);
        let s = SinkhornSettings {
            temperature: 0.5,
            max_iterations: 1,
            tolerance: 1e-15,
            log_domain: true,
        };
        let plan = sinkhorn(&cost, &s, &uniform_marginal(2), &uniform_marginal(2)).unwrap();
        assert!(!plan.converged, "violation {}", plan.marginal_violation);
        assert_eq!(plan.iterations_run, 1);
    }

    #[test]
    fn rejects_bad_marginals_and_settings() {
        let cost = DenseMatrix::zeros(2, 2);
        let s = SinkhornSettings::default();
        assert!(matches!(
            sinkhorn(&cost, &s, &[0.5, 0.6], &uniform_marginal(2)),
            Err(TransportError::InvalidMarginals(_))
        ));
        assert!(matches!(
            sinkhorn(&cost, &s, &[1.0, 0.0], &uniform_marginal(2)),
            Err(TransportError::InvalidMarginals(_))
        ));
        let bad = SinkhornSettings { temperature: 0.0, ..s.clone() };
        assert!(matches!(
            sinkhorn(&cost, &bad, &uniform_marginal(2), &uniform_marginal(2)),
            Err(TransportError::InvalidSettings(_))
        ));
        assert!(matches!(
            sinkhorn(&cost, &s, &uniform_marginal(3), &uniform_marginal(2)),
            Err(TransportError::ShapeMismatch { .. })
        ));
    }
}
