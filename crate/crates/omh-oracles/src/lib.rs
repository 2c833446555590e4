//! Naive brute-force reference implementations used only by tests.
//!
//! Everything here is deliberately slow and simple: grid searches, exhaustive
//! permutation scans, central finite differences. Nothing in this crate
//! shares code with the production crate it checks — that separation is the
//! point.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

/// Entropic transport objective `<A, C> - lambda * H(A)` with
/// `H(A) = -sum a ln a` and `0 ln 0 := 0`. Plans and costs are row-major
/// `rows x cols` slices.
pub fn entropic_objective(plan: &[f64], cost: &[f64], lambda: f64) -> f64 {
    assert_eq!(plan.len(), cost.len());
    let mut obj = 0.0;
    for (&a, &c) in plan.iter().zip(cost.iter()) {
        obj += a * c;
        if a > 0.0 {
            obj += lambda * a * a.ln();
        }
    }
    obj
}

/// Brute-force solver for the 2x2 entropic transport problem with uniform
/// marginals (0.5, 0.5) on both sides. Such plans have a single free
/// parameter `a`: `[[a, 0.5-a], [0.5-a, a]]`. The objective is strictly
/// convex in `a`, so a staged grid refinement (each stage re-scans around the
/// previous argmin) reaches the stated 1e-7 final resolution without scanning
/// 5 million points per instance.
pub fn ot_bruteforce_2x2(cost: &[[f64; 2]; 2], lambda: f64) -> [[f64; 2]; 2] {
    let flat = [cost[0][0], cost[0][1], cost[1][0], cost[1][1]];
    let eval = |a: f64| {
        let plan = [a, 0.5 - a, 0.5 - a, a];
        entropic_objective(&plan, &flat, lambda)
    };
    let mut lo = 0.0_f64;
    let mut hi = 0.5_f64;
    let mut step = 1e-2;
    let mut best_a = 0.25;
    loop {
        let mut best = f64::INFINITY;
        let mut a = lo;
        while a <= hi + step * 0.5 {
            let x = a.clamp(0.0, 0.5);
            let v = eval(x);
            if v < best {
                best = v;
                best_a = x;
            }
            a += step;
        }
        if step <= 1e-7 {
            break;
        }
        lo = (best_a - 2.0 * step).max(0.0);
        hi = (best_a + 2.0 * step).min(0.5);
        step /= 10.0;
    }
    [[best_a, 0.5 - best_a], [0.5 - best_a, best_a]]
}

/// Staged grid search over the transport polytope for small instances.
///
/// The `(rows-1) x (cols-1)` top-left block is scanned on a grid; the last
/// row and column are completed from the marginals, negative completions are
/// rejected as infeasible. Refinement re-scans a shrinking window around the
/// best block. Practical up to 4 free cells (2x2 .. 3x3, 2x5).
///
/// Returns the best plan found (row-major) and its objective value. The
/// value is an upper bound on the true minimum, which is the direction the
/// acceptance comparison needs.
pub fn ot_bruteforce_small(
    cost: &[f64],
    rows: usize,
    cols: usize,
    lambda: f64,
    row_marginal: &[f64],
    col_marginal: &[f64],
) -> (Vec<f64>, f64) {
    assert_eq!(cost.len(), rows * cols);
    assert_eq!(row_marginal.len(), rows);
    assert_eq!(col_marginal.len(), cols);
    let free = (rows - 1) * (cols - 1);
    assert!(free <= 4, "grid oracle limited to 4 free cells, got {free}");

    let complete = |block: &[f64]| -> Option<Vec<f64>> {
        // Fill the free block, then derive the last column from row sums and
        // the last row from column sums.
        let mut plan = vec![0.0; rows * cols];
        for r in 0..rows - 1 {
            let mut rsum = 0.0;
            for c in 0..cols - 1 {
                let v = block[r * (cols - 1) + c];
                plan[r * cols + c] = v;
                rsum += v;
            }
            let last = row_marginal[r] - rsum;
            if last < -1e-15 {
                return None;
            }
            plan[r * cols + (cols - 1)] = last.max(0.0);
        }
        for c in 0..cols {
            let mut csum = 0.0;
            for r in 0..rows - 1 {
                csum += plan[r * cols + c];
            }
            let last = col_marginal[c] - csum;
            if last < -1e-15 {
                return None;
            }
            plan[(rows - 1) * cols + c] = last.max(0.0);
        }
        Some(plan)
    };

    let max_block: Vec<f64> = (0..free)
        .map(|i| {
            let r = i / (cols - 1);
            let c = i % (cols - 1);
            row_marginal[r].min(col_marginal[c])
        })
        .collect();

    let mut center: Vec<f64> = max_block.iter().map(|m| m / 2.0).collect();
    let mut radius: Vec<f64> = max_block.iter().map(|m| m / 2.0).collect();
    let per_dim = 13usize;
    let mut best_plan: Option<Vec<f64>> = None;
    let mut best_obj = f64::INFINITY;

    for _stage in 0..10 {
        // Odometer over the grid points of every free cell.
        let mut idx = vec![0usize; free];
        let mut block = vec![0.0; free];
        loop {
            for i in 0..free {
                let lo = (center[i] - radius[i]).max(0.0);
                let hi = (center[i] + radius[i]).min(max_block[i]);
                let t = idx[i] as f64 / (per_dim - 1) as f64;
                block[i] = lo + t * (hi - lo);
            }
            if let Some(plan) = complete(&block) {
                let obj = entropic_objective(&plan, cost, lambda);
                if obj < best_obj {
                    best_obj = obj;
                    best_plan = Some(plan);
                    center.copy_from_slice(&block);
                }
            }
            // Advance odometer.
            let mut i = 0;
            loop {
                if i == free {
                    break;
                }
                idx[i] += 1;
                if idx[i] < per_dim {
                    break;
                }
                idx[i] = 0;
                i += 1;
            }
            if i == free {
                break;
            }
        }
        for r in radius.iter_mut() {
            // Window shrinks by 4x per stage; with 13 points per axis the new
            // window always brackets the previous grid argmin.
            *r /= 4.0;
        }
    }
    let plan = best_plan.expect("no feasible plan found; marginals inconsistent?");
    (plan, best_obj)
}

/// Exhaustive optimal assignment of predicted clusters to true classes,
/// maximizing the total matched count of a confusion matrix (rows = predicted,
/// cols = true). Ties resolve to the lexicographically smallest assignment
/// vector. Returns `(assignment, best_total, unique)` where `assignment[p]`
/// is `Some(t)` for matched predictions and `unique` says whether the optimal
/// matched-class mapping was unique.
pub fn assignment_bruteforce(counts: &[Vec<u64>]) -> (Vec<Option<usize>>, u64, bool) {
    let k_pred = counts.len();
    let k_true = counts.first().map_or(0, |r| r.len());
    let n = k_pred.max(k_true);
    assert!(n <= 9, "brute-force assignment limited to K <= 9");

    // Permute n virtual columns over n virtual rows; out-of-range pairs score 0.
    let score_at = |p: usize, t: usize| -> u64 {
        if p < k_pred && t < k_true {
            counts[p][t]
        } else {
            0
        }
    };

    let mut perm: Vec<usize> = (0..n).collect();
    let mut best: Option<Vec<usize>> = None;
    let mut best_total = 0u64;
    let mut unique = true;
    permute_all(&mut perm, 0, &mut |p| {
        let total: u64 = (0..n).map(|i| score_at(i, p[i])).sum();
        match &best {
            None => {
                best = Some(p.to_vec());
                best_total = total;
            }
            Some(b) => {
                if total > best_total {
                    best = Some(p.to_vec());
                    best_total = total;
                    unique = true;
                } else if total == best_total {
                    let effective = |q: &[usize]| -> Vec<Option<usize>> {
                        (0..k_pred)
                            .map(|i| if q[i] < k_true { Some(q[i]) } else { None })
                            .collect()
                    };
                    let cand = effective(p);
                    let cur = effective(b);
                    if cand != cur {
                        unique = false;
                        if cand < cur {
                            best = Some(p.to_vec());
                        }
                    }
                }
            }
        }
    });
    let best = best.unwrap_or_default();
    let assignment = (0..k_pred)
        .map(|p| if best[p] < k_true { Some(best[p]) } else { None })
        .collect();
    (assignment, best_total, unique)
}

fn permute_all(perm: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == perm.len() {
        visit(perm);
        return;
    }
    // Visit values for slot k in increasing order so the enumeration is
    // lexicographic; recursion leaves perm[k..] unchanged, so a second swap
    // with the same position restores the state.
    let mut rest: Vec<usize> = perm[k..].to_vec();
    rest.sort_unstable();
    for &v in &rest {
        let pos = perm[k..].iter().position(|&x| x == v).unwrap() + k;
        perm.swap(k, pos);
        permute_all(perm, k + 1, visit);
        perm.swap(k, pos);
    }
}

/// Central finite differences of `f` at `x`, one estimate per coordinate.
pub fn finite_difference_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0);
    let mut pt = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = pt[i];
        pt[i] = orig + step;
        let fp = f(&pt);
        pt[i] = orig - step;
        let fm = f(&pt);
        pt[i] = orig;
        grad.push((fp - fm) / (2.0 * step));
    }
    grad
}

/// Masks finite-difference estimates near non-smooth points. `kink_distance`
/// gives, per coordinate, the distance to the nearest argmax tie or L1 kink;
/// coordinates closer than `radius` are excluded (`None`) because the
/// subgradient there is set-valued and the comparison is undefined.
pub fn exclude_near_kinks(
    grad: Vec<f64>,
    kink_distance: &[f64],
    radius: f64,
) -> Vec<Option<f64>> {
    assert_eq!(grad.len(), kink_distance.len());
    grad.into_iter()
        .zip(kink_distance.iter())
        .map(|(g, &d)| if d < radius { None } else { Some(g) })
        .collect()
}

/// Maximum relative error between an analytic gradient and a (possibly
/// masked) finite-difference estimate. Coordinates where both magnitudes are
/// below `1e-8` count as exact agreement.
pub fn max_rel_error(analytic: &[f64], fd: &[Option<f64>]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    let mut worst = 0.0_f64;
    for (&a, est) in analytic.iter().zip(fd.iter()) {
        if let Some(e) = est {
            let denom = a.abs().max(e.abs());
            if denom < 1e-8 {
                continue;
            }
            worst = worst.max((a - e).abs() / denom);
        }
    }
    worst
}

/// One row of the oracle audit trail: a production value next to the oracle
/// value, with deviations recomputed here rather than trusted from callers.
#[derive(Clone, Debug)]
pub struct OracleReport {
    pub case_id: String,
    pub production: f64,
    pub oracle: f64,
    pub abs_deviation: f64,
    pub rel_deviation: f64,
}

impl OracleReport {
    pub fn new(case_id: impl Into<String>, production: f64, oracle: f64) -> Self {
        let abs = (production - oracle).abs();
        let denom = production.abs().max(oracle.abs());
        let rel = if denom > 0.0 { abs / denom } else { 0.0 };
        Self {
            case_id: case_id.into(),
            production,
            oracle,
            abs_deviation: abs,
            rel_deviation: rel,
        }
    }

    pub fn csv_line(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            self.case_id, self.production, self.oracle, self.abs_deviation, self.rel_deviation
        );
        s
    }
}

/// Appends report rows to a CSV file, creating it (with header) when absent.
pub fn append_reports(path: &Path, reports: &[OracleReport]) -> std::io::Result<()> {
    let new = !path.exists();
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    if new {
        writeln!(file, "case_id,production,oracle,abs_deviation,rel_deviation")?;
    }
    for r in reports {
        writeln!(file, "{}", r.csv_line())?;
    }
    Ok(())
}
