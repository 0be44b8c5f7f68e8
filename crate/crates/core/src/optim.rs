//! Bounded multistart maximization used by the sensitivity search: a coarse
//! quasi-random scan seeds a handful of projected-gradient ascents with
//! finite-difference gradients and backtracking line search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Optimizer options. Defaults: 256 scan points, 8 restarts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimOpts {
    pub scan_points: usize,
    pub restarts: usize,
    pub max_iters: usize,
    /// Relative step tolerance for convergence, in units of the box range.
    pub tol: f64,
    /// Relative finite-difference step, in units of the box range.
    pub fd_step: f64,
}

impl Default for OptimOpts {
    fn default() -> Self {
        OptimOpts {
            scan_points: 256,
            restarts: 8,
            max_iters: 120,
            tol: 1e-8,
            fd_step: 1e-6,
        }
    }
}

/// Outcome of one maximization call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub evals: usize,
}

const PRIMES: [usize; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Low-discrepancy points in the box (Halton sequence, offset by one to
/// avoid the origin).
pub fn halton_points(count: usize, bounds: &[(f64, f64)]) -> Vec<Vec<f64>> {
    let q = bounds.len();
    (0..count)
        .map(|i| {
            (0..q)
                .map(|j| {
                    let u = radical_inverse(i + 1, PRIMES[j % PRIMES.len()]);
                    let (lo, hi) = bounds[j];
                    lo + u * (hi - lo)
                })
                .collect()
        })
        .collect()
}

fn project(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
}

fn fd_gradient(
    f: &(impl Fn(&[f64]) -> f64 + Sync),
    x: &[f64],
    bounds: &[(f64, f64)],
    rel_step: f64,
    evals: &mut usize,
) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for j in 0..x.len() {
        let (lo, hi) = bounds[j];
        let h = rel_step * (hi - lo);
        let up = (x[j] + h).min(hi);
        let dn = (x[j] - h).max(lo);
        probe[j] = up;
        let f_up = f(&probe);
        probe[j] = dn;
        let f_dn = f(&probe);
        probe[j] = x[j];
        *evals += 2;
        g[j] = if up > dn { (f_up - f_dn) / (up - dn) } else { 0.0 };
    }
    g
}

fn ascend(
    f: &(impl Fn(&[f64]) -> f64 + Sync),
    start: &[f64],
    bounds: &[(f64, f64)],
    opts: &OptimOpts,
) -> OptimResult {
    let range: f64 =
        bounds.iter().map(|&(lo, hi)| hi - lo).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut x = start.to_vec();
    let mut evals = 0usize;
    let mut fx = f(&x);
    evals += 1;
    let mut step = 0.1 * range;
    let mut converged = false;
    for _ in 0..opts.max_iters {
        let g = fd_gradient(f, &x, bounds, opts.fd_step, &mut evals);
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm * range <= 1e-12 * (1.0 + fx.abs()) {
            converged = true;
            break;
        }
        // Backtracking ascent along the projected gradient direction.
        let mut t = step;
        let mut accepted = false;
        for _ in 0..30 {
            let mut cand: Vec<f64> = x
                .iter()
                .zip(&g)
                .map(|(xv, gv)| xv + t * gv / gnorm)
                .collect();
            project(&mut cand, bounds);
            let fc = f(&cand);
            evals += 1;
            let disp: f64 = cand
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if disp <= opts.tol * range {
                // Pinned against the boundary or the tolerance: done.
                if fc > fx {
                    x = cand;
                    fx = fc;
                }
                converged = true;
                break;
            }
            if fc > fx + 1e-10 * fx.abs() {
                x = cand;
                fx = fc;
                accepted = true;
                break;
            }
            t *= 0.4;
        }
        if converged {
            break;
        }
        if accepted {
            step = (t * 2.0).min(0.5 * range);
        } else {
            converged = true; // no ascent direction left at tolerance
            break;
        }
    }
    OptimResult {
        x,
        value: fx,
        converged,
        evals,
    }
}

/// Single projected-gradient ascent from an explicit start point.
pub fn refine_from(
    f: &(impl Fn(&[f64]) -> f64 + Sync),
    start: &[f64],
    bounds: &[(f64, f64)],
    opts: &OptimOpts,
) -> OptimResult {
    ascend(f, start, bounds, opts)
}

/// Maximize `f` over the box: scan `scan_points` Halton points, refine from
/// the `restarts` best by projected-gradient ascent, return the overall best.
pub fn maximize_box(
    f: &(impl Fn(&[f64]) -> f64 + Sync),
    bounds: &[(f64, f64)],
    opts: &OptimOpts,
) -> OptimResult {
    assert!(!bounds.is_empty(), "empty search box");
    let scan = halton_points(opts.scan_points.max(1), bounds);
    let mut scored: Vec<(usize, f64)> = scan
        .par_iter()
        .enumerate()
        .map(|(i, x)| (i, f(x)))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let starts: Vec<&Vec<f64>> = scored
        .iter()
        .take(opts.restarts.max(1))
        .map(|(i, _)| &scan[*i])
        .collect();

    let mut results: Vec<OptimResult> = starts
        .par_iter()
        .map(|s| ascend(f, s, bounds, opts))
        .collect();
    let total_evals: usize = opts.scan_points + results.iter().map(|r| r.evals).sum::<usize>();

    // The best scan point itself guards against a diverging ascent.
    let (best_i, best_scan) = scored[0];
    results.push(OptimResult {
        x: scan[best_i].clone(),
        value: best_scan,
        converged: true,
        evals: 0,
    });

    let mut best = results
        .into_iter()
        .max_by(|a, b| a.value.partial_cmp(&b.value).unwrap_or(std::cmp::Ordering::Equal))
        .expect("at least one candidate");
    best.evals = total_evals;
    best
}
