//! Finite-query private release: influence functions of the second-stage
//! regressors, the sample gross-error sensitivity found by bounded multistart
//! search, the calibration constant c(ε, δ, n), and the released report.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DomainBounds, Sample};
use crate::error::{Error, Result};
use crate::optim::{halton_points, refine_from, OptimOpts, OptimResult};
use crate::privacy::PrivacyBudget;
use crate::pseudo::{pseudo_outcome, rho_weight, LearnerKind, Nuisance};
use crate::secondstage::{KrrModel, LinearBasisModel, SecondStageModel};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// c(ε, δ, n) = 5·√(2·ln(n)·ln(2/δ)) / (ε·n). Zero when ε is infinite.
pub fn calibration_c(eps: f64, delta: f64, n: usize) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("epsilon must be positive, got {eps}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Argument(format!("delta must lie in (0,1), got {delta}")));
    }
    if n < 2 {
        return Err(Error::Argument(format!(
            "calibration requires n >= 2 (ln n > 0), got {n}"
        )));
    }
    if eps.is_infinite() {
        return Ok(0.0);
    }
    let nf = n as f64;
    Ok(5.0 * (2.0 * nf.ln() * (2.0 / delta).ln()).sqrt() / (eps * nf))
}

/// Precomputed influence-direction evaluator h(𝐱, ·) for a fixed model and
/// query set.
pub enum InfluenceEval<'a> {
    Krr {
        model: &'a KrrModel,
        chol: Cholesky<f64, Dyn>,
        w_sqrt: DVector<f64>,
        /// K(𝐱, X)·diag(√ρ), shape d×n.
        cross_w: DMatrix<f64>,
        queries: &'a [Vec<f64>],
    },
    Parametric {
        model: &'a LinearBasisModel,
        chol: Cholesky<f64, Dyn>,
        /// Basis evaluations at the queries, shape d×p.
        psi_q: DMatrix<f64>,
    },
}

impl<'a> InfluenceEval<'a> {
    pub fn new(model: &'a SecondStageModel, queries: &'a [Vec<f64>]) -> Result<Self> {
        for q in queries {
            if q.len() != model.dim() {
                return Err(Error::Argument(format!(
                    "query dimension {} does not match model dimension {}",
                    q.len(),
                    model.dim()
                )));
            }
        }
        match model {
            SecondStageModel::Krr(m) => Self::new_krr(m, queries),
            SecondStageModel::LinearBasis(m) => Self::new_parametric(m, queries),
        }
    }

    pub fn new_krr(model: &'a KrrModel, queries: &'a [Vec<f64>]) -> Result<Self> {
        let n = model.n();
        let k = model.kernel.matrix(&model.train_x);
        let w_sqrt = DVector::from_iterator(n, model.rho.iter().map(|r| r.sqrt()));
        let mut s = k;
        for i in 0..n {
            for j in 0..n {
                s[(i, j)] *= w_sqrt[i] * w_sqrt[j];
            }
            s[(i, i)] += n as f64 * model.lambda_reg;
        }
        let chol = Cholesky::new(s)
            .ok_or_else(|| Error::Numeric("resolvent system not positive definite".into()))?;
        let mut cross_w = model.kernel.cross(queries, &model.train_x);
        for j in 0..n {
            for i in 0..queries.len() {
                cross_w[(i, j)] *= w_sqrt[j];
            }
        }
        Ok(InfluenceEval::Krr {
            model,
            chol,
            w_sqrt,
            cross_w,
            queries,
        })
    }

    pub fn new_parametric(model: &'a LinearBasisModel, queries: &'a [Vec<f64>]) -> Result<Self> {
        let chol = Cholesky::new(model.hessian.clone()).ok_or_else(|| {
            Error::Numeric("second-stage Hessian is singular; refit with damping".into())
        })?;
        let p = model.basis.len();
        let mut psi_q = DMatrix::zeros(queries.len(), p);
        for (i, q) in queries.iter().enumerate() {
            let f = model.basis.features(q);
            for j in 0..p {
                psi_q[(i, j)] = f[j];
            }
        }
        Ok(InfluenceEval::Parametric {
            model,
            chol,
            psi_q,
        })
    }

    /// The d-vector h(𝐱, x).
    ///
    /// KRR: the finite-sample resolvent of (L̂_ρ + λI)⁻¹K(·, x) evaluated at
    /// the queries: solve ((1/n)·K·W + λI)·u = K(X, x), then
    /// h = (1/λ)·(K(𝐱,x) − (1/n)·K(𝐱,X)·W·u).
    ///
    /// Parametric: h = 2·Ψ(𝐱)·H⁻¹·ψ(x).
    pub fn h_vec(&self, x: &[f64]) -> DVector<f64> {
        match self {
            InfluenceEval::Krr {
                model,
                chol,
                w_sqrt,
                cross_w,
                queries,
            } => {
                let k_col = model.kernel.column(&model.train_x, x);
                let b = k_col.component_mul(w_sqrt);
                // (S + nλI)⁻¹·W^{1/2}·K(X,x); the (1/n)·n factors cancel
                // against the resolvent scaling.
                let v = chol.solve(&b);
                let kq = model.kernel.column(queries, x);
                (kq - cross_w * v) / model.lambda_reg
            }
            InfluenceEval::Parametric { model, chol, psi_q } => {
                let psi = model.basis.features(x);
                let hinv_psi = chol.solve(&psi);
                (psi_q * hinv_psi) * 2.0
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            InfluenceEval::Krr { model, .. } => model.predict(x).expect("dimension checked"),
            InfluenceEval::Parametric { model, .. } => {
                model.predict(x).expect("dimension checked")
            }
        }
    }
}

/// Scalar part of the influence function: ρ(a, π̂(x))·(φ(z, η̂) − ĝ(x)).
fn influence_scalar(
    eval: &InfluenceEval,
    z: &Sample,
    eta: &(impl Nuisance + Sync),
    kind: LearnerKind,
) -> Result<f64> {
    let pi = eta.pi(&z.x);
    let rho = rho_weight(kind, z.a, pi)?;
    let phi = pseudo_outcome(kind, z, eta)?;
    Ok(rho * (phi - eval.predict(&z.x)))
}

/// Influence function of the KRR second stage at contamination point z,
/// evaluated at the queries.
pub fn influence_vector_krr(
    model: &KrrModel,
    queries: &[Vec<f64>],
    z: &Sample,
    eta: &(impl Nuisance + Sync),
    kind: LearnerKind,
) -> Result<Vec<f64>> {
    let eval = InfluenceEval::new_krr(model, queries)?;
    let s = influence_scalar(&eval, z, eta, kind)?;
    Ok((eval.h_vec(&z.x) * s).iter().copied().collect())
}

/// Influence function of the parametric second stage at z.
pub fn influence_vector_parametric(
    model: &LinearBasisModel,
    queries: &[Vec<f64>],
    z: &Sample,
    eta: &(impl Nuisance + Sync),
    kind: LearnerKind,
) -> Result<Vec<f64>> {
    let eval = InfluenceEval::new_parametric(model, queries)?;
    let s = influence_scalar(&eval, z, eta, kind)?;
    Ok((eval.h_vec(&z.x) * s).iter().copied().collect())
}

/// Dispatching influence function.
pub fn influence_vector(
    model: &SecondStageModel,
    queries: &[Vec<f64>],
    z: &Sample,
    eta: &(impl Nuisance + Sync),
    kind: LearnerKind,
) -> Result<Vec<f64>> {
    let eval = InfluenceEval::new(model, queries)?;
    let s = influence_scalar(&eval, z, eta, kind)?;
    Ok((eval.h_vec(&z.x) * s).iter().copied().collect())
}

/// One (a, y-endpoint) search branch of the sensitivity optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchTrace {
    pub a: bool,
    pub y: f64,
    pub value: f64,
    pub converged: bool,
}

/// Diagnostic record of the supremum search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTrace {
    pub branches: Vec<BranchTrace>,
    pub scan_points: usize,
    pub restarts: usize,
    /// True when a non-converged branch forced the 10% inflation.
    pub inflated: bool,
}

/// Result of the gross-error sensitivity search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityResult {
    pub gamma: f64,
    pub argmax_z: Sample,
    pub trace: SensitivityTrace,
}

/// Supremum of ‖IF(z)‖₂ over z = (a, x, y) ∈ {0,1} × 𝒳 × 𝒴.
///
/// The influence function factors as ‖h(𝐱,x)‖₂·|ρ·(φ − ĝ(x))| and φ is
/// affine in y for fixed (a, x), so the y-supremum sits at an interval
/// endpoint. For each a ∈ {0,1} and y-endpoint a quasi-random scan of the
/// covariate box seeds a multistart projected-gradient ascent. A branch that
/// fails to converge inflates the result by 10% (conservative direction).
pub fn gross_error_sensitivity(
    model: &SecondStageModel,
    queries: &[Vec<f64>],
    domain: &DomainBounds,
    eta: &(impl Nuisance + Sync),
    kind: LearnerKind,
    opts: &OptimOpts,
) -> Result<SensitivityResult> {
    domain.validate()?;
    if domain.dim() != model.dim() {
        return Err(Error::Argument(format!(
            "domain dimension {} does not match model dimension {}",
            domain.dim(),
            model.dim()
        )));
    }
    let eval = InfluenceEval::new(model, queries)?;
    let (y_lo, y_hi) = domain.outcome;
    let branches: Vec<(bool, f64)> = vec![(false, y_lo), (false, y_hi), (true, y_lo), (true, y_hi)];

    // One shared scan: ‖h‖ is independent of (a, y), so evaluate it once per
    // scan point and score all four branches from cached nuisance values.
    let scan = halton_points(opts.scan_points.max(1), &domain.covariates);
    struct ScanPoint {
        h_norm: f64,
        pi: f64,
        mu0: f64,
        mu1: f64,
        g: f64,
    }
    let cached: Vec<ScanPoint> = scan
        .par_iter()
        .map(|x| ScanPoint {
            h_norm: eval.h_vec(x).norm(),
            pi: eta.pi(x),
            mu0: eta.mu(x, false),
            mu1: eta.mu(x, true),
            g: eval.predict(x),
        })
        .collect();

    let scalar_from_cache = |c: &ScanPoint, a: bool, y: f64| -> Result<f64> {
        let rho = rho_weight(kind, a, c.pi)?;
        let mu_a = if a { c.mu1 } else { c.mu0 };
        let phi = match kind {
            LearnerKind::R => (y - mu_a) / (a as u8 as f64 - c.pi) + (c.mu1 - c.mu0),
            LearnerKind::Dr => {
                (a as u8 as f64 - c.pi) / (c.pi * (1.0 - c.pi)) * (y - mu_a) + (c.mu1 - c.mu0)
            }
        };
        Ok(rho * (phi - c.g))
    };

    let objective = |a: bool, y: f64, x: &[f64]| -> f64 {
        let z = Sample {
            x: x.to_vec(),
            a,
            y,
        };
        let s = match influence_scalar(&eval, &z, eta, kind) {
            Ok(s) => s,
            Err(_) => return f64::NEG_INFINITY,
        };
        eval.h_vec(x).norm() * s.abs()
    };

    let mut best_gamma = 0.0_f64;
    let mut best_z: Option<Sample> = None;
    let mut traces = Vec::with_capacity(branches.len());
    let mut any_unconverged = false;

    for &(a, y) in &branches {
        let mut scored: Vec<(usize, f64)> = cached
            .iter()
            .enumerate()
            .map(|(i, c)| Ok((i, c.h_norm * scalar_from_cache(c, a, y)?.abs())))
            .collect::<Result<_>>()?;
        scored.sort_by(|l, r| r.1.partial_cmp(&l.1).unwrap_or(std::cmp::Ordering::Equal));
        let starts: Vec<&Vec<f64>> = scored
            .iter()
            .take(opts.restarts.max(1))
            .map(|(i, _)| &scan[*i])
            .collect();
        let f = |x: &[f64]| objective(a, y, x);
        let mut results: Vec<OptimResult> = starts
            .par_iter()
            .map(|s| refine_from(&f, s, &domain.covariates, opts))
            .collect();
        // Best raw scan point guards the ascent.
        results.push(OptimResult {
            x: scan[scored[0].0].clone(),
            value: scored[0].1,
            converged: true,
            evals: 0,
        });
        let branch_best = results
            .into_iter()
            .max_by(|l, r| l.value.partial_cmp(&r.value).unwrap_or(std::cmp::Ordering::Equal))
            .expect("nonempty");
        if !branch_best.converged {
            any_unconverged = true;
        }
        traces.push(BranchTrace {
            a,
            y,
            value: branch_best.value,
            converged: branch_best.converged,
        });
        if branch_best.value > best_gamma {
            best_gamma = branch_best.value;
            best_z = Some(Sample {
                x: branch_best.x,
                a,
                y,
            });
        }
    }

    let mut gamma = best_gamma;
    if any_unconverged {
        gamma *= 1.10;
    }
    let argmax_z = best_z.unwrap_or(Sample {
        x: domain.covariates.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect(),
        a: false,
        y: y_lo,
    });
    Ok(SensitivityResult {
        gamma,
        argmax_z,
        trace: SensitivityTrace {
            branches: traces,
            scan_points: opts.scan_points,
            restarts: opts.restarts,
            inflated: any_unconverged,
        },
    })
}

/// Everything produced by one finite-query release. Raw estimates, the noise
/// draw, the sensitivity value and its argmax are privileged information:
/// serialize with `to_json(false)` for anything that leaves the curator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteReleaseReport {
    pub queries: Vec<Vec<f64>>,
    pub raw_estimates: Vec<f64>,
    pub gamma: f64,
    pub c_const: f64,
    pub noise_scale: f64,
    pub private_estimates: Vec<f64>,
    pub budget: PrivacyBudget,
    pub argmax_z: Option<Sample>,
    pub noise_u: Vec<f64>,
    pub rng_seed: u64,
    pub learner: LearnerKind,
    pub n: usize,
    pub optimizer_trace: Option<SensitivityTrace>,
}

impl FiniteReleaseReport {
    /// Serialize either the full audit view or the public view. The public
    /// view withholds anything that would let a reader reconstruct the raw
    /// estimates (the raw values, the noise draw, its seed and scale).
    pub fn to_json(&self, audit: bool) -> serde_json::Value {
        if audit {
            serde_json::to_value(self).expect("report serializes")
        } else {
            serde_json::json!({
                "queries": self.queries,
                "private_estimates": self.private_estimates,
                "budget": self.budget,
                "learner": self.learner,
                "n": self.n,
            })
        }
    }
}

/// Finite-query release: ĝ_DP(𝐱) = ĝ_D(𝐱) + γ·c(ε, δ, n)·u with
/// u ~ N(0, I_d). With an infinite ε the sensitivity search is skipped and
/// the output equals the raw estimates.
///
/// A release consumes its budget: callers must not re-release a different
/// query set under the same budget (the CLI enforces this with a ledger).
pub fn release_finite(
    model: &SecondStageModel,
    queries: &[Vec<f64>],
    eta: &(impl Nuisance + Sync),
    budget: &PrivacyBudget,
    domain: &DomainBounds,
    kind: LearnerKind,
    opts: &OptimOpts,
    rng_seed: u64,
) -> Result<FiniteReleaseReport> {
    budget.validate()?;
    let n = model.train_size();
    if n < 2 {
        return Err(Error::Argument("release requires n >= 2".into()));
    }
    let raw = model.predict_batch(queries)?;

    let (gamma, argmax_z, trace) = if budget.is_non_private() {
        (0.0, None, None)
    } else {
        let s = gross_error_sensitivity(model, queries, domain, eta, kind, opts)?;
        (s.gamma, Some(s.argmax_z), Some(s.trace))
    };
    let c_const = calibration_c(budget.epsilon, budget.delta, n)?;
    let noise_scale = gamma * c_const;

    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let normal = StandardNormal;
    let noise_u: Vec<f64> = (0..queries.len())
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng))
        .collect();
    let private: Vec<f64> = raw
        .iter()
        .zip(&noise_u)
        .map(|(r, u)| r + noise_scale * u)
        .collect();

    Ok(FiniteReleaseReport {
        queries: queries.to_vec(),
        raw_estimates: raw,
        gamma,
        c_const,
        noise_scale,
        private_estimates: private,
        budget: *budget,
        argmax_z,
        noise_u,
        rng_seed,
        learner: kind,
        n,
        optimizer_trace: trace,
    })
}
