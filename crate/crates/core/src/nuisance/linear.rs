//! L2-regularized convex stage-1 models with closed-form output-perturbation
//! sensitivity: ridge outcome regression per treatment arm and logistic
//! propensity regression.
//!
//! Both objectives use the form (1/n)·Σ ℓ_i(θ) + (λ'/2)·‖θ‖², normalized by
//! the full sample count n, so replacing one sample moves the exact minimizer
//! by at most 2L/(n·λ') in l2 norm, where L bounds the per-sample loss
//! gradient over the reachable parameter ball.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::data::{Dataset, DomainBounds};
use crate::error::{Error, Result};

/// Feature map [1, x] used by both linear models.
pub fn features(x: &[f64]) -> DVector<f64> {
    let mut f = DVector::zeros(x.len() + 1);
    f[0] = 1.0;
    for (j, v) in x.iter().enumerate() {
        f[j + 1] = *v;
    }
    f
}

/// Exact minimizer of (1/n)·Σ_{i: a_i = arm}(y_i − θᵀx̃_i)² + (λ'/2)·‖θ‖².
pub fn fit_ridge_arm(d: &Dataset, arm: bool, reg: f64) -> Result<DVector<f64>> {
    if reg <= 0.0 {
        return Err(Error::Argument(
            "ridge regularization must be positive under output perturbation \
             (sensitivity is unbounded at zero)"
                .into(),
        ));
    }
    let p = d.dim() + 1;
    let n = d.n() as f64;
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut count = 0usize;
    for s in &d.samples {
        if s.a != arm {
            continue;
        }
        count += 1;
        let f = features(&s.x);
        xtx.syger(2.0 / n, &f, &f, 1.0);
        xty.axpy(2.0 * s.y / n, &f, 1.0);
    }
    if count == 0 {
        return Err(Error::Fit(format!(
            "treatment arm {} is empty",
            arm as u8
        )));
    }
    for j in 0..p {
        xtx[(j, j)] += reg;
    }
    // Fill the upper triangle left untouched by syger.
    for i in 0..p {
        for j in 0..i {
            xtx[(j, i)] = xtx[(i, j)];
        }
    }
    let chol = Cholesky::new(xtx)
        .ok_or_else(|| Error::Numeric("ridge normal equations not positive definite".into()))?;
    Ok(chol.solve(&xty))
}

/// Gradient-norm bound for the squared loss over the reachable parameter
/// ball, derived from the declared domain box.
pub fn ridge_lipschitz(bounds: &DomainBounds, reg: f64) -> f64 {
    let x_max = bounds.max_feature_norm();
    let y_max = bounds.max_abs_outcome();
    // J(θ*) <= J(0) <= y_max² bounds the minimizer norm.
    let radius = y_max * (2.0 / reg).sqrt();
    2.0 * (radius * x_max + y_max) * x_max
}

/// l2 sensitivity of one arm's exact ridge minimizer under single-sample
/// replacement. The concatenated two-arm parameter vector shares this bound.
pub fn ridge_sensitivity(bounds: &DomainBounds, reg: f64, n: usize) -> f64 {
    2.0 * ridge_lipschitz(bounds, reg) / (n as f64 * reg)
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Minimize (1/n)·Σ ln(1 + exp(−ã_i·θᵀx̃_i)) + (λ'/2)·‖θ‖² with ã = 2a−1 by
/// damped Newton iteration. Strong convexity makes the minimizer unique; we
/// iterate to near machine precision so the closed-form sensitivity applies.
pub fn fit_logistic(d: &Dataset, reg: f64) -> Result<DVector<f64>> {
    if reg <= 0.0 {
        return Err(Error::Argument(
            "logistic regularization must be positive under output perturbation".into(),
        ));
    }
    let p = d.dim() + 1;
    let n = d.n() as f64;
    let feats: Vec<DVector<f64>> = d.samples.iter().map(|s| features(&s.x)).collect();
    let signs: Vec<f64> = d.samples.iter().map(|s| 2.0 * s.a_f64() - 1.0).collect();

    let objective = |theta: &DVector<f64>| -> f64 {
        let mut v = 0.5 * reg * theta.norm_squared();
        for (f, sg) in feats.iter().zip(&signs) {
            let m = -sg * theta.dot(f);
            // ln(1+e^m), stable for large |m|
            v += if m > 30.0 { m } else { m.exp().ln_1p() } / n;
        }
        v
    };

    let mut theta = DVector::<f64>::zeros(p);
    for _ in 0..100 {
        let mut grad = theta.scale(reg);
        let mut hess = DMatrix::<f64>::identity(p, p) * reg;
        for (f, sg) in feats.iter().zip(&signs) {
            let s = theta.dot(f);
            let p1 = sigmoid(s);
            grad.axpy((p1 - 0.5 * (sg + 1.0)) / n, f, 1.0);
            hess.syger(p1 * (1.0 - p1) / n, f, f, 1.0);
        }
        for i in 0..p {
            for j in 0..i {
                hess[(j, i)] = hess[(i, j)];
            }
        }
        let gnorm = grad.norm();
        if gnorm <= 1e-12 {
            break;
        }
        let chol = Cholesky::new(hess)
            .ok_or_else(|| Error::Numeric("logistic Hessian not positive definite".into()))?;
        let step = chol.solve(&grad);
        let base = objective(&theta);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &theta - step.scale(t);
            if objective(&cand) <= base - 1e-4 * t * grad.dot(&step) {
                theta = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(theta)
}

/// l2 sensitivity of the exact logistic minimizer: the per-sample loss is
/// globally Lipschitz with constant max‖x̃‖.
pub fn logistic_sensitivity(bounds: &DomainBounds, reg: f64, n: usize) -> f64 {
    2.0 * bounds.max_feature_norm() / (n as f64 * reg)
}

/// Evaluate θᵀ[1,x].
pub fn linear_predict(theta: &[f64], x: &[f64]) -> f64 {
    theta[0]
        + theta[1..]
            .iter()
            .zip(x)
            .map(|(t, v)| t * v)
            .sum::<f64>()
}

/// Exact range of θᵀ[1,x] over the covariate box.
pub fn linear_range(theta: &[f64], bounds: &DomainBounds) -> (f64, f64) {
    let mut lo = theta[0];
    let mut hi = theta[0];
    for (t, &(a, b)) in theta[1..].iter().zip(&bounds.covariates) {
        let (u, v) = (t * a, t * b);
        lo += u.min(v);
        hi += u.max(v);
    }
    (lo, hi)
}

pub fn sigmoid_pub(s: f64) -> f64 {
    sigmoid(s)
}
