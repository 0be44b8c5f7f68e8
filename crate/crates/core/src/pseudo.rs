//! Neyman-orthogonal weights ρ and pseudo-outcomes φ for the R- and
//! DR-learners, built from fitted (or oracle) nuisances.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::nuisance::{oracle::OracleNuisance, NuisancePair};

/// Anything that can answer μ(x, a) and π(x) queries. The propensity is
/// trusted to land inside (0, 1); clipping is enforced upstream.
pub trait Nuisance {
    fn mu(&self, x: &[f64], a: bool) -> f64;
    fn pi(&self, x: &[f64]) -> f64;
}

impl Nuisance for NuisancePair {
    fn mu(&self, x: &[f64], a: bool) -> f64 {
        NuisancePair::mu(self, x, a)
    }
    fn pi(&self, x: &[f64]) -> f64 {
        NuisancePair::pi(self, x)
    }
}

impl Nuisance for OracleNuisance {
    fn mu(&self, x: &[f64], a: bool) -> f64 {
        OracleNuisance::mu(self, x, a)
    }
    fn pi(&self, x: &[f64]) -> f64 {
        OracleNuisance::pi(self, x)
    }
}

/// The supported weighted orthogonal learners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    R,
    Dr,
}

impl LearnerKind {
    /// Weight function λ(π).
    pub fn lambda(&self, pi: f64) -> f64 {
        match self {
            LearnerKind::R => pi * (1.0 - pi),
            LearnerKind::Dr => 1.0,
        }
    }

    /// Derivative λ'(π).
    pub fn lambda_prime(&self, pi: f64) -> f64 {
        match self {
            LearnerKind::R => 1.0 - 2.0 * pi,
            LearnerKind::Dr => 0.0,
        }
    }

    /// sup of ρ over {0,1} × [κ, 1−κ]: (1−κ)² for R, 1 for DR. Both are ≤ 1.
    pub fn sup_rho(&self, kappa: f64) -> f64 {
        match self {
            LearnerKind::R => (1.0 - kappa).powi(2),
            LearnerKind::Dr => 1.0,
        }
    }
}

/// One stage-2 training row: covariates, weight and pseudo-outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedTarget {
    pub x: Vec<f64>,
    pub rho: f64,
    pub phi: f64,
}

fn check_pi(pi: f64) -> Result<()> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::Argument(format!(
            "propensity must lie strictly inside (0,1); got {pi}; clip upstream"
        )));
    }
    Ok(())
}

/// ρ(a, π) = (a − π)·λ'(π) + λ(π). Algebraically (a − π)² for the R-learner
/// and 1 for the DR-learner.
pub fn rho_weight(kind: LearnerKind, a: bool, pi: f64) -> Result<f64> {
    check_pi(pi)?;
    let a = a as u8 as f64;
    Ok((a - pi) * kind.lambda_prime(pi) + kind.lambda(pi))
}

/// φ(z, η, λ(π)) = [λ(π)/ρ(a,π)]·[(a−π)/(π(1−π))]·(y − μ(x,a)) + μ(x,1) − μ(x,0).
///
/// The R-form is computed through its reduced expression
/// (y − μ)/(a − π) + Δμ, which avoids a 0/0 pattern when λ and ρ both vanish
/// numerically; the generic quotient is kept for the DR-learner (and any
/// future weight function).
pub fn pseudo_outcome(kind: LearnerKind, z: &Sample, eta: &impl Nuisance) -> Result<f64> {
    let pi = eta.pi(&z.x);
    check_pi(pi)?;
    let a = z.a_f64();
    let residual = z.y - eta.mu(&z.x, z.a);
    let delta_mu = eta.mu(&z.x, true) - eta.mu(&z.x, false);
    match kind {
        LearnerKind::R => Ok(residual / (a - pi) + delta_mu),
        _ => {
            let rho = rho_weight(kind, z.a, pi)?;
            let factor = kind.lambda(pi) / rho * (a - pi) / (pi * (1.0 - pi));
            Ok(factor * residual + delta_mu)
        }
    }
}

/// One weighted target per sample, order preserved.
pub fn build_targets(
    d: &Dataset,
    eta: &impl Nuisance,
    kind: LearnerKind,
) -> Result<Vec<WeightedTarget>> {
    if d.samples.is_empty() {
        return Err(Error::Dataset("cannot build targets from no samples".into()));
    }
    d.samples
        .iter()
        .map(|z| {
            Ok(WeightedTarget {
                x: z.x.clone(),
                rho: rho_weight(kind, z.a, eta.pi(&z.x))?,
                phi: pseudo_outcome(kind, z, eta)?,
            })
        })
        .collect()
}
