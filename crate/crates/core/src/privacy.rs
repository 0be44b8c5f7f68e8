//! Privacy budgets, the Gaussian mechanism noise formula, and sequential
//! composition accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An (ε, δ) privacy budget. ε may be infinite, which every mechanism in this
/// crate maps to zero noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    #[serde(with = "eps_serde")]
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        let b = PrivacyBudget { epsilon, delta };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Argument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Argument(format!(
                "delta must lie in (0,1), got {}",
                self.delta
            )));
        }
        Ok(())
    }

    pub fn is_non_private(&self) -> bool {
        self.epsilon.is_infinite()
    }
}

/// How the total budget is allocated across the pipeline: each stage-1
/// nuisance model receives (ε/2, δ/2) so the two fits compose to (ε, δ) on
/// the nuisance split, and the second stage spends the full (ε, δ) on the
/// disjoint estimation split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub total: PrivacyBudget,
    pub stage1_mu: PrivacyBudget,
    pub stage1_pi: PrivacyBudget,
    pub stage2: PrivacyBudget,
}

impl BudgetPlan {
    pub fn from_total(total: PrivacyBudget) -> Result<Self> {
        total.validate()?;
        let half = PrivacyBudget {
            epsilon: total.epsilon / 2.0,
            delta: total.delta / 2.0,
        };
        Ok(BudgetPlan {
            total,
            stage1_mu: half,
            stage1_pi: half,
            stage2: total,
        })
    }
}

/// Standard deviation of the Gaussian mechanism for a given l2-sensitivity:
/// σ = √(2 ln(1.25/δ)) · Δ₂ / ε. Zero when ε is infinite.
pub fn gaussian_sigma(budget: &PrivacyBudget, l2_sensitivity: f64) -> Result<f64> {
    budget.validate()?;
    if l2_sensitivity < 0.0 {
        return Err(Error::Argument("sensitivity must be nonnegative".into()));
    }
    if budget.is_non_private() {
        return Ok(0.0);
    }
    Ok((2.0 * (1.25 / budget.delta).ln()).sqrt() * l2_sensitivity / budget.epsilon)
}

/// Total budget consumed by `steps` adaptive applications of a mechanism that
/// is (ε_step, δ_step)-private per step.
///
/// With `delta_slack > 0` the advanced composition bound applies:
///   ε_total = √(2·k·ln(1/δ')) · ε + k·ε·(e^ε − 1),   δ_total = k·δ + δ'.
/// With `delta_slack <= 0` (or a single step) this falls back to basic
/// composition: ε_total = k·ε, δ_total = k·δ.
pub fn dp_composition_budget(
    per_step: &PrivacyBudget,
    steps: usize,
    delta_slack: f64,
) -> Result<PrivacyBudget> {
    per_step.validate()?;
    if steps == 0 {
        return Err(Error::Argument("steps must be >= 1".into()));
    }
    let k = steps as f64;
    if delta_slack <= 0.0 || steps == 1 {
        return Ok(PrivacyBudget {
            epsilon: k * per_step.epsilon,
            delta: k * per_step.delta,
        });
    }
    let eps = per_step.epsilon;
    let epsilon = (2.0 * k * (1.0 / delta_slack).ln()).sqrt() * eps + k * eps * (eps.exp() - 1.0);
    Ok(PrivacyBudget {
        epsilon,
        delta: k * per_step.delta + delta_slack,
    })
}

/// Invert [`dp_composition_budget`] in ε: find the per-step ε such that
/// `steps` compositions with the given per-step δ and slack stay within
/// `total_epsilon`. Used by the gradient-perturbation trainer.
pub fn per_step_epsilon(
    total_epsilon: f64,
    steps: usize,
    per_step_delta: f64,
    delta_slack: f64,
) -> Result<f64> {
    if !(total_epsilon > 0.0) || steps == 0 {
        return Err(Error::Argument(
            "total epsilon must be positive and steps >= 1".into(),
        ));
    }
    let total = |eps: f64| -> f64 {
        let b = PrivacyBudget {
            epsilon: eps,
            delta: per_step_delta,
        };
        dp_composition_budget(&b, steps, delta_slack)
            .map(|t| t.epsilon)
            .unwrap_or(f64::INFINITY)
    };
    let mut lo = 0.0_f64;
    let mut hi = total_epsilon; // composition never shrinks ε, so the root is below
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) <= total_epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// JSON has no literal for infinity, so ε serializes as either a number or
/// the string "inf".
pub mod eps_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) => match s.trim().to_ascii_lowercase().as_str() {
                "inf" | "infinity" => Ok(f64::INFINITY),
                other => other
                    .parse()
                    .map_err(|_| de::Error::custom(format!("invalid epsilon '{other}'"))),
            },
        }
    }
}
