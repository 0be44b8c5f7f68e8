//! Stage-1 nuisance estimation: the outcome function μ(x, a) and the clipped
//! propensity score π(x), each released under its own share of the privacy
//! budget, plus non-private baselines.

pub mod linear;
pub mod mlp;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DomainBounds};
use crate::error::{Error, Result};
use crate::privacy::{gaussian_sigma, PrivacyBudget};

use linear::{
    fit_logistic, fit_ridge_arm, linear_predict, linear_range, logistic_sensitivity,
    ridge_lipschitz, ridge_sensitivity, sigmoid_pub,
};
use mlp::{mlp_abs_bound, train_dp, DpSgdMeta, MlpHyper, MlpNet, MlpTask};

/// Privatization method for stage-1 models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// Gaussian noise on the exact minimizer of an L2-regularized convex
    /// model (ridge outcome per arm, logistic propensity).
    ParamOutputPerturbation,
    /// Per-sample gradient clipping plus per-step Gaussian noise on a
    /// one-hidden-layer network, advanced-composition accounting.
    DpGradientDescent,
    /// No noise; baseline for comparisons.
    NonPrivate,
}

/// Hyperparameters shared by the stage-1 fitters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceHyper {
    /// λ' of the ridge outcome objective.
    pub outcome_reg: f64,
    /// λ' of the logistic propensity objective.
    pub propensity_reg: f64,
    pub mlp: MlpHyper,
    /// Seed for noise draws and network initialization.
    pub seed: u64,
}

impl Default for NuisanceHyper {
    fn default() -> Self {
        NuisanceHyper {
            outcome_reg: 1.0,
            propensity_reg: 0.25,
            mlp: MlpHyper::default(),
            seed: 0,
        }
    }
}

/// Privatized outcome model μ̂(x, a).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeModel {
    /// One ridge parameter vector per treatment arm over features [1, x].
    RidgePerArm { theta0: Vec<f64>, theta1: Vec<f64> },
    /// A single network over the input [x.., a].
    Mlp { net: MlpNet },
}

impl OutcomeModel {
    pub fn predict(&self, x: &[f64], a: bool) -> f64 {
        match self {
            OutcomeModel::RidgePerArm { theta0, theta1 } => {
                let theta = if a { theta1 } else { theta0 };
                linear_predict(theta, x)
            }
            OutcomeModel::Mlp { net } => {
                let mut input = x.to_vec();
                input.push(a as u8 as f64);
                net.forward(&input)
            }
        }
    }

    /// Conservative bound on |μ̂| over the covariate box and both arms.
    pub fn abs_bound(&self, bounds: &DomainBounds) -> f64 {
        match self {
            OutcomeModel::RidgePerArm { theta0, theta1 } => {
                let (l0, h0) = linear_range(theta0, bounds);
                let (l1, h1) = linear_range(theta1, bounds);
                l0.abs().max(h0.abs()).max(l1.abs()).max(h1.abs())
            }
            OutcomeModel::Mlp { net } => mlp_abs_bound(net, bounds, true),
        }
    }
}

/// Privatized propensity model; outputs clipped to [κ, 1−κ].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropensityModel {
    Logistic { theta: Vec<f64> },
    Mlp { net: MlpNet },
}

impl PropensityModel {
    fn raw(&self, x: &[f64]) -> f64 {
        match self {
            PropensityModel::Logistic { theta } => sigmoid_pub(linear_predict(theta, x)),
            PropensityModel::Mlp { net } => sigmoid_pub(net.forward(x)),
        }
    }

    pub fn predict_clipped(&self, x: &[f64], kappa: f64) -> f64 {
        self.raw(x).clamp(kappa, 1.0 - kappa)
    }

    /// Bounds on the clipped propensity over the covariate box.
    pub fn range(&self, bounds: &DomainBounds, kappa: f64) -> (f64, f64) {
        let (lo, hi) = match self {
            PropensityModel::Logistic { theta } => {
                let (s_lo, s_hi) = linear_range(theta, bounds);
                (sigmoid_pub(s_lo), sigmoid_pub(s_hi))
            }
            PropensityModel::Mlp { net } => {
                let (s_lo, s_hi) = net.output_range(&bounds.covariates);
                (sigmoid_pub(s_lo), sigmoid_pub(s_hi))
            }
        };
        (lo.clamp(kappa, 1.0 - kappa), hi.clamp(kappa, 1.0 - kappa))
    }
}

/// Record of how a nuisance pair was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub method: FitMethod,
    pub outcome_reg: f64,
    pub propensity_reg: f64,
    pub outcome_sensitivity: f64,
    pub propensity_sensitivity: f64,
    pub outcome_lipschitz: f64,
    pub outcome_noise_sigma: f64,
    pub propensity_noise_sigma: f64,
    pub outcome_budget: PrivacyBudget,
    pub propensity_budget: PrivacyBudget,
    pub dp_sgd: Option<(DpSgdMeta, DpSgdMeta)>,
    pub seed: u64,
}

/// The fitted stage-1 pair η̂ = (μ̂, π̂) with its overlap clip constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisancePair {
    pub mu: OutcomeModel,
    pub pi: PropensityModel,
    pub kappa: f64,
    pub fit_meta: FitMeta,
}

impl NuisancePair {
    pub fn mu(&self, x: &[f64], a: bool) -> f64 {
        self.mu.predict(x, a)
    }

    /// Propensity prediction, always within [κ, 1−κ].
    pub fn pi(&self, x: &[f64]) -> f64 {
        self.pi.predict_clipped(x, self.kappa)
    }

    pub fn cate_plugin(&self, x: &[f64]) -> f64 {
        self.mu(x, true) - self.mu(x, false)
    }
}

fn validate_kappa(kappa: f64) -> Result<()> {
    if !(kappa > 0.0 && kappa < 0.5) {
        return Err(Error::Argument(format!(
            "kappa must lie in (0, 0.5), got {kappa}"
        )));
    }
    Ok(())
}

fn check_arms(d: &Dataset) -> Result<()> {
    if d.samples.is_empty() {
        return Err(Error::Dataset("empty nuisance training set".into()));
    }
    let treated = d.samples.iter().filter(|s| s.a).count();
    if treated == 0 || treated == d.n() {
        return Err(Error::Fit(
            "both treatment arms must be present in the nuisance split".into(),
        ));
    }
    Ok(())
}

fn noise_vec(sigma: f64, len: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let normal = StandardNormal;
    (0..len)
        .map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&normal, rng))
        .collect()
}

/// Fit the outcome model under (budget.ε, budget.δ)-DP. Returns the model,
/// its noise scale, its sensitivity and (for gradient descent) the step
/// accounting record.
pub fn fit_outcome_private(
    d_tilde: &Dataset,
    budget: &PrivacyBudget,
    method: FitMethod,
    hyper: &NuisanceHyper,
) -> Result<(OutcomeModel, f64, f64, Option<DpSgdMeta>)> {
    budget.validate()?;
    check_arms(d_tilde)?;
    let bounds = d_tilde.bounds();
    match method {
        FitMethod::ParamOutputPerturbation | FitMethod::NonPrivate => {
            let reg = hyper.outcome_reg;
            let t0 = fit_ridge_arm(d_tilde, false, reg)?;
            let t1 = fit_ridge_arm(d_tilde, true, reg)?;
            let sensitivity = ridge_sensitivity(&bounds, reg, d_tilde.n());
            let sigma = if method == FitMethod::NonPrivate {
                0.0
            } else {
                gaussian_sigma(budget, sensitivity)?
            };
            // One Gaussian mechanism on the concatenated (θ0, θ1): a single
            // replacement moves the pair by at most the per-arm bound.
            let mut rng = ChaCha12Rng::seed_from_u64(hyper.seed.wrapping_add(0x0u64));
            let p = t0.len();
            let noise = noise_vec(sigma, 2 * p, &mut rng);
            let add = |t: &DVector<f64>, off: usize| -> Vec<f64> {
                t.iter()
                    .enumerate()
                    .map(|(j, v)| v + noise[off + j])
                    .collect()
            };
            Ok((
                OutcomeModel::RidgePerArm {
                    theta0: add(&t0, 0),
                    theta1: add(&t1, p),
                },
                sigma,
                sensitivity,
                None,
            ))
        }
        FitMethod::DpGradientDescent => {
            let inputs: Vec<Vec<f64>> = d_tilde
                .samples
                .iter()
                .map(|s| {
                    let mut v = s.x.clone();
                    v.push(s.a_f64());
                    v
                })
                .collect();
            let targets: Vec<f64> = d_tilde.samples.iter().map(|s| s.y).collect();
            let (net, meta) = train_dp(
                &inputs,
                &targets,
                MlpTask::Regression,
                budget,
                &hyper.mlp,
                hyper.seed.wrapping_add(0x10u64),
            )?;
            let sigma = meta.per_step_sigma;
            Ok((OutcomeModel::Mlp { net }, sigma, 0.0, Some(meta)))
        }
    }
}

/// Fit the propensity model under (budget.ε, budget.δ)-DP with post-hoc
/// clipping to [κ, 1−κ] (post-processing, no extra budget).
pub fn fit_propensity_private(
    d_tilde: &Dataset,
    budget: &PrivacyBudget,
    kappa: f64,
    method: FitMethod,
    hyper: &NuisanceHyper,
) -> Result<(PropensityModel, f64, f64, Option<DpSgdMeta>)> {
    budget.validate()?;
    validate_kappa(kappa)?;
    check_arms(d_tilde)?;
    let bounds = d_tilde.bounds();
    match method {
        FitMethod::ParamOutputPerturbation | FitMethod::NonPrivate => {
            let reg = hyper.propensity_reg;
            let theta = fit_logistic(d_tilde, reg)?;
            let sensitivity = logistic_sensitivity(&bounds, reg, d_tilde.n());
            let sigma = if method == FitMethod::NonPrivate {
                0.0
            } else {
                gaussian_sigma(budget, sensitivity)?
            };
            let mut rng = ChaCha12Rng::seed_from_u64(hyper.seed.wrapping_add(0x1u64));
            let noise = noise_vec(sigma, theta.len(), &mut rng);
            let theta: Vec<f64> = theta
                .iter()
                .enumerate()
                .map(|(j, v)| v + noise[j])
                .collect();
            Ok((PropensityModel::Logistic { theta }, sigma, sensitivity, None))
        }
        FitMethod::DpGradientDescent => {
            let inputs: Vec<Vec<f64>> = d_tilde.samples.iter().map(|s| s.x.clone()).collect();
            let targets: Vec<f64> = d_tilde.samples.iter().map(|s| s.a_f64()).collect();
            let (net, meta) = train_dp(
                &inputs,
                &targets,
                MlpTask::BinaryLogit,
                budget,
                &hyper.mlp,
                hyper.seed.wrapping_add(0x11u64),
            )?;
            let sigma = meta.per_step_sigma;
            Ok((PropensityModel::Mlp { net }, sigma, 0.0, Some(meta)))
        }
    }
}

/// Fit both nuisances with their per-model budgets and assemble the pair.
pub fn fit_nuisance_pair(
    d_tilde: &Dataset,
    mu_budget: &PrivacyBudget,
    pi_budget: &PrivacyBudget,
    kappa: f64,
    method: FitMethod,
    hyper: &NuisanceHyper,
) -> Result<NuisancePair> {
    let (mu, mu_sigma, mu_sens, mu_meta) = fit_outcome_private(d_tilde, mu_budget, method, hyper)?;
    let (pi, pi_sigma, pi_sens, pi_meta) =
        fit_propensity_private(d_tilde, pi_budget, kappa, method, hyper)?;
    // The closed-form loss Lipschitz bound only exists for the convex path.
    let lipschitz = match method {
        FitMethod::DpGradientDescent => 0.0,
        _ => ridge_lipschitz(&d_tilde.bounds(), hyper.outcome_reg),
    };
    Ok(NuisancePair {
        mu,
        pi,
        kappa,
        fit_meta: FitMeta {
            method,
            outcome_reg: hyper.outcome_reg,
            propensity_reg: hyper.propensity_reg,
            outcome_sensitivity: mu_sens,
            propensity_sensitivity: pi_sens,
            outcome_lipschitz: lipschitz,
            outcome_noise_sigma: mu_sigma,
            propensity_noise_sigma: pi_sigma,
            outcome_budget: *mu_budget,
            propensity_budget: *pi_budget,
            dp_sgd: mu_meta.zip(pi_meta),
            seed: hyper.seed,
        },
    })
}

/// Noise-free baseline with the same objectives and hyperparameters.
pub fn fit_nuisances_nonprivate(
    d_tilde: &Dataset,
    kappa: f64,
    hyper: &NuisanceHyper,
) -> Result<NuisancePair> {
    // δ is irrelevant without noise; any valid placeholder works.
    let placeholder = PrivacyBudget::new(f64::INFINITY, 0.5)?;
    fit_nuisance_pair(
        d_tilde,
        &placeholder,
        &placeholder,
        kappa,
        FitMethod::NonPrivate,
        hyper,
    )
}

/// Oracle nuisances for the synthetic generator: the exact conditional mean
/// and treatment probability implied by the data-generating process.
pub mod oracle {
    use crate::data::TrueCate;

    /// Analytic nuisances of the synthetic process: π(x) = (xᵀβ + 1)/2
    /// clamped to [0,1], μ(x,a) = θ(x)·a + xᵀγ.
    #[derive(Debug, Clone)]
    pub struct OracleNuisance {
        pub beta: Vec<f64>,
        pub gamma: Vec<f64>,
        pub cate: TrueCate,
        pub kappa: f64,
    }

    impl OracleNuisance {
        pub fn mu(&self, x: &[f64], a: bool) -> f64 {
            let lin: f64 = x.iter().zip(&self.gamma).map(|(v, g)| v * g).sum();
            self.cate.eval(x) * (a as u8 as f64) + lin
        }

        pub fn pi(&self, x: &[f64]) -> f64 {
            let score: f64 = x.iter().zip(&self.beta).map(|(v, b)| v * b).sum();
            // P(η <= score) for η ~ U[-1,1]
            ((score + 1.0) / 2.0).clamp(self.kappa, 1.0 - self.kappa)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_disjoint, EffectKind, Sample, SyntheticConfig};
    use approx::assert_relative_eq;

    fn default_hyper(seed: u64) -> NuisanceHyper {
        NuisanceHyper {
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn constant_outcome_recovered_at_huge_epsilon() {
        let samples: Vec<Sample> = (0..200)
            .map(|i| Sample {
                x: vec![(i % 10) as f64 / 10.0],
                a: i % 2 == 0,
                y: 3.0,
            })
            .collect();
        let d = Dataset::new(samples, vec![(0.0, 1.0)], (2.0, 4.0)).unwrap();
        let budget = PrivacyBudget::new(1e8, 0.05).unwrap();
        let hyper = NuisanceHyper {
            outcome_reg: 1e-3,
            ..default_hyper(0)
        };
        let (model, _, _, _) =
            fit_outcome_private(&d, &budget, FitMethod::ParamOutputPerturbation, &hyper).unwrap();
        for a in [false, true] {
            for x in [0.1, 0.5, 0.9] {
                assert_relative_eq!(model.predict(&[x], a), 3.0, epsilon = 0.05);
            }
        }
    }

    #[test]
    fn kappa_validation() {
        let cfg = SyntheticConfig::new(2, EffectKind::Dataset1, 100, 0);
        let (d, _) = generate_synthetic(&cfg).unwrap();
        let budget = PrivacyBudget::new(1.0, 0.05).unwrap();
        for bad in [0.0, 0.5, 0.7, -0.1] {
            assert!(matches!(
                fit_propensity_private(
                    &d,
                    &budget,
                    bad,
                    FitMethod::ParamOutputPerturbation,
                    &default_hyper(0)
                ),
                Err(Error::Argument(_))
            ));
        }
    }

    #[test]
    fn propensity_always_within_clip_range() {
        let cfg = SyntheticConfig::new(2, EffectKind::Dataset1, 400, 5);
        let (d, _) = generate_synthetic(&cfg).unwrap();
        // Tiny ε produces wild parameters; clipping must still hold.
        let budget = PrivacyBudget::new(0.01, 0.05).unwrap();
        let kappa = 0.05;
        let (model, _, _, _) = fit_propensity_private(
            &d,
            &budget,
            kappa,
            FitMethod::ParamOutputPerturbation,
            &default_hyper(3),
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        use rand::Rng;
        for _ in 0..500 {
            let x = vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let p = model.predict_clipped(&x, kappa);
            assert!((kappa..=1.0 - kappa).contains(&p), "clip violated: {p}");
        }
    }

    #[test]
    fn infinite_epsilon_matches_nonprivate_fit() {
        let cfg = SyntheticConfig::new(2, EffectKind::Dataset1, 600, 8);
        let (d, _) = generate_synthetic(&cfg).unwrap();
        let hyper = default_hyper(4);
        let inf = PrivacyBudget::new(f64::INFINITY, 0.05).unwrap();
        let pair_inf =
            fit_nuisance_pair(&d, &inf, &inf, 0.05, FitMethod::ParamOutputPerturbation, &hyper)
                .unwrap();
        let pair_np = fit_nuisances_nonprivate(&d, 0.05, &hyper).unwrap();
        for x in [[0.2, 0.8], [0.5, 0.5], [0.9, 0.1]] {
            assert_relative_eq!(pair_inf.mu(&x, true), pair_np.mu(&x, true), epsilon = 1e-12);
            assert_relative_eq!(pair_inf.pi(&x), pair_np.pi(&x), epsilon = 1e-12);
        }
    }

    #[test]
    fn noise_degrades_outcome_fit_on_average() {
        // Paired comparison over seeds: held-out RMSE of the private fit
        // exceeds the non-private one.
        let mut worse = 0usize;
        let seeds = 10;
        let mut private_total = 0.0;
        let mut baseline_total = 0.0;
        for seed in 0..seeds {
            let cfg = SyntheticConfig::new(2, EffectKind::Dataset1, 1200, 100 + seed);
            let (d, _) = generate_synthetic(&cfg).unwrap();
            let (train, test) = split_disjoint(&d, 0.8, seed).unwrap();
            let hyper = default_hyper(seed);
            let budget = PrivacyBudget::new(0.5, 0.025).unwrap();
            let (private, _, _, _) =
                fit_outcome_private(&train, &budget, FitMethod::ParamOutputPerturbation, &hyper)
                    .unwrap();
            let baseline = fit_nuisances_nonprivate(&train, 0.05, &hyper).unwrap();
            let rmse = |m: &dyn Fn(&[f64], bool) -> f64| -> f64 {
                (test.samples
                    .iter()
                    .map(|s| (m(&s.x, s.a) - s.y).powi(2))
                    .sum::<f64>()
                    / test.n() as f64)
                    .sqrt()
            };
            let rp = rmse(&|x, a| private.predict(x, a));
            let rb = rmse(&|x, a| baseline.mu(x, a));
            private_total += rp;
            baseline_total += rb;
            if rp > rb {
                worse += 1;
            }
        }
        assert!(
            private_total > baseline_total,
            "noise should hurt on average: private {private_total} vs baseline {baseline_total}"
        );
        assert!(worse >= 7, "private fit beat baseline in {} of {seeds} seeds", seeds as usize - worse);
    }

    #[test]
    fn propensity_calibration_degrades_with_noise() {
        let mut private_total = 0.0;
        let mut baseline_total = 0.0;
        for seed in 0..10 {
            let cfg = SyntheticConfig::new(2, EffectKind::Dataset1, 1200, 300 + seed);
            let (d, _) = generate_synthetic(&cfg).unwrap();
            let (train, test) = split_disjoint(&d, 0.8, seed).unwrap();
            let hyper = default_hyper(seed);
            let budget = PrivacyBudget::new(0.5, 0.025).unwrap();
            let kappa = 0.05;
            let (private, _, _, _) = fit_propensity_private(
                &train,
                &budget,
                kappa,
                FitMethod::ParamOutputPerturbation,
                &hyper,
            )
            .unwrap();
            let baseline = fit_nuisances_nonprivate(&train, kappa, &hyper).unwrap();
            // Binned calibration error against the empirical treated rate.
            let calib = |predict: &dyn Fn(&[f64]) -> f64| -> f64 {
                let bins = 6;
                let mut err = 0.0;
                let mut used = 0;
                for b in 0..bins {
                    let lo = b as f64 / bins as f64;
                    let hi = (b + 1) as f64 / bins as f64;
                    let in_bin: Vec<_> = test
                        .samples
                        .iter()
                        .filter(|s| s.x[0] >= lo && s.x[0] < hi)
                        .collect();
                    if in_bin.len() < 10 {
                        continue;
                    }
                    let emp =
                        in_bin.iter().filter(|s| s.a).count() as f64 / in_bin.len() as f64;
                    let avg = in_bin.iter().map(|s| predict(&s.x)).sum::<f64>()
                        / in_bin.len() as f64;
                    err += (avg - emp).abs();
                    used += 1;
                }
                err / used.max(1) as f64
            };
            private_total += calib(&|x| private.predict_clipped(x, kappa));
            baseline_total += calib(&|x| baseline.pi(x));
        }
        assert!(
            private_total > baseline_total,
            "private calibration {private_total} should exceed baseline {baseline_total}"
        );
    }

    #[test]
    fn propensity_ranks_better_than_chance() {
        // β ~ U[0, 0.3] gives true propensities inside [0.5, 0.8]: the
        // signal is weak by construction, so the margin over 0.5 is modest.
        let cfg = SyntheticConfig::new(2, EffectKind::Dataset1, 8000, 17);
        let (d, _) = generate_synthetic(&cfg).unwrap();
        let (train, test) = split_disjoint(&d, 0.5, 2).unwrap();
        let pair = fit_nuisances_nonprivate(&train, 0.05, &default_hyper(0)).unwrap();
        // Rank-based AUC
        let mut scored: Vec<(f64, bool)> =
            test.samples.iter().map(|s| (pair.pi(&s.x), s.a)).collect();
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let n_pos = scored.iter().filter(|(_, a)| *a).count() as f64;
        let n_neg = scored.len() as f64 - n_pos;
        let mut rank_sum = 0.0;
        for (rank, (_, a)) in scored.iter().enumerate() {
            if *a {
                rank_sum += (rank + 1) as f64;
            }
        }
        let auc = (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
        assert!(auc > 0.52, "AUC {auc}");
    }

    #[test]
    fn heldout_error_monotone_in_epsilon() {
        // Common random numbers across ε: the same standard-normal draw is
        // scaled by each σ(ε), so the comparison isolates the noise scale.
        let epsilons = [0.1, 1.0, 10.0, f64::INFINITY];
        let mut means = vec![0.0; epsilons.len()];
        let seeds = 12;
        for seed in 0..seeds {
            let cfg = SyntheticConfig::new(2, EffectKind::Dataset1, 900, 700 + seed);
            let (d, _) = generate_synthetic(&cfg).unwrap();
            let (train, test) = split_disjoint(&d, 0.8, seed).unwrap();
            let hyper = default_hyper(seed);
            for (k, &eps) in epsilons.iter().enumerate() {
                let budget = PrivacyBudget::new(eps, 0.025).unwrap();
                let (model, _, _, _) = fit_outcome_private(
                    &train,
                    &budget,
                    FitMethod::ParamOutputPerturbation,
                    &hyper,
                )
                .unwrap();
                let rmse = (test
                    .samples
                    .iter()
                    .map(|s| (model.predict(&s.x, s.a) - s.y).powi(2))
                    .sum::<f64>()
                    / test.n() as f64)
                    .sqrt();
                means[k] += rmse / seeds as f64;
            }
        }
        for w in means.windows(2) {
            assert!(
                w[0] >= w[1] - 1e-9,
                "mean heldout error must be non-increasing in ε: {means:?}"
            );
        }
    }

    #[test]
    fn recorded_noise_scale_matches_gaussian_mechanism() {
        // σ = √(2·ln(1.25/δ))·Δ₂/ε applied to the parameter vector, with the
        // audited closed-form sensitivity.
        let cfg = SyntheticConfig::new(2, EffectKind::Dataset1, 500, 21);
        let (d, _) = generate_synthetic(&cfg).unwrap();
        let hyper = default_hyper(3);
        let budget = PrivacyBudget::new(0.7, 0.03).unwrap();
        let pair = fit_nuisance_pair(
            &d,
            &budget,
            &budget,
            0.05,
            FitMethod::ParamOutputPerturbation,
            &hyper,
        )
        .unwrap();
        let meta = &pair.fit_meta;
        let expect_mu = (2.0 * (1.25f64 / 0.03).ln()).sqrt() * meta.outcome_sensitivity / 0.7;
        let expect_pi =
            (2.0 * (1.25f64 / 0.03).ln()).sqrt() * meta.propensity_sensitivity / 0.7;
        assert_relative_eq!(meta.outcome_noise_sigma, expect_mu, epsilon = 1e-12);
        assert_relative_eq!(meta.propensity_noise_sigma, expect_pi, epsilon = 1e-12);
        assert_relative_eq!(
            meta.outcome_sensitivity,
            2.0 * meta.outcome_lipschitz / (d.n() as f64 * hyper.outcome_reg),
            epsilon = 1e-12
        );
    }

    #[test]
    fn dp_gradient_descent_trains_and_accounts() {
        let cfg = SyntheticConfig::new(2, EffectKind::Constant(2.0), 500, 3);
        let (d, _) = generate_synthetic(&cfg).unwrap();
        let budget = PrivacyBudget::new(2.0, 0.05).unwrap();
        let hyper = NuisanceHyper {
            mlp: MlpHyper {
                steps: 15,
                ..Default::default()
            },
            ..default_hyper(9)
        };
        let (model, sigma, _, meta) =
            fit_outcome_private(&d, &budget, FitMethod::DpGradientDescent, &hyper).unwrap();
        assert!(sigma > 0.0);
        let meta = meta.unwrap();
        assert!(meta.composed.epsilon <= 2.0 + 1e-9);
        let v = model.predict(&[0.5, 0.5], true);
        assert!(v.is_finite());
    }

    #[test]
    fn oracle_nuisance_matches_generator() {
        let cfg = SyntheticConfig::new(2, EffectKind::Dataset1, 10, 5);
        let (_, cate) = generate_synthetic(&cfg).unwrap();
        let oracle = oracle::OracleNuisance {
            beta: vec![0.1, 0.2],
            gamma: vec![0.5, 0.5],
            cate,
            kappa: 0.01,
        };
        let x = [0.5, 0.5];
        assert_relative_eq!(
            oracle.mu(&x, true) - oracle.mu(&x, false),
            1.0f64.exp() + 3.0 * 2.0f64.sin(),
            epsilon = 1e-12
        );
        assert_relative_eq!(oracle.pi(&x), (0.15 + 1.0) / 2.0, epsilon = 1e-12);
    }
}
