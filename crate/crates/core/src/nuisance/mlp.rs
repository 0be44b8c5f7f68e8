//! One-hidden-layer perceptron nuisances trained with gradient perturbation:
//! per-sample gradients are clipped, averaged, noised with a per-step Gaussian
//! mechanism, and fed to Adam (a post-processing of the privatized gradient).

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::DomainBounds;
use crate::error::{Error, Result};
use crate::privacy::{dp_composition_budget, gaussian_sigma, per_step_epsilon, PrivacyBudget};

/// A width-`hidden` ReLU network with a scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpNet {
    pub w1: Vec<Vec<f64>>, // hidden × input
    pub b1: Vec<f64>,
    pub w2: Vec<f64>, // 1 × hidden
    pub b2: f64,
}

impl MlpNet {
    pub fn init(input: usize, hidden: usize, rng: &mut ChaCha12Rng) -> Self {
        let scale1 = (2.0 / input as f64).sqrt();
        let scale2 = (2.0 / hidden as f64).sqrt();
        let normal = StandardNormal;
        MlpNet {
            w1: (0..hidden)
                .map(|_| {
                    (0..input)
                        .map(|_| scale1 * <StandardNormal as Distribution<f64>>::sample(&normal, rng))
                        .collect()
                })
                .collect(),
            b1: vec![0.0; hidden],
            w2: (0..hidden)
                .map(|_| scale2 * <StandardNormal as Distribution<f64>>::sample(&normal, rng))
                .collect(),
            b2: 0.0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden();
        let i = self.input_dim();
        h * i + h + h + 1
    }

    pub fn forward(&self, input: &[f64]) -> f64 {
        let mut out = self.b2;
        for (w_row, (b, w_out)) in self.w1.iter().zip(self.b1.iter().zip(&self.w2)) {
            let pre: f64 = w_row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>() + b;
            if pre > 0.0 {
                out += w_out * pre;
            }
        }
        out
    }

    /// Hidden activations and output, for backprop.
    fn forward_full(&self, input: &[f64]) -> (Vec<f64>, f64) {
        let mut acts = Vec::with_capacity(self.hidden());
        let mut out = self.b2;
        for ((w_row, b), w_out) in self.w1.iter().zip(&self.b1).zip(&self.w2) {
            let pre: f64 = w_row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>() + b;
            let act = pre.max(0.0);
            acts.push(act);
            out += w_out * act;
        }
        (acts, out)
    }

    /// Per-sample gradient of the given loss residual derivative dL/dout.
    fn backprop(&self, input: &[f64], acts: &[f64], dout: f64, grad: &mut [f64]) {
        let h = self.hidden();
        let i = self.input_dim();
        // layout: w1 (h·i), b1 (h), w2 (h), b2 (1)
        for (u, ((w_out, act), _)) in self.w2.iter().zip(acts).zip(&self.b1).enumerate() {
            let dact = dout * w_out;
            if *act > 0.0 {
                for (j, v) in input.iter().enumerate() {
                    grad[u * i + j] += dact * v;
                }
                grad[h * i + u] += dact;
            }
        }
        for (u, act) in acts.iter().enumerate() {
            grad[h * i + h + u] += dout * act;
        }
        grad[h * i + 2 * h] += dout;
    }

    fn apply_update(&mut self, update: &[f64]) {
        let h = self.hidden();
        let i = self.input_dim();
        for u in 0..h {
            for j in 0..i {
                self.w1[u][j] += update[u * i + j];
            }
            self.b1[u] += update[h * i + u];
            self.w2[u] += update[h * i + h + u];
        }
        self.b2 += update[h * i + 2 * h];
    }

    /// Conservative output interval over an input box via interval
    /// propagation through the single hidden layer.
    pub fn output_range(&self, input_box: &[(f64, f64)]) -> (f64, f64) {
        let mut lo = self.b2;
        let mut hi = self.b2;
        for ((w_row, b), w_out) in self.w1.iter().zip(&self.b1).zip(&self.w2) {
            let mut p_lo = *b;
            let mut p_hi = *b;
            for (w, &(a, c)) in w_row.iter().zip(input_box) {
                let (u, v) = (w * a, w * c);
                p_lo += u.min(v);
                p_hi += u.max(v);
            }
            let (a_lo, a_hi) = (p_lo.max(0.0), p_hi.max(0.0));
            let (u, v) = (w_out * a_lo, w_out * a_hi);
            lo += u.min(v);
            hi += u.max(v);
        }
        (lo, hi)
    }
}

/// Loss attached to the network output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MlpTask {
    /// Squared loss on the raw output.
    Regression,
    /// Logistic loss on the raw output (label in {0,1}).
    BinaryLogit,
}

/// Hyperparameters of the gradient-perturbation trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpHyper {
    pub width: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
}

impl Default for MlpHyper {
    fn default() -> Self {
        MlpHyper {
            width: 32,
            steps: 60,
            learning_rate: 0.01,
            clip_norm: 1.0,
        }
    }
}

/// Accounting record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpSgdMeta {
    pub steps: usize,
    pub clip_norm: f64,
    pub per_step_epsilon: f64,
    pub per_step_delta: f64,
    pub per_step_sigma: f64,
    pub composed: PrivacyBudget,
}

/// Clip each per-sample gradient to `clip_norm` in l2. Exposed so the
/// clipping contract can be asserted directly.
pub fn clip_gradients(grads: &mut [Vec<f64>], clip_norm: f64) {
    for g in grads.iter_mut() {
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > clip_norm {
            let s = clip_norm / norm;
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Train a network on rows (input, target) under (ε, δ) gradient
/// perturbation with full-batch DP-Adam. An infinite ε trains without
/// clipping noise (the clip itself is still applied so the optimization
/// path matches the private one as ε → ∞).
pub fn train_dp(
    inputs: &[Vec<f64>],
    targets: &[f64],
    task: MlpTask,
    budget: &PrivacyBudget,
    hyper: &MlpHyper,
    seed: u64,
) -> Result<(MlpNet, DpSgdMeta)> {
    budget.validate()?;
    if inputs.is_empty() {
        return Err(Error::Fit("no training rows".into()));
    }
    if hyper.steps == 0 || hyper.width == 0 {
        return Err(Error::Argument("steps and width must be positive".into()));
    }
    let n = inputs.len() as f64;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut net = MlpNet::init(inputs[0].len(), hyper.width, &mut rng);
    let m = net.param_count();

    // Per-step budget: half the δ is slack for advanced composition, the
    // rest splits across steps. ε per step solved by inversion.
    let (eps_step, delta_step, sigma_step) = if budget.is_non_private() {
        (f64::INFINITY, budget.delta, 0.0)
    } else {
        let delta_step = budget.delta / (2.0 * hyper.steps as f64);
        let eps_step = per_step_epsilon(budget.epsilon, hyper.steps, delta_step, budget.delta / 2.0)?;
        let step_budget = PrivacyBudget {
            epsilon: eps_step,
            delta: delta_step,
        };
        // Mean of clipped per-sample gradients: replacement moves it by 2C/n.
        let sigma = gaussian_sigma(&step_budget, 2.0 * hyper.clip_norm / n)?;
        (eps_step, delta_step, sigma)
    };

    let composed = if budget.is_non_private() {
        *budget
    } else {
        dp_composition_budget(
            &PrivacyBudget {
                epsilon: eps_step,
                delta: delta_step,
            },
            hyper.steps,
            budget.delta / 2.0,
        )?
    };

    // Adam state
    let mut mom = vec![0.0; m];
    let mut vel = vec![0.0; m];
    let (beta1, beta2, eps_adam): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let normal = StandardNormal;

    for step in 1..=hyper.steps {
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
        for (input, target) in inputs.iter().zip(targets) {
            let (acts, out) = net.forward_full(input);
            let dout = match task {
                MlpTask::Regression => 2.0 * (out - target),
                MlpTask::BinaryLogit => {
                    let p = 1.0 / (1.0 + (-out).exp());
                    p - target
                }
            };
            let mut g = vec![0.0; m];
            net.backprop(input, &acts, dout, &mut g);
            grads.push(g);
        }
        clip_gradients(&mut grads, hyper.clip_norm);
        let mut mean = vec![0.0; m];
        for g in &grads {
            for (acc, v) in mean.iter_mut().zip(g) {
                *acc += v / n;
            }
        }
        if sigma_step > 0.0 {
            for v in mean.iter_mut() {
                *v += sigma_step * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng);
            }
        }
        // Adam on the privatized mean gradient.
        let mut update = vec![0.0; m];
        let bc1 = 1.0 - beta1.powi(step as i32);
        let bc2 = 1.0 - beta2.powi(step as i32);
        for j in 0..m {
            mom[j] = beta1 * mom[j] + (1.0 - beta1) * mean[j];
            vel[j] = beta2 * vel[j] + (1.0 - beta2) * mean[j] * mean[j];
            let mhat = mom[j] / bc1;
            let vhat = vel[j] / bc2;
            update[j] = -hyper.learning_rate * mhat / (vhat.sqrt() + eps_adam);
        }
        net.apply_update(&update);
    }

    Ok((
        net,
        DpSgdMeta {
            steps: hyper.steps,
            clip_norm: hyper.clip_norm,
            per_step_epsilon: eps_step,
            per_step_delta: delta_step,
            per_step_sigma: sigma_step,
            composed,
        },
    ))
}

/// Bound |output| of a network over the covariate box, optionally with the
/// treatment appended to the input.
pub fn mlp_abs_bound(net: &MlpNet, bounds: &DomainBounds, with_treatment: bool) -> f64 {
    let mut input_box = bounds.covariates.clone();
    if with_treatment {
        input_box.push((0.0, 1.0));
    }
    let (lo, hi) = net.output_range(&input_box);
    lo.abs().max(hi.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn clipping_caps_every_gradient() {
        let mut grads = vec![vec![3.0, 4.0], vec![0.3, 0.4], vec![-6.0, 8.0]];
        clip_gradients(&mut grads, 1.0);
        for g in &grads {
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= 1.0 + 1e-12, "norm {norm}");
        }
        // Short gradients untouched.
        assert_relative_eq!(grads[1][0], 0.3);
    }

    #[test]
    fn nonprivate_training_fits_a_linear_map() {
        let inputs: Vec<Vec<f64>> = (0..400)
            .map(|i| vec![(i % 20) as f64 / 20.0, ((i / 20) % 20) as f64 / 20.0])
            .collect();
        let targets: Vec<f64> = inputs.iter().map(|x| 1.0 + x[0] - 0.5 * x[1]).collect();
        let hyper = MlpHyper {
            steps: 400,
            learning_rate: 0.02,
            clip_norm: 1e9,
            ..Default::default()
        };
        let budget = PrivacyBudget::new(f64::INFINITY, 0.05).unwrap();
        let (net, meta) = train_dp(&inputs, &targets, MlpTask::Regression, &budget, &hyper, 3).unwrap();
        assert_eq!(meta.per_step_sigma, 0.0);
        let mse: f64 = inputs
            .iter()
            .zip(&targets)
            .map(|(x, t)| (net.forward(x) - t).powi(2))
            .sum::<f64>()
            / inputs.len() as f64;
        assert!(mse < 0.02, "mse {mse}");
    }

    #[test]
    fn private_training_composes_within_budget() {
        let inputs: Vec<Vec<f64>> = (0..200).map(|i| vec![(i % 14) as f64 / 14.0]).collect();
        let targets: Vec<f64> = inputs.iter().map(|x| x[0]).collect();
        let hyper = MlpHyper {
            steps: 20,
            ..Default::default()
        };
        let budget = PrivacyBudget::new(1.0, 0.05).unwrap();
        let (_, meta) = train_dp(&inputs, &targets, MlpTask::Regression, &budget, &hyper, 0).unwrap();
        assert!(meta.composed.epsilon <= 1.0 + 1e-9);
        assert!(meta.composed.delta <= 0.05 + 1e-12);
        assert!(meta.per_step_sigma > 0.0);
    }

    #[test]
    fn output_range_contains_sampled_outputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let net = MlpNet::init(2, 8, &mut rng);
        let (lo, hi) = net.output_range(&[(0.0, 1.0), (0.0, 1.0)]);
        for _ in 0..500 {
            let x = vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let v = net.forward(&x);
            assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "{v} outside [{lo}, {hi}]");
        }
    }
}
