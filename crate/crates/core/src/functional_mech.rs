//! Full-function private release: the RKHS sensitivity bound, the calibration
//! factor r, batch Gaussian-process noise, and the stateful iterative
//! posterior sampler.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::DomainBounds;
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::nuisance::NuisancePair;
use crate::privacy::PrivacyBudget;
use crate::pseudo::LearnerKind;
use crate::secondstage::KrrModel;

/// RKHS-norm sensitivity of the weighted kernel ridge minimizer under
/// single-sample replacement: sup w · L / (λ·n) · (√(2π)·h)^{−q}.
pub fn rkhs_sensitivity_bound(
    sup_w: f64,
    lipschitz_l: f64,
    lambda_reg: f64,
    n: usize,
    kernel: &KernelSpec,
) -> Result<f64> {
    if !(sup_w > 0.0 && lipschitz_l > 0.0 && lambda_reg > 0.0) || n == 0 {
        return Err(Error::Argument(
            "sensitivity bound needs positive weight sup, Lipschitz constant, regularization and n"
                .into(),
        ));
    }
    Ok(sup_w * lipschitz_l / (lambda_reg * n as f64) * kernel.normalization())
}

/// Calibration of the functional mechanism, fixed per release.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalCalibration {
    pub sup_rho: f64,
    pub lipschitz_l: f64,
    pub lambda_reg: f64,
    pub n: usize,
    pub kernel: KernelSpec,
    pub budget: PrivacyBudget,
    pub r_factor: f64,
}

impl FunctionalCalibration {
    /// Reject state/model pairings the calibration was not computed for.
    pub fn check_model(&self, model: &KrrModel) -> Result<()> {
        if self.lambda_reg != model.lambda_reg
            || self.kernel != model.kernel
            || self.n != model.n()
        {
            return Err(Error::Argument(
                "calibration does not match the model (λ, kernel or n differ)".into(),
            ));
        }
        Ok(())
    }
}

/// r(ε, δ) = sup ρ · 4·L·√(2·ln(2/δ)) / ((√(2π)h)^q · λ · n · ε), with
/// sup ρ taken over {0,1} × [κ, 1−κ]: (1−κ)² for the R-learner, 1 for DR.
pub fn calibration_r(
    kind: LearnerKind,
    kappa: f64,
    lipschitz_l: f64,
    lambda_reg: f64,
    n: usize,
    kernel: KernelSpec,
    budget: &PrivacyBudget,
) -> Result<FunctionalCalibration> {
    budget.validate()?;
    if !(kappa > 0.0 && kappa < 0.5) {
        return Err(Error::Argument(format!("kappa must lie in (0,0.5), got {kappa}")));
    }
    if !(lipschitz_l > 0.0 && lambda_reg > 0.0) || n == 0 {
        return Err(Error::Argument(
            "calibration needs positive L, λ and n".into(),
        ));
    }
    let sup_rho = kind.sup_rho(kappa);
    let r_factor = if budget.is_non_private() {
        0.0
    } else {
        sup_rho * 4.0 * lipschitz_l * (2.0 * (2.0 / budget.delta).ln()).sqrt()
            * kernel.normalization()
            / (lambda_reg * n as f64 * budget.epsilon)
    };
    Ok(FunctionalCalibration {
        sup_rho,
        lipschitz_l,
        lambda_reg,
        n,
        kernel,
        budget: *budget,
        r_factor,
    })
}

/// Bound on |φ| over the data domain given the privatized nuisances, from
/// interval arithmetic on the nuisance models. Used to derive the Lipschitz
/// constant of the squared loss on the bounded pseudo-outcome domain.
pub fn phi_sup_bound(eta: &NuisancePair, domain: &DomainBounds, kind: LearnerKind) -> f64 {
    let mu_abs = eta.mu.abs_bound(domain);
    let resid_sup = domain.max_abs_outcome() + mu_abs;
    let (pi_lo, pi_hi) = eta.pi.range(domain, eta.kappa);
    let factor = match kind {
        // |1/(a − π)| maximized at the clip boundary closest to a.
        LearnerKind::R => 1.0 / pi_lo.min(1.0 - pi_hi),
        // |(a − π)/(π(1−π))| = 1/π at a=1, 1/(1−π) at a=0.
        LearnerKind::Dr => (1.0 / pi_lo).max(1.0 / (1.0 - pi_hi)),
    };
    resid_sup * factor + 2.0 * mu_abs
}

/// Lipschitz constant of the squared loss along the optimization path:
/// 2·(sup|φ| + sup|ĝ|), where sup|ĝ| comes from the minimizer's RKHS-norm
/// bound λ‖ĝ‖² ≤ sup ρ·(sup φ)². Exposed as an override in the CLI for users
/// who know a tighter constant for their loss.
pub fn squared_loss_lipschitz(
    eta: &NuisancePair,
    domain: &DomainBounds,
    kind: LearnerKind,
    lambda_reg: f64,
    kernel: &KernelSpec,
) -> f64 {
    let phi_sup = phi_sup_bound(eta, domain, kind);
    let sup_rho = kind.sup_rho(eta.kappa);
    let g_sup = phi_sup * (sup_rho * kernel.normalization() / lambda_reg).sqrt();
    2.0 * (phi_sup + g_sup)
}

/// Jitter matched to the kernel scale: 10⁻⁹·K(x,x).
pub fn default_jitter(kernel: &KernelSpec) -> f64 {
    1e-9 * kernel.normalization()
}

fn cholesky_with_escalation(
    m: DMatrix<f64>,
    base_jitter: f64,
    cap: f64,
) -> Result<(DMatrix<f64>, f64)> {
    let d = m.nrows();
    let mut jitter = base_jitter;
    loop {
        let mut attempt = m.clone();
        for i in 0..d {
            attempt[(i, i)] += jitter;
        }
        if let Some(chol) = nalgebra::Cholesky::new(attempt) {
            return Ok((chol.unpack(), jitter));
        }
        jitter *= 10.0;
        if jitter > cap {
            return Err(Error::Numeric(format!(
                "GP covariance factorization failed up to jitter {cap:.3e}"
            )));
        }
    }
}

/// Draw one sample path of the zero-centered GP at the query points:
/// u ~ N(0, K(queries) + jitter·I). Deterministic given the seed.
pub fn sample_gp_batch(
    kernel: &KernelSpec,
    queries: &[Vec<f64>],
    rng_seed: u64,
    jitter: f64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    sample_gp_batch_with(kernel, queries, &mut rng, jitter)
}

/// As [`sample_gp_batch`], drawing from a caller-owned stream (useful when
/// accumulating many paths).
pub fn sample_gp_batch_with(
    kernel: &KernelSpec,
    queries: &[Vec<f64>],
    rng: &mut ChaCha12Rng,
    jitter: f64,
) -> Result<Vec<f64>> {
    if queries.is_empty() {
        return Err(Error::Argument("need at least one query".into()));
    }
    for q in queries {
        if q.len() != kernel.dim {
            return Err(Error::Argument("query dimension mismatch".into()));
        }
    }
    let k = kernel.matrix(queries);
    let cap = 1e-6 * kernel.normalization();
    let (l, _) = cholesky_with_escalation(k, jitter.max(f64::MIN_POSITIVE), cap)?;
    let normal = StandardNormal;
    let z = DVector::from_iterator(
        queries.len(),
        (0..queries.len()).map(|_| <StandardNormal as Distribution<f64>>::sample(&normal, rng)),
    );
    Ok((l * z).iter().copied().collect())
}

/// Batch functional release: predictions plus r·U with one GP draw.
/// The query set must be released exactly once per budget; the CLI ledger
/// enforces that.
pub fn release_function_batch(
    model: &KrrModel,
    queries: &[Vec<f64>],
    calibration: &FunctionalCalibration,
    rng_seed: u64,
) -> Result<Vec<f64>> {
    calibration.check_model(model)?;
    let jitter = default_jitter(&model.kernel);
    let u = sample_gp_batch(&model.kernel, queries, rng_seed, jitter)?;
    queries
        .iter()
        .zip(&u)
        .map(|(q, ui)| Ok(model.predict(q)? + calibration.r_factor * ui))
        .collect()
}

/// Which reading of the iterative sampler the state follows.
///
/// `NoisePath` conditions the GP on the realized noise values
/// U_i = (output_i − ĝ(x_i)) / r and answers ĝ(x) + r·U_new, which makes the
/// iterative release distributionally identical to the batch release.
/// `LiteralOutputs` conditions on the raw private outputs G_i and returns the
/// posterior draw unchanged; it is kept for comparison only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpMode {
    NoisePath,
    LiteralOutputs,
}

/// Accumulated query history for the iterative functional release.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpNoiseState {
    pub model: KrrModel,
    pub calibration: FunctionalCalibration,
    pub mode: GpMode,
    pub past_queries: Vec<Vec<f64>>,
    /// Realized noise-path values in `NoisePath` mode, raw private outputs
    /// in `LiteralOutputs` mode.
    pub past_values: Vec<f64>,
    pub jitter: f64,
    queries_since_refactor: usize,
    /// Lower Cholesky factor of K(past) + jitter·I; rebuilt on demand after
    /// deserialization.
    #[serde(skip)]
    chol: Option<DMatrix<f64>>,
}

impl PartialEq for GpNoiseState {
    fn eq(&self, other: &Self) -> bool {
        self.model == other.model
            && self.calibration == other.calibration
            && self.mode == other.mode
            && self.past_queries == other.past_queries
            && self.past_values == other.past_values
            && self.jitter == other.jitter
    }
}

/// Fresh state bound to a model and calibration.
pub fn iterative_init(
    model: KrrModel,
    calibration: FunctionalCalibration,
    mode: GpMode,
) -> Result<GpNoiseState> {
    calibration.check_model(&model)?;
    let jitter = default_jitter(&model.kernel);
    Ok(GpNoiseState {
        model,
        calibration,
        mode,
        past_queries: Vec::new(),
        past_values: Vec::new(),
        jitter,
        queries_since_refactor: 0,
        chol: None,
    })
}

impl GpNoiseState {
    pub fn query_count(&self) -> usize {
        self.past_queries.len()
    }

    fn ensure_factor(&mut self) -> Result<()> {
        if self.chol.is_some() || self.past_queries.is_empty() {
            return Ok(());
        }
        let k = self.model.kernel.matrix(&self.past_queries);
        let cap = 1e-6 * self.model.kernel.normalization();
        let (l, _) = cholesky_with_escalation(k, self.jitter, cap)?;
        self.chol = Some(l);
        self.queries_since_refactor = 0;
        Ok(())
    }

    /// Posterior conditional of the GP at x given the past queries:
    /// mean ingredients b = C⁻¹·V and variance K(x,x) − Vᵀ·C⁻¹·V + jitter.
    pub fn conditional(&mut self, x: &[f64]) -> Result<(DVector<f64>, f64)> {
        self.ensure_factor()?;
        let kxx = self.model.kernel.self_value();
        let m = self.past_queries.len();
        if m == 0 {
            return Ok((DVector::zeros(0), kxx + self.jitter));
        }
        let l = self.chol.as_ref().expect("factor ensured");
        let v = self.model.kernel.column(&self.past_queries, x);
        // b = C⁻¹ v via two triangular solves.
        let mut y = v.clone();
        l.solve_lower_triangular_mut(&mut y);
        let quad = y.norm_squared();
        let mut b = y;
        l.tr_solve_lower_triangular_mut(&mut b);
        let mut variance = kxx - quad;
        if variance < -1e-8 {
            return Err(Error::Numeric(format!(
                "GP posterior variance {variance:.3e} is negative beyond tolerance"
            )));
        }
        if variance < 0.0 {
            variance = 0.0;
        }
        Ok((b, variance + self.jitter))
    }

    fn append(&mut self, x: Vec<f64>, value: f64) -> Result<()> {
        self.ensure_factor()?;
        let kxx = self.model.kernel.self_value() + self.jitter;
        match self.chol.take() {
            None => {
                let mut l = DMatrix::zeros(1, 1);
                l[(0, 0)] = kxx.sqrt();
                self.chol = Some(l);
            }
            Some(l_old) => {
                let m = self.past_queries.len();
                let v = self.model.kernel.column(&self.past_queries, &x);
                let mut row = v;
                l_old.solve_lower_triangular_mut(&mut row);
                let rem = kxx - row.norm_squared();
                if rem <= 0.0 {
                    // Numerically degenerate extension: rebuild from scratch.
                    self.chol = None;
                } else {
                    let mut l = DMatrix::zeros(m + 1, m + 1);
                    l.view_mut((0, 0), (m, m)).copy_from(&l_old);
                    for j in 0..m {
                        l[(m, j)] = row[j];
                    }
                    l[(m, m)] = rem.sqrt();
                    self.chol = Some(l);
                }
            }
        }
        self.past_queries.push(x);
        self.past_values.push(value);
        self.queries_since_refactor += 1;
        // Periodic full refactorization bounds error drift of the
        // incremental extension.
        if self.queries_since_refactor >= 64 {
            self.chol = None;
            self.ensure_factor()?;
        }
        Ok(())
    }
}

/// Answer one query, conditioning on everything answered so far, and append
/// the new point to the state. Deterministic given the seed.
pub fn iterative_query(state: &mut GpNoiseState, x: &[f64], rng_seed: u64) -> Result<f64> {
    if x.len() != state.model.kernel.dim {
        return Err(Error::Argument(format!(
            "query dimension {} does not match model dimension {}",
            x.len(),
            state.model.kernel.dim
        )));
    }
    let (b, variance) = state.conditional(x)?;
    let mean: f64 = b
        .iter()
        .zip(&state.past_values)
        .map(|(bi, ui)| bi * ui)
        .sum();
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let normal = StandardNormal;
    let draw = mean
        + variance.sqrt() * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng);
    let g = state.model.predict(x)?;
    let (answer, stored) = match state.mode {
        GpMode::NoisePath => (g + state.calibration.r_factor * draw, draw),
        GpMode::LiteralOutputs => {
            if state.past_queries.is_empty() {
                // First query falls back to the batch mechanism.
                let out = g + state.calibration.r_factor * draw;
                (out, out)
            } else {
                (draw, draw)
            }
        }
    };
    state.append(x.to_vec(), stored)?;
    Ok(answer)
}
