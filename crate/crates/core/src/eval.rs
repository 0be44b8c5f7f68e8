//! Experiment harness: PEHE, privacy-budget sweeps, the orthogonality probe,
//! and the empirical RKHS-sensitivity audit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic_full, load_csv, split_disjoint, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::finite_mech::release_finite;
use crate::functional_mech::{calibration_r, release_function_batch, squared_loss_lipschitz};
use crate::kernel::KernelSpec;
use crate::nuisance::{
    fit_nuisance_pair, fit_nuisances_nonprivate, oracle::OracleNuisance, FitMethod, NuisanceHyper,
};
use crate::optim::OptimOpts;
use crate::privacy::{BudgetPlan, PrivacyBudget};
use crate::pseudo::{build_targets, LearnerKind, Nuisance, WeightedTarget};
use crate::secondstage::{fit_krr, krr_rkhs_distance, KrrModel, SecondStageModel};

/// Root mean squared error against the true effect.
pub fn pehe(predictions: &[f64], true_cate: &[f64]) -> Result<f64> {
    if predictions.len() != true_cate.len() {
        return Err(Error::Argument(format!(
            "length mismatch: {} predictions vs {} true values",
            predictions.len(),
            true_cate.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Argument("empty vectors".into()));
    }
    let mse: f64 = predictions
        .iter()
        .zip(true_cate)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predictions.len() as f64;
    Ok(mse.sqrt())
}

/// Which release mechanism a sweep exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    Finite,
    Functional,
    None,
}

/// Data source for a sweep: a synthetic generator, or a CSV with an aligned
/// truth file (header `x1..xq,cate`, one row per data row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum SweepData {
    Synthetic(SyntheticConfig),
    Csv { data: String, truth: String },
}

/// Second-stage configuration used by the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondStageConfig {
    pub bandwidth: f64,
    pub lambda_reg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub data: SweepData,
    pub learner: LearnerKind,
    pub mechanism: MechanismKind,
    /// Ascending privacy budgets; `inf` is the no-noise endpoint.
    #[serde(with = "eps_list_serde")]
    pub epsilons: Vec<f64>,
    pub delta: f64,
    pub seeds: Vec<u64>,
    /// Number of held-out query points (capped by the test-split size).
    pub queries: usize,
    pub train_fraction: f64,
    pub nuisance_fraction: f64,
    pub kappa: f64,
    pub nuisance: NuisanceHyper,
    pub second_stage: SecondStageConfig,
    /// Override for the functional mechanism's Lipschitz constant.
    pub lipschitz_override: Option<f64>,
    pub optimizer: OptimOpts,
}

impl SweepConfig {
    /// Defaults mirroring the synthetic experiments: n = 3000, 90/10 split,
    /// 300 queries, second stage tuned per mechanism and learner.
    pub fn default_for(
        data: SweepData,
        learner: LearnerKind,
        mechanism: MechanismKind,
    ) -> SweepConfig {
        // The functional mechanism's noise scales like k₀^{3/2}/λ with
        // k₀ = (√(2π)h)^{-q}, so it runs with a wider, stiffer smoother than
        // the finite mechanism. The DR-learner needs more regularization than
        // the R-learner at equal fit scale: its weights are ≡ 1 (4-5× the
        // R-learner's average mass) and its influence function carries an
        // uncancelled 1/(π(1−π)) factor.
        let (base_h, base_lambda) = match (mechanism, learner) {
            (MechanismKind::Functional, LearnerKind::R) => (0.75, 0.025),
            (MechanismKind::Functional, LearnerKind::Dr) => (0.75, 0.04),
            (_, LearnerKind::R) => (0.35, 0.05),
            (_, LearnerKind::Dr) => (0.35, 0.2),
        };
        // Above two covariates, pairwise distances grow like √q and the
        // kernel's normalization (√(2π)h)^{-q} collapses; rescaling the
        // bandwidth with √(q/2) and λ with the normalization ratio keeps the
        // fit geometry (and the noise-to-signal balance, whose k₀ factors
        // cancel against λ) invariant across dimensions.
        let q = match &data {
            SweepData::Synthetic(syn) => syn.p,
            SweepData::Csv { .. } => 2,
        };
        let h = base_h * ((q as f64 / 2.0).sqrt());
        let norm_ratio = KernelSpec::new(h, q)
            .map(|k| k.normalization())
            .unwrap_or(1.0)
            / KernelSpec::new(base_h, 2)
                .map(|k| k.normalization())
                .unwrap_or(1.0);
        let second_stage = SecondStageConfig {
            bandwidth: h,
            lambda_reg: base_lambda * norm_ratio,
        };
        SweepConfig {
            data,
            learner,
            mechanism,
            epsilons: vec![0.1, 1.0, 10.0, f64::INFINITY],
            delta: 0.05,
            seeds: (0..10).collect(),
            queries: 300,
            train_fraction: 0.9,
            nuisance_fraction: 0.5,
            kappa: 0.05,
            nuisance: NuisanceHyper::default(),
            second_stage,
            lipschitz_override: None,
            optimizer: OptimOpts::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() {
            return Err(Error::Argument("epsilon list is empty".into()));
        }
        for w in self.epsilons.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::Argument(
                    "epsilons must be positive and strictly ascending".into(),
                ));
            }
        }
        if !(self.epsilons[0] > 0.0) {
            return Err(Error::Argument("epsilons must be positive".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() || self.seeds.is_empty() {
            return Err(Error::Argument("seeds must be distinct and nonempty".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0)
            || !(self.nuisance_fraction > 0.0 && self.nuisance_fraction < 1.0)
        {
            return Err(Error::Argument("split fractions must lie in (0,1)".into()));
        }
        Ok(())
    }
}

/// One sweep grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    #[serde(with = "crate::privacy::eps_serde")]
    pub epsilon: f64,
    pub seed: u64,
    pub pehe: f64,
    pub baseline_pehe: f64,
}

/// Per-ε aggregate over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    #[serde(with = "crate::privacy::eps_serde")]
    pub epsilon: f64,
    pub mean_pehe: f64,
    pub std_pehe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub aggregates: Vec<SweepAggregate>,
    pub baseline_mean: f64,
    /// Per-seed failures. When nonempty the grid is partial: completed seeds
    /// are kept so a long run is not lost to one bad seed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

impl SweepResult {
    /// Long-format CSV: `epsilon,seed,pehe,baseline_pehe`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,seed,pehe,baseline_pehe\n");
        for c in &self.cells {
            let eps = if c.epsilon.is_infinite() {
                "inf".to_string()
            } else {
                format!("{}", c.epsilon)
            };
            out.push_str(&format!(
                "{eps},{},{:.12e},{:.12e}\n",
                c.seed, c.pehe, c.baseline_pehe
            ));
        }
        out
    }
}

fn eps_fmt(e: f64) -> String {
    if e.is_infinite() {
        "inf".into()
    } else {
        format!("{e}")
    }
}

mod eps_list_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for e in v {
            if e.is_infinite() {
                seq.serialize_element("inf")?;
            } else {
                seq.serialize_element(e)?;
            }
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        let raw: Vec<Raw> = Vec::deserialize(d)?;
        raw.into_iter()
            .map(|r| match r {
                Raw::Num(v) => Ok(v),
                Raw::Str(s) => match s.trim().to_ascii_lowercase().as_str() {
                    "inf" | "infinity" => Ok(f64::INFINITY),
                    other => other
                        .parse()
                        .map_err(|_| serde::de::Error::custom(format!("bad epsilon '{other}'"))),
                },
            })
            .collect()
    }
}

struct SeedOutcome {
    seed: u64,
    baseline: f64,
    per_eps: Vec<f64>,
}

fn prepare_data(cfg: &SweepConfig, seed: u64) -> Result<(Dataset, Vec<Vec<f64>>, Vec<f64>)> {
    match &cfg.data {
        SweepData::Synthetic(syn) => {
            let mut syn = syn.clone();
            syn.seed = syn.seed.wrapping_add(seed.wrapping_mul(0x9e3779b97f4a7c15));
            let (d, cate, _, _) = generate_synthetic_full(&syn)?;
            let (train, test) = split_disjoint(&d, cfg.train_fraction, seed)?;
            let take = cfg.queries.min(test.n()).max(1);
            let queries: Vec<Vec<f64>> =
                test.samples.iter().take(take).map(|s| s.x.clone()).collect();
            let truth: Vec<f64> = queries.iter().map(|q| cate.eval(q)).collect();
            Ok((train, queries, truth))
        }
        SweepData::Csv { data, truth } => {
            let d = load_csv(data, None)?;
            let cate_rows = load_truth_csv(truth)?;
            if cate_rows.len() != d.n() {
                return Err(Error::Argument(format!(
                    "truth file has {} rows for {} data rows",
                    cate_rows.len(),
                    d.n()
                )));
            }
            let (train, test) = split_disjoint(&d, cfg.train_fraction, seed)?;
            // Recover test-row truth values by matching covariates.
            let take = cfg.queries.min(test.n()).max(1);
            let queries: Vec<Vec<f64>> =
                test.samples.iter().take(take).map(|s| s.x.clone()).collect();
            let truth_vals: Vec<f64> = queries
                .iter()
                .map(|q| {
                    cate_rows
                        .iter()
                        .find(|(x, _)| x == q)
                        .map(|(_, c)| *c)
                        .ok_or_else(|| {
                            Error::Argument("truth file does not cover a test row".into())
                        })
                })
                .collect::<Result<_>>()?;
            Ok((train, queries, truth_vals))
        }
    }
}

fn load_truth_csv(path: &str) -> Result<Vec<(Vec<f64>, f64)>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines().enumerate();
    let _header = lines
        .next()
        .ok_or_else(|| Error::Dataset("empty truth file".into()))?;
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .trim()
            .split(',')
            .map(|f| {
                f.trim().parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    message: format!("invalid number '{}'", f.trim()),
                })
            })
            .collect::<Result<_>>()?;
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: i + 1,
                message: "truth rows need x columns plus a cate column".into(),
            });
        }
        let (x, c) = fields.split_at(fields.len() - 1);
        out.push((x.to_vec(), c[0]));
    }
    Ok(out)
}

fn run_seed(cfg: &SweepConfig, seed: u64) -> Result<SeedOutcome> {
    let (train, queries, truth) = prepare_data(cfg, seed)?;
    let (d_tilde, d_est) = split_disjoint(&train, cfg.nuisance_fraction, seed.wrapping_add(1))?;
    let domain = train.bounds();
    let kernel = KernelSpec::new(cfg.second_stage.bandwidth, train.dim())?;
    let lambda = cfg.second_stage.lambda_reg;
    let hyper = NuisanceHyper {
        seed: seed.wrapping_add(0x5a5a),
        ..cfg.nuisance.clone()
    };

    let fit_stage2 = |eta: &crate::nuisance::NuisancePair| -> Result<KrrModel> {
        let targets = build_targets(&d_est, eta, cfg.learner)?;
        fit_krr(&targets, kernel, lambda)
    };

    // Non-private baseline: shared code path with zero noise.
    let eta_np = fit_nuisances_nonprivate(&d_tilde, cfg.kappa, &hyper)?;
    let model_np = fit_stage2(&eta_np)?;
    let raw_np: Vec<f64> = queries
        .iter()
        .map(|q| model_np.predict(q))
        .collect::<Result<_>>()?;
    let baseline = pehe(&raw_np, &truth)?;

    let mut per_eps = Vec::with_capacity(cfg.epsilons.len());
    for &eps in &cfg.epsilons {
        let total = PrivacyBudget::new(eps, cfg.delta)?;
        let plan = BudgetPlan::from_total(total)?;
        // The per-seed RNG streams are shared across the ε grid (common
        // random numbers): the same standard-normal draws get scaled by each
        // ε's noise level, so PEHE comparisons across ε isolate the scale.
        let eta = fit_nuisance_pair(
            &d_tilde,
            &plan.stage1_mu,
            &plan.stage1_pi,
            cfg.kappa,
            FitMethod::ParamOutputPerturbation,
            &hyper,
        )?;
        let model = fit_stage2(&eta)?;
        let private: Vec<f64> = match cfg.mechanism {
            MechanismKind::None => queries
                .iter()
                .map(|q| model.predict(q))
                .collect::<Result<_>>()?,
            MechanismKind::Finite => {
                let report = release_finite(
                    &SecondStageModel::Krr(model.clone()),
                    &queries,
                    &eta,
                    &plan.stage2,
                    &domain,
                    cfg.learner,
                    &cfg.optimizer,
                    seed.wrapping_add(0xf1),
                )?;
                report.private_estimates
            }
            MechanismKind::Functional => {
                let lipschitz = cfg.lipschitz_override.unwrap_or_else(|| {
                    squared_loss_lipschitz(&eta, &domain, cfg.learner, lambda, &kernel)
                });
                let calibration = calibration_r(
                    cfg.learner,
                    cfg.kappa,
                    lipschitz,
                    lambda,
                    model.n(),
                    kernel,
                    &plan.stage2,
                )?;
                release_function_batch(&model, &queries, &calibration, seed.wrapping_add(0xf2))?
            }
        };
        per_eps.push(pehe(&private, &truth)?);
    }
    Ok(SeedOutcome {
        seed,
        baseline,
        per_eps,
    })
}

/// Run the full (ε × seed) grid. Deterministic given the config. A failing
/// seed does not abort the run: its error is recorded in `failures` and the
/// completed cells are returned, so long grids survive one bad seed.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let outcomes: Vec<(u64, Result<SeedOutcome>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| (seed, run_seed(cfg, seed)))
        .collect();
    let mut cells = Vec::new();
    let mut per_eps: Vec<Vec<f64>> = vec![Vec::new(); cfg.epsilons.len()];
    let mut baselines = Vec::new();
    let mut failures = Vec::new();
    for (seed, outcome) in outcomes {
        let o = match outcome {
            Ok(o) => o,
            Err(e) => {
                failures.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        baselines.push(o.baseline);
        for (k, &eps) in cfg.epsilons.iter().enumerate() {
            cells.push(SweepCell {
                epsilon: eps,
                seed: o.seed,
                pehe: o.per_eps[k],
                baseline_pehe: o.baseline,
            });
            per_eps[k].push(o.per_eps[k]);
        }
    }
    if baselines.is_empty() {
        return Err(Error::Numeric(format!(
            "every sweep seed failed; first failure: {}",
            failures.first().cloned().unwrap_or_default()
        )));
    }
    let aggregates = cfg
        .epsilons
        .iter()
        .zip(&per_eps)
        .map(|(&epsilon, vals)| {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (vals.len() as f64 - 1.0).max(1.0);
            SweepAggregate {
                epsilon,
                mean_pehe: mean,
                std_pehe: var.sqrt(),
            }
        })
        .collect();
    Ok(SweepResult {
        cells,
        aggregates,
        baseline_mean: baselines.iter().sum::<f64>() / baselines.len() as f64,
        failures,
    })
}

/// Configuration of the orthogonality probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Stage-2 sample size per seed.
    pub n: usize,
    pub seeds: usize,
    /// Positive perturbation magnitudes, smallest to largest.
    pub t_values: Vec<f64>,
    pub bandwidth: f64,
    pub lambda_reg: f64,
    pub kind: LearnerKind,
    /// When set, regress on the plug-in target μ̂₁ − μ̂₀ instead of the
    /// orthogonal pseudo-outcome (first-order contrast).
    pub plugin: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n: 2000,
            seeds: 10,
            t_values: vec![0.02, 0.04, 0.08, 0.16],
            bandwidth: 0.25,
            lambda_reg: 0.005,
            kind: LearnerKind::R,
            plugin: false,
        }
    }
}

/// Oracle nuisances shifted by t along a fixed smooth direction: a
/// low-frequency sinusoid of the first covariate, treatment-dependent for μ
/// so the plug-in contrast moves at first order.
struct PerturbedOracle<'a> {
    base: &'a OracleNuisance,
    t: f64,
}

impl Nuisance for PerturbedOracle<'_> {
    fn mu(&self, x: &[f64], a: bool) -> f64 {
        let dir = (1.0 + a as u8 as f64) * (std::f64::consts::PI * x[0]).sin();
        self.base.mu(x, a) + self.t * dir
    }
    fn pi(&self, x: &[f64]) -> f64 {
        let dir = 0.5 * (std::f64::consts::PI * x[0]).sin();
        (self.base.pi(x) + self.t * dir).clamp(self.base.kappa, 1.0 - self.base.kappa)
    }
}

fn probe_fit(
    d: &Dataset,
    eta: &impl Nuisance,
    cfg: &ProbeConfig,
    kernel: KernelSpec,
    plugin: bool,
) -> Result<KrrModel> {
    let targets: Vec<WeightedTarget> = if plugin {
        d.samples
            .iter()
            .map(|s| {
                Ok(WeightedTarget {
                    x: s.x.clone(),
                    rho: 1.0,
                    phi: eta.mu(&s.x, true) - eta.mu(&s.x, false),
                })
            })
            .collect::<Result<_>>()?
    } else {
        build_targets(d, eta, cfg.kind)?
    };
    fit_krr(&targets, kernel, cfg.lambda_reg)
}

/// Log–log slope of the stage-2 shift against the nuisance perturbation
/// magnitude. Second-order behavior (slope ≈ 2) is the orthogonality
/// signature; the plug-in contrast moves at first order (slope ≈ 1).
///
/// The per-t function shifts are averaged over seeds before taking norms,
/// which cancels the O(n^{-1/2}) empirical first-order term that any single
/// seed carries.
pub fn orthogonality_probe(base_seed: u64, cfg: &ProbeConfig) -> Result<f64> {
    if cfg.t_values.len() < 3 {
        return Err(Error::Argument("need at least 3 perturbation magnitudes".into()));
    }
    let t_min = cfg.t_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let t_max = cfg.t_values.iter().cloned().fold(0.0, f64::max);
    if !(t_min > 0.0) || t_max / t_min < 4.0 {
        return Err(Error::Argument(
            "perturbation magnitudes must be positive and span at least a factor of 4".into(),
        ));
    }
    if cfg.seeds == 0 {
        return Err(Error::Argument("need at least one seed".into()));
    }

    let grid: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64 / 199.0]).collect();
    let kernel = KernelSpec::new(cfg.bandwidth, 1)?;

    let shifts: Vec<Result<Vec<Vec<f64>>>> = (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|s| {
            let syn = SyntheticConfig::new(1, crate::data::EffectKind::Dataset1, cfg.n, base_seed.wrapping_add(s));
            let (d, cate, beta, gamma) = generate_synthetic_full(&syn)?;
            let oracle = OracleNuisance {
                beta,
                gamma,
                cate,
                kappa: 0.01,
            };
            let base_fit = probe_fit(
                &d,
                &PerturbedOracle {
                    base: &oracle,
                    t: 0.0,
                },
                cfg,
                kernel,
                cfg.plugin,
            )?;
            let base_grid: Vec<f64> = grid
                .iter()
                .map(|x| base_fit.predict(x))
                .collect::<Result<_>>()?;
            let mut per_t = Vec::with_capacity(cfg.t_values.len());
            for &t in &cfg.t_values {
                let fit_t = probe_fit(
                    &d,
                    &PerturbedOracle {
                        base: &oracle,
                        t,
                    },
                    cfg,
                    kernel,
                    cfg.plugin,
                )?;
                let diff: Vec<f64> = grid
                    .iter()
                    .zip(&base_grid)
                    .map(|(x, b)| Ok(fit_t.predict(x)? - b))
                    .collect::<Result<_>>()?;
                per_t.push(diff);
            }
            Ok(per_t)
        })
        .collect();

    // Average the function shifts over seeds, then take L2 norms.
    let mut mean_shift: Vec<Vec<f64>> = vec![vec![0.0; grid.len()]; cfg.t_values.len()];
    for s in shifts {
        let per_t = s?;
        for (acc, diff) in mean_shift.iter_mut().zip(&per_t) {
            for (a, v) in acc.iter_mut().zip(diff) {
                *a += v / cfg.seeds as f64;
            }
        }
    }
    let errors: Vec<f64> = mean_shift
        .iter()
        .map(|diff| {
            (diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64).sqrt()
        })
        .collect();
    for e in &errors {
        if !(*e > 0.0) {
            return Err(Error::Numeric(
                "degenerate probe: zero shift at a positive perturbation".into(),
            ));
        }
    }

    // Least-squares slope of ln(error) on ln(t).
    let xs: Vec<f64> = cfg.t_values.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if den <= 0.0 {
        return Err(Error::Numeric("degenerate regression in probe".into()));
    }
    Ok(num / den)
}

/// Configuration of the empirical RKHS sensitivity audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub n: usize,
    pub trials: usize,
    pub kernel: KernelSpec,
    pub lambda_reg: f64,
    pub kind: LearnerKind,
    pub kappa: f64,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            n: 50,
            trials: 200,
            kernel: KernelSpec {
                bandwidth: 0.3,
                dim: 1,
            },
            lambda_reg: 0.05,
            kind: LearnerKind::R,
            kappa: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub trials: usize,
    pub bound: f64,
    pub lipschitz: f64,
    pub max_observed: f64,
    pub max_ratio: f64,
}

/// Replace single stage-2 samples at random and compare the exact RKHS
/// distance between refits against the theoretical sensitivity bound.
/// A ratio above 1 is an implementation bug and surfaces as an audit error.
pub fn sensitivity_audit(cfg: &AuditConfig) -> Result<AuditReport> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    if cfg.trials == 0 {
        return Err(Error::Argument("trials must be >= 1".into()));
    }
    let syn = SyntheticConfig::new(
        cfg.kernel.dim,
        crate::data::EffectKind::Dataset1,
        2 * cfg.n,
        cfg.seed,
    );
    let (d, _) = crate::data::generate_synthetic(&syn)?;
    let (d_tilde, d_est) = split_disjoint(&d, 0.5, cfg.seed)?;
    let eta = fit_nuisances_nonprivate(&d_tilde, cfg.kappa, &NuisanceHyper::default())?;
    let domain = d.bounds();
    let base_targets = build_targets(&d_est, &eta, cfg.kind)?;
    let base = fit_krr(&base_targets, cfg.kernel, cfg.lambda_reg)?;
    let n = base_targets.len();

    let lipschitz = squared_loss_lipschitz(&eta, &domain, cfg.kind, cfg.lambda_reg, &cfg.kernel);
    let sup_w = cfg.kind.sup_rho(cfg.kappa);
    let bound =
        crate::functional_mech::rkhs_sensitivity_bound(sup_w, lipschitz, cfg.lambda_reg, n, &cfg.kernel)?;

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut max_observed = 0.0_f64;
    for _ in 0..cfg.trials {
        let i = rng.random_range(0..n);
        let z = crate::data::Sample {
            x: (0..cfg.kernel.dim)
                .map(|_| rng.random_range(0.0..1.0))
                .collect(),
            a: rng.random_range(0.0..1.0) < 0.5,
            y: rng.random_range(domain.outcome.0..domain.outcome.1),
        };
        let mut targets = base_targets.clone();
        targets[i] = WeightedTarget {
            x: z.x.clone(),
            rho: crate::pseudo::rho_weight(cfg.kind, z.a, Nuisance::pi(&eta, &z.x))?,
            phi: crate::pseudo::pseudo_outcome(cfg.kind, &z, &eta)?,
        };
        let shifted = fit_krr(&targets, cfg.kernel, cfg.lambda_reg)?;
        let dist = krr_rkhs_distance(&base, &shifted)?;
        max_observed = max_observed.max(dist);
    }
    let max_ratio = max_observed / bound;
    let report = AuditReport {
        trials: cfg.trials,
        bound,
        lipschitz,
        max_observed,
        max_ratio,
    };
    if max_ratio > 1.0 {
        return Err(Error::AuditFailure(format!(
            "RKHS sensitivity exceeded its bound: observed {max_observed:.6e} vs bound {bound:.6e} \
             (ratio {max_ratio:.3})"
        )));
    }
    Ok(report)
}

/// Helper for summaries printed by the CLI.
pub fn format_aggregates(result: &SweepResult) -> String {
    let mut out = String::new();
    for a in &result.aggregates {
        out.push_str(&format!(
            "epsilon={}: mean PEHE {:.4} (std {:.4})\n",
            eps_fmt(a.epsilon),
            a.mean_pehe,
            a.std_pehe
        ));
    }
    out.push_str(&format!("non-private baseline: {:.4}\n", result.baseline_mean));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EffectKind;
    use approx::assert_relative_eq;

    #[test]
    fn pehe_examples() {
        assert_eq!(pehe(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_relative_eq!(
            pehe(&[1.5, 2.5, 3.5], &[1.0, 2.0, 3.0]).unwrap(),
            0.5,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            pehe(&[1.0, 2.0, 3.0], &[1.0, 2.0, 5.0]).unwrap(),
            (4.0f64 / 3.0).sqrt(),
            epsilon = 1e-12
        );
        assert!(pehe(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn small_sweep(mechanism: MechanismKind) -> SweepConfig {
        let mut cfg = SweepConfig::default_for(
            SweepData::Synthetic(SyntheticConfig::new(2, EffectKind::Dataset1, 400, 0)),
            LearnerKind::R,
            mechanism,
        );
        cfg.seeds = vec![0, 1];
        cfg.epsilons = vec![1.0, f64::INFINITY];
        cfg.queries = 40;
        cfg.optimizer = OptimOpts {
            scan_points: 48,
            restarts: 2,
            max_iters: 30,
            ..Default::default()
        };
        cfg
    }

    #[test]
    fn sweep_is_deterministic() {
        let cfg = small_sweep(MechanismKind::Finite);
        let a = run_sweep(&cfg).unwrap();
        let b = run_sweep(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn infinite_epsilon_matches_baseline_exactly() {
        for mech in [MechanismKind::Finite, MechanismKind::Functional, MechanismKind::None] {
            let cfg = small_sweep(mech);
            let r = run_sweep(&cfg).unwrap();
            for cell in r.cells.iter().filter(|c| c.epsilon.is_infinite()) {
                assert!(
                    (cell.pehe - cell.baseline_pehe).abs() <= 1e-10,
                    "{mech:?}: PEHE(inf) {} vs baseline {}",
                    cell.pehe,
                    cell.baseline_pehe
                );
            }
        }
    }

    #[test]
    fn sweep_csv_has_expected_header_and_rows() {
        let cfg = small_sweep(MechanismKind::None);
        let r = run_sweep(&cfg).unwrap();
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epsilon,seed,pehe,baseline_pehe");
        assert_eq!(csv.lines().count(), 1 + cfg.seeds.len() * cfg.epsilons.len());
        assert!(csv.contains("inf,"));
    }

    #[test]
    fn dataset2_shows_the_same_qualitative_trend() {
        // Thirty covariates with a sparse treatment score: both mechanisms
        // keep the decreasing-PEHE shape (reduced scale for test speed).
        for mech in [MechanismKind::Finite, MechanismKind::Functional] {
            let mut cfg = SweepConfig::default_for(
                SweepData::Synthetic(SyntheticConfig::new(30, EffectKind::Dataset2, 800, 0)),
                LearnerKind::R,
                mech,
            );
            cfg.seeds = vec![0, 1];
            cfg.epsilons = vec![1.0, 10.0, f64::INFINITY];
            cfg.queries = 80;
            cfg.optimizer = OptimOpts {
                scan_points: 64,
                restarts: 2,
                max_iters: 40,
                ..Default::default()
            };
            let r = run_sweep(&cfg).unwrap();
            assert!(r.failures.is_empty(), "{:?}", r.failures);
            let means: Vec<f64> = r.aggregates.iter().map(|a| a.mean_pehe).collect();
            assert!(
                means[0] >= means[1] && means[1] >= means[2],
                "{mech:?}: {means:?}"
            );
        }
    }

    #[test]
    fn csv_sweep_scores_against_supplied_truth() {
        let cfg = SyntheticConfig::new(2, EffectKind::Dataset1, 300, 11);
        let (d, cate, _, _) = generate_synthetic_full(&cfg).unwrap();
        let dir = std::env::temp_dir();
        let tag: u64 = rand::random();
        let data_path = dir.join(format!("dpcate_sweepdata_{tag}.csv"));
        let truth_path = dir.join(format!("dpcate_sweeptruth_{tag}.csv"));
        crate::data::save_csv(&d, &data_path).unwrap();
        let mut body = String::from("x1,x2,cate\n");
        for s in &d.samples {
            body.push_str(&format!(
                "{:.17e},{:.17e},{:.17e}\n",
                s.x[0],
                s.x[1],
                cate.eval(&s.x)
            ));
        }
        std::fs::write(&truth_path, body).unwrap();

        let mut sweep_cfg = SweepConfig::default_for(
            SweepData::Csv {
                data: data_path.display().to_string(),
                truth: truth_path.display().to_string(),
            },
            LearnerKind::R,
            MechanismKind::None,
        );
        sweep_cfg.seeds = vec![0];
        sweep_cfg.epsilons = vec![f64::INFINITY];
        sweep_cfg.queries = 20;
        let result = run_sweep(&sweep_cfg).unwrap();
        assert_eq!(result.cells.len(), 1);
        assert!(result.cells[0].pehe.is_finite());
        std::fs::remove_file(&data_path).ok();
        std::fs::remove_file(&truth_path).ok();
    }

    #[test]
    fn sweep_config_validation() {
        let mut cfg = small_sweep(MechanismKind::None);
        cfg.epsilons = vec![1.0, 0.5];
        assert!(run_sweep(&cfg).is_err());
        let mut cfg = small_sweep(MechanismKind::None);
        cfg.seeds = vec![1, 1];
        assert!(run_sweep(&cfg).is_err());
    }

    #[test]
    fn probe_rejects_degenerate_t_lists() {
        let mut cfg = ProbeConfig::default();
        cfg.t_values = vec![0.1, 0.2];
        assert!(orthogonality_probe(0, &cfg).is_err());
        cfg.t_values = vec![0.1, 0.15, 0.2];
        assert!(orthogonality_probe(0, &cfg).is_err());
    }

    #[test]
    fn probe_zero_perturbation_gives_zero_shift() {
        // Direct check of the underlying property: t = 0 reproduces the base
        // fit bit for bit.
        let syn = SyntheticConfig::new(1, EffectKind::Dataset1, 200, 3);
        let (d, cate, beta, gamma) = generate_synthetic_full(&syn).unwrap();
        let oracle = OracleNuisance {
            beta,
            gamma,
            cate,
            kappa: 0.01,
        };
        let cfg = ProbeConfig::default();
        let kernel = KernelSpec::new(cfg.bandwidth, 1).unwrap();
        let a = probe_fit(
            &d,
            &PerturbedOracle {
                base: &oracle,
                t: 0.0,
            },
            &cfg,
            kernel,
            false,
        )
        .unwrap();
        let b = probe_fit(&d, &oracle, &cfg, kernel, false).unwrap();
        assert_eq!(a.alpha, b.alpha);
    }

    #[test]
    fn audit_passes_and_tightens_with_regularization() {
        let cfg = AuditConfig {
            n: 40,
            trials: 60,
            ..Default::default()
        };
        let report = sensitivity_audit(&cfg).unwrap();
        assert!(report.max_ratio <= 1.0);
        assert!(report.max_observed > 0.0);

        let tighter = AuditConfig {
            lambda_reg: cfg.lambda_reg * 10.0,
            ..cfg
        };
        let report2 = sensitivity_audit(&tighter).unwrap();
        assert!(
            report2.max_observed < report.max_observed,
            "stronger regularization must shrink observed sensitivity"
        );
    }

    #[test]
    fn identical_replacement_moves_nothing() {
        let syn = SyntheticConfig::new(1, EffectKind::Dataset1, 60, 5);
        let (d, _) = crate::data::generate_synthetic(&syn).unwrap();
        let eta = fit_nuisances_nonprivate(&d, 0.05, &Default::default()).unwrap();
        let targets = build_targets(&d, &eta, LearnerKind::R).unwrap();
        let kernel = KernelSpec::new(0.3, 1).unwrap();
        let a = fit_krr(&targets, kernel, 0.05).unwrap();
        let b = fit_krr(&targets, kernel, 0.05).unwrap();
        assert!(krr_rkhs_distance(&a, &b).unwrap() <= 1e-10);
    }
}
