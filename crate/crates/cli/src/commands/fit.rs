use std::path::PathBuf;

use clap::Args;
use dpcate::data::{load_csv, split_disjoint};
use dpcate::error::{Error, Result};
use dpcate::kernel::{median_heuristic, KernelSpec};
use dpcate::nuisance::{fit_nuisance_pair, FitMethod, NuisanceHyper};
use dpcate::privacy::{BudgetPlan, PrivacyBudget};
use dpcate::pseudo::{build_targets, LearnerKind};
use dpcate::secondstage::{fit_krr, fit_linear_basis, BasisSpec, SecondStageModel};

use crate::common::{budget_id, resolve_ledger, write_json, ModelArtifact};

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Training data CSV (header x1..xq,a,y).
    #[arg(long)]
    pub data: PathBuf,
    /// Explicit covariate bounds "lo:hi,lo:hi,..." (one pair per column).
    /// Without this the per-column min/max are widened by a 1% margin.
    #[arg(long)]
    pub covariate_bounds: Option<String>,
    /// Total privacy budget ε ("inf" disables noise).
    #[arg(long)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    /// Orthogonal learner: r or dr.
    #[arg(long, default_value = "r")]
    pub learner: String,
    /// Overlap clip constant κ.
    #[arg(long, default_value_t = 0.05)]
    pub kappa: f64,
    /// Fraction of rows used for stage-1 nuisance fitting.
    #[arg(long, default_value_t = 0.5)]
    pub split: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stage-1 method: output-perturbation or dp-gd.
    #[arg(long, default_value = "output-perturbation")]
    pub method: String,
    /// Stage-2 regressor: krr or linear.
    #[arg(long, default_value = "krr")]
    pub second_stage: String,
    /// Kernel bandwidth, or "median" for the (non-private!) median heuristic.
    #[arg(long, default_value = "0.35")]
    pub bandwidth: String,
    /// Stage-2 ridge λ in the operator normalization (W·K + n·λ·I).
    #[arg(long, default_value_t = 0.05)]
    pub lambda: f64,
    /// Polynomial degree of the linear-basis stage 2.
    #[arg(long, default_value_t = 2)]
    pub basis_degree: usize,
    /// Ridge penalty of the linear-basis stage 2.
    #[arg(long, default_value_t = 1e-3)]
    pub basis_reg: f64,
    /// Hessian damping of the linear-basis stage 2.
    #[arg(long, default_value_t = 0.0)]
    pub damp: f64,
    /// Stage-1 ridge regularization λ' for the outcome model.
    #[arg(long, default_value_t = 1.0)]
    pub outcome_reg: f64,
    /// Stage-1 regularization λ' for the logistic propensity model.
    #[arg(long, default_value_t = 0.25)]
    pub propensity_reg: f64,
    /// Gradient-perturbation steps (dp-gd only).
    #[arg(long, default_value_t = 60)]
    pub mlp_steps: usize,
    #[arg(long)]
    pub nuisance_out: PathBuf,
    #[arg(long)]
    pub model_out: PathBuf,
    /// Ledger file (default: $DPCATE_LEDGER or ./dpcate_ledger.jsonl).
    #[arg(long)]
    pub ledger: Option<PathBuf>,
}

pub fn run(args: &FitArgs) -> Result<()> {
    let learner = parse_learner(&args.learner)?;
    let method = match args.method.to_ascii_lowercase().as_str() {
        "output-perturbation" | "output_perturbation" => FitMethod::ParamOutputPerturbation,
        "dp-gd" | "dp_gd" | "gradient" => FitMethod::DpGradientDescent,
        "nonprivate" | "none" => FitMethod::NonPrivate,
        other => {
            return Err(Error::Argument(format!(
                "unknown method '{other}' (expected output-perturbation|dp-gd|nonprivate)"
            )))
        }
    };
    let total = PrivacyBudget::new(args.epsilon, args.delta)?;
    let plan = BudgetPlan::from_total(total)?;

    let data_bytes =
        std::fs::read(&args.data).map_err(|e| Error::io(args.data.display().to_string(), e))?;
    let fingerprint = format!(
        "fit|eps={}|delta={}|seed={}|learner={}|split={}|method={}|stage2={}",
        args.epsilon, args.delta, args.seed, args.learner, args.split, args.method,
        args.second_stage
    );
    let id = budget_id(&data_bytes, &fingerprint);

    let ledger = resolve_ledger(args.ledger.as_deref());
    if ledger.has(&id, "fit")? {
        return Err(Error::BudgetRefused(format!(
            "budget '{id}' was already consumed by an identical fit; \
             rerunning the same fit would spend the budget twice"
        )));
    }

    let bounds = args
        .covariate_bounds
        .as_deref()
        .map(parse_bounds)
        .transpose()?;
    let dataset = load_csv(&args.data, bounds)?;
    let (d_tilde, d_est) = split_disjoint(&dataset, args.split, args.seed)?;
    let hyper = NuisanceHyper {
        outcome_reg: args.outcome_reg,
        propensity_reg: args.propensity_reg,
        mlp: dpcate::nuisance::mlp::MlpHyper {
            steps: args.mlp_steps,
            ..Default::default()
        },
        seed: args.seed,
    };
    let eta = fit_nuisance_pair(
        &d_tilde,
        &plan.stage1_mu,
        &plan.stage1_pi,
        args.kappa,
        method,
        &hyper,
    )?;

    let targets = build_targets(&d_est, &eta, learner)?;
    let second_stage = match args.second_stage.to_ascii_lowercase().as_str() {
        "krr" => {
            let bandwidth = match args.bandwidth.to_ascii_lowercase().as_str() {
                "median" => {
                    let xs: Vec<Vec<f64>> = targets.iter().map(|t| t.x.clone()).collect();
                    let h = median_heuristic(&xs).ok_or_else(|| {
                        Error::Argument("median heuristic needs at least two distinct points".into())
                    })?;
                    eprintln!(
                        "warning: the median-heuristic bandwidth ({h:.4}) is data-dependent and \
                         NOT covered by the privacy accounting; use it for audits only"
                    );
                    h
                }
                other => other.parse::<f64>().map_err(|_| {
                    Error::Argument(format!("invalid bandwidth '{other}' (number or 'median')"))
                })?,
            };
            let kernel = KernelSpec::new(bandwidth, d_est.dim())?;
            SecondStageModel::Krr(fit_krr(&targets, kernel, args.lambda)?)
        }
        "linear" => {
            let basis = BasisSpec::Polynomial {
                degree: args.basis_degree,
                dim: d_est.dim(),
            };
            SecondStageModel::LinearBasis(fit_linear_basis(
                &targets,
                basis,
                args.basis_reg,
                args.damp,
            )?)
        }
        other => {
            return Err(Error::Argument(format!(
                "unknown second stage '{other}' (expected krr|linear)"
            )))
        }
    };

    write_json(&eta, &args.nuisance_out)?;
    let artifact = ModelArtifact {
        budget_id: id.clone(),
        learner,
        budget: total,
        domain: dataset.bounds(),
        second_stage,
    };
    write_json(&artifact, &args.model_out)?;
    ledger.consume(&id, "fit", &fingerprint, &total)?;
    println!(
        "fitted nuisances ({} rows) and stage-2 model ({} rows); budget id {id}",
        d_tilde.n(),
        d_est.n()
    );
    Ok(())
}

fn parse_bounds(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(',')
        .map(|pair| {
            let (lo, hi) = pair
                .split_once(':')
                .ok_or_else(|| Error::Argument(format!("bad bound '{pair}', expected lo:hi")))?;
            let lo: f64 = lo
                .trim()
                .parse()
                .map_err(|_| Error::Argument(format!("bad bound '{pair}'")))?;
            let hi: f64 = hi
                .trim()
                .parse()
                .map_err(|_| Error::Argument(format!("bad bound '{pair}'")))?;
            Ok((lo, hi))
        })
        .collect()
}

pub fn parse_learner(s: &str) -> Result<LearnerKind> {
    match s.to_ascii_lowercase().as_str() {
        "r" => Ok(LearnerKind::R),
        "dr" => Ok(LearnerKind::Dr),
        other => Err(Error::Argument(format!(
            "unknown learner '{other}' (expected r|dr)"
        ))),
    }
}
