use std::path::PathBuf;

use clap::Args;
use dpcate::data::load_queries;
use dpcate::error::{Error, Result};
use dpcate::finite_mech::release_finite;
use dpcate::functional_mech::{calibration_r, release_function_batch, squared_loss_lipschitz};
use dpcate::optim::OptimOpts;
use dpcate::secondstage::SecondStageModel;

use crate::common::{load_model, load_nuisances, resolve_ledger, write_json_value};

#[derive(Args, Debug)]
pub struct ReleaseArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub nuisance: PathBuf,
    /// Query CSV with header x1..xq.
    #[arg(long)]
    pub queries: PathBuf,
    /// finite or functional.
    #[arg(long, default_value = "finite")]
    pub mechanism: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report (finite, JSON) or estimate table (functional, CSV).
    #[arg(long)]
    pub out: PathBuf,
    /// Include raw estimates and noise internals in the output.
    /// This voids the privacy guarantee of the file; audit use only.
    #[arg(long)]
    pub audit: bool,
    /// Override the derived Lipschitz constant (functional mechanism).
    #[arg(long)]
    pub lipschitz: Option<f64>,
    /// Sensitivity-search scan points (finite mechanism).
    #[arg(long, default_value_t = 256)]
    pub scan_points: usize,
    /// Sensitivity-search multistarts (finite mechanism).
    #[arg(long, default_value_t = 8)]
    pub restarts: usize,
    #[arg(long)]
    pub ledger: Option<PathBuf>,
}

pub fn run(args: &ReleaseArgs) -> Result<()> {
    let artifact = load_model(&args.model)?;
    let eta = load_nuisances(&args.nuisance)?;
    let queries = load_queries(&args.queries)?;
    let ledger = resolve_ledger(args.ledger.as_deref());

    if args.audit {
        eprintln!(
            "=============================================================\n\
             WARNING: --audit embeds raw (pre-noise) estimates and the\n\
             noise draw in the output. The file is NOT differentially\n\
             private. Keep it inside the trusted curator boundary.\n\
             ============================================================="
        );
    }

    // Validate the request fully before spending the budget.
    let mechanism = args.mechanism.to_ascii_lowercase();
    match mechanism.as_str() {
        "finite" => {}
        "functional" => {
            if !matches!(artifact.second_stage, SecondStageModel::Krr(_)) {
                return Err(Error::Argument(
                    "the functional mechanism requires a kernel ridge second stage".into(),
                ));
            }
        }
        other => {
            return Err(Error::Argument(format!(
                "unknown mechanism '{other}' (expected finite|functional)"
            )))
        }
    }

    // One release per budget: refuse before any estimate is computed.
    ledger.consume(
        &artifact.budget_id,
        "release",
        &format!("release --mechanism {mechanism}"),
        &artifact.budget,
    )?;

    match mechanism.as_str() {
        "finite" => {
            let opts = OptimOpts {
                scan_points: args.scan_points,
                restarts: args.restarts,
                ..Default::default()
            };
            let report = release_finite(
                &artifact.second_stage,
                &queries,
                &eta,
                &artifact.budget,
                &artifact.domain,
                artifact.learner,
                &opts,
                args.seed,
            )?;
            write_json_value(&report.to_json(args.audit), &args.out)?;
            println!(
                "released {} private estimates (gamma = {:.6}, noise scale = {:.6}) to {}",
                report.private_estimates.len(),
                report.gamma,
                report.noise_scale,
                args.out.display()
            );
        }
        "functional" => {
            let model = match &artifact.second_stage {
                SecondStageModel::Krr(m) => m,
                SecondStageModel::LinearBasis(_) => unreachable!("validated above"),
            };
            let lipschitz = args.lipschitz.unwrap_or_else(|| {
                squared_loss_lipschitz(
                    &eta,
                    &artifact.domain,
                    artifact.learner,
                    model.lambda_reg,
                    &model.kernel,
                )
            });
            let calibration = calibration_r(
                artifact.learner,
                eta.kappa,
                lipschitz,
                model.lambda_reg,
                model.n(),
                model.kernel,
                &artifact.budget,
            )?;
            let estimates = release_function_batch(model, &queries, &calibration, args.seed)?;
            let q = model.kernel.dim;
            let mut body: String = (1..=q)
                .map(|j| format!("x{j},"))
                .collect::<String>()
                + "estimate";
            if args.audit {
                body.push_str(",raw_estimate");
            }
            body.push('\n');
            for (x, est) in queries.iter().zip(&estimates) {
                for v in x {
                    body.push_str(&format!("{v:.17e},"));
                }
                body.push_str(&format!("{est:.17e}"));
                if args.audit {
                    body.push_str(&format!(",{:.17e}", model.predict(x)?));
                }
                body.push('\n');
            }
            std::fs::write(&args.out, body)
                .map_err(|e| Error::io(args.out.display().to_string(), e))?;
            println!(
                "released {} functional estimates (r = {:.6}, L = {:.4}) to {}",
                estimates.len(),
                calibration.r_factor,
                lipschitz,
                args.out.display()
            );
        }
        _ => unreachable!("validated above"),
    }
    Ok(())
}
