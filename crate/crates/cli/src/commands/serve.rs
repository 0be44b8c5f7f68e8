use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::Args;
use dpcate::error::{Error, Result};
use dpcate::functional_mech::{
    calibration_r, iterative_init, iterative_query, squared_loss_lipschitz, GpMode, GpNoiseState,
};
use dpcate::secondstage::SecondStageModel;

use crate::common::{load_model, load_nuisances, read_json, resolve_ledger, write_json};

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub nuisance: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the sampler state to this file after each answered query, and
    /// resume from it when it already exists.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Condition on raw private outputs as printed in the iterative
    /// pseudo-code instead of on the noise path (comparison mode; the two
    /// differ after the first query).
    #[arg(long)]
    pub literal_gp: bool,
    #[arg(long)]
    pub lipschitz: Option<f64>,
    #[arg(long)]
    pub ledger: Option<PathBuf>,
}

#[derive(serde::Deserialize)]
struct Request {
    x: Vec<f64>,
}

pub fn run(args: &ServeArgs) -> Result<()> {
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    run_io(args, &mut stdin.lock(), &mut stdout.lock())
}

pub fn run_io(args: &ServeArgs, input: &mut impl BufRead, output: &mut impl Write) -> Result<()> {
    let mut state: GpNoiseState = match &args.checkpoint {
        Some(path) if path.exists() => read_json(path)?,
        _ => {
            let artifact = load_model(&args.model)?;
            let eta = load_nuisances(&args.nuisance)?;
            let model = match artifact.second_stage {
                SecondStageModel::Krr(m) => m,
                SecondStageModel::LinearBasis(_) => {
                    return Err(Error::Argument(
                        "serve mode requires a kernel ridge second stage".into(),
                    ))
                }
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
            // Serving is a single functional release: consume the budget when
            // the state is first created (resuming a checkpoint does not
            // spend it again).
            let ledger = resolve_ledger(args.ledger.as_deref());
            ledger.consume(&artifact.budget_id, "release", "serve", &artifact.budget)?;
            let mode = if args.literal_gp {
                GpMode::LiteralOutputs
            } else {
                GpMode::NoisePath
            };
            iterative_init(model, calibration, mode)?
        }
    };

    let mut line = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line).map_err(|e| Error::io("stdin", e))? == 0 {
            break; // EOF
        }
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(line.trim()) {
            Err(e) => serde_json::json!({ "error": format!("bad request: {e}") }),
            Ok(req) => {
                // Per-query seeds derive from the base seed and the query
                // index, so a restart from a checkpoint reproduces the
                // remaining stream.
                let index = state.query_count() as u64;
                let seed = args.seed.wrapping_add(index.wrapping_mul(0x9e3779b9));
                match iterative_query(&mut state, &req.x, seed) {
                    Ok(estimate) => {
                        if let Some(path) = &args.checkpoint {
                            write_json(&state, path)?;
                        }
                        serde_json::json!({
                            "estimate": estimate,
                            "query_index": state.query_count(),
                        })
                    }
                    Err(e) => serde_json::json!({ "error": e.to_string() }),
                }
            }
        };
        writeln!(output, "{response}").map_err(|e| Error::io("stdout", e))?;
        output.flush().map_err(|e| Error::io("stdout", e))?;
    }
    Ok(())
}
