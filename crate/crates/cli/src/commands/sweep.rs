use std::path::PathBuf;

use clap::Args;
use dpcate::data::{EffectKind, SyntheticConfig};
use dpcate::error::{Error, Result};
use dpcate::eval::{format_aggregates, run_sweep, MechanismKind, SweepConfig, SweepData};

use crate::commands::fit::parse_learner;
use crate::common::{parse_epsilons, parse_seeds, read_json, write_json};

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Full sweep configuration as JSON (overrides the flags below).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Synthetic effect shape: dataset1 or dataset2.
    #[arg(long, default_value = "dataset1")]
    pub kind: String,
    #[arg(long, default_value_t = 3000)]
    pub n: usize,
    #[arg(long, default_value = "r")]
    pub learner: String,
    /// finite, functional or none.
    #[arg(long, default_value = "finite")]
    pub mechanism: String,
    /// Comma-separated ascending budgets, e.g. "0.1,1,10,inf".
    #[arg(long, default_value = "0.1,1,10,inf")]
    pub epsilons: String,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    /// Seed list "0,1,2" or range "0..10".
    #[arg(long, default_value = "0..10")]
    pub seeds: String,
    #[arg(long, default_value_t = 300)]
    pub queries: usize,
    /// Long-format CSV output (epsilon,seed,pehe,baseline_pehe).
    #[arg(long)]
    pub out: PathBuf,
    /// JSON summary output.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

pub fn run(args: &SweepArgs) -> Result<()> {
    let cfg: SweepConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => {
            let kind = match args.kind.to_ascii_lowercase().as_str() {
                "dataset1" => EffectKind::Dataset1,
                "dataset2" => EffectKind::Dataset2,
                other => {
                    return Err(Error::Argument(format!(
                        "unknown sweep dataset '{other}' (expected dataset1|dataset2)"
                    )))
                }
            };
            let p = match kind {
                EffectKind::Dataset2 => 30,
                _ => 2,
            };
            let mechanism = match args.mechanism.to_ascii_lowercase().as_str() {
                "finite" => MechanismKind::Finite,
                "functional" => MechanismKind::Functional,
                "none" => MechanismKind::None,
                other => {
                    return Err(Error::Argument(format!(
                        "unknown mechanism '{other}' (expected finite|functional|none)"
                    )))
                }
            };
            let mut cfg = SweepConfig::default_for(
                SweepData::Synthetic(SyntheticConfig::new(p, kind, args.n, 0)),
                parse_learner(&args.learner)?,
                mechanism,
            );
            cfg.epsilons = parse_epsilons(&args.epsilons)?;
            cfg.delta = args.delta;
            cfg.seeds = parse_seeds(&args.seeds)?;
            cfg.queries = args.queries;
            cfg
        }
    };

    let result = run_sweep(&cfg)?;
    std::fs::write(&args.out, result.to_csv())
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    if let Some(path) = &args.summary {
        write_json(&result, path)?;
    }
    print!("{}", format_aggregates(&result));
    println!("wrote sweep table to {}", args.out.display());
    if !result.failures.is_empty() {
        for f in &result.failures {
            eprintln!("sweep failure: {f}");
        }
        return Err(Error::Numeric(format!(
            "{} of {} seeds failed; partial results were written",
            result.failures.len(),
            cfg.seeds.len()
        )));
    }
    Ok(())
}
