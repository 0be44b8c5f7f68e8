use clap::{Args, Subcommand};
use dpcate::error::{Error, Result};
use dpcate::eval::{orthogonality_probe, sensitivity_audit, AuditConfig, ProbeConfig};
use dpcate::kernel::KernelSpec;

use crate::commands::fit::parse_learner;

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[command(subcommand)]
    pub which: AuditKind,
}

#[derive(Subcommand, Debug)]
pub enum AuditKind {
    /// Empirical check of the RKHS sensitivity bound under single-sample
    /// replacement: every observed shift must stay below the bound.
    Sensitivity(SensitivityArgs),
    /// Second-order sensitivity of the stage-2 fit to nuisance perturbation
    /// (log-log slope ≈ 2), with a plug-in contrast near slope 1.
    Orthogonality(OrthogonalityArgs),
}

#[derive(Args, Debug)]
pub struct SensitivityArgs {
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 0.3)]
    pub bandwidth: f64,
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lambda: f64,
    #[arg(long, default_value = "r")]
    pub learner: String,
    #[arg(long, default_value_t = 0.05)]
    pub kappa: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct OrthogonalityArgs {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
    /// Comma-separated perturbation magnitudes.
    #[arg(long, default_value = "0.02,0.04,0.08,0.16")]
    pub t: String,
    #[arg(long, default_value = "r")]
    pub learner: String,
    /// Probe the non-orthogonal plug-in target instead (expected slope ≈ 1).
    #[arg(long)]
    pub plugin: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(args: &AuditArgs) -> Result<()> {
    match &args.which {
        AuditKind::Sensitivity(a) => {
            let cfg = AuditConfig {
                n: a.n,
                trials: a.trials,
                kernel: KernelSpec::new(a.bandwidth, a.dim)?,
                lambda_reg: a.lambda,
                kind: parse_learner(&a.learner)?,
                kappa: a.kappa,
                seed: a.seed,
            };
            let report = sensitivity_audit(&cfg)?;
            println!(
                "sensitivity audit PASS: {} trials, max observed {:.6e} vs bound {:.6e} \
                 (ratio {:.4}, L = {:.3})",
                report.trials, report.max_observed, report.bound, report.max_ratio,
                report.lipschitz
            );
            Ok(())
        }
        AuditKind::Orthogonality(a) => {
            let t_values: Vec<f64> = a
                .t
                .split(',')
                .map(|tok| {
                    tok.trim()
                        .parse()
                        .map_err(|_| Error::Argument(format!("invalid magnitude '{tok}'")))
                })
                .collect::<Result<_>>()?;
            let cfg = ProbeConfig {
                n: a.n,
                seeds: a.seeds,
                t_values,
                kind: parse_learner(&a.learner)?,
                plugin: a.plugin,
                ..Default::default()
            };
            let slope = orthogonality_probe(a.seed, &cfg)?;
            let (lo, hi) = if a.plugin { (0.8, 1.2) } else { (1.6, 2.4) };
            println!("orthogonality probe slope: {slope:.4} (expected range [{lo}, {hi}])");
            if slope < lo || slope > hi {
                return Err(Error::AuditFailure(format!(
                    "slope {slope:.4} outside [{lo}, {hi}]"
                )));
            }
            println!("orthogonality audit PASS");
            Ok(())
        }
    }
}
