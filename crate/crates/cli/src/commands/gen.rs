use std::path::PathBuf;

use clap::Args;
use dpcate::data::{save_csv, EffectKind, SyntheticConfig};
use dpcate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::common::{read_json, write_json};

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Effect shape: dataset1, dataset2 or constant.
    #[arg(long, default_value = "dataset1")]
    pub kind: String,
    /// Value of the constant effect (only with --kind constant).
    #[arg(long, default_value_t = 1.0)]
    pub effect_value: f64,
    /// Sample count.
    #[arg(long, required_unless_present = "config")]
    pub n: Option<usize>,
    /// Covariate dimension (defaults: 2 for dataset1, 30 for dataset2).
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of nonzero leading coefficients in β/γ (default: all).
    #[arg(long)]
    pub support: Option<usize>,
    /// Read the full generator configuration from a JSON file instead of flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output CSV for the generated samples.
    #[arg(long)]
    pub out: PathBuf,
    /// Additionally draw this many fresh query points.
    #[arg(long, default_value_t = 300)]
    pub queries: usize,
    /// Output CSV (x1..xq) for the query points.
    #[arg(long)]
    pub queries_out: Option<PathBuf>,
    /// Output CSV (x1..xq,cate) with the true effect at the query points.
    #[arg(long)]
    pub cate_out: Option<PathBuf>,
    /// Output CSV (x1..xq,cate) with the true effect at every generated data
    /// row (aligned with --out; needed for CSV-mode sweeps).
    #[arg(long)]
    pub data_cate_out: Option<PathBuf>,
    /// Echo the effective generator configuration to this JSON file.
    #[arg(long)]
    pub config_out: Option<PathBuf>,
}

pub fn run(args: &GenArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => read_json::<SyntheticConfig>(path)?,
        None => {
            let kind = match args.kind.to_ascii_lowercase().as_str() {
                "dataset1" => EffectKind::Dataset1,
                "dataset2" => EffectKind::Dataset2,
                "constant" => EffectKind::Constant(args.effect_value),
                other => {
                    return Err(Error::Argument(format!(
                        "unknown effect kind '{other}' (expected dataset1|dataset2|constant)"
                    )))
                }
            };
            let p = args.p.unwrap_or(match kind {
                EffectKind::Dataset2 => 30,
                _ => 2,
            });
            let mut cfg = SyntheticConfig::new(
                p,
                kind,
                args.n.ok_or_else(|| Error::Argument("--n is required".into()))?,
                args.seed,
            );
            cfg.support_size = args.support;
            cfg
        }
    };

    let (dataset, cate) = dpcate::data::generate_synthetic(&cfg)?;
    save_csv(&dataset, &args.out)?;
    println!(
        "wrote {} samples (p = {}) to {}",
        dataset.n(),
        dataset.dim(),
        args.out.display()
    );

    if args.queries_out.is_some() || args.cate_out.is_some() {
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0x71c5));
        let points: Vec<Vec<f64>> = (0..args.queries)
            .map(|_| (0..cfg.p).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let header: Vec<String> = (1..=cfg.p).map(|j| format!("x{j}")).collect();
        if let Some(qpath) = &args.queries_out {
            let mut body = header.join(",");
            body.push('\n');
            for x in &points {
                let row: Vec<String> = x.iter().map(|v| format!("{v:.17e}")).collect();
                body.push_str(&row.join(","));
                body.push('\n');
            }
            std::fs::write(qpath, body).map_err(|e| Error::io(qpath.display().to_string(), e))?;
            println!("wrote {} query points to {}", points.len(), qpath.display());
        }
        if let Some(cpath) = &args.cate_out {
            let mut body = header.join(",");
            body.push_str(",cate\n");
            for x in &points {
                let row: Vec<String> = x.iter().map(|v| format!("{v:.17e}")).collect();
                body.push_str(&row.join(","));
                body.push_str(&format!(",{:.17e}\n", cate.eval(x)));
            }
            std::fs::write(cpath, body).map_err(|e| Error::io(cpath.display().to_string(), e))?;
            println!("wrote true effects to {}", cpath.display());
        }
    }
    if let Some(path) = &args.data_cate_out {
        let header: Vec<String> = (1..=cfg.p).map(|j| format!("x{j}")).collect();
        let mut body = header.join(",");
        body.push_str(",cate\n");
        for s in &dataset.samples {
            let row: Vec<String> = s.x.iter().map(|v| format!("{v:.17e}")).collect();
            body.push_str(&row.join(","));
            body.push_str(&format!(",{:.17e}\n", cate.eval(&s.x)));
        }
        std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))?;
        println!("wrote per-row true effects to {}", path.display());
    }
    if let Some(path) = &args.config_out {
        write_json(&cfg, path)?;
    }
    Ok(())
}
