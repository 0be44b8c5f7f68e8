//! Dataset representation, CSV ingestion, disjoint stage splitting and the
//! synthetic data-generating processes used throughout the experiments.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed triple (x, a, y). The unit of privacy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Covariate vector of length q.
    pub x: Vec<f64>,
    /// Binary treatment indicator.
    pub a: bool,
    /// Observed outcome.
    pub y: f64,
}

impl Sample {
    pub fn a_f64(&self) -> f64 {
        if self.a {
            1.0
        } else {
            0.0
        }
    }
}

/// Per-coordinate covariate intervals plus the outcome interval. The release
/// mechanisms take suprema over this box, so it must contain every admissible
/// sample, not merely the observed ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBounds {
    pub covariates: Vec<(f64, f64)>,
    pub outcome: (f64, f64),
}

impl DomainBounds {
    pub fn dim(&self) -> usize {
        self.covariates.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (j, &(lo, hi)) in self.covariates.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Argument(format!(
                    "covariate bound {j} must be a finite interval with lo < hi, got ({lo}, {hi})"
                )));
            }
        }
        let (lo, hi) = self.outcome;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Argument(format!(
                "outcome bound must be a finite interval with lo < hi, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }

    pub fn contains(&self, s: &Sample) -> bool {
        s.x.len() == self.covariates.len()
            && s.x
                .iter()
                .zip(&self.covariates)
                .all(|(v, &(lo, hi))| *v >= lo && *v <= hi)
            && s.y >= self.outcome.0
            && s.y <= self.outcome.1
    }

    /// Largest Euclidean norm of the feature vector [1, x] over the box.
    /// Used by the closed-form sensitivity of the linear stage-1 models.
    pub fn max_feature_norm(&self) -> f64 {
        let sum: f64 = self
            .covariates
            .iter()
            .map(|&(lo, hi)| lo.abs().max(hi.abs()).powi(2))
            .sum();
        (1.0 + sum).sqrt()
    }

    /// Largest absolute outcome value over the interval.
    pub fn max_abs_outcome(&self) -> f64 {
        self.outcome.0.abs().max(self.outcome.1.abs())
    }
}

/// An immutable collection of samples together with the declared domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub covariate_bounds: Vec<(f64, f64)>,
    pub outcome_bounds: (f64, f64),
}

impl Dataset {
    pub fn new(
        samples: Vec<Sample>,
        covariate_bounds: Vec<(f64, f64)>,
        outcome_bounds: (f64, f64),
    ) -> Result<Self> {
        let d = Dataset {
            samples,
            covariate_bounds,
            outcome_bounds,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn dim(&self) -> usize {
        self.covariate_bounds.len()
    }

    pub fn bounds(&self) -> DomainBounds {
        DomainBounds {
            covariates: self.covariate_bounds.clone(),
            outcome: self.outcome_bounds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds().validate()?;
        let q = self.dim();
        for (i, s) in self.samples.iter().enumerate() {
            if s.x.len() != q {
                return Err(Error::Domain(format!(
                    "sample {i} has {} covariates, expected {q}",
                    s.x.len()
                )));
            }
            if !self.bounds().contains(s) {
                return Err(Error::Domain(format!(
                    "sample {i} falls outside the declared bounds"
                )));
            }
        }
        Ok(())
    }
}

/// Widen an observed interval by 1% of its range on each side so that the
/// sensitivity suprema are never pinned exactly on a data point.
fn widen(lo: f64, hi: f64) -> (f64, f64) {
    let range = hi - lo;
    let margin = if range > 0.0 {
        0.01 * range
    } else {
        0.01 * lo.abs().max(1.0)
    };
    (lo - margin, hi + margin)
}

/// Load a dataset from a CSV file with header `x1,...,xq,a,y`.
///
/// When no explicit bounds are given, per-column min/max are widened by a 1%
/// margin; the outcome interval is always inferred the same way.
pub fn load_csv(path: impl AsRef<Path>, covariate_bounds: Option<Vec<(f64, f64)>>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let header = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::io(path.display().to_string(), e))?,
        None => return Err(Error::Dataset("empty file".into())),
    };
    let cols: Vec<&str> = header.trim().split(',').map(|c| c.trim()).collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "a" || cols[cols.len() - 1] != "y" {
        return Err(Error::Parse {
            line: 1,
            message: "expected header x1,...,xq,a,y".into(),
        });
    }
    let q = cols.len() - 2;

    let mut samples = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != q + 2 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {} fields, found {}", q + 2, fields.len()),
            });
        }
        let mut x = Vec::with_capacity(q);
        for (j, f) in fields[..q].iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("invalid number '{}' in column x{}", f.trim(), j + 1),
            })?;
            x.push(v);
        }
        let a_raw: f64 = fields[q].trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("invalid number '{}' in column a", fields[q].trim()),
        })?;
        let a = if a_raw == 0.0 {
            false
        } else if a_raw == 1.0 {
            true
        } else {
            return Err(Error::Domain(format!(
                "treatment must be 0 or 1, got {} on line {}",
                a_raw, lineno
            )));
        };
        let y: f64 = fields[q + 1].trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("invalid number '{}' in column y", fields[q + 1].trim()),
        })?;
        samples.push(Sample { x, a, y });
    }
    if samples.is_empty() {
        return Err(Error::Dataset("file contains a header but no rows".into()));
    }

    let covariate_bounds = match covariate_bounds {
        Some(b) => {
            if b.len() != q {
                return Err(Error::Argument(format!(
                    "{} covariate bounds supplied for {} columns",
                    b.len(),
                    q
                )));
            }
            b
        }
        None => (0..q)
            .map(|j| {
                let lo = samples.iter().map(|s| s.x[j]).fold(f64::INFINITY, f64::min);
                let hi = samples.iter().map(|s| s.x[j]).fold(f64::NEG_INFINITY, f64::max);
                widen(lo, hi)
            })
            .collect(),
    };
    let y_lo = samples.iter().map(|s| s.y).fold(f64::INFINITY, f64::min);
    let y_hi = samples.iter().map(|s| s.y).fold(f64::NEG_INFINITY, f64::max);
    Dataset::new(samples, covariate_bounds, widen(y_lo, y_hi))
}

/// Write a dataset in the CSV format understood by [`load_csv`].
pub fn save_csv(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut header: Vec<String> = (1..=d.dim()).map(|j| format!("x{j}")).collect();
    header.push("a".into());
    header.push("y".into());
    let mut buf = header.join(",");
    buf.push('\n');
    for s in &d.samples {
        for v in &s.x {
            buf.push_str(&format!("{v:.17e},"));
        }
        buf.push_str(&format!("{},{:.17e}\n", s.a as u8, s.y));
    }
    out.write_all(buf.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load a query file with header `x1,...,xq` (covariates only).
pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::io(path.display().to_string(), e))?,
        None => return Err(Error::Dataset("empty file".into())),
    };
    let q = header.trim().split(',').count();
    let mut queries = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut x = Vec::with_capacity(q);
        for f in line.trim().split(',') {
            x.push(f.trim().parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("invalid number '{}'", f.trim()),
            })?);
        }
        if x.len() != q {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {} fields, found {}", q, x.len()),
            });
        }
        queries.push(x);
    }
    if queries.is_empty() {
        return Err(Error::Dataset("query file contains no rows".into()));
    }
    Ok(queries)
}

/// Split into two disjoint subsets of sizes ⌊ratio·N⌋ and N − ⌊ratio·N⌋.
/// Deterministic given the seed; bounds metadata is shared by both halves.
pub fn split_disjoint(d: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Argument(format!(
            "split ratio must lie in (0,1), got {ratio}"
        )));
    }
    if d.samples.is_empty() {
        return Err(Error::Dataset("cannot split an empty dataset".into()));
    }
    let n = d.n();
    let n_first = ((ratio * n as f64).floor() as usize).min(n);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let mut first: Vec<usize> = indices[..n_first].to_vec();
    let mut second: Vec<usize> = indices[n_first..].to_vec();
    // Keep original row order within each part.
    first.sort_unstable();
    second.sort_unstable();
    let pick = |idx: &[usize]| Dataset {
        samples: idx.iter().map(|&i| d.samples[i].clone()).collect(),
        covariate_bounds: d.covariate_bounds.clone(),
        outcome_bounds: d.outcome_bounds,
    };
    Ok((pick(&first), pick(&second)))
}

/// Shape of the treatment-effect function used by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    /// exp(2·x0) + 3·sin(4·x0)
    Dataset1,
    /// exp(2·x0) + 3·sin(4·x1)
    Dataset2,
    /// A constant effect.
    Constant(f64),
}

/// Configuration of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Covariate dimension.
    pub p: usize,
    pub effect_kind: EffectKind,
    /// Sampling interval for the treatment-score coefficients β.
    #[serde(default = "default_beta_support")]
    pub beta_support: (f64, f64),
    /// Sampling interval for the outcome coefficients γ.
    #[serde(default = "default_gamma_support")]
    pub gamma_support: (f64, f64),
    /// Number of leading coordinates with nonzero β/γ. `None` means
    /// min(p, 5): with many active treatment-score coordinates the score
    /// xᵀβ exceeds the η ~ U[-1,1] threshold almost surely and one arm
    /// empties out.
    #[serde(default)]
    pub support_size: Option<usize>,
    pub n: usize,
    pub seed: u64,
}

fn default_beta_support() -> (f64, f64) {
    (0.0, 0.3)
}

fn default_gamma_support() -> (f64, f64) {
    (0.0, 1.0)
}

impl SyntheticConfig {
    pub fn new(p: usize, effect_kind: EffectKind, n: usize, seed: u64) -> Self {
        SyntheticConfig {
            p,
            effect_kind,
            beta_support: default_beta_support(),
            gamma_support: default_gamma_support(),
            support_size: None,
            n,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 1 {
            return Err(Error::Argument("p must be >= 1".into()));
        }
        if self.n < 1 {
            return Err(Error::Argument("n must be >= 1".into()));
        }
        if matches!(self.effect_kind, EffectKind::Dataset2) && self.p < 2 {
            return Err(Error::Argument(
                "effect kind dataset2 requires p >= 2".into(),
            ));
        }
        if let Some(s) = self.support_size {
            if s == 0 || s > self.p {
                return Err(Error::Argument(format!(
                    "support size must lie in 1..=p, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// The ground-truth treatment-effect function returned by the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueCate {
    pub kind: EffectKind,
}

impl TrueCate {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self.kind {
            EffectKind::Dataset1 => (2.0 * x[0]).exp() + 3.0 * (4.0 * x[0]).sin(),
            EffectKind::Dataset2 => (2.0 * x[0]).exp() + 3.0 * (4.0 * x[1]).sin(),
            EffectKind::Constant(c) => c,
        }
    }

    /// Range of the effect over [0,1]^p, with a small safety inflation.
    fn range(&self) -> (f64, f64) {
        match self.kind {
            EffectKind::Constant(c) => (c, c),
            EffectKind::Dataset1 => {
                // Both terms share x0: dense univariate scan.
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                let m = 20_000;
                for i in 0..=m {
                    let t = i as f64 / m as f64;
                    let v = self.eval(&[t]);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                (lo - 1e-3, hi + 1e-3)
            }
            EffectKind::Dataset2 => {
                // Additive in independent coordinates: exp(2x0) is monotone
                // on [1, e²]; sin(4x1) on [0,1] spans [sin(4), 1] (the only
                // interior critical point is the maximum at 4x1 = π/2).
                let exp_range = (1.0, (2.0f64).exp());
                let sin_range = (3.0 * (4.0f64).sin(), 3.0);
                (
                    exp_range.0 + sin_range.0 - 1e-3,
                    exp_range.1 + sin_range.1 + 1e-3,
                )
            }
        }
    }
}

/// Draw a synthetic observational dataset.
///
/// X ~ U[0,1]^p, A = 1{xᵀβ ≥ η} with η ~ U[-1,1], Y = θ(x)·A + xᵀγ + ε with
/// ε ~ U[-1,1]. Covariate bounds are [0,1]^p; outcome bounds are derived from
/// the analytic ranges of θ, xᵀγ and the noise.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, TrueCate)> {
    let (d, cate, _, _) = generate_synthetic_full(cfg)?;
    Ok((d, cate))
}

/// Like [`generate_synthetic`], additionally returning the drawn coefficient
/// vectors (β, γ) so callers can build the exact oracle nuisances.
pub fn generate_synthetic_full(
    cfg: &SyntheticConfig,
) -> Result<(Dataset, TrueCate, Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let support = cfg.support_size.unwrap_or(cfg.p.min(5));
    let draw_coefs = |rng: &mut ChaCha12Rng, (lo, hi): (f64, f64)| -> Vec<f64> {
        (0..cfg.p)
            .map(|j| {
                if j < support {
                    rng.random_range(lo..hi)
                } else {
                    0.0
                }
            })
            .collect()
    };
    let beta = draw_coefs(&mut rng, cfg.beta_support);
    let gamma = draw_coefs(&mut rng, cfg.gamma_support);

    let cate = TrueCate {
        kind: cfg.effect_kind,
    };
    let mut samples = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let x: Vec<f64> = (0..cfg.p).map(|_| rng.random_range(0.0..1.0)).collect();
        let eta: f64 = rng.random_range(-1.0..1.0);
        let score: f64 = x.iter().zip(&beta).map(|(v, b)| v * b).sum();
        let a = score >= eta;
        let eps: f64 = rng.random_range(-1.0..1.0);
        let lin: f64 = x.iter().zip(&gamma).map(|(v, g)| v * g).sum();
        let y = cate.eval(&x) * (a as u8 as f64) + lin + eps;
        samples.push(Sample { x, a, y });
    }

    let (theta_lo, theta_hi) = cate.range();
    let gamma_pos: f64 = gamma.iter().map(|g| g.max(0.0)).sum();
    let gamma_neg: f64 = gamma.iter().map(|g| g.min(0.0)).sum();
    let y_lo = theta_lo.min(0.0) + gamma_neg - 1.0;
    let y_hi = theta_hi.max(0.0) + gamma_pos + 1.0;

    let d = Dataset::new(
        samples,
        vec![(0.0, 1.0); cfg.p],
        (y_lo - 1e-9, y_hi + 1e-9),
    )?;
    Ok((d, cate, beta, gamma))
}
