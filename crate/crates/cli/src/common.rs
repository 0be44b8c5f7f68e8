//! Shared artifact formats and helpers for the CLI commands.

use std::path::{Path, PathBuf};

use dpcate::error::{Error, Result};
use dpcate::ledger::{Ledger, LEDGER_ENV};
use dpcate::privacy::PrivacyBudget;
use dpcate::pseudo::LearnerKind;
use dpcate::{DomainBounds, NuisancePair, SecondStageModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Serialized stage-2 model plus everything a release needs: the budget it
/// may spend, the declared domain, and the ledger key.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub budget_id: String,
    pub learner: LearnerKind,
    pub budget: PrivacyBudget,
    pub domain: DomainBounds,
    pub second_stage: SecondStageModel,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let body = serde_json::to_string_pretty(value)?;
    std::fs::write(path, body + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_json_value(value: &serde_json::Value, path: &Path) -> Result<()> {
    let body = serde_json::to_string_pretty(value)?;
    std::fs::write(path, body + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let body =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_str(&body)?)
}

pub fn load_model(path: &Path) -> Result<ModelArtifact> {
    read_json(path)
}

pub fn load_nuisances(path: &Path) -> Result<NuisancePair> {
    read_json(path)
}

/// Ledger path resolution: explicit flag, then DPCATE_LEDGER, then a default
/// file in the working directory.
pub fn resolve_ledger(flag: Option<&Path>) -> Ledger {
    let path: PathBuf = match flag {
        Some(p) => p.to_path_buf(),
        None => match std::env::var_os(LEDGER_ENV) {
            Some(v) => PathBuf::from(v),
            None => PathBuf::from("dpcate_ledger.jsonl"),
        },
    };
    Ledger::at(path)
}

/// Deterministic budget identifier: a digest of the training data bytes and
/// the privacy-relevant arguments. Paths are deliberately excluded so that
/// identical runs in different directories produce identical artifacts.
pub fn budget_id(data_bytes: &[u8], args_fingerprint: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(data_bytes);
    hasher.update(args_fingerprint.as_bytes());
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse an epsilon list like "0.1,1,10,inf".
pub fn parse_epsilons(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|tok| {
            let tok = tok.trim();
            match tok.to_ascii_lowercase().as_str() {
                "inf" | "infinity" => Ok(f64::INFINITY),
                _ => tok
                    .parse::<f64>()
                    .map_err(|_| Error::Argument(format!("invalid epsilon '{tok}'"))),
            }
        })
        .collect()
}

/// Parse a seed list: either "0..10" (half-open range) or "0,1,2".
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let s = s.trim();
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: u64 = lo
            .trim()
            .parse()
            .map_err(|_| Error::Argument(format!("invalid seed range '{s}'")))?;
        let hi: u64 = hi
            .trim()
            .parse()
            .map_err(|_| Error::Argument(format!("invalid seed range '{s}'")))?;
        if hi <= lo {
            return Err(Error::Argument(format!("empty seed range '{s}'")));
        }
        Ok((lo..hi).collect())
    } else {
        s.split(',')
            .map(|tok| {
                tok.trim()
                    .parse()
                    .map_err(|_| Error::Argument(format!("invalid seed '{tok}'")))
            })
            .collect()
    }
}
