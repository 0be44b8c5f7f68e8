//! Append-only privacy-budget ledger: JSON lines recording which budget ids
//! have been consumed, so a second release under a spent budget is refused.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::privacy::{eps_serde, PrivacyBudget};

/// Environment variable overriding the ledger location.
pub const LEDGER_ENV: &str = "DPCATE_LEDGER";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub budget_id: String,
    /// What consumed the budget: "fit" or "release".
    pub action: String,
    /// The CLI command line or caller description.
    pub command: String,
    #[serde(with = "eps_serde")]
    pub epsilon: f64,
    pub delta: f64,
    pub unix_time: u64,
}

#[derive(Debug, Clone)]
pub struct Ledger {
    path: PathBuf,
}

impl Ledger {
    pub fn at(path: impl AsRef<Path>) -> Self {
        Ledger {
            path: path.as_ref().to_path_buf(),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn entries(&self) -> Result<Vec<LedgerEntry>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let file = std::fs::File::open(&self.path)
            .map_err(|e| Error::io(self.path.display().to_string(), e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(self.path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: LedgerEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("bad ledger line: {e}"),
            })?;
            out.push(entry);
        }
        Ok(out)
    }

    pub fn append(&self, entry: &LedgerEntry) -> Result<()> {
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(self.path.display().to_string(), e))?;
        let mut line = serde_json::to_string(entry)?;
        line.push('\n');
        file.write_all(line.as_bytes())
            .map_err(|e| Error::io(self.path.display().to_string(), e))
    }

    pub fn has(&self, budget_id: &str, action: &str) -> Result<bool> {
        Ok(self
            .entries()?
            .iter()
            .any(|e| e.budget_id == budget_id && e.action == action))
    }

    /// Refuse if this budget id already has an entry for `action`, otherwise
    /// record the consumption.
    pub fn consume(
        &self,
        budget_id: &str,
        action: &str,
        command: &str,
        budget: &PrivacyBudget,
    ) -> Result<()> {
        if self.has(budget_id, action)? {
            return Err(Error::BudgetRefused(format!(
                "budget '{budget_id}' already consumed by a previous {action}; \
                 repeated releases require a fresh budget (basic composition)"
            )));
        }
        let unix_time = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.append(&LedgerEntry {
            budget_id: budget_id.to_string(),
            action: action.to_string(),
            command: command.to_string(),
            epsilon: budget.epsilon,
            delta: budget.delta,
            unix_time,
        })
    }
}
