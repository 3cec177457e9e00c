//! Per-epoch hyperparameter schedules: recording, (de)serialization,
//! time rescaling and replay.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugmentSpace, Slot};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub run_id: String,
    pub seed: u64,
    pub strategy: String,
    pub config_hash: String,
    pub space: AugmentSpace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub epoch: usize,
    pub policy: Vec<Slot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub meta: ScheduleMeta,
    pub entries: Vec<ScheduleEntry>,
}

/// Hex SHA-256 of a config's canonical text.
pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Source index for target epoch `e` when stretching `source` snapshots
/// over `target` epochs: `round(e·(S−1)/(E−1))`, halves rounded up, and
/// the last snapshot when `E = 1`.
pub fn rescale_index(e: usize, source: usize, target: usize) -> usize {
    if target <= 1 {
        return source - 1;
    }
    (2 * e * (source - 1) + (target - 1)) / (2 * (target - 1))
}

impl Schedule {
    pub fn new(meta: ScheduleMeta) -> Self {
        Self {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends a snapshot of `lambda` for `epoch`.
    pub fn record(&mut self, epoch: usize, lambda: &[f64]) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if epoch <= last.epoch {
                return Err(Error::Contract(format!(
                    "schedule epochs must increase: {epoch} after {}",
                    last.epoch
                )));
            }
        }
        let policy = self.meta.space.slots(lambda)?;
        self.entries.push(ScheduleEntry { epoch, policy });
        Ok(())
    }

    pub fn rescale(&self, target_epochs: usize) -> Result<Schedule> {
        if self.is_empty() {
            return Err(Error::Empty("schedule"));
        }
        if target_epochs == 0 {
            return Err(Error::Config("rescale target must be at least one epoch".into()));
        }
        let entries = (0..target_epochs)
            .map(|e| ScheduleEntry {
                epoch: e,
                policy: self.entries[rescale_index(e, self.len(), target_epochs)].policy.clone(),
            })
            .collect();
        Ok(Schedule {
            meta: self.meta.clone(),
            entries,
        })
    }

    /// Logits of the snapshot at position `epoch`.
    pub fn replay(&self, epoch: usize) -> Result<Vec<f64>> {
        let entry = self.entries.get(epoch).ok_or(Error::OutOfRange {
            index: epoch,
            len: self.len(),
        })?;
        self.meta.space.lambda_from_slots(&entry.policy)
    }

    fn validate(&self) -> Result<()> {
        for (i, w) in self.entries.windows(2).enumerate() {
            if w[1].epoch <= w[0].epoch {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("entry {} epoch {} does not increase", i + 1, w[1].epoch),
                });
            }
        }
        for e in &self.entries {
            self.meta.space.lambda_from_slots(&e.policy)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Schedule = serde_json::from_str(text).map_err(|e| Error::Format {
            offset: 0,
            message: format!("schedule: {e}"),
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// One row per (epoch, instance): `epoch,op,copy,prob,mag`; empty
    /// cells where a value does not apply.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,op,copy,prob,mag\n");
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.entries {
            for s in &e.policy {
                let _ = writeln!(out, "{},{},{},{},{}", e.epoch, s.op, s.copy, cell(s.prob), cell(s.mag));
            }
        }
        out
    }
}
