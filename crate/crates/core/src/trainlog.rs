//! Line-delimited training logs shared by the pre-training and both
//! fine-tuning stages.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    /// Adversarial (or plain) classification loss for this step.
    pub dat: f64,
    /// Genetic regularization loss.
    pub gr: f64,
    /// dat + lambda * gr.
    pub total: f64,
    pub lr_e: f64,
    pub lr_c: f64,
    /// Seconds since the start of the run; excluded from determinism
    /// comparisons.
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn epoch_mean(&self, epoch: usize, field: impl Fn(&StepRecord) -> f64) -> f64 {
        let vals: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(&field)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn last_epoch(&self) -> Option<usize> {
        self.records.iter().map(|r| r.epoch).max()
    }

    /// Equality of everything except wall_time.
    pub fn semantically_equal(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.step == b.step
                    && a.dat == b.dat
                    && a.gr == b.gr
                    && a.total == b.total
                    && a.lr_e == b.lr_e
                    && a.lr_c == b.lr_c
            })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        let mut out = String::new();
        for r in &self.records {
            out.push_str(
                &serde_json::to_string(r).map_err(|e| Error::io(path.display().to_string(), e))?,
            );
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_jsonl(path: &Path) -> Result<TrainLog> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut records = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(line)
                    .map_err(|e| Error::Input(format!("bad train log line: {e}")))?,
            );
        }
        Ok(TrainLog { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn jsonl_roundtrip_and_epoch_means() {
        let log = TrainLog {
            records: vec![
                StepRecord {
                    epoch: 0,
                    step: 0,
                    dat: 1.0,
                    gr: 0.5,
                    total: 11.0,
                    lr_e: 1e-4,
                    lr_c: 5e-3,
                    wall_time: 0.1,
                },
                StepRecord {
                    epoch: 0,
                    step: 1,
                    dat: 0.5,
                    gr: 0.25,
                    total: 5.5,
                    lr_e: 1e-4,
                    lr_c: 5e-3,
                    wall_time: 0.2,
                },
            ],
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        log.write_jsonl(&path).unwrap();
        let back = TrainLog::read_jsonl(&path).unwrap();
        assert!(log.semantically_equal(&back));
        assert_eq!(log.epoch_mean(0, |r| r.dat), 0.75);
    }
}
