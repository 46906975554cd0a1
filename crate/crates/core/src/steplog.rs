//! Append-only line-oriented training log. One JSON record per step:
//! step, phase, loss terms, timestep draws, and the RNG stream counter the
//! step's randomness was derived from.

use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: String,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_real: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_synth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_prior: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_content: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub t_real: Vec<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub t_synth: Vec<usize>,
    /// Which learned prompt conditioned the prior term, when one did.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub prompt_role: Option<String>,
    /// Stream id the step's draws were derived from (equals the step).
    pub rng_counter: u64,
}

impl StepRecord {
    pub fn new(step: u64, phase: &str, loss: f64) -> Self {
        Self {
            step,
            phase: phase.to_string(),
            loss,
            loss_real: None,
            loss_synth: None,
            loss_prior: None,
            loss_content: None,
            t_real: Vec::new(),
            t_synth: Vec::new(),
            prompt_role: None,
            rng_counter: step,
        }
    }
}

pub struct StepLog {
    writer: BufWriter<File>,
}

impl StepLog {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            writer: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append_to(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            writer: BufWriter::new(OpenOptions::new().append(true).create(true).open(path)?),
        })
    }

    pub fn push(&mut self, record: &StepRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.writer, record)?;
        self.writer.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.writer.flush()
    }
}

pub fn read_step_log(path: &Path) -> std::io::Result<Vec<StepRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("steps.jsonl");
        let mut log = StepLog::create(&path).unwrap();
        let mut a = StepRecord::new(1, "prompt", 0.5);
        a.t_real = vec![3, 9];
        a.loss_real = Some(0.2);
        let b = StepRecord::new(2, "unet", 0.4);
        log.push(&a).unwrap();
        log.push(&b).unwrap();
        log.flush().unwrap();

        let back = read_step_log(&path).unwrap();
        assert_eq!(back, vec![a, b]);
    }
}
