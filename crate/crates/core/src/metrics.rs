//! Per-step training records, newline-delimited JSON on disk, CSV export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world_model::ModelLoss;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyLossRecord {
    pub grpo: f64,
    pub kl_term: f64,
    pub raw_kl: Vec<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlannerRecord {
    pub elite_phi_mean: f64,
    pub elite_phi_max: f64,
    pub iterations: usize,
    /// Fallbacks since the previous record.
    pub fallbacks: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub mean_return: f64,
    pub std_return: f64,
    pub returns: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: Phase,
    pub env_step: u64,
    pub train_step: u64,
    /// Return of the most recently finished training episode.
    pub episode_return: Option<f64>,
    pub model_loss: Option<ModelLoss>,
    pub policy_loss: Option<PolicyLossRecord>,
    pub planner: Option<PlannerRecord>,
    /// Smallest and largest advantage used in the policy update.
    pub advantage_min: Option<f64>,
    pub advantage_max: Option<f64>,
    pub eval: Option<EvalRecord>,
    pub skipped_train_steps: u64,
    pub wall_clock: Option<f64>,
}

impl MetricsRecord {
    pub fn new(phase: Phase, env_step: u64, train_step: u64) -> Self {
        Self {
            phase,
            env_step,
            train_step,
            episode_return: None,
            model_loss: None,
            policy_loss: None,
            planner: None,
            advantage_min: None,
            advantage_max: None,
            eval: None,
            skipped_train_steps: 0,
            wall_clock: None,
        }
    }
}

/// Appends records to a JSONL file.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { out: BufWriter::new(f) })
    }

    /// Opens `path` keeping only its first `keep` lines.
    pub fn truncate_to(path: &Path, keep: usize) -> Result<Self> {
        let kept: Vec<String> = if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            BufReader::new(f)
                .lines()
                .take(keep)
                .collect::<std::io::Result<_>>()
                .map_err(|e| Error::io(path, e))?
        } else {
            Vec::new()
        };
        if kept.len() != keep {
            return Err(Error::Checkpoint(format!(
                "metrics file holds {} records, checkpoint expects {keep}",
                kept.len()
            )));
        }
        let mut w = Self::create(path)?;
        for line in kept {
            writeln!(w.out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(w)
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(|e| Error::io("metrics", e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io("metrics", e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Flat row of the CSV export.
#[derive(Debug, Serialize)]
struct CsvRow {
    phase: &'static str,
    env_step: u64,
    train_step: u64,
    episode_return: Option<f64>,
    loss_consistency: Option<f64>,
    loss_reward: Option<f64>,
    loss_value: Option<f64>,
    loss_model_total: Option<f64>,
    loss_grpo: Option<f64>,
    loss_kl_term: Option<f64>,
    raw_kl_mean: Option<f64>,
    raw_kl: Option<String>,
    loss_policy_total: Option<f64>,
    elite_phi_mean: Option<f64>,
    elite_phi_max: Option<f64>,
    planner_iterations: Option<usize>,
    planner_fallbacks: Option<u64>,
    advantage_min: Option<f64>,
    advantage_max: Option<f64>,
    eval_mean_return: Option<f64>,
    eval_std_return: Option<f64>,
    skipped_train_steps: u64,
    wall_clock: Option<f64>,
}

impl From<&MetricsRecord> for CsvRow {
    fn from(r: &MetricsRecord) -> Self {
        let m = r.model_loss.as_ref();
        let p = r.policy_loss.as_ref();
        let pl = r.planner.as_ref();
        let e = r.eval.as_ref();
        Self {
            phase: match r.phase {
                Phase::Train => "train",
                Phase::Eval => "eval",
            },
            env_step: r.env_step,
            train_step: r.train_step,
            episode_return: r.episode_return,
            loss_consistency: m.map(|m| m.consistency),
            loss_reward: m.map(|m| m.reward),
            loss_value: m.map(|m| m.value),
            loss_model_total: m.map(|m| m.total),
            loss_grpo: p.map(|p| p.grpo),
            loss_kl_term: p.map(|p| p.kl_term),
            raw_kl_mean: p.map(|p| p.raw_kl.iter().sum::<f64>() / p.raw_kl.len().max(1) as f64),
            raw_kl: p.map(|p| p.raw_kl.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(";")),
            loss_policy_total: p.map(|p| p.total),
            elite_phi_mean: pl.map(|p| p.elite_phi_mean),
            elite_phi_max: pl.map(|p| p.elite_phi_max),
            planner_iterations: pl.map(|p| p.iterations),
            planner_fallbacks: pl.map(|p| p.fallbacks),
            advantage_min: r.advantage_min,
            advantage_max: r.advantage_max,
            eval_mean_return: e.map(|e| e.mean_return),
            eval_std_return: e.map(|e| e.std_return),
            skipped_train_steps: r.skipped_train_steps,
            wall_clock: r.wall_clock,
        }
    }
}

/// RFC 4180 CSV, one row per record, header first.
pub fn write_csv<W: Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(CsvRow::from(r))?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))?;
    Ok(())
}

/// Records as one JSON array.
pub fn write_json<W: Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, records)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_one_row_per_record() {
        let mut a = MetricsRecord::new(Phase::Train, 10, 1);
        a.policy_loss = Some(PolicyLossRecord {
            grpo: 1.0,
            kl_term: 0.0,
            raw_kl: vec![0.1, 0.2],
            total: -1.0,
        });
        let b = MetricsRecord::new(Phase::Eval, 20, 1);
        let mut buf = Vec::new();
        write_csv(&[a, b], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("phase,env_step,train_step"));
        assert!(lines[1].contains("0.1;0.2"));
    }

    #[test]
    fn jsonl_roundtrip_and_truncate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        for i in 0..5 {
            w.write(&MetricsRecord::new(Phase::Train, i, i)).unwrap();
        }
        w.flush().unwrap();
        assert_eq!(read_metrics(&path).unwrap().len(), 5);
        let mut w = MetricsWriter::truncate_to(&path, 3).unwrap();
        w.flush().unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[2].env_step, 2);
        assert!(MetricsWriter::truncate_to(&path, 9).is_err());
    }
}
