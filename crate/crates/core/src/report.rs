//! Run manifests and rendered summaries.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::trainer::TrainLog;
use crate::{Error, Result};

pub const RUN_MANIFEST: &str = "run.json";

/// Version string recorded in every manifest: crate version plus the git
/// commit when built from a checkout.
pub fn tool_version() -> String {
    let git = option_env!("GAITDIFF_GIT_DESCRIBE").unwrap_or("unknown");
    format!("gaitdiff {} ({git})", env!("CARGO_PKG_VERSION"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        })
    }
}

/// Provenance written next to the outputs of every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seeds: Vec<u64>) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(Self {
            command: command.into(),
            tool_version: tool_version(),
            config_digest: sha256_hex(&serde_json::to_vec(&config)?),
            config,
            seeds,
            inputs: vec![],
            outputs: vec![],
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_MANIFEST);
        std::fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train: f64,
    pub eval: f64,
    /// Losses divided by the run's own epoch-1 value.
    pub train_norm: f64,
    pub eval_norm: f64,
    pub gap_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub label: String,
    pub points: Vec<CurvePoint>,
}

impl LossCurve {
    pub fn from_log(label: &str, log: &TrainLog) -> Result<Self> {
        let first = log
            .rows
            .first()
            .ok_or_else(|| Error::InvalidArgument(format!("train log {label:?} is empty")))?;
        let (t1, e1) = (first.train_loss, first.eval_loss);
        Ok(Self {
            label: label.into(),
            points: log
                .rows
                .iter()
                .map(|r| CurvePoint {
                    epoch: r.epoch,
                    train: r.train_loss,
                    eval: r.eval_loss,
                    train_norm: r.train_loss / t1,
                    eval_norm: r.eval_loss / e1,
                    gap_norm: r.eval_loss / e1 - r.train_loss / t1,
                })
                .collect(),
        })
    }
}

/// Long-format CSV of several curves: label, epoch, losses.
pub fn curves_csv(curves: &[LossCurve]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "epoch", "train", "eval", "train_norm", "eval_norm", "gap_norm"])?;
    for c in curves {
        for p in &c.points {
            let nums = [p.train, p.eval, p.train_norm, p.eval_norm, p.gap_norm].map(|x| x.to_string());
            w.write_record([c.label.clone(), p.epoch.to_string()].into_iter().chain(nums))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Markdown comparison of train/eval curves at their final epochs.
pub fn curves_markdown(curves: &[LossCurve]) -> String {
    let mut s = String::from("| run | epochs | final train | final eval | normalized gap |\n|---|---|---|---|---|\n");
    for c in curves {
        if let Some(p) = c.points.last() {
            let _ = writeln!(
                s,
                "| {} | {} | {:.4} | {:.4} | {:+.4} |",
                c.label, p.epoch, p.train, p.eval, p.gap_norm
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::EpochRecord;

    fn log(rows: &[(f64, f64)]) -> TrainLog {
        TrainLog {
            rows: rows
                .iter()
                .enumerate()
                .map(|(i, &(t, e))| EpochRecord {
                    epoch: i + 1,
                    train_loss: t,
                    eval_loss: e,
                    wall_s: 0.0,
                    grad_norm: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn curves_normalize_by_first_epoch() {
        let l = log(&[(2.0, 4.0), (1.0, 4.0)]);
        let c = LossCurve::from_log("a", &l).unwrap();
        assert_eq!(c.points[1].train_norm, 0.5);
        assert_eq!(c.points[1].gap_norm, 0.5);
        assert_eq!(Some(c.points[1].gap_norm), l.normalized_gap(2));
        let csv = curves_csv(&[c.clone()]).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(curves_markdown(&[c]).contains("+0.5000"));
        assert!(LossCurve::from_log("e", &log(&[])).is_err());
    }

    #[test]
    fn manifest_digests_config() {
        let a = RunManifest::new("x", &serde_json::json!({"k": 1}), vec![3]).unwrap();
        let b = RunManifest::new("x", &serde_json::json!({"k": 2}), vec![3]).unwrap();
        assert_ne!(a.config_digest, b.config_digest);
        let dir = tempfile::tempdir().unwrap();
        let p = a.write(dir.path()).unwrap();
        let back: RunManifest = serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap();
        assert_eq!(back, a);
    }
}
