//! Model checkpoints.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "GDCK"
//! 4       4     header length L (u32 LE)
//! 8       L     header, UTF-8 JSON
//! 8+L     ...   parameters in header order, f32 LE, row-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::NormStats;
use crate::denoiser::{param_count, DenoiserConfig, DenoiserModel};
use crate::diffusion::{DiffusionSchedule, LossKind, SamplerSpec, ScheduleConfig};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"GDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub tool_version: String,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    /// Sampler used at deployment unless overridden.
    pub sampler: SamplerSpec,
    pub loss_kind: LossKind,
    pub stats: NormStats,
    pub stats_digest: String,
    pub param_count: usize,
    pub params: Vec<ParamEntry>,
    /// Training provenance (config, seed, epoch, losses).
    #[serde(default)]
    pub training: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: DenoiserModel<f32>,
}

impl Checkpoint {
    pub fn new(
        model: DenoiserModel<f32>,
        schedule: ScheduleConfig,
        sampler: SamplerSpec,
        loss_kind: LossKind,
        stats: NormStats,
        training: serde_json::Value,
    ) -> Result<Self> {
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            tool_version: crate::report::tool_version(),
            denoiser: model.config.clone(),
            schedule,
            sampler,
            loss_kind,
            stats_digest: stats.digest(),
            stats,
            param_count: model.param_count(),
            params: model
                .names
                .iter()
                .zip(&model.params)
                .map(|(n, p)| ParamEntry {
                    name: n.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
            training,
        };
        let ck = Self { header, model };
        ck.validate()?;
        Ok(ck)
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.header.schedule)
    }

    /// Cross-checks header, schedule and parameters.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.schedule.steps != h.denoiser.diffusion_steps {
            return Err(Error::Validation(format!(
                "schedule has {} steps, denoiser embeds {}",
                h.schedule.steps, h.denoiser.diffusion_steps
            )));
        }
        h.sampler.validate()?;
        if h.sampler.train_steps != h.schedule.steps {
            return Err(Error::Validation("sampler and schedule disagree on K".into()));
        }
        if h.stats_digest != h.stats.digest() {
            return Err(Error::Validation("normalization stats digest mismatch".into()));
        }
        let (s, a, g) = h.stats.dims();
        let c = &h.denoiser;
        if (s, a, g) != (c.state_dim, c.action_dim, c.goal_dim) {
            return Err(Error::Validation(format!(
                "stats dims {:?} do not match model dims {:?}",
                (s, a, g),
                (c.state_dim, c.action_dim, c.goal_dim)
            )));
        }
        if h.param_count != param_count(c) || h.param_count != self.model.param_count() {
            return Err(Error::Validation(format!(
                "header declares {} parameters, architecture gives {}",
                h.param_count,
                param_count(c)
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(8 + header.len() + 4 * self.header.param_count);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.model.params {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |r: String| Error::format(origin, r);
        if bytes.len() < 8 || bytes[..4] != MAGIC {
            return Err(fail("not a checkpoint (bad magic)".into()));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = bytes
            .get(8..8 + hlen)
            .ok_or_else(|| fail("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.format_version != FORMAT_VERSION {
            return Err(fail(format!("unsupported version {}", header.format_version)));
        }
        let payload = &bytes[8 + hlen..];
        if payload.len() != 4 * header.param_count {
            return Err(fail(format!(
                "payload holds {} bytes, header declares {} parameters",
                payload.len(),
                header.param_count
            )));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut off = 0;
        for e in &header.params {
            let n: usize = e.shape.iter().product();
            let end = off + 4 * n;
            let chunk = payload
                .get(off..end)
                .ok_or_else(|| fail(format!("parameter {} overruns payload", e.name)))?;
            let data = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            names.push(e.name.clone());
            params.push(Tensor::new(&e.shape, data)?);
            off = end;
        }
        if off != payload.len() {
            return Err(fail("parameter shapes do not cover the payload".into()));
        }
        let model = DenoiserModel::from_params(header.denoiser.clone(), names, params)
            .map_err(|e| fail(e.to_string()))?;
        let ck = Self { header, model };
        ck.validate().map_err(|e| fail(e.to_string()))?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.encode()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "run `gaitdiff train` to produce a checkpoint first".into(),
            });
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck = Self::decode(&bytes, path)?;
        log::info!(
            "loaded {} ({} parameters, loss {:?})",
            path.display(),
            ck.header.param_count,
            ck.header.loss_kind
        );
        Ok(ck)
    }

    /// SHA-256 of the encoded checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.encode()?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ColumnStats;

    pub(crate) fn unit_stats() -> NormStats {
        let col = |d: usize| ColumnStats {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        };
        NormStats {
            states: col(14),
            actions: col(4),
            goals: col(3),
        }
    }

    fn small() -> Checkpoint {
        let cfg = DenoiserConfig {
            token_dim: 8,
            heads: 2,
            layers: 1,
            ..Default::default()
        };
        let model = DenoiserModel::init(cfg, 4).unwrap();
        Checkpoint::new(
            model,
            ScheduleConfig::default(),
            SamplerSpec::ddpm(10),
            LossKind::Ddpm,
            unit_stats(),
            serde_json::json!({"seed": 4}),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gdck");
        let ck = small();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), ck.encode().unwrap());
        let payload: usize = back.model.params.iter().map(|p| p.data.len()).sum();
        assert_eq!(payload, param_count(&ck.header.denoiser));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ck = small();
        let bytes = ck.encode().unwrap();
        let p = Path::new("x.gdck");
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 4], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad, p).is_err());
        let err = Checkpoint::load(Path::new("/nonexistent/m.gdck")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact { .. }));
    }

    #[test]
    fn mismatched_schedule_is_rejected() {
        let ck = small();
        let model = ck.model.clone();
        let r = Checkpoint::new(
            model,
            ScheduleConfig {
                steps: 5,
                ..Default::default()
            },
            SamplerSpec::ddpm(5),
            LossKind::Ddpm,
            unit_stats(),
            serde_json::Value::Null,
        );
        assert!(r.is_err());
    }
}
