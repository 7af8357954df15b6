//! Episode file format.
//!
//! All integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "GDEP"
//! 4       2     version (1)
//! 6       2     dtype (1 = f32)
//! 8       4     T (rows)
//! 12      2     state_dim
//! 14      2     action_dim
//! 16      2     goal_dim
//! 18      2     extra_dim
//! 20      ...   states  T*state_dim  f32, row-major
//!         ...   actions T*action_dim f32
//!         ...   goals   T*goal_dim   f32
//!         ...   extras  T*extra_dim  f32
//!         4     metadata length L
//!         L     metadata, UTF-8 JSON
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::plant::PlantParams;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"GDEP";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u16 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    /// Name of the source policy. Metadata only; never a model input.
    pub source_tag: String,
    pub dynamics_meta: PlantParams,
    pub seed: u64,
    /// Names of the extra per-tick columns, if any.
    #[serde(default)]
    pub extra_columns: Vec<String>,
    #[serde(default)]
    pub attrs: BTreeMap<String, serde_json::Value>,
}

/// One recorded rollout; all blocks are row-major with `len` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub state_dim: usize,
    pub action_dim: usize,
    pub goal_dim: usize,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub goals: Vec<f32>,
    /// `len * meta.extra_columns.len()` values, empty for plain episodes.
    pub extras: Vec<f32>,
    pub meta: EpisodeMeta,
}

impl Episode {
    pub fn new(
        dims: (usize, usize, usize),
        meta: EpisodeMeta,
    ) -> Self {
        Self {
            state_dim: dims.0,
            action_dim: dims.1,
            goal_dim: dims.2,
            states: vec![],
            actions: vec![],
            goals: vec![],
            extras: vec![],
            meta,
        }
    }

    pub fn len(&self) -> usize {
        if self.state_dim == 0 {
            0
        } else {
            self.states.len() / self.state_dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extra_dim(&self) -> usize {
        self.meta.extra_columns.len()
    }

    pub fn push(&mut self, state: &[f32], action: &[f32], goal: &[f32]) {
        debug_assert_eq!(state.len(), self.state_dim);
        debug_assert_eq!(action.len(), self.action_dim);
        debug_assert_eq!(goal.len(), self.goal_dim);
        self.states.extend_from_slice(state);
        self.actions.extend_from_slice(action);
        self.goals.extend_from_slice(goal);
    }

    pub fn truncate(&mut self, len: usize) {
        self.states.truncate(len * self.state_dim);
        self.actions.truncate(len * self.action_dim);
        self.goals.truncate(len * self.goal_dim);
        self.extras.truncate(len * self.extra_dim());
    }

    pub fn state(&self, t: usize) -> &[f32] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn action(&self, t: usize) -> &[f32] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn goal(&self, t: usize) -> &[f32] {
        &self.goals[t * self.goal_dim..(t + 1) * self.goal_dim]
    }

    /// Column `name` of the extras block, if present.
    pub fn extra_column(&self, name: &str) -> Option<Vec<f32>> {
        let e = self.extra_dim();
        let c = self.meta.extra_columns.iter().position(|n| n == name)?;
        Some((0..self.len()).map(|t| self.extras[t * e + c]).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if self.states.len() != t * self.state_dim
            || self.actions.len() != t * self.action_dim
            || self.goals.len() != t * self.goal_dim
            || self.extras.len() != t * self.extra_dim()
        {
            return Err(Error::Validation(format!(
                "episode blocks disagree on length (states {}, actions {}, goals {}, extras {})",
                self.states.len(),
                self.actions.len(),
                self.goals.len(),
                self.extras.len()
            )));
        }
        let finite = [&self.states, &self.actions, &self.goals, &self.extras]
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Validation("episode contains NaN or Inf".into()));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let dim16 = |d: usize, what: &str| {
            u16::try_from(d).map_err(|_| Error::Validation(format!("{what} {d} exceeds u16")))
        };
        let rows = u32::try_from(self.len())
            .map_err(|_| Error::Validation("episode too long".into()))?;
        let meta = serde_json::to_vec(&self.meta)?;
        let n_floats =
            self.states.len() + self.actions.len() + self.goals.len() + self.extras.len();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * n_floats + 4 + meta.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        out.extend_from_slice(&rows.to_le_bytes());
        out.extend_from_slice(&dim16(self.state_dim, "state_dim")?.to_le_bytes());
        out.extend_from_slice(&dim16(self.action_dim, "action_dim")?.to_le_bytes());
        out.extend_from_slice(&dim16(self.goal_dim, "goal_dim")?.to_le_bytes());
        out.extend_from_slice(&dim16(self.extra_dim(), "extra_dim")?.to_le_bytes());
        for block in [&self.states, &self.actions, &self.goals, &self.extras] {
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(origin, reason);
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).ok_or_else(|| bad("truncated header".into()))?;
        if magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = r.u16().ok_or_else(|| bad("truncated header".into()))?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dtype = r.u16().ok_or_else(|| bad("truncated header".into()))?;
        if dtype != DTYPE_F32 {
            return Err(bad(format!("unsupported dtype {dtype}")));
        }
        let rows = r.u32().ok_or_else(|| bad("truncated header".into()))? as usize;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u16().ok_or_else(|| bad("truncated header".into()))? as usize;
        }
        let mut blocks: [Vec<f32>; 4] = Default::default();
        for (block, &d) in blocks.iter_mut().zip(&dims) {
            let n = rows
                .checked_mul(d)
                .ok_or_else(|| bad("block size overflow".into()))?;
            let raw = r
                .take(n.checked_mul(4).ok_or_else(|| bad("block size overflow".into()))?)
                .ok_or_else(|| bad("truncated data block".into()))?;
            *block = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
        }
        let meta_len = r.u32().ok_or_else(|| bad("missing metadata length".into()))? as usize;
        let meta_raw = r
            .take(meta_len)
            .ok_or_else(|| bad("truncated metadata".into()))?;
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let meta: EpisodeMeta =
            serde_json::from_slice(meta_raw).map_err(|e| bad(format!("metadata: {e}")))?;
        if meta.extra_columns.len() != dims[3] {
            return Err(bad(format!(
                "extra_dim {} but {} column names",
                dims[3],
                meta.extra_columns.len()
            )));
        }
        let [states, actions, goals, extras] = blocks;
        let ep = Episode {
            state_dim: dims[0],
            action_dim: dims[1],
            goal_dim: dims[2],
            states,
            actions,
            goals,
            extras,
            meta,
        };
        if ep.state_dim == 0 {
            return Err(bad("state_dim is zero".into()));
        }
        ep.validate().map_err(|e| bad(e.to_string()))?;
        Ok(ep)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Episode {
        let meta = EpisodeMeta {
            source_tag: "trot".into(),
            dynamics_meta: PlantParams::default(),
            seed: 3,
            extra_columns: vec!["latency_s".into()],
            attrs: BTreeMap::new(),
        };
        let mut ep = Episode::new((2, 1, 1), meta);
        for t in 0..3 {
            let x = t as f32;
            ep.push(&[x, -x], &[0.5 * x], &[1.0]);
            ep.extras.push(1e-3 * x);
        }
        ep
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode().unwrap();
        assert_eq!(&bytes[0..4], b"GDEP");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]), 3);
        assert_eq!(&bytes[12..20], &[2, 0, 1, 0, 1, 0, 1, 0]);
        // First state value of row 1 at offset 20 + 2*4.
        assert_eq!(&bytes[28..32], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().encode().unwrap();
        let p = Path::new("mem");
        assert!(Episode::decode(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Episode::decode(&bad, p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Episode::decode(&extra, p).is_err());
        let mut nan = bytes;
        nan[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(Episode::decode(&nan, p).is_err());
    }

    #[test]
    fn refuses_to_encode_non_finite() {
        let mut ep = sample();
        ep.actions[1] = f32::INFINITY;
        assert!(ep.encode().is_err());
    }

    #[test]
    fn extra_column_lookup() {
        let ep = sample();
        assert_eq!(ep.extra_column("latency_s").unwrap(), vec![0.0, 1e-3, 2e-3]);
        assert!(ep.extra_column("nope").is_none());
    }
}
