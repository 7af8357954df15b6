use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Episode;
use crate::{Error, Result};

pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, raw: &[f32], out: &mut [f32]) {
        let d = self.dim();
        for (i, (o, &x)) in out.iter_mut().zip(raw).enumerate() {
            let c = i % d;
            *o = ((f64::from(x) - self.mean[c]) / self.std[c]) as f32;
        }
    }

    pub fn denormalize(&self, norm: &[f32], out: &mut [f32]) {
        let d = self.dim();
        for (i, (o, &x)) in out.iter_mut().zip(norm).enumerate() {
            let c = i % d;
            *o = (f64::from(x) * self.std[c] + self.mean[c]) as f32;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub states: ColumnStats,
    pub actions: ColumnStats,
    pub goals: ColumnStats,
}

impl NormStats {
    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("stats serialize");
        hex::encode(Sha256::digest(json))
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.states.dim(), self.actions.dim(), self.goals.dim())
    }
}

/// Welford accumulator over fixed-width rows.
struct Welford {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push_rows(&mut self, data: &[f32]) {
        let d = self.mean.len();
        for row in data.chunks_exact(d) {
            self.n += 1;
            let n = self.n as f64;
            for (c, &x) in row.iter().enumerate() {
                let x = f64::from(x);
                let delta = x - self.mean[c];
                self.mean[c] += delta / n;
                self.m2[c] += delta * (x - self.mean[c]);
            }
        }
    }

    fn finish(self) -> ColumnStats {
        let n = self.n as f64;
        let std = self
            .m2
            .iter()
            .map(|&m2| (m2 / n).sqrt().max(STD_FLOOR))
            .collect();
        ColumnStats {
            mean: self.mean,
            std,
        }
    }
}

/// Streaming statistics over every row of `episodes`.
pub fn compute_stats<'a>(episodes: impl IntoIterator<Item = &'a Episode>) -> Result<NormStats> {
    let mut acc: Option<[Welford; 3]> = None;
    for ep in episodes {
        let a = acc.get_or_insert_with(|| {
            [
                Welford::new(ep.state_dim),
                Welford::new(ep.action_dim),
                Welford::new(ep.goal_dim),
            ]
        });
        if a[0].mean.len() != ep.state_dim
            || a[1].mean.len() != ep.action_dim
            || a[2].mean.len() != ep.goal_dim
        {
            return Err(Error::Validation("episodes disagree on dimensions".into()));
        }
        a[0].push_rows(&ep.states);
        a[1].push_rows(&ep.actions);
        a[2].push_rows(&ep.goals);
    }
    match acc {
        Some([s, a, g]) if s.n > 0 => Ok(NormStats {
            states: s.finish(),
            actions: a.finish(),
            goals: g.finish(),
        }),
        _ => Err(Error::InvalidArgument("cannot compute stats of an empty dataset".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::EpisodeMeta;
    use crate::plant::PlantParams;

    fn episode(states: &[f32]) -> Episode {
        let meta = EpisodeMeta {
            source_tag: "x".into(),
            dynamics_meta: PlantParams::default(),
            seed: 0,
            extra_columns: vec![],
            attrs: Default::default(),
        };
        let mut ep = Episode::new((1, 1, 1), meta);
        for &s in states {
            ep.push(&[s], &[5.0], &[s]);
        }
        ep
    }

    #[test]
    fn constant_column_floors_std() {
        let s = compute_stats([&episode(&[1.0, 2.0, 3.0])]).unwrap();
        assert_eq!(s.actions.mean, vec![5.0]);
        assert_eq!(s.actions.std, vec![STD_FLOOR]);
    }

    #[test]
    fn two_point_closed_form() {
        let s = compute_stats([&episode(&[-1.0]), &episode(&[1.0])]).unwrap();
        assert_eq!(s.states.mean, vec![0.0]);
        assert_eq!(s.states.std, vec![1.0]);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(compute_stats(std::iter::empty()).is_err());
        assert!(compute_stats([&episode(&[])]).is_err());
    }
}
