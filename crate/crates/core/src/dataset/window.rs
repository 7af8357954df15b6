//! Delayed-input training windows.
//!
//! For a window predicting from tick `t`:
//!
//! ```text
//! state_hist    s[t-h   ..= t-1]
//! action_hist   a[t-h-1 ..= t-2]
//! goal_hist     g[t-h   ..= t-1]
//! action_future a[t     ..= t+n-1]
//! ```
//!
//! so the model never sees `s_t`, `g_t` or `a_{t-1}`. Valid anchors satisfy
//! `h + 2 <= t <= T - n` and never cross an episode boundary.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Episode, NormStats};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub history: usize,
    pub horizon: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            history: 8,
            horizon: 4,
        }
    }
}

impl WindowSpec {
    pub fn first_anchor(&self) -> usize {
        self.history + 2
    }

    /// Number of valid anchors in an episode of length `len`.
    pub fn anchors(&self, len: usize) -> usize {
        (len + 1).saturating_sub(self.history + self.horizon + 2)
    }

    pub fn state_rows(&self, t: usize) -> std::ops::Range<usize> {
        t - self.history..t
    }

    pub fn action_hist_rows(&self, t: usize) -> std::ops::Range<usize> {
        t - self.history - 1..t - 1
    }

    pub fn goal_rows(&self, t: usize) -> std::ops::Range<usize> {
        self.state_rows(t)
    }

    pub fn future_rows(&self, t: usize) -> std::ops::Range<usize> {
        t..t + self.horizon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowIndex {
    pub episode: usize,
    pub t: usize,
}

/// Normalized window, row-major blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub index: WindowIndex,
    pub state_hist: Vec<f32>,
    pub action_hist: Vec<f32>,
    pub goal_hist: Vec<f32>,
    pub action_future: Vec<f32>,
}

fn gather(block: &[f32], dim: usize, rows: std::ops::Range<usize>) -> &[f32] {
    &block[rows.start * dim..rows.end * dim]
}

impl TrainingWindow {
    pub fn extract(ep: &Episode, index: WindowIndex, spec: &WindowSpec, stats: &NormStats) -> Self {
        let t = index.t;
        let norm = |block: &[f32], dim, rows, cs: &super::ColumnStats| {
            let raw = gather(block, dim, rows);
            let mut out = vec![0.0; raw.len()];
            cs.normalize(raw, &mut out);
            out
        };
        Self {
            index,
            state_hist: norm(&ep.states, ep.state_dim, spec.state_rows(t), &stats.states),
            action_hist: norm(
                &ep.actions,
                ep.action_dim,
                spec.action_hist_rows(t),
                &stats.actions,
            ),
            goal_hist: norm(&ep.goals, ep.goal_dim, spec.goal_rows(t), &stats.goals),
            action_future: norm(
                &ep.actions,
                ep.action_dim,
                spec.future_rows(t),
                &stats.actions,
            ),
        }
    }
}

/// Uniform sampler over every valid anchor of a subset of episodes.
#[derive(Debug, Clone)]
pub struct WindowSampler {
    pub spec: WindowSpec,
    /// (episode index, number of anchors, cumulative offset)
    table: Vec<(usize, usize, usize)>,
    total: usize,
}

impl WindowSampler {
    pub fn new(episodes: &[Episode], subset: &[usize], spec: WindowSpec) -> Self {
        let mut table = Vec::with_capacity(subset.len());
        let mut total = 0;
        for &e in subset {
            let n = spec.anchors(episodes[e].len());
            if n > 0 {
                table.push((e, n, total));
                total += n;
            }
        }
        Self { spec, table, total }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// The `i`-th valid window in (episode, t) order.
    pub fn index(&self, i: usize) -> WindowIndex {
        assert!(i < self.total, "window {i} out of range {}", self.total);
        let pos = self.table.partition_point(|&(_, _, off)| off <= i) - 1;
        let (episode, _, off) = self.table[pos];
        WindowIndex {
            episode,
            t: self.spec.first_anchor() + (i - off),
        }
    }

    pub fn sample_index(&self, seed: u64) -> WindowIndex {
        let mut r = rng::stream(seed, &[]);
        self.index(r.gen_range(0..self.total))
    }

    pub fn sample(&self, episodes: &[Episode], stats: &NormStats, seed: u64) -> TrainingWindow {
        let idx = self.sample_index(seed);
        TrainingWindow::extract(&episodes[idx.episode], idx, &self.spec, stats)
    }
}

/// Windows stacked row-major along a leading batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch<T = f32> {
    pub batch: usize,
    pub state_hist: Vec<T>,
    pub action_hist: Vec<T>,
    pub goal_hist: Vec<T>,
    pub future: Vec<T>,
}

impl WindowBatch<f32> {
    pub fn from_windows(windows: &[TrainingWindow]) -> Self {
        let mut b = Self {
            batch: windows.len(),
            state_hist: Vec::new(),
            action_hist: Vec::new(),
            goal_hist: Vec::new(),
            future: Vec::new(),
        };
        for w in windows {
            b.state_hist.extend_from_slice(&w.state_hist);
            b.action_hist.extend_from_slice(&w.action_hist);
            b.goal_hist.extend_from_slice(&w.goal_hist);
            b.future.extend_from_slice(&w.action_future);
        }
        b
    }

    pub fn cast<U: crate::tensor::Scalar>(&self) -> WindowBatch<U> {
        let c = |v: &[f32]| v.iter().map(|&x| U::from_f64(f64::from(x))).collect();
        WindowBatch {
            batch: self.batch,
            state_hist: c(&self.state_hist),
            action_hist: c(&self.action_hist),
            goal_hist: c(&self.goal_hist),
            future: c(&self.future),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{compute_stats, EpisodeMeta};
    use crate::plant::PlantParams;

    /// Episode whose every entry encodes its own tick index.
    fn indexed_episode(len: usize) -> Episode {
        let meta = EpisodeMeta {
            source_tag: "t".into(),
            dynamics_meta: PlantParams::default(),
            seed: 0,
            extra_columns: vec![],
            attrs: Default::default(),
        };
        let mut ep = Episode::new((2, 1, 1), meta);
        for t in 0..len {
            let x = t as f32;
            ep.push(&[x, x], &[x], &[x]);
        }
        ep
    }

    #[test]
    fn minimal_episode_has_one_anchor() {
        let spec = WindowSpec::default();
        assert_eq!(spec.anchors(14), 1);
        assert_eq!(spec.anchors(13), 0);
        let eps = vec![indexed_episode(14)];
        let s = WindowSampler::new(&eps, &[0], spec);
        assert_eq!(s.len(), 1);
        assert_eq!(s.index(0), WindowIndex { episode: 0, t: 10 });
    }

    #[test]
    fn index_audit() {
        let spec = WindowSpec::default();
        let eps = vec![indexed_episode(40)];
        let s = WindowSampler::new(&eps, &[0], spec);
        for i in 0..s.len() {
            let idx = s.index(i);
            let t = idx.t;
            assert!(t >= 10 && t <= 36);
            let ep = &eps[0];
            let last_state = *gather(&ep.states, 2, spec.state_rows(t)).last().unwrap();
            let last_act = *gather(&ep.actions, 1, spec.action_hist_rows(t)).last().unwrap();
            let first_future = gather(&ep.actions, 1, spec.future_rows(t))[0];
            assert_eq!(last_state as usize, t - 1);
            assert_eq!(last_act as usize, t - 2);
            assert_eq!(first_future as usize, t);
            assert_eq!(spec.state_rows(t).len(), 8);
            assert_eq!(spec.action_hist_rows(t).len(), 8);
            assert_eq!(spec.future_rows(t).len(), 4);
        }
    }

    #[test]
    fn windows_denormalize_to_raw_slices() {
        let spec = WindowSpec::default();
        let eps = vec![indexed_episode(30), indexed_episode(20)];
        let stats = compute_stats(&eps).unwrap();
        let s = WindowSampler::new(&eps, &[0, 1], spec);
        for seed in 0..50 {
            let w = s.sample(&eps, &stats, seed);
            let ep = &eps[w.index.episode];
            let mut back = vec![0.0; w.action_future.len()];
            stats.actions.denormalize(&w.action_future, &mut back);
            let raw = gather(&ep.actions, 1, spec.future_rows(w.index.t));
            for (b, r) in back.iter().zip(raw) {
                assert!((b - r).abs() <= 1e-5 * r.abs().max(1.0));
            }
        }
    }

    #[test]
    fn anchors_are_uniform_chi_square() {
        // 27 anchors in one episode; chi-square critical value for 26 dof at
        // alpha = 0.01 is 45.64.
        let spec = WindowSpec::default();
        let eps = vec![indexed_episode(40)];
        let s = WindowSampler::new(&eps, &[0], spec);
        let k = s.len();
        assert_eq!(k, 27);
        let draws = 100_000;
        let mut counts = vec![0usize; k];
        for seed in 0..draws {
            counts[s.sample_index(seed as u64).t - 10] += 1;
        }
        let expected = draws as f64 / k as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 45.64, "chi2 = {chi2}");
    }
}
