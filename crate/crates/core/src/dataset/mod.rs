//! Offline dataset: collection from source policies, on-disk episode store,
//! normalization statistics and delayed-input training windows.

mod format;
mod stats;
mod window;

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::plant::{observe, plant_step, randomize_params, PlantParams, PlantState};
use crate::sourcepolicy::{sample_goal, CpgOscillator, Gait, Goal, GoalRanges};
use crate::{rng, Error, Result, ACTION_DIM, GOAL_DIM, STATE_DIM};

pub use format::{Episode, EpisodeMeta};
pub use stats::{compute_stats, ColumnStats, NormStats, STD_FLOOR};
pub use window::{TrainingWindow, WindowBatch, WindowIndex, WindowSampler, WindowSpec};

pub const MANIFEST: &str = "manifest.json";
pub const EPISODE_EXT: &str = "gdep";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    pub gaits: Vec<Gait>,
    pub episodes: usize,
    /// Maximum episode length T in control ticks.
    pub max_len: usize,
    /// Control ticks between goal resamples.
    pub goal_dwell: usize,
    /// Time constant (s) of the source policies' command filter.
    pub command_filter_tau: f64,
    /// Leading ticks of standing (all-zero) actions before the gait starts,
    /// mirroring the deployment warm-up.
    pub standing_ticks: usize,
    /// Start each source oscillator at a phase drawn from the episode seed.
    pub random_start_phase: bool,
    pub randomize: bool,
    pub seed: u64,
    pub base_params: PlantParams,
    pub goal_ranges: GoalRanges,
    /// History length h; sets the minimum episode length with `horizon`.
    pub history: usize,
    /// Prediction length n.
    pub horizon: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            gaits: Gait::ALL.to_vec(),
            episodes: 1000,
            max_len: 500,
            goal_dwell: 150,
            command_filter_tau: 1.0,
            standing_ticks: 10,
            random_start_phase: true,
            randomize: true,
            seed: 0,
            base_params: PlantParams::default(),
            goal_ranges: GoalRanges::default(),
            history: 8,
            horizon: 4,
        }
    }
}

impl CollectConfig {
    pub fn min_len(&self) -> usize {
        self.history + self.horizon + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaits.is_empty() {
            return Err(Error::InvalidArgument("at least one gait must be enabled".into()));
        }
        if self.max_len < self.min_len() {
            return Err(Error::InvalidArgument(format!(
                "max_len {} shorter than h+n+2 = {}",
                self.max_len,
                self.min_len()
            )));
        }
        if !(self.command_filter_tau >= 0.0) {
            return Err(Error::InvalidArgument("command_filter_tau must be >= 0".into()));
        }
        if self.goal_dwell == 0 {
            return Err(Error::InvalidArgument("goal_dwell must be positive".into()));
        }
        self.base_params.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub len: usize,
    pub source_tag: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u16,
    pub tool_version: String,
    pub config: CollectConfig,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
    pub discarded: usize,
    pub stats: Option<NormStats>,
}

/// Records one episode of `gait` under `params`, truncated at a fall.
pub fn record_episode(
    cfg: &CollectConfig,
    gait: Gait,
    params: &PlantParams,
    episode_seed: u64,
) -> Result<Episode> {
    let meta = EpisodeMeta {
        source_tag: gait.name().to_string(),
        dynamics_meta: *params,
        seed: episode_seed,
        extra_columns: vec![],
        attrs: Default::default(),
    };
    let mut ep = Episode::new((STATE_DIM, ACTION_DIM, GOAL_DIM), meta);
    let mut source = CpgOscillator::new(gait, cfg.command_filter_tau);
    source.reset(&cfg.base_params);
    if cfg.random_start_phase {
        let mut r = rng::stream(episode_seed, &[3]);
        source.set_phase(r.gen_range(0.0..std::f64::consts::TAU));
    }
    let mut state = PlantState::standing(params);
    let mut goal = Goal::new(0.0, params.h0, 0.0);
    for tick in 0..cfg.max_len {
        if tick % cfg.goal_dwell == 0 {
            let segment = (tick / cfg.goal_dwell) as u64;
            goal = sample_goal(rng::derive_seed(episode_seed, &[2, segment]), &cfg.goal_ranges);
        }
        // Stored actions are f32; the plant sees the same values.
        let action = if tick < cfg.standing_ticks {
            [0.0; ACTION_DIM]
        } else {
            source.step(&goal, &cfg.base_params).map(|a| a as f32 as f64)
        };
        ep.push(
            &observe(&state).as_f32(),
            &action.map(|a| a as f32),
            &goal.to_array().map(|g| g as f32),
        );
        state = plant_step(&state, &action, params)?;
        if state.fallen {
            break;
        }
    }
    Ok(ep)
}

/// Gait, dynamics and seed for episode `index` of a collection run.
pub fn episode_plan(cfg: &CollectConfig, index: usize) -> (Gait, PlantParams, u64) {
    let episode_seed = rng::derive_seed(cfg.seed, &[index as u64]);
    let mut r = rng::stream(episode_seed, &[0]);
    let gait = cfg.gaits[r.gen_range(0..cfg.gaits.len())];
    let params = if cfg.randomize {
        randomize_params(&cfg.base_params, rng::derive_seed(episode_seed, &[1]))
    } else {
        cfg.base_params
    };
    (gait, params, episode_seed)
}

fn episode_file(index: usize) -> String {
    format!("episode_{index:06}.{EPISODE_EXT}")
}

/// Runs the collection loop and writes episodes plus a manifest to `dir`.
pub fn collect(cfg: &CollectConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut discarded = 0;
    let mut kept = Vec::new();
    for index in 0..cfg.episodes {
        let (gait, params, seed) = episode_plan(cfg, index);
        let ep = record_episode(cfg, gait, &params, seed)?;
        if ep.len() < cfg.min_len() {
            warn!(
                "discarding episode {index} ({gait}): {} ticks before fall, need {}",
                ep.len(),
                cfg.min_len()
            );
            discarded += 1;
            continue;
        }
        let name = episode_file(index);
        let bytes = ep.encode()?;
        let path = dir.join(&name);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        files.push(ManifestEntry {
            file: name,
            len: ep.len(),
            source_tag: ep.meta.source_tag.clone(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        kept.push(ep);
    }
    let stats = if kept.is_empty() {
        None
    } else {
        Some(compute_stats(&kept)?)
    };
    let manifest = Manifest {
        format_version: format::VERSION,
        tool_version: crate::report::tool_version(),
        config: cfg.clone(),
        seed: cfg.seed,
        files,
        discarded,
        stats,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST);
    let json = serde_json::to_vec_pretty(manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            hint: "run `gaitdiff collect` to create the dataset first".into(),
        });
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// SHA-256 over every regular file in `dir`, visited in name order.
pub fn directory_digest(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        h.update(p.file_name().unwrap().to_string_lossy().as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// An episode store loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let episodes = manifest
            .files
            .iter()
            .map(|f| Episode::read(&dir.join(&f.file)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            episodes,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> CollectConfig {
        CollectConfig {
            gaits: vec![Gait::Trot],
            episodes: 1,
            max_len: 100,
            randomize: false,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn collection_is_byte_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        collect(&small(1), a.path()).unwrap();
        collect(&small(1), b.path()).unwrap();
        let fa = fs::read(a.path().join(episode_file(0))).unwrap();
        let fb = fs::read(b.path().join(episode_file(0))).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(
            directory_digest(a.path()).unwrap(),
            directory_digest(b.path()).unwrap()
        );
    }

    #[test]
    fn rejects_invalid_configs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(0);
        cfg.gaits.clear();
        assert!(collect(&cfg, dir.path()).is_err());
        let cfg = CollectConfig {
            max_len: 13,
            ..small(0)
        };
        assert!(collect(&cfg, dir.path()).is_err());
    }

    #[test]
    fn unwritable_directory_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let err = collect(&small(0), &blocker.join("sub")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn missing_manifest_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = Dataset::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains(MANIFEST), "{err}");
    }

    #[test]
    fn nominal_gaits_do_not_fall() {
        let cfg = CollectConfig {
            max_len: 500,
            randomize: true,
            ..Default::default()
        };
        for i in 0..200 {
            let (gait, params, seed) = episode_plan(&cfg, i);
            let ep = record_episode(&cfg, gait, &params, seed).unwrap();
            assert_eq!(ep.len(), 500, "{gait} fell at tick {}", ep.len());
        }
    }
}
