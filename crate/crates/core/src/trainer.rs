//! Offline training loop, evaluation and the linear-Gaussian toy dataset.

use std::fs;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{
    compute_stats, write_manifest, CollectConfig, Dataset, Episode, EpisodeMeta, Manifest,
    ManifestEntry, NormStats, TrainingWindow, WindowBatch, WindowSampler, WindowSpec,
};
use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::diffusion::{
    batch_loss, DiffusionSchedule, LossKind, SamplerSpec, ScheduleConfig, Spacing, Variance,
};
use crate::tensor::{AdamW, AdamWConfig};
use crate::{rng, Error, Result};

/// Noise seed for evaluation batches; fixed so checkpoints compare fairly.
pub const EVAL_SEED: u64 = 0x0e7a_1000;

/// Largest beta of the training schedule. With ten steps this drives
/// `alpha_bar_K` to about 0.04 so sampling can start from `N(0, I)`.
pub const POLICY_BETA_MAX: f64 = 0.5;

pub const TRAIN_LOG: &str = "train_log.csv";
pub const BEST_CHECKPOINT: &str = "best.gdck";
pub const LAST_CHECKPOINT: &str = "last.gdck";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub eval_fraction: f64,
    pub seed: u64,
    pub loss_kind: LossKind,
    /// Windows drawn per epoch; all training windows when unset.
    pub windows_per_epoch: Option<usize>,
    /// Cap on evaluation windows (evenly strided); all when unset.
    pub max_eval_windows: Option<usize>,
    pub beta_min: f64,
    pub beta_max: f64,
    pub spacing: Spacing,
    pub variance: Variance,
    /// Deployment sampler written to the checkpoint; DDPM over every step
    /// when unset.
    pub sampler: Option<SamplerSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 1e-4,
            weight_decay: 1e-3,
            eval_fraction: 0.05,
            seed: 0,
            loss_kind: LossKind::Ddpm,
            windows_per_epoch: None,
            max_eval_windows: None,
            beta_min: crate::diffusion::DEFAULT_BETA_MIN,
            beta_max: POLICY_BETA_MAX,
            spacing: Spacing::Linear,
            variance: Variance::Posterior,
            sampler: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "eval_fraction {} not in (0, 1)",
                self.eval_fraction
            )));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("lr must be positive, weight_decay >= 0".into()));
        }
        Ok(())
    }

    pub fn schedule_config(&self, steps: usize) -> ScheduleConfig {
        ScheduleConfig {
            steps,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
            spacing: self.spacing,
            variance: self.variance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub wall_s: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "run `gaitdiff train` to produce a training log".into(),
            });
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { rows })
    }

    /// `(eval_k / eval_1) - (train_k / train_1)` at 1-based `epoch`.
    pub fn normalized_gap(&self, epoch: usize) -> Option<f64> {
        let first = self.rows.first()?;
        let row = self.rows.get(epoch.checked_sub(1)?)?;
        Some(row.eval_loss / first.eval_loss - row.train_loss / first.train_loss)
    }
}

/// Episode-level train/eval split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

pub fn split_episodes(episodes: &[Episode], spec: &WindowSpec, fraction: f64, seed: u64) -> Result<Split> {
    let usable: Vec<usize> = (0..episodes.len())
        .filter(|&i| spec.anchors(episodes[i].len()) > 0)
        .collect();
    if usable.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "dataset too small for the split: {} episode(s) with windows, need 2",
            usable.len()
        )));
    }
    let mut order = usable;
    order.shuffle(&mut rng::stream(seed, &[0x5117]));
    let n_eval = ((order.len() as f64 * fraction).round() as usize).clamp(1, order.len() - 1);
    let mut eval = order[..n_eval].to_vec();
    let mut train = order[n_eval..].to_vec();
    eval.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, eval })
}

fn windows_for(
    episodes: &[Episode],
    subset: &[usize],
    spec: WindowSpec,
    stats: &NormStats,
) -> Vec<TrainingWindow> {
    let sampler = WindowSampler::new(episodes, subset, spec);
    (0..sampler.len())
        .map(|i| {
            let idx = sampler.index(i);
            TrainingWindow::extract(&episodes[idx.episode], idx, &spec, stats)
        })
        .collect()
}

fn strided<T: Clone>(items: Vec<T>, cap: Option<usize>) -> Vec<T> {
    match cap {
        Some(c) if c > 0 && items.len() > c => {
            let step = items.len() as f64 / c as f64;
            (0..c).map(|i| items[(i as f64 * step) as usize].clone()).collect()
        }
        _ => items,
    }
}

/// Mean loss over `windows` in eval mode with fixed noise seeds.
pub fn evaluate_windows(
    model: &DenoiserModel<f32>,
    windows: &[TrainingWindow],
    schedule: &DiffusionSchedule,
    kind: LossKind,
    batch_size: usize,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("no windows to evaluate".into()));
    }
    let mut total = 0.0;
    for (i, chunk) in windows.chunks(batch_size.max(1)).enumerate() {
        let batch = WindowBatch::from_windows(chunk);
        let seed = rng::derive_seed(EVAL_SEED, &[i as u64]);
        let out = batch_loss(model, &batch, schedule, kind, seed, false, false)?;
        total += out.loss * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: TrainLog,
    pub split: Split,
}

/// Trains on `dataset`, writing checkpoints and the log to `out_dir` if set.
pub fn train(
    dataset: &Dataset,
    dcfg: &DenoiserConfig,
    tcfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    dcfg.validate()?;
    let stats = dataset.manifest.stats.clone().ok_or_else(|| Error::MissingArtifact {
        path: dataset.dir.join(crate::dataset::MANIFEST),
        hint: "manifest has no normalization stats; run `gaitdiff stats`".into(),
    })?;
    let (s, a, g) = stats.dims();
    if (s, a, g) != (dcfg.state_dim, dcfg.action_dim, dcfg.goal_dim) {
        return Err(Error::Validation(format!(
            "dataset dims {:?} do not match model dims {:?}",
            (s, a, g),
            (dcfg.state_dim, dcfg.action_dim, dcfg.goal_dim)
        )));
    }
    let spec = WindowSpec {
        history: dcfg.history,
        horizon: dcfg.horizon,
    };
    let schedule_cfg = tcfg.schedule_config(dcfg.diffusion_steps);
    let schedule = DiffusionSchedule::new(schedule_cfg)?;
    let sampler = tcfg
        .sampler
        .clone()
        .unwrap_or_else(|| SamplerSpec::ddpm(dcfg.diffusion_steps));
    let split = split_episodes(&dataset.episodes, &spec, tcfg.eval_fraction, tcfg.seed)?;
    let train_windows = windows_for(&dataset.episodes, &split.train, spec, &stats);
    let eval_windows = strided(
        windows_for(&dataset.episodes, &split.eval, spec, &stats),
        tcfg.max_eval_windows,
    );
    info!(
        "training on {} windows from {} episodes, evaluating on {} windows from {}",
        train_windows.len(),
        split.train.len(),
        eval_windows.len(),
        split.eval.len()
    );

    let mut model = DenoiserModel::<f32>::init(dcfg.clone(), rng::derive_seed(tcfg.seed, &[1]))?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: tcfg.lr,
            weight_decay: tcfg.weight_decay,
            ..Default::default()
        },
        &model.params,
    );
    let eval_files: Vec<String> = split
        .eval
        .iter()
        .filter_map(|&i| dataset.manifest.files.get(i).map(|f| f.file.clone()))
        .collect();
    let make_ck = |model: &DenoiserModel<f32>, epoch: usize, eval_loss: f64| {
        Checkpoint::new(
            model.clone(),
            schedule_cfg,
            sampler.clone(),
            tcfg.loss_kind,
            stats.clone(),
            serde_json::json!({
                "train_config": tcfg,
                "epoch": epoch,
                "eval_loss": eval_loss,
                "dataset_seed": dataset.manifest.seed,
                "eval_episodes": eval_files,
            }),
        )
    };

    let mut log = TrainLog::default();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let start = Instant::now();
    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng::stream(tcfg.seed, &[2, epoch as u64]));
        let take = tcfg.windows_per_epoch.unwrap_or(order.len()).min(order.len());
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order[..take].chunks(tcfg.batch_size).enumerate() {
            let ws: Vec<TrainingWindow> = chunk.iter().map(|&i| train_windows[i].clone()).collect();
            let batch = WindowBatch::from_windows(&ws);
            let seed = rng::derive_seed(tcfg.seed, &[3, epoch as u64, bi as u64]);
            let out = batch_loss(&model, &batch, &schedule, tcfg.loss_kind, seed, true, true)?;
            let norm = out
                .grads
                .iter()
                .flatten()
                .map(|&g| f64::from(g) * f64::from(g))
                .sum::<f64>()
                .sqrt();
            if !out.loss.is_finite() || !norm.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    loss: out.loss,
                });
            }
            opt.step(&mut model.params, &out.grads);
            loss_sum += out.loss;
            norm_sum += norm;
            batches += 1;
        }
        let eval_loss = evaluate_windows(&model, &eval_windows, &schedule, tcfg.loss_kind, tcfg.batch_size)?;
        if !eval_loss.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                loss: eval_loss,
            });
        }
        let row = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            eval_loss,
            wall_s: start.elapsed().as_secs_f64(),
            grad_norm: norm_sum / batches as f64,
        };
        info!(
            "epoch {epoch}: train {:.4} eval {:.4} |g| {:.3}",
            row.train_loss, row.eval_loss, row.grad_norm
        );
        log.rows.push(row);
        if best.as_ref().map_or(true, |(b, _)| eval_loss < *b) {
            best = Some((eval_loss, make_ck(&model, epoch, eval_loss)?));
        }
    }
    let last_eval = log.rows.last().map(|r| r.eval_loss).unwrap_or(f64::NAN);
    let last = make_ck(&model, tcfg.epochs, last_eval)?;
    let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        best.save(&dir.join(BEST_CHECKPOINT))?;
        last.save(&dir.join(LAST_CHECKPOINT))?;
        log.write_csv(&dir.join(TRAIN_LOG))?;
    }
    Ok(TrainOutcome {
        best,
        last,
        log,
        split,
    })
}

/// Which episodes of a dataset an evaluation covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    /// Episodes held out when the checkpoint was trained (all episodes if
    /// the dataset does not contain them).
    Eval,
    /// The complement of the held-out episodes.
    Train,
    All,
}

/// Mean loss of `ck` over a split of `dataset`.
pub fn evaluate(ck: &Checkpoint, dataset: &Dataset, which: EvalSplit) -> Result<f64> {
    let c = &ck.header.denoiser;
    let (s, a, g) = dataset
        .episodes
        .first()
        .map(|e| (e.state_dim, e.action_dim, e.goal_dim))
        .unwrap_or_default();
    if (s, a, g) != (c.state_dim, c.action_dim, c.goal_dim) {
        return Err(Error::Validation(format!(
            "dataset dims {:?} do not match checkpoint dims {:?}",
            (s, a, g),
            (c.state_dim, c.action_dim, c.goal_dim)
        )));
    }
    let held: Vec<String> = ck.header.training["eval_episodes"]
        .as_array()
        .map(|v| v.iter().filter_map(|s| s.as_str().map(String::from)).collect())
        .unwrap_or_default();
    let is_held = |i: usize| {
        dataset
            .manifest
            .files
            .get(i)
            .map_or(false, |f| held.contains(&f.file))
    };
    let all: Vec<usize> = (0..dataset.episodes.len()).collect();
    let any_held = all.iter().any(|&i| is_held(i));
    let subset: Vec<usize> = match which {
        EvalSplit::All => all,
        EvalSplit::Eval if any_held => all.into_iter().filter(|&i| is_held(i)).collect(),
        EvalSplit::Eval => all,
        EvalSplit::Train => all.into_iter().filter(|&i| !is_held(i)).collect(),
    };
    let spec = WindowSpec {
        history: c.history,
        horizon: c.horizon,
    };
    let windows = windows_for(&dataset.episodes, &subset, spec, &ck.header.stats);
    evaluate_windows(&ck.model, &windows, &ck.schedule()?, ck.header.loss_kind, 256)
}

/// Fixed linear map used by the toy dataset: actions are `W` applied to the
/// previous state plus small Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianTask {
    /// `action_dim x state_dim`, row-major.
    pub w: Vec<f64>,
    pub state_dim: usize,
    pub action_dim: usize,
    pub noise_std: f64,
}

impl LinearGaussianTask {
    pub fn new(seed: u64, noise_std: f64) -> Self {
        let (s, a) = (crate::STATE_DIM, crate::ACTION_DIM);
        let mut r = rng::stream(seed, &[0x7a5c]);
        let scale = 1.0 / (s as f64).sqrt();
        Self {
            w: (0..s * a).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect(),
            state_dim: s,
            action_dim: a,
            noise_std,
        }
    }

    pub fn apply(&self, state: &[f32]) -> Vec<f64> {
        (0..self.action_dim)
            .map(|i| {
                (0..self.state_dim)
                    .map(|j| self.w[i * self.state_dim + j] * f64::from(state[j]))
                    .sum()
            })
            .collect()
    }

    /// Writes a dataset where `s_t ~ N(0, I)` independently and
    /// `a_t = W s_{t-1} + noise`, so the first predicted action is a linear
    /// function of the newest state in the history window.
    pub fn write_dataset(&self, dir: &Path, episodes: usize, len: usize, seed: u64) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        let mut eps = Vec::new();
        for e in 0..episodes {
            let ep_seed = rng::derive_seed(seed, &[e as u64]);
            let mut r = rng::stream(ep_seed, &[]);
            let meta = EpisodeMeta {
                source_tag: "linear_gaussian".into(),
                dynamics_meta: Default::default(),
                seed: ep_seed,
                extra_columns: vec![],
                attrs: Default::default(),
            };
            let mut ep = Episode::new((self.state_dim, self.action_dim, crate::GOAL_DIM), meta);
            let goal: Vec<f32> = (0..crate::GOAL_DIM).map(|_| r.gen::<f32>()).collect();
            let mut prev: Vec<f32> = (0..self.state_dim).map(|_| r.sample(StandardNormal)).collect();
            for _ in 0..len {
                let state: Vec<f32> = (0..self.state_dim).map(|_| r.sample(StandardNormal)).collect();
                let action: Vec<f32> = self
                    .apply(&prev)
                    .iter()
                    .map(|&m| (m + self.noise_std * r.sample::<f64, _>(StandardNormal)) as f32)
                    .collect();
                ep.push(&state, &action, &goal);
                prev = state;
            }
            let name = format!("episode_{e:06}.{}", crate::dataset::EPISODE_EXT);
            let bytes = ep.encode()?;
            let path = dir.join(&name);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            files.push(ManifestEntry {
                file: name,
                len,
                source_tag: ep.meta.source_tag.clone(),
                sha256: hex::encode(<sha2::Sha256 as sha2::Digest>::digest(&bytes)),
            });
            eps.push(ep);
        }
        let manifest = Manifest {
            format_version: 1,
            tool_version: crate::report::tool_version(),
            config: CollectConfig {
                episodes,
                max_len: len,
                seed,
                ..Default::default()
            },
            seed,
            files,
            discarded: 0,
            stats: Some(compute_stats(&eps)?),
        };
        write_manifest(dir, &manifest)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(dir: &Path) -> Dataset {
        LinearGaussianTask::new(0, 0.01).write_dataset(dir, 6, 40, 1).unwrap();
        Dataset::load(dir).unwrap()
    }

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            token_dim: 16,
            heads: 2,
            layers: 1,
            ..Default::default()
        }
    }

    fn quick(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 32,
            lr: 1e-3,
            eval_fraction: 0.3,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn split_is_disjoint_and_covers() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(dir.path());
        let spec = WindowSpec {
            history: 8,
            horizon: 4,
        };
        let s = split_episodes(&ds.episodes, &spec, 0.3, 5).unwrap();
        assert!(s.train.iter().all(|e| !s.eval.contains(e)));
        assert_eq!(s.train.len() + s.eval.len(), 6);
        assert!(split_episodes(&ds.episodes[..1], &spec, 0.3, 5).is_err());
    }

    #[test]
    fn training_is_reproducible_and_checkpoint_portable() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(dir.path());
        let out = tempfile::tempdir().unwrap();
        let a = train(&ds, &tiny(), &quick(3), Some(out.path())).unwrap();
        let b = train(&ds, &tiny(), &quick(3), None).unwrap();
        assert_eq!(a.last.digest().unwrap(), b.last.digest().unwrap());
        for (x, y) in a.log.rows.iter().zip(&b.log.rows) {
            assert_eq!((x.train_loss, x.eval_loss, x.grad_norm), (y.train_loss, y.eval_loss, y.grad_norm));
        }
        let before = evaluate(&a.best, &ds, EvalSplit::Eval).unwrap();
        let loaded = Checkpoint::load(&out.path().join(BEST_CHECKPOINT)).unwrap();
        assert_eq!(evaluate(&loaded, &ds, EvalSplit::Eval).unwrap(), before);
        assert_eq!(evaluate(&loaded, &ds, EvalSplit::Eval).unwrap(), before);
        let log = TrainLog::read_csv(&out.path().join(TRAIN_LOG)).unwrap();
        assert_eq!(log.rows.len(), 2);
    }

    #[test]
    fn reconstruction_variant_trains() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(dir.path());
        let cfg = TrainConfig {
            loss_kind: LossKind::Reconstruction,
            ..quick(1)
        };
        let out = train(&ds, &tiny(), &cfg, None).unwrap();
        assert_eq!(out.best.header.loss_kind, LossKind::Reconstruction);
    }

    #[test]
    fn untrained_model_loss_is_near_one() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(dir.path());
        let cfg = TrainConfig {
            lr: 1e-12,
            epochs: 1,
            ..quick(2)
        };
        let out = train(&ds, &tiny(), &cfg, None).unwrap();
        let windows = windows_for(
            &ds.episodes,
            &(0..6).collect::<Vec<_>>(),
            WindowSpec {
                history: 8,
                horizon: 4,
            },
            &out.last.header.stats,
        );
        let n = windows.len() as f64 * 16.0;
        let loss = evaluate_windows(&out.last.model, &windows, &out.last.schedule().unwrap(), LossKind::Ddpm, 64).unwrap();
        let sigma = (2.0 / n).sqrt();
        assert!((loss - 1.0).abs() < 3.0 * sigma, "{loss} vs 1 +- {}", 3.0 * sigma);
    }
}
