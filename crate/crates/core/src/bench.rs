//! Benchmark matrix: closed-loop rollouts of each policy variant over the
//! standard task set, aggregated per cell.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::control::{rollout_batch, GoalSchedule, ModelPolicy, RolloutOptions, RolloutReport, RolloutSpec, DEFAULT_TICKS};
use crate::diffusion::SamplerSpec;
use crate::plant::{randomize_params, PlantParams};
use crate::sourcepolicy::Goal;
use crate::{rng, Error, Result};

pub const RESULTS_JSON: &str = "bench.json";
pub const RESULTS_CSV: &str = "bench.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Diffuseloco,
    NoRhc,
    NoRand,
    #[serde(rename = "ddim_100_10")]
    Ddim100x10,
    #[serde(rename = "ddim_10_5")]
    Ddim10x5,
    ReconTfRhc,
    GoalConcat,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Diffuseloco,
        Variant::NoRhc,
        Variant::NoRand,
        Variant::Ddim100x10,
        Variant::Ddim10x5,
        Variant::ReconTfRhc,
        Variant::GoalConcat,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Diffuseloco => "diffuseloco",
            Self::NoRhc => "no_rhc",
            Self::NoRand => "no_rand",
            Self::Ddim100x10 => "ddim_100_10",
            Self::Ddim10x5 => "ddim_10_5",
            Self::ReconTfRhc => "recon_tf_rhc",
            Self::GoalConcat => "goal_concat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }

    /// Deployment sampler for this variant's checkpoint, if it differs from
    /// the one stored in the checkpoint.
    pub fn sampler(&self, train_steps: usize) -> Result<Option<SamplerSpec>> {
        Ok(match self {
            Self::Ddim100x10 => Some(SamplerSpec::ddim(train_steps, 10)?),
            Self::Ddim10x5 => Some(SamplerSpec::ddim(train_steps, 5)?),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTask {
    pub name: String,
    pub goal: Goal,
}

/// Forward walking at three speeds and turning both ways at 0.3 m/s.
pub fn standard_tasks(height: f64) -> Vec<BenchTask> {
    let mut out: Vec<BenchTask> = [0.3, 0.5, 0.7]
        .iter()
        .map(|&v| BenchTask {
            name: format!("forward_{v}"),
            goal: Goal::new(v, height, 0.0),
        })
        .collect();
    for (name, w) in [("turn_left", 0.3), ("turn_right", -0.3)] {
        out.push(BenchTask {
            name: name.into(),
            goal: Goal::new(0.3, height, w),
        });
    }
    out
}

pub fn find_task(name: &str, height: f64) -> Result<BenchTask> {
    standard_tasks(height)
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown task {name:?}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub seeds: usize,
    pub ticks: usize,
    pub seed: u64,
    /// Draw plant params per seed from the randomization range.
    pub randomize: bool,
    pub base_params: PlantParams,
    /// Cells evaluated concurrently.
    pub workers: usize,
    pub overlap: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            ticks: DEFAULT_TICKS,
            seed: 0,
            randomize: true,
            base_params: PlantParams::default(),
            workers: 1,
            overlap: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 || self.workers == 0 {
            return Err(Error::InvalidArgument("seeds and workers must be positive".into()));
        }
        self.base_params.validate()
    }

    /// Plant params for seed index `i`, shared by every variant and task.
    pub fn params(&self, i: usize) -> PlantParams {
        if self.randomize {
            randomize_params(&self.base_params, rng::derive_seed(self.seed, &[0x9a7a, i as u64]))
        } else {
            self.base_params
        }
    }

    pub fn specs(&self, task: &BenchTask) -> Vec<RolloutSpec> {
        (0..self.seeds)
            .map(|i| RolloutSpec {
                rollout_id: i as u64,
                seed: rng::derive_seed(self.seed, &[i as u64]),
                params: self.params(i),
                goals: GoalSchedule::constant(task.goal),
                ticks: self.ticks,
            })
            .collect()
    }
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    Some((m, v.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: String,
    pub task: String,
    pub sampler: String,
    pub checkpoint_digest: String,
    pub seeds: usize,
    pub falls: usize,
    pub failures: usize,
    pub stability_pct: f64,
    /// Unset when no seed produced a tracking error.
    pub e_v_mean: Option<f64>,
    pub e_v_std: Option<f64>,
    pub e_omega_mean: Option<f64>,
    pub e_omega_std: Option<f64>,
    pub jerk_mean: f64,
    pub latency_median_s: f64,
    pub reports: Vec<RolloutReport>,
}

impl CellResult {
    pub fn from_reports(variant: &str, task: &str, sampler: String, digest: String, reports: Vec<RolloutReport>) -> Self {
        let pick = |f: fn(&RolloutReport) -> Option<f64>| -> Vec<f64> { reports.iter().filter_map(f).collect() };
        let e_v = mean_std(&pick(|r| r.e_v));
        let e_omega = mean_std(&pick(|r| r.e_omega));
        let falls = reports.iter().filter(|r| r.fell).count();
        let failures = reports.iter().filter(|r| r.failed.is_some()).count();
        let stable = reports.iter().filter(|r| !r.fell && r.failed.is_none()).count();
        let mut lat: Vec<f64> = reports.iter().map(|r| r.latency.median_s).collect();
        lat.sort_by(f64::total_cmp);
        Self {
            variant: variant.into(),
            task: task.into(),
            sampler,
            checkpoint_digest: digest,
            seeds: reports.len(),
            falls,
            failures,
            stability_pct: 100.0 * stable as f64 / reports.len().max(1) as f64,
            e_v_mean: e_v.map(|x| x.0),
            e_v_std: e_v.map(|x| x.1),
            e_omega_mean: e_omega.map(|x| x.0),
            e_omega_std: e_omega.map(|x| x.1),
            jerk_mean: mean_std(&reports.iter().map(|r| r.jerk).collect::<Vec<_>>()).map_or(0.0, |x| x.0),
            latency_median_s: lat.get(lat.len() / 2).copied().unwrap_or(0.0),
            reports,
        }
    }
}

/// Runs one cell: every seed of `task` in a single lockstep batch.
pub fn run_cell(ck: &Checkpoint, variant: Variant, task: &BenchTask, cfg: &BenchConfig) -> Result<CellResult> {
    let sampler = variant.sampler(ck.header.schedule.steps)?;
    let policy = ModelPolicy::from_checkpoint(ck, sampler)?;
    let results = rollout_batch(&policy, &cfg.specs(task), RolloutOptions { overlap: cfg.overlap })?;
    let label = crate::control::Policy::label(&policy);
    Ok(CellResult::from_reports(
        variant.name(),
        &task.name,
        label,
        ck.digest()?,
        results.into_iter().map(|r| r.report).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResults {
    pub config: BenchConfig,
    pub cells: Vec<CellResult>,
}

const CSV_HEADER: [&str; 13] = [
    "variant",
    "task",
    "sampler",
    "seeds",
    "falls",
    "failures",
    "stability_pct",
    "e_v_mean",
    "e_v_std",
    "e_omega_mean",
    "e_omega_std",
    "jerk_mean",
    "checkpoint_digest",
];

fn fmt(x: impl Into<Option<f64>>) -> String {
    x.into().map_or(String::new(), |x| format!("{x:.6}"))
}

impl BenchResults {
    /// Runs `cells` (variant, checkpoint, task), up to `cfg.workers` at a
    /// time; output order follows the input order.
    pub fn run(cells: &[(Variant, &Checkpoint, BenchTask)], cfg: &BenchConfig) -> Result<Self> {
        cfg.validate()?;
        let mut out = Vec::with_capacity(cells.len());
        for chunk in cells.chunks(cfg.workers) {
            let done: Vec<Result<CellResult>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|(v, ck, t)| s.spawn(move || run_cell(ck, *v, t, cfg)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
            });
            for r in done {
                let cell = r?;
                log::info!(
                    "{} {}: stability {:.0}%, E_v {:?} +- {:?}",
                    cell.variant,
                    cell.task,
                    cell.stability_pct,
                    cell.e_v_mean,
                    cell.e_v_std
                );
                out.push(cell);
            }
        }
        Ok(Self {
            config: cfg.clone(),
            cells: out,
        })
    }

    /// Deterministic CSV: one row per cell, no wall-clock fields.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        for c in &self.cells {
            w.write_record([
                c.variant.clone(),
                c.task.clone(),
                c.sampler.clone(),
                c.seeds.to_string(),
                c.falls.to_string(),
                c.failures.to_string(),
                fmt(c.stability_pct),
                fmt(c.e_v_mean),
                fmt(c.e_v_std),
                fmt(c.e_omega_mean),
                fmt(c.e_omega_std),
                fmt(c.jerk_mean),
                c.checkpoint_digest.clone(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn csv_digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_csv()?.as_bytes())))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(RESULTS_CSV);
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(RESULTS_JSON);
        std::fs::write(&json_path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&json_path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RESULTS_JSON);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                hint: "run `gaitdiff bench` first".into(),
            });
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn cell(&self, variant: &str, task: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.variant == variant && c.task == task)
    }

    /// Variant-by-task table: stability % and E_v mean +- std per cell.
    pub fn to_markdown(&self) -> String {
        let mut tasks: Vec<&str> = Vec::new();
        let mut variants: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !tasks.contains(&c.task.as_str()) {
                tasks.push(&c.task);
            }
            if !variants.contains(&c.variant.as_str()) {
                variants.push(&c.variant);
            }
        }
        let mut s = String::from("| variant |");
        for t in &tasks {
            let _ = write!(s, " {t} stab. | {t} E_v (%) |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|---|".repeat(tasks.len()));
        s.push('\n');
        for v in &variants {
            let _ = write!(s, "| {v} |");
            for t in &tasks {
                match self.cell(v, t) {
                    Some(CellResult {
                        stability_pct,
                        e_v_mean: Some(m),
                        e_v_std: Some(sd),
                        ..
                    }) => {
                        let _ = write!(s, " {stability_pct:.0}% | {m:.1} ± {sd:.1} |");
                    }
                    Some(c) => {
                        let _ = write!(s, " {:.0}% | n/a |", c.stability_pct);
                    }
                    None => s.push_str(" | |"),
                }
            }
            s.push('\n');
        }
        s
    }
}
