//! `gaitdiff`: collect a CPG dataset, train a diffusion policy, deploy it in
//! closed loop and benchmark the ablation matrix.
//!
//! Every command that writes artifacts also writes `run.json` next to them
//! with the config digest, seeds, tool version and input/output hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use gaitdiff::bench::{find_task, standard_tasks, BenchConfig, BenchResults, BenchTask, Variant};
use gaitdiff::checkpoint::Checkpoint;
use gaitdiff::control::{latency_probe, rollout_batch, GoalSchedule, ModelPolicy, RolloutOptions, RolloutSpec};
use gaitdiff::dataset::{collect, compute_stats, write_manifest, CollectConfig, Dataset};
use gaitdiff::denoiser::DenoiserConfig;
use gaitdiff::diffusion::SamplerSpec;
use gaitdiff::plant::{randomize_params, PlantParams};
use gaitdiff::report::{curves_csv, curves_markdown, LossCurve, RunManifest};
use gaitdiff::sourcepolicy::Goal;
use gaitdiff::trainer::{evaluate, train, EvalSplit, TrainConfig, TrainLog, BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG};
use gaitdiff::{rng, Error};

#[derive(Parser, Debug)]
#[command(name = "gaitdiff", version, about = "Diffusion-policy locomotion pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record source-policy episodes into a dataset directory.
    Collect {
        /// JSON collection config; defaults are used for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute normalization statistics and store them in the manifest.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a denoiser on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON with optional `denoiser` and `train` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out loss of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
        split: SplitArg,
    },
    /// Closed-loop rollouts of one checkpoint.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Goal schedule CSV (start_tick,v_des,h_des,omega_des).
        #[arg(long, conflicts_with_all = ["v", "omega"])]
        goals: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        v: f64,
        #[arg(long, default_value_t = 0.0)]
        omega: f64,
        #[arg(long, default_value_t = gaitdiff::control::DEFAULT_TICKS)]
        ticks: usize,
        #[arg(long, default_value_t = 1)]
        rollouts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampler override, e.g. `ddpm_10` or `ddim_10_5`.
        #[arg(long)]
        sampler: Option<String>,
        /// Draw plant params from the randomization range per rollout.
        #[arg(long)]
        randomize: bool,
        #[arg(long)]
        overlap: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the variant-by-task benchmark matrix.
    Bench {
        /// JSON with `checkpoints` (variant name to path) and optional
        /// `bench` settings.
        #[arg(long)]
        config: PathBuf,
        /// Restrict to these variants (repeatable).
        #[arg(long)]
        variant: Vec<String>,
        /// Restrict to these tasks (repeatable).
        #[arg(long)]
        task: Vec<String>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time single-rollout inference calls.
    Latency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sampler: Option<String>,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render Markdown summaries and loss-curve series.
    Report {
        /// `label=path/to/train_log.csv` (repeatable).
        #[arg(long = "train-log")]
        train_logs: Vec<String>,
        /// Directory holding bench.json.
        #[arg(long)]
        bench: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Eval,
    Train,
    All,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    denoiser: DenoiserConfig,
    train: TrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchFile {
    checkpoints: BTreeMap<String, PathBuf>,
    #[serde(default)]
    bench: BenchConfig,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "config file not found".into(),
        }
        .into());
    }
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("invalid config {}", path.display()))
}

fn read_json_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

/// Parses a sampler label (`ddpm_K` or `ddim_K_S`) against a checkpoint.
fn parse_sampler(label: &str, ck: &Checkpoint) -> Result<SamplerSpec> {
    let parts: Vec<&str> = label.split('_').collect();
    let num = |s: &str| s.parse::<usize>().with_context(|| format!("bad sampler label {label:?}"));
    let spec = match parts.as_slice() {
        ["ddpm", k] => SamplerSpec::ddpm(num(k)?),
        ["ddim", k, s] => SamplerSpec::ddim(num(k)?, num(s)?)?,
        _ => bail!("sampler must look like ddpm_10 or ddim_10_5, got {label:?}"),
    };
    let k = ck.header.schedule.steps;
    if spec.train_steps != k {
        bail!("sampler {label} needs K={}, checkpoint was trained with K={k}", spec.train_steps);
    }
    Ok(spec)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Collect { config, out } => {
            let cfg: CollectConfig = read_json_or_default(config.as_deref())?;
            cfg.validate()?;
            let m = collect(&cfg, &out)?;
            let mut run = RunManifest::new("collect", &cfg, vec![cfg.seed])?;
            run.output(&out.join(gaitdiff::dataset::MANIFEST))?;
            run.write(&out)?;
            println!(
                "collected {} episodes ({} discarded) into {}",
                m.files.len(),
                m.discarded,
                out.display()
            );
        }
        Command::Stats { data } => {
            let mut ds = Dataset::load(&data)?;
            let stats = compute_stats(&ds.episodes)?;
            ds.manifest.stats = Some(stats.clone());
            write_manifest(&data, &ds.manifest)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Train { data, config, out } => {
            let cfg: TrainFile = read_json_or_default(config.as_deref())?;
            let ds = Dataset::load(&data)?;
            let outcome = train(&ds, &cfg.denoiser, &cfg.train, Some(&out))?;
            let mut run = RunManifest::new("train", &cfg, vec![cfg.train.seed])?;
            run.input(&data.join(gaitdiff::dataset::MANIFEST))?;
            for f in [BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG] {
                run.output(&out.join(f))?;
            }
            run.write(&out)?;
            let last = outcome.log.rows.last().context("training produced no epochs")?;
            println!(
                "trained {} epochs: train {:.5}, eval {:.5}; best checkpoint {}",
                last.epoch,
                last.train_loss,
                last.eval_loss,
                out.join(BEST_CHECKPOINT).display()
            );
        }
        Command::Eval { checkpoint, data, split } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = Dataset::load(&data)?;
            let which = match split {
                SplitArg::Eval => EvalSplit::Eval,
                SplitArg::Train => EvalSplit::Train,
                SplitArg::All => EvalSplit::All,
            };
            let loss = evaluate(&ck, &ds, which)?;
            println!("{}", serde_json::json!({ "split": format!("{split:?}").to_lowercase(), "loss": loss }));
        }
        Command::Rollout {
            checkpoint,
            goals,
            v,
            omega,
            ticks,
            rollouts,
            seed,
            sampler,
            randomize,
            overlap,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let base = PlantParams::default();
            let schedule = match &goals {
                Some(p) => GoalSchedule::read_csv(p)?,
                None => GoalSchedule::constant(Goal::new(v, base.h0, omega)),
            };
            let sampler = sampler.map(|s| parse_sampler(&s, &ck)).transpose()?;
            let policy = ModelPolicy::from_checkpoint(&ck, sampler)?;
            let specs: Vec<RolloutSpec> = (0..rollouts as u64)
                .map(|i| RolloutSpec {
                    rollout_id: i,
                    seed: rng::derive_seed(seed, &[i]),
                    params: if randomize {
                        randomize_params(&base, rng::derive_seed(seed, &[0x9a7a, i]))
                    } else {
                        base
                    },
                    goals: schedule.clone(),
                    ticks,
                })
                .collect();
            let results = rollout_batch(&policy, &specs, RolloutOptions { overlap })?;
            fs::create_dir_all(&out)?;
            let mut run = RunManifest::new("rollout", &specs, specs.iter().map(|s| s.seed).collect())?;
            run.input(&checkpoint)?;
            for r in &results {
                let id = r.report.rollout_id;
                let report = out.join(format!("rollout_{id:03}.json"));
                fs::write(&report, serde_json::to_vec_pretty(&r.report)?)?;
                let dump = out.join(format!("rollout_{id:03}.gdep"));
                r.trajectory.write(&dump)?;
                run.output(&report)?;
                run.output(&dump)?;
                println!(
                    "rollout {id}: {} ticks, fell={}, E_v={}, gait={}",
                    r.report.ticks,
                    r.report.fell,
                    r.report.e_v.map_or("n/a".into(), |e| format!("{e:.2}%")),
                    r.report.dominant_gait
                );
            }
            run.write(&out)?;
        }
        Command::Bench {
            config,
            variant,
            task,
            seeds,
            out,
        } => {
            let mut cfg: BenchFile = read_json(&config)?;
            if let Some(s) = seeds {
                cfg.bench.seeds = s;
            }
            let variants: Vec<Variant> = if variant.is_empty() {
                cfg.checkpoints.keys().map(|k| Variant::parse(k)).collect::<Result<_, _>>()?
            } else {
                variant.iter().map(|k| Variant::parse(k)).collect::<Result<_, _>>()?
            };
            let h0 = cfg.bench.base_params.h0;
            let tasks: Vec<BenchTask> = if task.is_empty() {
                standard_tasks(h0)
            } else {
                task.iter().map(|t| find_task(t, h0)).collect::<Result<_, _>>()?
            };
            let mut loaded = BTreeMap::new();
            for v in &variants {
                let path = cfg
                    .checkpoints
                    .get(v.name())
                    .with_context(|| format!("no checkpoint configured for variant {}", v.name()))?;
                loaded.insert(*v, (path.clone(), Checkpoint::load(path)?));
            }
            let cells: Vec<(Variant, &Checkpoint, BenchTask)> = variants
                .iter()
                .flat_map(|v| tasks.iter().map(|t| (*v, &loaded[v].1, t.clone())))
                .collect();
            let results = BenchResults::run(&cells, &cfg.bench)?;
            results.write(&out)?;
            let mut run = RunManifest::new("bench", &cfg, (0..cfg.bench.seeds as u64).collect())?;
            for (p, _) in loaded.values() {
                run.input(p)?;
            }
            run.output(&out.join(gaitdiff::bench::RESULTS_CSV))?;
            run.output(&out.join(gaitdiff::bench::RESULTS_JSON))?;
            run.write(&out)?;
            print!("{}", results.to_markdown());
            println!("csv digest {}", results.csv_digest()?);
        }
        Command::Latency {
            checkpoint,
            sampler,
            iterations,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let sampler = sampler.map(|s| parse_sampler(&s, &ck)).transpose()?;
            let policy = ModelPolicy::from_checkpoint(&ck, sampler)?;
            let report = latency_probe(&policy, ck.header.denoiser.token_dim, iterations)?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(p) = out {
                fs::write(&p, &json)?;
            }
            println!("{json}");
        }
        Command::Report { train_logs, bench, out } => {
            if train_logs.is_empty() && bench.is_none() {
                bail!("nothing to report: pass --train-log and/or --bench");
            }
            fs::create_dir_all(&out)?;
            let mut md = String::from("# gaitdiff report\n\n");
            let mut run = RunManifest::new("report", &(&train_logs, &bench), vec![])?;
            if !train_logs.is_empty() {
                let mut curves = Vec::new();
                for spec in &train_logs {
                    let (label, path) = spec
                        .split_once('=')
                        .with_context(|| format!("--train-log expects label=path, got {spec:?}"))?;
                    let path = Path::new(path);
                    if !path.exists() {
                        return Err(Error::MissingArtifact {
                            path: path.to_path_buf(),
                            hint: "run `gaitdiff train` to produce a training log".into(),
                        }
                        .into());
                    }
                    curves.push(LossCurve::from_log(label, &TrainLog::read_csv(path)?)?);
                    run.input(path)?;
                }
                let csv_path = out.join("loss_curves.csv");
                fs::write(&csv_path, curves_csv(&curves)?)?;
                run.output(&csv_path)?;
                md.push_str("## Training curves\n\nLosses normalized by each run's first epoch.\n\n");
                md.push_str(&curves_markdown(&curves));
                md.push('\n');
            }
            if let Some(dir) = &bench {
                let results = BenchResults::read(dir)?;
                run.input(&dir.join(gaitdiff::bench::RESULTS_JSON))?;
                md.push_str("## Benchmark\n\nStability and forward-speed error (mean ± population std over seeds).\n\n");
                md.push_str(&results.to_markdown());
            }
            let md_path = out.join("report.md");
            fs::write(&md_path, &md)?;
            run.output(&md_path)?;
            run.write(&out)?;
            print!("{md}");
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
