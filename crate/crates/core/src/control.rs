//! Closed-loop deployment with receding-horizon execution and delayed
//! inputs, plus rollout metrics.
//!
//! At tick `t` the policy sees states and goals for ticks `t-h..=t-1` and
//! actions for `t-h-1..=t-2`; it predicts `a_t..a_{t+n-1}` and only `a_t`
//! is applied. Because the newest inputs are one tick old, inference for
//! tick `t+1` may run while the plant integrates `a_t`
//! ([`RolloutOptions::overlap`]).

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;
use std::path::Path;
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{Episode, EpisodeMeta, NormStats};
use crate::denoiser::{Conditioning, DenoiserInput, DenoiserModel};
use crate::diffusion::{sample_timed, DiffusionSchedule, LossKind, NoisePredictor, SampleOptions, SamplerSpec};
use crate::plant::{observe, plant_step, PlantParams, PlantState, NUM_JOINTS};
use crate::sourcepolicy::{frequency, Gait, Goal};
use crate::{rng, Error, Result, ACTION_DIM, CONTROL_DT, GOAL_DIM, STATE_DIM};

/// Default rollout length: 20 s of control.
pub const DEFAULT_TICKS: usize = 1000;
pub const EXTRA_COLUMNS: [&str; 3] = ["latency_s", "forward_speed", "yaw_rate"];

/// Piecewise-constant goal over control ticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSchedule {
    /// `(start_tick, goal)` sorted by start tick; the first starts at 0.
    pub segments: Vec<(usize, Goal)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GoalRow {
    start_tick: usize,
    v_des: f64,
    h_des: f64,
    omega_des: f64,
}

impl GoalSchedule {
    pub fn constant(goal: Goal) -> Self {
        Self {
            segments: vec![(0, goal)],
        }
    }

    pub fn new(mut segments: Vec<(usize, Goal)>) -> Result<Self> {
        segments.sort_by_key(|s| s.0);
        if segments.first().map(|s| s.0) != Some(0) {
            return Err(Error::InvalidArgument("goal schedule must start at tick 0".into()));
        }
        if segments.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidArgument("duplicate start tick in goal schedule".into()));
        }
        Ok(Self { segments })
    }

    pub fn goal_at(&self, tick: usize) -> Goal {
        let i = self.segments.partition_point(|s| s.0 <= tick);
        self.segments[i.saturating_sub(1)].1
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "expected CSV columns start_tick,v_des,h_des,omega_des".into(),
            });
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut segs = Vec::new();
        for row in r.deserialize() {
            let row: GoalRow = row?;
            segs.push((row.start_tick, Goal::new(row.v_des, row.h_des, row.omega_des)));
        }
        Self::new(segs).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        for (start_tick, g) in &self.segments {
            w.serialize(GoalRow {
                start_tick: *start_tick,
                v_des: g.v_des,
                h_des: g.h_des,
                omega_des: g.omega_des,
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Delayed input windows handed to a policy at one tick, raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub tick: usize,
    /// `h x 14`, ticks `t-h..=t-1`.
    pub states: Vec<f32>,
    /// `h x 4`, ticks `t-h-1..=t-2`.
    pub actions: Vec<f32>,
    /// `h x 3`, ticks `t-h..=t-1`.
    pub goals: Vec<f32>,
    pub state_ticks: Vec<usize>,
    pub action_ticks: Vec<usize>,
    pub goal_ticks: Vec<usize>,
}

impl Snapshot {
    /// Literal index audit of the delay contract.
    pub fn audit(&self, history: usize) -> Result<()> {
        let t = self.tick;
        let want_s: Vec<usize> = (t - history..t).collect();
        let want_a: Vec<usize> = (t - history - 1..t - 1).collect();
        if self.state_ticks != want_s || self.goal_ticks != want_s || self.action_ticks != want_a {
            return Err(Error::Validation(format!(
                "delay contract violated at tick {t}: states {:?}, goals {:?}, actions {:?}",
                self.state_ticks, self.goal_ticks, self.action_ticks
            )));
        }
        if self.state_ticks.contains(&t) || self.goal_ticks.contains(&t) || self.action_ticks.contains(&(t - 1)) {
            return Err(Error::Validation(format!("snapshot at tick {t} leaks current inputs")));
        }
        Ok(())
    }
}

/// Ring buffers of the most recent observations, goals and applied actions,
/// each row tagged with its tick.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    history: usize,
    states: VecDeque<(usize, [f32; STATE_DIM])>,
    goals: VecDeque<(usize, [f32; GOAL_DIM])>,
    actions: VecDeque<(usize, [f32; ACTION_DIM])>,
}

impl HistoryBuffer {
    pub fn new(history: usize) -> Self {
        Self {
            history,
            states: VecDeque::with_capacity(history + 1),
            goals: VecDeque::with_capacity(history + 1),
            actions: VecDeque::with_capacity(history + 2),
        }
    }

    fn push<const D: usize>(q: &mut VecDeque<(usize, [f32; D])>, cap: usize, tick: usize, row: [f32; D]) {
        q.push_back((tick, row));
        while q.len() > cap {
            q.pop_front();
        }
    }

    /// Records `s_t` and `g_t`.
    pub fn push_observation(&mut self, tick: usize, state: [f32; STATE_DIM], goal: [f32; GOAL_DIM]) {
        Self::push(&mut self.states, self.history + 1, tick, state);
        Self::push(&mut self.goals, self.history + 1, tick, goal);
    }

    /// Records the applied `a_t`.
    pub fn push_action(&mut self, tick: usize, action: [f32; ACTION_DIM]) {
        Self::push(&mut self.actions, self.history + 1, tick, action);
    }

    /// Delayed windows for tick `t`; the newest action (`a_{t-1}`) is held
    /// back if already recorded.
    pub fn snapshot(&self, tick: usize) -> Result<Snapshot> {
        let h = self.history;
        if tick < h + 1 {
            return Err(Error::InvalidArgument(format!("tick {tick} precedes a full history")));
        }
        let states: Vec<_> = self.states.iter().filter(|(k, _)| *k < tick).collect();
        let goals: Vec<_> = self.goals.iter().filter(|(k, _)| *k < tick).collect();
        let actions: Vec<_> = self.actions.iter().filter(|(k, _)| *k + 1 < tick).collect();
        let tail = |n: usize| n.saturating_sub(h);
        let (states, goals, actions) = (
            &states[tail(states.len())..],
            &goals[tail(goals.len())..],
            &actions[tail(actions.len())..],
        );
        let snap = Snapshot {
            tick,
            states: states.iter().flat_map(|(_, r)| *r).collect(),
            actions: actions.iter().flat_map(|(_, r)| *r).collect(),
            goals: goals.iter().flat_map(|(_, r)| *r).collect(),
            state_ticks: states.iter().map(|(k, _)| *k).collect(),
            action_ticks: actions.iter().map(|(k, _)| *k).collect(),
            goal_ticks: goals.iter().map(|(k, _)| *k).collect(),
        };
        snap.audit(h)?;
        Ok(snap)
    }
}

/// Maps delayed snapshots to the action applied at each snapshot's tick.
pub trait Policy: Sync {
    fn history(&self) -> usize;

    /// Ticks of zero (standing) action before the policy is consulted.
    fn warmup(&self) -> usize {
        self.history() + 2
    }

    /// Number of actions predicted per call (only the first is applied).
    fn horizon(&self) -> usize;

    /// One action per snapshot; `seeds[i]` keys snapshot `i`'s noise.
    fn act(&self, snaps: &[Snapshot], seeds: &[u64]) -> Result<Vec<[f64; ACTION_DIM]>>;

    fn label(&self) -> String;
}

enum Backend<'a> {
    Diffusion(&'a (dyn NoisePredictor + Sync)),
    Regression(&'a DenoiserModel<f32>),
}

/// Policy backed by a denoiser (or any noise predictor) plus the dataset's
/// normalization.
pub struct ModelPolicy<'a> {
    backend: Backend<'a>,
    pub stats: NormStats,
    pub schedule: DiffusionSchedule,
    pub sampler: SamplerSpec,
    history: usize,
    horizon: usize,
}

impl<'a> ModelPolicy<'a> {
    /// Uses the checkpoint's sampler unless `sampler` overrides it.
    pub fn from_checkpoint(ck: &'a Checkpoint, sampler: Option<SamplerSpec>) -> Result<Self> {
        let sampler = sampler.unwrap_or_else(|| ck.header.sampler.clone());
        sampler.validate()?;
        let schedule = ck.schedule()?;
        if sampler.train_steps != schedule.steps() {
            return Err(Error::Validation(format!(
                "sampler {} does not match the checkpoint's {} training steps",
                sampler.label(),
                schedule.steps()
            )));
        }
        let backend = match ck.header.loss_kind {
            LossKind::Ddpm => Backend::Diffusion(&ck.model),
            LossKind::Reconstruction => Backend::Regression(&ck.model),
        };
        Ok(Self {
            backend,
            stats: ck.header.stats.clone(),
            schedule,
            sampler,
            history: ck.header.denoiser.history,
            horizon: ck.header.denoiser.horizon,
        })
    }

    /// Diffusion policy around an arbitrary predictor (e.g. a test stub).
    pub fn with_predictor(
        predictor: &'a (dyn NoisePredictor + Sync),
        stats: NormStats,
        schedule: DiffusionSchedule,
        sampler: SamplerSpec,
        history: usize,
    ) -> Self {
        let horizon = predictor.block().0;
        Self {
            backend: Backend::Diffusion(predictor),
            stats,
            schedule,
            sampler,
            history,
            horizon,
        }
    }

    fn normalized(&self, snaps: &[Snapshot]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let norm = |raw: Vec<f32>, cs: &crate::dataset::ColumnStats| {
            let mut out = vec![0.0; raw.len()];
            cs.normalize(&raw, &mut out);
            out
        };
        let cat = |f: &dyn Fn(&Snapshot) -> &Vec<f32>| -> Vec<f32> { snaps.iter().flat_map(|s| f(s).iter().copied()).collect() };
        (
            norm(cat(&|s| &s.states), &self.stats.states),
            norm(cat(&|s| &s.actions), &self.stats.actions),
            norm(cat(&|s| &s.goals), &self.stats.goals),
        )
    }

    /// Normalized `[B, n, A]` prediction for `snaps`.
    pub fn predict_block(&self, snaps: &[Snapshot], seeds: &[u64]) -> Result<Vec<f32>> {
        Ok(self.predict_block_timed(snaps, seeds)?.0)
    }

    fn predict_block_timed(&self, snaps: &[Snapshot], seeds: &[u64]) -> Result<(Vec<f32>, Vec<(usize, f64)>)> {
        let (s, a, g) = self.normalized(snaps);
        let cond = Conditioning {
            batch: snaps.len(),
            state_hist: &s,
            action_hist: &a,
            goal_hist: &g,
        };
        match self.backend {
            Backend::Diffusion(p) => sample_timed(p, cond, &self.schedule, &self.sampler, seeds, SampleOptions::default()),
            Backend::Regression(m) => {
                let started = Instant::now();
                let zeros = vec![0.0; snaps.len() * self.horizon * ACTION_DIM];
                let steps = vec![1; snaps.len()];
                let out = m.predict_noise(
                    &DenoiserInput {
                        batch: snaps.len(),
                        state_hist: &s,
                        action_hist: &a,
                        goal_hist: &g,
                        noisy_future: &zeros,
                        steps: &steps,
                    },
                    false,
                    0,
                )?;
                if out.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged { step: 1 });
                }
                Ok((out, vec![(1, started.elapsed().as_secs_f64())]))
            }
        }
    }

    /// Same as [`Policy::act`] for a single snapshot, also returning the
    /// per-iteration timings.
    pub fn act_timed(&self, snap: &Snapshot, seed: u64) -> Result<([f64; ACTION_DIM], Vec<(usize, f64)>)> {
        let (block, times) = self.predict_block_timed(std::slice::from_ref(snap), &[seed])?;
        Ok((self.first_action(&block, 0), times))
    }

    fn first_action(&self, block: &[f32], row: usize) -> [f64; ACTION_DIM] {
        let off = row * self.horizon * ACTION_DIM;
        let mut raw = [0.0f32; ACTION_DIM];
        self.stats.actions.denormalize(&block[off..off + ACTION_DIM], &mut raw);
        raw.map(f64::from)
    }
}

impl Policy for ModelPolicy<'_> {
    fn history(&self) -> usize {
        self.history
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn act(&self, snaps: &[Snapshot], seeds: &[u64]) -> Result<Vec<[f64; ACTION_DIM]>> {
        let block = self.predict_block(snaps, seeds)?;
        Ok((0..snaps.len()).map(|i| self.first_action(&block, i)).collect())
    }

    fn label(&self) -> String {
        match self.backend {
            Backend::Diffusion(_) => self.sampler.label(),
            Backend::Regression(_) => "regression".into(),
        }
    }
}

/// Replays a fixed action sequence with no warm-up or history.
pub struct ReplayPolicy {
    pub actions: Vec<[f64; ACTION_DIM]>,
}

impl ReplayPolicy {
    pub fn from_episode(ep: &Episode) -> Self {
        Self {
            actions: (0..ep.len())
                .map(|t| {
                    let a = ep.action(t);
                    [a[0], a[1], a[2], a[3]].map(f64::from)
                })
                .collect(),
        }
    }
}

impl Policy for ReplayPolicy {
    fn history(&self) -> usize {
        0
    }

    fn warmup(&self) -> usize {
        0
    }

    fn horizon(&self) -> usize {
        1
    }

    fn act(&self, snaps: &[Snapshot], _seeds: &[u64]) -> Result<Vec<[f64; ACTION_DIM]>> {
        snaps
            .iter()
            .map(|s| {
                self.actions
                    .get(s.tick)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("no recorded action for tick {}", s.tick)))
            })
            .collect()
    }

    fn label(&self) -> String {
        "replay".into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaitLabel {
    Trot,
    Pace,
    Hop,
    Bound,
    Unknown,
}

impl From<Gait> for GaitLabel {
    fn from(g: Gait) -> Self {
        match g {
            Gait::Trot => Self::Trot,
            Gait::Pace => Self::Pace,
            Gait::Hop => Self::Hop,
            Gait::Bound => Self::Bound,
        }
    }
}

impl std::fmt::Display for GaitLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Trot => "trot",
            Self::Pace => "pace",
            Self::Hop => "hop",
            Self::Bound => "bound",
            Self::Unknown => "unknown",
        };
        f.write_str(s)
    }
}

/// Oscillation amplitude (rad) below which a window is labelled unknown.
pub const MIN_OSCILLATION: f64 = 0.02;

fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Gait of a joint-angle window (`q[t][leg]`) from each leg's phase at the
/// nominal stepping frequency relative to leg 0.
pub fn classify_gait(q: &[[f64; NUM_JOINTS]], freq_hz: f64, dt: f64) -> Result<GaitLabel> {
    let period = 1.0 / freq_hz;
    if !(freq_hz > 0.0) || (q.len() as f64) * dt < 2.0 * period - 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "window of {} ticks is shorter than two {:.3} s periods",
            q.len(),
            period
        )));
    }
    let n = q.len() as f64;
    let mut phase = [0.0; NUM_JOINTS];
    let mut amp = [0.0; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        let mean = q.iter().map(|r| r[j]).sum::<f64>() / n;
        let (mut re, mut im) = (0.0, 0.0);
        for (t, r) in q.iter().enumerate() {
            let w = 2.0 * PI * freq_hz * t as f64 * dt;
            re += (r[j] - mean) * w.cos();
            im -= (r[j] - mean) * w.sin();
        }
        amp[j] = 2.0 * (re * re + im * im).sqrt() / n;
        phase[j] = im.atan2(re);
    }
    if amp.iter().any(|&a| a < MIN_OSCILLATION) {
        return Ok(GaitLabel::Unknown);
    }
    let rel: Vec<f64> = (1..NUM_JOINTS).map(|j| phase[j] - phase[0]).collect();
    let mut best = (f64::INFINITY, GaitLabel::Unknown);
    for g in Gait::ALL {
        let ph = g.phases();
        let d = (1..NUM_JOINTS)
            .map(|j| circular_distance(rel[j - 1], ph[j] - ph[0]))
            .sum::<f64>()
            / (NUM_JOINTS - 1) as f64;
        if d < best.0 {
            best = (d, g.into());
        }
    }
    Ok(if best.0 > PI / 4.0 { GaitLabel::Unknown } else { best.1 })
}

/// Number of label changes, ignoring unknown windows.
pub fn mode_switches(timeline: &[GaitLabel]) -> usize {
    let known: Vec<_> = timeline.iter().filter(|g| **g != GaitLabel::Unknown).collect();
    known.windows(2).filter(|w| w[0] != w[1]).count()
}

/// Most frequent known label (ties go to the earlier variant), or unknown.
pub fn dominant_gait(timeline: &[GaitLabel]) -> GaitLabel {
    let mut counts: BTreeMap<GaitLabel, usize> = BTreeMap::new();
    for g in timeline.iter().filter(|g| **g != GaitLabel::Unknown) {
        *counts.entry(*g).or_default() += 1;
    }
    counts
        .into_iter()
        .fold((GaitLabel::Unknown, 0), |best, (g, c)| if c > best.1 { (g, c) } else { best })
        .0
}

const LATENCY_EDGES: [f64; 13] = [
    1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 0.01, 0.02, 0.0333, 0.05, 0.1, 0.5, 1.0,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub median_s: f64,
    pub p95_s: f64,
    pub mean_s: f64,
    /// `(upper edge in seconds, count)`; the last bucket has no edge.
    pub histogram: Vec<(Option<f64>, usize)>,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| {
            if s.is_empty() {
                0.0
            } else {
                s[((s.len() - 1) as f64 * p).round() as usize]
            }
        };
        let mut histogram: Vec<(Option<f64>, usize)> = LATENCY_EDGES.iter().map(|&e| (Some(e), 0)).collect();
        histogram.push((None, 0));
        for &v in &s {
            let i = LATENCY_EDGES.iter().position(|&e| v <= e).unwrap_or(LATENCY_EDGES.len());
            histogram[i].1 += 1;
        }
        Self {
            count: s.len(),
            median_s: q(0.5),
            p95_s: q(0.95),
            mean_s: if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 },
            histogram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub rollout_id: u64,
    pub seed: u64,
    pub policy: String,
    pub ticks: usize,
    pub warmup: usize,
    pub fell: bool,
    pub fall_tick: Option<usize>,
    /// Set when the policy produced unusable output; the rollout stops.
    pub failed: Option<String>,
    /// Percent deviation of mean forward speed from the commanded mean.
    pub e_v: Option<f64>,
    /// Same for yaw rate; unset when the commanded mean is zero.
    pub e_omega: Option<f64>,
    pub gait_timeline: Vec<GaitLabel>,
    pub dominant_gait: GaitLabel,
    pub mode_switches: usize,
    /// Mean L1 norm of consecutive policy-action differences.
    pub jerk: f64,
    /// Wall-clock of each inference call (one call serves the whole batch).
    pub latency: LatencyStats,
    pub batch_size: usize,
    pub delay_audit_passed: bool,
    /// Actions applied from predictions; one per post-warm-up tick.
    pub predictions_applied: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSpec {
    pub rollout_id: u64,
    pub seed: u64,
    pub params: PlantParams,
    pub goals: GoalSchedule,
    pub ticks: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RolloutOptions {
    /// Run inference for tick `t+1` on a worker thread while the plant
    /// applies `a_t`.
    pub overlap: bool,
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub report: RolloutReport,
    /// Rows `0..ticks_run` in the episode format with [`EXTRA_COLUMNS`].
    pub trajectory: Episode,
}

/// Noise seed for rollout `id` at tick `t`.
pub fn step_seed(seed: u64, rollout_id: u64, tick: usize) -> u64 {
    rng::derive_seed(seed, &[rollout_id, tick as u64])
}

struct Live {
    state: PlantState,
    buffer: HistoryBuffer,
    traj: Episode,
    latencies: Vec<f64>,
    pending: Option<[f64; ACTION_DIM]>,
    done: bool,
    fell: bool,
    failed: Option<String>,
    audit_ok: bool,
    applied: usize,
    latency_col: Vec<f32>,
    speed_col: Vec<f32>,
    yaw_col: Vec<f32>,
}

type Request = (usize, Vec<usize>, Vec<Snapshot>, Vec<u64>);
type Reply = (Vec<usize>, Vec<Result<[f64; ACTION_DIM]>>, f64);

/// Batched inference that isolates failing rows.
fn infer(policy: &dyn Policy, snaps: &[Snapshot], seeds: &[u64]) -> Vec<Result<[f64; ACTION_DIM]>> {
    let finite = |a: &[f64; ACTION_DIM]| a.iter().all(|v| v.is_finite());
    match policy.act(snaps, seeds) {
        Ok(v) if v.iter().all(finite) => v.into_iter().map(Ok).collect(),
        _ => snaps
            .iter()
            .zip(seeds)
            .map(|(s, &sd)| match policy.act(std::slice::from_ref(s), &[sd]) {
                Ok(v) if finite(&v[0]) => Ok(v[0]),
                Ok(v) => Err(Error::Validation(format!("non-finite action {:?}", v[0]))),
                Err(e) => Err(e),
            })
            .collect(),
    }
}

/// Runs `specs` in lockstep; one batched inference call per tick serves
/// every live rollout.
pub fn rollout_batch(policy: &dyn Policy, specs: &[RolloutSpec], opts: RolloutOptions) -> Result<Vec<RolloutResult>> {
    let h = policy.history();
    let warmup = policy.warmup();
    if warmup > 0 && warmup < h + 2 {
        return Err(Error::InvalidArgument(format!("warm-up {warmup} shorter than h+2 = {}", h + 2)));
    }
    for s in specs {
        s.params.validate()?;
        if s.ticks < warmup {
            return Err(Error::InvalidArgument(format!(
                "rollout length {} shorter than the {warmup}-tick warm-up",
                s.ticks
            )));
        }
    }
    let mut live: Vec<Live> = specs
        .iter()
        .map(|s| {
            let mut meta = EpisodeMeta {
                source_tag: format!("rollout:{}", policy.label()),
                dynamics_meta: s.params,
                seed: s.seed,
                extra_columns: EXTRA_COLUMNS.iter().map(|c| c.to_string()).collect(),
                attrs: Default::default(),
            };
            meta.attrs.insert("rollout_id".into(), s.rollout_id.into());
            meta.attrs.insert("warmup".into(), warmup.into());
            Live {
                state: PlantState::standing(&s.params),
                buffer: HistoryBuffer::new(h),
                traj: Episode::new((STATE_DIM, ACTION_DIM, GOAL_DIM), meta),
                latencies: Vec::new(),
                pending: None,
                done: false,
                fell: false,
                failed: None,
                audit_ok: true,
                applied: 0,
                latency_col: Vec::new(),
                speed_col: Vec::new(),
                yaw_col: Vec::new(),
            }
        })
        .collect();
    let max_ticks = specs.iter().map(|s| s.ticks).max().unwrap_or(0);

    std::thread::scope(|scope| -> Result<()> {
        let (req_tx, req_rx) = mpsc::channel::<Request>();
        let (rep_tx, rep_rx) = mpsc::channel::<Reply>();
        if opts.overlap {
            scope.spawn(move || {
                for (_, ids, snaps, seeds) in req_rx {
                    let started = Instant::now();
                    let out = infer(policy, &snaps, &seeds);
                    let dt = started.elapsed().as_secs_f64();
                    if rep_tx.send((ids, out, dt)).is_err() {
                        break;
                    }
                }
            });
        } else {
            drop(req_rx);
            drop(rep_tx);
        }

        // Builds snapshots for `tick` over live rollouts that need a policy action.
        let gather = |live: &mut [Live], tick: usize| -> (Vec<usize>, Vec<Snapshot>, Vec<u64>) {
            let mut ids = Vec::new();
            let mut snaps = Vec::new();
            let mut seeds = Vec::new();
            for (i, l) in live.iter_mut().enumerate() {
                if l.done || tick < warmup || tick >= specs[i].ticks {
                    continue;
                }
                let snap = if h == 0 {
                    Ok(Snapshot {
                        tick,
                        states: vec![],
                        actions: vec![],
                        goals: vec![],
                        state_ticks: vec![],
                        action_ticks: vec![],
                        goal_ticks: vec![],
                    })
                } else {
                    l.buffer.snapshot(tick)
                };
                match snap {
                    Ok(s) => {
                        ids.push(i);
                        snaps.push(s);
                        seeds.push(step_seed(specs[i].seed, specs[i].rollout_id, tick));
                    }
                    Err(e) => {
                        l.audit_ok = false;
                        l.failed = Some(e.to_string());
                        l.done = true;
                    }
                }
            }
            (ids, snaps, seeds)
        };
        let deliver = |live: &mut [Live], ids: &[usize], out: Vec<Result<[f64; ACTION_DIM]>>, dt: f64| {
            for (&i, r) in ids.iter().zip(out) {
                live[i].latencies.push(dt);
                match r {
                    Ok(a) => live[i].pending = Some(a),
                    Err(e) => {
                        live[i].failed = Some(e.to_string());
                        live[i].done = true;
                    }
                }
            }
        };

        for tick in 0..max_ticks {
            // Observe s_t, g_t.
            for (i, l) in live.iter_mut().enumerate() {
                if l.done || tick >= specs[i].ticks {
                    l.done = true;
                    continue;
                }
                let goal = specs[i].goals.goal_at(tick);
                let g = goal.to_array().map(|v| v as f32);
                l.buffer.push_observation(tick, observe(&l.state).as_f32(), g);
            }
            // a_t: computed serially now unless it was prefetched last tick.
            if !opts.overlap || tick == warmup {
                let (ids, snaps, seeds) = gather(&mut live, tick);
                if !ids.is_empty() {
                    let started = Instant::now();
                    let out = infer(policy, &snaps, &seeds);
                    deliver(&mut live, &ids, out, started.elapsed().as_secs_f64());
                }
            }
            // Prefetch a_{t+1}: needs s_<=t and a_<=t-1, both already buffered.
            let mut in_flight = None;
            if opts.overlap && tick + 1 > warmup {
                let (ids, snaps, seeds) = gather(&mut live, tick + 1);
                if !ids.is_empty() {
                    req_tx.send((tick + 1, ids, snaps, seeds)).map_err(|_| Error::Validation("inference worker stopped".into()))?;
                    in_flight = Some(());
                }
            }
            // Apply a_t.
            for (i, l) in live.iter_mut().enumerate() {
                if l.done {
                    continue;
                }
                let from_policy = tick >= warmup;
                let action = if from_policy {
                    match l.pending.take() {
                        Some(a) => a,
                        None => {
                            l.failed.get_or_insert_with(|| format!("no action available at tick {tick}"));
                            l.done = true;
                            continue;
                        }
                    }
                } else {
                    [0.0; ACTION_DIM]
                };
                let lat = if from_policy { l.latencies.last().copied().unwrap_or(0.0) } else { 0.0 };
                let goal = specs[i].goals.goal_at(tick);
                l.traj.push(
                    &observe(&l.state).as_f32(),
                    &action.map(|a| a as f32),
                    &goal.to_array().map(|v| v as f32),
                );
                l.buffer.push_action(tick, action.map(|a| a as f32));
                if from_policy {
                    l.applied += 1;
                }
                match plant_step(&l.state, &action, &specs[i].params) {
                    Ok(next) => l.state = next,
                    Err(e) => {
                        l.failed = Some(e.to_string());
                        l.done = true;
                    }
                }
                // Speeds achieved over this tick's control period.
                l.latency_col.push(lat as f32);
                l.speed_col.push(l.state.forward_speed as f32);
                l.yaw_col.push(l.state.yaw_rate() as f32);
                if l.state.fallen {
                    l.fell = true;
                    l.done = true;
                }
            }
            if in_flight.is_some() {
                let (ids, out, dt) = rep_rx.recv().map_err(|_| Error::Validation("inference worker stopped".into()))?;
                // Rollouts that fell while inference ran drop the action.
                let keep: Vec<bool> = ids.iter().map(|&i| !live[i].done).collect();
                let (ids, out): (Vec<usize>, Vec<_>) = ids.into_iter().zip(out).zip(keep).filter(|(_, k)| *k).map(|(p, _)| p).unzip();
                deliver(&mut live, &ids, out, dt);
            }
        }
        drop(req_tx);
        Ok(())
    })?;

    Ok(live
        .into_iter()
        .zip(specs)
        .map(|(l, spec)| finish(l, spec, warmup, policy.label(), specs.len()))
        .collect())
}

fn finish(mut l: Live, spec: &RolloutSpec, warmup: usize, label: String, batch: usize) -> RolloutResult {
    let n = l.traj.len();
    l.traj.extras = (0..n)
        .flat_map(|t| [l.latency_col[t], l.speed_col[t], l.yaw_col[t]])
        .collect();
    let metrics = trajectory_metrics(&l.traj, warmup);
    let q: Vec<[f64; NUM_JOINTS]> = (0..n)
        .map(|t| {
            let s = l.traj.state(t);
            [s[0], s[1], s[2], s[3]].map(f64::from)
        })
        .collect();
    let mut timeline = Vec::new();
    let mut t = warmup;
    while t < n {
        let v = spec.goals.goal_at(t).v_des;
        let f = frequency(v);
        let len = (2.0 / f / CONTROL_DT).ceil() as usize;
        if t + len > n {
            break;
        }
        timeline.push(classify_gait(&q[t..t + len], f, CONTROL_DT).unwrap_or(GaitLabel::Unknown));
        t += len;
    }
    let report = RolloutReport {
        rollout_id: spec.rollout_id,
        seed: spec.seed,
        policy: label,
        ticks: n,
        warmup,
        fell: l.fell,
        fall_tick: l.fell.then_some(n),
        failed: l.failed,
        e_v: metrics.e_v,
        e_omega: metrics.e_omega,
        dominant_gait: dominant_gait(&timeline),
        mode_switches: mode_switches(&timeline),
        gait_timeline: timeline,
        jerk: metrics.jerk,
        latency: LatencyStats::from_samples(&l.latencies),
        batch_size: batch,
        delay_audit_passed: l.audit_ok,
        predictions_applied: l.applied,
    };
    RolloutResult {
        report,
        trajectory: l.traj,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryMetrics {
    pub e_v: Option<f64>,
    pub e_omega: Option<f64>,
    pub jerk: f64,
}

fn percent_error(real: &[f64], desired: &[f64]) -> Option<f64> {
    let den: f64 = desired.iter().map(|v| v.abs()).sum();
    if real.is_empty() || den == 0.0 {
        return None;
    }
    let diff: f64 = real.iter().sum::<f64>() - desired.iter().sum::<f64>();
    Some(100.0 * diff.abs() / den)
}

/// Tracking errors and jerk over rows `warmup..` of a rollout dump.
pub fn trajectory_metrics(traj: &Episode, warmup: usize) -> TrajectoryMetrics {
    let n = traj.len();
    let col = |name: &str| traj.extra_column(name).unwrap_or_default();
    let (fwd, yaw) = (col("forward_speed"), col("yaw_rate"));
    let rows = warmup.min(n)..n;
    let pick = |v: &[f32]| -> Vec<f64> { rows.clone().filter_map(|t| v.get(t)).map(|&x| f64::from(x)).collect() };
    let v_des: Vec<f64> = rows.clone().map(|t| f64::from(traj.goal(t)[0])).collect();
    let w_des: Vec<f64> = rows.clone().map(|t| f64::from(traj.goal(t)[2])).collect();
    let mut jerk = 0.0;
    let mut count = 0;
    for t in (warmup + 1)..n {
        let (a, b) = (traj.action(t), traj.action(t - 1));
        jerk += a.iter().zip(b).map(|(x, y)| f64::from((x - y).abs())).sum::<f64>();
        count += 1;
    }
    TrajectoryMetrics {
        e_v: percent_error(&pick(&fwd), &v_des),
        e_omega: percent_error(&pick(&yaw), &w_des),
        jerk: if count > 0 { jerk / count as f64 } else { 0.0 },
    }
}

pub fn rollout(policy: &dyn Policy, spec: &RolloutSpec, opts: RolloutOptions) -> Result<RolloutResult> {
    Ok(rollout_batch(policy, std::slice::from_ref(spec), opts)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub policy: String,
    pub token_dim: usize,
    pub per_call: LatencyStats,
    /// Median seconds per denoising iteration, keyed by step `k`.
    pub per_iteration_median_s: Vec<(usize, f64)>,
    /// Std of the per-iteration medians divided by their mean.
    pub per_iteration_spread: f64,
    pub within_50hz: bool,
    pub within_30hz: bool,
}

/// Times single-rollout inference calls on a standing-robot snapshot.
pub fn latency_probe(policy: &ModelPolicy<'_>, token_dim: usize, iterations: usize) -> Result<LatencyReport> {
    let h = policy.history();
    let params = PlantParams::default();
    let standing = observe(&PlantState::standing(&params)).as_f32();
    let goal = Goal::new(0.5, params.h0, 0.0).to_array().map(|v| v as f32);
    let mut buf = HistoryBuffer::new(h);
    for t in 0..=h + 1 {
        buf.push_observation(t, standing, goal);
        buf.push_action(t, [0.0; ACTION_DIM]);
    }
    let snap = buf.snapshot(h + 2)?;
    let mut calls = Vec::with_capacity(iterations);
    let mut per_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for i in 0..iterations.max(1) {
        let started = Instant::now();
        let (_, times) = policy.act_timed(&snap, i as u64)?;
        calls.push(started.elapsed().as_secs_f64());
        for (k, dt) in times {
            per_k.entry(k).or_default().push(dt);
        }
    }
    let medians: Vec<(usize, f64)> = per_k
        .into_iter()
        .map(|(k, v)| (k, LatencyStats::from_samples(&v).median_s))
        .collect();
    let m: Vec<f64> = medians.iter().map(|x| x.1).collect();
    let mean = m.iter().sum::<f64>() / m.len().max(1) as f64;
    let var = m.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m.len().max(1) as f64;
    let per_call = LatencyStats::from_samples(&calls);
    Ok(LatencyReport {
        policy: policy.label(),
        token_dim,
        within_50hz: per_call.median_s < CONTROL_DT,
        within_30hz: per_call.median_s < 1.0 / 30.0,
        per_call,
        per_iteration_median_s: medians,
        per_iteration_spread: if mean > 0.0 { var.sqrt() / mean } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{record_episode, ColumnStats, CollectConfig};
    use crate::diffusion::{make_schedule, ZeroPredictor};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn wave(phases: [f64; 4], amp: f64, f: f64, ticks: usize, noise: f64, seed: u64) -> Vec<[f64; 4]> {
        let mut r = rng::stream(seed, &[]);
        let n = Normal::new(0.0, noise.max(1e-12)).unwrap();
        (0..ticks)
            .map(|t| {
                let w = 2.0 * PI * f * t as f64 * CONTROL_DT;
                let mut row = [0.0; 4];
                for j in 0..4 {
                    row[j] = amp * (w + phases[j]).sin() + if noise > 0.0 { n.sample(&mut r) } else { 0.0 };
                }
                row
            })
            .collect()
    }

    #[test]
    fn classifier_labels_synthetic_gaits() {
        let f = frequency(0.5);
        let len = (2.0 / f / CONTROL_DT).ceil() as usize;
        for g in Gait::ALL {
            let q = wave(g.phases(), 0.3, f, len, 0.01, 3);
            let label = classify_gait(&q, f, CONTROL_DT).unwrap();
            if g == Gait::Hop {
                assert_eq!(label, GaitLabel::Hop);
            } else {
                assert_eq!(label, g.into(), "{g:?}");
            }
        }
        let still = vec![[0.1; 4]; len];
        assert_eq!(classify_gait(&still, f, CONTROL_DT).unwrap(), GaitLabel::Unknown);
        assert!(classify_gait(&still[..len / 2], f, CONTROL_DT).is_err());
    }

    #[test]
    fn pace_with_noise_is_pace() {
        let f = frequency(0.3);
        let len = (2.0 / f / CONTROL_DT).ceil() as usize;
        let mut r = rng::stream(9, &[]);
        for _ in 0..20 {
            let q = wave(Gait::Pace.phases(), 0.35, f, len, 0.1, r.gen());
            assert_eq!(classify_gait(&q, f, CONTROL_DT).unwrap(), GaitLabel::Pace);
        }
    }

    #[test]
    fn switch_counting_ignores_unknown() {
        use GaitLabel::*;
        let tl = [Trot, Unknown, Trot, Pace, Unknown, Pace, Trot];
        assert_eq!(mode_switches(&tl), 2);
        assert_eq!(dominant_gait(&tl), Trot);
        assert_eq!(dominant_gait(&[Unknown]), Unknown);
    }

    #[test]
    fn buffer_snapshots_respect_delay() {
        let h = 3;
        let mut b = HistoryBuffer::new(h);
        for t in 0..12 {
            b.push_observation(t, [t as f32; STATE_DIM], [t as f32; GOAL_DIM]);
            if t >= h + 2 {
                let s = b.snapshot(t).unwrap();
                assert_eq!(s.state_ticks, vec![t - 3, t - 2, t - 1]);
                assert_eq!(s.action_ticks, vec![t - 4, t - 3, t - 2]);
                assert_eq!(*s.states.last().unwrap(), (t - 1) as f32);
                assert_eq!(*s.actions.last().unwrap(), (t - 2) as f32);
            }
            b.push_action(t, [t as f32; ACTION_DIM]);
            if t + 1 >= h + 2 {
                // Prefetch for the next tick, after a_t is already recorded.
                let s = b.snapshot(t + 1).unwrap();
                assert_eq!(*s.action_ticks.last().unwrap(), t - 1);
            }
        }
        let mut bad = b.snapshot(12).unwrap();
        bad.action_ticks[2] = 11;
        assert!(bad.audit(h).is_err());
    }

    fn scaled_stats(action_std: f64) -> NormStats {
        let col = |d: usize, s: f64| ColumnStats {
            mean: vec![0.0; d],
            std: vec![s; d],
        };
        NormStats {
            states: col(STATE_DIM, 1.0),
            actions: col(ACTION_DIM, action_std),
            goals: col(GOAL_DIM, 1.0),
        }
    }

    fn spec(id: u64, ticks: usize) -> RolloutSpec {
        RolloutSpec {
            rollout_id: id,
            seed: 11,
            params: PlantParams::default(),
            goals: GoalSchedule::constant(Goal::new(0.5, 0.3, 0.0)),
            ticks,
        }
    }

    #[test]
    fn zero_predictor_policy_falls() {
        let z = ZeroPredictor {
            horizon: 4,
            action_dim: ACTION_DIM,
        };
        let p = ModelPolicy::with_predictor(&z, scaled_stats(3.0), make_schedule(10, 1e-4, 2e-2).unwrap(), SamplerSpec::ddpm(10), 8);
        let r = rollout(&p, &spec(0, 300), RolloutOptions::default()).unwrap();
        assert!(r.report.fell);
        assert!(r.report.failed.is_none());
        assert!(r.report.delay_audit_passed);
        assert_eq!(r.report.warmup, 10);
        assert_eq!(r.trajectory.len(), r.report.ticks);
        for t in 0..10 {
            assert_eq!(r.trajectory.action(t), &[0.0; 4]);
        }
    }

    #[test]
    fn overlap_and_batching_match_serial() {
        let z = ZeroPredictor {
            horizon: 4,
            action_dim: ACTION_DIM,
        };
        let p = ModelPolicy::with_predictor(&z, scaled_stats(0.1), make_schedule(10, 1e-4, 2e-2).unwrap(), SamplerSpec::ddpm(10), 8);
        let specs: Vec<_> = (0..3).map(|i| spec(i, 60 + 10 * i as usize)).collect();
        let serial: Vec<_> = specs
            .iter()
            .map(|s| rollout(&p, s, RolloutOptions::default()).unwrap())
            .collect();
        let batched = rollout_batch(&p, &specs, RolloutOptions::default()).unwrap();
        let overlapped = rollout_batch(&p, &specs, RolloutOptions { overlap: true }).unwrap();
        for ((a, b), c) in serial.iter().zip(&batched).zip(&overlapped) {
            assert_eq!(a.trajectory.states, b.trajectory.states);
            assert_eq!(a.trajectory.actions, b.trajectory.actions);
            assert_eq!(a.trajectory.actions, c.trajectory.actions);
            assert_eq!(a.trajectory.states, c.trajectory.states);
            assert_eq!(a.report.predictions_applied, c.report.predictions_applied);
            assert!(c.report.delay_audit_passed);
        }
    }

    #[test]
    fn replay_reproduces_recorded_episode() {
        let cfg = CollectConfig {
            max_len: 200,
            ..Default::default()
        };
        let params = PlantParams::default().scaled([1.1, 0.9, 1.0, 1.2]);
        let ep = record_episode(&cfg, Gait::Trot, &params, 5).unwrap();
        let goals = GoalSchedule::new(
            (0..ep.len())
                .step_by(cfg.goal_dwell)
                .map(|t| {
                    let g = ep.goal(t);
                    (t, Goal::new(g[0].into(), g[1].into(), g[2].into()))
                })
                .collect(),
        )
        .unwrap();
        let policy = ReplayPolicy::from_episode(&ep);
        let s = RolloutSpec {
            rollout_id: 0,
            seed: 0,
            params,
            goals,
            ticks: ep.len(),
        };
        let r = rollout(&policy, &s, RolloutOptions::default()).unwrap();
        assert_eq!(r.trajectory.states, ep.states);
        assert_eq!(r.trajectory.actions, ep.actions);
    }

    #[test]
    fn metrics_recompute_from_dump() {
        let cfg = CollectConfig {
            max_len: 300,
            ..Default::default()
        };
        let ep = record_episode(&cfg, Gait::Trot, &PlantParams::default(), 1).unwrap();
        let policy = ReplayPolicy::from_episode(&ep);
        let s = RolloutSpec {
            rollout_id: 2,
            seed: 0,
            params: PlantParams::default(),
            goals: GoalSchedule::constant(Goal::new(0.5, 0.3, 0.2)),
            ticks: ep.len(),
        };
        let r = rollout(&policy, &s, RolloutOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.gdep");
        r.trajectory.write(&path).unwrap();
        let back = Episode::read(&path).unwrap();
        let m = trajectory_metrics(&back, r.report.warmup);
        assert_eq!(m.e_v, r.report.e_v);
        assert_eq!(m.e_omega, r.report.e_omega);

        // Independent E_v from the stored columns.
        let v = back.extra_column("forward_speed").unwrap();
        let mean_v = v.iter().map(|&x| f64::from(x)).sum::<f64>() / v.len() as f64;
        let want = 100.0 * (mean_v - f64::from(0.5f32)).abs() / f64::from(0.5f32);
        assert!((m.e_v.unwrap() - want).abs() < 1e-9, "{:?} vs {want}", m.e_v);
    }

    #[test]
    fn goal_schedule_csv_round_trip() {
        let g = GoalSchedule::new(vec![(0, Goal::new(0.3, 0.3, 0.0)), (200, Goal::new(0.5, 0.28, 0.3))]).unwrap();
        assert_eq!(g.goal_at(199).v_des, 0.3);
        assert_eq!(g.goal_at(200).v_des, 0.5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        g.write_csv(&p).unwrap();
        assert_eq!(GoalSchedule::read_csv(&p).unwrap(), g);
        assert!(GoalSchedule::new(vec![(5, Goal::new(0.0, 0.3, 0.0))]).is_err());
    }

    #[test]
    fn latency_stats_quantiles() {
        let s = LatencyStats::from_samples(&[0.001, 0.002, 0.003, 0.004, 0.1]);
        assert_eq!(s.median_s, 0.003);
        assert_eq!(s.p95_s, 0.1);
        assert_eq!(s.histogram.iter().map(|h| h.1).sum::<usize>(), 5);
    }
}
