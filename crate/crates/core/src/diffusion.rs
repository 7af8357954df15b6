//! Noise schedules, training losses and the DDPM / DDIM samplers.
//!
//! Diffusion steps are indexed `1..=K`; `alpha_bar(0)` is taken as 1.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::WindowBatch;
use crate::denoiser::{Conditioning, DenoiserInput, DenoiserModel};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::{rng, Error, Result};

pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 2e-2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    /// Betas evenly spaced from `beta_min` to `beta_max`.
    #[default]
    Linear,
    /// Squared-cosine `alpha_bar` curve (offset 0.008), betas capped at
    /// `beta_max`.
    Cosine,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variance {
    /// `sigma_k^2 = beta_k`.
    #[default]
    Beta,
    /// Posterior variance `beta_k (1 - alpha_bar_{k-1}) / (1 - alpha_bar_k)`.
    Posterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub spacing: Spacing,
    pub variance: Variance,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
            spacing: Spacing::Linear,
            variance: Variance::Beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub config: ScheduleConfig,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear betas from `beta_min` to `beta_max` inclusive; a single step
/// takes `beta_min`.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    DiffusionSchedule::new(ScheduleConfig {
        steps,
        beta_min,
        beta_max,
        ..Default::default()
    })
}

impl DiffusionSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_min,
            beta_max,
            spacing,
            ..
        } = config;
        if steps < 1 {
            return Err(Error::InvalidArgument("diffusion steps must be >= 1".into()));
        }
        if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
            )));
        }
        let beta: Vec<f64> = match spacing {
            Spacing::Linear => (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_min
                    } else {
                        beta_min + (i as f64 / (steps - 1) as f64) * (beta_max - beta_min)
                    }
                })
                .collect(),
            Spacing::Cosine => {
                let f = |t: f64| {
                    let x = (t / steps as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (1..=steps)
                    .map(|k| (1.0 - f(k as f64) / f(k as f64 - 1.0)).clamp(beta_min, beta_max))
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self {
            config,
            beta,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.beta(k)
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bar[k - 1]
        }
    }

    /// Scale on the denoised estimate, `1/sqrt(alpha_k)`.
    pub fn coef_scale(&self, k: usize) -> f64 {
        1.0 / self.alpha(k).sqrt()
    }

    /// Weight on the noise prediction, `beta_k / sqrt(1 - alpha_bar_k)`.
    pub fn coef_noise(&self, k: usize) -> f64 {
        self.beta(k) / (1.0 - self.alpha_bar(k)).sqrt()
    }

    /// Injected noise scale; zero on the final step.
    pub fn sigma(&self, k: usize) -> f64 {
        if k == 1 {
            return 0.0;
        }
        match self.config.variance {
            Variance::Beta => self.beta(k).sqrt(),
            Variance::Posterior => {
                (self.beta(k) * (1.0 - self.alpha_bar(k - 1)) / (1.0 - self.alpha_bar(k))).sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub train_steps: usize,
    pub infer_steps: usize,
    /// Visited steps in increasing order; sampling walks it backwards.
    pub subsequence: Vec<usize>,
}

impl SamplerSpec {
    pub fn ddpm(train_steps: usize) -> Self {
        Self {
            kind: SamplerKind::Ddpm,
            train_steps,
            infer_steps: train_steps,
            subsequence: (1..=train_steps).collect(),
        }
    }

    /// Evenly strided subsequence `i * K / infer` for `i = 1..=infer`.
    pub fn ddim(train_steps: usize, infer_steps: usize) -> Result<Self> {
        if infer_steps == 0 || infer_steps > train_steps {
            return Err(Error::InvalidArgument(format!(
                "ddim needs 1 <= infer_steps <= {train_steps}, got {infer_steps}"
            )));
        }
        let spec = Self {
            kind: SamplerKind::Ddim,
            train_steps,
            infer_steps,
            subsequence: (1..=infer_steps).map(|i| i * train_steps / infer_steps).collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.subsequence.len() != self.infer_steps {
            return bad(format!(
                "subsequence has {} entries, infer_steps is {}",
                self.subsequence.len(),
                self.infer_steps
            ));
        }
        if self.kind == SamplerKind::Ddpm && self.infer_steps != self.train_steps {
            return bad("ddpm must run every training step".into());
        }
        if self.subsequence.first().map_or(true, |&k| k == 0)
            || self.subsequence.windows(2).any(|w| w[0] >= w[1])
            || self.subsequence.last() != Some(&self.train_steps)
        {
            return bad(format!(
                "subsequence {:?} must be strictly increasing within 1..={} and end there",
                self.subsequence, self.train_steps
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.kind {
            SamplerKind::Ddpm => format!("ddpm_{}", self.train_steps),
            SamplerKind::Ddim => format!("ddim_{}_{}", self.train_steps, self.infer_steps),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Noise-prediction objective.
    Ddpm,
    /// Direct action regression with the same network (noisy input zeroed,
    /// step fixed at 1).
    Reconstruction,
}

/// Per-element diffusion draws for one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedBatch<T> {
    pub steps: Vec<usize>,
    pub eps: Vec<T>,
    pub noisy: Vec<T>,
    /// Noised history actions when history noising is enabled.
    pub noisy_history: Option<Vec<T>>,
}

fn normals<T: Scalar>(r: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| T::from_f64(r.sample::<f64, _>(StandardNormal)))
        .collect()
}

fn mix<T: Scalar>(clean: &[T], eps: &[T], alpha_bar: f64) -> Vec<T> {
    let (a, b) = (T::from_f64(alpha_bar.sqrt()), T::from_f64((1.0 - alpha_bar).sqrt()));
    clean.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect()
}

/// Draws `k ~ U{1..K}` and `eps ~ N(0, I)` per batch element from
/// `stream(seed, [b])` and forms the noised future block.
pub fn noise_batch<T: Scalar>(
    batch: &WindowBatch<T>,
    schedule: &DiffusionSchedule,
    seed: u64,
    noise_history: bool,
) -> NoisedBatch<T> {
    let b = batch.batch.max(1);
    let per = batch.future.len() / b;
    let per_hist = batch.action_hist.len() / b;
    let mut out = NoisedBatch {
        steps: Vec::with_capacity(batch.batch),
        eps: Vec::with_capacity(batch.future.len()),
        noisy: Vec::with_capacity(batch.future.len()),
        noisy_history: noise_history.then(Vec::new),
    };
    for i in 0..batch.batch {
        let mut r = rng::stream(seed, &[i as u64]);
        let k = r.gen_range(1..=schedule.steps());
        let eps = normals::<T>(&mut r, per);
        let ab = schedule.alpha_bar(k);
        out.noisy.extend(mix(&batch.future[i * per..(i + 1) * per], &eps, ab));
        out.eps.extend(eps);
        out.steps.push(k);
        if let Some(h) = out.noisy_history.as_mut() {
            let eh = normals::<T>(&mut r, per_hist);
            h.extend(mix(&batch.action_hist[i * per_hist..(i + 1) * per_hist], &eh, ab));
        }
    }
    out
}

/// Mean squared error in `f64`.
pub fn mse<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    s / a.len().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: f64,
    /// One gradient per model parameter, empty if not requested.
    pub grads: Vec<Vec<T>>,
}

/// Training or evaluation loss of `kind` on one batch.
pub fn batch_loss<T: Scalar>(
    model: &DenoiserModel<T>,
    batch: &WindowBatch<T>,
    schedule: &DiffusionSchedule,
    kind: LossKind,
    seed: u64,
    train: bool,
    want_grads: bool,
) -> Result<LossOutput<T>> {
    if schedule.steps() != model.config.diffusion_steps {
        return Err(Error::Validation(format!(
            "schedule has {} steps, model embeds {}",
            schedule.steps(),
            model.config.diffusion_steps
        )));
    }
    let (noisy, steps, target, hist) = match kind {
        LossKind::Ddpm => {
            let nb = noise_batch(batch, schedule, seed, model.config.noise_history_actions);
            (nb.noisy, nb.steps, nb.eps, nb.noisy_history)
        }
        LossKind::Reconstruction => (
            vec![T::zero(); batch.future.len()],
            vec![1; batch.batch],
            batch.future.clone(),
            None,
        ),
    };
    let mut g = Graph::new();
    let vars = model.bind(&mut g, want_grads);
    let input = DenoiserInput {
        batch: batch.batch,
        state_hist: &batch.state_hist,
        action_hist: hist.as_deref().unwrap_or(&batch.action_hist),
        goal_hist: &batch.goal_hist,
        noisy_future: &noisy,
        steps: &steps,
    };
    let pred = model.forward(&mut g, &vars, &input, train, rng::derive_seed(seed, &[u64::MAX]))?;
    let shape = g.shape(pred).to_vec();
    let target = g.input(Tensor::new(&shape, target)?);
    let loss = g.mse(pred, target)?;
    let value = g.value(loss)[0].as_f64();
    let grads = if want_grads {
        let gr = g.backward(loss);
        vars.iter()
            .zip(&model.params)
            .map(|(&v, p)| gr.get_or_zeros(v, p.numel()))
            .collect()
    } else {
        Vec::new()
    };
    Ok(LossOutput { loss: value, grads })
}

/// DDPM objective on one batch with gradients.
pub fn ddpm_loss<T: Scalar>(
    model: &DenoiserModel<T>,
    batch: &WindowBatch<T>,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<LossOutput<T>> {
    batch_loss(model, batch, schedule, LossKind::Ddpm, seed, true, true)
}

/// Predicts noise for a fixed conditioning across denoising iterations.
pub trait DenoiseSession {
    /// `noisy` is `[B, n, A]`; `noisy_history`, when given, replaces the
    /// history actions for this call.
    fn predict(&mut self, noisy: &[f32], k: usize, noisy_history: Option<&[f32]>) -> Result<Vec<f32>>;
}

pub trait NoisePredictor {
    /// `(horizon, action_dim)` of one predicted block.
    fn block(&self) -> (usize, usize);

    fn noises_history(&self) -> bool {
        false
    }

    fn session<'s>(&'s self, cond: Conditioning<'s, f32>) -> Result<Box<dyn DenoiseSession + 's>>;
}

struct ModelSession<'s> {
    model: &'s DenoiserModel<f32>,
    cond: Conditioning<'s, f32>,
    encoded: Tensor<f32>,
}

impl<'s> ModelSession<'s> {
    fn encode(model: &'s DenoiserModel<f32>, cond: &Conditioning<'_, f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let enc = model.encode_condition(&mut g, &vars, cond)?;
        Ok(g.tensor(enc))
    }
}

impl DenoiseSession for ModelSession<'_> {
    fn predict(&mut self, noisy: &[f32], k: usize, noisy_history: Option<&[f32]>) -> Result<Vec<f32>> {
        let encoded = match noisy_history {
            Some(h) => Self::encode(
                self.model,
                &Conditioning {
                    action_hist: h,
                    ..self.cond
                },
            )?,
            None => self.encoded.clone(),
        };
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g, false);
        let enc = g.input(encoded);
        let steps = vec![k; self.cond.batch];
        let out = self.model.decode(&mut g, &vars, enc, noisy, &steps, false, 0)?;
        Ok(g.value(out).to_vec())
    }
}

impl NoisePredictor for DenoiserModel<f32> {
    fn block(&self) -> (usize, usize) {
        (self.config.horizon, self.config.action_dim)
    }

    fn noises_history(&self) -> bool {
        self.config.noise_history_actions
    }

    fn session<'s>(&'s self, cond: Conditioning<'s, f32>) -> Result<Box<dyn DenoiseSession + 's>> {
        let encoded = ModelSession::encode(self, &cond)?;
        Ok(Box::new(ModelSession {
            model: self,
            cond,
            encoded,
        }))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SampleOptions {
    /// Drop the injected DDPM noise (used by closed-form checks).
    pub suppress_noise: bool,
}

fn check_finite(v: &[f32], k: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { step: k })
    }
}

/// Runs `spec` over a batch; `seeds[b]` keys element `b`'s noise stream.
/// Returns the `[B, n, A]` denoised block.
pub fn sample(
    predictor: &dyn NoisePredictor,
    cond: Conditioning<'_, f32>,
    schedule: &DiffusionSchedule,
    spec: &SamplerSpec,
    seeds: &[u64],
    opts: SampleOptions,
) -> Result<Vec<f32>> {
    sample_inner(predictor, cond, schedule, spec, seeds, opts, None)
}

/// [`sample`] that also returns `(k, seconds)` for every denoising
/// iteration.
pub fn sample_timed(
    predictor: &dyn NoisePredictor,
    cond: Conditioning<'_, f32>,
    schedule: &DiffusionSchedule,
    spec: &SamplerSpec,
    seeds: &[u64],
    opts: SampleOptions,
) -> Result<(Vec<f32>, Vec<(usize, f64)>)> {
    let mut times = Vec::with_capacity(spec.infer_steps);
    let out = sample_inner(predictor, cond, schedule, spec, seeds, opts, Some(&mut times))?;
    Ok((out, times))
}

fn sample_inner(
    predictor: &dyn NoisePredictor,
    cond: Conditioning<'_, f32>,
    schedule: &DiffusionSchedule,
    spec: &SamplerSpec,
    seeds: &[u64],
    opts: SampleOptions,
    mut timings: Option<&mut Vec<(usize, f64)>>,
) -> Result<Vec<f32>> {
    spec.validate()?;
    if spec.train_steps != schedule.steps() {
        return Err(Error::Validation(format!(
            "sampler expects {} training steps, schedule has {}",
            spec.train_steps,
            schedule.steps()
        )));
    }
    if seeds.len() != cond.batch {
        return Err(Error::Shape {
            op: "sample seeds",
            lhs: vec![seeds.len()],
            rhs: vec![cond.batch],
        });
    }
    let (n, a) = predictor.block();
    let per = n * a;
    let per_hist = cond.action_hist.len() / cond.batch.max(1);
    let mut streams: Vec<ChaCha8Rng> = seeds.iter().map(|&s| rng::stream(s, &[])).collect();
    let mut x: Vec<f32> = streams.iter_mut().flat_map(|r| normals::<f32>(r, per)).collect();
    let mut session = predictor.session(cond)?;
    let history_noise = predictor.noises_history();
    let noisy_hist = |streams: &mut [ChaCha8Rng], k: usize| -> Vec<f32> {
        let mut out = Vec::with_capacity(cond.action_hist.len());
        for (b, r) in streams.iter_mut().enumerate() {
            let e = normals::<f32>(r, per_hist);
            let clean = &cond.action_hist[b * per_hist..(b + 1) * per_hist];
            out.extend(mix(clean, &e, schedule.alpha_bar(k)));
        }
        out
    };
    let visits: Vec<usize> = spec.subsequence.iter().rev().copied().collect();
    for (i, &k) in visits.iter().enumerate() {
        let started = std::time::Instant::now();
        let hist = history_noise.then(|| noisy_hist(&mut streams, k));
        let eps = session.predict(&x, k, hist.as_deref())?;
        check_finite(&eps, k)?;
        match spec.kind {
            SamplerKind::Ddpm => {
                let (c1, c2, sigma) = (schedule.coef_scale(k), schedule.coef_noise(k), schedule.sigma(k));
                for (xi, ei) in x.iter_mut().zip(&eps) {
                    *xi = (c1 * (f64::from(*xi) - c2 * f64::from(*ei))) as f32;
                }
                if sigma > 0.0 && !opts.suppress_noise {
                    for (b, r) in streams.iter_mut().enumerate() {
                        for xi in &mut x[b * per..(b + 1) * per] {
                            *xi += (sigma * r.sample::<f64, _>(StandardNormal)) as f32;
                        }
                    }
                }
            }
            SamplerKind::Ddim => {
                let prev = visits.get(i + 1).copied().unwrap_or(0);
                let (ab, ab_prev) = (schedule.alpha_bar(k), schedule.alpha_bar(prev));
                for (xi, ei) in x.iter_mut().zip(&eps) {
                    let e = f64::from(*ei);
                    let x0 = (f64::from(*xi) - (1.0 - ab).sqrt() * e) / ab.sqrt();
                    *xi = (ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * e) as f32;
                }
            }
        }
        check_finite(&x, k)?;
        if let Some(t) = timings.as_deref_mut() {
            t.push((k, started.elapsed().as_secs_f64()));
        }
    }
    Ok(x)
}

/// DDPM ancestral sampling over every step.
pub fn ddpm_sample(
    predictor: &dyn NoisePredictor,
    cond: Conditioning<'_, f32>,
    schedule: &DiffusionSchedule,
    seeds: &[u64],
) -> Result<Vec<f32>> {
    let spec = SamplerSpec::ddpm(schedule.steps());
    sample(predictor, cond, schedule, &spec, seeds, SampleOptions::default())
}

/// Deterministic DDIM sampling over `spec`'s subsequence.
pub fn ddim_sample(
    predictor: &dyn NoisePredictor,
    cond: Conditioning<'_, f32>,
    schedule: &DiffusionSchedule,
    spec: &SamplerSpec,
    seeds: &[u64],
) -> Result<Vec<f32>> {
    if spec.kind != SamplerKind::Ddim {
        return Err(Error::InvalidArgument("ddim_sample needs a ddim spec".into()));
    }
    sample(predictor, cond, schedule, spec, seeds, SampleOptions::default())
}

/// Predictor that always returns zero noise.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPredictor {
    pub horizon: usize,
    pub action_dim: usize,
}

impl DenoiseSession for ZeroPredictor {
    fn predict(&mut self, noisy: &[f32], _k: usize, _h: Option<&[f32]>) -> Result<Vec<f32>> {
        Ok(vec![0.0; noisy.len()])
    }
}

impl NoisePredictor for ZeroPredictor {
    fn block(&self) -> (usize, usize) {
        (self.horizon, self.action_dim)
    }

    fn session<'s>(&'s self, _cond: Conditioning<'s, f32>) -> Result<Box<dyn DenoiseSession + 's>> {
        Ok(Box::new(*self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond(batch: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        (vec![0.0; batch * 8 * 14], vec![0.0; batch * 8 * 4], vec![0.0; batch * 8 * 3])
    }

    #[test]
    fn single_step_schedule_takes_beta_min() {
        let s = make_schedule(1, 1e-4, 2e-2).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert_eq!(s.sigma(1), 0.0);
        assert!(make_schedule(0, 1e-4, 2e-2).is_err());
        assert!(make_schedule(10, 2e-2, 1e-4).is_err());
    }

    #[test]
    fn linear_schedule_matches_product_oracle() {
        let s = make_schedule(10, 1e-4, 2e-2).unwrap();
        assert!((s.beta(5) - (1e-4 + 4.0 / 9.0 * (2e-2 - 1e-4))).abs() < 1e-15);
        assert_eq!(s.beta(10), 2e-2);
        let mut prod = 1.0;
        for k in 1..=10 {
            prod *= 1.0 - (1e-4 + (k - 1) as f64 / 9.0 * (2e-2 - 1e-4));
        }
        assert!((s.alpha_bar(10) - prod).abs() < 1e-12);
        for k in 1..10 {
            assert!(s.alpha_bar(k + 1) < s.alpha_bar(k));
        }
    }

    #[test]
    fn ddim_strides() {
        assert_eq!(SamplerSpec::ddim(10, 5).unwrap().subsequence, vec![2, 4, 6, 8, 10]);
        assert_eq!(SamplerSpec::ddim(100, 10).unwrap().subsequence[0], 10);
        assert!(SamplerSpec::ddim(10, 11).is_err());
        let mut bad = SamplerSpec::ddpm(10);
        bad.infer_steps = 5;
        assert!(bad.validate().is_err());
        assert_eq!(SamplerSpec::ddim(100, 10).unwrap().label(), "ddim_100_10");
    }

    #[test]
    fn zero_predictor_closed_forms() {
        let s = make_schedule(10, 1e-4, 2e-2).unwrap();
        let z = ZeroPredictor {
            horizon: 4,
            action_dim: 4,
        };
        let (sh, ah, gh) = cond(2);
        let c = Conditioning {
            batch: 2,
            state_hist: &sh,
            action_hist: &ah,
            goal_hist: &gh,
        };
        let seeds = [5, 6];
        let ddpm = sample(
            &z,
            c,
            &s,
            &SamplerSpec::ddpm(10),
            &seeds,
            SampleOptions {
                suppress_noise: true,
            },
        )
        .unwrap();
        let ddim = ddim_sample(&z, c, &s, &SamplerSpec::ddim(10, 10).unwrap(), &seeds).unwrap();
        let mut a_k = Vec::new();
        for &sd in &seeds {
            let mut r = rng::stream(sd, &[]);
            a_k.extend(normals::<f32>(&mut r, 16));
        }
        let scale: f64 = (1..=10).map(|k| s.coef_scale(k)).product();
        for i in 0..32 {
            let expect = f64::from(a_k[i]) * scale;
            assert!((f64::from(ddpm[i]) - expect).abs() < 1e-6);
            let expect = f64::from(a_k[i]) / s.alpha_bar(10).sqrt();
            assert!((f64::from(ddim[i]) - expect).abs() < 1e-6);
            assert!((ddpm[i] - ddim[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn samplers_are_seed_deterministic() {
        let s = make_schedule(10, 1e-4, 2e-2).unwrap();
        let cfg = crate::denoiser::DenoiserConfig {
            token_dim: 16,
            heads: 2,
            layers: 1,
            ..Default::default()
        };
        let m = DenoiserModel::<f32>::init(cfg, 3).unwrap();
        let (sh, ah, gh) = cond(1);
        let c = Conditioning {
            batch: 1,
            state_hist: &sh,
            action_hist: &ah,
            goal_hist: &gh,
        };
        let a = ddpm_sample(&m, c, &s, &[9]).unwrap();
        assert_eq!(a, ddpm_sample(&m, c, &s, &[9]).unwrap());
        assert_ne!(a, ddpm_sample(&m, c, &s, &[10]).unwrap());
        let spec = SamplerSpec::ddim(10, 5).unwrap();
        assert_eq!(
            ddim_sample(&m, c, &s, &spec, &[9]).unwrap(),
            ddim_sample(&m, c, &s, &spec, &[9]).unwrap()
        );
    }

    #[test]
    fn perfect_and_zero_predictor_losses() {
        let s = make_schedule(10, 1e-4, 2e-2).unwrap();
        let batch = WindowBatch {
            batch: 3,
            state_hist: vec![0.0f32; 3 * 8 * 14],
            action_hist: vec![0.0; 3 * 8 * 4],
            goal_hist: vec![0.0; 3 * 8 * 3],
            future: (0..48).map(|i| (i as f32 * 0.1).sin()).collect(),
        };
        let nb = noise_batch(&batch, &s, 4, false);
        assert_eq!(mse(&nb.eps, &nb.eps), 0.0);
        let alt: Vec<f32> = (0..16).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(mse(&alt, &[0.0; 16]), 1.0);
    }
}
