//! Transformer noise predictor.
//!
//! Conditioning tokens ("memory") come from per-step MLP encoders: one token
//! per history step for the robot I/O (state with the previous action), one
//! per history step for the goal, and one for the diffusion step. Noisy
//! future actions are embedded as query tokens and pass through `layers`
//! decoder layers. Each layer's attention lets action token `i` see every
//! memory token and action tokens `0..=i`; a residual, layer norm,
//! feed-forward block and second layer norm follow. A linear head maps each
//! action token back to a noise estimate.
//!
//! In [`GoalMode::Concat`] the goal is appended to the I/O features and there
//! is no goal encoder or goal token block.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::{rng, Error, Result, ACTION_DIM, GOAL_DIM, STATE_DIM};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalMode {
    /// Separate goal encoder and goal token block.
    Separate,
    /// Goal concatenated with the robot I/O before a single encoder.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub history: usize,
    pub horizon: usize,
    pub token_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `token_dim`.
    pub ffn_mult: usize,
    /// Dropout on attention weights during training.
    pub dropout: f64,
    /// Number of diffusion steps K (size of the step embedding).
    pub diffusion_steps: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub goal_dim: usize,
    pub goal_mode: GoalMode,
    /// Also noise the history actions during training and sampling.
    pub noise_history_actions: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            history: 8,
            horizon: 4,
            token_dim: 128,
            layers: 6,
            heads: 8,
            ffn_mult: 4,
            dropout: 0.3,
            diffusion_steps: 10,
            state_dim: STATE_DIM,
            action_dim: ACTION_DIM,
            goal_dim: GOAL_DIM,
            goal_mode: GoalMode::Separate,
            noise_history_actions: false,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("history", self.history),
            ("horizon", self.horizon),
            ("token_dim", self.token_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("diffusion_steps", self.diffusion_steps),
            ("state_dim", self.state_dim),
            ("action_dim", self.action_dim),
            ("goal_dim", self.goal_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.token_dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "token_dim {} not divisible by heads {}",
                self.token_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn io_in(&self) -> usize {
        match self.goal_mode {
            GoalMode::Separate => self.state_dim + self.action_dim,
            GoalMode::Concat => self.state_dim + self.action_dim + self.goal_dim,
        }
    }

    /// Number of memory tokens, including the step token.
    pub fn memory_tokens(&self) -> usize {
        match self.goal_mode {
            GoalMode::Separate => 2 * self.history + 1,
            GoalMode::Concat => self.history + 1,
        }
    }

    /// Named parameter shapes in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.token_dim;
        let f = self.ffn_mult * d;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        let mlp = |push: &mut dyn FnMut(String, Vec<usize>), prefix: &str, input: usize| {
            push(format!("{prefix}.w1"), vec![input, d]);
            push(format!("{prefix}.b1"), vec![d]);
            push(format!("{prefix}.w2"), vec![d, d]);
            push(format!("{prefix}.b2"), vec![d]);
        };
        mlp(&mut push, "io_enc", self.io_in());
        if self.goal_mode == GoalMode::Separate {
            mlp(&mut push, "goal_enc", self.goal_dim);
        }
        mlp(&mut push, "act_emb", self.action_dim);
        push("step_emb.w".into(), vec![self.diffusion_steps, d]);
        push("step_emb.b".into(), vec![d]);
        push("pos.io".into(), vec![self.history, d]);
        if self.goal_mode == GoalMode::Separate {
            push("pos.goal".into(), vec![self.history, d]);
        }
        push("pos.act".into(), vec![self.horizon, d]);
        for l in 0..self.layers {
            for m in ["q", "k", "v", "o"] {
                push(format!("layers.{l}.attn.w{m}"), vec![d, d]);
                push(format!("layers.{l}.attn.b{m}"), vec![d]);
            }
            push(format!("layers.{l}.ln1.g"), vec![d]);
            push(format!("layers.{l}.ln1.b"), vec![d]);
            push(format!("layers.{l}.ffn.w1"), vec![d, f]);
            push(format!("layers.{l}.ffn.b1"), vec![f]);
            push(format!("layers.{l}.ffn.w2"), vec![f, d]);
            push(format!("layers.{l}.ffn.b2"), vec![d]);
            push(format!("layers.{l}.ln2.g"), vec![d]);
            push(format!("layers.{l}.ln2.b"), vec![d]);
        }
        push("head.w".into(), vec![d, self.action_dim]);
        push("head.b".into(), vec![self.action_dim]);
        out
    }
}

pub fn param_count(cfg: &DenoiserConfig) -> usize {
    cfg.param_shapes()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Learnable parameters plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel<T: Scalar = f32> {
    pub config: DenoiserConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

/// One batch of model inputs, row-major: `state_hist [B,h,S]`,
/// `action_hist [B,h,A]`, `goal_hist [B,h,G]`, `noisy_future [B,n,A]`,
/// and one diffusion step `1..=K` per batch element.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'b, T> {
    pub batch: usize,
    pub state_hist: &'b [T],
    pub action_hist: &'b [T],
    pub goal_hist: &'b [T],
    pub noisy_future: &'b [T],
    pub steps: &'b [usize],
}

/// Conditioning without noisy actions; encodings are reused across the
/// denoising iterations of one sampling call.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'b, T> {
    pub batch: usize,
    pub state_hist: &'b [T],
    pub action_hist: &'b [T],
    pub goal_hist: &'b [T],
}

struct Ctx<'g, 'a, T: Scalar> {
    g: &'g mut Graph<'a, T>,
    vars: &'g [Var],
    model: &'a DenoiserModel<T>,
}

impl<'g, 'a, T: Scalar> Ctx<'g, 'a, T> {
    fn p(&self, name: &str) -> Var {
        self.vars[self.model.index[name]]
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let (w, b) = (self.p(w), self.p(b));
        let y = self.g.matmul(x, w)?;
        self.g.add(y, b)
    }

    fn mlp(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = self.g.gelu(h);
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }
}

impl<T: Scalar> DenoiserModel<T> {
    /// Random initialization: linear weights ~ N(0, 1/fan_in), positional
    /// tables ~ N(0, 0.02^2), output head ~ N(0, 0.01^2), biases zero,
    /// layer-norm gains one.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, &[]);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".g") {
                vec![T::one(); n]
            } else if shape.len() == 1 {
                vec![T::zero(); n]
            } else {
                let std = if name.starts_with("pos.") {
                    0.02
                } else if name.starts_with("head.") {
                    0.01
                } else {
                    1.0 / (shape[0] as f64).sqrt()
                };
                (0..n)
                    .map(|_| T::from_f64(std * r.sample::<f64, _>(StandardNormal)))
                    .collect()
            };
            names.push(name);
            params.push(Tensor { shape, data });
        }
        Self::from_params(config, names, params)
    }

    pub fn from_params(
        config: DenoiserConfig,
        names: Vec<String>,
        params: Vec<Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != names.len() || names.len() != params.len() {
            return Err(Error::Validation(format!(
                "expected {} parameters, got {}",
                expected.len(),
                names.len()
            )));
        }
        for ((en, es), (n, p)) in expected.iter().zip(names.iter().zip(&params)) {
            if en != n || *es != p.shape || p.data.len() != es.iter().product::<usize>() {
                return Err(Error::Validation(format!(
                    "parameter {n} {:?} does not match expected {en} {es:?}",
                    p.shape
                )));
            }
        }
        let index = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        Ok(Self {
            config,
            names,
            params,
            index,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn cast<U: Scalar>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every parameter on `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>, track_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf_ref(p, track_grad)).collect()
    }

    fn check_conditioning(&self, batch: usize, s: usize, a: usize, gl: usize) -> Result<()> {
        let c = &self.config;
        let want = [
            batch * c.history * c.state_dim,
            batch * c.history * c.action_dim,
            batch * c.history * c.goal_dim,
        ];
        if [s, a, gl] != want {
            return Err(Error::Shape {
                op: "denoiser conditioning",
                lhs: vec![s, a, gl],
                rhs: want.to_vec(),
            });
        }
        Ok(())
    }

    /// Memory tokens without the step token: `[B, Tm - 1, D]`.
    pub fn encode_condition<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        vars: &[Var],
        cond: &Conditioning<'_, T>,
    ) -> Result<Var> {
        let c = &self.config;
        let b = cond.batch;
        self.check_conditioning(
            b,
            cond.state_hist.len(),
            cond.action_hist.len(),
            cond.goal_hist.len(),
        )?;
        let h = c.history;
        let s = g.input(Tensor::new(&[b, h, c.state_dim], cond.state_hist.to_vec())?);
        let a = g.input(Tensor::new(&[b, h, c.action_dim], cond.action_hist.to_vec())?);
        let go = g.input(Tensor::new(&[b, h, c.goal_dim], cond.goal_hist.to_vec())?);
        let mut ctx = Ctx {
            g,
            vars,
            model: self,
        };
        match c.goal_mode {
            GoalMode::Separate => {
                let io_in = ctx.g.concat(&[s, a], 2)?;
                let io = ctx.mlp(io_in, "io_enc")?;
                let io = ctx.g.add(io, ctx.p("pos.io"))?;
                let gt = ctx.mlp(go, "goal_enc")?;
                let gt = ctx.g.add(gt, ctx.p("pos.goal"))?;
                ctx.g.concat(&[io, gt], 1)
            }
            GoalMode::Concat => {
                let io_in = ctx.g.concat(&[s, a, go], 2)?;
                let io = ctx.mlp(io_in, "io_enc")?;
                ctx.g.add(io, ctx.p("pos.io"))
            }
        }
    }

    /// Decoder pass given encoded conditioning `cond [B, Tm-1, D]`.
    pub fn decode<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        vars: &[Var],
        cond: Var,
        noisy_future: &[T],
        steps: &[usize],
        train: bool,
        dropout_seed: u64,
    ) -> Result<Var> {
        let c = &self.config;
        let b = steps.len();
        let (n, d, heads) = (c.horizon, c.token_dim, c.heads);
        let dh = d / heads;
        if noisy_future.len() != b * n * c.action_dim {
            return Err(Error::Shape {
                op: "denoiser noisy_future",
                lhs: vec![noisy_future.len()],
                rhs: vec![b, n, c.action_dim],
            });
        }
        if let Some(&k) = steps.iter().find(|&&k| k == 0 || k > c.diffusion_steps) {
            return Err(Error::InvalidArgument(format!(
                "diffusion step {k} outside 1..={}",
                c.diffusion_steps
            )));
        }
        let tm = c.memory_tokens();
        let noisy = g.input(Tensor::new(&[b, n, c.action_dim], noisy_future.to_vec())?);
        let ids: Vec<usize> = steps.iter().map(|k| k - 1).collect();
        let mask = attention_mask::<T>(tm, n);
        let mask = g.input(mask);
        let mut ctx = Ctx {
            g,
            vars,
            model: self,
        };

        let step = ctx.g.embedding(ctx.p("step_emb.w"), &ids)?;
        let step = ctx.g.add(step, ctx.p("step_emb.b"))?;
        let step = ctx.g.reshape(step, &[b, 1, d])?;
        let memory = ctx.g.concat(&[cond, step], 1)?;

        let x = ctx.mlp(noisy, "act_emb")?;
        let mut x = ctx.g.add(x, ctx.p("pos.act"))?;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let split = |g: &mut Graph<'a, T>, v: Var, len: usize| -> Result<Var> {
            let v = g.reshape(v, &[b, len, heads, dh])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            g.reshape(v, &[b * heads, len, dh])
        };
        for l in 0..c.layers {
            let pre = format!("layers.{l}");
            let kv_in = ctx.g.concat(&[memory, x], 1)?;
            let q = ctx.linear(x, &format!("{pre}.attn.wq"), &format!("{pre}.attn.bq"))?;
            let k = ctx.linear(kv_in, &format!("{pre}.attn.wk"), &format!("{pre}.attn.bk"))?;
            let v = ctx.linear(kv_in, &format!("{pre}.attn.wv"), &format!("{pre}.attn.bv"))?;
            let q = split(ctx.g, q, n)?;
            let k = split(ctx.g, k, tm + n)?;
            let v = split(ctx.g, v, tm + n)?;
            let scores = ctx.g.bmm(q, k, true)?;
            let scores = ctx.g.scale(scores, scale);
            let scores = ctx.g.add(scores, mask)?;
            let attn = ctx.g.softmax(scores);
            let attn = ctx.g.dropout(
                attn,
                c.dropout,
                train,
                rng::derive_seed(dropout_seed, &[l as u64]),
            );
            let ctxv = ctx.g.bmm(attn, v, false)?;
            let ctxv = ctx.g.reshape(ctxv, &[b, heads, n, dh])?;
            let ctxv = ctx.g.permute(ctxv, &[0, 2, 1, 3])?;
            let ctxv = ctx.g.reshape(ctxv, &[b, n, d])?;
            let attn_out = ctx.linear(ctxv, &format!("{pre}.attn.wo"), &format!("{pre}.attn.bo"))?;
            let r = ctx.g.add(x, attn_out)?;
            let (g1, b1) = (ctx.p(&format!("{pre}.ln1.g")), ctx.p(&format!("{pre}.ln1.b")));
            let x1 = ctx.g.layer_norm(r, g1, b1, T::from_f64(LN_EPS))?;
            let f = ctx.linear(x1, &format!("{pre}.ffn.w1"), &format!("{pre}.ffn.b1"))?;
            let f = ctx.g.gelu(f);
            let f = ctx.linear(f, &format!("{pre}.ffn.w2"), &format!("{pre}.ffn.b2"))?;
            let r = ctx.g.add(x1, f)?;
            let (g2, b2) = (ctx.p(&format!("{pre}.ln2.g")), ctx.p(&format!("{pre}.ln2.b")));
            x = ctx.g.layer_norm(r, g2, b2, T::from_f64(LN_EPS))?;
        }
        ctx.linear(x, "head.w", "head.b")
    }

    /// Full forward pass; returns the `[B, n, A]` prediction.
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        vars: &[Var],
        input: &DenoiserInput<'_, T>,
        train: bool,
        dropout_seed: u64,
    ) -> Result<Var> {
        if input.steps.len() != input.batch {
            return Err(Error::Shape {
                op: "denoiser steps",
                lhs: vec![input.steps.len()],
                rhs: vec![input.batch],
            });
        }
        let cond = Conditioning {
            batch: input.batch,
            state_hist: input.state_hist,
            action_hist: input.action_hist,
            goal_hist: input.goal_hist,
        };
        let memory = self.encode_condition(g, vars, &cond)?;
        self.decode(g, vars, memory, input.noisy_future, input.steps, train, dropout_seed)
    }

    /// Convenience inference call returning the prediction values.
    pub fn predict_noise(
        &self,
        input: &DenoiserInput<'_, T>,
        train: bool,
        dropout_seed: u64,
    ) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.forward(&mut g, &vars, input, train, dropout_seed)?;
        Ok(g.value(out).to_vec())
    }
}

/// Additive mask `[n, tm + n]`: zeros on memory columns and on action
/// columns `j <= i`, a large negative value elsewhere.
pub fn attention_mask<T: Scalar>(memory_tokens: usize, n: usize) -> Tensor<T> {
    let cols = memory_tokens + n;
    let mut m = vec![T::zero(); n * cols];
    for i in 0..n {
        for j in (i + 1)..n {
            m[i * cols + memory_tokens + j] = T::from_f64(MASKED);
        }
    }
    Tensor {
        shape: vec![n, cols],
        data: m,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            token_dim: 16,
            heads: 4,
            layers: 2,
            ffn_mult: 2,
            ..Default::default()
        }
    }

    fn inputs(cfg: &DenoiserConfig, batch: usize, seed: u64) -> (Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>) {
        let mut r = rng::stream(seed, &[]);
        let mut v = |n: usize| -> Vec<f32> { (0..n).map(|_| r.sample(StandardNormal)).collect() };
        (
            v(batch * cfg.history * cfg.state_dim),
            v(batch * cfg.history * cfg.action_dim),
            v(batch * cfg.history * cfg.goal_dim),
            v(batch * cfg.horizon * cfg.action_dim),
        )
    }

    #[test]
    fn degenerate_config_matches_hand_count() {
        let cfg = DenoiserConfig {
            token_dim: 1,
            heads: 1,
            layers: 1,
            ..Default::default()
        };
        // io 18+1+1+1, goal 3+1+1+1, act 4+1+1+1, step 10+1, pos 8+8+4,
        // layer 8 + 2 + (4+4+4+1) + 2, head 4+4
        assert_eq!(param_count(&cfg), 21 + 6 + 7 + 11 + 20 + 25 + 8);
    }

    #[test]
    fn doubling_width_more_than_doubles_count() {
        let a = DenoiserConfig::default();
        let b = DenoiserConfig {
            token_dim: 256,
            ..a.clone()
        };
        assert!(param_count(&b) > 2 * param_count(&a));
        let m: DenoiserModel = DenoiserModel::init(a.clone(), 0).unwrap();
        assert_eq!(m.param_count(), param_count(&a));
    }

    #[test]
    fn bias_only_network_outputs_bias() {
        let cfg = tiny();
        let mut m: DenoiserModel = DenoiserModel::init(cfg.clone(), 1).unwrap();
        for p in &mut m.params {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        // Layer-norm gains of zero keep the output bias-only.
        let beta = [0.5f32, -1.0, 2.0, 0.25];
        m.param_mut("head.b").unwrap().data.copy_from_slice(&beta);
        let (s, a, g, x) = inputs(&cfg, 2, 3);
        let steps = [1, 7];
        let input = DenoiserInput {
            batch: 2,
            state_hist: &s,
            action_hist: &a,
            goal_hist: &g,
            noisy_future: &x,
            steps: &steps,
        };
        let out = m.predict_noise(&input, false, 0).unwrap();
        for row in out.chunks_exact(4) {
            assert_eq!(row, beta);
        }
    }

    #[test]
    fn action_tokens_are_causal() {
        let cfg = tiny();
        let m: DenoiserModel = DenoiserModel::init(cfg.clone(), 2).unwrap();
        let (s, a, g, x) = inputs(&cfg, 1, 4);
        let steps = [3];
        let run = |noisy: &[f32]| {
            m.predict_noise(
                &DenoiserInput {
                    batch: 1,
                    state_hist: &s,
                    action_hist: &a,
                    goal_hist: &g,
                    noisy_future: noisy,
                    steps: &steps,
                },
                false,
                0,
            )
            .unwrap()
        };
        let base = run(&x);
        for i in 0..cfg.horizon {
            let mut z = x.clone();
            for j in (i + 1)..cfg.horizon {
                z[j * 4..(j + 1) * 4].iter_mut().for_each(|v| *v = 0.0);
            }
            let out = run(&z);
            for r in 0..=i {
                assert_eq!(out[r * 4..(r + 1) * 4], base[r * 4..(r + 1) * 4], "token {r}");
            }
        }
        // Changing an earlier token does reach later ones.
        let mut z = x.clone();
        z[0] += 1.0;
        assert_ne!(run(&z)[12..16], base[12..16]);
    }

    #[test]
    fn goal_history_order_matters_and_eval_is_stable() {
        let cfg = tiny();
        let m: DenoiserModel = DenoiserModel::init(cfg.clone(), 5).unwrap();
        let (s, a, g, x) = inputs(&cfg, 1, 6);
        let steps = [2];
        let mk = |goal: &[f32]| {
            m.predict_noise(
                &DenoiserInput {
                    batch: 1,
                    state_hist: &s,
                    action_hist: &a,
                    goal_hist: goal,
                    noisy_future: &x,
                    steps: &steps,
                },
                false,
                0,
            )
            .unwrap()
        };
        let base = mk(&g);
        assert_eq!(base, mk(&g));
        let mut swapped = g.clone();
        let (first, rest) = swapped.split_at_mut(3);
        first.swap_with_slice(&mut rest[..3]);
        assert_ne!(base, mk(&swapped));
    }

    #[test]
    fn batched_rows_match_single_rows() {
        let cfg = tiny();
        let m: DenoiserModel = DenoiserModel::init(cfg.clone(), 8).unwrap();
        let (s, a, g, x) = inputs(&cfg, 3, 9);
        let steps = [1, 5, 10];
        let all = m
            .predict_noise(
                &DenoiserInput {
                    batch: 3,
                    state_hist: &s,
                    action_hist: &a,
                    goal_hist: &g,
                    noisy_future: &x,
                    steps: &steps,
                },
                false,
                0,
            )
            .unwrap();
        let (hs, ha, hg, hx) = (8 * 14, 8 * 4, 8 * 3, 4 * 4);
        for b in 0..3 {
            let one = m
                .predict_noise(
                    &DenoiserInput {
                        batch: 1,
                        state_hist: &s[b * hs..(b + 1) * hs],
                        action_hist: &a[b * ha..(b + 1) * ha],
                        goal_hist: &g[b * hg..(b + 1) * hg],
                        noisy_future: &x[b * hx..(b + 1) * hx],
                        steps: &steps[b..b + 1],
                    },
                    false,
                    0,
                )
                .unwrap();
            assert_eq!(one, all[b * hx..(b + 1) * hx]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = tiny();
        let m: DenoiserModel = DenoiserModel::init(cfg.clone(), 8).unwrap();
        let (s, a, g, x) = inputs(&cfg, 1, 9);
        let run = |steps: &[usize], noisy: &[f32]| {
            m.predict_noise(
                &DenoiserInput {
                    batch: 1,
                    state_hist: &s,
                    action_hist: &a,
                    goal_hist: &g,
                    noisy_future: noisy,
                    steps,
                },
                false,
                0,
            )
        };
        assert!(run(&[0], &x).is_err());
        assert!(run(&[11], &x).is_err());
        assert!(run(&[1], &x[..8]).is_err());
        let bad = DenoiserConfig {
            heads: 3,
            ..tiny()
        };
        assert!(DenoiserModel::<f32>::init(bad, 0).is_err());
    }

    #[test]
    fn concat_mode_has_single_encoder() {
        let sep = tiny();
        let cat = DenoiserConfig {
            goal_mode: GoalMode::Concat,
            ..tiny()
        };
        let names: Vec<String> = cat.param_shapes().into_iter().map(|(n, _)| n).collect();
        assert!(!names.iter().any(|n| n.starts_with("goal_enc") || n == "pos.goal"));
        assert!(sep.param_shapes().iter().any(|(n, _)| n.starts_with("goal_enc")));
        let m: DenoiserModel = DenoiserModel::init(cat.clone(), 1).unwrap();
        let (s, a, g, x) = inputs(&cat, 1, 2);
        let out = m
            .predict_noise(
                &DenoiserInput {
                    batch: 1,
                    state_hist: &s,
                    action_hist: &a,
                    goal_hist: &g,
                    noisy_future: &x,
                    steps: &[4],
                },
                false,
                0,
            )
            .unwrap();
        assert_eq!(out.len(), 16);
    }
}
