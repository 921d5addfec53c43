//! Comparison methods trained on the same datasets and step budgets:
//! a causal next-token transformer (gpt), a goal-conditioned causal
//! behaviour-cloning transformer (goal_gpt) and a goal-conditioned MLP
//! (goal_mlp).

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{Dataset, Window};
use crate::downstream::rl::CausalBackbone;
use crate::downstream::{to_f32, to_f64, ActionSource, ExecMode, GoalQuery, Rollout, PLAN_CHUNK};
use crate::downstream::prompt::{continuation_start, expert_return_from, PromptOutcome};
use crate::env::{Env, EnvId, TaskId};
use crate::error::{invalid, Error, Result};
use crate::model::{positional_table, CausalSeq};
use crate::nn::transformer::StackCache;
use crate::nn::{clip_global_norm, Adam, AttnMode, Linear, Mlp, ParamTree, ParamsExt, Real, Segment, Stack, Tensor};
use crate::pretrain::{csv_err, TrainConfig};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Gpt,
    GoalGpt,
    GoalMlp,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::Gpt, BaselineKind::GoalGpt, BaselineKind::GoalMlp];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Gpt => "gpt",
            BaselineKind::GoalGpt => "goal_gpt",
            BaselineKind::GoalMlp => "goal_mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown baseline {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Timesteps per training window (and positional range).
    pub context_len: usize,
    pub mlp_hidden: usize,
    /// Affine layers of the goal MLP.
    pub mlp_layers: usize,
}

impl BaselineConfig {
    /// Five causal layers, four heads, width 256; MLP of five affine layers
    /// of width 1024.
    pub fn paper(kind: BaselineKind, state_dim: usize, action_dim: usize) -> Self {
        Self {
            kind,
            state_dim,
            action_dim,
            hidden_dim: 256,
            n_heads: 4,
            n_layers: 5,
            context_len: 64,
            mlp_hidden: 1024,
            mlp_layers: 5,
        }
    }

    /// Shrunk alongside the desk masked model: three causal layers of width
    /// 64; MLP of three affine layers of width 256.
    pub fn desk(kind: BaselineKind, state_dim: usize, action_dim: usize) -> Self {
        Self {
            kind,
            state_dim,
            action_dim,
            hidden_dim: 64,
            n_heads: 2,
            n_layers: 3,
            context_len: 32,
            mlp_hidden: 256,
            mlp_layers: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 || self.context_len == 0 {
            return Err(invalid("baseline dimensions and context must be positive"));
        }
        match self.kind {
            BaselineKind::GoalMlp => {
                if self.mlp_layers < 2 || self.mlp_hidden == 0 {
                    return Err(invalid("goal MLP needs at least two affine layers"));
                }
            }
            _ => {
                if self.hidden_dim == 0 || self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 || self.n_layers == 0 {
                    return Err(invalid("hidden width must be a positive multiple of the head count"));
                }
            }
        }
        Ok(())
    }
}

fn pos_table<T: Real>(cache: &mut HashMap<usize, Vec<T>>, len: usize, train_len: usize, h: usize) -> &[T] {
    cache
        .entry(len)
        .or_insert_with(|| positional_table(len, train_len, h).into_iter().map(T::of).collect())
}

fn gather<T: Copy>(src: &[T], rows: &[usize], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&src[r * width..(r + 1) * width]);
    }
    out
}

fn cast<T: Real>(xs: &[f32]) -> Vec<T> {
    xs.iter().map(|&v| T::of(v as f64)).collect()
}

// ---------------------------------------------------------------- gpt

/// Next-token transformer over interleaved states and actions.
#[derive(Debug, Clone, PartialEq)]
pub struct GptParams<T> {
    pub cfg: BaselineConfig,
    pub state_embed: Linear<T>,
    pub action_embed: Linear<T>,
    pub stack: Stack<T>,
    /// Reads action tokens, predicts the next state.
    pub state_head: Mlp<T>,
    /// Reads state tokens, predicts the action taken there.
    pub action_head: Mlp<T>,
}

impl<T: Real> ParamTree<T> for GptParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        use crate::nn::params::join;
        self.state_embed.visit(&join(prefix, "state_embed"), out);
        self.action_embed.visit(&join(prefix, "action_embed"), out);
        self.stack.visit(&join(prefix, "stack"), out);
        self.state_head.visit(&join(prefix, "state_head"), out);
        self.action_head.visit(&join(prefix, "action_head"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.state_embed.visit_mut(out);
        self.action_embed.visit_mut(out);
        self.stack.visit_mut(out);
        self.state_head.visit_mut(out);
        self.action_head.visit_mut(out);
    }
}

pub struct GptCache<T> {
    states: Vec<T>,
    actions: Vec<T>,
    state_rows: Vec<usize>,
    action_rows: Vec<usize>,
    segs: Vec<Segment>,
    stack: StackCache<T>,
}

impl<T: Real> GptParams<T> {
    pub fn init(cfg: &BaselineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(&[seed, 0x6770_74]);
        let h = cfg.hidden_dim;
        Ok(Self {
            cfg: cfg.clone(),
            state_embed: Linear::new(cfg.state_dim, h, &mut rng),
            action_embed: Linear::new(cfg.action_dim, h, &mut rng),
            stack: Stack::new(h, cfg.n_heads, cfg.n_layers, &mut rng),
            state_head: Mlp::new(&[h, h, cfg.state_dim], &mut rng),
            action_head: Mlp::new(&[h, h, cfg.action_dim], &mut rng),
        })
    }

    /// Causal features for interleaved sequences; state `t` at row `2t`,
    /// action `t` at row `2t + 1` of each sequence.
    pub fn features(&self, seqs: &[CausalSeq<'_>]) -> Result<(Vec<T>, GptCache<T>)> {
        let (h, ds, da) = (self.cfg.hidden_dim, self.cfg.state_dim, self.cfg.action_dim);
        let mut tables = HashMap::new();
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut state_rows = Vec::new();
        let mut action_rows = Vec::new();
        let mut lens = Vec::with_capacity(seqs.len());
        let mut times = Vec::new();
        let mut base = 0;
        for s in seqs {
            let n_actions = s.actions.len() / da;
            if s.len == 0 || s.states.len() != s.len * ds || s.actions.len() % da != 0 || !(n_actions == s.len || n_actions + 1 == s.len) {
                return Err(Error::DimensionMismatch {
                    what: "causal sequence",
                    expected: s.len * ds,
                    got: s.states.len(),
                });
            }
            states.extend(cast::<T>(s.states));
            actions.extend(cast::<T>(s.actions));
            for t in 0..s.len {
                state_rows.push(base + 2 * t);
                times.push((s.len, t));
                if t < n_actions {
                    action_rows.push(base + 2 * t + 1);
                    times.push((s.len, t));
                }
            }
            base += s.len + n_actions;
            lens.push(s.len + n_actions);
        }
        let es = self.state_embed.forward(&states, state_rows.len());
        let ea = self.action_embed.forward(&actions, action_rows.len());
        let mut x = vec![T::zero(); base * h];
        for (k, &r) in state_rows.iter().enumerate() {
            x[r * h..(r + 1) * h].copy_from_slice(&es[k * h..(k + 1) * h]);
        }
        for (k, &r) in action_rows.iter().enumerate() {
            x[r * h..(r + 1) * h].copy_from_slice(&ea[k * h..(k + 1) * h]);
        }
        for (r, &(len, t)) in times.iter().enumerate() {
            let pe = &pos_table::<T>(&mut tables, len, self.cfg.context_len, h)[t * h..(t + 1) * h];
            for (o, &p) in x[r * h..(r + 1) * h].iter_mut().zip(pe) {
                *o += p;
            }
        }
        let segs = Segment::pack(lens);
        let (y, stack) = self.stack.forward(&x, &segs, AttnMode::Causal);
        Ok((
            y,
            GptCache {
                states,
                actions,
                state_rows,
                action_rows,
                segs,
                stack,
            },
        ))
    }

    pub fn features_backward(&self, cache: &GptCache<T>, d: &[T], grad: &mut Self, want_action_grad: bool) -> Option<Vec<T>> {
        let h = self.cfg.hidden_dim;
        let dx = self.stack.backward(&cache.stack, &cache.segs, d, &mut grad.stack);
        let ds_ = gather(&dx, &cache.state_rows, h);
        let da_ = gather(&dx, &cache.action_rows, h);
        self.state_embed
            .backward_params(&cache.states, cache.state_rows.len(), &ds_, &mut grad.state_embed);
        if want_action_grad {
            Some(self.action_embed.backward(&cache.actions, cache.action_rows.len(), &da_, &mut grad.action_embed))
        } else {
            self.action_embed
                .backward_params(&cache.actions, cache.action_rows.len(), &da_, &mut grad.action_embed);
            None
        }
    }

    /// Pooled next-token MSE per window (actions from state tokens, next
    /// states from action tokens), averaged over the batch, and its gradient.
    pub fn gradients(&self, windows: &[&Window]) -> Result<(f64, Self)> {
        let (loss, grad) = self.loss_impl(windows, true)?;
        Ok((loss, grad.expect("gradient requested")))
    }

    pub fn batch_loss(&self, windows: &[&Window]) -> Result<f64> {
        Ok(self.loss_impl(windows, false)?.0)
    }

    fn loss_impl(&self, windows: &[&Window], want_grad: bool) -> Result<(f64, Option<Self>)> {
        if windows.is_empty() {
            return Err(invalid("gradient batch must not be empty"));
        }
        let (h, ds, da) = (self.cfg.hidden_dim, self.cfg.state_dim, self.cfg.action_dim);
        let seqs: Vec<CausalSeq> = windows
            .iter()
            .map(|w| CausalSeq {
                states: &w.states,
                actions: &w.actions,
                len: w.len,
            })
            .collect();
        let (feats, cache) = self.features(&seqs)?;
        let (pa, ca) = self.action_head.forward(&gather(&feats, &cache.state_rows, h), cache.state_rows.len());
        let (ps, cs) = self.state_head.forward(&gather(&feats, &cache.action_rows, h), cache.action_rows.len());
        let inv_b = 1.0 / windows.len() as f64;
        let mut d_pa = vec![T::zero(); pa.len()];
        let mut d_ps = vec![T::zero(); ps.len()];
        let mut total = 0.0;
        let mut off = 0;
        for w in windows {
            let l = w.len;
            let count = (l * da + (l - 1) * ds) as f64;
            let coef = 2.0 * inv_b / count;
            let mut sum = 0.0;
            for t in 0..l {
                for k in 0..da {
                    let i = (off + t) * da + k;
                    let e = pa[i].f64() - w.actions[t * da + k] as f64;
                    sum += e * e;
                    d_pa[i] = T::of(coef * e);
                }
                if t + 1 < l {
                    for k in 0..ds {
                        let i = (off + t) * ds + k;
                        let e = ps[i].f64() - w.states[(t + 1) * ds + k] as f64;
                        sum += e * e;
                        d_ps[i] = T::of(coef * e);
                    }
                }
            }
            total += sum / count * inv_b;
            off += l;
        }
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step: 0 });
        }
        if !want_grad {
            return Ok((total, None));
        }
        let mut grad = self.zeros_like();
        let dxa = self.action_head.backward(&ca, &d_pa, &mut grad.action_head);
        let dxs = self.state_head.backward(&cs, &d_ps, &mut grad.state_head);
        let mut d = vec![T::zero(); feats.len()];
        for (k, &r) in cache.state_rows.iter().enumerate() {
            d[r * h..(r + 1) * h].copy_from_slice(&dxa[k * h..(k + 1) * h]);
        }
        for (k, &r) in cache.action_rows.iter().enumerate() {
            d[r * h..(r + 1) * h].copy_from_slice(&dxs[k * h..(k + 1) * h]);
        }
        self.features_backward(&cache, &d, &mut grad, false);
        Ok((total, Some(grad)))
    }

    /// Predicted action at the last state of each sequence.
    pub fn next_actions(&self, seqs: &[CausalSeq<'_>]) -> Result<Vec<T>> {
        let h = self.cfg.hidden_dim;
        let (feats, cache) = self.features(seqs)?;
        let last = last_state_rows(seqs, self.cfg.action_dim);
        debug_assert!(last.iter().all(|r| cache.state_rows.contains(r)));
        Ok(self.action_head.infer(&gather(&feats, &last, h), last.len()))
    }

    /// Predicted next state after the last action of each sequence (which
    /// must end in an action token).
    pub fn next_states(&self, seqs: &[CausalSeq<'_>]) -> Result<Vec<T>> {
        let (h, da) = (self.cfg.hidden_dim, self.cfg.action_dim);
        let (feats, _) = self.features(seqs)?;
        let mut rows = Vec::with_capacity(seqs.len());
        let mut base = 0;
        for s in seqs {
            let n_actions = s.actions.len() / da;
            if n_actions != s.len {
                return Err(invalid("next-state prediction needs a final action"));
            }
            rows.push(base + 2 * s.len - 1);
            base += s.len + n_actions;
        }
        Ok(self.state_head.infer(&gather(&feats, &rows, h), rows.len()))
    }
}

fn last_state_rows(seqs: &[CausalSeq<'_>], da: usize) -> Vec<usize> {
    let mut rows = Vec::with_capacity(seqs.len());
    let mut base = 0;
    for s in seqs {
        let n_actions = s.actions.len() / da;
        rows.push(base + 2 * (s.len - 1));
        base += s.len + n_actions;
    }
    rows
}

impl CausalBackbone for GptParams<f32> {
    type Cache = GptCache<f32>;

    fn state_dim(&self) -> usize {
        self.cfg.state_dim
    }

    fn action_dim(&self) -> usize {
        self.cfg.action_dim
    }

    fn hidden_dim(&self) -> usize {
        self.cfg.hidden_dim
    }

    fn causal_features(&self, seqs: &[CausalSeq<'_>]) -> Result<(Vec<f32>, Self::Cache)> {
        self.features(seqs)
    }

    fn causal_features_backward(&self, cache: &Self::Cache, d: &[f32], grad: &mut Self, want: bool) -> Option<Vec<f32>> {
        self.features_backward(cache, d, grad, want)
    }
}

// ---------------------------------------------------------------- goal_gpt

/// Causal transformer over `state ⊕ goal` tokens predicting each action.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalGptParams<T> {
    pub cfg: BaselineConfig,
    pub token_embed: Linear<T>,
    pub stack: Stack<T>,
    pub action_head: Mlp<T>,
}

impl<T: Real> ParamTree<T> for GoalGptParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        use crate::nn::params::join;
        self.token_embed.visit(&join(prefix, "token_embed"), out);
        self.stack.visit(&join(prefix, "stack"), out);
        self.action_head.visit(&join(prefix, "action_head"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.token_embed.visit_mut(out);
        self.stack.visit_mut(out);
        self.action_head.visit_mut(out);
    }
}

/// One goal-conditioned sequence: `len` states sharing one goal.
#[derive(Debug, Clone, Copy)]
pub struct GoalSeq<'a> {
    pub states: &'a [f32],
    pub goal: &'a [f32],
    pub len: usize,
}

impl<T: Real> GoalGptParams<T> {
    pub fn init(cfg: &BaselineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(&[seed, 0x6767_7074]);
        let h = cfg.hidden_dim;
        Ok(Self {
            cfg: cfg.clone(),
            token_embed: Linear::new(2 * cfg.state_dim, h, &mut rng),
            stack: Stack::new(h, cfg.n_heads, cfg.n_layers, &mut rng),
            action_head: Mlp::new(&[h, h, cfg.action_dim], &mut rng),
        })
    }

    /// Tokens `s_i ⊕ g` for every sequence, stacked.
    pub fn tokens(&self, seqs: &[GoalSeq<'_>]) -> Result<Vec<T>> {
        let ds = self.cfg.state_dim;
        let mut x = Vec::new();
        for s in seqs {
            if s.len == 0 || s.states.len() != s.len * ds || s.goal.len() != ds {
                return Err(Error::DimensionMismatch {
                    what: "goal sequence",
                    expected: s.len * ds,
                    got: s.states.len(),
                });
            }
            for t in 0..s.len {
                x.extend(cast::<T>(&s.states[t * ds..(t + 1) * ds]));
                x.extend(cast::<T>(s.goal));
            }
        }
        Ok(x)
    }

    /// Predicted action at every token.
    pub fn forward(&self, seqs: &[GoalSeq<'_>]) -> Result<Vec<T>> {
        Ok(self.forward_cached(seqs)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn forward_cached(&self, seqs: &[GoalSeq<'_>]) -> Result<(Vec<T>, (Vec<T>, Vec<T>, Vec<Segment>, StackCache<T>, crate::nn::layers::MlpCache<T>))> {
        let h = self.cfg.hidden_dim;
        let tokens = self.tokens(seqs)?;
        let n: usize = seqs.iter().map(|s| s.len).sum();
        let mut x = self.token_embed.forward(&tokens, n);
        let mut tables = HashMap::new();
        let mut r = 0;
        for s in seqs {
            let table = pos_table::<T>(&mut tables, s.len, self.cfg.context_len, h);
            for (o, &p) in x[r * h..(r + s.len) * h].iter_mut().zip(table) {
                *o += p;
            }
            r += s.len;
        }
        let segs = Segment::pack(seqs.iter().map(|s| s.len));
        let (y, sc) = self.stack.forward(&x, &segs, AttnMode::Causal);
        let (pa, hc) = self.action_head.forward(&y, n);
        Ok((pa, (tokens, y, segs, sc, hc)))
    }

    /// Action MSE pooled per window, averaged over the batch.
    pub fn gradients(&self, batch: &[(GoalSeq<'_>, &[f32])]) -> Result<(f64, Self)> {
        if batch.is_empty() {
            return Err(invalid("gradient batch must not be empty"));
        }
        let da = self.cfg.action_dim;
        let seqs: Vec<GoalSeq> = batch.iter().map(|b| b.0).collect();
        let (pa, (tokens, _, segs, sc, hc)) = self.forward_cached(&seqs)?;
        let inv_b = 1.0 / batch.len() as f64;
        let mut d = vec![T::zero(); pa.len()];
        let mut total = 0.0;
        let mut off = 0;
        for (s, target) in batch {
            let count = (s.len * da) as f64;
            let mut sum = 0.0;
            for i in 0..s.len * da {
                let e = pa[off + i].f64() - target[i] as f64;
                sum += e * e;
                d[off + i] = T::of(2.0 * inv_b / count * e);
            }
            total += sum / count * inv_b;
            off += s.len * da;
        }
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step: 0 });
        }
        let n = off / da;
        let mut grad = self.zeros_like();
        let dy = self.action_head.backward(&hc, &d, &mut grad.action_head);
        let dx = self.stack.backward(&sc, &segs, &dy, &mut grad.stack);
        self.token_embed.backward_params(&tokens, n, &dx, &mut grad.token_embed);
        Ok((total, grad))
    }
}

// ---------------------------------------------------------------- goal_mlp

/// MLP from `state ⊕ goal` to action.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalMlpParams<T> {
    pub cfg: BaselineConfig,
    pub mlp: Mlp<T>,
}

impl<T: Real> ParamTree<T> for GoalMlpParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.mlp.visit(&crate::nn::params::join(prefix, "mlp"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.mlp.visit_mut(out);
    }
}

impl<T: Real> GoalMlpParams<T> {
    pub fn init(cfg: &BaselineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(&[seed, 0x676d_6c70]);
        let mut dims = vec![2 * cfg.state_dim];
        dims.extend(std::iter::repeat(cfg.mlp_hidden).take(cfg.mlp_layers - 1));
        dims.push(cfg.action_dim);
        Ok(Self {
            cfg: cfg.clone(),
            mlp: Mlp::new(&dims, &mut rng),
        })
    }

    /// Actions for rows of `state ⊕ goal`.
    pub fn forward(&self, inputs: &[f32]) -> Vec<T> {
        let rows = inputs.len() / (2 * self.cfg.state_dim);
        self.mlp.infer(&cast::<T>(inputs), rows)
    }

    pub fn gradients(&self, inputs: &[f32], targets: &[f32]) -> Result<(f64, Self)> {
        let rows = inputs.len() / (2 * self.cfg.state_dim);
        if rows == 0 || targets.len() != rows * self.cfg.action_dim {
            return Err(invalid("goal MLP batch shape"));
        }
        let (pa, cache) = self.mlp.forward(&cast::<T>(inputs), rows);
        let n = pa.len() as f64;
        let mut total = 0.0;
        let d: Vec<T> = pa
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let e = p.f64() - y as f64;
                total += e * e / n;
                T::of(2.0 * e / n)
            })
            .collect();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step: 0 });
        }
        let mut grad = self.zeros_like();
        self.mlp.backward(&cache, &d, &mut grad.mlp);
        Ok((total, grad))
    }
}

// ---------------------------------------------------------------- training

/// Trained parameters of any baseline.
#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    Gpt(GptParams<f32>),
    GoalGpt(GoalGptParams<f32>),
    GoalMlp(GoalMlpParams<f32>),
}

impl Baseline {
    pub fn init(cfg: &BaselineConfig, seed: u64) -> Result<Self> {
        Ok(match cfg.kind {
            BaselineKind::Gpt => Baseline::Gpt(GptParams::init(cfg, seed)?),
            BaselineKind::GoalGpt => Baseline::GoalGpt(GoalGptParams::init(cfg, seed)?),
            BaselineKind::GoalMlp => Baseline::GoalMlp(GoalMlpParams::init(cfg, seed)?),
        })
    }

    pub fn cfg(&self) -> &BaselineConfig {
        match self {
            Baseline::Gpt(p) => &p.cfg,
            Baseline::GoalGpt(p) => &p.cfg,
            Baseline::GoalMlp(p) => &p.cfg,
        }
    }

    pub fn kind(&self) -> BaselineKind {
        self.cfg().kind
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Baseline::Gpt(p) => checkpoint::encode(&p.cfg, p),
            Baseline::GoalGpt(p) => checkpoint::encode(&p.cfg, p),
            Baseline::GoalMlp(p) => checkpoint::encode(&p.cfg, p),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = checkpoint::decode(bytes)?;
        let cfg: BaselineConfig = raw.config()?;
        let mut b = Baseline::init(&cfg, 0)?;
        match &mut b {
            Baseline::Gpt(p) => raw.load_into(p)?,
            Baseline::GoalGpt(p) => raw.load_into(p)?,
            Baseline::GoalMlp(p) => raw.load_into(p)?,
        }
        Ok(b)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::write(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BaselineLossRow {
    pub step: usize,
    pub train_loss: f64,
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub params: Baseline,
    pub log: Vec<BaselineLossRow>,
}

/// Training samples drawn for batch slot `slot` of step `step`.
enum Sample {
    Window(Window),
    Goal { states: Vec<f32>, goal: Vec<f32>, actions: Vec<f32>, len: usize },
    Pair { input: Vec<f32>, action: Vec<f32> },
}

fn draw_sample(cfg: &BaselineConfig, data: &Dataset, episodes: &[usize], seed: u64, step: usize, slot: usize) -> Result<Sample> {
    let mut rng = rng_from(&[seed, step as u64, slot as u64]);
    let (ds, da) = (cfg.state_dim, cfg.action_dim);
    let ctx = cfg.context_len.min(data.ep_len);
    match cfg.kind {
        BaselineKind::Gpt => Ok(Sample::Window(data.sample_window_from(episodes, ctx, &mut rng)?)),
        BaselineKind::GoalGpt => {
            // Window of m steps whose goal is the state right after it.
            let m = rng.gen_range(1..=ctx.min(data.ep_len - 1));
            let w = data.sample_window_from(episodes, m + 1, &mut rng)?;
            Ok(Sample::Goal {
                states: w.states[..m * ds].to_vec(),
                goal: w.state(m, ds).to_vec(),
                actions: w.actions[..m * da].to_vec(),
                len: m,
            })
        }
        BaselineKind::GoalMlp => {
            let len = ctx.max(2).min(data.ep_len);
            let w = data.sample_window_from(episodes, len, &mut rng)?;
            let i = rng.gen_range(0..len - 1);
            let j = rng.gen_range(i + 1..len);
            let mut input = w.state(i, ds).to_vec();
            input.extend_from_slice(w.state(j, ds));
            Ok(Sample::Pair {
                input,
                action: w.action(i, da).to_vec(),
            })
        }
    }
}

fn batch_gradients(params: &Baseline, samples: &[Sample]) -> Result<(f64, Baseline)> {
    match params {
        Baseline::Gpt(p) => {
            let ws: Vec<&Window> = samples
                .iter()
                .map(|s| match s {
                    Sample::Window(w) => w,
                    _ => unreachable!("gpt samples are windows"),
                })
                .collect();
            let (l, g) = p.gradients(&ws)?;
            Ok((l, Baseline::Gpt(g)))
        }
        Baseline::GoalGpt(p) => {
            let batch: Vec<(GoalSeq, &[f32])> = samples
                .iter()
                .map(|s| match s {
                    Sample::Goal { states, goal, actions, len } => (
                        GoalSeq {
                            states,
                            goal,
                            len: *len,
                        },
                        &actions[..],
                    ),
                    _ => unreachable!("goal_gpt samples are goal windows"),
                })
                .collect();
            let (l, g) = p.gradients(&batch)?;
            Ok((l, Baseline::GoalGpt(g)))
        }
        Baseline::GoalMlp(p) => {
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            for s in samples {
                match s {
                    Sample::Pair { input, action } => {
                        inputs.extend_from_slice(input);
                        targets.extend_from_slice(action);
                    }
                    _ => unreachable!("goal_mlp samples are pairs"),
                }
            }
            let (l, g) = p.gradients(&inputs, &targets)?;
            Ok((l, Baseline::GoalMlp(g)))
        }
    }
}

fn apply_step(params: &mut Baseline, grad: &mut Baseline, opt: &mut Adam<f32>, clip: f64) {
    match (params, grad) {
        (Baseline::Gpt(p), Baseline::Gpt(g)) => {
            clip_global_norm(g, clip);
            opt.step(p, g);
        }
        (Baseline::GoalGpt(p), Baseline::GoalGpt(g)) => {
            clip_global_norm(g, clip);
            opt.step(p, g);
        }
        (Baseline::GoalMlp(p), Baseline::GoalMlp(g)) => {
            clip_global_norm(g, clip);
            opt.step(p, g);
        }
        _ => unreachable!("gradient kind matches parameters"),
    }
}

fn new_adam(params: &Baseline, cfg: &TrainConfig) -> Adam<f32> {
    match params {
        Baseline::Gpt(p) => Adam::new(p, cfg.lr, cfg.adam_betas),
        Baseline::GoalGpt(p) => Adam::new(p, cfg.lr, cfg.adam_betas),
        Baseline::GoalMlp(p) => Adam::new(p, cfg.lr, cfg.adam_betas),
    }
}

/// Trains a baseline with the optimiser settings, batch size, step count
/// and seed of `tcfg` (the masked-model schedule), on the same training
/// episodes the masked model uses. Logs the batch loss every
/// `tcfg.eval_every` steps.
pub fn train_baseline(cfg: &BaselineConfig, data: &Dataset, tcfg: &TrainConfig, out_dir: Option<&Path>) -> Result<BaselineRun> {
    tcfg.validate()?;
    if cfg.state_dim != data.state_dim() || cfg.action_dim != data.action_dim() {
        return Err(invalid("baseline dimensions do not match the dataset"));
    }
    let (train_eps, _) = crate::pretrain::split_holdout(data.n_episodes(), tcfg.eval_holdout_fraction, tcfg.seed);
    let mut params = Baseline::init(cfg, tcfg.seed)?;
    let mut opt = new_adam(&params, tcfg);
    let mut log = Vec::new();
    for step in 1..=tcfg.n_steps {
        let samples = (0..tcfg.batch_size)
            .map(|slot| draw_sample(cfg, data, &train_eps, tcfg.seed, step, slot))
            .collect::<Result<Vec<_>>>()?;
        let (loss, mut grad) = batch_gradients(&params, &samples).map_err(|e| match e {
            Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step },
            other => other,
        })?;
        apply_step(&mut params, &mut grad, &mut opt, tcfg.grad_clip);
        if step % tcfg.eval_every == 0 || step == tcfg.n_steps {
            info!("{} step {step}: loss {loss:.5}", cfg.kind.name());
            log.push(BaselineLossRow { step, train_loss: loss });
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        params.save(dir.join("final.ckpt"))?;
        let mut w = csv::Writer::from_path(dir.join("loss.csv")).map_err(csv_err)?;
        for r in &log {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        let mut f = fs::File::create(dir.join("train_config.json"))?;
        f.write_all(serde_json::to_string_pretty(&(cfg, tcfg)).map_err(|e| invalid(e.to_string()))?.as_bytes())?;
    }
    Ok(BaselineRun { params, log })
}

// ---------------------------------------------------------------- deployment

/// Goal reaching with a goal-conditioned baseline. Baselines are reactive
/// policies: each step they act on the current state and the current goal
/// (the first whose budget has not passed), so there is no open-loop mode.
pub fn baseline_reach_batch(params: &Baseline, env: EnvId, queries: &[GoalQuery]) -> Result<Vec<(Rollout, Vec<f64>)>> {
    let cfg = params.cfg();
    let (ds, da) = (env.state_dim(), env.action_dim());
    if cfg.state_dim != ds || cfg.action_dim != da {
        return Err(invalid(format!("baseline dimensions do not match {}", env.name())));
    }
    if params.kind() == BaselineKind::Gpt {
        return Err(invalid("gpt is not goal-conditioned and cannot reach goals"));
    }
    for q in queries {
        q.validate(ds)?;
    }
    let mut envs = queries
        .iter()
        .map(|q| Env::at(env, &to_f64(&q.start)))
        .collect::<Result<Vec<_>>>()?;
    let mut rollouts: Vec<Rollout> = envs.iter().map(|e| Rollout::new(e.observe().to_vec())).collect();
    let horizon = queries.iter().map(|q| q.last_budget()).max().unwrap_or(0);
    let ctx = cfg.context_len;
    for t in 0..horizon {
        let active: Vec<usize> = (0..queries.len()).filter(|&i| t < queries[i].last_budget()).collect();
        let goals: Vec<&[f32]> = active
            .iter()
            .map(|&i| {
                let q = &queries[i];
                &q.goals[q.current_goal(t).expect("pending goal")].state[..]
            })
            .collect();
        let actions: Vec<f32> = match params {
            Baseline::GoalMlp(p) => {
                let mut inputs = Vec::with_capacity(active.len() * 2 * ds);
                for (&i, g) in active.iter().zip(&goals) {
                    inputs.extend(to_f32(envs[i].observe()));
                    inputs.extend_from_slice(g);
                }
                p.forward(&inputs)
            }
            Baseline::GoalGpt(p) => {
                let hists: Vec<Vec<f32>> = active
                    .iter()
                    .map(|&i| {
                        let r = &rollouts[i];
                        let from = r.states.len().saturating_sub(ctx);
                        r.states[from..].iter().flat_map(|s| to_f32(s)).collect()
                    })
                    .collect();
                let seqs: Vec<GoalSeq> = hists
                    .iter()
                    .zip(&goals)
                    .map(|(h, g)| GoalSeq {
                        states: h,
                        goal: g,
                        len: h.len() / ds,
                    })
                    .collect();
                let mut out = Vec::with_capacity(active.len() * da);
                for chunk in seqs.chunks(PLAN_CHUNK) {
                    let pa = p.forward(chunk)?;
                    let mut off = 0;
                    for s in chunk {
                        off += s.len * da;
                        out.extend_from_slice(&pa[off - da..off]);
                    }
                }
                out
            }
            Baseline::Gpt(_) => unreachable!("rejected above"),
        };
        for (k, &i) in active.iter().enumerate() {
            rollouts[i].push(&mut envs[i], &actions[k * da..(k + 1) * da], ActionSource { plan: t, slot: 0 })?;
        }
    }
    Ok(queries
        .iter()
        .zip(rollouts)
        .map(|(q, r)| {
            let d = crate::downstream::min_distances(&r.states, &q.goals);
            (r, d)
        })
        .collect())
}

pub fn baseline_reach(params: &Baseline, env: EnvId, query: &GoalQuery) -> Result<(Rollout, Vec<f64>)> {
    Ok(baseline_reach_batch(params, env, std::slice::from_ref(query))?.remove(0))
}

/// Skill prompting with gpt. Closed loop conditions on the prompt followed
/// by the observed states and executed actions; open loop generates the
/// continuation autoregressively from the model's own state predictions
/// and executes the generated actions. Only the last `context_len` steps
/// are fed to the model.
pub fn gpt_prompt_rollout_batch(
    params: &GptParams<f32>,
    task: TaskId,
    prompts: &[Window],
    horizon: usize,
    mode: ExecMode,
) -> Result<Vec<PromptOutcome>> {
    let env = task.env();
    let (ds, da) = (env.state_dim(), env.action_dim());
    if params.cfg.state_dim != ds || params.cfg.action_dim != da {
        return Err(invalid(format!("gpt dimensions do not match {}", env.name())));
    }
    if horizon == 0 || prompts.iter().any(|p| p.len == 0) {
        return Err(invalid("prompting needs a positive horizon and non-empty prompts"));
    }
    let ctx = params.cfg.context_len;
    let mut envs = Vec::with_capacity(prompts.len());
    for p in prompts {
        envs.push(Env::at(env, &continuation_start(env, p)?)?);
    }
    let mut rollouts: Vec<Rollout> = envs.iter().map(|e| Rollout::new(e.observe().to_vec())).collect();
    // Model-side history: states and actions, with the current state last.
    let mut hist_s: Vec<Vec<f32>> = prompts
        .iter()
        .zip(&envs)
        .map(|(p, e)| {
            let mut s = p.states.clone();
            s.extend(to_f32(e.observe()));
            s
        })
        .collect();
    let mut hist_a: Vec<Vec<f32>> = prompts.iter().map(|p| p.actions.clone()).collect();
    let trim = |s: &mut Vec<f32>, a: &mut Vec<f32>| {
        while s.len() / ds > ctx {
            s.drain(..ds);
            a.drain(..da);
        }
    };
    let mut planned: Vec<Vec<f32>> = vec![Vec::new(); prompts.len()];
    for step in 0..horizon {
        for (s, a) in hist_s.iter_mut().zip(hist_a.iter_mut()) {
            trim(s, a);
        }
        let seqs: Vec<CausalSeq> = hist_s
            .iter()
            .zip(&hist_a)
            .map(|(s, a)| CausalSeq {
                states: s,
                actions: a,
                len: s.len() / ds,
            })
            .collect();
        let acts = params.next_actions(&seqs)?;
        match mode {
            ExecMode::Closed => {
                for i in 0..prompts.len() {
                    rollouts[i].push(&mut envs[i], &acts[i * da..(i + 1) * da], ActionSource { plan: step, slot: 0 })?;
                    hist_a[i].extend(to_f32(rollouts[i].actions.last().expect("just pushed")));
                    hist_s[i].extend(to_f32(envs[i].observe()));
                }
            }
            ExecMode::Open => {
                for i in 0..prompts.len() {
                    let a: Vec<f32> = acts[i * da..(i + 1) * da].iter().map(|v| v.clamp(-1.0, 1.0)).collect();
                    planned[i].extend_from_slice(&a);
                    hist_a[i].extend(a);
                }
                if step + 1 < horizon {
                    let seqs: Vec<CausalSeq> = hist_s
                        .iter()
                        .zip(&hist_a)
                        .map(|(s, a)| CausalSeq {
                            states: s,
                            actions: a,
                            len: s.len() / ds,
                        })
                        .collect();
                    let next = params.next_states(&seqs)?;
                    for (i, s) in hist_s.iter_mut().enumerate() {
                        s.extend_from_slice(&next[i * ds..(i + 1) * ds]);
                    }
                }
            }
        }
    }
    if mode == ExecMode::Open {
        for i in 0..prompts.len() {
            for t in 0..horizon {
                rollouts[i].push(&mut envs[i], &planned[i][t * da..(t + 1) * da], ActionSource { plan: 0, slot: t })?;
            }
        }
    }
    let col = task.reward_index();
    rollouts
        .into_iter()
        .map(|r| {
            Ok(PromptOutcome {
                model_return: r.total_reward(col),
                expert_return: expert_return_from(task, &r.states[0], horizon)?,
                rollout: r,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::collect_near_expert_domain;
    use crate::downstream::Goal;

    fn tiny(kind: BaselineKind) -> BaselineConfig {
        BaselineConfig {
            hidden_dim: 16,
            n_heads: 2,
            n_layers: 2,
            context_len: 6,
            mlp_hidden: 16,
            ..BaselineConfig::desk(kind, 4, 2)
        }
    }

    fn jitter<P: ParamTree<f64>>(p: &mut P, seed: u64) {
        let mut rng = rng_from(&[seed, 17]);
        for t in p.tensors_mut() {
            for v in &mut t.data {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }

    fn window(len: usize, seed: u64) -> Window {
        let mut rng = rng_from(&[seed]);
        Window {
            states: (0..len * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            actions: (0..len * 2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            episode: 0,
            start: 0,
            len,
        }
    }

    #[test]
    fn kinds_round_trip_names() {
        for k in BaselineKind::ALL {
            assert_eq!(BaselineKind::parse(k.name()).unwrap(), k);
        }
        assert!(BaselineKind::parse("bert").is_err());
    }

    #[test]
    fn gpt_is_causal() {
        let mut p = GptParams::<f64>::init(&tiny(BaselineKind::Gpt), 1).unwrap();
        jitter(&mut p, 1);
        let w = window(4, 2);
        let seq = |s: &[f32], a: &[f32]| {
            p.features(&[CausalSeq {
                states: s,
                actions: a,
                len: 4,
            }])
            .unwrap()
            .0
        };
        let base = seq(&w.states, &w.actions);
        for token in 0..8 {
            let (mut s, mut a) = (w.states.clone(), w.actions.clone());
            // Perturb every token after `token`.
            for later in token + 1..8 {
                if later % 2 == 0 {
                    s[later / 2 * 4] += 0.7;
                } else {
                    a[later / 2 * 2] -= 0.7;
                }
            }
            let got = seq(&s, &a);
            assert_eq!(got[..(token + 1) * 16], base[..(token + 1) * 16]);
        }
    }

    #[test]
    fn goal_gpt_is_causal_and_sized() {
        let cfg = tiny(BaselineKind::GoalGpt);
        let mut p = GoalGptParams::<f64>::init(&cfg, 1).unwrap();
        jitter(&mut p, 2);
        assert_eq!(p.token_embed.fan_in(), 8);
        let w = window(5, 3);
        let goal = [0.1f32, 0.2, 0.0, 0.0];
        let base = p.forward(&[GoalSeq { states: &w.states, goal: &goal, len: 5 }]).unwrap();
        let mut s = w.states.clone();
        s[16] += 1.0;
        let got = p.forward(&[GoalSeq { states: &s, goal: &goal, len: 5 }]).unwrap();
        assert_eq!(got[..8], base[..8]);
        assert_ne!(got[8..], base[8..]);
        // Single-step windows are plain behaviour cloning.
        assert_eq!(p.forward(&[GoalSeq { states: &w.states[..4], goal: &goal, len: 1 }]).unwrap().len(), 2);
    }

    fn fd_check<P: ParamTree<f64> + Clone>(p: &P, grad: &P, loss: impl Fn(&P) -> f64, seed: u64) {
        let analytic = grad.flat();
        let mut rng = rng_from(&[seed, 23]);
        let eps = 1e-5;
        for _ in 0..20 {
            let i = rng.gen_range(0..p.n_params());
            let mut q = p.clone();
            let x = q.flat_get(i);
            q.flat_set(i, x + eps);
            let up = loss(&q);
            q.flat_set(i, x - eps);
            let down = loss(&q);
            let fd = (up - down) / (2.0 * eps);
            assert!((analytic[i] - fd).abs() / fd.abs().max(1.0) < 1e-4, "param {i}: {} vs {fd}", analytic[i]);
        }
    }

    #[test]
    fn gpt_gradients_match_finite_differences() {
        let mut p = GptParams::<f64>::init(&tiny(BaselineKind::Gpt), 3).unwrap();
        jitter(&mut p, 3);
        let ws = [window(4, 4), window(3, 5)];
        let refs: Vec<&Window> = ws.iter().collect();
        let (_, g) = p.gradients(&refs).unwrap();
        fd_check(&p, &g, |q| q.batch_loss(&refs).unwrap(), 1);
    }

    #[test]
    fn goal_gpt_gradients_match_finite_differences() {
        let mut p = GoalGptParams::<f64>::init(&tiny(BaselineKind::GoalGpt), 4).unwrap();
        jitter(&mut p, 4);
        let w = window(3, 6);
        let goal = [0.3f32, -0.2, 0.1, 0.0];
        let batch = [(GoalSeq { states: &w.states, goal: &goal, len: 3 }, &w.actions[..])];
        let (_, g) = p.gradients(&batch).unwrap();
        fd_check(&p, &g, |q| q.gradients(&batch).unwrap().0, 2);
    }

    #[test]
    fn goal_mlp_gradients_match_finite_differences() {
        let mut p = GoalMlpParams::<f64>::init(&tiny(BaselineKind::GoalMlp), 5).unwrap();
        jitter(&mut p, 5);
        assert_eq!(p.mlp.in_dim(), 8);
        assert_eq!(p.mlp.out_dim(), 2);
        let inputs: Vec<f32> = (0..24).map(|i| (i as f32 * 0.3).sin()).collect();
        let targets: Vec<f32> = (0..6).map(|i| (i as f32 * 0.7).cos()).collect();
        let (_, g) = p.gradients(&inputs, &targets).unwrap();
        fd_check(&p, &g, |q| q.gradients(&inputs, &targets).unwrap().0, 3);
    }

    #[test]
    fn gpt_rejected_for_goal_reaching() {
        let b = Baseline::init(&tiny(BaselineKind::Gpt), 0).unwrap();
        let q = GoalQuery {
            start: vec![0.0; 4],
            goals: vec![Goal { state: vec![0.5, 0.0, 0.0, 0.0], budget: 3 }],
        };
        assert!(baseline_reach(&b, EnvId::Pointmass, &q).is_err());
    }

    #[test]
    fn goal_switching_and_distances() {
        let b = Baseline::init(&tiny(BaselineKind::GoalGpt), 0).unwrap();
        let q = GoalQuery {
            start: vec![0.0; 4],
            goals: vec![
                Goal { state: vec![0.5, 0.0, 0.0, 0.0], budget: 3 },
                Goal { state: vec![-0.5, 0.0, 0.0, 0.0], budget: 9 },
            ],
        };
        let (r, d) = baseline_reach(&b, EnvId::Pointmass, &q).unwrap();
        assert_eq!(r.len(), 9);
        assert_eq!(d, crate::downstream::min_distances(&r.states, &q.goals));
        let batch = baseline_reach_batch(&b, EnvId::Pointmass, &[q.clone(), q.clone()]).unwrap();
        assert_eq!(batch[0], (r.clone(), d.clone()));
    }

    #[test]
    fn training_reduces_loss_and_checkpoints_round_trip() {
        let data = collect_near_expert_domain(EnvId::Pointmass, 6, 40, 0).unwrap();
        let tcfg = TrainConfig {
            n_steps: 60,
            batch_size: 16,
            lr: 3e-3,
            eval_every: 10,
            ..TrainConfig::desk(0)
        };
        for kind in BaselineKind::ALL {
            let run = train_baseline(&tiny(kind), &data, &tcfg, None).unwrap();
            let first = run.log.first().unwrap().train_loss;
            let last = run.log.last().unwrap().train_loss;
            assert!(last < first, "{}: {first} -> {last}", kind.name());
            let back = Baseline::from_bytes(&run.params.to_bytes()).unwrap();
            assert_eq!(back, run.params);
        }
    }

    #[test]
    fn gpt_prompting_runs_in_both_modes() {
        let p = GptParams::<f32>::init(&tiny(BaselineKind::Gpt), 0).unwrap();
        let data = collect_near_expert_domain(EnvId::Pointmass, 2, 40, 0).unwrap();
        let w = data.window(0, 10, 5).unwrap();
        for mode in [ExecMode::Open, ExecMode::Closed] {
            let out = gpt_prompt_rollout_batch(&p, TaskId::RunEast, &[w.clone()], 12, mode).unwrap();
            assert_eq!(out[0].rollout.len(), 12);
        }
        let a = gpt_prompt_rollout_batch(&p, TaskId::RunEast, &[w.clone()], 1, ExecMode::Open).unwrap();
        let b = gpt_prompt_rollout_batch(&p, TaskId::RunEast, &[w], 1, ExecMode::Closed).unwrap();
        assert_eq!(a[0].rollout.actions, b[0].rollout.actions);
    }
}
