//! Offline actor-critic finetuning on a causal backbone.
//!
//! The backbone runs with lower-triangular attention over interleaved
//! state/action tokens. The actor reads the feature at each state token,
//! the twin critics read the feature at each action token. Critic updates
//! train the backbone; the actor sees backbone features as constants.


use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::env::{expert_return_ceiling, Env, TaskId};
use crate::error::{invalid, Error, Result};
use crate::model::{CausalSeq, CoreCache, ModelParams};
use crate::nn::{Adam, Mlp, ParamTree, ParamsExt, Tensor};
use crate::rng::{gaussian, rng_from};

/// A transformer that maps interleaved state/action sequences to one
/// feature row per token under causal attention.
///
/// Rows come sequence by sequence; within a sequence, state `t` sits at row
/// `2t` and action `t` at row `2t + 1`.
pub trait CausalBackbone: Clone + ParamTree<f32> {
    type Cache;

    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn causal_features(&self, seqs: &[CausalSeq<'_>]) -> Result<(Vec<f32>, Self::Cache)>;
    /// Accumulates parameter gradients into `grad`; with `want_action_grad`
    /// also returns the gradient for every action input, in stream order.
    fn causal_features_backward(&self, cache: &Self::Cache, d_features: &[f32], grad: &mut Self, want_action_grad: bool) -> Option<Vec<f32>>;
}

impl CausalBackbone for ModelParams<f32> {
    type Cache = CoreCache<f32>;

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
        self.causal_forward_batch(seqs)
    }

    fn causal_features_backward(&self, cache: &Self::Cache, d: &[f32], grad: &mut Self, want: bool) -> Option<Vec<f32>> {
        self.causal_backward(cache, d, grad, want)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub discount: f64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub target_update_rate: f64,
    pub policy_delay: usize,
    pub target_noise_std: f64,
    pub target_noise_clip: f64,
    pub batch_size: usize,
    /// Transitions per training window.
    pub context_len: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_horizon: usize,
}

impl RlConfig {
    pub fn desk() -> Self {
        Self {
            discount: 0.99,
            critic_lr: 3e-4,
            actor_lr: 3e-4,
            target_update_rate: 0.005,
            policy_delay: 2,
            target_noise_std: 0.2,
            target_noise_clip: 0.5,
            batch_size: 64,
            context_len: 4,
            eval_every: 100,
            eval_episodes: 5,
            eval_horizon: 200,
        }
    }

    pub fn paper() -> Self {
        Self {
            critic_lr: 1e-4,
            actor_lr: 1e-4,
            batch_size: 384,
            context_len: 64,
            eval_every: 5000,
            eval_episodes: 10,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(invalid("discount must lie in (0, 1)"));
        }
        if !(self.target_update_rate > 0.0 && self.target_update_rate <= 1.0) {
            return Err(invalid("target update rate must lie in (0, 1]"));
        }
        if self.policy_delay == 0 || self.batch_size == 0 || self.context_len == 0 {
            return Err(invalid("policy delay, batch size and context length must be positive"));
        }
        if self.eval_every == 0 || self.eval_episodes == 0 || self.eval_horizon == 0 {
            return Err(invalid("evaluation settings must be positive"));
        }
        if !(self.critic_lr >= 0.0 && self.actor_lr >= 0.0) {
            return Err(invalid("learning rates must be non-negative"));
        }
        if !(self.target_noise_std >= 0.0 && self.target_noise_clip >= 0.0) {
            return Err(invalid("target noise settings must be non-negative"));
        }
        Ok(())
    }
}

/// `y = r + γ · min(q1′, q2′)`. Episodes are time-limited, so there is no
/// terminal cut-off.
pub fn td_target(reward: f64, discount: f64, q1: f64, q2: f64) -> f64 {
    reward + discount * q1.min(q2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RlInit {
    Pretrained,
    Scratch,
}

impl RlInit {
    pub fn name(self) -> &'static str {
        match self {
            RlInit::Pretrained => "pretrained",
            RlInit::Scratch => "scratch",
        }
    }
}

/// Backbone plus twin value heads; everything the critic loss trains.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic<B> {
    pub backbone: B,
    pub q1: Mlp<f32>,
    pub q2: Mlp<f32>,
}

impl<B: ParamTree<f32>> ParamTree<f32> for Critic<B> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<f32>)>) {
        self.backbone.visit(&crate::nn::params::join(prefix, "backbone"), out);
        self.q1.visit(&crate::nn::params::join(prefix, "q1"), out);
        self.q2.visit(&crate::nn::params::join(prefix, "q2"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<f32>>) {
        self.backbone.visit_mut(out);
        self.q1.visit_mut(out);
        self.q2.visit_mut(out);
    }
}

#[derive(Debug, Clone)]
pub struct Agent<B> {
    pub critic: Critic<B>,
    /// Tanh-squashed policy head over state-token features.
    pub actor: Mlp<f32>,
    pub target_critic: Critic<B>,
    pub target_actor: Mlp<f32>,
    pub context_len: usize,
}

fn state_rows(lens: &[(usize, usize)]) -> Vec<usize> {
    rows_of(lens, 0)
}

fn action_rows(lens: &[(usize, usize)]) -> Vec<usize> {
    rows_of(lens, 1)
}

/// Feature rows of every state (`parity 0`) or action (`parity 1`) token
/// for sequences given as `(len, n_actions)`.
fn rows_of(lens: &[(usize, usize)], parity: usize) -> Vec<usize> {
    let mut rows = Vec::new();
    let mut base = 0;
    for &(len, n_actions) in lens {
        let n = if parity == 0 { len } else { n_actions };
        rows.extend((0..n).map(|t| base + 2 * t + parity));
        base += len + n_actions;
    }
    rows
}

fn gather(src: &[f32], rows: &[usize], width: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&src[r * width..(r + 1) * width]);
    }
    out
}

fn scatter(len: usize, rows: &[usize], src: &[f32], width: usize) -> Vec<f32> {
    let mut out = vec![0.0; len];
    for (k, &r) in rows.iter().enumerate() {
        out[r * width..(r + 1) * width].copy_from_slice(&src[k * width..(k + 1) * width]);
    }
    out
}

impl<B: CausalBackbone> Agent<B> {
    /// Fresh actor and critic heads on `backbone`; targets start as copies.
    pub fn new(backbone: B, context_len: usize, seed: u64) -> Self {
        let mut rng = rng_from(&[seed, 0x7264_3364]);
        let h = backbone.hidden_dim();
        let actor = Mlp::new(&[h, h, backbone.action_dim()], &mut rng);
        let q1 = Mlp::new(&[h, h, 1], &mut rng);
        let q2 = Mlp::new(&[h, h, 1], &mut rng);
        let critic = Critic { backbone, q1, q2 };
        Self {
            target_critic: critic.clone(),
            target_actor: actor.clone(),
            critic,
            actor,
            context_len,
        }
    }

    /// Twin values at every action token of each sequence.
    pub fn q_values(&self, seqs: &[CausalSeq<'_>]) -> Result<(Vec<f32>, Vec<f32>)> {
        let h = self.critic.backbone.hidden_dim();
        let (feats, _) = self.critic.backbone.causal_features(seqs)?;
        let rows = action_rows(&seq_lens(seqs, self.critic.backbone.action_dim()));
        let x = gather(&feats, &rows, h);
        Ok((self.critic.q1.infer(&x, rows.len()), self.critic.q2.infer(&x, rows.len())))
    }

    /// Deterministic actions for the last state of each history.
    pub fn act(&self, histories: &[CausalSeq<'_>]) -> Result<Vec<f32>> {
        let h = self.critic.backbone.hidden_dim();
        let lens = seq_lens(histories, self.critic.backbone.action_dim());
        let (feats, _) = self.critic.backbone.causal_features(histories)?;
        let mut last = Vec::with_capacity(histories.len());
        let mut base = 0;
        for &(len, n_actions) in &lens {
            last.push(base + 2 * (len - 1));
            base += len + n_actions;
        }
        let x = gather(&feats, &last, h);
        Ok(self.actor.infer(&x, last.len()).iter().map(|v| v.tanh()).collect())
    }
}

fn seq_lens(seqs: &[CausalSeq<'_>], da: usize) -> Vec<(usize, usize)> {
    seqs.iter().map(|s| (s.len, s.actions.len() / da)).collect()
}

/// A training batch: `context_len + 1` states, `context_len` actions and
/// rewards per window.
struct RlBatch {
    states: Vec<Vec<f32>>,
    actions: Vec<Vec<f32>>,
    rewards: Vec<f32>,
}

fn sample_batch(data: &Dataset, col: usize, cfg: &RlConfig, seed: u64, step: usize) -> RlBatch {
    let (ds, da, n_tasks) = (data.state_dim(), data.action_dim(), data.tasks.len());
    let c = cfg.context_len;
    let mut out = RlBatch {
        states: Vec::with_capacity(cfg.batch_size),
        actions: Vec::with_capacity(cfg.batch_size),
        rewards: Vec::with_capacity(cfg.batch_size * c),
    };
    for slot in 0..cfg.batch_size {
        let mut rng = rng_from(&[seed, step as u64, slot as u64]);
        let ep = &data.episodes[rng.gen_range(0..data.n_episodes())];
        let t0 = rng.gen_range(0..data.ep_len - c);
        out.states.push(ep.states[t0 * ds..(t0 + c + 1) * ds].to_vec());
        out.actions.push(ep.actions[t0 * da..(t0 + c) * da].to_vec());
        out.rewards.extend((t0..t0 + c).map(|t| ep.rewards[t * n_tasks + col]));
    }
    out
}

/// Losses of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_objective: Option<f64>,
}

/// Adam state and update logic for an [`Agent`].
pub struct Trainer<B> {
    pub agent: Agent<B>,
    pub cfg: RlConfig,
    critic_opt: Adam<f32>,
    actor_opt: Adam<f32>,
    updates: usize,
}

impl<B: CausalBackbone> Trainer<B> {
    pub fn new(agent: Agent<B>, cfg: RlConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            critic_opt: Adam::new(&agent.critic, cfg.critic_lr, (0.9, 0.999)),
            actor_opt: Adam::new(&agent.actor, cfg.actor_lr, (0.9, 0.999)),
            agent,
            cfg,
            updates: 0,
        })
    }

    fn update(&mut self, batch: &RlBatch, rng: &mut impl Rng) -> Result<UpdateStats> {
        let a = &self.agent;
        let bb = &a.critic.backbone;
        let (ds, da, h) = (bb.state_dim(), bb.action_dim(), bb.hidden_dim());
        let c = self.cfg.context_len;
        let b = batch.states.len();
        let n = b * c;

        // Targets. The first pass feeds the next states with the logged
        // actions to get the target actor's inputs, the second feeds the
        // smoothed target actions to the target critic.
        let next: Vec<CausalSeq> = batch
            .states
            .iter()
            .zip(&batch.actions)
            .map(|(s, act)| CausalSeq {
                states: &s[ds..],
                actions: &act[da..],
                len: c,
            })
            .collect();
        let (f_next, _) = a.target_critic.backbone.causal_features(&next)?;
        let s_rows = state_rows(&seq_lens(&next, da));
        let pi_next = a.target_actor.infer(&gather(&f_next, &s_rows, h), n);
        let clip = self.cfg.target_noise_clip;
        let smoothed: Vec<f32> = pi_next
            .iter()
            .map(|&z| {
                let eps = (self.cfg.target_noise_std * gaussian(rng)).clamp(-clip, clip);
                ((z as f64).tanh() + eps).clamp(-1.0, 1.0) as f32
            })
            .collect();
        let next_pi: Vec<CausalSeq> = batch
            .states
            .iter()
            .enumerate()
            .map(|(i, s)| CausalSeq {
                states: &s[ds..],
                actions: &smoothed[i * c * da..(i + 1) * c * da],
                len: c,
            })
            .collect();
        let (f_tgt, _) = a.target_critic.backbone.causal_features(&next_pi)?;
        let a_rows = action_rows(&seq_lens(&next_pi, da));
        let x_tgt = gather(&f_tgt, &a_rows, h);
        let q1t = a.target_critic.q1.infer(&x_tgt, n);
        let q2t = a.target_critic.q2.infer(&x_tgt, n);
        let y: Vec<f64> = (0..n)
            .map(|i| td_target(batch.rewards[i] as f64, self.cfg.discount, q1t[i] as f64, q2t[i] as f64))
            .collect();

        // Critic regression on the logged transitions.
        let cur: Vec<CausalSeq> = batch
            .states
            .iter()
            .zip(&batch.actions)
            .map(|(s, act)| CausalSeq {
                states: &s[..c * ds],
                actions: act,
                len: c,
            })
            .collect();
        let (feats, cache) = bb.causal_features(&cur)?;
        let x = gather(&feats, &a_rows, h);
        let (q1, c1) = a.critic.q1.forward(&x, n);
        let (q2, c2) = a.critic.q2.forward(&x, n);
        let mut loss = 0.0;
        let scale = 2.0 / n as f64;
        let mut d1 = vec![0.0f32; n];
        let mut d2 = vec![0.0f32; n];
        for i in 0..n {
            let (e1, e2) = (q1[i] as f64 - y[i], q2[i] as f64 - y[i]);
            loss += (e1 * e1 + e2 * e2) / n as f64;
            d1[i] = (scale * e1) as f32;
            d2[i] = (scale * e2) as f32;
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.updates });
        }
        let mut grad = a.critic.zeros_like();
        let dx1 = a.critic.q1.backward(&c1, &d1, &mut grad.q1);
        let dx2 = a.critic.q2.backward(&c2, &d2, &mut grad.q2);
        let dx: Vec<f32> = dx1.iter().zip(&dx2).map(|(p, q)| p + q).collect();
        let d_feats = scatter(feats.len(), &a_rows, &dx, h);
        bb.causal_features_backward(&cache, &d_feats, &mut grad.backbone, false);
        let actor_in = gather(&feats, &s_rows, h);
        self.critic_opt.step(&mut self.agent.critic, &grad);
        self.updates += 1;

        let mut actor_objective = None;
        if self.updates % self.cfg.policy_delay == 0 {
            actor_objective = Some(self.actor_step(&batch.states, &actor_in)?);
            let tau = self.cfg.target_update_rate as f32;
            let ag = &mut self.agent;
            ag.target_critic.soft_update_(&ag.critic, tau);
            ag.target_actor.soft_update_(&ag.actor, tau);
        }
        Ok(UpdateStats {
            critic_loss: loss,
            actor_objective,
        })
    }

    /// Ascends `Q1` with every logged action replaced by the actor's.
    fn actor_step(&mut self, states: &[Vec<f32>], actor_in: &[f32]) -> Result<f64> {
        let (objective, grad) = actor_gradient(&self.agent, self.cfg.context_len, states, actor_in)?;
        self.actor_opt.step(&mut self.agent.actor, &grad);
        Ok(objective)
    }
}

/// Mean `Q1` over every position with the logged actions replaced by the
/// actor's, and its gradient with respect to the actor head. `actor_in`
/// holds the state-token features the actor reads.
fn actor_gradient<B: CausalBackbone>(agent: &Agent<B>, c: usize, states: &[Vec<f32>], actor_in: &[f32]) -> Result<(f64, Mlp<f32>)> {
    let bb = &agent.critic.backbone;
    let (ds, da, h) = (bb.state_dim(), bb.action_dim(), bb.hidden_dim());
    let n = states.len() * c;
    let (raw, actor_cache) = agent.actor.forward(actor_in, n);
    let pi: Vec<f32> = raw.iter().map(|v| v.tanh()).collect();
    let seqs: Vec<CausalSeq> = states
        .iter()
        .enumerate()
        .map(|(i, s)| CausalSeq {
            states: &s[..c * ds],
            actions: &pi[i * c * da..(i + 1) * c * da],
            len: c,
        })
        .collect();
    let (feats, cache) = bb.causal_features(&seqs)?;
    let a_rows = action_rows(&seq_lens(&seqs, da));
    let x = gather(&feats, &a_rows, h);
    let (q, qc) = agent.critic.q1.forward(&x, n);
    let objective = q.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    // Descend −mean Q1; critic gradients are discarded.
    let dq = vec![-1.0 / n as f32; n];
    let mut scratch = agent.critic.zeros_like();
    let dx = agent.critic.q1.backward(&qc, &dq, &mut scratch.q1);
    let d_feats = scatter(feats.len(), &a_rows, &dx, h);
    let d_pi = bb
        .causal_features_backward(&cache, &d_feats, &mut scratch.backbone, true)
        .expect("action gradient requested");
    let d_raw: Vec<f32> = d_pi.iter().zip(&pi).map(|(g, p)| g * (1.0 - p * p)).collect();
    let mut grad = agent.actor.zeros_like();
    agent.actor.backward(&actor_cache, &d_raw, &mut grad);
    Ok((objective, grad))
}

/// Mean return of the deterministic actor over `cfg.eval_episodes` resets,
/// each `cfg.eval_horizon` steps, acting on a sliding context of the last
/// `context_len` states.
pub fn evaluate_policy<B: CausalBackbone>(agent: &Agent<B>, task: TaskId, cfg: &RlConfig, seed: u64) -> Result<f64> {
    let env_id = task.env();
    let (ds, da) = (env_id.state_dim(), env_id.action_dim());
    let c = agent.context_len;
    let mut envs: Vec<Env> = (0..cfg.eval_episodes)
        .map(|e| Env::new(env_id, &mut rng_from(&[seed, 0x6576_616c, e as u64])))
        .collect();
    let mut hist_s: Vec<Vec<f32>> = envs.iter().map(|e| to_f32(e.observe())).collect();
    let mut hist_a: Vec<Vec<f32>> = vec![Vec::new(); envs.len()];
    let mut total = 0.0;
    for _ in 0..cfg.eval_horizon {
        let seqs: Vec<CausalSeq> = hist_s
            .iter()
            .zip(&hist_a)
            .map(|(s, a)| CausalSeq {
                states: s,
                actions: a,
                len: s.len() / ds,
            })
            .collect();
        let actions = agent.act(&seqs)?;
        for (i, env) in envs.iter_mut().enumerate() {
            let act = &actions[i * da..(i + 1) * da];
            let a64: Vec<f64> = act.iter().map(|&v| v as f64).collect();
            let next = env.step(&a64)?;
            total += task.reward(next, &a64);
            hist_a[i].extend_from_slice(act);
            hist_s[i].extend(next.iter().map(|&v| v as f32));
            if hist_s[i].len() > c * ds {
                hist_s[i].drain(..ds);
                hist_a[i].drain(..da);
            }
        }
    }
    Ok(total / cfg.eval_episodes as f64)
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReturnRow {
    pub step: usize,
    pub seed: u64,
    pub eval_return: f64,
}

#[derive(Debug, Clone)]
pub struct RlRun<B> {
    pub agent: Agent<B>,
    pub curve: Vec<ReturnRow>,
    pub expert_return: f64,
}

impl<B> RlRun<B> {
    /// First logged step whose return reaches `fraction` of the expert's.
    pub fn steps_to_fraction(&self, fraction: f64) -> Option<usize> {
        self.curve
            .iter()
            .find(|r| r.eval_return >= fraction * self.expert_return)
            .map(|r| r.step)
    }
}

/// Finetunes actor and critic heads (and the backbone, through the
/// critic) on `data` for `task`, evaluating every `cfg.eval_every` steps
/// and at step 0.
pub fn rl_finetune<B: CausalBackbone>(
    backbone: B,
    data: &Dataset,
    task: TaskId,
    cfg: &RlConfig,
    n_steps: usize,
    seed: u64,
) -> Result<RlRun<B>> {
    cfg.validate()?;
    let col = data.task_column(task)?;
    if task.env() != data.env {
        return Err(invalid(format!("task {} does not belong to {}", task.name(), data.env.name())));
    }
    if backbone.state_dim() != data.state_dim() || backbone.action_dim() != data.action_dim() {
        return Err(invalid("backbone dimensions do not match the dataset"));
    }
    if data.ep_len <= cfg.context_len {
        return Err(invalid("episodes are shorter than the RL context"));
    }
    let expert_return = expert_return_ceiling(task, cfg.eval_episodes, cfg.eval_horizon, seed);
    let mut trainer = Trainer::new(Agent::new(backbone, cfg.context_len, seed), cfg.clone())?;
    let mut rng = rng_from(&[seed, 0x6e6f_6973]);
    let mut curve = vec![ReturnRow {
        step: 0,
        seed,
        eval_return: evaluate_policy(&trainer.agent, task, cfg, seed)?,
    }];
    for step in 1..=n_steps {
        let batch = sample_batch(data, col, cfg, seed, step);
        trainer.update(&batch, &mut rng)?;
        if step % cfg.eval_every == 0 || step == n_steps {
            let eval_return = evaluate_policy(&trainer.agent, task, cfg, seed)?;
            log::info!("rl step {step}: return {eval_return:.2}");
            curve.push(ReturnRow { step, seed, eval_return });
        }
    }
    Ok(RlRun {
        agent: trainer.agent,
        curve,
        expert_return,
    })
}

/// Picks the backbone for `init`: the pretrained parameters, or a fresh
/// initialisation of the same architecture.
pub fn backbone_for(pretrained: &ModelParams<f32>, init: RlInit, seed: u64) -> Result<ModelParams<f32>> {
    match init {
        RlInit::Pretrained => Ok(pretrained.clone()),
        RlInit::Scratch => ModelParams::init(&pretrained.cfg, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::collect_mixed;
    use crate::env::EnvId;
    use crate::model::ModelConfig;

    fn tiny_backbone() -> ModelParams<f32> {
        let cfg = ModelConfig {
            hidden_dim: 16,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            train_context_len: 8,
            ..ModelConfig::desk(4, 2)
        };
        ModelParams::init(&cfg, 2).unwrap()
    }

    #[test]
    fn td_target_arithmetic() {
        assert!((td_target(1.0, 0.99, 2.0, 2.5) - 2.98).abs() < 1e-12);
        assert_eq!(td_target(1.0, 0.5, 4.0, -2.0), 0.0);
    }

    #[test]
    fn unit_rate_copies_online_into_target() {
        let agent = Agent::new(tiny_backbone(), 3, 0);
        let mut target = agent.target_critic.clone();
        let mut online = agent.critic.clone();
        online.q1.layers[0].weight.data[0] += 1.0;
        online.backbone.state_embed.weight.data[3] -= 0.5;
        target.soft_update_(&online, 1.0);
        assert_eq!(target, online);
    }

    #[test]
    fn config_validation() {
        assert!(RlConfig::desk().validate().is_ok());
        assert!(RlConfig { discount: 1.0, ..RlConfig::desk() }.validate().is_err());
        assert!(RlConfig { target_update_rate: 0.0, ..RlConfig::desk() }.validate().is_err());
        assert!(RlConfig { target_update_rate: 1.0, ..RlConfig::desk() }.validate().is_ok());
    }

    #[test]
    fn critic_ignores_later_tokens() {
        let agent = Agent::new(tiny_backbone(), 4, 1);
        let states: Vec<f32> = (0..16).map(|i| (i as f32 * 0.37).sin()).collect();
        let actions: Vec<f32> = (0..8).map(|i| (i as f32 * 0.71).cos()).collect();
        let seq = |s: &[f32], a: &[f32]| agent.q_values(&[CausalSeq { states: s, actions: a, len: 4 }]).unwrap();
        let (base1, base2) = seq(&states, &actions);
        for t in 0..4 {
            let mut s2 = states.clone();
            let mut a2 = actions.clone();
            for v in &mut s2[(t + 1) * 4..] {
                *v += 0.5;
            }
            for v in &mut a2[(t + 1) * 2..] {
                *v -= 0.5;
            }
            let (q1, q2) = seq(&s2, &a2);
            assert_eq!(q1[..=t], base1[..=t]);
            assert_eq!(q2[..=t], base2[..=t]);
        }
    }

    #[test]
    fn rows_follow_interleaving() {
        assert_eq!(state_rows(&[(3, 3), (2, 1)]), vec![0, 2, 4, 6, 8]);
        assert_eq!(action_rows(&[(3, 3), (2, 1)]), vec![1, 3, 5, 7]);
    }

    #[test]
    fn finetune_runs_and_logs() {
        let data = collect_mixed(EnvId::Pointmass, 8, 30, 0).unwrap();
        let cfg = RlConfig {
            batch_size: 4,
            context_len: 3,
            eval_every: 2,
            eval_episodes: 2,
            eval_horizon: 10,
            ..RlConfig::desk()
        };
        let run = rl_finetune(tiny_backbone(), &data, TaskId::RunEast, &cfg, 5, 0).unwrap();
        let steps: Vec<usize> = run.curve.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 2, 4, 5]);
        assert!(run.curve.iter().all(|r| r.eval_return.is_finite()));
        assert!(rl_finetune(tiny_backbone(), &data, TaskId::Swingup, &cfg, 1, 0).is_err());
    }

    #[test]
    fn same_seed_same_curve() {
        let data = collect_mixed(EnvId::Pointmass, 8, 30, 0).unwrap();
        let cfg = RlConfig {
            batch_size: 4,
            context_len: 3,
            eval_every: 3,
            eval_episodes: 1,
            eval_horizon: 10,
            ..RlConfig::desk()
        };
        let a = rl_finetune(tiny_backbone(), &data, TaskId::RunEast, &cfg, 6, 4).unwrap();
        let b = rl_finetune(tiny_backbone(), &data, TaskId::RunEast, &cfg, 6, 4).unwrap();
        assert_eq!(a.curve, b.curve);
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let agent = Agent::new(tiny_backbone(), 3, 5);
        let states: Vec<Vec<f32>> = (0..2)
            .map(|k| (0..16).map(|i| ((i + 7 * k) as f32 * 0.41).sin() * 0.8).collect())
            .collect();
        let logged = vec![0.1f32; 6];
        let actor_in: Vec<f32> = states
            .iter()
            .flat_map(|s| {
                let seq = CausalSeq {
                    states: &s[..12],
                    actions: &logged,
                    len: 3,
                };
                let (f, _) = agent.critic.backbone.causal_features(&[seq]).unwrap();
                gather(&f, &state_rows(&[(3, 3)]), 16)
            })
            .collect();
        let (_, grad) = actor_gradient(&agent, 3, &states, &actor_in).unwrap();
        let analytic = grad.flat();
        let mut rng = rng_from(&[8]);
        let eps = 1e-2f32;
        for _ in 0..10 {
            let i = rng.gen_range(0..agent.actor.n_params());
            let mut probe = agent.clone();
            let x = probe.actor.flat_get(i);
            probe.actor.flat_set(i, x + eps);
            let up = actor_gradient(&probe, 3, &states, &actor_in).unwrap().0;
            probe.actor.flat_set(i, x - eps);
            let down = actor_gradient(&probe, 3, &states, &actor_in).unwrap().0;
            // The gradient descends −objective.
            let fd = -(up - down) / (2.0 * eps as f64);
            let an = analytic[i] as f64;
            assert!((an - fd).abs() <= 1e-3 * fd.abs().max(1e-2), "param {i}: {an} vs {fd}");
        }
    }
}
