//! Using a pretrained model: goal reaching by inpainting, skill prompting
//! and offline actor-critic finetuning.

pub mod prompt;
pub mod rl;

use serde::{Deserialize, Serialize};

use crate::dataset::Window;
use crate::env::{Env, EnvId};
use crate::error::{invalid, Error, Result};
use crate::masking::{goal_mask, MaskSpec};
use crate::model::ModelParams;

/// Windows per forward pass when planning for many queries at once.
pub(crate) const PLAN_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub state: Vec<f32>,
    /// Rollout-step deadline, cumulative from the start state.
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalQuery {
    pub start: Vec<f32>,
    pub goals: Vec<Goal>,
}

impl GoalQuery {
    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if self.goals.is_empty() {
            return Err(invalid("goal query needs at least one goal"));
        }
        if self.goals[0].budget == 0 || self.goals.windows(2).any(|w| w[0].budget >= w[1].budget) {
            return Err(invalid("goal budgets must be ≥ 1 and strictly increasing"));
        }
        for s in std::iter::once(&self.start).chain(self.goals.iter().map(|g| &g.state)) {
            if s.len() != state_dim {
                return Err(Error::DimensionMismatch {
                    what: "goal query state",
                    expected: state_dim,
                    got: s.len(),
                });
            }
        }
        Ok(())
    }

    pub fn last_budget(&self) -> usize {
        self.goals.last().map_or(0, |g| g.budget)
    }

    /// Index of the goal pursued when taking action number `t + 1`: the
    /// first goal whose budget is at least `t + 1`.
    pub fn current_goal(&self, t: usize) -> Option<usize> {
        self.goals.iter().position(|g| g.budget > t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// Execute one plan end to end.
    Open,
    /// Re-plan after every step and execute only the first action.
    Closed,
}

impl ExecMode {
    pub fn name(self) -> &'static str {
        match self {
            ExecMode::Open => "open",
            ExecMode::Closed => "closed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(ExecMode::Open),
            "closed" => Ok(ExecMode::Closed),
            _ => Err(invalid(format!("unknown execution mode {s:?}"))),
        }
    }
}

/// Which plan, and which slot of it, an executed action came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionSource {
    pub plan: usize,
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// `N + 1` visited states, the start state first.
    pub states: Vec<Vec<f64>>,
    /// `N` executed actions, after clipping to the action box.
    pub actions: Vec<Vec<f64>>,
    /// Reward of every task of the domain after each step.
    pub rewards: Vec<Vec<f64>>,
    pub sources: Vec<ActionSource>,
}

impl Rollout {
    pub fn new(start: Vec<f64>) -> Self {
        Self {
            states: vec![start],
            actions: Vec::new(),
            rewards: Vec::new(),
            sources: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Steps `env` with `action` (clipped to the box) and records it.
    pub fn push(&mut self, env: &mut Env, action: &[f32], source: ActionSource) -> Result<()> {
        let a: Vec<f64> = action.iter().map(|&v| (v as f64).clamp(-1.0, 1.0)).collect();
        let next = env.step(&a)?.to_vec();
        let rewards = env.id().tasks().iter().map(|t| t.reward(&next, &a)).collect();
        self.actions.push(a);
        self.states.push(next);
        self.rewards.push(rewards);
        self.sources.push(source);
        Ok(())
    }

    pub fn total_reward(&self, task_index: usize) -> f64 {
        self.rewards.iter().map(|r| r[task_index]).sum()
    }
}

/// `distance_k = min ‖s_t − goal_k‖₂` over visited states with `t ≤ budget_k`.
pub fn min_distances(states: &[Vec<f64>], goals: &[Goal]) -> Vec<f64> {
    goals
        .iter()
        .map(|g| {
            states
                .iter()
                .take(g.budget + 1)
                .map(|s| {
                    s.iter()
                        .zip(&g.state)
                        .map(|(&a, &b)| (a - b as f64).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// One inpainting request: a start state and goal states at positions of a
/// window of `len` timesteps.
#[derive(Debug, Clone)]
pub(crate) struct PlanRequest {
    pub start: Vec<f32>,
    pub goals: Vec<(Vec<f32>, usize)>,
    pub len: usize,
}

impl PlanRequest {
    fn window_and_mask(&self, ds: usize, da: usize) -> Result<(Window, MaskSpec)> {
        let positions: Vec<usize> = self.goals.iter().map(|g| g.1).collect();
        let mask = goal_mask(self.len, &positions)?;
        let mut states = vec![0.0; self.len * ds];
        states[..ds].copy_from_slice(&self.start);
        for (g, p) in &self.goals {
            if g.len() != ds {
                return Err(Error::DimensionMismatch {
                    what: "goal state",
                    expected: ds,
                    got: g.len(),
                });
            }
            states[p * ds..(p + 1) * ds].copy_from_slice(g);
        }
        let window = Window {
            states,
            actions: vec![0.0; self.len * da],
            episode: 0,
            start: 0,
            len: self.len,
        };
        Ok((window, mask))
    }
}

/// Predicted action sequences `[len × action_dim]` for each request.
pub(crate) fn plan_batch(params: &ModelParams<f32>, requests: &[PlanRequest]) -> Result<Vec<Vec<f32>>> {
    let (ds, da) = (params.cfg.state_dim, params.cfg.action_dim);
    let mut out = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(PLAN_CHUNK) {
        let built = chunk
            .iter()
            .map(|r| r.window_and_mask(ds, da))
            .collect::<Result<Vec<_>>>()?;
        let batch: Vec<_> = built.iter().map(|(w, m)| (w, m)).collect();
        out.extend(params.forward_masked_batch(&batch)?.into_iter().map(|r| r.pred_actions));
    }
    Ok(out)
}

/// Inpaints the actions of a window of `len` steps whose first state is
/// `start` and whose states at the given positions are the goals.
pub fn plan_actions(params: &ModelParams<f32>, start: &[f32], goals: &[(&[f32], usize)], len: usize) -> Result<Vec<f32>> {
    let ds = params.cfg.state_dim;
    if start.len() != ds {
        return Err(Error::DimensionMismatch {
            what: "start state",
            expected: ds,
            got: start.len(),
        });
    }
    if goals.last().map(|g| g.1 + 1) != Some(len) {
        return Err(invalid("window length must be the last goal position + 1"));
    }
    let req = PlanRequest {
        start: start.to_vec(),
        goals: goals.iter().map(|(g, p)| (g.to_vec(), *p)).collect(),
        len,
    };
    Ok(plan_batch(params, &[req])?.remove(0))
}

/// Longest goal budget a model can be asked to plan for.
pub fn budget_capacity(params: &ModelParams<f32>) -> usize {
    2 * params.cfg.train_context_len
}

pub(crate) fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub(crate) fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Goal reaching for one query. See [`reach_goals_batch`].
pub fn reach_goals(
    params: &ModelParams<f32>,
    env: EnvId,
    query: &GoalQuery,
    mode: ExecMode,
    foresight: bool,
) -> Result<(Rollout, Vec<f64>)> {
    Ok(reach_goals_batch(params, env, std::slice::from_ref(query), mode, foresight)?.remove(0))
}

/// Goal reaching for many queries, planned in lockstep batches.
///
/// Open loop plans once over `last budget + 1` steps with every goal at its
/// budget position and executes all planned actions up to the last budget.
/// Closed loop re-plans before every step from the current state, with each
/// pending goal moved one position nearer; a goal whose budget has passed
/// leaves the mask. Without foresight only the current goal is shown.
pub fn reach_goals_batch(
    params: &ModelParams<f32>,
    env: EnvId,
    queries: &[GoalQuery],
    mode: ExecMode,
    foresight: bool,
) -> Result<Vec<(Rollout, Vec<f64>)>> {
    let ds = env.state_dim();
    if params.cfg.state_dim != ds || params.cfg.action_dim != env.action_dim() {
        return Err(invalid(format!("model dimensions do not match {}", env.name())));
    }
    let cap = budget_capacity(params);
    for q in queries {
        q.validate(ds)?;
        if q.last_budget() > cap {
            return Err(invalid(format!(
                "goal budget {} exceeds model capacity {cap}",
                q.last_budget()
            )));
        }
    }
    let mut envs = queries
        .iter()
        .map(|q| Env::at(env, &to_f64(&q.start)))
        .collect::<Result<Vec<_>>>()?;
    let mut rollouts: Vec<Rollout> = envs.iter().map(|e| Rollout::new(e.observe().to_vec())).collect();
    let da = env.action_dim();

    let request_at = |q: &GoalQuery, state: &[f64], t: usize| -> PlanRequest {
        let first = q.current_goal(t).expect("a pending goal");
        let pending = &q.goals[first..];
        let shown = if foresight { pending } else { &pending[..1] };
        let goals: Vec<(Vec<f32>, usize)> = shown.iter().map(|g| (g.state.clone(), g.budget - t)).collect();
        let len = goals.last().expect("non-empty").1 + 1;
        PlanRequest {
            start: to_f32(state),
            goals,
            len,
        }
    };

    match mode {
        ExecMode::Open => {
            let requests: Vec<PlanRequest> = queries
                .iter()
                .zip(&envs)
                .map(|(q, e)| {
                    // Open loop always shows every goal; a single plan must
                    // cover the whole query.
                    let goals = q.goals.iter().map(|g| (g.state.clone(), g.budget)).collect();
                    let _ = e;
                    PlanRequest {
                        start: q.start.clone(),
                        goals,
                        len: q.last_budget() + 1,
                    }
                })
                .collect();
            let plans = plan_batch(params, &requests)?;
            for ((q, e), (r, plan)) in queries.iter().zip(&mut envs).zip(rollouts.iter_mut().zip(&plans)) {
                for t in 0..q.last_budget() {
                    r.push(e, &plan[t * da..(t + 1) * da], ActionSource { plan: 0, slot: t })?;
                }
            }
        }
        ExecMode::Closed => {
            let horizon = queries.iter().map(|q| q.last_budget()).max().unwrap_or(0);
            for t in 0..horizon {
                let active: Vec<usize> = (0..queries.len()).filter(|&i| t < queries[i].last_budget()).collect();
                let requests: Vec<PlanRequest> = active
                    .iter()
                    .map(|&i| request_at(&queries[i], envs[i].observe(), t))
                    .collect();
                let plans = plan_batch(params, &requests)?;
                for (&i, plan) in active.iter().zip(&plans) {
                    rollouts[i].push(&mut envs[i], &plan[..da], ActionSource { plan: t, slot: 0 })?;
                }
            }
        }
    }
    Ok(queries
        .iter()
        .zip(rollouts)
        .map(|(q, r)| {
            let d = min_distances(&r.states, &q.goals);
            (r, d)
        })
        .collect())
}
