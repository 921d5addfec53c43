//! Skill prompting: continue a behaviour from a few observed steps.

use crate::dataset::Window;
use crate::env::{Env, EnvId, TaskId};
use crate::error::{invalid, Result};
use crate::masking::prompt_mask;
use crate::model::ModelParams;

use super::{to_f32, to_f64, ActionSource, ExecMode, Rollout, PLAN_CHUNK};

#[derive(Debug, Clone, PartialEq)]
pub struct PromptOutcome {
    pub rollout: Rollout,
    /// Task return of the executed actions.
    pub model_return: f64,
    /// Return of the noise-free expert over the same horizon from the same state.
    pub expert_return: f64,
}

/// The state the continuation starts from: the prompt's last state after
/// its last action.
pub fn continuation_start(env: EnvId, prompt: &Window) -> Result<Vec<f64>> {
    let (ds, da) = (env.state_dim(), env.action_dim());
    let k = prompt.len;
    if k == 0 {
        return Err(invalid("empty prompt"));
    }
    env.step(&to_f64(prompt.state(k - 1, ds)), &to_f64(prompt.action(k - 1, da)))
}

/// Rolls the noise-free expert for `horizon` steps and returns its return.
pub fn expert_return_from(task: TaskId, start: &[f64], horizon: usize) -> Result<f64> {
    let mut env = Env::at(task.env(), start)?;
    let mut rng = crate::rng::rng_from(&[0]);
    let mut total = 0.0;
    for _ in 0..horizon {
        let a = task.expert_action(env.observe(), 0.0, &mut rng);
        let s = env.step(&a)?;
        total += task.reward(s, &a);
    }
    Ok(total)
}

/// Continues each prompt (its `len` state-action pairs) for `horizon` steps.
///
/// The model sees a window of `k + horizon` steps with the first `k` pairs
/// visible. Open loop executes the predicted actions at positions
/// `k..k + horizon`. Closed loop appends each executed pair to the visible
/// prefix and re-plans, executing the action at the first hidden position.
pub fn prompt_rollout_batch(
    params: &ModelParams<f32>,
    task: TaskId,
    prompts: &[Window],
    horizon: usize,
    mode: ExecMode,
) -> Result<Vec<PromptOutcome>> {
    let env = task.env();
    let (ds, da) = (env.state_dim(), env.action_dim());
    if params.cfg.state_dim != ds || params.cfg.action_dim != da {
        return Err(invalid(format!("model dimensions do not match {}", env.name())));
    }
    if horizon == 0 {
        return Err(invalid("prompt horizon must be positive"));
    }
    let k = prompts.first().map_or(0, |p| p.len);
    if k == 0 || prompts.iter().any(|p| p.len != k) {
        return Err(invalid("prompts must be non-empty and of equal length"));
    }
    let len = k + horizon;
    let mut envs = Vec::with_capacity(prompts.len());
    let mut windows = Vec::with_capacity(prompts.len());
    for p in prompts {
        envs.push(Env::at(env, &continuation_start(env, p)?)?);
        let mut states = p.states.clone();
        states.resize(len * ds, 0.0);
        let mut actions = p.actions.clone();
        actions.resize(len * da, 0.0);
        windows.push(Window {
            states,
            actions,
            episode: p.episode,
            start: p.start,
            len,
        });
    }
    let mut rollouts: Vec<Rollout> = envs.iter().map(|e| Rollout::new(e.observe().to_vec())).collect();

    let steps = match mode {
        ExecMode::Open => 1,
        ExecMode::Closed => horizon,
    };
    for j in 0..steps {
        let visible = k + j;
        let mask = prompt_mask(visible, len)?;
        let mut plans = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(PLAN_CHUNK) {
            let batch: Vec<_> = chunk.iter().map(|w| (w, &mask)).collect();
            plans.extend(params.forward_masked_batch(&batch)?.into_iter().map(|r| r.pred_actions));
        }
        for ((w, e), (r, plan)) in windows.iter_mut().zip(&mut envs).zip(rollouts.iter_mut().zip(&plans)) {
            let slots = match mode {
                ExecMode::Open => visible..len,
                ExecMode::Closed => visible..visible + 1,
            };
            for slot in slots {
                let state = to_f32(e.observe());
                r.push(e, &plan[slot * da..(slot + 1) * da], ActionSource { plan: j, slot })?;
                if mode == ExecMode::Closed {
                    w.states[slot * ds..(slot + 1) * ds].copy_from_slice(&state);
                    let executed = to_f32(r.actions.last().expect("just pushed"));
                    w.actions[slot * da..(slot + 1) * da].copy_from_slice(&executed);
                }
            }
        }
    }

    let col = task.reward_index();
    rollouts
        .into_iter()
        .map(|r| {
            let expert_return = expert_return_from(task, &r.states[0], horizon)?;
            Ok(PromptOutcome {
                model_return: r.total_reward(col),
                expert_return,
                rollout: r,
            })
        })
        .collect()
}

pub fn prompt_rollout(
    params: &ModelParams<f32>,
    task: TaskId,
    prompt: &Window,
    horizon: usize,
    mode: ExecMode,
) -> Result<PromptOutcome> {
    Ok(prompt_rollout_batch(params, task, std::slice::from_ref(prompt), horizon, mode)?.remove(0))
}
