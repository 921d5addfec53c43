//! Ablation suites: mask ratio, loss mode, model scale, foresight and
//! prompting horizon.

use std::path::Path;

use crate::dataset::{Dataset, Window};
use crate::downstream::{ExecMode, GoalQuery};
use crate::env::{EnvId, TaskId};
use crate::error::{invalid, Result};
use crate::eval::{goal_rows, loss_rows, run_goal_queries, run_prompt_eval, EvalRow, Method, Prompter, RowKey};
use crate::masking::RatioSet;
use crate::model::{LossMode, ModelConfig, ModelParams};
use crate::pretrain::{pretrain, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Ratio,
    LossMode,
    Scale,
    Foresight,
    Horizon,
}

impl AblationKind {
    pub const ALL: [AblationKind; 5] = [
        AblationKind::Ratio,
        AblationKind::LossMode,
        AblationKind::Scale,
        AblationKind::Foresight,
        AblationKind::Horizon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Ratio => "ratio",
            AblationKind::LossMode => "loss_mode",
            AblationKind::Scale => "scale",
            AblationKind::Foresight => "foresight",
            AblationKind::Horizon => "horizon",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| invalid(format!("unknown ablation {name:?}")))
    }
}

/// Fixed ratios compared against the mixed set.
pub const FIXED_RATIOS: [f64; 3] = [0.15, 0.55, 0.95];

/// The mixed set under `mixed`, then one variant per fixed ratio.
pub fn ratio_variants(mixed: &RatioSet) -> Result<Vec<(String, RatioSet)>> {
    let mut out = vec![("maskdp_ratio_mixed".to_string(), mixed.clone())];
    for r in FIXED_RATIOS {
        out.push((format!("maskdp_ratio_{r:.2}"), RatioSet::fixed(r)?));
    }
    Ok(out)
}

/// Encoder depths of the small and large variants.
pub const SCALE_ENCODER_LAYERS: [(&str, usize); 2] = [("maskdp_small", 2), ("maskdp_large", 4)];

/// What the pretraining ablations share within one seed.
#[derive(Debug, Clone)]
pub struct PretrainSetup<'a> {
    pub data: &'a Dataset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub queries: &'a [GoalQuery],
    pub query_task: &'a str,
}

fn closed_key(method: &str, env: EnvId, task: &str, seed: u64, foresight: bool, ckpt_step: usize) -> RowKey {
    RowKey {
        method: method.to_string(),
        env,
        task: task.to_string(),
        seed,
        mode: ExecMode::Closed,
        foresight,
        ckpt_step,
    }
}

/// Closed-loop goal distances of `params`, labelled `method`.
pub fn closed_goal_rows(
    method: &str,
    params: &ModelParams<f32>,
    env: EnvId,
    task: &str,
    queries: &[GoalQuery],
    seed: u64,
    ckpt_step: usize,
) -> Result<Vec<EvalRow>> {
    let m = Method::MaskDp {
        params,
        mode: ExecMode::Closed,
        foresight: true,
    };
    let key = closed_key(method, env, task, seed, true, ckpt_step);
    Ok(goal_rows(&key, &run_goal_queries(&m, env, queries)?))
}

fn sub_dir(out: Option<&Path>, name: &str) -> Option<std::path::PathBuf> {
    out.map(|d| d.join(name))
}

/// Pretrains one model per ratio variant and reports its closed-loop goal
/// distances.
pub fn ratio_ablation(setup: &PretrainSetup<'_>, out: Option<&Path>) -> Result<Vec<EvalRow>> {
    let env = setup.data.env;
    let mut rows = Vec::new();
    for (label, ratios) in ratio_variants(&setup.train.ratio_set)? {
        let cfg = TrainConfig {
            ratio_set: ratios,
            ..setup.train.clone()
        };
        let run = pretrain(&setup.model, setup.data, &cfg, sub_dir(out, &label).as_deref())?;
        rows.extend(closed_goal_rows(&label, &run.params, env, setup.query_task, setup.queries, cfg.seed, cfg.n_steps)?);
    }
    Ok(rows)
}

/// Held-out reconstruction curves under the total and the masked loss.
pub fn loss_mode_ablation(setup: &PretrainSetup<'_>, out: Option<&Path>) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for mode in [LossMode::Total, LossMode::Masked] {
        let label = format!("maskdp_loss_{}", mode.name());
        let cfg = TrainConfig {
            loss_mode: mode,
            ..setup.train.clone()
        };
        let run = pretrain(&setup.model, setup.data, &cfg, sub_dir(out, &label).as_deref())?;
        rows.extend(loss_rows(&label, setup.data.env, cfg.seed, &run.log));
    }
    Ok(rows)
}

/// Held-out curves and final goal distances of the small and large
/// encoders.
pub fn scale_ablation(setup: &PretrainSetup<'_>, out: Option<&Path>) -> Result<Vec<EvalRow>> {
    let env = setup.data.env;
    let mut rows = Vec::new();
    for (label, layers) in SCALE_ENCODER_LAYERS {
        let model = ModelConfig {
            n_encoder_layers: layers,
            ..setup.model.clone()
        };
        let run = pretrain(&model, setup.data, &setup.train, sub_dir(out, label).as_deref())?;
        rows.extend(loss_rows(label, env, setup.train.seed, &run.log));
        rows.extend(closed_goal_rows(label, &run.params, env, setup.query_task, setup.queries, setup.train.seed, setup.train.n_steps)?);
    }
    Ok(rows)
}

/// Closed-loop goal distances with all future goals visible and with only
/// the current one.
pub fn foresight_ablation(
    params: &ModelParams<f32>,
    env: EnvId,
    task: &str,
    queries: &[GoalQuery],
    seed: u64,
    ckpt_step: usize,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for foresight in [true, false] {
        let m = Method::MaskDp {
            params,
            mode: ExecMode::Closed,
            foresight,
        };
        let key = closed_key("maskdp", env, task, seed, foresight, ckpt_step);
        rows.extend(goal_rows(&key, &run_goal_queries(&m, env, queries)?));
    }
    Ok(rows)
}

/// Prompting horizons compared by default.
pub const HORIZONS: [usize; 3] = [20, 40, 60];

/// Closed-loop prompting returns at each horizon. Windows longer than the
/// training context use interpolated positions.
pub fn horizon_ablation(
    params: &ModelParams<f32>,
    task: TaskId,
    prompts: &[Window],
    horizons: &[usize],
    seed: u64,
    ckpt_step: usize,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for &h in horizons {
        rows.extend(run_prompt_eval(Prompter::MaskDp(params), task, prompts, h, ExecMode::Closed, seed, ckpt_step)?);
    }
    Ok(rows)
}
