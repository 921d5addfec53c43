//! Evaluation harness: goal-reaching query sets, prompts, long-format
//! metric rows and their summaries.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_reach_batch, gpt_prompt_rollout_batch, Baseline, GptParams};
use crate::dataset::{uniform_action, Dataset, Window};
use crate::downstream::prompt::prompt_rollout_batch;
use crate::downstream::rl::RlRun;
use crate::downstream::{min_distances, reach_goals_batch, ActionSource, ExecMode, Goal, GoalQuery, Rollout};
use crate::env::{Env, EnvId, TaskId};
use crate::error::{invalid, Result};
use crate::model::ModelParams;
use crate::pretrain::{csv_err, LossRow};
use crate::rng::rng_from;

/// How goal queries are cut from held-out episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub n_queries: usize,
    pub n_goals: usize,
    /// Goal offsets from the start step: distinct values from `[min, max)`,
    /// sorted.
    pub offset_min: usize,
    pub offset_max: usize,
    /// Budget beyond each goal's offset in the source episode.
    pub slack: usize,
}

impl QuerySpec {
    /// 300 single-goal queries, goal `T ∈ [15, 20)` steps ahead, budget `T + 3`.
    pub fn single_goal() -> Self {
        Self {
            n_queries: 300,
            n_goals: 1,
            offset_min: 15,
            offset_max: 20,
            slack: 3,
        }
    }

    /// 100 queries of five goals at offsets in `[12, 60)`, budget offset + 5.
    pub fn multi_goal() -> Self {
        Self {
            n_queries: 100,
            n_goals: 5,
            offset_min: 12,
            offset_max: 60,
            slack: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 || self.n_goals == 0 || self.offset_min == 0 || self.offset_min + self.n_goals > self.offset_max {
            return Err(invalid("query spec needs queries and room for distinct positive goal offsets"));
        }
        Ok(())
    }
}

/// Cuts goal queries from the listed episodes: a random start step, then
/// goals at random offsets along the same episode.
pub fn build_queries(data: &Dataset, episodes: &[usize], spec: &QuerySpec, seed: u64) -> Result<Vec<GoalQuery>> {
    spec.validate()?;
    if episodes.is_empty() {
        return Err(invalid("no episodes to cut queries from"));
    }
    if spec.offset_max > data.ep_len {
        return Err(invalid("episodes are too short for the query spec"));
    }
    let ds = data.state_dim();
    let mut rng = rng_from(&[seed, 0x7175_6572]);
    (0..spec.n_queries)
        .map(|_| {
            let ep = episodes[rng.gen_range(0..episodes.len())];
            let mut offsets = rand::seq::index::sample(&mut rng, spec.offset_max - spec.offset_min, spec.n_goals).into_vec();
            offsets.sort_unstable();
            offsets.iter_mut().for_each(|o| *o += spec.offset_min);
            let span = *offsets.last().expect("at least one goal");
            let t0 = rng.gen_range(0..data.ep_len - span);
            let w = data.window(ep, t0, span + 1)?;
            Ok(GoalQuery {
                start: w.state(0, ds).to_vec(),
                goals: offsets
                    .iter()
                    .map(|&o| Goal {
                        state: w.state(o, ds).to_vec(),
                        budget: o + spec.slack,
                    })
                    .collect(),
            })
        })
        .collect()
}

/// What produced a set of rollouts.
#[derive(Debug, Clone, PartialEq)]
pub enum Method<'a> {
    MaskDp { params: &'a ModelParams<f32>, mode: ExecMode, foresight: bool },
    Baseline(&'a Baseline),
    /// Uniform random actions, seeded per query.
    Random { seed: u64 },
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::MaskDp { .. } => "maskdp",
            Method::Baseline(b) => b.kind().name(),
            Method::Random { .. } => "random",
        }
    }

    /// Execution mode recorded for the method. Baselines and the random
    /// policy act step by step.
    pub fn mode(&self) -> ExecMode {
        match self {
            Method::MaskDp { mode, .. } => *mode,
            _ => ExecMode::Closed,
        }
    }

    pub fn foresight(&self) -> bool {
        match self {
            Method::MaskDp { foresight, .. } => *foresight,
            _ => false,
        }
    }
}

/// Rollouts and per-goal distances of `method` on every query.
pub fn run_goal_queries(method: &Method<'_>, env: EnvId, queries: &[GoalQuery]) -> Result<Vec<(Rollout, Vec<f64>)>> {
    match method {
        Method::MaskDp { params, mode, foresight } => reach_goals_batch(params, env, queries, *mode, *foresight),
        Method::Baseline(b) => baseline_reach_batch(b, env, queries),
        Method::Random { seed } => queries
            .iter()
            .enumerate()
            .map(|(i, q)| {
                q.validate(env.state_dim())?;
                let mut rng = rng_from(&[*seed, 0x726e_64, i as u64]);
                let mut e = Env::at(env, &crate::downstream::to_f64(&q.start))?;
                let mut r = Rollout::new(e.observe().to_vec());
                for t in 0..q.last_budget() {
                    let a: Vec<f32> = uniform_action(env, &mut rng).iter().map(|&v| v as f32).collect();
                    r.push(&mut e, &a, ActionSource { plan: t, slot: 0 })?;
                }
                let d = min_distances(&r.states, &q.goals);
                Ok((r, d))
            })
            .collect(),
    }
}

/// One metric value, long format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub env: String,
    pub task: String,
    pub seed: u64,
    pub query_id: usize,
    pub goal_index: usize,
    pub mode: String,
    pub foresight: bool,
    pub metric_name: String,
    pub metric_value: f64,
    pub ckpt_step: usize,
}

/// The columns shared by every row of one measurement series.
#[derive(Debug, Clone, PartialEq)]
pub struct RowKey {
    pub method: String,
    pub env: EnvId,
    pub task: String,
    pub seed: u64,
    pub mode: ExecMode,
    pub foresight: bool,
    pub ckpt_step: usize,
}

impl RowKey {
    pub fn row(&self, query_id: usize, goal_index: usize, metric_name: &str, metric_value: f64) -> EvalRow {
        EvalRow {
            method: self.method.clone(),
            env: self.env.name().to_string(),
            task: self.task.clone(),
            seed: self.seed,
            query_id,
            goal_index,
            mode: self.mode.name().to_string(),
            foresight: self.foresight,
            metric_name: metric_name.to_string(),
            metric_value,
            ckpt_step: self.ckpt_step,
        }
    }
}

/// Evaluates `method` on `queries` and returns one `min_l2` row per goal.
pub fn run_goal_eval(method: &Method<'_>, env: EnvId, task: &str, queries: &[GoalQuery], seed: u64, ckpt_step: usize) -> Result<Vec<EvalRow>> {
    let key = RowKey {
        method: method.name().to_string(),
        env,
        task: task.to_string(),
        seed,
        mode: method.mode(),
        foresight: method.foresight(),
        ckpt_step,
    };
    Ok(goal_rows(&key, &run_goal_queries(method, env, queries)?))
}

pub fn goal_rows(key: &RowKey, results: &[(Rollout, Vec<f64>)]) -> Vec<EvalRow> {
    results
        .iter()
        .enumerate()
        .flat_map(|(qid, (_, dists))| dists.iter().enumerate().map(move |(g, &d)| key.row(qid, g, "min_l2", d)))
        .collect()
}

/// Cuts `n` prompts of `k` steps at random starts in the listed episodes.
pub fn build_prompts(data: &Dataset, episodes: &[usize], n: usize, k: usize, seed: u64) -> Result<Vec<Window>> {
    if episodes.is_empty() || n == 0 || k == 0 || k >= data.ep_len {
        return Err(invalid("prompts need episodes, a positive count and 0 < k < episode length"));
    }
    let mut rng = rng_from(&[seed, 0x7072_6f6d]);
    (0..n)
        .map(|_| {
            let ep = episodes[rng.gen_range(0..episodes.len())];
            data.window(ep, rng.gen_range(0..data.ep_len - k), k)
        })
        .collect()
}

/// A model that can continue a prompt.
#[derive(Debug, Clone, Copy)]
pub enum Prompter<'a> {
    MaskDp(&'a ModelParams<f32>),
    Gpt(&'a GptParams<f32>),
}

impl Prompter<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Prompter::MaskDp(_) => "maskdp",
            Prompter::Gpt(_) => "gpt",
        }
    }
}

/// Continues every prompt for `horizon` steps. Per prompt, emits the
/// model's return and the scripted expert's return from the same state,
/// as `return_h{H}` and `expert_return_h{H}`.
pub fn run_prompt_eval(
    prompter: Prompter<'_>,
    task: TaskId,
    prompts: &[Window],
    horizon: usize,
    mode: ExecMode,
    seed: u64,
    ckpt_step: usize,
) -> Result<Vec<EvalRow>> {
    let outcomes = match prompter {
        Prompter::MaskDp(p) => prompt_rollout_batch(p, task, prompts, horizon, mode)?,
        Prompter::Gpt(p) => gpt_prompt_rollout_batch(p, task, prompts, horizon, mode)?,
    };
    let key = RowKey {
        method: prompter.name().to_string(),
        env: task.env(),
        task: task.name().to_string(),
        seed,
        mode,
        foresight: false,
        ckpt_step,
    };
    let (model_metric, expert_metric) = (format!("return_h{horizon}"), format!("expert_return_h{horizon}"));
    Ok(outcomes
        .iter()
        .enumerate()
        .flat_map(|(i, o)| [key.row(i, 0, &model_metric, o.model_return), key.row(i, 0, &expert_metric, o.expert_return)])
        .collect())
}

/// One `eval_return` row per logged step of an RL run, plus the expert
/// reference as `expert_return`.
pub fn rl_rows<B>(run: &RlRun<B>, method: &str, task: TaskId, seed: u64) -> Vec<EvalRow> {
    let key = |step| RowKey {
        method: method.to_string(),
        env: task.env(),
        task: task.name().to_string(),
        seed,
        mode: ExecMode::Closed,
        foresight: false,
        ckpt_step: step,
    };
    let last = run.curve.last().map_or(0, |r| r.step);
    let mut rows: Vec<EvalRow> = run.curve.iter().map(|r| key(r.step).row(0, 0, "eval_return", r.eval_return)).collect();
    rows.push(key(last).row(0, 0, "expert_return", run.expert_return));
    rows
}

/// Held-out reconstruction curves of a pretraining run, one row per
/// logged step.
pub fn loss_rows(method: &str, env: EnvId, seed: u64, log: &[LossRow]) -> Vec<EvalRow> {
    log.iter()
        .flat_map(|r| {
            let key = RowKey {
                method: method.to_string(),
                env,
                task: "pretrain".to_string(),
                seed,
                mode: ExecMode::Open,
                foresight: false,
                ckpt_step: r.step,
            };
            [
                key.row(0, 0, "holdout_total_mse", r.holdout_total_mse),
                key.row(0, 0, "holdout_masked_mse", r.holdout_masked_mse),
            ]
        })
        .collect()
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary { n, mean: f64::NAN, std: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Summary { n, mean, std: var.sqrt() }
}

/// Mean and spread of one metric over seeds and queries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub method: String,
    pub env: String,
    pub task: String,
    pub mode: String,
    pub foresight: bool,
    pub goal_index: usize,
    pub metric_name: String,
    pub ckpt_step: usize,
    pub n: usize,
    pub mean: f64,
    pub std_population: f64,
}

/// Groups rows by everything but seed and query id, in sorted key order.
pub fn aggregate(rows: &[EvalRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<_, Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.method.clone(),
            r.env.clone(),
            r.task.clone(),
            r.mode.clone(),
            r.foresight,
            r.goal_index,
            r.metric_name.clone(),
            r.ckpt_step,
        );
        groups.entry(key).or_default().push(r.metric_value);
    }
    groups
        .into_iter()
        .map(|((method, env, task, mode, foresight, goal_index, metric_name, ckpt_step), values)| {
            let s = summarize(&values);
            AggregateRow {
                method,
                env,
                task,
                mode,
                foresight,
                goal_index,
                metric_name,
                ckpt_step,
                n: s.n,
                mean: s.mean,
                std_population: s.std,
            }
        })
        .collect()
}

pub fn mean_metric(rows: &[EvalRow]) -> f64 {
    summarize(&rows.iter().map(|r| r.metric_value).collect::<Vec<_>>()).mean
}

/// Writes rows with a header, or appends without one if `append` is set
/// and the file already has content.
pub fn write_rows<R: Serialize>(rows: &[R], path: impl AsRef<Path>, append: bool) -> Result<()> {
    let path = path.as_ref();
    let has_content = append && path.metadata().map(|m| m.len() > 0).unwrap_or(false);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(!has_content).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
