//! Self-supervised pretraining: random windows, mixed-ratio masks, Adam on
//! the reconstruction loss, periodic held-out evaluation.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Window};
use crate::error::{invalid, Error, Result};
use crate::masking::{sample_mask_spec, MaskSpec, RatioSet};
use crate::model::{LossMode, ModelConfig, ModelParams};
use crate::nn::{clip_global_norm, Adam, ParamsExt};
use crate::rng::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub batch_size: usize,
    pub n_steps: usize,
    pub ratio_set: RatioSet,
    pub loss_mode: LossMode,
    pub seed: u64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub eval_holdout_fraction: f64,
    pub eval_every: usize,
    /// Number of fixed held-out windows used for evaluation.
    pub holdout_windows: usize,
    pub grad_clip: f64,
}

impl TrainConfig {
    /// Batch 384, 400k steps, lr 1e-4.
    pub fn paper(seed: u64) -> Self {
        Self {
            batch_size: 384,
            n_steps: 400_000,
            checkpoint_every: 50_000,
            eval_every: 5_000,
            ..Self::desk(seed)
        }
    }

    /// Batch 64, 5k steps, lr 1e-4.
    pub fn desk(seed: u64) -> Self {
        Self {
            lr: 1e-4,
            adam_betas: (0.9, 0.999),
            batch_size: 64,
            n_steps: 5_000,
            ratio_set: RatioSet::default(),
            loss_mode: LossMode::Total,
            seed,
            checkpoint_every: 1_000,
            eval_holdout_fraction: 0.05,
            eval_every: 250,
            holdout_windows: 128,
            grad_clip: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate {} must be finite and ≥ 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.eval_holdout_fraction) {
            return Err(invalid("eval_holdout_fraction must be in [0, 1)"));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every must be ≥ 1"));
        }
        if self.grad_clip <= 0.0 {
            return Err(invalid("grad_clip must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    /// Mean training loss over the steps since the previous row.
    pub train_loss: f64,
    pub holdout_total_mse: f64,
    pub holdout_masked_mse: f64,
}

/// Episodes reserved for evaluation plus a fixed set of masked windows
/// drawn from them.
#[derive(Debug, Clone)]
pub struct Holdout {
    pub episodes: Vec<usize>,
    pub windows: Vec<Window>,
    pub masks: Vec<MaskSpec>,
}

impl Holdout {
    /// Total MSE of predicting every coordinate's held-out mean: the mean of
    /// per-coordinate variances over state and action coordinates.
    pub fn variance_baseline(&self) -> f64 {
        let ds = self.windows[0].states.len() / self.windows[0].len;
        let da = self.windows[0].actions.len() / self.windows[0].len;
        let mut vars = Vec::with_capacity(ds + da);
        for (dim, pick) in [(ds, true), (da, false)] {
            for k in 0..dim {
                let vals: Vec<f64> = self
                    .windows
                    .iter()
                    .flat_map(|w| {
                        let src = if pick { &w.states } else { &w.actions };
                        (0..w.len).map(move |t| src[t * dim + k] as f64)
                    })
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                vars.push(vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64);
            }
        }
        vars.iter().sum::<f64>() / vars.len() as f64
    }

    /// `(total, masked)` reconstruction MSE averaged over the fixed windows.
    pub fn evaluate(&self, params: &ModelParams<f32>) -> Result<(f64, f64)> {
        let batch: Vec<_> = self.windows.iter().zip(&self.masks).collect();
        let mut total = 0.0;
        let mut masked = 0.0;
        for chunk in batch.chunks(64) {
            let recons = params.forward_masked_batch(chunk)?;
            for (r, (w, m)) in recons.iter().zip(chunk) {
                total += crate::model::loss(r, w, m, LossMode::Total);
                masked += crate::model::loss(r, w, m, LossMode::Masked);
            }
        }
        let n = batch.len() as f64;
        Ok((total / n, masked / n))
    }
}

/// Splits episode indices into `(train, holdout)` with a seeded shuffle.
/// At least one episode stays in training.
pub fn split_holdout(n_episodes: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n_episodes).collect();
    idx.shuffle(&mut rng_from(&[seed, 0x686f_6c64]));
    let n_hold = ((n_episodes as f64 * fraction).round() as usize).min(n_episodes.saturating_sub(1));
    let mut hold = idx[..n_hold].to_vec();
    let mut train = idx[n_hold..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    (train, hold)
}

/// Fixed evaluation windows. Masks always come from the default mixed
/// ratio set so runs with different training ratios share one yardstick.
pub fn build_holdout(data: &Dataset, episodes: Vec<usize>, len: usize, n_windows: usize, seed: u64) -> Result<Holdout> {
    let mut rng = rng_from(&[seed, 0x6576_616c]);
    let ratios = RatioSet::default();
    let mut windows = Vec::with_capacity(n_windows);
    let mut masks = Vec::with_capacity(n_windows);
    for _ in 0..n_windows {
        windows.push(data.sample_window_from(&episodes, len, &mut rng)?);
        masks.push(sample_mask_spec(len, &ratios, &mut rng));
    }
    Ok(Holdout {
        episodes,
        windows,
        masks,
    })
}

pub struct PretrainRun {
    pub params: ModelParams<f32>,
    pub log: Vec<LossRow>,
    /// Training loss of every step.
    pub step_losses: Vec<f64>,
    pub train_episodes: Vec<usize>,
    pub holdout: Holdout,
    /// Marks every episode that contributed a training window.
    pub episodes_used: Vec<bool>,
    pub clip_events: usize,
}

impl PretrainRun {
    /// First logged step whose held-out total MSE falls below `threshold`.
    pub fn steps_to_reach(&self, threshold: f64) -> Option<usize> {
        self.log.iter().find(|r| r.holdout_total_mse < threshold).map(|r| r.step)
    }

    pub fn final_row(&self) -> Option<&LossRow> {
        self.log.last()
    }
}

pub fn write_loss_csv(rows: &[LossRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["step", "train_loss", "holdout_total_mse", "holdout_masked_mse"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.train_loss.to_string(),
            r.holdout_total_mse.to_string(),
            r.holdout_masked_mse.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Trains from a fresh initialisation seeded by `cfg.seed`. When `out_dir`
/// is given, writes `loss.csv`, periodic `step_NNNNNN.ckpt` files and
/// `final.ckpt` there.
pub fn pretrain(model_cfg: &ModelConfig, data: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<PretrainRun> {
    let params = ModelParams::init(model_cfg, cfg.seed)?;
    pretrain_from(params, data, cfg, out_dir)
}

pub fn pretrain_from(
    mut params: ModelParams<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainRun> {
    cfg.validate()?;
    let mcfg = params.cfg.clone();
    if mcfg.state_dim != data.state_dim() || mcfg.action_dim != data.action_dim() {
        return Err(Error::DimensionMismatch {
            what: "dataset vs model state/action dims",
            expected: mcfg.state_dim * 100 + mcfg.action_dim,
            got: data.state_dim() * 100 + data.action_dim(),
        });
    }
    let len = mcfg.train_context_len;
    if len > data.ep_len {
        return Err(invalid(format!(
            "context {len} exceeds episode length {}",
            data.ep_len
        )));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let (train_episodes, hold_episodes) = split_holdout(data.n_episodes(), cfg.eval_holdout_fraction, cfg.seed);
    let hold_source = if hold_episodes.is_empty() {
        train_episodes.clone()
    } else {
        hold_episodes
    };
    let holdout = build_holdout(data, hold_source, len, cfg.holdout_windows.max(1), cfg.seed)?;
    let mut adam = Adam::new(&params, cfg.lr, cfg.adam_betas);
    let mut log = Vec::new();
    let mut step_losses = Vec::with_capacity(cfg.n_steps);
    let mut episodes_used = vec![false; data.n_episodes()];
    let mut clip_events = 0;
    let mut since_row = Vec::new();

    for step in 1..=cfg.n_steps {
        let mut windows = Vec::with_capacity(cfg.batch_size);
        let mut masks = Vec::with_capacity(cfg.batch_size);
        for slot in 0..cfg.batch_size {
            let mut rng = rng_from(&[cfg.seed, step as u64, slot as u64]);
            let w = data.sample_window_from(&train_episodes, len, &mut rng)?;
            episodes_used[w.episode] = true;
            masks.push(sample_mask_spec(len, &cfg.ratio_set, &mut rng));
            windows.push(w);
        }
        let batch: Vec<_> = windows.iter().zip(&masks).collect();
        let (loss, mut grad) = params.gradients(&batch, cfg.loss_mode).map_err(|e| match e {
            Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step },
            other => other,
        })?;
        let (norm, clipped) = clip_global_norm(&mut grad, cfg.grad_clip);
        if clipped {
            clip_events += 1;
            debug!("step {step}: gradient norm {norm:.3} clipped to {}", cfg.grad_clip);
        }
        adam.step(&mut params, &grad);
        if !params.all_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        step_losses.push(loss);
        since_row.push(loss);

        if step % cfg.eval_every == 0 || step == cfg.n_steps {
            let (total, masked) = holdout.evaluate(&params)?;
            let row = LossRow {
                step,
                train_loss: since_row.iter().sum::<f64>() / since_row.len() as f64,
                holdout_total_mse: total,
                holdout_masked_mse: masked,
            };
            since_row.clear();
            info!(
                "step {step}: train {:.5} holdout total {total:.5} masked {masked:.5}",
                row.train_loss
            );
            log.push(row);
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                params.save(dir.join(format!("step_{step:06}.ckpt")))?;
            }
        }
    }
    if clip_events > 0 {
        info!("gradient clipping triggered on {clip_events} of {} steps", cfg.n_steps);
    }
    if let Some(dir) = out_dir {
        params.save(dir.join("final.ckpt"))?;
        write_loss_csv(&log, dir.join("loss.csv"))?;
        let mut f = fs::File::create(dir.join("train_config.json"))?;
        f.write_all(serde_json::to_string_pretty(cfg).expect("config serialises").as_bytes())?;
    }
    Ok(PretrainRun {
        params,
        log,
        step_losses,
        train_episodes,
        holdout,
        episodes_used,
        clip_events,
    })
}
