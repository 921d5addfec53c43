#![allow(dead_code)]

pub mod oracle;

use maskdp::dataset::Window;
use maskdp::masking::{mask_with_ratio, MaskSpec};
use maskdp::model::{LossMode, ModelConfig, ModelParams};
use maskdp::nn::{ParamsExt, Real};
use maskdp::rng::rng_from;
use rand::Rng;

pub fn tiny_config(hidden: usize, heads: usize, enc: usize, dec: usize, train_len: usize) -> ModelConfig {
    ModelConfig {
        state_dim: 4,
        action_dim: 2,
        hidden_dim: hidden,
        n_heads: heads,
        n_encoder_layers: enc,
        n_decoder_layers: dec,
        train_context_len: train_len,
        dropout: 0.0,
    }
}

/// Freshly initialised parameters with every tensor (biases, gains and
/// mask token included) perturbed so that no term of the forward pass is
/// trivially zero or one.
pub fn jittered<T: Real>(cfg: &ModelConfig, seed: u64) -> ModelParams<T> {
    let mut p = ModelParams::<T>::init(cfg, seed).unwrap();
    let mut rng = rng_from(&[seed, 99]);
    for t in p.tensors_mut() {
        for v in &mut t.data {
            *v += T::of(rng.gen_range(-0.3..0.3));
        }
    }
    p
}

pub fn random_window(len: usize, seed: u64) -> Window {
    let mut rng = rng_from(&[seed, 7]);
    Window {
        states: (0..len * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        actions: (0..len * 2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        episode: 0,
        start: 0,
        len,
    }
}

/// Relative errors `|analytic − FD| / max(1, |FD|)` of `coords` randomly
/// chosen parameters, central differences with step 1e-4.
pub fn fd_relative_errors(cfg: &ModelConfig, len: usize, ratio: f64, mode: LossMode, coords: usize, seed: u64) -> Vec<f64> {
    let params = jittered::<f64>(cfg, seed);
    let windows: Vec<Window> = (0..2).map(|k| random_window(len, seed * 10 + k)).collect();
    let mut mrng = rng_from(&[seed, 3]);
    let masks: Vec<MaskSpec> = (0..2).map(|_| mask_with_ratio(len, ratio, &mut mrng)).collect();
    let batch: Vec<_> = windows.iter().zip(&masks).collect();
    let (_, grad) = params.gradients(&batch, mode).unwrap();
    let analytic = grad.flat();
    let n = params.n_params();
    let mut rng = rng_from(&[seed, 5]);
    let eps = 1e-4;
    (0..coords)
        .map(|_| {
            let i = rng.gen_range(0..n);
            let mut p = params.clone();
            let x = p.flat_get(i);
            p.flat_set(i, x + eps);
            let up = p.batch_loss(&batch, mode).unwrap();
            p.flat_set(i, x - eps);
            let down = p.batch_loss(&batch, mode).unwrap();
            let fd = (up - down) / (2.0 * eps);
            (analytic[i] - fd).abs() / fd.abs().max(1.0)
        })
        .collect()
}

/// The five gradient-check configurations: varied widths, heads, depths,
/// window lengths (one beyond the training context), ratios and loss modes.
pub fn fd_configs() -> Vec<(ModelConfig, usize, f64, LossMode)> {
    vec![
        (tiny_config(8, 1, 1, 1, 8), 3, 0.35, LossMode::Total),
        (tiny_config(8, 2, 2, 1, 8), 5, 0.55, LossMode::Masked),
        (tiny_config(12, 3, 1, 2, 8), 6, 0.15, LossMode::Total),
        (tiny_config(16, 2, 2, 2, 4), 7, 0.75, LossMode::Total),
        (tiny_config(8, 4, 1, 1, 8), 4, 0.95, LossMode::Masked),
    ]
}
