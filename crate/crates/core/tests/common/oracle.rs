//! Brute-force reference evaluation of the masked autoencoder, coded from
//! the architecture description with plain loops and read from the model's
//! named tensors. Shares no code with the library's forward pass.

use std::collections::HashMap;

use maskdp::model::ModelParams;
use maskdp::nn::ParamsExt;

pub struct Named {
    map: HashMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Named {
    pub fn from(params: &ModelParams<f64>) -> Self {
        let map = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, (t.shape.clone(), t.data.clone())))
            .collect();
        Self { map }
    }

    fn get(&self, name: &str) -> &(Vec<usize>, Vec<f64>) {
        self.map.get(name).unwrap_or_else(|| panic!("missing tensor {name}"))
    }

    fn has(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// `x · W + b` for one row, with `W` stored `[in × out]`.
    fn affine(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        let (shape, w) = self.get(&format!("{prefix}.weight"));
        let (_, b) = self.get(&format!("{prefix}.bias"));
        let (n_in, n_out) = (shape[0], shape[1]);
        assert_eq!(x.len(), n_in);
        (0..n_out)
            .map(|j| b[j] + (0..n_in).map(|i| x[i] * w[i * n_out + j]).sum::<f64>())
            .collect()
    }

    fn layer_norm(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        let (_, g) = self.get(&format!("{prefix}.gain"));
        let (_, b) = self.get(&format!("{prefix}.bias"));
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
            .collect()
    }

    fn mlp(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut i = 0;
        while self.has(&format!("{prefix}.{i}.weight")) {
            if i > 0 {
                h = h.iter().map(|&v| gelu(v)).collect();
            }
            h = self.affine(&format!("{prefix}.{i}"), &h);
            i += 1;
        }
        h
    }

    fn attention(&self, prefix: &str, xs: &[Vec<f64>], n_heads: usize, causal: bool) -> Vec<Vec<f64>> {
        let h = xs[0].len();
        let dh = h / n_heads;
        let qkv: Vec<Vec<f64>> = xs.iter().map(|x| self.affine(&format!("{prefix}.qkv"), x)).collect();
        let n = xs.len();
        let mut ctx = vec![vec![0.0; h]; n];
        for head in 0..n_heads {
            for i in 0..n {
                let allowed: Vec<usize> = (0..n).filter(|&j| !causal || j <= i).collect();
                let scores: Vec<f64> = allowed
                    .iter()
                    .map(|&j| {
                        (0..dh)
                            .map(|d| qkv[i][head * dh + d] * qkv[j][h + head * dh + d])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (k, &j) in allowed.iter().enumerate() {
                    for d in 0..dh {
                        ctx[i][head * dh + d] += e[k] / z * qkv[j][2 * h + head * dh + d];
                    }
                }
            }
        }
        ctx.iter().map(|c| self.affine(&format!("{prefix}.out"), c)).collect()
    }

    fn stack(&self, prefix: &str, xs: Vec<Vec<f64>>, n_heads: usize, causal: bool) -> Vec<Vec<f64>> {
        let mut xs = xs;
        let mut b = 0;
        while self.has(&format!("{prefix}.blocks.{b}.ln1.gain")) {
            let p = format!("{prefix}.blocks.{b}");
            let normed: Vec<Vec<f64>> = xs.iter().map(|x| self.layer_norm(&format!("{p}.ln1"), x)).collect();
            let att = self.attention(&format!("{p}.attn"), &normed, n_heads, causal);
            let mid: Vec<Vec<f64>> = xs.iter().zip(&att).map(|(x, a)| add(x, a)).collect();
            xs = mid
                .iter()
                .map(|m| add(m, &self.mlp(&format!("{p}.mlp"), &self.layer_norm(&format!("{p}.ln2"), m))))
                .collect();
            b += 1;
        }
        xs.iter().map(|x| self.layer_norm(&format!("{prefix}.norm"), x)).collect()
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn position(t: usize, len: usize, train_len: usize, h: usize) -> Vec<f64> {
    let p = if len > train_len {
        t as f64 * (train_len - 1) as f64 / (len - 1) as f64
    } else {
        t as f64
    };
    (0..h)
        .map(|i| {
            let angle = p / 10000f64.powf((i - i % 2) as f64 / h as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Reference masked reconstruction: `(pred_states, pred_actions)` flattened.
pub fn masked_forward(
    params: &ModelParams<f64>,
    states: &[f32],
    actions: &[f32],
    state_visible: &[bool],
    action_visible: &[bool],
) -> (Vec<f64>, Vec<f64>) {
    let cfg = &params.cfg;
    let (h, ds, da) = (cfg.hidden_dim, cfg.state_dim, cfg.action_dim);
    let len = state_visible.len();
    let net = Named::from(params);
    let row = |xs: &[f32], t: usize, d: usize| -> Vec<f64> { xs[t * d..(t + 1) * d].iter().map(|&v| v as f64).collect() };

    // Interleaved slots: (is_state, t).
    let slots: Vec<(bool, usize)> = (0..len).flat_map(|t| [(true, t), (false, t)]).collect();
    let visible = |&(is_state, t): &(bool, usize)| if is_state { state_visible[t] } else { action_visible[t] };

    let mut enc_in = Vec::new();
    for s in slots.iter().filter(|s| visible(s)) {
        let (is_state, t) = *s;
        let e = if is_state {
            net.affine("state_embed", &row(states, t, ds))
        } else {
            net.affine("action_embed", &row(actions, t, da))
        };
        enc_in.push(add(&e, &position(t, len, cfg.train_context_len, h)));
    }
    let enc_out = net.stack("encoder", enc_in, cfg.n_heads, false);

    let mask_token = &net.get("mask_token").1;
    let mut k = 0;
    let mut dec_in = Vec::new();
    for s in &slots {
        let src = if visible(s) {
            k += 1;
            enc_out[k - 1].clone()
        } else {
            mask_token.clone()
        };
        let proj = if s.0 {
            net.affine("decoder_state_proj", &src)
        } else {
            net.affine("decoder_action_proj", &src)
        };
        dec_in.push(add(&proj, &position(s.1, len, cfg.train_context_len, h)));
    }
    let dec_out = net.stack("decoder", dec_in, cfg.n_heads, false);
    let mut ps = Vec::new();
    let mut pa = Vec::new();
    for (s, x) in slots.iter().zip(&dec_out) {
        if s.0 {
            ps.extend(net.mlp("state_head", x));
        } else {
            pa.extend(net.mlp("action_head", x));
        }
    }
    (ps, pa)
}

/// Reference causal features over the interleaved sequence; `actions` may
/// hold one row fewer than `states`.
pub fn causal_forward(params: &ModelParams<f64>, states: &[f32], actions: &[f32]) -> Vec<Vec<f64>> {
    let cfg = &params.cfg;
    let (h, ds, da) = (cfg.hidden_dim, cfg.state_dim, cfg.action_dim);
    let len = states.len() / ds;
    let n_actions = actions.len() / da;
    let net = Named::from(params);
    let mut tokens = Vec::new();
    let mut times = Vec::new();
    for t in 0..len {
        let s: Vec<f64> = states[t * ds..(t + 1) * ds].iter().map(|&v| v as f64).collect();
        tokens.push(("state", s));
        times.push(t);
        if t < n_actions {
            let a: Vec<f64> = actions[t * da..(t + 1) * da].iter().map(|&v| v as f64).collect();
            tokens.push(("action", a));
            times.push(t);
        }
    }
    let enc_in = tokens
        .iter()
        .zip(&times)
        .map(|((kind, x), &t)| add(&net.affine(&format!("{kind}_embed"), x), &position(t, len, cfg.train_context_len, h)))
        .collect();
    let enc_out = net.stack("encoder", enc_in, cfg.n_heads, true);
    let dec_in = enc_out
        .iter()
        .zip(&tokens)
        .zip(&times)
        .map(|((x, (kind, _)), &t)| {
            add(
                &net.affine(&format!("decoder_{kind}_proj"), x),
                &position(t, len, cfg.train_context_len, h),
            )
        })
        .collect();
    net.stack("decoder", dec_in, cfg.n_heads, true)
}
