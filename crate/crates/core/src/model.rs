//! The masked trajectory autoencoder.
//!
//! States and actions are embedded by separate affine maps and laid out in
//! interleaved order `s₀, a₀, s₁, a₁, …`, with both tokens of timestep `t`
//! sharing positional index `t`. The encoder sees only visible tokens. The
//! decoder sees every slot: encoder outputs where visible, the shared mask
//! token elsewhere, re-projected per modality and with positions re-added.
//! Two MLP heads read the state and action slots.
//!
//! The same stack runs in causal mode (lower-triangular attention in every
//! block, nothing masked) to serve as an actor-critic backbone.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::Window;
use crate::error::{invalid, Error, FormatError, Result};
use crate::masking::MaskSpec;
use crate::nn::layers::{Linear, Mlp};
use crate::nn::params::join;
use crate::nn::transformer::StackCache;
use crate::nn::{AttnMode, ParamTree, ParamsExt, Real, Segment, Stack, Tensor};
use crate::rng::{gaussian, rng_from};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub train_context_len: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    /// Reference architecture: 3 encoder / 2 decoder layers, 4 heads,
    /// hidden 256, context 64.
    pub fn paper(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            hidden_dim: 256,
            n_heads: 4,
            n_encoder_layers: 3,
            n_decoder_layers: 2,
            train_context_len: 64,
            dropout: 0.0,
        }
    }

    /// Single-CPU profile: hidden 64, 2 encoder / 1 decoder layers, 2 heads,
    /// context 32.
    pub fn desk(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            hidden_dim: 64,
            n_heads: 2,
            n_encoder_layers: 2,
            n_decoder_layers: 1,
            train_context_len: 32,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("state_dim", self.state_dim),
            ("action_dim", self.action_dim),
            ("hidden_dim", self.hidden_dim),
            ("n_heads", self.n_heads),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("train_context_len", self.train_context_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("{name} must be ≥ 1")));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(invalid(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        // FIXME: dropout is carried in the config but the layers only
        // implement the deterministic (rate 0) path.
        if self.dropout != 0.0 {
            return Err(invalid("only dropout = 0 is supported"));
        }
        Ok(())
    }
}

/// Positional index of each timestep. Sequences longer than the training
/// context are squeezed linearly onto `[0, train_len − 1]`.
pub fn position_indices(len: usize, train_len: usize) -> Vec<f64> {
    if len <= train_len || len == 1 {
        (0..len).map(|p| p as f64).collect()
    } else {
        let scale = (train_len - 1) as f64 / (len - 1) as f64;
        (0..len).map(|p| p as f64 * scale).collect()
    }
}

/// Sinusoidal embedding of a (possibly fractional) position.
pub fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in 0..dim {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10_000f64.powf(2.0 * pair / dim as f64);
        out[i] = if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
    }
    out
}

/// `[len × dim]` table of positional embeddings.
pub fn positional_table(len: usize, train_len: usize, dim: usize) -> Vec<f64> {
    position_indices(len, train_len)
        .into_iter()
        .flat_map(|p| sinusoid(p, dim))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Mean squared error over every slot.
    Total,
    /// Mean squared error over masked slots only.
    Masked,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Total => "total",
            LossMode::Masked => "masked",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction<T> {
    pub pred_states: Vec<T>,
    pub pred_actions: Vec<T>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub cfg: ModelConfig,
    pub state_embed: Linear<T>,
    pub action_embed: Linear<T>,
    pub encoder: Stack<T>,
    pub mask_token: Tensor<T>,
    pub decoder_state_proj: Linear<T>,
    pub decoder_action_proj: Linear<T>,
    pub decoder: Stack<T>,
    pub state_head: Mlp<T>,
    pub action_head: Mlp<T>,
}

impl<T: Real> ParamTree<T> for ModelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.state_embed.visit(&join(prefix, "state_embed"), out);
        self.action_embed.visit(&join(prefix, "action_embed"), out);
        self.encoder.visit(&join(prefix, "encoder"), out);
        self.mask_token.visit(&join(prefix, "mask_token"), out);
        self.decoder_state_proj.visit(&join(prefix, "decoder_state_proj"), out);
        self.decoder_action_proj.visit(&join(prefix, "decoder_action_proj"), out);
        self.decoder.visit(&join(prefix, "decoder"), out);
        self.state_head.visit(&join(prefix, "state_head"), out);
        self.action_head.visit(&join(prefix, "action_head"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.state_embed.visit_mut(out);
        self.action_embed.visit_mut(out);
        self.encoder.visit_mut(out);
        self.mask_token.visit_mut(out);
        self.decoder_state_proj.visit_mut(out);
        self.decoder_action_proj.visit_mut(out);
        self.decoder.visit_mut(out);
        self.state_head.visit_mut(out);
        self.action_head.visit_mut(out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    State,
    Action,
}

/// One sequence entering the encoder–decoder core. `actions` holds either
/// `len` or `len − 1` rows; in the latter case the final action slot does
/// not exist.
struct CoreSeq<'a> {
    states: &'a [f32],
    actions: &'a [f32],
    len: usize,
    n_actions: usize,
    state_visible: &'a [bool],
    action_visible: &'a [bool],
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    kind: Kind,
    /// Row in the encoder stream, if the token is visible.
    enc_row: Option<usize>,
    /// Row among decoder slots of the same modality.
    proj_row: usize,
}

/// Everything the core's backward pass needs.
pub struct CoreCache<T> {
    slots: Vec<Slot>,
    enc_kinds: Vec<Kind>,
    vis_states: Vec<T>,
    vis_actions: Vec<T>,
    enc_segs: Vec<Segment>,
    enc: StackCache<T>,
    dec_state_in: Vec<T>,
    dec_action_in: Vec<T>,
    dec_segs: Vec<Segment>,
    dec: StackCache<T>,
}

impl<T> CoreCache<T> {
    /// Decoder rows holding state slots, in order.
    fn rows_of(&self, kind: Kind) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn decoder_segments(&self) -> &[Segment] {
        &self.dec_segs
    }
}

fn cast<T: Real>(xs: &[f32]) -> Vec<T> {
    xs.iter().map(|&v| T::of(v as f64)).collect()
}

fn gather<T: Real>(src: &[T], rows: &[usize], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&src[r * width..(r + 1) * width]);
    }
    out
}

fn scatter_add<T: Real>(dst: &mut [T], rows: &[usize], src: &[T], width: usize) {
    for (k, &r) in rows.iter().enumerate() {
        for (d, &s) in dst[r * width..(r + 1) * width].iter_mut().zip(&src[k * width..(k + 1) * width]) {
            *d += s;
        }
    }
}

/// Sequence of interleaved tokens for the causal path.
#[derive(Debug, Clone, Copy)]
pub struct CausalSeq<'a> {
    pub states: &'a [f32],
    /// `len` rows, or `len − 1` rows when the final action is unknown.
    pub actions: &'a [f32],
    pub len: usize,
}

impl<T: Real> ModelParams<T> {
    /// Weights ~ N(0, 0.02²) truncated at ±2σ, zero biases, unit norm
    /// gains, mask token ~ N(0, 0.02²).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(&[seed, 0x6d61_736b]);
        let h = cfg.hidden_dim;
        let state_embed = Linear::new(cfg.state_dim, h, &mut rng);
        let action_embed = Linear::new(cfg.action_dim, h, &mut rng);
        let encoder = Stack::new(h, cfg.n_heads, cfg.n_encoder_layers, &mut rng);
        let mask_token = Tensor::from_fn(&[h], || T::of(0.02 * gaussian(&mut rng)));
        let decoder_state_proj = Linear::new(h, h, &mut rng);
        let decoder_action_proj = Linear::new(h, h, &mut rng);
        let decoder = Stack::new(h, cfg.n_heads, cfg.n_decoder_layers, &mut rng);
        let state_head = Mlp::new(&[h, h, cfg.state_dim], &mut rng);
        let action_head = Mlp::new(&[h, h, cfg.action_dim], &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            state_embed,
            action_embed,
            encoder,
            mask_token,
            decoder_state_proj,
            decoder_action_proj,
            decoder,
            state_head,
            action_head,
        })
    }

    fn check_window(&self, w: &Window, mask: &MaskSpec) -> Result<()> {
        let (ds, da) = (self.cfg.state_dim, self.cfg.action_dim);
        if mask.len() != w.len || mask.action_visible.len() != w.len {
            return Err(Error::DimensionMismatch {
                what: "mask length",
                expected: w.len,
                got: mask.len(),
            });
        }
        if w.states.len() != w.len * ds {
            return Err(Error::DimensionMismatch {
                what: "window states",
                expected: w.len * ds,
                got: w.states.len(),
            });
        }
        if w.actions.len() != w.len * da {
            return Err(Error::DimensionMismatch {
                what: "window actions",
                expected: w.len * da,
                got: w.actions.len(),
            });
        }
        if w.len == 0 {
            return Err(invalid("empty window"));
        }
        Ok(())
    }

    fn core_forward(&self, seqs: &[CoreSeq<'_>], mode: AttnMode, shuffle: Option<u64>) -> (Vec<T>, CoreCache<T>) {
        let (h, ds, da) = (self.cfg.hidden_dim, self.cfg.state_dim, self.cfg.action_dim);
        let mut tables: HashMap<usize, Vec<T>> = HashMap::new();
        let mut vis_states = Vec::new();
        let mut vis_actions = Vec::new();
        // (kind, index among visible of that kind, seq len, timestep)
        let mut enc_src: Vec<(Kind, usize, usize, usize)> = Vec::new();
        let mut enc_lens = Vec::with_capacity(seqs.len());
        let mut slots = Vec::new();
        let mut slot_pos: Vec<(usize, usize)> = Vec::new();
        let (mut n_state_slots, mut n_action_slots) = (0, 0);
        for seq in seqs {
            tables
                .entry(seq.len)
                .or_insert_with(|| positional_table(seq.len, self.cfg.train_context_len, h).into_iter().map(T::of).collect());
            let first = enc_src.len();
            for t in 0..seq.len {
                for kind in [Kind::State, Kind::Action] {
                    let (visible, proj_row) = match kind {
                        Kind::State => {
                            n_state_slots += 1;
                            (seq.state_visible[t], n_state_slots - 1)
                        }
                        Kind::Action => {
                            if t >= seq.n_actions {
                                continue;
                            }
                            n_action_slots += 1;
                            (seq.action_visible[t], n_action_slots - 1)
                        }
                    };
                    let enc_row = if visible {
                        let idx = match kind {
                            Kind::State => {
                                vis_states.extend(cast::<T>(&seq.states[t * ds..(t + 1) * ds]));
                                vis_states.len() / ds - 1
                            }
                            Kind::Action => {
                                vis_actions.extend(cast::<T>(&seq.actions[t * da..(t + 1) * da]));
                                vis_actions.len() / da - 1
                            }
                        };
                        enc_src.push((kind, idx, seq.len, t));
                        Some(enc_src.len() - 1)
                    } else {
                        None
                    };
                    slots.push(Slot { kind, enc_row, proj_row });
                    slot_pos.push((seq.len, t));
                }
            }
            if let Some(seed) = shuffle {
                // Reorder this sequence's encoder rows; positions travel with them.
                let n = enc_src.len() - first;
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng_from(&[seed, first as u64]));
                let old: Vec<_> = enc_src[first..].to_vec();
                let mut new_row = vec![0; n];
                for (new, &o) in perm.iter().enumerate() {
                    enc_src[first + new] = old[o];
                    new_row[o] = new;
                }
                let slot_start = slots.len() - (seq.len + seq.n_actions);
                for s in &mut slots[slot_start..] {
                    if let Some(r) = s.enc_row {
                        s.enc_row = Some(first + new_row[r - first]);
                    }
                }
            }
            enc_lens.push(enc_src.len() - first);
        }

        let n_vs = vis_states.len() / ds;
        let n_va = vis_actions.len() / da;
        let emb_s = self.state_embed.forward(&vis_states, n_vs);
        let emb_a = self.action_embed.forward(&vis_actions, n_va);
        let mut enc_in = vec![T::zero(); enc_src.len() * h];
        for (row, &(kind, idx, len, t)) in enc_src.iter().enumerate() {
            let emb = match kind {
                Kind::State => &emb_s[idx * h..(idx + 1) * h],
                Kind::Action => &emb_a[idx * h..(idx + 1) * h],
            };
            let pe = &tables[&len][t * h..(t + 1) * h];
            for ((o, &e), &p) in enc_in[row * h..(row + 1) * h].iter_mut().zip(emb).zip(pe) {
                *o = e + p;
            }
        }
        let enc_segs = Segment::pack(enc_lens);
        let (enc_out, enc) = self.encoder.forward(&enc_in, &enc_segs, mode);

        let mut dec_state_in = vec![T::zero(); n_state_slots * h];
        let mut dec_action_in = vec![T::zero(); n_action_slots * h];
        for s in &slots {
            let src = match s.enc_row {
                Some(r) => &enc_out[r * h..(r + 1) * h],
                None => &self.mask_token.data[..],
            };
            let dst = match s.kind {
                Kind::State => &mut dec_state_in[s.proj_row * h..(s.proj_row + 1) * h],
                Kind::Action => &mut dec_action_in[s.proj_row * h..(s.proj_row + 1) * h],
            };
            dst.copy_from_slice(src);
        }
        let proj_s = self.decoder_state_proj.forward(&dec_state_in, n_state_slots);
        let proj_a = self.decoder_action_proj.forward(&dec_action_in, n_action_slots);
        let mut dec_in = vec![T::zero(); slots.len() * h];
        for (row, (s, &(len, t))) in slots.iter().zip(&slot_pos).enumerate() {
            let src = match s.kind {
                Kind::State => &proj_s[s.proj_row * h..(s.proj_row + 1) * h],
                Kind::Action => &proj_a[s.proj_row * h..(s.proj_row + 1) * h],
            };
            let pe = &tables[&len][t * h..(t + 1) * h];
            for ((o, &v), &p) in dec_in[row * h..(row + 1) * h].iter_mut().zip(src).zip(pe) {
                *o = v + p;
            }
        }
        let dec_segs = Segment::pack(seqs.iter().map(|s| s.len + s.n_actions));
        let (dec_out, dec) = self.decoder.forward(&dec_in, &dec_segs, mode);
        let enc_kinds = enc_src.iter().map(|e| e.0).collect();
        (
            dec_out,
            CoreCache {
                slots,
                enc_kinds,
                vis_states,
                vis_actions,
                enc_segs,
                enc,
                dec_state_in,
                dec_action_in,
                dec_segs,
                dec,
            },
        )
    }

    /// Accumulates gradients from `d_out` (w.r.t. decoder output). When
    /// `want_action_grad` is set, returns the gradient with respect to the
    /// visible action inputs in stream order.
    fn core_backward(&self, cache: &CoreCache<T>, d_out: &[T], grad: &mut Self, want_action_grad: bool) -> Option<Vec<T>> {
        let h = self.cfg.hidden_dim;
        let d_dec_in = self.decoder.backward(&cache.dec, &cache.dec_segs, d_out, &mut grad.decoder);
        let state_rows = cache.rows_of(Kind::State);
        let action_rows = cache.rows_of(Kind::Action);
        let d_ps = gather(&d_dec_in, &state_rows, h);
        let d_pa = gather(&d_dec_in, &action_rows, h);
        let dx_s = self
            .decoder_state_proj
            .backward(&cache.dec_state_in, state_rows.len(), &d_ps, &mut grad.decoder_state_proj);
        let dx_a = self
            .decoder_action_proj
            .backward(&cache.dec_action_in, action_rows.len(), &d_pa, &mut grad.decoder_action_proj);
        let n_enc = cache.enc_kinds.len();
        let mut d_enc_out = vec![T::zero(); n_enc * h];
        for s in &cache.slots {
            let src = match s.kind {
                Kind::State => &dx_s[s.proj_row * h..(s.proj_row + 1) * h],
                Kind::Action => &dx_a[s.proj_row * h..(s.proj_row + 1) * h],
            };
            let dst = match s.enc_row {
                Some(r) => &mut d_enc_out[r * h..(r + 1) * h],
                None => &mut grad.mask_token.data[..],
            };
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
        let d_enc_in = self.encoder.backward(&cache.enc, &cache.enc_segs, &d_enc_out, &mut grad.encoder);
        let enc_state_rows: Vec<usize> = (0..n_enc).filter(|&r| cache.enc_kinds[r] == Kind::State).collect();
        let enc_action_rows: Vec<usize> = (0..n_enc).filter(|&r| cache.enc_kinds[r] == Kind::Action).collect();
        let d_es = gather(&d_enc_in, &enc_state_rows, h);
        let d_ea = gather(&d_enc_in, &enc_action_rows, h);
        self.state_embed
            .backward_params(&cache.vis_states, enc_state_rows.len(), &d_es, &mut grad.state_embed);
        if want_action_grad {
            Some(
                self.action_embed
                    .backward(&cache.vis_actions, enc_action_rows.len(), &d_ea, &mut grad.action_embed),
            )
        } else {
            self.action_embed
                .backward_params(&cache.vis_actions, enc_action_rows.len(), &d_ea, &mut grad.action_embed);
            None
        }
    }

    fn masked_seqs<'a>(&self, batch: &'a [(&'a Window, &'a MaskSpec)]) -> Result<Vec<CoreSeq<'a>>> {
        batch
            .iter()
            .map(|(w, m)| {
                self.check_window(w, m)?;
                Ok(CoreSeq {
                    states: &w.states,
                    actions: &w.actions,
                    len: w.len,
                    n_actions: w.len,
                    state_visible: &m.state_visible,
                    action_visible: &m.action_visible,
                })
            })
            .collect()
    }

    fn heads_forward(
        &self,
        dec_out: &[T],
        cache: &CoreCache<T>,
    ) -> (Vec<T>, Vec<T>, crate::nn::layers::MlpCache<T>, crate::nn::layers::MlpCache<T>) {
        let h = self.cfg.hidden_dim;
        let srows = cache.rows_of(Kind::State);
        let arows = cache.rows_of(Kind::Action);
        let (ps, cs) = self.state_head.forward(&gather(dec_out, &srows, h), srows.len());
        let (pa, ca) = self.action_head.forward(&gather(dec_out, &arows, h), arows.len());
        (ps, pa, cs, ca)
    }

    fn split_recons(&self, batch: &[(&Window, &MaskSpec)], ps: &[T], pa: &[T]) -> Vec<Reconstruction<T>> {
        let (ds, da) = (self.cfg.state_dim, self.cfg.action_dim);
        let (mut so, mut ao) = (0, 0);
        batch
            .iter()
            .map(|(w, _)| {
                let r = Reconstruction {
                    pred_states: ps[so..so + w.len * ds].to_vec(),
                    pred_actions: pa[ao..ao + w.len * da].to_vec(),
                    len: w.len,
                };
                so += w.len * ds;
                ao += w.len * da;
                r
            })
            .collect()
    }

    /// Reconstructs every slot of each window from its visible tokens.
    pub fn forward_masked_batch(&self, batch: &[(&Window, &MaskSpec)]) -> Result<Vec<Reconstruction<T>>> {
        self.forward_masked_impl(batch, None)
    }

    fn forward_masked_impl(&self, batch: &[(&Window, &MaskSpec)], shuffle: Option<u64>) -> Result<Vec<Reconstruction<T>>> {
        let seqs = self.masked_seqs(batch)?;
        let (dec_out, cache) = self.core_forward(&seqs, AttnMode::Bidirectional, shuffle);
        let (ps, pa, _, _) = self.heads_forward(&dec_out, &cache);
        Ok(self.split_recons(batch, &ps, &pa))
    }

    pub fn forward_masked(&self, window: &Window, mask: &MaskSpec) -> Result<Reconstruction<T>> {
        Ok(self.forward_masked_batch(&[(window, mask)])?.remove(0))
    }

    /// As [`ModelParams::forward_masked`] but with each sequence's encoder
    /// tokens fed in a shuffled order.
    pub fn forward_masked_shuffled(&self, window: &Window, mask: &MaskSpec, seed: u64) -> Result<Reconstruction<T>> {
        Ok(self.forward_masked_impl(&[(window, mask)], Some(seed))?.remove(0))
    }

    /// Mean loss over the batch and its exact gradient.
    pub fn gradients(&self, batch: &[(&Window, &MaskSpec)], mode: LossMode) -> Result<(f64, Self)> {
        if batch.is_empty() {
            return Err(invalid("gradient batch must not be empty"));
        }
        let (h, ds, da) = (self.cfg.hidden_dim, self.cfg.state_dim, self.cfg.action_dim);
        let seqs = self.masked_seqs(batch)?;
        let (dec_out, cache) = self.core_forward(&seqs, AttnMode::Bidirectional, None);
        let (ps, pa, cs, ca) = self.heads_forward(&dec_out, &cache);
        let inv_b = 1.0 / batch.len() as f64;
        let mut d_ps = vec![T::zero(); ps.len()];
        let mut d_pa = vec![T::zero(); pa.len()];
        let (mut so, mut ao) = (0, 0);
        let mut total = 0.0;
        for (w, m) in batch {
            let (l, weight) = loss_terms(
                &ps[so..so + w.len * ds],
                &pa[ao..ao + w.len * da],
                w,
                m,
                mode,
                ds,
                da,
            );
            total += l * inv_b;
            let coef = T::of(2.0 * weight * inv_b);
            for t in 0..w.len {
                let sw = mode == LossMode::Total || !m.state_visible[t];
                if sw {
                    for k in 0..ds {
                        let i = so + t * ds + k;
                        d_ps[i] = coef * (ps[i] - T::of(w.states[t * ds + k] as f64));
                    }
                }
                let aw = mode == LossMode::Total || !m.action_visible[t];
                if aw {
                    for k in 0..da {
                        let i = ao + t * da + k;
                        d_pa[i] = coef * (pa[i] - T::of(w.actions[t * da + k] as f64));
                    }
                }
            }
            so += w.len * ds;
            ao += w.len * da;
        }
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step: 0 });
        }
        let mut grad = self.zeros_like();
        let d_sr = self.state_head.backward(&cs, &d_ps, &mut grad.state_head);
        let d_ar = self.action_head.backward(&ca, &d_pa, &mut grad.action_head);
        let mut d_out = vec![T::zero(); dec_out.len()];
        scatter_add(&mut d_out, &cache.rows_of(Kind::State), &d_sr, h);
        scatter_add(&mut d_out, &cache.rows_of(Kind::Action), &d_ar, h);
        self.core_backward(&cache, &d_out, &mut grad, false);
        Ok((total, grad))
    }

    /// Mean loss over the batch without gradients.
    pub fn batch_loss(&self, batch: &[(&Window, &MaskSpec)], mode: LossMode) -> Result<f64> {
        let recons = self.forward_masked_batch(batch)?;
        Ok(recons
            .iter()
            .zip(batch)
            .map(|(r, (w, m))| loss(r, w, m, mode))
            .sum::<f64>()
            / batch.len() as f64)
    }

    fn causal_core_seqs<'a>(&self, seqs: &'a [CausalSeq<'a>], vis: &'a [bool]) -> Result<Vec<CoreSeq<'a>>> {
        let (ds, da) = (self.cfg.state_dim, self.cfg.action_dim);
        seqs.iter()
            .map(|s| {
                if s.len == 0 || s.states.len() != s.len * ds {
                    return Err(Error::DimensionMismatch {
                        what: "causal states",
                        expected: s.len * ds,
                        got: s.states.len(),
                    });
                }
                let n_actions = s.actions.len() / da;
                if s.actions.len() % da != 0 || !(n_actions == s.len || n_actions + 1 == s.len) {
                    return Err(Error::DimensionMismatch {
                        what: "causal actions",
                        expected: s.len * da,
                        got: s.actions.len(),
                    });
                }
                Ok(CoreSeq {
                    states: s.states,
                    actions: s.actions,
                    len: s.len,
                    n_actions,
                    state_visible: &vis[..s.len],
                    action_visible: &vis[..n_actions],
                })
            })
            .collect()
    }

    /// Decoder features for every token under causal attention, stacked
    /// sequence by sequence in interleaved order.
    pub fn causal_forward_batch(&self, seqs: &[CausalSeq<'_>]) -> Result<(Vec<T>, CoreCache<T>)> {
        let max_len = seqs.iter().map(|s| s.len).max().unwrap_or(0);
        let vis = vec![true; max_len];
        let core = self.causal_core_seqs(seqs, &vis)?;
        Ok(self.core_forward(&core, AttnMode::Causal, None))
    }

    pub fn causal_backward(&self, cache: &CoreCache<T>, d_features: &[T], grad: &mut Self, want_action_grad: bool) -> Option<Vec<T>> {
        self.core_backward(cache, d_features, grad, want_action_grad)
    }

    /// Causal features of one sequence, `[tokens × hidden]`. With
    /// `drop_last_action` the final action token is omitted (and `actions`
    /// may hold `len − 1` or `len` rows).
    pub fn forward_causal(&self, states: &[f32], actions: &[f32], drop_last_action: bool) -> Result<Vec<T>> {
        let ds = self.cfg.state_dim;
        let da = self.cfg.action_dim;
        let len = states.len() / ds;
        let actions = if drop_last_action && actions.len() == len * da {
            &actions[..(len - 1) * da]
        } else {
            actions
        };
        if !drop_last_action && actions.len() != len * da {
            return Err(Error::DimensionMismatch {
                what: "causal actions",
                expected: len * da,
                got: actions.len(),
            });
        }
        Ok(self.causal_forward_batch(&[CausalSeq { states, actions, len }])?.0)
    }
}

/// Mean squared error terms for one window: returns the loss and the
/// per-element weight `1 / N` used in its gradient.
fn loss_terms<T: Real>(
    ps: &[T],
    pa: &[T],
    w: &Window,
    m: &MaskSpec,
    mode: LossMode,
    ds: usize,
    da: usize,
) -> (f64, f64) {
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 0..w.len {
        if mode == LossMode::Total || !m.state_visible[t] {
            for k in 0..ds {
                let e = ps[t * ds + k].f64() - w.states[t * ds + k] as f64;
                sum += e * e;
            }
            count += ds;
        }
        if mode == LossMode::Total || !m.action_visible[t] {
            for k in 0..da {
                let e = pa[t * da + k].f64() - w.actions[t * da + k] as f64;
                sum += e * e;
            }
            count += da;
        }
    }
    if count == 0 {
        (0.0, 0.0)
    } else {
        (sum / count as f64, 1.0 / count as f64)
    }
}

/// Reconstruction loss of one window. `Total` pools every state and action
/// coordinate into one mean; `Masked` restricts the mean to masked slots and
/// is 0 when nothing is masked.
pub fn loss<T: Real>(recon: &Reconstruction<T>, window: &Window, mask: &MaskSpec, mode: LossMode) -> f64 {
    let ds = window.states.len() / window.len;
    let da = window.actions.len() / window.len;
    loss_terms(&recon.pred_states, &recon.pred_actions, window, mask, mode, ds, da).0
}

impl ModelParams<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.cfg, self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = checkpoint::decode(bytes)?;
        Self::from_raw(&raw)
    }

    pub fn from_raw(raw: &checkpoint::RawCheckpoint) -> Result<Self> {
        let cfg: ModelConfig = raw.config()?;
        cfg.validate().map_err(|e| FormatError::Metadata(e.to_string()))?;
        let mut p = Self::init(&cfg, 0)?;
        raw.load_into(&mut p)?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        checkpoint::write(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_raw(&checkpoint::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{mask_with_ratio, RatioSet};
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            state_dim: 4,
            action_dim: 2,
            hidden_dim: 16,
            n_heads: 2,
            n_encoder_layers: 2,
            n_decoder_layers: 1,
            train_context_len: 8,
            dropout: 0.0,
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
    fn positions_interpolate_beyond_training_length() {
        assert_eq!(position_indices(64, 64)[10], 10.0);
        assert_eq!(position_indices(128, 64)[127], 63.0);
        assert_eq!(position_indices(1, 64), vec![0.0]);
        let p = position_indices(65, 32);
        assert!(p.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn sinusoid_at_origin() {
        let s = sinusoid(0.0, 6);
        assert_eq!(s, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_cfg();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c = tiny_cfg();
        c.n_decoder_layers = 0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::desk(4, 2).validate().is_ok());
        assert!(ModelConfig::paper(4, 2).validate().is_ok());
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let a = ModelParams::<f32>::init(&tiny_cfg(), 3).unwrap();
        let b = ModelParams::<f32>::init(&tiny_cfg(), 3).unwrap();
        let c = ModelParams::<f32>::init(&tiny_cfg(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (name, t) in a.named() {
            if name.ends_with(".bias") {
                assert!(t.data.iter().all(|&v| v == 0.0), "{name}");
            }
            if name.ends_with(".gain") {
                assert!(t.data.iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with(".weight") {
                assert!(t.data.iter().all(|&v| v.abs() <= 0.04), "{name}");
            }
        }
    }

    #[test]
    fn zero_output_heads_reconstruct_zero() {
        let mut p = ModelParams::<f32>::init(&tiny_cfg(), 0).unwrap();
        for head in [&mut p.state_head, &mut p.action_head] {
            let last = head.layers.last_mut().unwrap();
            last.weight.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let w = window(5, 1);
        let r = p.forward_masked(&w, &MaskSpec::all_visible(5)).unwrap();
        assert!(r.pred_states.iter().chain(&r.pred_actions).all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruction_shapes() {
        let p = ModelParams::<f32>::init(&tiny_cfg(), 0).unwrap();
        let w = window(8, 2);
        let m = mask_with_ratio(8, 0.5, &mut rng_from(&[0]));
        let r = p.forward_masked(&w, &m).unwrap();
        assert_eq!((r.pred_states.len(), r.pred_actions.len()), (32, 16));
        assert!(p.forward_masked(&w, &MaskSpec::all_visible(7)).is_err());
    }

    #[test]
    fn masked_values_never_matter() {
        let p = ModelParams::<f32>::init(&tiny_cfg(), 1).unwrap();
        let w = window(10, 3);
        let m = mask_with_ratio(10, 0.55, &mut rng_from(&[5]));
        let base = p.forward_masked(&w, &m).unwrap();
        let mut garbage = w.clone();
        for t in 0..10 {
            if !m.state_visible[t] {
                garbage.states[t * 4..t * 4 + 4].copy_from_slice(&[1e3, -7.0, f32::MAX, 0.5]);
            }
            if !m.action_visible[t] {
                garbage.actions[t * 2..t * 2 + 2].copy_from_slice(&[-1e6, 42.0]);
            }
        }
        assert_eq!(p.forward_masked(&garbage, &m).unwrap(), base);
    }

    #[test]
    fn batching_matches_single_windows() {
        let p = ModelParams::<f64>::init(&tiny_cfg(), 2).unwrap();
        let ws = [window(6, 1), window(9, 2)];
        let ms = [
            mask_with_ratio(6, 0.35, &mut rng_from(&[1])),
            mask_with_ratio(9, 0.75, &mut rng_from(&[2])),
        ];
        let batch: Vec<_> = ws.iter().zip(&ms).collect();
        let out = p.forward_masked_batch(&batch).unwrap();
        for (k, (w, m)) in batch.iter().enumerate() {
            let single = p.forward_masked(w, m).unwrap();
            for (a, b) in single.pred_states.iter().zip(&out[k].pred_states) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_order_does_not_matter() {
        let p = ModelParams::<f32>::init(&tiny_cfg(), 4).unwrap();
        let w = window(12, 6);
        let m = mask_with_ratio(12, 0.35, &mut rng_from(&[8]));
        let base = p.forward_masked(&w, &m).unwrap();
        for seed in 0..3 {
            let shuffled = p.forward_masked_shuffled(&w, &m, seed).unwrap();
            for (a, b) in base
                .pred_states
                .iter()
                .chain(&base.pred_actions)
                .zip(shuffled.pred_states.iter().chain(&shuffled.pred_actions))
            {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn loss_definitions() {
        let w = window(2, 0);
        let exact = Reconstruction {
            pred_states: w.states.clone(),
            pred_actions: w.actions.clone(),
            len: 2,
        };
        let m = mask_with_ratio(2, 0.5, &mut rng_from(&[0]));
        assert_eq!(loss(&exact, &w, &m, LossMode::Total), 0.0);
        assert_eq!(loss(&exact, &w, &m, LossMode::Masked), 0.0);

        let zeros = Window {
            states: vec![0.0; 8],
            actions: vec![0.0; 4],
            ..w.clone()
        };
        let ones = Reconstruction {
            pred_states: vec![1.0f32; 8],
            pred_actions: vec![1.0; 4],
            len: 2,
        };
        assert_eq!(loss(&ones, &zeros, &m, LossMode::Total), 1.0);

        // Only s₁ masked, error 2 on each of its coordinates.
        let only_s1 = MaskSpec {
            state_visible: vec![true, false],
            action_visible: vec![true, true],
        };
        let mut r = Reconstruction {
            pred_states: vec![0.0f32; 8],
            pred_actions: vec![0.0; 4],
            len: 2,
        };
        r.pred_states[4..8].copy_from_slice(&[2.0; 4]);
        assert_eq!(loss(&r, &zeros, &only_s1, LossMode::Masked), 4.0);
        let total = 4.0 * 4.0 / (2.0 * (4.0 + 2.0));
        assert!((loss(&r, &zeros, &only_s1, LossMode::Total) - total).abs() < 1e-12);
        assert_eq!(loss(&r, &zeros, &MaskSpec::all_visible(2), LossMode::Masked), 0.0);
    }

    #[test]
    fn gradient_of_repeated_sample_equals_single() {
        let p = ModelParams::<f64>::init(&tiny_cfg(), 5).unwrap();
        let w = window(6, 9);
        let m = mask_with_ratio(6, 0.55, &mut rng_from(&[3]));
        let (l1, g1) = p.gradients(&[(&w, &m)], LossMode::Total).unwrap();
        let (l3, g3) = p.gradients(&[(&w, &m), (&w, &m), (&w, &m)], LossMode::Total).unwrap();
        assert!((l1 - l3).abs() < 1e-12);
        for (a, b) in g1.flat().iter().zip(g3.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_constant_loss_is_zero() {
        // Masked loss with nothing masked is identically zero.
        let p = ModelParams::<f64>::init(&tiny_cfg(), 5).unwrap();
        let w = window(4, 1);
        let (l, g) = p
            .gradients(&[(&w, &MaskSpec::all_visible(4))], LossMode::Masked)
            .unwrap();
        assert_eq!(l, 0.0);
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_batch_rejected() {
        let p = ModelParams::<f32>::init(&tiny_cfg(), 0).unwrap();
        assert!(p.gradients(&[], LossMode::Total).is_err());
    }

    #[test]
    fn causal_prefix_unaffected_by_later_tokens() {
        let p = ModelParams::<f32>::init(&tiny_cfg(), 6).unwrap();
        let w = window(5, 4);
        let base = p.forward_causal(&w.states, &w.actions, false).unwrap();
        // Interleaved index 5 is a₂.
        let mut pert = w.clone();
        pert.actions[4] += 3.0;
        let moved = p.forward_causal(&pert.states, &pert.actions, false).unwrap();
        let h = 16;
        assert_eq!(base[..5 * h], moved[..5 * h]);
        assert_ne!(base[5 * h..6 * h], moved[5 * h..6 * h]);
    }

    #[test]
    fn causal_single_state() {
        let p = ModelParams::<f32>::init(&tiny_cfg(), 6).unwrap();
        let f = p.forward_causal(&[0.1, 0.2, 0.3, 0.4], &[0.5, 0.5], true).unwrap();
        assert_eq!(f.len(), 16);
        let g = p.forward_causal(&[0.1, 0.2, 0.3, 0.4], &[], true).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ModelParams::<f32>::init(&tiny_cfg(), 7).unwrap();
        let bytes = p.to_bytes();
        let back = ModelParams::from_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_bytes(), bytes);
        assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn ratio_sampled_training_batch_has_finite_loss() {
        let p = ModelParams::<f32>::init(&tiny_cfg(), 7).unwrap();
        let mut rng = rng_from(&[1]);
        let ws: Vec<Window> = (0..4).map(|k| window(8, k)).collect();
        let ms: Vec<MaskSpec> = (0..4)
            .map(|_| crate::masking::sample_mask_spec(8, &RatioSet::default(), &mut rng))
            .collect();
        let batch: Vec<_> = ws.iter().zip(&ms).collect();
        let (l, g) = p.gradients(&batch, LossMode::Total).unwrap();
        assert!(l.is_finite() && g.all_finite());
    }
}
