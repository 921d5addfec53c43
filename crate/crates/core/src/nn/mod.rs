//! A small dense neural-network toolkit with hand-written backward passes.
//!
//! Activations are row-major `[rows × features]` buffers. Every layer's
//! `forward` returns its output plus a cache; `backward` consumes the cache,
//! accumulates parameter gradients into a same-shaped gradient struct and
//! returns the gradient with respect to its input. Sequences of different
//! lengths are stacked along the row axis and delimited by [`Segment`]s.

pub mod attention;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod transformer;

pub use attention::{Attention, AttnMode};
pub use layers::{LayerNorm, Linear, Mlp};
pub use optim::{clip_global_norm, Adam};
pub use params::{ParamTree, ParamsExt};
pub use tensor::{Real, Tensor};
pub use transformer::{Block, Stack};

/// Rows `[start, start + len)` of a stacked activation buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    /// Lays out consecutive segments of the given lengths.
    pub fn pack(lens: impl IntoIterator<Item = usize>) -> Vec<Segment> {
        let mut start = 0;
        lens.into_iter()
            .map(|len| {
                let s = Segment { start, len };
                start += len;
                s
            })
            .collect()
    }
}
