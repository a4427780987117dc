//! Layers built on the differentiation graph.

mod layers;
mod mask;
mod params;

pub use layers::{
    cross_entropy, dropout, embed, feed_forward, layer_norm, linear, multi_head_attention, sinusoidal_table, Dropout,
    LN_EPS,
};
pub use mask::AttentionMask;
pub use params::{Bound, ParamStore};
