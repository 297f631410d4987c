//! Dense tensors, a differentiation tape, Transformer layers and Adam.

mod adam;
mod check;
mod graph;
mod layers;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use check::{analytic_grads, compare_numeric, finite_diff_check, CheckConfig};
pub use graph::{conv_out_len, log_softmax, log_sum_exp, softmax_in_place, Grads, Graph, Mask, Var};
pub use layers::{
    positions, Conv1d, Embedding, FeedForward, LayerDims, LayerNorm, Linear, MultiHeadAttention, TransformerLayer,
    TransformerStack,
};
pub use params::{glorot, uniform, ParamId, ParamStore};
pub use tensor::{ShapeError, Tensor};
