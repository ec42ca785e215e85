//! Numeric kernel: dense f64 tensors, a reverse-mode tape, named parameters,
//! masked attention, layer builders, and the finite-difference checker.

pub mod attention;
pub mod check;
pub mod linear;
pub mod param;
pub mod tape;
pub mod tensor;

pub use attention::masked_scaled_dot_attention;
pub use check::{finite_difference_check, FdReport};
pub use linear::{GeluMlp, Linear, Norm, INIT_STD};
pub use param::{Param, ParamId, ParamStore};
pub use tape::{NodeId, Tape, LAYER_NORM_EPS};
pub use tensor::{gelu_scalar, sigmoid_scalar, Tensor};

/// [0..n, 0..n, ...] b times — gather indices that tile an n-row tensor
/// into b sample blocks.
pub(crate) fn tile_idx(b: usize, n: usize) -> Vec<usize> {
    (0..b).flat_map(|_| 0..n).collect()
}

/// [0×n, 1×n, ...] — gather indices that expand a [b, d] per-sample tensor
/// to n rows per sample.
pub(crate) fn expand_idx(b: usize, n: usize) -> Vec<usize> {
    (0..b).flat_map(|s| std::iter::repeat(s).take(n)).collect()
}
