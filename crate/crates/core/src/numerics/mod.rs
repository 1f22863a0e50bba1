//! Dense tensors and reverse-mode automatic differentiation.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Graph, OpKind, Var};
pub use kernels::Mask;
pub use tensor::Tensor;

use crate::error::{OmniError, Result};
use crate::scalar::Scalar;

/// Plain (graph-free) masked attention over single head inputs, used where no
/// gradient is needed.
pub fn masked_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &Mask,
) -> Result<Tensor<T>> {
    let d = q.cols();
    if k.cols() != d || v.shape() != k.shape() || mask.queries != q.rows() || mask.keys != k.rows() {
        return Err(OmniError::dim("masked_attention", q.shape(), k.shape()));
    }
    if let Some(row) = mask.first_empty_row() {
        return Err(OmniError::Config(format!("attention query row {row} has no visible key")));
    }
    let (out, _) = kernels::attention(q.data(), k.data(), v.data(), d, 1, mask);
    Tensor::matrix(q.rows(), d, out)
}
