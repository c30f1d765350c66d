//! Differentiable operators.
//!
//! Every public function takes `Var` operands, validates shapes, computes the
//! value eagerly, and records a backward closure via `autograd::record`. The
//! closures work on plain tensors through the same slice kernels the forward
//! pass uses; they never create tape nodes.

pub mod conv;
pub mod deform;
pub mod elementwise;
pub mod matmul;
pub mod norm;
pub mod pool;
pub mod reduce;
pub mod shape;

pub use conv::{conv2d, linear};
pub use deform::{bilinear_sample, deform_conv2d};
pub use elementwise::{add, dropout, mul, relu, rsqrt_shift, scale, sigmoid, sub};
pub use matmul::{bmm, bmm_nt, matmul};
pub use norm::{batch_norm, BatchNormMode, BatchNormOut};
pub use pool::adaptive_avg_pool;
pub use reduce::{mean, population_variance, softmax_rows, sum, variance_per_item};
pub use shape::{
    channel_shuffle, concat, narrow, nchw_to_tokens, pixel_shuffle, pixel_unshuffle, reshape,
    tokens_to_nchw,
};

use crate::error::{PbanError, Result};

pub(crate) fn require_same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(PbanError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn require_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(PbanError::Dimension {
            op,
            msg: format!("expected rank {rank}, got shape {shape:?}"),
        });
    }
    Ok(())
}

/// Output shape of an elementwise broadcast between equal-rank shapes where
/// each axis extent must match or be 1 on one side.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(PbanError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    let mut out = Vec::with_capacity(a.len());
    for (&da, &db) in a.iter().zip(b) {
        if da == db || db == 1 {
            out.push(da.max(db));
        } else if da == 1 {
            out.push(db);
        } else {
            return Err(PbanError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Row-major strides of `shape` as seen from broadcast result `out`:
/// axes of extent 1 that stretch get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let real = crate::tensor::strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(real)
        .map(|((&s, &o), r)| if s == o { r } else { debug_assert_eq!(s, 1); 0 })
        .collect()
}

/// Visits every index of `shape` in row-major order, passing the flat output
/// index plus offsets into two (possibly broadcast) operands.
pub(crate) fn walk2(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..n {
        f(flat, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * shape[ax];
            ob -= sb[ax] * shape[ax];
        }
    }
}
