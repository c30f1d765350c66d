//! Views, permutations, and slicing: reshape, token flattening, concat,
//! narrow, pixel shuffle, channel shuffle.

use crate::autograd::{record, Var};
use crate::error::{PbanError, Result};
use crate::tensor::{Scalar, Tensor};

use super::require_rank;

/// Same elements under a new shape; forward and backward are both views.
pub fn reshape<T: Scalar>(x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
    let value = x.value().reshaped(shape)?;
    let orig = x.shape().to_vec();
    record("reshape", value, &[x], move |g, _| {
        vec![Some(g.reshaped(&orig).expect("reshape grad"))]
    })
}

/// [B,C,H,W] -> [B, H*W, C]: one token per pixel, feature width C.
pub fn nchw_to_tokens<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    require_rank("nchw_to_tokens", x.shape(), 4)?;
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let n = h * w;
    let xs = x.value().as_slice();
    let mut data = vec![T::zero(); xs.len()];
    for bi in 0..b {
        for ci in 0..c {
            let src = &xs[(bi * c + ci) * n..(bi * c + ci + 1) * n];
            for (pi, &v) in src.iter().enumerate() {
                data[(bi * n + pi) * c + ci] = v;
            }
        }
    }
    let value = Tensor::new(vec![b, n, c], data)?;
    record("nchw_to_tokens", value, &[x], move |g, _| {
        let gs = g.as_slice();
        let mut out = vec![T::zero(); gs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let dst = &mut out[(bi * c + ci) * n..(bi * c + ci + 1) * n];
                for (pi, d) in dst.iter_mut().enumerate() {
                    *d = gs[(bi * n + pi) * c + ci];
                }
            }
        }
        vec![Some(Tensor::new(vec![b, c, h, w], out).expect("token grad"))]
    })
}

/// [B, H*W, C] -> [B,C,H,W], inverse of `nchw_to_tokens`.
pub fn tokens_to_nchw<T: Scalar>(x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
    require_rank("tokens_to_nchw", x.shape(), 3)?;
    let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if n != h * w {
        return Err(PbanError::Dimension {
            op: "tokens_to_nchw",
            msg: format!("token count {n} does not equal {h}x{w}"),
        });
    }
    let xs = x.value().as_slice();
    let mut data = vec![T::zero(); xs.len()];
    for bi in 0..b {
        for ci in 0..c {
            let dst = &mut data[(bi * c + ci) * n..(bi * c + ci + 1) * n];
            for (pi, d) in dst.iter_mut().enumerate() {
                *d = xs[(bi * n + pi) * c + ci];
            }
        }
    }
    let value = Tensor::new(vec![b, c, h, w], data)?;
    record("tokens_to_nchw", value, &[x], move |g, _| {
        let gs = g.as_slice();
        let mut out = vec![T::zero(); gs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let src = &gs[(bi * c + ci) * n..(bi * c + ci + 1) * n];
                for (pi, &v) in src.iter().enumerate() {
                    out[(bi * n + pi) * c + ci] = v;
                }
            }
        }
        vec![Some(Tensor::new(vec![b, n, c], out).expect("token grad"))]
    })
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(xs: &[&Var<T>], axis: usize) -> Result<Var<T>> {
    if xs.is_empty() {
        return Err(PbanError::Dimension {
            op: "concat",
            msg: "no operands".into(),
        });
    }
    let rank = xs[0].shape().len();
    if axis >= rank {
        return Err(PbanError::Dimension {
            op: "concat",
            msg: format!("axis {axis} out of range for rank {rank}"),
        });
    }
    let mut axis_total = 0;
    for x in xs {
        if x.shape().len() != rank {
            return Err(PbanError::ShapeMismatch {
                op: "concat",
                lhs: xs[0].shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        for (ax, (&da, &db)) in xs[0].shape().iter().zip(x.shape()).enumerate() {
            if ax != axis && da != db {
                return Err(PbanError::ShapeMismatch {
                    op: "concat",
                    lhs: xs[0].shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
        }
        axis_total += x.shape()[axis];
    }
    let mut out_shape = xs[0].shape().to_vec();
    out_shape[axis] = axis_total;
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut data = vec![T::zero(); outer * axis_total * inner];
    let mut base = 0;
    let mut spans = Vec::with_capacity(xs.len());
    for x in xs {
        let len = x.shape()[axis];
        let src = x.value().as_slice();
        let block = len * inner;
        for o in 0..outer {
            let dst_lo = (o * axis_total + base) * inner;
            data[dst_lo..dst_lo + block].copy_from_slice(&src[o * block..(o + 1) * block]);
        }
        spans.push((base, len));
        base += len;
    }
    let value = Tensor::new(out_shape, data)?;
    let operand_shapes: Vec<Vec<usize>> = xs.iter().map(|x| x.shape().to_vec()).collect();
    record("concat", value, xs, move |g, needs| {
        let gs = g.as_slice();
        spans
            .iter()
            .zip(&operand_shapes)
            .zip(needs)
            .map(|(((start, len), shape), &need)| {
                if !need {
                    return None;
                }
                let block = len * inner;
                let mut out = vec![T::zero(); outer * block];
                for o in 0..outer {
                    let src_lo = (o * axis_total + start) * inner;
                    out[o * block..(o + 1) * block]
                        .copy_from_slice(&gs[src_lo..src_lo + block]);
                }
                Some(Tensor::new(shape.clone(), out).expect("concat grad"))
            })
            .collect()
    })
}

/// Contiguous slice `[start, start+len)` along `axis`.
pub fn narrow<T: Scalar>(x: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
    let rank = x.shape().len();
    if axis >= rank {
        return Err(PbanError::Dimension {
            op: "narrow",
            msg: format!("axis {axis} out of range for rank {rank}"),
        });
    }
    let extent = x.shape()[axis];
    if start + len > extent || len == 0 {
        return Err(PbanError::Dimension {
            op: "narrow",
            msg: format!("slice {start}..{} exceeds extent {extent}", start + len),
        });
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let src = x.value().as_slice();
    let block = len * inner;
    let mut data = vec![T::zero(); outer * block];
    for o in 0..outer {
        let src_lo = (o * extent + start) * inner;
        data[o * block..(o + 1) * block].copy_from_slice(&src[src_lo..src_lo + block]);
    }
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let value = Tensor::new(out_shape, data)?;
    let full_shape = x.shape().to_vec();
    record("narrow", value, &[x], move |g, _| {
        let gs = g.as_slice();
        let mut out = Tensor::zeros(&full_shape);
        let dst = out.make_mut();
        for o in 0..outer {
            let dst_lo = (o * extent + start) * inner;
            dst[dst_lo..dst_lo + block].copy_from_slice(&gs[o * block..(o + 1) * block]);
        }
        vec![Some(out)]
    })
}

fn pixel_shuffle_map<T: Scalar>(
    xs: &[T],
    b: usize,
    c_out: usize,
    s: usize,
    h: usize,
    w: usize,
    forward: bool,
) -> Vec<T> {
    // forward: in [B, c_out*s^2, h, w] -> out [B, c_out, s*h, s*w]
    let mut out = vec![T::zero(); xs.len()];
    let (oh, ow) = (s * h, s * w);
    for bi in 0..b {
        for k in 0..c_out {
            for dy in 0..s {
                for dx in 0..s {
                    let ci = k * s * s + dy * s + dx;
                    for i in 0..h {
                        for j in 0..w {
                            let src = (((bi * c_out * s * s) + ci) * h + i) * w + j;
                            let dst = (((bi * c_out) + k) * oh + (s * i + dy)) * ow + (s * j + dx);
                            if forward {
                                out[dst] = xs[src];
                            } else {
                                out[src] = xs[dst];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// [B, c*S^2, H, W] -> [B, c, S*H, S*W] with
/// out[b, k, S*i+dy, S*j+dx] = in[b, k*S^2 + dy*S + dx, i, j].
pub fn pixel_shuffle<T: Scalar>(x: &Var<T>, s: usize) -> Result<Var<T>> {
    require_rank("pixel_shuffle", x.shape(), 4)?;
    if s == 0 {
        return Err(PbanError::Parameter("pixel_shuffle scale must be >= 1".into()));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if c % (s * s) != 0 {
        return Err(PbanError::Dimension {
            op: "pixel_shuffle",
            msg: format!("channels {c} not divisible by {}", s * s),
        });
    }
    let c_out = c / (s * s);
    let data = pixel_shuffle_map(x.value().as_slice(), b, c_out, s, h, w, true);
    let value = Tensor::new(vec![b, c_out, s * h, s * w], data)?;
    let in_shape = x.shape().to_vec();
    record("pixel_shuffle", value, &[x], move |g, _| {
        let data = pixel_shuffle_map(g.as_slice(), b, c_out, s, h, w, false);
        vec![Some(Tensor::new(in_shape.clone(), data).expect("shuffle grad"))]
    })
}

/// [B, c, S*H, S*W] -> [B, c*S^2, H, W], exact inverse of `pixel_shuffle`.
pub fn pixel_unshuffle<T: Scalar>(x: &Var<T>, s: usize) -> Result<Var<T>> {
    require_rank("pixel_unshuffle", x.shape(), 4)?;
    if s == 0 {
        return Err(PbanError::Parameter("pixel_unshuffle scale must be >= 1".into()));
    }
    let (b, c, sh, sw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if sh % s != 0 || sw % s != 0 {
        return Err(PbanError::Dimension {
            op: "pixel_unshuffle",
            msg: format!("spatial {sh}x{sw} not divisible by {s}"),
        });
    }
    let (h, w) = (sh / s, sw / s);
    let data = pixel_shuffle_map(x.value().as_slice(), b, c, s, h, w, false);
    let value = Tensor::new(vec![b, c * s * s, h, w], data)?;
    let in_shape = x.shape().to_vec();
    record("pixel_unshuffle", value, &[x], move |g, _| {
        let data = pixel_shuffle_map(g.as_slice(), b, c, s, h, w, true);
        vec![Some(Tensor::new(in_shape.clone(), data).expect("unshuffle grad"))]
    })
}

/// Channel permutation: view channels as (g, C/g), transpose, flatten.
/// Output channel i reads input channel (i mod g)*(C/g) + i/g.
pub fn channel_shuffle<T: Scalar>(x: &Var<T>, g: usize) -> Result<Var<T>> {
    require_rank("channel_shuffle", x.shape(), 4)?;
    let c = x.shape()[1];
    if g == 0 || c % g != 0 {
        return Err(PbanError::Dimension {
            op: "channel_shuffle",
            msg: format!("groups {g} must divide channels {c}"),
        });
    }
    let per = c / g;
    let perm: Vec<usize> = (0..c).map(|i| (i % g) * per + i / g).collect();
    let (b, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let xs = x.value().as_slice();
    let mut data = vec![T::zero(); xs.len()];
    for bi in 0..b {
        for (co, &ci) in perm.iter().enumerate() {
            let dst_lo = (bi * c + co) * plane;
            let src_lo = (bi * c + ci) * plane;
            data[dst_lo..dst_lo + plane].copy_from_slice(&xs[src_lo..src_lo + plane]);
        }
    }
    let value = Tensor::new(x.shape().to_vec(), data)?;
    let shape = x.shape().to_vec();
    record("channel_shuffle", value, &[x], move |grad, _| {
        let gs = grad.as_slice();
        let mut out = vec![T::zero(); gs.len()];
        for bi in 0..b {
            for (co, &ci) in perm.iter().enumerate() {
                let dst_lo = (bi * c + ci) * plane;
                let src_lo = (bi * c + co) * plane;
                out[dst_lo..dst_lo + plane].copy_from_slice(&gs[src_lo..src_lo + plane]);
            }
        }
        vec![Some(Tensor::new(shape.clone(), out).expect("shuffle grad"))]
    })
}
