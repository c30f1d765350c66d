//! Adaptive average pooling.

use crate::autograd::{record, Var};
use crate::error::{PbanError, Result};
use crate::tensor::{Scalar, Tensor};

/// Window of output cell `i` along an axis of extent `n` pooled to `out`:
/// [floor(i*n/out), ceil((i+1)*n/out)).
fn window(i: usize, n: usize, out: usize) -> (usize, usize) {
    let lo = i * n / out;
    let hi = ((i + 1) * n).div_ceil(out);
    (lo, hi)
}

/// Averages each output cell's input window. Output must not exceed the
/// input spatially; enlargement is a different operation's job.
pub fn adaptive_avg_pool<T: Scalar>(x: &Var<T>, oh: usize, ow: usize) -> Result<Var<T>> {
    super::require_rank("adaptive_avg_pool", x.shape(), 4)?;
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(PbanError::Dimension {
            op: "adaptive_avg_pool",
            msg: format!("target {oh}x{ow} invalid for input {h}x{w}"),
        });
    }
    let xs = x.value().as_slice();
    let plane = h * w;
    let oplane = oh * ow;
    let mut data = vec![T::zero(); b * c * oplane];
    for bc in 0..b * c {
        let src = &xs[bc * plane..(bc + 1) * plane];
        let dst = &mut data[bc * oplane..(bc + 1) * oplane];
        for i in 0..oh {
            let (ylo, yhi) = window(i, h, oh);
            for j in 0..ow {
                let (xlo, xhi) = window(j, w, ow);
                let mut acc = T::zero();
                for y in ylo..yhi {
                    for v in &src[y * w + xlo..y * w + xhi] {
                        acc += *v;
                    }
                }
                let count = T::from_f64(((yhi - ylo) * (xhi - xlo)) as f64);
                dst[i * ow + j] = acc / count;
            }
        }
    }
    let value = Tensor::new(vec![b, c, oh, ow], data)?;
    let in_shape = x.shape().to_vec();
    record("adaptive_avg_pool", value, &[x], move |g, _| {
        let gs = g.as_slice();
        let mut out = Tensor::zeros(&in_shape);
        let dst_all = out.make_mut();
        for bc in 0..b * c {
            let gsrc = &gs[bc * oplane..(bc + 1) * oplane];
            let dst = &mut dst_all[bc * plane..(bc + 1) * plane];
            for i in 0..oh {
                let (ylo, yhi) = window(i, h, oh);
                for j in 0..ow {
                    let (xlo, xhi) = window(j, w, ow);
                    let count = T::from_f64(((yhi - ylo) * (xhi - xlo)) as f64);
                    let share = gsrc[i * ow + j] / count;
                    for y in ylo..yhi {
                        for d in &mut dst[y * w + xlo..y * w + xhi] {
                            *d += share;
                        }
                    }
                }
            }
        }
        vec![Some(out)]
    })
}
