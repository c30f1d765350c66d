//! Reductions and the row softmax.

use crate::autograd::{record, Var};
use crate::error::{PbanError, Result};
use crate::tensor::{Scalar, Tensor};

/// Sum of all elements, rank-0 output.
pub fn sum<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let mut acc = T::zero();
    for &v in x.value().as_slice() {
        acc += v;
    }
    let shape = x.shape().to_vec();
    record("sum", Tensor::scalar(acc), &[x], move |g, _| {
        let gv = g.as_slice()[0];
        vec![Some(Tensor::full(&shape, gv))]
    })
}

/// Arithmetic mean of all elements, rank-0 output.
pub fn mean<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let n = x.value().len();
    if n == 0 {
        return Err(PbanError::Dimension {
            op: "mean",
            msg: "empty tensor".into(),
        });
    }
    super::elementwise::scale(&sum(x)?, T::one() / T::from_f64(n as f64))
}

fn population_var_slice<T: Scalar>(xs: &[T]) -> (T, T) {
    let n = T::from_f64(xs.len() as f64);
    let mut mu = T::zero();
    for &v in xs {
        mu += v;
    }
    mu = mu / n;
    let mut acc = T::zero();
    for &v in xs {
        let d = v - mu;
        acc += d * d;
    }
    (mu, acc / n)
}

/// Population (biased) variance over all elements, rank-0 output.
///
/// d/dx_i = 2(x_i - mean)/n; the mean's own dependence cancels because the
/// centered values sum to zero.
pub fn population_variance<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let n = x.value().len();
    if n == 0 {
        return Err(PbanError::Dimension {
            op: "population_variance",
            msg: "empty tensor".into(),
        });
    }
    let (mu, var) = population_var_slice(x.value().as_slice());
    let xv = x.value().clone();
    record("population_variance", Tensor::scalar(var), &[x], move |g, _| {
        let gv = g.as_slice()[0];
        let inv_n = T::from_f64(2.0 / xv.len() as f64);
        vec![Some(xv.map(|v| gv * inv_n * (v - mu)))]
    })
}

/// Population variance of each leading-axis item over its remaining axes.
/// Input [B, ...] with nonempty items; output [B].
pub fn variance_per_item<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    if x.shape().is_empty() {
        return Err(PbanError::Dimension {
            op: "variance_per_item",
            msg: "input must have a leading batch axis".into(),
        });
    }
    let b = x.shape()[0];
    let item = x.value().len() / b.max(1);
    if b == 0 || item == 0 {
        return Err(PbanError::Dimension {
            op: "variance_per_item",
            msg: format!("empty items in shape {:?}", x.shape()),
        });
    }
    let xs = x.value().as_slice();
    let mut vars = Vec::with_capacity(b);
    let mut mus = Vec::with_capacity(b);
    for bi in 0..b {
        let (mu, var) = population_var_slice(&xs[bi * item..(bi + 1) * item]);
        mus.push(mu);
        vars.push(var);
    }
    let value = Tensor::new(vec![b], vars)?;
    let xv = x.value().clone();
    record("variance_per_item", value, &[x], move |g, _| {
        let gs = g.as_slice();
        let xs = xv.as_slice();
        let two_over_n = T::from_f64(2.0 / item as f64);
        let mut out = Tensor::zeros(xv.shape());
        let dst = out.make_mut();
        for bi in 0..b {
            let coef = gs[bi] * two_over_n;
            for j in 0..item {
                let k = bi * item + j;
                dst[k] = coef * (xs[k] - mus[bi]);
            }
        }
        vec![Some(out)]
    })
}

/// Numerically stable softmax along the last axis.
///
/// Backward per row: dx = y * (g - <g, y>).
pub fn softmax_rows<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let shape = x.shape();
    if shape.is_empty() {
        return Err(PbanError::Dimension {
            op: "softmax_rows",
            msg: "input must have at least one axis".into(),
        });
    }
    let n = shape[shape.len() - 1];
    if n == 0 {
        return Err(PbanError::Dimension {
            op: "softmax_rows",
            msg: "last axis is empty".into(),
        });
    }
    let rows = x.value().len() / n;
    let xs = x.value().as_slice();
    let mut data = vec![T::zero(); xs.len()];
    for r in 0..rows {
        let row = &xs[r * n..(r + 1) * n];
        let dst = &mut data[r * n..(r + 1) * n];
        let mut m = row[0];
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let mut s = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            let e = (v - m).exp();
            *d = e;
            s += e;
        }
        let inv = T::one() / s;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    let value = Tensor::new(shape.to_vec(), data)?;
    let y = value.clone();
    record("softmax_rows", value, &[x], move |g, _| {
        let gs = g.as_slice();
        let ys = y.as_slice();
        let mut out = Tensor::zeros(y.shape());
        let dst = out.make_mut();
        for r in 0..rows {
            let lo = r * n;
            let hi = lo + n;
            let mut dot = T::zero();
            for k in lo..hi {
                dot += gs[k] * ys[k];
            }
            for k in lo..hi {
                dst[k] = ys[k] * (gs[k] - dot);
            }
        }
        vec![Some(out)]
    })
}
