//! Pointwise operators: arithmetic, activations, dropout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{record, Var};
use crate::error::{PbanError, Result};
use crate::tensor::{Scalar, Tensor};

use super::{broadcast_shape, broadcast_strides, require_same_shape, walk2};

fn zip_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same-shape zip")
}

/// Elementwise sum; shapes must match exactly.
pub fn add<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    require_same_shape("add", a.shape(), b.shape())?;
    let value = zip_same(a.value(), b.value(), |x, y| x + y);
    record("add", value, &[a, b], |g, _| {
        vec![Some(g.clone()), Some(g.clone())]
    })
}

/// Elementwise difference; shapes must match exactly.
pub fn sub<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    require_same_shape("sub", a.shape(), b.shape())?;
    let value = zip_same(a.value(), b.value(), |x, y| x - y);
    record("sub", value, &[a, b], |g, _| {
        vec![Some(g.clone()), Some(g.map(|v| -v))]
    })
}

/// Elementwise product with equal-rank broadcasting (extent 1 stretches).
pub fn mul<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    if a.shape() == b.shape() {
        let value = zip_same(a.value(), b.value(), |x, y| x * y);
        let (av, bv) = (a.value().clone(), b.value().clone());
        return record("mul", value, &[a, b], move |g, needs| {
            let da = needs[0].then(|| zip_same(g, &bv, |x, y| x * y));
            let db = needs[1].then(|| zip_same(g, &av, |x, y| x * y));
            vec![da, db]
        });
    }
    let out_shape = broadcast_shape("mul", a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut value = Tensor::zeros(&out_shape);
    {
        let dst = value.make_mut();
        let (av, bv) = (a.value().as_slice(), b.value().as_slice());
        walk2(&out_shape, &sa, &sb, |flat, oa, ob| {
            dst[flat] = av[oa] * bv[ob];
        });
    }
    let av = a.value().clone();
    let bv = b.value().clone();
    let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
    record("mul", value, &[a, b], move |g, needs| {
        let gs = g.as_slice();
        let sa = broadcast_strides(&ash, g.shape());
        let sb = broadcast_strides(&bsh, g.shape());
        let da = needs[0].then(|| {
            let mut acc = Tensor::zeros(&ash);
            let dst = acc.make_mut();
            let bs = bv.as_slice();
            walk2(g.shape(), &sa, &sb, |flat, oa, ob| {
                dst[oa] += gs[flat] * bs[ob];
            });
            acc
        });
        let db = needs[1].then(|| {
            let mut acc = Tensor::zeros(&bsh);
            let dst = acc.make_mut();
            let as_ = av.as_slice();
            walk2(g.shape(), &sa, &sb, |flat, oa, ob| {
                dst[ob] += gs[flat] * as_[oa];
            });
            acc
        });
        vec![da, db]
    })
}

/// Multiplication by a compile-time-known constant.
pub fn scale<T: Scalar>(x: &Var<T>, c: T) -> Result<Var<T>> {
    let value = x.value().map(|v| v * c);
    record("scale", value, &[x], move |g, _| vec![Some(g.map(|v| v * c))])
}

/// max(x, 0). The subgradient at exactly zero is taken as 0.
pub fn relu<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let value = x.value().map(|v| if v > T::zero() { v } else { T::zero() });
    let xv = x.value().clone();
    record("relu", value, &[x], move |g, _| {
        let data = g
            .as_slice()
            .iter()
            .zip(xv.as_slice())
            .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
            .collect();
        vec![Some(Tensor::new(g.shape().to_vec(), data).expect("relu grad"))]
    })
}

/// Logistic sigmoid, evaluated in the numerically stable split form.
pub fn sigmoid<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let value = x.value().map(|v| {
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    });
    let y = value.clone();
    record("sigmoid", value, &[x], move |g, _| {
        let data = g
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
            .collect();
        vec![Some(Tensor::new(g.shape().to_vec(), data).expect("sigmoid grad"))]
    })
}

/// 1/sqrt(x + shift), the attention temperature from the logit variance.
pub fn rsqrt_shift<T: Scalar>(x: &Var<T>, shift: T) -> Result<Var<T>> {
    let value = x.value().map(|v| T::one() / (v + shift).sqrt());
    let y = value.clone();
    record("rsqrt_shift", value, &[x], move |g, _| {
        let half = T::from_f64(0.5);
        let data = g
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(&gv, &yv)| -half * gv * yv * yv * yv)
            .collect();
        vec![Some(Tensor::new(g.shape().to_vec(), data).expect("rsqrt grad"))]
    })
}

/// Inverted dropout. Training mode zeroes each element with probability `p`
/// and scales survivors by 1/(1-p); eval mode is the identity. The mask is
/// drawn from the caller's stream, making the op deterministic given a seed.
pub fn dropout<T: Scalar>(x: &Var<T>, p: f64, train: bool, rng: &mut ChaCha8Rng) -> Result<Var<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(PbanError::Parameter(format!(
            "dropout probability must lie in [0,1), got {p}"
        )));
    }
    if !train || p == 0.0 {
        return Ok(x.clone());
    }
    let keep_scale = T::from_f64(1.0 / (1.0 - p));
    let mask = Tensor::from_fn(x.shape(), |_| {
        if rng.gen::<f64>() >= p {
            keep_scale
        } else {
            T::zero()
        }
    });
    let value = zip_same(x.value(), &mask, |v, m| v * m);
    record("dropout", value, &[x], move |g, _| {
        vec![Some(zip_same(g, &mask, |gv, m| gv * m))]
    })
}
