//! Dense and batched matrix products.
//!
//! All kernels accumulate row-wise (axpy form) so the inner loops carry no
//! cross-iteration dependence and vectorize; transposed operands are packed
//! once instead of strided. Products with a transposed right factor are the
//! attention hot path (logits = Q Kᵀ over N = H·W tokens).

use crate::autograd::{record, Var};
use crate::error::{PbanError, Result};
use crate::tensor::{Scalar, Tensor};

/// c[m,n] += a[m,k] * b[k,n]
pub(crate) fn mm_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &ap) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ap * bv;
            }
        }
    }
}

/// c[m,n] += a[k,m]ᵀ * b[k,n]
pub(crate) fn mm_tn_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &ap) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ap * bv;
            }
        }
    }
}

/// out[n,m] = x[m,n]ᵀ
pub(crate) fn transpose2d<T: Scalar>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// c[m,n] += a[m,k] * b[n,k]ᵀ, implemented by packing bᵀ then running `mm_acc`.
pub(crate) fn mm_nt_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    let bt = transpose2d(b, n, k);
    mm_acc(c, a, &bt, m, k, n);
}

fn check2d(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    super::require_rank(op, shape, 2)?;
    Ok((shape[0], shape[1]))
}

fn check3d(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    super::require_rank(op, shape, 3)?;
    Ok((shape[0], shape[1], shape[2]))
}

/// [m,k] x [k,n] -> [m,n]
pub fn matmul<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let (m, k) = check2d("matmul", a.shape())?;
    let (kb, n) = check2d("matmul", b.shape())?;
    if k != kb {
        return Err(PbanError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut value = Tensor::zeros(&[m, n]);
    mm_acc(value.make_mut(), a.value().as_slice(), b.value().as_slice(), m, k, n);
    let av = a.value().clone();
    let bv = b.value().clone();
    record("matmul", value, &[a, b], move |g, needs| {
        let gs = g.as_slice();
        let da = needs[0].then(|| {
            let mut out = Tensor::zeros(&[m, k]);
            mm_nt_acc(out.make_mut(), gs, bv.as_slice(), m, n, k);
            out
        });
        let db = needs[1].then(|| {
            let mut out = Tensor::zeros(&[k, n]);
            mm_tn_acc(out.make_mut(), av.as_slice(), gs, k, m, n);
            out
        });
        vec![da, db]
    })
}

/// [B,m,k] x [B,k,n] -> [B,m,n]
pub fn bmm<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let (ba, m, k) = check3d("bmm", a.shape())?;
    let (bb, kb, n) = check3d("bmm", b.shape())?;
    if ba != bb || k != kb {
        return Err(PbanError::ShapeMismatch {
            op: "bmm",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut value = Tensor::zeros(&[ba, m, n]);
    {
        let dst = value.make_mut();
        let (avs, bvs) = (a.value().as_slice(), b.value().as_slice());
        for bi in 0..ba {
            mm_acc(
                &mut dst[bi * m * n..(bi + 1) * m * n],
                &avs[bi * m * k..(bi + 1) * m * k],
                &bvs[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
            );
        }
    }
    let av = a.value().clone();
    let bv = b.value().clone();
    record("bmm", value, &[a, b], move |g, needs| {
        let gs = g.as_slice();
        let da = needs[0].then(|| {
            let mut out = Tensor::zeros(&[ba, m, k]);
            let dst = out.make_mut();
            for bi in 0..ba {
                mm_nt_acc(
                    &mut dst[bi * m * k..(bi + 1) * m * k],
                    &gs[bi * m * n..(bi + 1) * m * n],
                    &bv.as_slice()[bi * k * n..(bi + 1) * k * n],
                    m,
                    n,
                    k,
                );
            }
            out
        });
        let db = needs[1].then(|| {
            let mut out = Tensor::zeros(&[ba, k, n]);
            let dst = out.make_mut();
            for bi in 0..ba {
                mm_tn_acc(
                    &mut dst[bi * k * n..(bi + 1) * k * n],
                    &av.as_slice()[bi * m * k..(bi + 1) * m * k],
                    &gs[bi * m * n..(bi + 1) * m * n],
                    k,
                    m,
                    n,
                );
            }
            out
        });
        vec![da, db]
    })
}

/// [B,m,k] x [B,n,k]ᵀ -> [B,m,n]; the token-attention logit product.
pub fn bmm_nt<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let (ba, m, k) = check3d("bmm_nt", a.shape())?;
    let (bb, n, kb) = check3d("bmm_nt", b.shape())?;
    if ba != bb || k != kb {
        return Err(PbanError::ShapeMismatch {
            op: "bmm_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut value = Tensor::zeros(&[ba, m, n]);
    {
        let dst = value.make_mut();
        let (avs, bvs) = (a.value().as_slice(), b.value().as_slice());
        for bi in 0..ba {
            mm_nt_acc(
                &mut dst[bi * m * n..(bi + 1) * m * n],
                &avs[bi * m * k..(bi + 1) * m * k],
                &bvs[bi * n * k..(bi + 1) * n * k],
                m,
                k,
                n,
            );
        }
    }
    let av = a.value().clone();
    let bv = b.value().clone();
    record("bmm_nt", value, &[a, b], move |g, needs| {
        let gs = g.as_slice();
        // y = a bᵀ: da = g b; db = gᵀ a.
        let da = needs[0].then(|| {
            let mut out = Tensor::zeros(&[ba, m, k]);
            let dst = out.make_mut();
            for bi in 0..ba {
                mm_acc(
                    &mut dst[bi * m * k..(bi + 1) * m * k],
                    &gs[bi * m * n..(bi + 1) * m * n],
                    &bv.as_slice()[bi * n * k..(bi + 1) * n * k],
                    m,
                    n,
                    k,
                );
            }
            out
        });
        let db = needs[1].then(|| {
            let mut out = Tensor::zeros(&[ba, n, k]);
            let dst = out.make_mut();
            for bi in 0..ba {
                mm_tn_acc(
                    &mut dst[bi * n * k..(bi + 1) * n * k],
                    &gs[bi * m * n..(bi + 1) * m * n],
                    &av.as_slice()[bi * m * k..(bi + 1) * m * k],
                    n,
                    m,
                    k,
                );
            }
            out
        });
        vec![da, db]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{backward, Tape};
    use crate::ops::reduce::sum;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_2x2_oracle() {
        let a = Var::constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = Var::constant(t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let y = matmul(&a, &b).unwrap();
        assert_eq!(y.value().as_slice(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Var::constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = Var::constant(Tensor::<f64>::zeros(&[2, 2]));
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_gradients_match_hand_formulas() {
        let tape = Tape::new();
        let a = tape.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let s = sum(&matmul(&a, &b).unwrap()).unwrap();
        let grads = backward(&s).unwrap();
        // dA = 1 Bᵀ: rows = column sums of Bᵀ rows = [b00+b01, b10+b11].
        assert_eq!(grads.get(&a).unwrap().as_slice(), &[11.0, 15.0, 11.0, 15.0]);
        // dB = Aᵀ 1: rows = column sums of A.
        assert_eq!(grads.get(&b).unwrap().as_slice(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn bmm_matches_per_item_matmul() {
        let a = Var::constant(t64(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = Var::constant(t64(&[2, 2, 1], &[10.0, 20.0, 30.0, 40.0]));
        let y = bmm(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 1, 1]);
        assert_eq!(y.value().as_slice(), &[50.0, 250.0]);
    }

    #[test]
    fn bmm_nt_equals_bmm_of_transposed() {
        let a = Var::constant(t64(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let bt = t64(&[1, 2, 3], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let y = bmm_nt(&a, &Var::constant(bt.clone())).unwrap();
        // b (as [3,2]) = transpose of bt rows.
        let b = Var::constant(t64(&[1, 3, 2], &[7.0, 10.0, 8.0, 11.0, 9.0, 12.0]));
        let y2 = bmm(&a, &b).unwrap();
        assert_eq!(y.value(), y2.value());
    }

    #[test]
    fn bmm_nt_gradients_flow_to_both_sides() {
        let tape = Tape::new();
        let a = tape.leaf(t64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t64(&[1, 2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let s = sum(&bmm_nt(&a, &b).unwrap()).unwrap();
        let grads = backward(&s).unwrap();
        // y = a bᵀ, dy = 1: da = 1·b = column sums of b per k.
        assert_eq!(grads.get(&a).unwrap().as_slice(), &[12.0, 14.0, 12.0, 14.0]);
        assert_eq!(grads.get(&b).unwrap().as_slice(), &[4.0, 6.0, 4.0, 6.0]);
    }
}
