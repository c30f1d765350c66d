//! Grouped 2-D convolution (stride 1, same padding) and the linear layer.

use crate::autograd::{record, Var};
use crate::error::{PbanError, Result};
use crate::tensor::{Scalar, Tensor};

use super::matmul::{mm_acc, mm_tn_acc, transpose2d};

/// Dot product with four accumulators; used where the summation order is
/// free (gradients), since a strict sequential reduction cannot vectorize.
pub(crate) fn dot_unrolled<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero(), T::zero());
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

pub(crate) fn axpy<T: Scalar>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[derive(Clone, Copy)]
pub(crate) struct ConvDims {
    pub b: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub groups: usize,
}

pub(crate) fn check_conv_shapes(
    op: &'static str,
    x: &[usize],
    w: &[usize],
    bias: &[usize],
    groups: usize,
) -> Result<ConvDims> {
    super::require_rank(op, x, 4)?;
    super::require_rank(op, w, 4)?;
    super::require_rank(op, bias, 1)?;
    let (b, c_in, h, wd) = (x[0], x[1], x[2], x[3]);
    let (c_out, c_in_g, kh, kw) = (w[0], w[1], w[2], w[3]);
    if kh != kw || kh % 2 == 0 {
        return Err(PbanError::Parameter(format!(
            "{op}: kernel must be square with odd edge, got {kh}x{kw}"
        )));
    }
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        return Err(PbanError::Parameter(format!(
            "{op}: groups {groups} must divide in/out channels {c_in}/{c_out}"
        )));
    }
    if c_in_g != c_in / groups {
        return Err(PbanError::Dimension {
            op,
            msg: format!(
                "weight expects {c_in_g} channels per group, input supplies {}",
                c_in / groups
            ),
        });
    }
    if bias[0] != c_out {
        return Err(PbanError::Dimension {
            op,
            msg: format!("bias length {} does not match out channels {c_out}", bias[0]),
        });
    }
    Ok(ConvDims {
        b,
        c_in,
        c_out,
        h,
        w: wd,
        k: kh,
        pad: (kh - 1) / 2,
        groups,
    })
}

fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], d: &ConvDims) -> Vec<T> {
    let ConvDims { b, c_in, c_out, h, w: wd, k, pad, groups } = *d;
    let (cg_in, cg_out) = (c_in / groups, c_out / groups);
    let plane = h * wd;
    let mut out = vec![T::zero(); b * c_out * plane];
    for bi in 0..b {
        for g in 0..groups {
            for ocl in 0..cg_out {
                let oc = g * cg_out + ocl;
                let out_plane = &mut out[(bi * c_out + oc) * plane..(bi * c_out + oc + 1) * plane];
                out_plane.fill(bias[oc]);
                for icl in 0..cg_in {
                    let ic = g * cg_in + icl;
                    let x_plane = &x[(bi * c_in + ic) * plane..(bi * c_in + ic + 1) * plane];
                    let w_base = ((oc * cg_in) + icl) * k * k;
                    for ky in 0..k {
                        let dy = ky as isize - pad as isize;
                        let oh_lo = (-dy).max(0) as usize;
                        let oh_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
                        for kx in 0..k {
                            let dx = kx as isize - pad as isize;
                            let ow_lo = (-dx).max(0) as usize;
                            let ow_hi = ((wd as isize - dx).min(wd as isize)).max(0) as usize;
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let wv = w[w_base + ky * k + kx];
                            for oh in oh_lo..oh_hi {
                                let ih = (oh as isize + dy) as usize;
                                let dst = &mut out_plane[oh * wd + ow_lo..oh * wd + ow_hi];
                                let src_lo = (ih * wd) as isize + ow_lo as isize + dx;
                                let src = &x_plane[src_lo as usize..src_lo as usize + (ow_hi - ow_lo)];
                                axpy(dst, wv, src);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_x<T: Scalar>(g: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
    let ConvDims { b, c_in, c_out, h, w: wd, k, pad, groups } = *d;
    let (cg_in, cg_out) = (c_in / groups, c_out / groups);
    let plane = h * wd;
    let mut dx = vec![T::zero(); b * c_in * plane];
    for bi in 0..b {
        for gr in 0..groups {
            for ocl in 0..cg_out {
                let oc = gr * cg_out + ocl;
                let g_plane = &g[(bi * c_out + oc) * plane..(bi * c_out + oc + 1) * plane];
                for icl in 0..cg_in {
                    let ic = gr * cg_in + icl;
                    let dx_plane =
                        &mut dx[(bi * c_in + ic) * plane..(bi * c_in + ic + 1) * plane];
                    let w_base = ((oc * cg_in) + icl) * k * k;
                    for ky in 0..k {
                        let dy = ky as isize - pad as isize;
                        let oh_lo = (-dy).max(0) as usize;
                        let oh_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
                        for kx in 0..k {
                            let dx_off = kx as isize - pad as isize;
                            let ow_lo = (-dx_off).max(0) as usize;
                            let ow_hi = ((wd as isize - dx_off).min(wd as isize)).max(0) as usize;
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let wv = w[w_base + ky * k + kx];
                            for oh in oh_lo..oh_hi {
                                let ih = (oh as isize + dy) as usize;
                                let src = &g_plane[oh * wd + ow_lo..oh * wd + ow_hi];
                                let dst_lo = (ih * wd) as isize + ow_lo as isize + dx_off;
                                let dst = &mut dx_plane
                                    [dst_lo as usize..dst_lo as usize + (ow_hi - ow_lo)];
                                axpy(dst, wv, src);
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv2d_backward_w<T: Scalar>(g: &[T], x: &[T], d: &ConvDims) -> Vec<T> {
    let ConvDims { b, c_in, c_out, h, w: wd, k, pad, groups } = *d;
    let (cg_in, cg_out) = (c_in / groups, c_out / groups);
    let plane = h * wd;
    let mut dw = vec![T::zero(); c_out * cg_in * k * k];
    for bi in 0..b {
        for gr in 0..groups {
            for ocl in 0..cg_out {
                let oc = gr * cg_out + ocl;
                let g_plane = &g[(bi * c_out + oc) * plane..(bi * c_out + oc + 1) * plane];
                for icl in 0..cg_in {
                    let ic = gr * cg_in + icl;
                    let x_plane = &x[(bi * c_in + ic) * plane..(bi * c_in + ic + 1) * plane];
                    let w_base = ((oc * cg_in) + icl) * k * k;
                    for ky in 0..k {
                        let dy = ky as isize - pad as isize;
                        let oh_lo = (-dy).max(0) as usize;
                        let oh_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
                        for kx in 0..k {
                            let dx_off = kx as isize - pad as isize;
                            let ow_lo = (-dx_off).max(0) as usize;
                            let ow_hi = ((wd as isize - dx_off).min(wd as isize)).max(0) as usize;
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let mut acc = T::zero();
                            for oh in oh_lo..oh_hi {
                                let ih = (oh as isize + dy) as usize;
                                let grow = &g_plane[oh * wd + ow_lo..oh * wd + ow_hi];
                                let src_lo = (ih * wd) as isize + ow_lo as isize + dx_off;
                                let xrow = &x_plane
                                    [src_lo as usize..src_lo as usize + (ow_hi - ow_lo)];
                                acc += dot_unrolled(grow, xrow);
                            }
                            dw[w_base + ky * k + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    dw
}

/// Grouped cross-correlation, stride 1, zero padding (k-1)/2 so the spatial
/// size is preserved. Weights [C_out, C_in/groups, k, k], bias [C_out].
pub fn conv2d<T: Scalar>(
    x: &Var<T>,
    w: &Var<T>,
    bias: &Var<T>,
    groups: usize,
) -> Result<Var<T>> {
    let d = check_conv_shapes("conv2d", x.shape(), w.shape(), bias.shape(), groups)?;
    let data = conv2d_forward(x.value().as_slice(), w.value().as_slice(), bias.value().as_slice(), &d);
    let value = Tensor::new(vec![d.b, d.c_out, d.h, d.w], data)?;
    let xv = x.value().clone();
    let wv = w.value().clone();
    record("conv2d", value, &[x, w, bias], move |g, needs| {
        let gs = g.as_slice();
        let dx = needs[0].then(|| {
            Tensor::new(xv.shape().to_vec(), conv2d_backward_x(gs, wv.as_slice(), &d))
                .expect("conv dx")
        });
        let dw = needs[1].then(|| {
            Tensor::new(wv.shape().to_vec(), conv2d_backward_w(gs, xv.as_slice(), &d))
                .expect("conv dw")
        });
        let db = needs[2].then(|| {
            let plane = d.h * d.w;
            let mut out = Tensor::zeros(&[d.c_out]);
            let dst = out.make_mut();
            for bi in 0..d.b {
                for oc in 0..d.c_out {
                    let lo = (bi * d.c_out + oc) * plane;
                    let mut acc = T::zero();
                    for &v in &gs[lo..lo + plane] {
                        acc += v;
                    }
                    dst[oc] += acc;
                }
            }
            out
        });
        vec![dx, dw, db]
    })
}

/// Affine map y = x Wᵀ + b with x [B,d], W [d_out,d], b [d_out].
pub fn linear<T: Scalar>(x: &Var<T>, w: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
    super::require_rank("linear", x.shape(), 2)?;
    super::require_rank("linear", w.shape(), 2)?;
    super::require_rank("linear", bias.shape(), 1)?;
    let (b, d_in) = (x.shape()[0], x.shape()[1]);
    let (d_out, d_in_w) = (w.shape()[0], w.shape()[1]);
    if d_in != d_in_w || bias.shape()[0] != d_out {
        return Err(PbanError::Dimension {
            op: "linear",
            msg: format!(
                "x {:?} w {:?} bias {:?} are inconsistent",
                x.shape(),
                w.shape(),
                bias.shape()
            ),
        });
    }
    let mut value = Tensor::zeros(&[b, d_out]);
    {
        let dst = value.make_mut();
        let wt = transpose2d(w.value().as_slice(), d_out, d_in);
        mm_acc(dst, x.value().as_slice(), &wt, b, d_in, d_out);
        for row in 0..b {
            for (dv, &bv) in dst[row * d_out..(row + 1) * d_out]
                .iter_mut()
                .zip(bias.value().as_slice())
            {
                *dv += bv;
            }
        }
    }
    let xv = x.value().clone();
    let wv = w.value().clone();
    record("linear", value, &[x, w, bias], move |g, needs| {
        let gs = g.as_slice();
        let dx = needs[0].then(|| {
            let mut out = Tensor::zeros(&[b, d_in]);
            mm_acc(out.make_mut(), gs, wv.as_slice(), b, d_out, d_in);
            out
        });
        let dw = needs[1].then(|| {
            // dW = gᵀ x: [d_out, d_in].
            let mut out = Tensor::zeros(&[d_out, d_in]);
            mm_tn_acc(out.make_mut(), gs, xv.as_slice(), d_out, b, d_in);
            out
        });
        let db = needs[2].then(|| {
            let mut out = Tensor::zeros(&[d_out]);
            let dst = out.make_mut();
            for row in 0..b {
                for (d, &gv) in dst.iter_mut().zip(&gs[row * d_out..(row + 1) * d_out]) {
                    *d += gv;
                }
            }
            out
        });
        vec![dx, dw, db]
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
    fn one_by_one_kernel_is_scalar_product() {
        // 1x1 kernel, w=2, b=0, x=3 on a 1x1 image -> 6.
        let x = Var::constant(t64(&[1, 1, 1, 1], &[3.0]));
        let w = Var::constant(t64(&[1, 1, 1, 1], &[2.0]));
        let b = Var::constant(t64(&[1], &[0.0]));
        let y = conv2d(&x, &w, &b, 1).unwrap();
        assert_eq!(y.value().as_slice(), &[6.0]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Var::constant(Tensor::from_fn(&[1, 1, 4, 5], |i| (i as f64).sin()));
        let mut wk = vec![0.0; 9];
        wk[4] = 1.0;
        let w = Var::constant(t64(&[1, 1, 3, 3], &wk));
        let b = Var::constant(t64(&[1], &[0.0]));
        let y = conv2d(&x, &w, &b, 1).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn all_ones_kernel_counts_overlap() {
        // 3x3 ones kernel on a 3x3 ones image: center sees 9, corners see 4.
        let x = Var::constant(t64(&[1, 1, 3, 3], &[1.0; 9]));
        let w = Var::constant(t64(&[1, 1, 3, 3], &[1.0; 9]));
        let b = Var::constant(t64(&[1], &[0.0]));
        let y = conv2d(&x, &w, &b, 1).unwrap();
        let v = y.value().as_slice();
        assert_eq!(v[4], 9.0);
        assert_eq!(v[0], 4.0);
        assert_eq!(v[2], 4.0);
        assert_eq!(v[6], 4.0);
        assert_eq!(v[8], 4.0);
        assert_eq!(v[1], 6.0);
    }

    #[test]
    fn grouped_equals_independent_slices() {
        // groups=2 must equal two separate convs over channel halves.
        let x_data: Vec<f64> = (0..2 * 4 * 3 * 3).map(|i| (i as f64 * 0.37).cos()).collect();
        let w_data: Vec<f64> = (0..4 * 2 * 9).map(|i| (i as f64 * 0.11).sin()).collect();
        let x = Var::constant(t64(&[2, 4, 3, 3], &x_data));
        let w = Var::constant(t64(&[4, 2, 3, 3], &w_data));
        let b = Var::constant(t64(&[4], &[0.1, -0.2, 0.3, -0.4]));
        let y = conv2d(&x, &w, &b, 2).unwrap();

        // Slice channels by hand.
        for g in 0..2 {
            let xg = {
                let mut d = Vec::new();
                for bi in 0..2 {
                    for c in (g * 2)..(g * 2 + 2) {
                        d.extend_from_slice(
                            &x_data[(bi * 4 + c) * 9..(bi * 4 + c + 1) * 9],
                        );
                    }
                }
                Var::constant(t64(&[2, 2, 3, 3], &d))
            };
            let wg = Var::constant(t64(&[2, 2, 3, 3], &w_data[g * 2 * 2 * 9..(g + 1) * 2 * 2 * 9]));
            let bg = Var::constant(t64(
                &[2],
                &b.value().as_slice()[g * 2..(g + 1) * 2],
            ));
            let yg = conv2d(&xg, &wg, &bg, 1).unwrap();
            for bi in 0..2 {
                for cl in 0..2 {
                    let full = &y.value().as_slice()
                        [(bi * 4 + g * 2 + cl) * 9..(bi * 4 + g * 2 + cl + 1) * 9];
                    let part =
                        &yg.value().as_slice()[(bi * 2 + cl) * 9..(bi * 2 + cl + 1) * 9];
                    assert_eq!(full, part);
                }
            }
        }
    }

    #[test]
    fn conv_bias_gradient_counts_pixels() {
        let tape = Tape::new();
        let x = Var::constant(Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64));
        let w = Var::constant(t64(&[1, 1, 1, 1], &[1.0]));
        let b = tape.leaf(t64(&[1], &[0.0]));
        let s = sum(&conv2d(&x, &w, &b, 1).unwrap()).unwrap();
        let grads = backward(&s).unwrap();
        // Bias feeds every output pixel: 2 batches x 9 pixels.
        assert_eq!(grads.get(&b).unwrap().as_slice(), &[18.0]);
    }

    #[test]
    fn linear_identity_and_dot() {
        let x = Var::constant(t64(&[1, 2], &[1.0, 1.0]));
        let w = Var::constant(t64(&[1, 2], &[1.0, 1.0]));
        let b = Var::constant(t64(&[1], &[0.0]));
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.value().as_slice(), &[2.0]);

        let w_id = Var::constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b2 = Var::constant(t64(&[2], &[0.0, 0.0]));
        let x2 = Var::constant(t64(&[1, 2], &[3.0, 4.0]));
        assert_eq!(
            linear(&x2, &w_id, &b2).unwrap().value().as_slice(),
            &[3.0, 4.0]
        );

        let w0 = Var::constant(t64(&[2, 2], &[0.0; 4]));
        let bb = Var::constant(t64(&[2], &[5.0, -1.0]));
        assert_eq!(
            linear(&x2, &w0, &bb).unwrap().value().as_slice(),
            &[5.0, -1.0]
        );
    }

    #[test]
    fn linear_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(t64(&[1, 2], &[10.0, 20.0]));
        let b = tape.leaf(t64(&[1], &[0.5]));
        let s = sum(&linear(&x, &w, &b).unwrap()).unwrap();
        let grads = backward(&s).unwrap();
        assert_eq!(grads.get(&x).unwrap().as_slice(), &[10.0, 20.0, 10.0, 20.0]);
        assert_eq!(grads.get(&w).unwrap().as_slice(), &[4.0, 6.0]);
        assert_eq!(grads.get(&b).unwrap().as_slice(), &[2.0]);
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Var::constant(Tensor::<f64>::zeros(&[1, 1, 2, 2]));
        let w = Var::constant(Tensor::<f64>::zeros(&[1, 1, 2, 2]));
        let b = Var::constant(Tensor::<f64>::zeros(&[1]));
        assert!(conv2d(&x, &w, &b, 1).is_err());
    }
}
