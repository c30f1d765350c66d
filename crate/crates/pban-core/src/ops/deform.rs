//! Bilinear sampling and modulated deformable convolution.
//!
//! The deformable kernel accumulates per output pixel in exactly the same
//! operand order as `conv2d` (bias, then channel-major, tap-minor), so with
//! zero offsets and unit modulation the two ops agree bit-for-bit on finite
//! inputs. Samples outside the image read zero, matching zero padding.

use crate::autograd::{record, Var};
use crate::error::{PbanError, Result};
use crate::tensor::{Scalar, Tensor};

use super::conv::{axpy, check_conv_shapes, ConvDims};

/// Bilinear corner data at one fractional position on one plane.
struct Corners<T> {
    y0: isize,
    x0: isize,
    fy: T,
    fx: T,
    v00: T,
    v01: T,
    v10: T,
    v11: T,
}

#[inline]
fn fetch<T: Scalar>(plane: &[T], h: isize, w: isize, y: isize, x: isize) -> T {
    if y >= 0 && y < h && x >= 0 && x < w {
        plane[(y * w + x) as usize]
    } else {
        T::zero()
    }
}

#[inline]
fn corners<T: Scalar>(plane: &[T], h: usize, w: usize, py: T, px: T) -> Corners<T> {
    let fy0 = py.floor();
    let fx0 = px.floor();
    let y0 = fy0.to_f64() as isize;
    let x0 = fx0.to_f64() as isize;
    let (hi, wi) = (h as isize, w as isize);
    Corners {
        y0,
        x0,
        fy: py - fy0,
        fx: px - fx0,
        v00: fetch(plane, hi, wi, y0, x0),
        v01: fetch(plane, hi, wi, y0, x0 + 1),
        v10: fetch(plane, hi, wi, y0 + 1, x0),
        v11: fetch(plane, hi, wi, y0 + 1, x0 + 1),
    }
}

impl<T: Scalar> Corners<T> {
    #[inline]
    fn value(&self) -> T {
        let one = T::one();
        (one - self.fy) * ((one - self.fx) * self.v00 + self.fx * self.v01)
            + self.fy * ((one - self.fx) * self.v10 + self.fx * self.v11)
    }

    /// (d/dpy, d/dpx) of `value`.
    #[inline]
    fn coord_grads(&self) -> (T, T) {
        let one = T::one();
        let dy = (one - self.fx) * (self.v10 - self.v00) + self.fx * (self.v11 - self.v01);
        let dx = (one - self.fy) * (self.v01 - self.v00) + self.fy * (self.v11 - self.v10);
        (dy, dx)
    }

    /// Adds `g` times the corner weights into the plane gradient.
    #[inline]
    fn scatter(&self, dplane: &mut [T], h: usize, w: usize, g: T) {
        let one = T::one();
        let (hi, wi) = (h as isize, w as isize);
        let mut put = |y: isize, x: isize, wgt: T| {
            if y >= 0 && y < hi && x >= 0 && x < wi {
                dplane[(y * wi + x) as usize] += g * wgt;
            }
        };
        put(self.y0, self.x0, (one - self.fy) * (one - self.fx));
        put(self.y0, self.x0 + 1, (one - self.fy) * self.fx);
        put(self.y0 + 1, self.x0, self.fy * (one - self.fx));
        put(self.y0 + 1, self.x0 + 1, self.fy * self.fx);
    }
}

/// Interpolates all channels of x [C,H,W] at fractional position (py,px),
/// rank-0 coordinate operands. Zero outside the image; differentiable with
/// respect to the image and both coordinates (away from integer lattice
/// lines, where the interpolant has kinks and the one-sided choice is the
/// right-continuous one given by floor).
pub fn bilinear_sample<T: Scalar>(x: &Var<T>, py: &Var<T>, px: &Var<T>) -> Result<Var<T>> {
    super::require_rank("bilinear_sample", x.shape(), 3)?;
    if py.value().len() != 1 || px.value().len() != 1 {
        return Err(PbanError::Dimension {
            op: "bilinear_sample",
            msg: "coordinates must be single-element tensors".into(),
        });
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let pyv = py.value().as_slice()[0];
    let pxv = px.value().as_slice()[0];
    let xs = x.value().as_slice();
    let plane = h * w;
    let mut data = Vec::with_capacity(c);
    for ci in 0..c {
        data.push(corners(&xs[ci * plane..(ci + 1) * plane], h, w, pyv, pxv).value());
    }
    let value = Tensor::new(vec![c], data)?;
    let xv = x.value().clone();
    record("bilinear_sample", value, &[x, py, px], move |g, needs| {
        let gs = g.as_slice();
        let xs = xv.as_slice();
        let mut dx = needs[0].then(|| Tensor::zeros(xv.shape()));
        let mut dpy = T::zero();
        let mut dpx = T::zero();
        for ci in 0..c {
            let cr = corners(&xs[ci * plane..(ci + 1) * plane], h, w, pyv, pxv);
            if let Some(dxt) = dx.as_mut() {
                let dst = dxt.make_mut();
                cr.scatter(&mut dst[ci * plane..(ci + 1) * plane], h, w, gs[ci]);
            }
            if needs[1] || needs[2] {
                let (gy, gx) = cr.coord_grads();
                dpy += gs[ci] * gy;
                dpx += gs[ci] * gx;
            }
        }
        vec![
            dx,
            needs[1].then(|| Tensor::scalar(dpy)),
            needs[2].then(|| Tensor::scalar(dpx)),
        ]
    })
}

struct DeformField<'a, T> {
    offsets: &'a [T],
    modulation: &'a [T],
}

/// Tap positions and modulation for one output pixel: k*k entries of
/// (py, px, m).
#[inline]
#[allow(clippy::too_many_arguments)]
fn tap_params<T: Scalar>(
    field: &DeformField<T>,
    bi: usize,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    out: &mut Vec<(T, T, T)>,
) {
    out.clear();
    let plane = h * w;
    let kk = k * k;
    let pix = oh * w + ow;
    for n in 0..kk {
        let (ky, kx) = (n / k, n % k);
        let dy = field.offsets[(bi * 2 * kk + 2 * n) * plane + pix];
        let dx = field.offsets[(bi * 2 * kk + 2 * n + 1) * plane + pix];
        let m = field.modulation[(bi * kk + n) * plane + pix];
        let py = T::from_f64((oh + ky) as f64 - pad as f64) + dy;
        let px = T::from_f64((ow + kx) as f64 - pad as f64) + dx;
        out.push((py, px, m));
    }
}

/// Modulated deformable convolution, stride 1, same padding, square odd
/// kernel. Offsets [B, 2k², H, W] hold per-tap (vertical, horizontal)
/// displacements in pixel units, channel 2n vertical and 2n+1 horizontal
/// for tap n in row-major kernel order; modulation [B, k², H, W] scales
/// each tap's sample. Offsets and modulation are shared across groups.
pub fn deform_conv2d<T: Scalar>(
    x: &Var<T>,
    w: &Var<T>,
    bias: &Var<T>,
    offsets: &Var<T>,
    modulation: &Var<T>,
    groups: usize,
) -> Result<Var<T>> {
    let d = check_conv_shapes("deform_conv2d", x.shape(), w.shape(), bias.shape(), groups)?;
    let kk = d.k * d.k;
    let expect_off = [d.b, 2 * kk, d.h, d.w];
    if offsets.shape() != expect_off {
        return Err(PbanError::Dimension {
            op: "deform_conv2d",
            msg: format!(
                "offsets shape {:?}, expected {:?}",
                offsets.shape(),
                expect_off
            ),
        });
    }
    let expect_mod = [d.b, kk, d.h, d.w];
    if modulation.shape() != expect_mod {
        return Err(PbanError::Dimension {
            op: "deform_conv2d",
            msg: format!(
                "modulation shape {:?}, expected {:?}",
                modulation.shape(),
                expect_mod
            ),
        });
    }

    let value = deform_forward(
        x.value().as_slice(),
        w.value().as_slice(),
        bias.value().as_slice(),
        offsets.value().as_slice(),
        modulation.value().as_slice(),
        &d,
    );
    let value = Tensor::new(vec![d.b, d.c_out, d.h, d.w], value)?;

    let xv = x.value().clone();
    let wv = w.value().clone();
    let ov = offsets.value().clone();
    let mv = modulation.value().clone();
    record(
        "deform_conv2d",
        value,
        &[x, w, bias, offsets, modulation],
        move |g, needs| {
            deform_backward(
                g.as_slice(),
                xv.as_slice(),
                wv.as_slice(),
                ov.as_slice(),
                mv.as_slice(),
                &d,
                needs,
            )
        },
    )
}

fn deform_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: &[T],
    offsets: &[T],
    modulation: &[T],
    d: &ConvDims,
) -> Vec<T> {
    let ConvDims { b, c_in, c_out, h, w: wd, k, pad, groups } = *d;
    let (cg_in, cg_out) = (c_in / groups, c_out / groups);
    let kk = k * k;
    let plane = h * wd;
    let field = DeformField { offsets, modulation };
    let mut out = vec![T::zero(); b * c_out * plane];
    let mut taps = Vec::with_capacity(kk);
    let mut vbuf = vec![T::zero(); cg_in * kk];
    for bi in 0..b {
        for oh in 0..h {
            for ow in 0..wd {
                tap_params(&field, bi, oh, ow, h, wd, k, pad, &mut taps);
                for gi in 0..groups {
                    for icl in 0..cg_in {
                        let ic = gi * cg_in + icl;
                        let xp = &x[(bi * c_in + ic) * plane..(bi * c_in + ic + 1) * plane];
                        for (n, &(py, px, m)) in taps.iter().enumerate() {
                            vbuf[icl * kk + n] = m * corners(xp, h, wd, py, px).value();
                        }
                    }
                    for ocl in 0..cg_out {
                        let oc = gi * cg_out + ocl;
                        let wrow = &w[oc * cg_in * kk..(oc + 1) * cg_in * kk];
                        // Sequential accumulation in (channel, tap) order to
                        // mirror conv2d exactly.
                        let mut acc = bias[oc];
                        for (wv, vv) in wrow.iter().zip(&vbuf) {
                            acc += *wv * *vv;
                        }
                        out[(bi * c_out + oc) * plane + oh * wd + ow] = acc;
                    }
                }
            }
        }
    }
    out
}

fn deform_backward<T: Scalar>(
    g: &[T],
    x: &[T],
    w: &[T],
    offsets: &[T],
    modulation: &[T],
    d: &ConvDims,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let ConvDims { b, c_in, c_out, h, w: wd, k, pad, groups } = *d;
    let (cg_in, cg_out) = (c_in / groups, c_out / groups);
    let kk = k * k;
    let plane = h * wd;
    let field = DeformField { offsets, modulation };

    let mut dx = needs[0].then(|| vec![T::zero(); b * c_in * plane]);
    let mut dw = needs[1].then(|| vec![T::zero(); c_out * cg_in * kk]);
    let mut db = needs[2].then(|| vec![T::zero(); c_out]);
    let mut doff = needs[3].then(|| vec![T::zero(); b * 2 * kk * plane]);
    let mut dmod = needs[4].then(|| vec![T::zero(); b * kk * plane]);

    let mut taps = Vec::with_capacity(kk);
    // Raw (unmodulated) samples and the weighted sum over out channels.
    let mut ubuf = vec![T::zero(); cg_in * kk];
    let mut sbuf = vec![T::zero(); cg_in * kk];
    for bi in 0..b {
        for oh in 0..h {
            for ow in 0..wd {
                let pix = oh * wd + ow;
                tap_params(&field, bi, oh, ow, h, wd, k, pad, &mut taps);
                for gi in 0..groups {
                    for icl in 0..cg_in {
                        let ic = gi * cg_in + icl;
                        let xp = &x[(bi * c_in + ic) * plane..(bi * c_in + ic + 1) * plane];
                        for (n, &(py, px, _)) in taps.iter().enumerate() {
                            ubuf[icl * kk + n] = corners(xp, h, wd, py, px).value();
                        }
                    }
                    // S = sum over out channels of g * w; also dw and db.
                    sbuf.fill(T::zero());
                    for ocl in 0..cg_out {
                        let oc = gi * cg_out + ocl;
                        let go = g[(bi * c_out + oc) * plane + pix];
                        let wrow = &w[oc * cg_in * kk..(oc + 1) * cg_in * kk];
                        axpy(&mut sbuf, go, wrow);
                        if let Some(dwv) = dw.as_mut() {
                            // dw += go * v, with v = m * u.
                            let dwrow = &mut dwv[oc * cg_in * kk..(oc + 1) * cg_in * kk];
                            for icl in 0..cg_in {
                                for (n, t) in taps.iter().enumerate() {
                                    let idx = icl * kk + n;
                                    dwrow[idx] += go * t.2 * ubuf[idx];
                                }
                            }
                        }
                        if let Some(dbv) = db.as_mut() {
                            dbv[oc] += go;
                        }
                    }
                    for icl in 0..cg_in {
                        let ic = gi * cg_in + icl;
                        let xp = &x[(bi * c_in + ic) * plane..(bi * c_in + ic + 1) * plane];
                        for (n, &(py, px, m)) in taps.iter().enumerate() {
                            let s = sbuf[icl * kk + n];
                            if s == T::zero() {
                                continue;
                            }
                            let cr = corners(xp, h, wd, py, px);
                            if let Some(dmv) = dmod.as_mut() {
                                dmv[(bi * kk + n) * plane + pix] += s * ubuf[icl * kk + n];
                            }
                            let du = s * m;
                            if let Some(dxv) = dx.as_mut() {
                                let dplane = &mut dxv
                                    [(bi * c_in + ic) * plane..(bi * c_in + ic + 1) * plane];
                                cr.scatter(dplane, h, wd, du);
                            }
                            if let Some(dov) = doff.as_mut() {
                                let (gy, gx) = cr.coord_grads();
                                dov[(bi * 2 * kk + 2 * n) * plane + pix] += du * gy;
                                dov[(bi * 2 * kk + 2 * n + 1) * plane + pix] += du * gx;
                            }
                        }
                    }
                }
            }
        }
    }

    vec![
        dx.map(|v| Tensor::new(vec![b, c_in, h, wd], v).expect("deform dx")),
        dw.map(|v| Tensor::new(vec![c_out, cg_in, k, k], v).expect("deform dw")),
        db.map(|v| Tensor::new(vec![c_out], v).expect("deform db")),
        doff.map(|v| Tensor::new(vec![b, 2 * kk, h, wd], v).expect("deform doff")),
        dmod.map(|v| Tensor::new(vec![b, kk, h, wd], v).expect("deform dmod")),
    ]
}
