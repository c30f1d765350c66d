//! Batch normalization over [B,C,H,W] with per-channel statistics.

use crate::autograd::{record, Var};
use crate::error::{PbanError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Result of a batch-norm application. In train mode, `stat_updates` carries
/// the refreshed running statistics; the caller owns applying them, keeping
/// the op itself a pure function.
pub struct BatchNormOut<T: Scalar> {
    pub y: Var<T>,
    pub stat_updates: Option<(Tensor<T>, Tensor<T>)>,
}

/// Normalizes each channel over (B,H,W).
///
/// Train mode uses the batch's population statistics and proposes running
/// stats updated as new = (1-momentum)*old + momentum*batch, with the same
/// population (biased) variance used for normalization. Eval mode applies
/// the provided running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Scalar>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: BatchNormMode,
    momentum: f64,
    eps: f64,
) -> Result<BatchNormOut<T>> {
    super::require_rank("batch_norm", x.shape(), 4)?;
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    for (name, s) in [("gamma", gamma.shape()), ("beta", beta.shape())] {
        if s != [c] {
            return Err(PbanError::Dimension {
                op: "batch_norm",
                msg: format!("{name} shape {s:?} does not match {c} channels"),
            });
        }
    }
    for (name, s) in [("running_mean", running_mean.shape()), ("running_var", running_var.shape())] {
        if s != [c] {
            return Err(PbanError::Dimension {
                op: "batch_norm",
                msg: format!("{name} shape {s:?} does not match {c} channels"),
            });
        }
    }
    let m = b * h * w;
    if m == 0 {
        return Err(PbanError::Dimension {
            op: "batch_norm",
            msg: "empty batch".into(),
        });
    }
    if !(0.0..=1.0).contains(&momentum) || eps <= 0.0 {
        return Err(PbanError::Parameter(format!(
            "batch_norm momentum {momentum} / eps {eps} out of range"
        )));
    }

    let plane = h * w;
    let xs = x.value().as_slice();
    let per_channel = |f: &mut dyn FnMut(usize, &[T])| {
        for ci in 0..c {
            for bi in 0..b {
                let lo = (bi * c + ci) * plane;
                f(ci, &xs[lo..lo + plane]);
            }
        }
    };

    let (mean, var) = match mode {
        BatchNormMode::Train => {
            let mut mean = vec![T::zero(); c];
            per_channel(&mut |ci, row| {
                for &v in row {
                    mean[ci] += v;
                }
            });
            let inv_m = T::one() / T::from_f64(m as f64);
            for mv in &mut mean {
                *mv *= inv_m;
            }
            let mut var = vec![T::zero(); c];
            per_channel(&mut |ci, row| {
                let mu = mean[ci];
                for &v in row {
                    let d = v - mu;
                    var[ci] += d * d;
                }
            });
            for vv in &mut var {
                *vv *= inv_m;
            }
            (mean, var)
        }
        BatchNormMode::Eval => (
            running_mean.as_slice().to_vec(),
            running_var.as_slice().to_vec(),
        ),
    };

    let epst = T::from_f64(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epst).sqrt()).collect();

    let gs = gamma.value().as_slice();
    let bs = beta.value().as_slice();
    let mut data = vec![T::zero(); xs.len()];
    for bi in 0..b {
        for ci in 0..c {
            let lo = (bi * c + ci) * plane;
            let (mu, istd, ga, be) = (mean[ci], inv_std[ci], gs[ci], bs[ci]);
            for (d, &v) in data[lo..lo + plane].iter_mut().zip(&xs[lo..lo + plane]) {
                *d = (v - mu) * istd * ga + be;
            }
        }
    }
    let value = Tensor::new(x.shape().to_vec(), data)?;

    let stat_updates = match mode {
        BatchNormMode::Train => {
            let mt = T::from_f64(momentum);
            let keep = T::one() - mt;
            let new_mean = Tensor::new(
                vec![c],
                running_mean
                    .as_slice()
                    .iter()
                    .zip(&mean)
                    .map(|(&old, &new)| keep * old + mt * new)
                    .collect(),
            )?;
            let new_var = Tensor::new(
                vec![c],
                running_var
                    .as_slice()
                    .iter()
                    .zip(&var)
                    .map(|(&old, &new)| keep * old + mt * new)
                    .collect(),
            )?;
            Some((new_mean, new_var))
        }
        BatchNormMode::Eval => None,
    };

    let xv = x.value().clone();
    let gamma_v = gamma.value().clone();
    let train = mode == BatchNormMode::Train;
    let y = record("batch_norm", value, &[x, gamma, beta], move |g, needs| {
        let gr = g.as_slice();
        let xs = xv.as_slice();
        let gam = gamma_v.as_slice();
        // Per channel: sums of g and of g*xhat.
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let lo = (bi * c + ci) * plane;
                let (mu, istd) = (mean[ci], inv_std[ci]);
                for (gv, &v) in gr[lo..lo + plane].iter().zip(&xs[lo..lo + plane]) {
                    sum_g[ci] += *gv;
                    sum_gx[ci] += *gv * (v - mu) * istd;
                }
            }
        }
        let dgamma = needs[1].then(|| Tensor::new(vec![c], sum_gx.clone()).expect("bn dgamma"));
        let dbeta = needs[2].then(|| Tensor::new(vec![c], sum_g.clone()).expect("bn dbeta"));
        let dx = needs[0].then(|| {
            let mut out = Tensor::zeros(xv.shape());
            let dst = out.make_mut();
            let inv_m = T::one() / T::from_f64(m as f64);
            for bi in 0..b {
                for ci in 0..c {
                    let lo = (bi * c + ci) * plane;
                    let (mu, istd, ga) = (mean[ci], inv_std[ci], gam[ci]);
                    if train {
                        // Batch statistics depend on x.
                        let mg = sum_g[ci] * inv_m;
                        let mgx = sum_gx[ci] * inv_m;
                        for ((d, gv), &v) in dst[lo..lo + plane]
                            .iter_mut()
                            .zip(&gr[lo..lo + plane])
                            .zip(&xs[lo..lo + plane])
                        {
                            let xhat = (v - mu) * istd;
                            *d = ga * istd * (*gv - mg - xhat * mgx);
                        }
                    } else {
                        // Running statistics are constants.
                        for (d, gv) in dst[lo..lo + plane].iter_mut().zip(&gr[lo..lo + plane]) {
                            *d = ga * istd * *gv;
                        }
                    }
                }
            }
            out
        });
        vec![dx, dgamma, dbeta]
    })?;

    Ok(BatchNormOut { y, stat_updates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{backward, Tape};
    use crate::ops::elementwise::mul;
    use crate::ops::reduce::sum;

    fn unit_params(c: usize) -> (Var<f64>, Var<f64>, Tensor<f64>, Tensor<f64>) {
        (
            Var::constant(Tensor::ones(&[c])),
            Var::constant(Tensor::zeros(&[c])),
            Tensor::zeros(&[c]),
            Tensor::ones(&[c]),
        )
    }

    #[test]
    fn train_mode_whitens_each_channel() {
        let x = Var::constant(Tensor::from_fn(&[2, 3, 2, 2], |i| ((i * 37) % 11) as f64));
        let (g, b, rm, rv) = unit_params(3);
        let out = batch_norm(&x, &g, &b, &rm, &rv, BatchNormMode::Train, 0.1, 1e-5).unwrap();
        let ys = out.y.value().as_slice();
        for ci in 0..3 {
            let mut vals = Vec::new();
            for bi in 0..2 {
                let lo = (bi * 3 + ci) * 4;
                vals.extend_from_slice(&ys[lo..lo + 4]);
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12, "channel {ci} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ci} var {var}");
        }
    }

    #[test]
    fn eval_mode_with_identity_stats_is_identity_within_eps() {
        let x = Var::constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 * 0.3 - 1.0));
        let (g, b, rm, rv) = unit_params(2);
        let out = batch_norm(&x, &g, &b, &rm, &rv, BatchNormMode::Eval, 0.1, 1e-5).unwrap();
        let diff = out.y.value().max_abs_diff(x.value()).unwrap();
        assert!(diff < 1e-5, "diff {diff}");
        assert!(out.stat_updates.is_none());
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let x = Var::constant(Tensor::full(&[2, 1, 3, 3], 7.5f64));
        let (g, b, rm, rv) = unit_params(1);
        let out = batch_norm(&x, &g, &b, &rm, &rv, BatchNormMode::Train, 0.1, 1e-5).unwrap();
        for &v in out.y.value().as_slice() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        // Batch: one channel, values {0,2}: mean 1, population var 1.
        let x = Var::constant(Tensor::new(vec![2, 1, 1, 1], vec![0.0, 2.0]).unwrap());
        let (g, b, _, _) = unit_params(1);
        let rm = Tensor::full(&[1], 10.0f64);
        let rv = Tensor::full(&[1], 4.0f64);
        let out = batch_norm(&x, &g, &b, &rm, &rv, BatchNormMode::Train, 0.1, 1e-5).unwrap();
        let (nm, nv) = out.stat_updates.unwrap();
        assert!((nm.as_slice()[0] - (0.9 * 10.0 + 0.1 * 1.0)).abs() < 1e-12);
        assert!((nv.as_slice()[0] - (0.9 * 4.0 + 0.1 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn train_gradient_rows_are_centered() {
        // BN output is invariant to adding a constant to a channel, so the
        // per-channel gradient sums to zero.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 2, 2, 2], |i| ((i * 7) % 5) as f64 * 0.7));
        let (g, b, rm, rv) = unit_params(2);
        let out = batch_norm(&x, &g, &b, &rm, &rv, BatchNormMode::Train, 0.1, 1e-5).unwrap();
        let w = Var::constant(Tensor::from_fn(&[2, 2, 2, 2], |i| (i as f64 * 0.9).sin()));
        let s = sum(&mul(&out.y, &w).unwrap()).unwrap();
        let grads = backward(&s).unwrap();
        let gx = grads.get(&x).unwrap().as_slice();
        for ci in 0..2 {
            let mut acc = 0.0;
            for bi in 0..2 {
                let lo = (bi * 2 + ci) * 4;
                acc += gx[lo..lo + 4].iter().sum::<f64>();
            }
            assert!(acc.abs() < 1e-12, "channel {ci} grad sum {acc}");
        }
    }
}
