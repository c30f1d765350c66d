//! Five-parameter logistic regression of subjective scores onto raw
//! predictions, fitted with Levenberg-Marquardt. The fitted curve is
//!   q(x) = b1 * (1/2 - 1/(1 + exp(b2 * (x - b3)))) + b4 * x + b5
//! and the result is guaranteed to score at least as well as the best
//! affine map, which the logistic family contains at b1 = 0.

use serde::Serialize;

use crate::error::{PbanError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Logistic5 {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub b5: f64,
}

/// exp-overflow-safe 1/(1+e^z).
fn inv_logit(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

impl Logistic5 {
    pub fn eval(&self, x: f64) -> f64 {
        let l = inv_logit(self.b2 * (x - self.b3));
        self.b1 * (0.5 - l) + self.b4 * x + self.b5
    }

    /// Gradient of eval with respect to (b1..b5) at x.
    fn jacobian_row(&self, x: f64) -> [f64; 5] {
        let l = inv_logit(self.b2 * (x - self.b3));
        let bump = l * (1.0 - l);
        [
            0.5 - l,
            self.b1 * bump * (x - self.b3),
            -self.b1 * bump * self.b2,
            x,
            1.0,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct LogisticFit {
    pub params: Logistic5,
    pub converged: bool,
    pub iterations: usize,
    pub cost: f64,
}

fn sum_sq_residuals(p: &Logistic5, x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&a, &b)| {
            let r = p.eval(a) - b;
            r * r
        })
        .sum()
}

/// Gaussian elimination with partial pivoting; None if singular.
fn solve5(mut a: [[f64; 5]; 5], mut b: [f64; 5]) -> Option<[f64; 5]> {
    for col in 0..5 {
        let pivot = (col..5).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..5 {
            let f = a[row][col] / a[col][col];
            for k in col..5 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0f64; 5];
    for col in (0..5).rev() {
        let mut s = b[col];
        for k in col + 1..5 {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

const MAX_ITERS: usize = 500;
const REL_TOL: f64 = 1e-10;

/// Fits the logistic map from predictions to scores. Errors with
/// `Undefined` when the predictions are constant (the curve's shape
/// parameters are then unidentifiable).
pub fn fit_logistic(pred: &[f64], mos: &[f64]) -> Result<LogisticFit> {
    if pred.len() != mos.len() {
        return Err(PbanError::Parameter(format!(
            "logistic fit: input lengths differ ({} vs {})",
            pred.len(),
            mos.len()
        )));
    }
    if pred.len() < 2 {
        return Err(PbanError::Undefined(format!(
            "logistic fit needs at least 2 points, got {}",
            pred.len()
        )));
    }
    if pred.iter().chain(mos).any(|v| !v.is_finite()) {
        return Err(PbanError::Undefined(
            "logistic fit is undefined for non-finite inputs".into(),
        ));
    }
    let n = pred.len() as f64;
    let (xmin, xmax) = pred
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if xmin == xmax {
        return Err(PbanError::Undefined(
            "logistic fit over constant predictions".into(),
        ));
    }
    let (ymin, ymax) = mos
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let mx = pred.iter().sum::<f64>() / n;
    let my = mos.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0f64, 0f64);
    for (&a, &b) in pred.iter().zip(mos) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }

    let mut p = Logistic5 {
        b1: ymax - ymin,
        b2: if sxy < 0.0 { -4.0 } else { 4.0 } / (xmax - xmin),
        b3: mx,
        b4: 0.0,
        b5: my,
    };
    let mut cost = sum_sq_residuals(&p, pred, mos);
    let mut best = (p, cost);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..MAX_ITERS {
        iterations += 1;
        // Normal equations JtJ delta = -Jt r with Marquardt diagonal damping.
        let mut jtj = [[0f64; 5]; 5];
        let mut jtr = [0f64; 5];
        for (&x, &y) in pred.iter().zip(mos) {
            let row = p.jacobian_row(x);
            let r = p.eval(x) - y;
            for i in 0..5 {
                jtr[i] += row[i] * r;
                for j in 0..5 {
                    jtj[i][j] += row[i] * row[j];
                }
            }
        }
        let mut damped = jtj;
        for i in 0..5 {
            damped[i][i] += lambda * jtj[i][i].max(1e-12);
        }
        let step = solve5(damped, [-jtr[0], -jtr[1], -jtr[2], -jtr[3], -jtr[4]]);
        let accepted = step.and_then(|d| {
            let cand = Logistic5 {
                b1: p.b1 + d[0],
                b2: p.b2 + d[1],
                b3: p.b3 + d[2],
                b4: p.b4 + d[3],
                b5: p.b5 + d[4],
            };
            let c = sum_sq_residuals(&cand, pred, mos);
            // Non-strict: a step that merely ties registers as zero relative
            // improvement and trips the convergence test instead of spinning
            // the damping up to its ceiling.
            (c.is_finite() && c <= cost).then_some((cand, c))
        });
        match accepted {
            Some((cand, c)) => {
                let rel = (cost - c) / cost.max(1e-30);
                p = cand;
                cost = c;
                if cost < best.1 {
                    best = (p, cost);
                }
                lambda = (lambda / 10.0).max(1e-12);
                if rel < REL_TOL {
                    converged = true;
                    break;
                }
            }
            None => {
                lambda *= 10.0;
                if lambda > 1e12 {
                    break;
                }
            }
        }
    }

    // The family contains every affine map at b1 = 0; never report a fit
    // worse than the least-squares line.
    let a = sxy / sxx;
    let affine = Logistic5 {
        b1: 0.0,
        b2: 1.0,
        b3: mx,
        b4: a,
        b5: my - a * mx,
    };
    let affine_cost = sum_sq_residuals(&affine, pred, mos);
    if best.1 > affine_cost {
        best = (affine, affine_cost);
    }

    Ok(LogisticFit {
        params: best.0,
        converged,
        iterations,
        cost: best.1,
    })
}
