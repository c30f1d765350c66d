//! Agreement metrics between predicted and subjective quality scores.
//!
//! Rank metrics (SRCC, KRCC) are computed on raw predictions; PLCC and
//! RMSE are computed after the standard five-parameter logistic mapping.

pub mod logistic;
pub mod rank;

use serde::Serialize;

pub use logistic::{fit_logistic, Logistic5, LogisticFit};
pub use rank::{average_ranks, krcc, pearson, rmse, srcc};

use crate::error::Result;

#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub srcc: f64,
    pub krcc: f64,
    pub plcc: f64,
    pub rmse: f64,
    pub n: usize,
    pub logistic: Logistic5,
    pub converged: bool,
}

/// Computes the full metric suite for predictions against subjective
/// scores. Degenerate inputs (constant sequences, fewer than two points)
/// surface as `Undefined` errors rather than placeholder values.
pub fn evaluate(pred: &[f64], mos: &[f64]) -> Result<MetricReport> {
    let srcc = rank::srcc(pred, mos)?;
    let krcc = rank::krcc(pred, mos)?;
    let fit = logistic::fit_logistic(pred, mos)?;
    let mapped: Vec<f64> = pred.iter().map(|&x| fit.params.eval(x)).collect();
    let plcc = rank::pearson(&mapped, mos)?;
    let rmse = rank::rmse(&mapped, mos)?;
    Ok(MetricReport {
        srcc,
        krcc,
        plcc,
        rmse,
        n: pred.len(),
        logistic: fit.params,
        converged: fit.converged,
    })
}
