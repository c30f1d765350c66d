//! Correlation primitives: Pearson, Spearman (average ranks), and
//! Kendall tau-b computed in O(n log n) via inversion counting.

use crate::error::{PbanError, Result};

fn check_pairs(x: &[f64], y: &[f64], what: &'static str) -> Result<()> {
    if x.len() != y.len() {
        return Err(PbanError::Parameter(format!(
            "{what}: input lengths differ ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(PbanError::Undefined(format!(
            "{what} needs at least 2 points, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(PbanError::Undefined(format!(
            "{what} is undefined for non-finite inputs"
        )));
    }
    Ok(())
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut ranks = vec![0f64; v.len()];
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = shared;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(x, y, "pearson")?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0f64, 0f64, 0f64);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(PbanError::Undefined(
            "pearson correlation of a constant sequence".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson on average ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(x, y, "srcc")?;
    pearson(&average_ranks(x), &average_ranks(y)).map_err(|e| match e {
        PbanError::Undefined(_) => {
            PbanError::Undefined("srcc of a constant sequence".into())
        }
        other => other,
    })
}

/// Merge sort that returns the number of strict inversions (left > right).
fn count_inversions(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let (a, b) = v.split_at_mut(mid);
    let mut inv = count_inversions(a, buf) + count_inversions(b, buf);
    buf.clear();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            buf.push(a[i]);
            i += 1;
        } else {
            inv += (a.len() - i) as u64;
            buf.push(b[j]);
            j += 1;
        }
    }
    buf.extend_from_slice(&a[i..]);
    buf.extend_from_slice(&b[j..]);
    v.copy_from_slice(buf);
    inv
}

/// Sum of t*(t-1)/2 over runs of equal keys in a sorted index order.
fn tie_pairs(sorted: &[usize], same: impl Fn(usize, usize) -> bool) -> u64 {
    let mut total = 0u64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && same(sorted[j + 1], sorted[i]) {
            j += 1;
        }
        let t = (j - i + 1) as u64;
        total += t * (t - 1) / 2;
        i = j + 1;
    }
    total
}

/// Kendall tau-b with tie correction.
///
/// With n0 = n(n-1)/2, n1/n2 = tied pairs in x/y, n3 = jointly tied pairs,
/// and D = inversions of y after sorting by (x, y):
///   concordant - discordant = n0 - n1 - n2 + n3 - 2D
///   tau = (C - D) / sqrt((n0 - n1) * (n0 - n2))
pub fn krcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(x, y, "krcc")?;
    let n = x.len();
    let mut by_x: Vec<usize> = (0..n).collect();
    by_x.sort_by(|&a, &b| {
        x[a].partial_cmp(&x[b])
            .unwrap()
            .then(y[a].partial_cmp(&y[b]).unwrap())
    });
    let mut by_y: Vec<usize> = (0..n).collect();
    by_y.sort_by(|&a, &b| y[a].partial_cmp(&y[b]).unwrap());

    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let n1 = tie_pairs(&by_x, |a, b| x[a] == x[b]);
    let n2 = tie_pairs(&by_y, |a, b| y[a] == y[b]);
    let n3 = tie_pairs(&by_x, |a, b| x[a] == x[b] && y[a] == y[b]);
    if n0 == n1 || n0 == n2 {
        return Err(PbanError::Undefined(
            "kendall correlation of a constant sequence".into(),
        ));
    }
    let mut ys: Vec<f64> = by_x.iter().map(|&i| y[i]).collect();
    let mut buf = Vec::with_capacity(n);
    let d = count_inversions(&mut ys, &mut buf);

    let num = n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * d as i64;
    let den = ((n0 - n1) as f64).sqrt() * ((n0 - n2) as f64).sqrt();
    Ok((num as f64 / den).clamp(-1.0, 1.0))
}

/// Root mean squared error between paired sequences.
pub fn rmse(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(PbanError::Parameter(format!(
            "rmse: input lengths differ ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(PbanError::Undefined("rmse of an empty sequence".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(PbanError::Undefined(
            "rmse is undefined for non-finite inputs".into(),
        ));
    }
    let sum: f64 = x.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok((sum / x.len() as f64).sqrt())
}
