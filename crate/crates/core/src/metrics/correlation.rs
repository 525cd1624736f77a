//! Rank correlations used to validate surrogate metrics against the
//! control-point ground truth: Spearman (average ranks for ties) and
//! Kendall's tau-b.

use super::{MetricsError, Result};

fn validate(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch {
            a: xs.len(),
            b: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(MetricsError::InsufficientData(xs.len()));
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(xs) || constant(ys) {
        return Err(MetricsError::ConstantInput);
    }
    Ok(())
}

/// Average ranks (1-based), ties share the mean of their positions.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    validate(xs, ys)?;
    Ok(pearson(&average_ranks(xs), &average_ranks(ys)))
}

/// Kendall's tau-b: concordance count with tie corrections in both
/// variables.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64> {
    validate(xs, ys)?;
    let n = xs.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut ties_x = 0i64;
    let mut ties_y = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = xs[i] - xs[j];
            let dy = ys[i] - ys[j];
            if dx == 0.0 && dy == 0.0 {
                continue;
            } else if dx == 0.0 {
                ties_x += 1;
            } else if dy == 0.0 {
                ties_y += 1;
            } else if dx * dy > 0.0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as f64;
    let tie_xx = ties_x as f64;
    let tie_yy = ties_y as f64;
    // Pairs tied in both count against neither axis total.
    let both = n0 - concordant as f64 - discordant as f64 - tie_xx - tie_yy;
    let denom = ((n0 - tie_xx - both) * (n0 - tie_yy - both)).sqrt();
    Ok((concordant - discordant) as f64 / denom)
}
