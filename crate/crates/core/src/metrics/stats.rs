use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{MetricError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KWTestResult {
    pub h: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Kruskal-Wallis H with tie correction; p from the chi-square survival
/// function with `groups - 1` degrees of freedom.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KWTestResult> {
    if groups.len() < 2 {
        return Err(MetricError::Groups("need at least 2 groups".into()));
    }
    if groups.iter().any(Vec::is_empty) {
        return Err(MetricError::Groups("empty group".into()));
    }
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    if all.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let n = all.len() as f64;
    if all.len() < 3 {
        return Err(MetricError::Groups("need at least 3 observations".into()));
    }
    let df = groups.len() - 1;
    let ranks = average_ranks(&all);
    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let mut ties = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        ties += t * t * t - t;
        i = j;
    }
    let correction = 1.0 - ties / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(KWTestResult { h: 0.0, df, p_value: 1.0 });
    }
    let mut offset = 0;
    let mut sum = 0.0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        sum += r * r / g.len() as f64;
        offset += g.len();
    }
    let h = ((12.0 / (n * (n + 1.0)) * sum - 3.0 * (n + 1.0)) / correction).max(0.0);
    let p = ChiSquared::new(df as f64).expect("positive df").sf(h);
    Ok(KWTestResult { h, df, p_value: p.clamp(0.0, 1.0) })
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}
