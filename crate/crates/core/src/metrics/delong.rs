//! Paired comparison of two correlated AUCs by structural components.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::ScoredSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeLongComponents {
    pub auc: [f64; 2],
    /// Per positive case: fraction of negatives it outscores (ties half).
    pub v10: [Vec<f64>; 2],
    /// Per negative case: fraction of positives that outscore it (ties half).
    pub v01: [Vec<f64>; 2],
    /// Sample covariance (divisor n - 1) of the positive-case components.
    pub s10: [[f64; 2]; 2],
    pub s01: [[f64; 2]; 2],
    /// `auc[0] - auc[1]`.
    pub delta: f64,
    pub variance: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Doubled comparison counts: `2 * below + equal` for each query score
/// against a sorted reference list.
fn doubled_counts(queries: &[f64], sorted: &[f64], below: bool) -> Vec<u64> {
    queries
        .iter()
        .map(|&q| {
            let lo = sorted.partition_point(|&v| v < q) as u64;
            let hi = sorted.partition_point(|&v| v <= q) as u64;
            let strict = if below { lo } else { sorted.len() as u64 - hi };
            2 * strict + (hi - lo)
        })
        .collect()
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1) as f64
}

/// One classifier's AUC and components.
fn components(s: &ScoredSet) -> (f64, Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = s.scores.iter().zip(&s.labels).filter(|(_, &y)| y == 1).map(|(&v, _)| v).collect();
    let neg: Vec<f64> = s.scores.iter().zip(&s.labels).filter(|(_, &y)| y == 0).map(|(&v, _)| v).collect();
    let mut sorted_pos = pos.clone();
    let mut sorted_neg = neg.clone();
    sorted_pos.sort_by(f64::total_cmp);
    sorted_neg.sort_by(f64::total_cmp);
    let c10 = doubled_counts(&pos, &sorted_neg, true);
    let c01 = doubled_counts(&neg, &sorted_pos, false);
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let total: u128 = c10.iter().map(|&c| c as u128).sum();
    let auc = total as f64 / (2 * pos.len() as u128 * neg.len() as u128) as f64;
    let v10 = c10.iter().map(|&c| c as f64 / (2.0 * nn)).collect();
    let v01 = c01.iter().map(|&c| c as f64 / (2.0 * np)).collect();
    (auc, v10, v01)
}

/// Compare two classifiers scored on the same cases.
///
/// The variance of the AUC difference is
/// `(s10[0][0] + s10[1][1] - 2 s10[0][1]) / n_pos + (same for s01) / n_neg`,
/// and the p-value is two-sided under a standard normal. A zero variance
/// with zero difference gives p = 1; with a nonzero difference, p = 0.
pub fn delong_paired(a: &ScoredSet, b: &ScoredSet) -> Result<DeLongComponents> {
    if a.len() != b.len() || a.labels != b.labels || a.scan_ids != b.scan_ids {
        return Err(Error::Pairing("the two scored sets do not cover the same cases".into()));
    }
    a.require_both_classes()?;
    let (auc_a, v10_a, v01_a) = components(a);
    let (auc_b, v10_b, v01_b) = components(b);
    let cov = |x: &[f64], y: &[f64]| {
        let xy = covariance(x, y);
        [[covariance(x, x), xy], [xy, covariance(y, y)]]
    };
    let s10 = cov(&v10_a, &v10_b);
    let s01 = cov(&v01_a, &v01_b);
    let (np, nn) = (v10_a.len() as f64, v01_a.len() as f64);
    let variance = ((s10[0][0] + s10[1][1] - 2.0 * s10[0][1]) / np
        + (s01[0][0] + s01[1][1] - 2.0 * s01[0][1]) / nn)
        .max(0.0);
    let delta = auc_a - auc_b;
    let (z, p_value) = if variance == 0.0 {
        if delta == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(delta), 0.0)
        }
    } else {
        let z = delta / variance.sqrt();
        (z, erfc(z.abs() / std::f64::consts::SQRT_2))
    };
    Ok(DeLongComponents {
        auc: [auc_a, auc_b],
        v10: [v10_a, v10_b],
        v01: [v01_a, v01_b],
        s10,
        s01,
        delta,
        variance,
        z,
        p_value,
    })
}
