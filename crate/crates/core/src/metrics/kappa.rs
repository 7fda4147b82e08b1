//! Inter-rater agreement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub kappa: f64,
    pub p_observed: f64,
    pub p_expected: f64,
    /// Every pairwise kappa (a single entry for two raters).
    pub pairwise: Vec<f64>,
    /// Set when expected agreement is 1 (every rater used one shared
    /// category); kappa is then reported as 1.
    pub degenerate: bool,
}

/// Cohen's kappa between two raters over categorical labels.
///
/// Evaluated from integer counts as
/// `(n * agree - sum_k row_k col_k) / (n^2 - sum_k row_k col_k)`.
pub fn cohen_kappa(r1: &[u32], r2: &[u32]) -> Result<KappaResult> {
    if r1.len() != r2.len() {
        return Err(Error::Pairing(format!("raters labelled {} and {} cases", r1.len(), r2.len())));
    }
    if r1.is_empty() {
        return Err(Error::data("no cases to compare"));
    }
    let n = r1.len() as u128;
    let agree = r1.iter().zip(r2).filter(|(a, b)| a == b).count() as u128;
    let mut margins: BTreeMap<u32, (u128, u128)> = BTreeMap::new();
    for (&a, &b) in r1.iter().zip(r2) {
        margins.entry(a).or_default().0 += 1;
        margins.entry(b).or_default().1 += 1;
    }
    let chance: u128 = margins.values().map(|(r, c)| r * c).sum();
    let p_observed = agree as f64 / n as f64;
    let p_expected = chance as f64 / (n * n) as f64;
    let degenerate = chance == n * n;
    let kappa = if degenerate {
        1.0
    } else {
        (n as f64 * agree as f64 - chance as f64) / ((n * n) as f64 - chance as f64)
    };
    Ok(KappaResult { kappa, p_observed, p_expected, pairwise: vec![kappa], degenerate })
}

/// Light's kappa: the arithmetic mean of Cohen's kappa over all rater pairs.
/// The reported agreement proportions are pair means as well.
pub fn light_kappa(raters: &[Vec<u32>]) -> Result<KappaResult> {
    if raters.len() < 2 {
        return Err(Error::data(format!("need at least two raters, got {}", raters.len())));
    }
    let mut pairs = Vec::new();
    for i in 0..raters.len() {
        for j in i + 1..raters.len() {
            pairs.push(cohen_kappa(&raters[i], &raters[j])?);
        }
    }
    let m = pairs.len() as f64;
    Ok(KappaResult {
        kappa: pairs.iter().map(|p| p.kappa).sum::<f64>() / m,
        p_observed: pairs.iter().map(|p| p.p_observed).sum::<f64>() / m,
        p_expected: pairs.iter().map(|p| p.p_expected).sum::<f64>() / m,
        pairwise: pairs.iter().map(|p| p.kappa).collect(),
        degenerate: pairs.iter().any(|p| p.degenerate),
    })
}
