//! Evaluation statistics: ROC/AUC, confusion rates, F2-optimal thresholds,
//! paired DeLong comparison, kappa agreement and multi-seed aggregation.

mod delong;
mod kappa;

pub use delong::{delong_paired, DeLongComponents};
pub use kappa::{cohen_kappa, light_kappa, KappaResult};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores and binary labels for one set of cases, with optional identifiers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub scan_ids: Vec<String>,
    pub patient_ids: Vec<String>,
}

impl ScoredSet {
    /// Cases get ids `"0"`, `"1"`, ... for both scan and patient.
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let ids: Vec<String> = (0..scores.len()).map(|i| i.to_string()).collect();
        Self::with_ids(scores, labels, ids.clone(), ids)
    }

    pub fn with_ids(
        scores: Vec<f64>,
        labels: Vec<u8>,
        scan_ids: Vec<String>,
        patient_ids: Vec<String>,
    ) -> Result<Self> {
        let n = scores.len();
        if labels.len() != n || scan_ids.len() != n || patient_ids.len() != n {
            return Err(Error::shape(format!(
                "scored set lists differ in length: {n} scores, {} labels, {} scan ids, {} patient ids",
                labels.len(),
                scan_ids.len(),
                patient_ids.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::Label(format!("label {bad} is not 0 or 1")));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score {bad}")));
        }
        Ok(ScoredSet { scores, labels, scan_ids, patient_ids })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    fn require_both_classes(&self) -> Result<()> {
        let (p, n) = (self.positives(), self.negatives());
        if p == 0 || n == 0 {
            return Err(Error::Class(format!("need both classes, got {p} positive and {n} negative")));
        }
        Ok(())
    }

    /// Per distinct score, highest first: (score, positives, negatives).
    fn tie_groups(&self) -> Vec<(f64, u64, u64)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups: Vec<(f64, u64, u64)> = Vec::new();
        for i in order {
            let s = self.scores[i];
            let (pos, neg) = if self.labels[i] == 1 { (1, 0) } else { (0, 1) };
            match groups.last_mut() {
                Some(g) if g.0 == s => {
                    g.1 += pos;
                    g.2 += neg;
                }
                _ => groups.push((s, pos, neg)),
            }
        }
        groups
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from exact integer counts over tie groups.
pub fn auc(s: &ScoredSet) -> Result<f64> {
    s.require_both_classes()?;
    let mut neg_below: u64 = s.negatives() as u64;
    let mut doubled: u128 = 0;
    for (_, pos, neg) in s.tie_groups() {
        neg_below -= neg;
        doubled += pos as u128 * (2 * neg_below + neg) as u128;
    }
    Ok(doubled as f64 / (2 * s.positives() as u128 * s.negatives() as u128) as f64)
}

/// The same statistic by direct comparison of every positive/negative pair.
pub fn auc_pairwise(s: &ScoredSet) -> Result<f64> {
    s.require_both_classes()?;
    let pos: Vec<f64> = s.scores.iter().zip(&s.labels).filter(|(_, &y)| y == 1).map(|(&v, _)| v).collect();
    let neg: Vec<f64> = s.scores.iter().zip(&s.labels).filter(|(_, &y)| y == 0).map(|(&v, _)| v).collect();
    let mut doubled: u128 = 0;
    for &p in &pos {
        for &n in &neg {
            doubled += if p > n {
                2
            } else if p == n {
                1
            } else {
                0
            };
        }
    }
    Ok(doubled as f64 / (2 * pos.len() as u128 * neg.len() as u128) as f64)
}

/// One ROC vertex. `threshold` is the score at which the vertex is reached;
/// `None` for the (0, 0) start, which corresponds to a threshold above every score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: Option<f64>,
}

/// ROC vertices from (0, 0) to (1, 1), one per distinct score.
pub fn roc_points(s: &ScoredSet) -> Result<Vec<RocPoint>> {
    s.require_both_classes()?;
    let (p, n) = (s.positives() as f64, s.negatives() as f64);
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: None }];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (score, pos, neg) in s.tie_groups() {
        tp += pos;
        fp += neg;
        points.push(RocPoint { fpr: fp as f64 / n, tpr: tp as f64 / p, threshold: Some(score) });
    }
    Ok(points)
}

/// Area under a polyline of ROC points by the trapezoid rule.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0).sum()
}

/// Two-column CSV (`fpr,tpr`) for plotting.
pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("fpr,tpr\n");
    for p in points {
        out.push_str(&format!("{},{}\n", p.fpr, p.tpr));
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Counts with a case predicted positive iff its score is at least `threshold`.
pub fn confusion_at(s: &ScoredSet, threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&score, &y) in s.scores.iter().zip(&s.labels) {
        match (score >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// Rates derived from confusion counts. A rate whose denominator is zero is
/// reported as 0 and named in `undefined`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
    pub f2: f64,
    pub undefined: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(1 + b^2) P R / (b^2 P + R)`, written in counts; 0 when no case is
/// positive in either truth or prediction.
pub fn f_beta(c: &ConfusionCounts, beta: f64) -> f64 {
    let b2 = beta * beta;
    let num = (1.0 + b2) * c.tp as f64;
    let den = num + b2 * c.fn_ as f64 + c.fp as f64;
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn rates(c: &ConfusionCounts) -> Rates {
    let mut undefined = Vec::new();
    let sensitivity = ratio(c.tp, c.tp + c.fn_, "sensitivity", &mut undefined);
    let specificity = ratio(c.tn, c.tn + c.fp, "specificity", &mut undefined);
    let precision = ratio(c.tp, c.tp + c.fp, "precision", &mut undefined);
    if c.tp + c.fp + c.fn_ == 0 {
        undefined.push("f_beta".to_string());
    }
    Rates { sensitivity, specificity, precision, f1: f_beta(c, 1.0), f2: f_beta(c, 2.0), undefined }
}

/// Threshold maximizing F2 over every distinct score plus a sentinel above
/// all scores (predicting nothing positive); ties go to the larger threshold.
///
/// With at least one positive case the sentinel scores F2 = 0 and never wins,
/// so an all-ties set returns its single score (everything positive).
pub fn select_threshold_f2(validation: &ScoredSet) -> Result<f64> {
    validation.require_both_classes()?;
    let groups = validation.tie_groups();
    let (p, n) = (validation.positives() as u64, validation.negatives() as u64);
    let mut best = (f_beta(&ConfusionCounts { tp: 0, fp: 0, tn: n, fn_: p }, 2.0), f64::INFINITY);
    let (mut tp, mut fp) = (0u64, 0u64);
    // Groups run from the highest score down, so a strict improvement is
    // needed to move to a lower threshold.
    for (score, pos, neg) in groups {
        tp += pos;
        fp += neg;
        let f2 = f_beta(&ConfusionCounts { tp, fp, tn: n - fp, fn_: p - tp }, 2.0);
        if f2 > best.0 {
            best = (f2, score);
        }
    }
    Ok(best.1)
}

/// Test-set metrics at a fixed operating threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub roc: Vec<RocPoint>,
    /// Rates reported as 0 because their denominator was empty.
    pub undefined: Vec<String>,
    /// Present on aggregated reports.
    pub runs: Option<RunSummary>,
}

impl EvalReport {
    pub fn at_threshold(test: &ScoredSet, threshold: f64) -> Result<Self> {
        let counts = confusion_at(test, threshold);
        let r = rates(&counts);
        Ok(EvalReport {
            auc: auc(test)?,
            sensitivity: r.sensitivity,
            specificity: r.specificity,
            f1: r.f1,
            threshold,
            counts,
            roc: roc_points(test)?,
            undefined: r.undefined,
            runs: None,
        })
    }

    /// Pick the F2-optimal threshold on `validation` and report `test` at it.
    pub fn evaluate(validation: &ScoredSet, test: &ScoredSet) -> Result<Self> {
        Self::at_threshold(test, select_threshold_f2(validation)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation (divisor n).
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::data("mean of an empty list"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(MeanStd { mean, std: var.sqrt() })
    }
}

/// Four decimals with the spread in parentheses, e.g. `0.9080 (±0.0051)`.
impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} (±{:.4})", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub count: usize,
    /// Always `"population"`: the spread divides by the number of runs.
    pub std_kind: String,
    pub auc: MeanStd,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
    pub f1: MeanStd,
    pub threshold: MeanStd,
    pub per_run: Vec<EvalReport>,
}

/// Mean and population std of every metric across runs. The aggregate's
/// scalar fields hold the means; its ROC list is empty (the per-run curves
/// are kept in `runs.per_run`).
pub fn aggregate_runs(reports: &[EvalReport]) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::data("no runs to aggregate"));
    }
    let of = |f: fn(&EvalReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    let summary = RunSummary {
        count: reports.len(),
        std_kind: "population".to_string(),
        auc: of(|r| r.auc)?,
        sensitivity: of(|r| r.sensitivity)?,
        specificity: of(|r| r.specificity)?,
        f1: of(|r| r.f1)?,
        threshold: of(|r| r.threshold)?,
        per_run: reports.to_vec(),
    };
    let mut undefined: Vec<String> = reports.iter().flat_map(|r| r.undefined.clone()).collect();
    undefined.sort();
    undefined.dedup();
    let counts = reports.iter().fold(ConfusionCounts::default(), |a, r| ConfusionCounts {
        tp: a.tp + r.counts.tp,
        fp: a.fp + r.counts.fp,
        tn: a.tn + r.counts.tn,
        fn_: a.fn_ + r.counts.fn_,
    });
    Ok(EvalReport {
        auc: summary.auc.mean,
        sensitivity: summary.sensitivity.mean,
        specificity: summary.specificity.mean,
        f1: summary.f1.mean,
        threshold: summary.threshold.mean,
        counts,
        roc: Vec::new(),
        undefined,
        runs: Some(summary),
    })
}

/// CSV of every run's ROC curve: `run,fpr,tpr`.
pub fn roc_runs_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("run,fpr,tpr\n");
    for (i, r) in reports.iter().enumerate() {
        for p in &r.roc {
            out.push_str(&format!("{i},{},{}\n", p.fpr, p.tpr));
        }
    }
    out
}
