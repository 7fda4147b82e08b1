//! Patient-level train/val/test assignment.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetManifest, Split};
use crate::error::{Error, Result};

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

/// Shuffle patients by `seed`, then give each one to the split furthest
/// below its target scan count (ties to the earlier split). All scans of a
/// patient land together. Fractions are normalized to sum to 1.
pub fn split_by_patient(manifest: &DatasetManifest, fractions: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    manifest.validate()?;
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || fractions.iter().sum::<f64>() <= 0.0 {
        return Err(Error::config(format!("split fractions {fractions:?} are invalid")));
    }
    let total_f: f64 = fractions.iter().sum();
    let mut scans_by_patient: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &manifest.records {
        *scans_by_patient.entry(r.patient_id.as_str()).or_default() += 1;
    }
    let active = fractions.iter().filter(|&&f| f > 0.0).count();
    if scans_by_patient.len() < active {
        return Err(Error::data(format!(
            "{} patients cannot fill {active} splits",
            scans_by_patient.len()
        )));
    }
    let mut patients: Vec<(&str, usize)> = scans_by_patient.into_iter().collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = manifest.records.len() as f64;
    let targets: Vec<f64> = fractions.iter().map(|f| f / total_f * n).collect();
    let mut filled = [0usize; 3];
    let mut assignment: HashMap<&str, Split> = HashMap::new();
    for (pid, count) in patients {
        let mut best = None;
        for k in 0..3 {
            if fractions[k] == 0.0 {
                continue;
            }
            let deficit = targets[k] - filled[k] as f64;
            if best.is_none_or(|(_, d)| deficit > d) {
                best = Some((k, deficit));
            }
        }
        let (k, _) = best.expect("at least one active split");
        filled[k] += count;
        assignment.insert(pid, SPLITS[k]);
    }
    let mut out = manifest.clone();
    for r in &mut out.records {
        r.split = Some(assignment[r.patient_id.as_str()]);
    }
    check_patient_disjoint(&out)?;
    Ok(out)
}

/// Data error if any patient has scans in two splits.
pub fn check_patient_disjoint(manifest: &DatasetManifest) -> Result<()> {
    let mut seen: HashMap<&str, Option<Split>> = HashMap::new();
    for r in &manifest.records {
        if let Some(prev) = seen.insert(&r.patient_id, r.split) {
            if prev != r.split {
                return Err(Error::data(format!("patient {} appears in two splits", r.patient_id)));
            }
        }
    }
    Ok(())
}
