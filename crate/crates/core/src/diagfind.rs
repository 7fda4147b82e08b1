//! Saliency-guided search for a diagnostic region, and the end-to-end
//! pipeline that tests whether a region alone carries diagnostic signal:
//!
//! 1. train a classifier on whole volumes;
//! 2. compute Grad-CAM for held-out cases and locate where saliency mass sits;
//! 3. aggregate the per-case locations into one region;
//! 4. retrain with crop-to-zero augmentation that favours that region;
//! 5. score both models on an evaluation set cropped to the region of interest;
//! 6. decide whether the cropped performance is better than chance.
//!
//! Every step persists its outputs in a state directory and is skipped when
//! they already exist, so an interrupted run resumes where it stopped.
//!
//! State directory layout:
//!
//! ```text
//! config.json          resolved configuration; a mismatch refuses to resume
//! step1_model.ckpt     whole-volume model
//! step1_report.json    its training log and test metrics
//! step2_region.json    per-case saliency reports and the aggregated region
//! step4_model.ckpt     crop-augmented model
//! step4_report.json    its training log and test metrics
//! step5_cropped.json   both models' scores on the cropped evaluation set
//! report.json          the final report
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_crop, CropBox};
use crate::error::{Error, Result};
use crate::metrics::{auc, delong_paired, EvalReport, ScoredSet};
use crate::network::{Network, NetworkConfig};
use crate::optim::{scored_set, train, LogRecord, TrainConfig, TrainOutcome};
use crate::phantom::Scan;
use crate::saliency::{grad_cam, region_mass, RegionReport, SaliencyMap, DEFAULT_HIGHLIGHT_THRESHOLD};

/// Which box each case's highlight is measured against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateRegion {
    /// The aggregated discovery box.
    Aggregated,
    /// One box for every case.
    Fixed(CropBox),
    /// Each record's crop box, else its recorded LC box.
    Recorded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscoveryParams {
    /// Grad-CAM layer; the network's default when unset.
    pub layer: Option<String>,
    pub threshold: f64,
    /// Size of the per-case top-mass box; a third of each lateral extent and
    /// half the depth when unset.
    pub box_size: Option<[usize; 3]>,
    pub candidate: CandidateRegion,
}

impl Default for DiscoveryParams {
    fn default() -> Self {
        DiscoveryParams {
            layer: None,
            threshold: DEFAULT_HIGHLIGHT_THRESHOLD,
            box_size: None,
            candidate: CandidateRegion::Aggregated,
        }
    }
}

fn default_box_size(extents: [usize; 3]) -> [usize; 3] {
    [(extents[0] / 2).max(1), (extents[1] / 3).max(1), (extents[2] / 3).max(1)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSaliency {
    pub scan_id: String,
    pub label: u8,
    pub predicted_glaucoma: bool,
    pub all_zero: bool,
    /// Box of the configured size holding the most saliency.
    pub top_box: CropBox,
    pub report: RegionReport,
}

/// Highlighted cases over cases, per predicted class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HighlightRates {
    pub glaucoma_highlighted: usize,
    pub glaucoma_cases: usize,
    pub normal_highlighted: usize,
    pub normal_cases: usize,
}

impl HighlightRates {
    pub fn glaucoma(&self) -> Option<f64> {
        (self.glaucoma_cases > 0).then(|| self.glaucoma_highlighted as f64 / self.glaucoma_cases as f64)
    }

    pub fn normal(&self) -> Option<f64> {
        (self.normal_cases > 0).then(|| self.normal_highlighted as f64 / self.normal_cases as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionDiscovery {
    pub layer: String,
    /// Componentwise median of the per-case top-mass boxes.
    pub region: CropBox,
    pub rates: HighlightRates,
    pub cases: Vec<CaseSaliency>,
}

/// The `size` box holding the most mass (earliest position on ties), found
/// exhaustively with a summed-volume table.
pub fn top_mass_box(map: &crate::tensor::Tensor<f32>, size: [usize; 3]) -> Result<CropBox> {
    let [d, h, w] = match *map.dims() {
        [d, h, w] => [d, h, w],
        _ => return Err(Error::shape(format!("saliency map must be (D, H, W), got {:?}", map.dims()))),
    };
    if size.iter().zip([d, h, w]).any(|(&s, e)| s == 0 || s > e) {
        return Err(Error::config(format!("box size {size:?} does not fit extents {:?}", [d, h, w])));
    }
    let (sh, sw) = (h + 1, w + 1);
    let mut table = vec![0.0f64; (d + 1) * sh * sw];
    let at = |z: usize, y: usize, x: usize| (z * sh + y) * sw + x;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = map.data()[(z * h + y) * w + x] as f64;
                table[at(z + 1, y + 1, x + 1)] = v + table[at(z, y + 1, x + 1)] + table[at(z + 1, y, x + 1)]
                    + table[at(z + 1, y + 1, x)]
                    - table[at(z, y, x + 1)]
                    - table[at(z, y + 1, x)]
                    - table[at(z + 1, y, x)]
                    + table[at(z, y, x)];
            }
        }
    }
    let [bd, bh, bw] = size;
    let mut best = (f64::NEG_INFINITY, [0usize; 3]);
    for z in 0..=d - bd {
        for y in 0..=h - bh {
            for x in 0..=w - bw {
                let (z1, y1, x1) = (z + bd, y + bh, x + bw);
                let m = table[at(z1, y1, x1)] - table[at(z, y1, x1)] - table[at(z1, y, x1)] - table[at(z1, y1, x)]
                    + table[at(z, y, x1)]
                    + table[at(z, y1, x)]
                    + table[at(z1, y, x)]
                    - table[at(z, y, x)];
                if m > best.0 {
                    best = (m, [z, y, x]);
                }
            }
        }
    }
    let [z, y, x] = best.1;
    CropBox::new([z, z + bd], [y, y + bh], [x, x + bw])
}

fn median(mut v: Vec<usize>) -> usize {
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

/// Componentwise median (lower median for even counts) of box corners.
pub fn median_box(boxes: &[CropBox]) -> Result<CropBox> {
    if boxes.is_empty() {
        return Err(Error::data("no boxes to aggregate"));
    }
    let mut axes = [[0usize; 2]; 3];
    for (k, a) in axes.iter_mut().enumerate() {
        for (e, v) in a.iter_mut().enumerate() {
            *v = median(boxes.iter().map(|b| b.axes()[k][e]).collect());
        }
    }
    // Lower medians of lows and highs can meet when boxes vary in size.
    for a in &mut axes {
        if a[1] <= a[0] {
            a[1] = a[0] + 1;
        }
    }
    CropBox::new(axes[0], axes[1], axes[2])
}

fn recorded_box(scan: &Scan) -> Result<CropBox> {
    scan.record
        .crop_box
        .or_else(|| scan.record.anatomy().map(|a| a.lc_box))
        .ok_or_else(|| Error::data(format!("scan {} has no crop box or recorded anatomy", scan.record.scan_id)))
}

/// Summarize already computed maps. `maps[i]` belongs to `scans[i]`.
pub fn summarize_maps(scans: &[Scan], maps: &[SaliencyMap], params: &DiscoveryParams) -> Result<RegionDiscovery> {
    if scans.is_empty() {
        return Err(Error::data("no cases for region discovery"));
    }
    if scans.len() != maps.len() {
        return Err(Error::shape(format!("{} scans but {} maps", scans.len(), maps.len())));
    }
    let extents: [usize; 3] = maps[0].volume.dims().try_into().map_err(|_| Error::shape("maps must be 3-D"))?;
    let size = params.box_size.unwrap_or_else(|| default_box_size(extents));
    let tops = maps.iter().map(|m| top_mass_box(&m.volume, size)).collect::<Result<Vec<_>>>()?;
    let region = median_box(&tops)?;
    let mut rates = HighlightRates::default();
    let mut cases = Vec::with_capacity(scans.len());
    for ((scan, map), top) in scans.iter().zip(maps).zip(tops) {
        let candidate = match &params.candidate {
            CandidateRegion::Aggregated => region,
            CandidateRegion::Fixed(b) => *b,
            CandidateRegion::Recorded => recorded_box(scan)?,
        };
        let report = region_mass(map, &candidate, params.threshold)?;
        if map.predicted_glaucoma {
            rates.glaucoma_cases += 1;
            rates.glaucoma_highlighted += report.highlighted as usize;
        } else {
            rates.normal_cases += 1;
            rates.normal_highlighted += report.highlighted as usize;
        }
        cases.push(CaseSaliency {
            scan_id: scan.record.scan_id.clone(),
            label: scan.label(),
            predicted_glaucoma: map.predicted_glaucoma,
            all_zero: map.all_zero,
            top_box: top,
            report,
        });
    }
    Ok(RegionDiscovery { layer: maps[0].layer.clone(), region, rates, cases })
}

/// Grad-CAM every case, then aggregate the per-case top-mass boxes and count
/// highlighted cases per predicted class.
pub fn discover_region(net: &Network, scans: &[Scan], params: &DiscoveryParams) -> Result<RegionDiscovery> {
    if scans.is_empty() {
        return Err(Error::data("no cases for region discovery"));
    }
    let layer = params.layer.clone().unwrap_or_else(|| net.default_saliency_layer().to_string());
    let maps = scans.iter().map(|s| grad_cam(net, &s.volume, &layer)).collect::<Result<Vec<_>>>()?;
    summarize_maps(scans, &maps, params)
}

/// Where the crop augmentation of step 4 centres its prior box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSource {
    /// The box aggregated from saliency in steps 2 and 3.
    Discovered,
    /// Each training volume's own heuristic optic-nerve-head box.
    Heuristic,
    Explicit(CropBox),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerdictRule {
    /// Significance level of the comparison against permuted scores.
    pub alpha: f64,
    /// Cropped AUC at or above this counts as non-trivial regardless of the test.
    pub auc_threshold: f64,
    pub permutation_seed: u64,
}

impl Default for VerdictRule {
    fn default() -> Self {
        VerdictRule { alpha: 0.05, auc_threshold: 0.65, permutation_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagFindConfig {
    pub network: NetworkConfig,
    /// Step 1 training.
    pub train: TrainConfig,
    /// Step 4 training; crop-to-zero is switched on regardless.
    pub retrain: TrainConfig,
    pub region: RegionSource,
    pub discovery: DiscoveryParams,
    pub verdict: VerdictRule,
}

impl Default for DiagFindConfig {
    fn default() -> Self {
        let mut retrain = TrainConfig { epochs: 12, ..Default::default() };
        retrain.optimizer.learning_rate = 3e-4;
        retrain.augment.crop = true;
        DiagFindConfig {
            network: NetworkConfig { growth_rate: 2, ..Default::default() },
            train: TrainConfig { epochs: 10, ..Default::default() },
            retrain,
            region: RegionSource::Discovered,
            discovery: DiscoveryParams::default(),
            verdict: VerdictRule::default(),
        }
    }
}

/// The data a pipeline run consumes. Cropped-evaluation scans are cropped
/// to their record's crop box (else their recorded LC box) before scoring.
#[derive(Clone, Copy, Debug)]
pub struct DiagFindData<'a> {
    pub train: &'a [Scan],
    pub val: &'a [Scan],
    pub test: &'a [Scan],
    pub cropped_eval: &'a [Scan],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub best_eval: usize,
    pub best_step: usize,
    pub val_aucs: Vec<f64>,
    pub log: Vec<LogRecord>,
    /// Test-set metrics at the F2-optimal validation threshold.
    pub test: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CroppedEvaluation {
    pub scores_without_augmentation: ScoredSet,
    pub scores_with_augmentation: ScoredSet,
    pub auc_without_augmentation: f64,
    pub auc_with_augmentation: f64,
    /// Paired comparison of the two models on the cropped set.
    pub p_with_vs_without: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub cropped_auc: f64,
    /// AUC of the same scores after shuffling them across cases.
    pub permuted_auc: f64,
    pub p_value: f64,
    pub significant: bool,
    pub above_threshold: bool,
    pub non_trivial: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagFindReport {
    pub baseline: TrainingSummary,
    pub discovery: RegionDiscovery,
    /// The prior box used by step 4, if one fixed box was used.
    pub crop_prior: Option<CropBox>,
    pub retrained: TrainingSummary,
    pub cropped: CroppedEvaluation,
    pub verdict: Verdict,
    /// Paths of the persisted artifacts, relative to the state directory.
    pub artifacts: Vec<String>,
}

const CONFIG_FILE: &str = "config.json";
const STEP1_MODEL: &str = "step1_model.ckpt";
const STEP1_REPORT: &str = "step1_report.json";
const STEP2_REGION: &str = "step2_region.json";
const STEP4_MODEL: &str = "step4_model.ckpt";
const STEP4_REPORT: &str = "step4_report.json";
const STEP5_CROPPED: &str = "step5_cropped.json";
const FINAL_REPORT: &str = "report.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

fn save_model(path: &Path, net: &Network) -> Result<()> {
    let tmp = path.with_extension("tmp");
    net.save_checkpoint(&tmp)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn check_no_leakage(data: &DiagFindData) -> Result<()> {
    let train: HashSet<&str> = data.train.iter().map(|s| s.record.patient_id.as_str()).collect();
    for (name, set) in [("validation", data.val), ("test", data.test), ("cropped evaluation", data.cropped_eval)] {
        if set.is_empty() {
            return Err(Error::data(format!("{name} set is empty")));
        }
        if let Some(s) = set.iter().find(|s| train.contains(s.record.patient_id.as_str())) {
            return Err(Error::data(format!("patient {} is in training and {name} data", s.record.patient_id)));
        }
    }
    Ok(())
}

/// Crop each scan to its recorded box.
pub fn crop_to_recorded(scans: &[Scan]) -> Result<Vec<Scan>> {
    scans
        .iter()
        .map(|s| Ok(Scan { record: s.record.clone(), volume: apply_crop(&s.volume, &recorded_box(s)?)? }))
        .collect()
}

/// Compare cropped-set scores against the same scores shuffled across cases.
pub fn verdict(scores: &ScoredSet, rule: &VerdictRule) -> Result<Verdict> {
    let mut permuted = scores.clone();
    permuted.scores.shuffle(&mut ChaCha8Rng::seed_from_u64(rule.permutation_seed));
    let d = delong_paired(scores, &permuted)?;
    let cropped_auc = d.auc[0];
    let significant = d.p_value < rule.alpha && cropped_auc > 0.5;
    let above_threshold = cropped_auc >= rule.auc_threshold;
    Ok(Verdict {
        cropped_auc,
        permuted_auc: d.auc[1],
        p_value: d.p_value,
        significant,
        above_threshold,
        non_trivial: cropped_auc > 0.5 && (significant || above_threshold),
    })
}

fn summarize(outcome: &TrainOutcome, val: &[Scan], test: &[Scan], batch: usize) -> Result<TrainingSummary> {
    let v = scored_set(&outcome.best, val, batch)?;
    let t = scored_set(&outcome.best, test, batch)?;
    Ok(TrainingSummary {
        best_eval: outcome.best_eval,
        best_step: outcome.best_step,
        val_aucs: outcome.val_aucs.clone(),
        log: outcome.log.clone(),
        test: EvalReport::evaluate(&v, &t)?,
    })
}

/// Load a step's model and summary, or produce and persist them.
fn trained_step(
    dir: &Path,
    model_file: &str,
    report_file: &str,
    network: &NetworkConfig,
    run: impl FnOnce() -> Result<(Network, TrainingSummary)>,
) -> Result<(Network, TrainingSummary)> {
    let (model_path, report_path) = (dir.join(model_file), dir.join(report_file));
    if model_path.is_file() && report_path.is_file() {
        let net = Network::load_checkpoint_matching(&model_path, network)?;
        return Ok((net, read_json(&report_path)?));
    }
    let (net, summary) = run()?;
    save_model(&model_path, &net)?;
    write_json(&report_path, &summary)?;
    Ok((net, summary))
}

/// Run all six steps, resuming from whatever `state_dir` already holds.
pub fn run_pipeline(config: &DiagFindConfig, data: DiagFindData, state_dir: impl AsRef<Path>) -> Result<DiagFindReport> {
    let dir = state_dir.as_ref();
    config.network.validate()?;
    config.train.validate()?;
    config.retrain.validate()?;
    check_no_leakage(&data)?;
    fs::create_dir_all(dir)?;
    let config_path = dir.join(CONFIG_FILE);
    if config_path.is_file() {
        let stored: DiagFindConfig = read_json(&config_path)?;
        if &stored != config {
            return Err(Error::config(format!(
                "{} holds a run with a different configuration",
                dir.display()
            )));
        }
    } else {
        write_json(&config_path, config)?;
    }
    let batch = config.train.batch_size;

    // Step 1.
    let (baseline_net, baseline) = trained_step(dir, STEP1_MODEL, STEP1_REPORT, &config.network, || {
        let outcome = train(Network::build(config.network.clone())?, data.train, data.val, &config.train)?;
        let summary = summarize(&outcome, data.val, data.test, batch)?;
        Ok((outcome.best, summary))
    })?;

    // Steps 2 and 3.
    let region_path = dir.join(STEP2_REGION);
    let discovery: RegionDiscovery = if region_path.is_file() {
        read_json(&region_path)?
    } else {
        let d = discover_region(&baseline_net, data.test, &config.discovery)?;
        write_json(&region_path, &d)?;
        d
    };

    // Step 4.
    let crop_prior = match &config.region {
        RegionSource::Discovered => Some(discovery.region),
        RegionSource::Heuristic => None,
        RegionSource::Explicit(b) => Some(*b),
    };
    let mut retrain = config.retrain.clone();
    retrain.augment.crop = true;
    retrain.augment.crop_params.prior = crop_prior;
    let (retrained_net, retrained) = trained_step(dir, STEP4_MODEL, STEP4_REPORT, &config.network, || {
        let outcome = train(Network::build(config.network.clone())?, data.train, data.val, &retrain)?;
        let summary = summarize(&outcome, data.val, data.test, batch)?;
        Ok((outcome.best, summary))
    })?;

    // Step 5.
    let cropped_path = dir.join(STEP5_CROPPED);
    let cropped: CroppedEvaluation = if cropped_path.is_file() {
        read_json(&cropped_path)?
    } else {
        let eval = crop_to_recorded(data.cropped_eval)?;
        let without = scored_set(&baseline_net, &eval, batch)?;
        let with = scored_set(&retrained_net, &eval, batch)?;
        let c = CroppedEvaluation {
            auc_without_augmentation: auc(&without)?,
            auc_with_augmentation: auc(&with)?,
            p_with_vs_without: delong_paired(&with, &without)?.p_value,
            scores_without_augmentation: without,
            scores_with_augmentation: with,
        };
        write_json(&cropped_path, &c)?;
        c
    };

    // Step 6.
    let verdict = verdict(&cropped.scores_with_augmentation, &config.verdict)?;
    let report = DiagFindReport {
        baseline,
        discovery,
        crop_prior,
        retrained,
        cropped,
        verdict,
        artifacts: [CONFIG_FILE, STEP1_MODEL, STEP1_REPORT, STEP2_REGION, STEP4_MODEL, STEP4_REPORT, STEP5_CROPPED, FINAL_REPORT]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    write_json(&dir.join(FINAL_REPORT), &report)?;
    Ok(report)
}

/// Path of the final report inside a state directory.
pub fn report_path(state_dir: impl AsRef<Path>) -> PathBuf {
    state_dir.as_ref().join(FINAL_REPORT)
}
