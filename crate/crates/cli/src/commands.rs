//! One function per subcommand. Each reads its inputs, writes its artifacts
//! into the run directory and prints a short summary.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use lamina::augment::{apply_crop, CropBox};
use lamina::diagfind::{run_pipeline, DiagFindData};
use lamina::metrics::{aggregate_runs, roc_runs_csv, select_threshold_f2, EvalReport, ScoredSet};
use lamina::optim::{predict, run_seeds, LogRecord};
use lamina::phantom::{
    generate, load_scans, read_manifest, split_by_patient, volume_to_bytes, write_dataset, write_manifest,
    DatasetManifest, Scan, Split,
};
use lamina::saliency::{argmax_voxel, export_slices, grad_cam, region_mass, RegionReport};
use lamina::Network;

use crate::config::RunConfig;
use crate::exit::Failure;
use crate::rundir::RunDir;

fn require<'a>(path: Option<&'a Path>, what: &str, flag: &str) -> Result<&'a Path, Failure> {
    let p = path.ok_or_else(|| Failure::config(format!("{what} is required (--{flag})")))?;
    if !p.is_file() {
        return Err(Failure::data(format!("{what} {} does not exist", p.display())));
    }
    Ok(p)
}

fn load_dataset(path: &Path) -> Result<(DatasetManifest, Vec<Scan>), Failure> {
    let manifest = read_manifest(path)?;
    manifest.validate()?;
    let scans = load_scans(path, &manifest)?;
    Ok((manifest, scans))
}

fn in_split(scans: &[Scan], split: Split) -> Vec<Scan> {
    scans.iter().filter(|s| s.record.split == Some(split)).cloned().collect()
}

/// Map `f` over contiguous chunks on up to `threads` threads, keeping order.
/// Chunk lengths are multiples of `align` so batch boundaries do not move.
fn parallel_chunks<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    align: usize,
    f: impl Fn(&[T]) -> Result<Vec<R>, Failure> + Sync,
) -> Result<Vec<R>, Failure> {
    let align = align.max(1);
    let blocks = items.len().div_ceil(align);
    let threads = threads.clamp(1, blocks.max(1));
    if threads == 1 {
        return f(items);
    }
    let per = blocks.div_ceil(threads) * align;
    let results: Vec<Result<Vec<R>, Failure>> = std::thread::scope(|scope| {
        let handles: Vec<_> = items.chunks(per).map(|c| scope.spawn(|| f(c))).collect();
        handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn score(net: &Network, scans: &[Scan], batch: usize, threads: usize) -> Result<ScoredSet, Failure> {
    let preds = parallel_chunks(scans, threads, batch, |c| Ok(predict(net, c, batch)?))?;
    Ok(ScoredSet::with_ids(
        preds.iter().map(|p| p.logit).collect(),
        scans.iter().map(Scan::label).collect(),
        scans.iter().map(|s| s.record.scan_id.clone()).collect(),
        scans.iter().map(|s| s.record.patient_id.clone()).collect(),
    )?)
}

/// Header and one row in the layout of the usual results table: a single
/// run prints plain values, several runs print mean (±std).
pub fn metrics_table(report: &EvalReport) -> String {
    let cells: [String; 4] = match &report.runs {
        Some(r) => [r.auc, r.sensitivity, r.specificity, r.f1].map(|m| m.to_string()),
        None => [report.auc, report.sensitivity, report.specificity, report.f1].map(|v| format!("{v:.4}")),
    };
    let width = cells.iter().map(String::len).max().unwrap_or(0).max(11) + 2;
    let mut out = String::new();
    for h in ["AUC", "Sensitivity", "Specificity", "F1 Score"] {
        out.push_str(&format!("{h:<width$}"));
    }
    out = out.trim_end().to_string();
    out.push('\n');
    for c in &cells {
        out.push_str(&format!("{c:<width$}"));
    }
    out.trim_end().to_string()
}

pub fn generate_dataset(cfg: &RunConfig, run: &mut RunDir) -> Result<(), Failure> {
    let seed = cfg.seeds[0];
    let params = lamina::phantom::PhantomParams { seed, ..cfg.dataset.phantom.clone() };
    let mut scans = generate(&params, cfg.dataset.patients)?;
    let manifest = DatasetManifest { records: scans.iter().map(|s| s.record.clone()).collect() };
    let manifest = split_by_patient(&manifest, cfg.dataset.split, seed)?;
    for (s, r) in scans.iter_mut().zip(manifest.records) {
        s.record = r;
    }
    let dir = run.path.join("dataset");
    let manifest_path = write_dataset(&dir, &scans)?;
    for s in &scans {
        run.record(&format!("dataset/{}", s.record.path))?;
    }
    run.record("dataset/manifest.jsonl")?;
    let count = |k: Split| scans.iter().filter(|s| s.record.split == Some(k)).count();
    println!(
        "generated {} scans from {} patients (train {}, val {}, test {})",
        scans.len(),
        cfg.dataset.patients,
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    checkpoint: String,
    log: String,
    best_eval: usize,
    best_step: usize,
    val_aucs: Vec<f64>,
    report: EvalReport,
}

#[derive(Serialize)]
struct TrainReport {
    seeds: Vec<SeedSummary>,
    aggregate: EvalReport,
}

pub fn train(cfg: &RunConfig, run: &mut RunDir) -> Result<(), Failure> {
    let path = require(cfg.inputs.manifest.as_deref(), "dataset manifest", "manifest")?;
    let (_, scans) = load_dataset(path)?;
    let (tr, va, te) = (in_split(&scans, Split::Train), in_split(&scans, Split::Val), in_split(&scans, Split::Test));
    for (name, set) in [("train", &tr), ("val", &va), ("test", &te)] {
        if set.is_empty() {
            return Err(Failure::data(format!("manifest has no {name} split (generate assigns splits)")));
        }
    }
    let runs = run_seeds(&cfg.network, &cfg.train, &tr, &va, &te, &cfg.seeds)?;
    let mut seeds = Vec::new();
    for r in &runs.runs {
        let ckpt = run.write_hashed(&format!("model-seed{}", r.seed), "ckpt", &r.outcome.best.to_checkpoint_bytes()?)?;
        let log = run.write_hashed(&format!("log-seed{}", r.seed), "jsonl", log_lines(&r.outcome.log)?.as_bytes())?;
        seeds.push(SeedSummary {
            seed: r.seed,
            checkpoint: run.relative(&ckpt),
            log: run.relative(&log),
            best_eval: r.outcome.best_eval,
            best_step: r.outcome.best_step,
            val_aucs: r.outcome.val_aucs.clone(),
            report: r.report.clone(),
        });
    }
    let reports: Vec<EvalReport> = runs.runs.iter().map(|r| r.report.clone()).collect();
    run.write_hashed("roc", "csv", roc_runs_csv(&reports).as_bytes())?;
    let aggregate = runs.aggregate.clone();
    let report = run.write_hashed("report", "json", &serde_json::to_vec_pretty(&TrainReport { seeds, aggregate })?)?;
    let shown = if runs.runs.len() == 1 { &runs.runs[0].report } else { &runs.aggregate };
    println!("{}", metrics_table(shown));
    println!("report: {}", report.display());
    Ok(())
}

fn log_lines(log: &[LogRecord]) -> Result<String, Failure> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Serialize)]
struct EvalOutput {
    /// Where the F2-optimal threshold was chosen.
    threshold_source: String,
    cropped: bool,
    per_model: Vec<ModelEval>,
    aggregate: Option<EvalReport>,
}

#[derive(Serialize)]
struct ModelEval {
    source: String,
    report: EvalReport,
    scores: ScoredSet,
}

fn crop_scans(scans: &[Scan]) -> Result<Vec<Scan>, Failure> {
    scans
        .iter()
        .map(|s| {
            let b = s
                .record
                .crop_box
                .ok_or_else(|| Failure::data(format!("scan {} has no crop box (see `lamina crop`)", s.record.scan_id)))?;
            Ok(Scan { record: s.record.clone(), volume: apply_crop(&s.volume, &b)? })
        })
        .collect()
}

/// Rows of `scan_id,label,score[,split]`; a header row is optional.
fn read_scores(path: &Path) -> Result<(ScoredSet, Vec<Option<Split>>), Failure> {
    let text = fs::read_to_string(path)?;
    let (mut scores, mut labels, mut ids, mut splits) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("scan_id")) {
            continue;
        }
        let bad = |what: &str| Failure::new(crate::exit::FORMAT, format!("{}:{}: {what}", path.display(), i + 1));
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(3..=4).contains(&cols.len()) {
            return Err(bad("expected scan_id,label,score[,split]"));
        }
        let label: u8 = cols[1].parse().map_err(|_| bad("label must be 0 or 1"))?;
        let score: f64 = cols[2].parse().map_err(|_| bad("score is not a number"))?;
        let split = match cols.get(3).copied() {
            None | Some("") => None,
            Some("train") => Some(Split::Train),
            Some("val") => Some(Split::Val),
            Some("test") => Some(Split::Test),
            Some(_) => return Err(bad("split must be train, val or test")),
        };
        ids.push(cols[0].to_string());
        labels.push(label);
        scores.push(score);
        splits.push(split);
    }
    Ok((ScoredSet::with_ids(scores, labels, ids.clone(), ids)?, splits))
}

fn subset(set: &ScoredSet, keep: impl Fn(usize) -> bool) -> Result<ScoredSet, Failure> {
    let idx: Vec<usize> = (0..set.len()).filter(|&i| keep(i)).collect();
    Ok(ScoredSet::with_ids(
        idx.iter().map(|&i| set.scores[i]).collect(),
        idx.iter().map(|&i| set.labels[i]).collect(),
        idx.iter().map(|&i| set.scan_ids[i].clone()).collect(),
        idx.iter().map(|&i| set.patient_ids[i].clone()).collect(),
    )?)
}

pub fn eval(cfg: &RunConfig, run: &mut RunDir) -> Result<(), Failure> {
    let mut per_model = Vec::new();
    let threshold_source;
    if let Some(path) = &cfg.inputs.scores {
        let path = require(Some(path.as_path()), "score file", "scores")?;
        let (all, splits) = read_scores(path)?;
        let has = |k: Split| splits.contains(&Some(k));
        let val = if has(Split::Val) { subset(&all, |i| splits[i] == Some(Split::Val))? } else { all.clone() };
        let test = if has(Split::Test) { subset(&all, |i| splits[i] == Some(Split::Test))? } else { all.clone() };
        threshold_source = if has(Split::Val) { "val rows" } else { "evaluated rows" }.to_string();
        let report = EvalReport::at_threshold(&test, select_threshold_f2(&val)?)?;
        per_model.push(ModelEval { source: path.display().to_string(), report, scores: test });
    } else {
        if cfg.inputs.checkpoints.is_empty() {
            return Err(Failure::config("eval needs --checkpoint (one or more) or --scores"));
        }
        let path = require(cfg.inputs.manifest.as_deref(), "dataset manifest", "manifest")?;
        let (_, scans) = load_dataset(path)?;
        let mut val = in_split(&scans, Split::Val);
        let mut test = in_split(&scans, Split::Test);
        if test.is_empty() {
            test = scans.clone();
        }
        threshold_source = if val.is_empty() { "evaluated scans" } else { "val split" }.to_string();
        if cfg.eval.cropped {
            test = crop_scans(&test)?;
            val = crop_scans(&val)?;
        }
        for ckpt in &cfg.inputs.checkpoints {
            let net = Network::load_checkpoint(require(Some(ckpt.as_path()), "checkpoint", "checkpoint")?)?;
            let t = score(&net, &test, cfg.eval.batch_size, cfg.worker_threads())?;
            let v = if val.is_empty() { t.clone() } else { score(&net, &val, cfg.eval.batch_size, cfg.worker_threads())? };
            let report = EvalReport::evaluate(&v, &t)?;
            per_model.push(ModelEval { source: ckpt.display().to_string(), report, scores: t });
        }
    }
    let aggregate = if per_model.len() > 1 {
        Some(aggregate_runs(&per_model.iter().map(|m| m.report.clone()).collect::<Vec<_>>())?)
    } else {
        None
    };
    let shown = aggregate.clone().unwrap_or_else(|| per_model[0].report.clone());
    let out = EvalOutput { threshold_source, cropped: cfg.eval.cropped, per_model, aggregate };
    let report = run.write_hashed("eval", "json", &serde_json::to_vec_pretty(&out)?)?;
    println!("{}", metrics_table(&shown));
    println!("report: {}", report.display());
    Ok(())
}

#[derive(Serialize)]
struct CaseMap {
    scan_id: String,
    label: u8,
    layer: String,
    predicted_glaucoma: bool,
    logit: f64,
    max_before_normalization: f64,
    all_zero: bool,
    argmax: [usize; 3],
    /// Against the record's crop box, else its recorded LC box.
    region: Option<RegionReport>,
    map: String,
    images: Vec<String>,
}

pub fn saliency(cfg: &RunConfig, run: &mut RunDir) -> Result<(), Failure> {
    let ckpt = match cfg.inputs.checkpoints.as_slice() {
        [one] => require(Some(one.as_path()), "checkpoint", "checkpoint")?,
        _ => return Err(Failure::config("saliency needs exactly one --checkpoint")),
    };
    let net = Network::load_checkpoint(ckpt)?;
    let path = require(cfg.inputs.manifest.as_deref(), "dataset manifest", "manifest")?;
    let (_, scans) = load_dataset(path)?;
    let chosen: Vec<Scan> = if cfg.saliency.scans.is_empty() {
        let test = in_split(&scans, Split::Test);
        if test.is_empty() {
            scans
        } else {
            test
        }
    } else {
        let by_id: HashMap<&str, &Scan> = scans.iter().map(|s| (s.record.scan_id.as_str(), s)).collect();
        cfg.saliency
            .scans
            .iter()
            .map(|id| by_id.get(id.as_str()).map(|s| (*s).clone()).ok_or_else(|| Failure::data(format!("scan {id} is not in the manifest"))))
            .collect::<Result<_, _>>()?
    };
    let layer = cfg.saliency.layer.clone().unwrap_or_else(|| net.default_saliency_layer().to_string());
    let maps = parallel_chunks(&chosen, cfg.worker_threads(), 1, |c| {
        c.iter().map(|s| Ok(grad_cam(&net, &s.volume, &layer)?)).collect()
    })?;
    let axis = cfg.saliency.axis;
    let mut cases = Vec::new();
    for (s, m) in chosen.iter().zip(&maps) {
        let indices = if cfg.saliency.slices.is_empty() { vec![s.volume.dims()[axis] / 2] } else { cfg.saliency.slices.clone() };
        let written = export_slices(m, &s.volume, axis, &indices, run.path.join("slices"), &s.record.scan_id)?;
        let mut images = Vec::new();
        for w in &written {
            let rel = run.relative(w);
            run.record(&rel)?;
            images.push(rel);
        }
        let map_path = run.write_hashed(&format!("maps/{}", s.record.scan_id), "octv", &volume_to_bytes(&m.volume)?)?;
        let region_box: Option<CropBox> = s.record.crop_box.or_else(|| s.record.anatomy().map(|a| a.lc_box));
        let region = region_box.map(|b| region_mass(m, &b, cfg.saliency.threshold)).transpose()?;
        cases.push(CaseMap {
            scan_id: s.record.scan_id.clone(),
            label: s.label(),
            layer: m.layer.clone(),
            predicted_glaucoma: m.predicted_glaucoma,
            logit: m.logit,
            max_before_normalization: m.max_before_normalization,
            all_zero: m.all_zero,
            argmax: argmax_voxel(&m.volume),
            region,
            map: run.relative(&map_path),
            images,
        });
    }
    let highlighted = cases.iter().filter(|c| c.region.as_ref().is_some_and(|r| r.highlighted)).count();
    let with_region = cases.iter().filter(|c| c.region.is_some()).count();
    let report = run.write_hashed("saliency", "json", &serde_json::to_vec_pretty(&cases)?)?;
    println!("{} saliency maps from layer {layer}; region highlighted in {highlighted}/{with_region}", cases.len());
    println!("report: {}", report.display());
    Ok(())
}

/// One line of a crop-box file. `"*"` applies to every scan without its own line.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxLine {
    scan_id: String,
    #[serde(rename = "box")]
    region: CropBox,
}

fn read_boxes(path: &Path) -> Result<BTreeMap<String, CropBox>, Failure> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let b: BoxLine = serde_json::from_str(line)
            .map_err(|e| Failure::new(crate::exit::FORMAT, format!("{}:{}: {e}", path.display(), i + 1)))?;
        if out.insert(b.scan_id.clone(), b.region).is_some() {
            return Err(Failure::data(format!("{}:{}: second box for {}", path.display(), i + 1, b.scan_id)));
        }
    }
    Ok(out)
}

pub fn crop(cfg: &RunConfig, run: &mut RunDir) -> Result<(), Failure> {
    let manifest_path = require(cfg.inputs.manifest.as_deref(), "dataset manifest", "manifest")?;
    let boxes = read_boxes(require(cfg.inputs.box_file.as_deref(), "crop-box file", "box")?)?;
    let (mut manifest, scans) = load_dataset(manifest_path)?;
    let known: std::collections::HashSet<&str> = manifest.records.iter().map(|r| r.scan_id.as_str()).collect();
    if let Some(id) = boxes.keys().find(|k| *k != "*" && !known.contains(k.as_str())) {
        return Err(Failure::data(format!("crop-box file names scan {id}, which is not in the manifest")));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let base = fs::canonicalize(base)?;
    let mut attached = 0;
    for (r, s) in manifest.records.iter_mut().zip(&scans) {
        if let Some(b) = boxes.get(&r.scan_id).or_else(|| boxes.get("*")) {
            apply_crop(&s.volume, b)?;
            r.crop_box = Some(*b);
            attached += 1;
        }
        r.path = base.join(&r.path).to_string_lossy().into_owned();
    }
    let out = run.path.join("manifest.jsonl");
    write_manifest(&out, &manifest)?;
    run.record("manifest.jsonl")?;
    println!("attached crop boxes to {attached}/{} scans", manifest.records.len());
    println!("manifest: {}", out.display());
    Ok(())
}

pub fn diagfind(cfg: &RunConfig, run: &mut RunDir) -> Result<(), Failure> {
    let (_, scans) = load_dataset(require(cfg.inputs.manifest.as_deref(), "dataset manifest", "manifest")?)?;
    let (_, eval) = load_dataset(require(cfg.inputs.eval_manifest.as_deref(), "cropped evaluation manifest", "eval-manifest")?)?;
    let (tr, va, te) = (in_split(&scans, Split::Train), in_split(&scans, Split::Val), in_split(&scans, Split::Test));
    let state = run.path.join("state");
    let report = run_pipeline(
        &cfg.diagfind_config(),
        DiagFindData { train: &tr, val: &va, test: &te, cropped_eval: &eval },
        &state,
    )?;
    for a in &report.artifacts {
        run.record(&format!("state/{a}"))?;
    }
    let path = run.write_hashed("diagfind", "json", &serde_json::to_vec_pretty(&report)?)?;
    let rates = &report.discovery.rates;
    let rate = |r: Option<f64>| r.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    println!("whole-volume model test AUC {:.4}", report.baseline.test.auc);
    println!(
        "discovered region {:?}; highlight rate glaucoma-predicted {} ({}/{}), normal-predicted {} ({}/{})",
        report.discovery.region.axes(),
        rate(rates.glaucoma()),
        rates.glaucoma_highlighted,
        rates.glaucoma_cases,
        rate(rates.normal()),
        rates.normal_highlighted,
        rates.normal_cases
    );
    println!("crop-augmented model test AUC {:.4}", report.retrained.test.auc);
    println!(
        "cropped evaluation AUC without augmentation {:.4}, with augmentation {:.4}",
        report.cropped.auc_without_augmentation, report.cropped.auc_with_augmentation
    );
    let v = &report.verdict;
    println!(
        "verdict: {} (AUC {:.4} vs permuted {:.4}, p = {:.3e}, threshold met: {})",
        if v.non_trivial { "region carries diagnostic signal" } else { "no evidence of signal in the region" },
        v.cropped_auc,
        v.permuted_auc,
        v.p_value,
        v.above_threshold
    );
    println!("report: {}", path.display());
    Ok(())
}
