//! Mini-batch training with best-on-validation selection.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adamw_step, AdamWConfig, OptimizerState};
use crate::augment::{crop_to_zero, elastic_deform, random_flip, CropAugParams, ElasticParams};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_runs, auc, EvalReport, ScoredSet};
use crate::network::{Network, NetworkConfig, Prediction};
use crate::phantom::Scan;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

/// Stream ids mixed into the run seed.
const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip: bool,
    /// Volume axes (0 = depth) that may be mirrored, each with probability 1/2.
    pub flip_axes: Vec<usize>,
    pub elastic: bool,
    pub elastic_probability: f64,
    pub elastic_params: ElasticParams,
    pub crop: bool,
    /// Probability that a training sample is cropped to zero.
    pub crop_probability: f64,
    pub crop_params: CropAugParams,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: true,
            flip_axes: vec![1, 2],
            elastic: true,
            elastic_probability: 0.5,
            elastic_params: ElasticParams::default(),
            crop: false,
            crop_probability: 0.8,
            crop_params: CropAugParams::default(),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { flip: false, elastic: false, crop: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.flip_axes.iter().any(|&a| a > 2) {
            return Err(Error::config(format!("flip axes {:?} must be 0, 1 or 2", self.flip_axes)));
        }
        for (name, p) in [("elastic_probability", self.elastic_probability), ("crop_probability", self.crop_probability)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} {p} is outside [0, 1]")));
            }
        }
        self.elastic_params.validate()?;
        self.crop_params.validate()
    }

    /// Augment one volume. Every random choice comes from `seed`.
    pub fn apply(&self, v: &Tensor<f32>, seed: u64) -> Result<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = v.clone();
        if self.flip && !self.flip_axes.is_empty() {
            out = random_flip(&out, &self.flip_axes, rng.random())?.0;
        }
        if self.elastic && rng.random_bool(self.elastic_probability) {
            out = elastic_deform(&out, &self.elastic_params, rng.random())?;
        }
        if self.crop && rng.random_bool(self.crop_probability) {
            out = crop_to_zero(&out, &self.crop_params, rng.random())?.0;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Loss weight of positive cases.
    pub pos_weight: f64,
    /// Evaluate on validation every this many epochs (and after the last).
    pub eval_every: usize,
    pub optimizer: AdamWConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            max_steps: None,
            seed: 0,
            pos_weight: 1.0,
            eval_every: 1,
            optimizer: AdamWConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 || self.max_steps == Some(0) {
            return Err(Error::config("epochs, batch_size, eval_every and max_steps must be positive"));
        }
        if !(self.pos_weight > 0.0 && self.pos_weight.is_finite()) {
            return Err(Error::config(format!("pos_weight {} must be positive", self.pos_weight)));
        }
        self.optimizer.validate()?;
        self.augment.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_auc: Option<f64>,
}

/// Stack `(D, H, W)` volumes into a `(B, D, H, W, 1)` batch.
pub fn batch_input(volumes: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let owned: Vec<Tensor<f32>> = volumes.iter().map(|v| (*v).clone()).collect();
    let stacked = Tensor::stack(&owned)?;
    let mut dims = stacked.dims().to_vec();
    dims.push(1);
    stacked.reshape(dims)
}

/// Predictions for every scan, in order, evaluated `batch` at a time.
pub fn predict(net: &Network, scans: &[Scan], batch: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(scans.len());
    for chunk in scans.chunks(batch.max(1)) {
        let vols: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.volume).collect();
        out.extend(net.forward(&batch_input(&vols)?, &[])?.predictions);
    }
    Ok(out)
}

/// Score every scan by its logit (monotone in the predicted probability, and
/// free of ties from saturation).
pub fn scored_set(net: &Network, scans: &[Scan], batch: usize) -> Result<ScoredSet> {
    let preds = predict(net, scans, batch)?;
    ScoredSet::with_ids(
        preds.iter().map(|p| p.logit).collect(),
        scans.iter().map(Scan::label).collect(),
        scans.iter().map(|s| s.record.scan_id.clone()).collect(),
        scans.iter().map(|s| s.record.patient_id.clone()).collect(),
    )
}

/// Index of the largest value; ties go to the earliest.
pub fn select_best(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

fn check_disjoint(a: &[Scan], b: &[Scan], what: &str) -> Result<()> {
    let ids: HashSet<&str> = a.iter().map(|s| s.record.patient_id.as_str()).collect();
    if let Some(s) = b.iter().find(|s| ids.contains(s.record.patient_id.as_str())) {
        return Err(Error::data(format!("patient {} is in both training and {what} data", s.record.patient_id)));
    }
    Ok(())
}

/// Stepwise trainer over a fixed training set.
pub struct Trainer<'a> {
    net: Network,
    state: OptimizerState,
    config: TrainConfig,
    data: &'a [Scan],
    order: Vec<usize>,
    epoch: usize,
    cursor: usize,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(net: Network, config: TrainConfig, data: &'a [Scan]) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::data("training set is empty"));
        }
        let state = OptimizerState::for_parameters(config.optimizer, net.params())?;
        let mut t = Trainer { net, state, config, data, order: Vec::new(), epoch: 0, cursor: 0, step: 0 };
        t.shuffle();
        Ok(t)
    }

    fn shuffle(&mut self) {
        self.order = (0..self.data.len()).collect();
        let seed = derive_seed(self.config.seed, &[SHUFFLE_STREAM, self.epoch as u64]);
        self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Whether the next step starts a new epoch.
    pub fn at_epoch_start(&self) -> bool {
        self.cursor == 0
    }

    /// One optimizer step on the next batch. The last batch of an epoch may
    /// be short. Returns the log line, without validation.
    pub fn step(&mut self) -> Result<LogRecord> {
        let end = (self.cursor + self.config.batch_size).min(self.data.len());
        let mut vols = Vec::with_capacity(end - self.cursor);
        let mut labels = Vec::with_capacity(end - self.cursor);
        for (pos, &i) in self.order[self.cursor..end].iter().enumerate() {
            let seed =
                derive_seed(self.config.seed, &[AUGMENT_STREAM, self.epoch as u64, (self.cursor + pos) as u64]);
            vols.push(self.config.augment.apply(&self.data[i].volume, seed)?);
            labels.push(self.data[i].label());
        }
        let refs: Vec<&Tensor<f32>> = vols.iter().collect();
        let (loss, grads) = self.net.loss_and_gradients(&batch_input(&refs)?, &labels, self.config.pos_weight)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {loss} at step {}, epoch {}",
                self.step + 1,
                self.epoch
            )));
        }
        adamw_step(&mut self.net.params_mut().tensors, &grads.tensors, &mut self.state)?;
        self.step += 1;
        let record =
            LogRecord { step: self.step, epoch: self.epoch, loss, lr: self.config.optimizer.learning_rate, val_auc: None };
        self.cursor = end;
        if self.cursor == self.data.len() {
            self.cursor = 0;
            self.epoch += 1;
            self.shuffle();
        }
        Ok(record)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The network at the evaluation with the highest validation AUC.
    pub best: Network,
    /// Zero-based index into `val_aucs`.
    pub best_eval: usize,
    pub best_step: usize,
    pub val_aucs: Vec<f64>,
    pub log: Vec<LogRecord>,
}

/// [`train_observed`] without an observer.
pub fn train(net: Network, train_set: &[Scan], val_set: &[Scan], config: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(net, train_set, val_set, config, &mut |_| Ok(()))
}

/// Train, evaluating validation AUC every `eval_every` epochs and after the
/// final step, and keep the best-scoring network. Every log line is passed
/// to `observe` as it is produced.
pub fn train_observed(
    net: Network,
    train_set: &[Scan],
    val_set: &[Scan],
    config: &TrainConfig,
    observe: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if val_set.is_empty() {
        return Err(Error::data("validation set is empty"));
    }
    check_disjoint(train_set, val_set, "validation")?;
    let mut trainer = Trainer::new(net, config.clone(), train_set)?;
    let total = config.max_steps.unwrap_or(usize::MAX);
    let batch = config.batch_size;
    let mut log = Vec::new();
    let mut val_aucs = Vec::new();
    let mut best: Option<(Network, usize)> = None;
    let mut best_eval = 0;
    loop {
        let mut record = trainer.step()?;
        let done = trainer.epoch() >= config.epochs || trainer.steps_taken() >= total;
        let epoch_end = trainer.at_epoch_start();
        if done || (epoch_end && trainer.epoch() % config.eval_every == 0) {
            let value = auc(&scored_set(trainer.network(), val_set, batch)?)?;
            record.val_auc = Some(value);
            val_aucs.push(value);
            if select_best(&val_aucs) == Some(val_aucs.len() - 1) {
                best_eval = val_aucs.len() - 1;
                best = Some((trainer.network().clone(), record.step));
            }
        }
        observe(&record)?;
        log.push(record);
        if done {
            break;
        }
    }
    let (best, best_step) = best.expect("at least one evaluation");
    Ok(TrainOutcome { best, best_eval, best_step, val_aucs, log })
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct SeedRuns {
    pub runs: Vec<SeedRun>,
    pub aggregate: EvalReport,
}

/// Train and evaluate one model per seed. The seed sets both the network
/// initialization and the training stream. The threshold is picked on the
/// validation set; metrics are reported on the test set.
pub fn run_seeds(
    network: &NetworkConfig,
    config: &TrainConfig,
    train_set: &[Scan],
    val_set: &[Scan],
    test_set: &[Scan],
    seeds: &[u64],
) -> Result<SeedRuns> {
    if seeds.is_empty() {
        return Err(Error::config("no seeds given"));
    }
    check_disjoint(train_set, test_set, "test")?;
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let net = Network::build(NetworkConfig { seed, ..network.clone() })?;
        let outcome = train(net, train_set, val_set, &TrainConfig { seed, ..config.clone() })?;
        let val = scored_set(&outcome.best, val_set, config.batch_size)?;
        let test = scored_set(&outcome.best, test_set, config.batch_size)?;
        runs.push(SeedRun { seed, report: EvalReport::evaluate(&val, &test)?, outcome });
    }
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.report.clone()).collect();
    Ok(SeedRuns { aggregate: aggregate_runs(&reports)?, runs })
}
