//! Critic-regularized classifier training.
//!
//! Each epoch first trains the critic for `critic_iters` batches to separate
//! aligned `(z_y, z_a)` pairs from shuffled ones, then trains the classifier
//! for `classifier_iters` batches on cross-entropy plus `beta` times the
//! critic's estimate. The attribute model is never updated; its
//! representations only enter through `z_a`.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{seeded_stream, split, BatchSampler, Dataset};
use crate::demonic::{demonic_predict, DemonicBundle};
use crate::dependency::{critic_ascent_step, critic_objective, critic_value, shuffle_pairing, PairBatch};
use crate::error::{Result, WfcError};
use crate::io::{mlp_from_tensors, mlp_tensors, Bundle, BundleKind};
use crate::metrics::{balanced_accuracy_of, dto, fairness_score, PredictionTable};
use crate::nn::{
    argmax_rows, select_rows, softmax_cross_entropy, Activation, LayerSelector, MlpParams, OptimizerKind,
    OptimizerState,
};

// RNG sub-streams of the run seed.
const STREAM_CLASSIFIER: u64 = 1;
const STREAM_CRITIC: u64 = 2;
const STREAM_REGULARIZER: u64 = 3;
const STREAM_IW_EVAL: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Regularize on every row.
    Dp,
    /// Regularize only on rows the classifier currently gets right.
    Eo,
}

impl std::str::FromStr for Variant {
    type Err = WfcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dp" => Ok(Variant::Dp),
            "eo" => Ok(Variant::Eo),
            other => Err(WfcError::config(format!("unknown variant {other:?} (expected dp or eo)"))),
        }
    }
}

/// Every knob of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    pub epochs: usize,
    pub critic_iters: usize,
    pub classifier_iters: usize,
    pub batch_size: usize,
    pub classifier_lr: f64,
    pub critic_lr: f64,
    pub critic_optimizer: OptimizerKind,
    pub clip: f64,
    pub layer: LayerSelector,
    pub variant: Variant,
    pub bteo: bool,
    /// Use one-hot predicted groups instead of attribute-model representations as `z_a`.
    pub hard_labels: bool,
    pub seed: u64,
    pub pnorm: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub critic_hidden: usize,
    /// Batches averaged for the per-epoch dependency estimate in the log.
    pub iw_eval_batches: usize,
    /// Fraction held out for validation by [`train_wfc`].
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 1.0,
            epochs: 200,
            critic_iters: 20,
            classifier_iters: 5,
            batch_size: 128,
            classifier_lr: 1e-4,
            critic_lr: 5e-5,
            critic_optimizer: OptimizerKind::Adam,
            clip: 0.01,
            layer: LayerSelector::LastHidden,
            variant: Variant::Dp,
            bteo: false,
            hard_labels: false,
            seed: 0,
            pnorm: 2.0,
            hidden: vec![300, 300],
            activation: Activation::Tanh,
            critic_hidden: 512,
            iw_eval_batches: 5,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(WfcError::config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.epochs == 0 || self.critic_iters == 0 || self.classifier_iters == 0 || self.batch_size == 0 {
            return Err(WfcError::config("epochs, nc, nd and batch size must be positive"));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(WfcError::config(format!("clip must be > 0, got {}", self.clip)));
        }
        if self.critic_hidden == 0 || self.iw_eval_batches == 0 {
            return Err(WfcError::config("critic width and estimate batches must be positive"));
        }
        if !(self.pnorm >= 1.0 && self.pnorm.is_finite()) {
            return Err(WfcError::config(format!("pnorm must be >= 1, got {}", self.pnorm)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(WfcError::config(format!(
                "validation fraction must be in (0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Measurements of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of `ce + beta * estimate` over the classifier batches.
    pub loss: f64,
    pub ce_loss: f64,
    /// Mean critic estimate over the classifier batches (the regularizer).
    pub reg_estimate: f64,
    /// Critic estimate on fresh batches after the epoch.
    pub iw_estimate: f64,
    pub val_acc: f64,
    pub val_fairness: f64,
    /// Distance to the run's utopia point; filled in when the run ends.
    pub val_dto: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: Option<usize>,
    pub utopia: Option<(f64, f64)>,
    pub warnings: Vec<String>,
}

pub const TRAIN_LOG_COLUMNS: [&str; 6] = ["epoch", "loss", "iw_estimate", "val_acc", "val_fairness", "val_dto"];

impl TrainLog {
    /// CSV with columns `epoch,loss,iw_estimate,val_acc,val_fairness,val_dto`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fmt = |e: csv::Error| WfcError::Format(e.to_string());
        w.write_record(TRAIN_LOG_COLUMNS).map_err(fmt)?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.loss.to_string(),
                r.iw_estimate.to_string(),
                r.val_acc.to_string(),
                r.val_fairness.to_string(),
                r.val_dto.to_string(),
            ])
            .map_err(fmt)?;
        }
        w.into_inner().map_err(|e| WfcError::Format(e.to_string()))
    }

    /// Recompute DTO against `utopia` and pick the minimizing epoch.
    pub fn finalize(&mut self, utopia: (f64, f64)) -> Result<usize> {
        for r in &mut self.epochs {
            r.val_dto = dto((r.val_acc, r.val_fairness), utopia);
        }
        self.utopia = Some(utopia);
        let best = select_best_epoch(self)?;
        self.selected_epoch = Some(best);
        Ok(best)
    }

    /// Best validation accuracy and fairness observed in the run.
    pub fn run_utopia(&self) -> Option<(f64, f64)> {
        if self.epochs.is_empty() {
            return None;
        }
        let acc = self.epochs.iter().map(|r| r.val_acc).fold(f64::NEG_INFINITY, f64::max);
        let fair = self.epochs.iter().map(|r| r.val_fairness).fold(f64::NEG_INFINITY, f64::max);
        Some((acc, fair))
    }
}

/// Epoch with the smallest validation DTO; ties go to the earliest.
pub fn select_best_epoch(log: &TrainLog) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in log.epochs.iter().enumerate() {
        if best.is_none_or(|(_, d)| r.val_dto < d) {
            best = Some((i, r.val_dto));
        }
    }
    best.map(|(i, _)| i).ok_or_else(|| WfcError::InvalidState("training log is empty".into()))
}

/// Positions of the rows the classifier currently predicts correctly.
pub fn wfc_eo_filter(predictions: &[usize], labels: &[usize]) -> Vec<usize> {
    predictions
        .iter()
        .zip(labels)
        .enumerate()
        .filter(|(_, (p, y))| p == y)
        .map(|(i, _)| i)
        .collect()
}

/// Draws rows so that, within each class, every group present is equally likely.
#[derive(Clone, Debug)]
pub struct BteoSampler {
    /// `(class weight, groups)`; each group holds its row indices.
    classes: Vec<(f64, Vec<Vec<usize>>)>,
    rng: ChaCha8Rng,
    warnings: Vec<String>,
}

impl BteoSampler {
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn draw(&mut self) -> usize {
        let total: f64 = self.classes.iter().map(|(w, _)| w).sum();
        let mut u = self.rng.random_range(0.0..total);
        let mut pick = self.classes.len() - 1;
        for (i, (w, _)) in self.classes.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        let groups = &self.classes[pick].1;
        let g = &groups[self.rng.random_range(0..groups.len())];
        g[self.rng.random_range(0..g.len())]
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size).map(|_| self.draw()).collect()
    }
}

/// Build a balanced-training sampler over rows with labels `y` and groups `a`.
/// Classes keep their empirical frequency.
pub fn bteo_resample(y: &[usize], a: &[usize], rng: ChaCha8Rng) -> Result<BteoSampler> {
    if y.len() != a.len() {
        return Err(WfcError::shape("labels and groups differ in length"));
    }
    if y.is_empty() {
        return Err(WfcError::config("cannot resample an empty dataset"));
    }
    let c = y.iter().max().map_or(0, |m| m + 1);
    let k = a.iter().max().map_or(0, |m| m + 1);
    let mut cells = vec![vec![Vec::new(); k]; c];
    for (i, (&yi, &ai)) in y.iter().zip(a).enumerate() {
        cells[yi][ai].push(i);
    }
    let mut classes = Vec::new();
    let mut warnings = Vec::new();
    for (yi, groups) in cells.into_iter().enumerate() {
        let size: usize = groups.iter().map(Vec::len).sum();
        let present: Vec<Vec<usize>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
        if present.is_empty() {
            continue;
        }
        if present.len() == 1 {
            warnings.push(format!("class {yi} has a single group; it is sampled unbalanced"));
        }
        classes.push((size as f64, present));
    }
    Ok(BteoSampler {
        classes,
        rng,
        warnings,
    })
}

/// A trained classifier and the record of how it was trained.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub classifier: MlpParams,
    pub config: TrainConfig,
    pub demonic_id: Option<String>,
    pub log: TrainLog,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    layer_dims: Vec<usize>,
    activation: Activation,
    config: TrainConfig,
    demonic_id: Option<String>,
    log: TrainLog,
}

impl ModelBundle {
    pub fn to_bundle(&self) -> Result<Bundle> {
        let header = ModelHeader {
            layer_dims: self.classifier.layer_dims().to_vec(),
            activation: self.classifier.activation(),
            config: self.config.clone(),
            demonic_id: self.demonic_id.clone(),
            log: self.log.clone(),
        };
        Ok(Bundle {
            kind: BundleKind::Model,
            config: serde_json::to_value(header).map_err(|e| WfcError::Format(e.to_string()))?,
            tensors: mlp_tensors("classifier", &self.classifier),
        })
    }

    pub fn from_bundle(bundle: &Bundle) -> Result<Self> {
        if bundle.kind != BundleKind::Model {
            return Err(WfcError::Format("not a model bundle".into()));
        }
        let h: ModelHeader =
            serde_json::from_value(bundle.config.clone()).map_err(|e| WfcError::Format(e.to_string()))?;
        let classifier = mlp_from_tensors(bundle, "classifier", h.layer_dims.len() - 1, h.activation)?;
        Ok(ModelBundle {
            classifier,
            config: h.config,
            demonic_id: h.demonic_id,
            log: h.log,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_bundle()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        ModelBundle::from_bundle(&Bundle::read(path)?)
    }

    pub fn predict(&self, dataset: &Dataset) -> Result<Vec<usize>> {
        if dataset.dim() != self.classifier.input_dim() {
            return Err(WfcError::shape(format!(
                "dataset has {} features, model expects {}",
                dataset.dim(),
                self.classifier.input_dim()
            )));
        }
        self.classifier.predict(dataset.embeddings())
    }

    /// Classifier representation at the training layer.
    pub fn representations(&self, dataset: &Dataset) -> Result<Array2<f64>> {
        let trace = self.classifier.forward(dataset.embeddings())?;
        Ok(trace.hidden_representation(self.config.layer)?.to_owned())
    }
}

/// Split off a validation set and train.
pub fn train_wfc(data: &Dataset, demonic: &DemonicBundle, config: &TrainConfig) -> Result<ModelBundle> {
    config.validate()?;
    let (train, val, _) = split(data, [1.0 - config.val_fraction, config.val_fraction, 0.0], config.seed)?;
    train_wfc_with_validation(&train, &val, demonic, config)
}

/// Undominated `(accuracy, fairness)` snapshots; the DTO-best epoch for any
/// utopia at or above every point is always among them.
struct ParetoSnapshots {
    points: Vec<(usize, f64, f64, MlpParams)>,
}

impl ParetoSnapshots {
    fn offer(&mut self, epoch: usize, acc: f64, fair: f64, params: &MlpParams) {
        if self.points.iter().any(|(_, a, f, _)| *a >= acc && *f >= fair) {
            return;
        }
        self.points.retain(|(_, a, f, _)| !(acc >= *a && fair >= *f));
        self.points.push((epoch, acc, fair, params.clone()));
    }

    fn take(self, epoch: usize) -> Option<MlpParams> {
        self.points.into_iter().find(|(e, ..)| *e == epoch).map(|p| p.3)
    }
}

/// Validation groups: true attributes when present, else attribute-model predictions.
fn validation_groups(val: &Dataset, demonic: &DemonicBundle, warnings: &mut Vec<String>) -> Result<Vec<usize>> {
    match val.a() {
        Some(a) => Ok(a.to_vec()),
        None => {
            warnings.push("validation set has no attributes; fairness uses predicted groups".into());
            demonic_predict(demonic, val)
        }
    }
}

struct Run<'a> {
    config: &'a TrainConfig,
    demonic: &'a DemonicBundle,
    x: ArrayView2<'a, f64>,
    y: &'a [usize],
}

impl Run<'_> {
    fn za(&self, xb: ArrayView2<f64>) -> Result<Array2<f64>> {
        let trace = self.demonic.params.forward(xb)?;
        if self.config.hard_labels {
            let pred = argmax_rows(trace.logits());
            let k = self.demonic.num_groups();
            return Ok(Array2::from_shape_fn((pred.len(), k), |(i, g)| f64::from(u8::from(pred[i] == g))));
        }
        Ok(trace.hidden_representation(self.config.layer)?.to_owned())
    }

    /// Dependent pairs for the batch `idx`, restricted by the EO filter.
    fn pairs(&self, classifier: &MlpParams, idx: &[usize]) -> Result<(PairBatch, Vec<usize>)> {
        let xb = select_rows(self.x, idx);
        let trace = classifier.forward(xb.view())?;
        let keep = self.keep_rows(trace.logits(), idx);
        let zy = select_rows(trace.hidden_representation(self.config.layer)?, &keep);
        let za = select_rows(self.za(xb.view())?.view(), &keep);
        Ok((PairBatch::new(zy, za)?, keep))
    }

    fn keep_rows(&self, logits: ArrayView2<f64>, idx: &[usize]) -> Vec<usize> {
        match self.config.variant {
            Variant::Dp => (0..idx.len()).collect(),
            Variant::Eo => {
                let labels: Vec<usize> = idx.iter().map(|&i| self.y[i]).collect();
                wfc_eo_filter(&argmax_rows(logits), &labels)
            }
        }
    }
}

fn check_inputs(train: &Dataset, val: &Dataset, demonic: &DemonicBundle, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    train.require_y()?;
    val.require_y()?;
    if train.is_empty() || val.is_empty() {
        return Err(WfcError::config("training and validation sets must be nonempty"));
    }
    for (name, d) in [("training", train), ("validation", val)] {
        if d.dim() != demonic.params.input_dim() {
            return Err(WfcError::shape(format!(
                "{name} data has {} features, attribute model expects {}",
                d.dim(),
                demonic.params.input_dim()
            )));
        }
    }
    Ok(())
}

/// Training with an explicit validation set (used for per-epoch metrics
/// and DTO-based selection of the returned parameters).
pub fn train_wfc_with_validation(
    train: &Dataset,
    val: &Dataset,
    demonic: &DemonicBundle,
    config: &TrainConfig,
) -> Result<ModelBundle> {
    check_inputs(train, val, demonic, config)?;
    let y = train.require_y()?;
    let num_classes = train.num_classes().max(val.num_classes());
    let mut log = TrainLog::default();
    let val_groups = validation_groups(val, demonic, &mut log.warnings)?;

    let mut dims = vec![train.dim()];
    dims.extend(&config.hidden);
    dims.push(num_classes);
    let mut classifier = MlpParams::init(&dims, config.activation, config.seed)?;
    let mut opt = OptimizerState::new(OptimizerKind::Adam, config.classifier_lr, &classifier)?;

    let run = Run {
        config,
        demonic,
        x: train.embeddings(),
        y,
    };
    let zy_width = classifier.representation_dim(config.layer)?;
    let za_width = if config.hard_labels {
        demonic.num_groups()
    } else {
        demonic.params.representation_dim(config.layer)?
    };
    let mut critic = MlpParams::init(
        &[zy_width + za_width, config.critic_hidden, 1],
        Activation::Relu,
        config.seed ^ 0xc417,
    )?;
    critic.clip_weights(config.clip);
    let mut critic_opt = OptimizerState::new(config.critic_optimizer, config.critic_lr, &critic)?;

    let mut batches = ClassifierBatches::new(train, demonic, config, &mut log.warnings)?;
    let mut critic_sampler = BatchSampler::new(train.len(), seeded_stream(config.seed, STREAM_CRITIC));
    let mut critic_rng = seeded_stream(config.seed, STREAM_CRITIC + 100);
    let mut reg_rng = seeded_stream(config.seed, STREAM_REGULARIZER);
    let mut eval_sampler = BatchSampler::new(train.len(), seeded_stream(config.seed, STREAM_IW_EVAL));
    let mut eval_rng = seeded_stream(config.seed, STREAM_IW_EVAL + 100);

    let mut snapshots = ParetoSnapshots { points: Vec::new() };
    for epoch in 0..config.epochs {
        for _ in 0..config.critic_iters {
            let (dep, _) = run.pairs(&classifier, &critic_sampler.next_batch(config.batch_size))?;
            if dep.is_empty() {
                continue;
            }
            let ind = shuffle_pairing(&dep, &mut critic_rng);
            critic_ascent_step(&mut critic, &mut critic_opt, &dep, &ind, config.clip).map_err(|e| diverged(e, epoch))?;
        }

        let (mut ce_sum, mut reg_sum) = (0.0, 0.0);
        for _ in 0..config.classifier_iters {
            let idx = batches.next_batch(config.batch_size);
            let xb = select_rows(run.x, &idx);
            let labels: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let trace = classifier.forward(xb.view())?;
            let (ce, logit_grad) = softmax_cross_entropy(trace.logits(), &labels).map_err(|e| diverged(e, epoch))?;
            let keep = run.keep_rows(trace.logits(), &idx);
            let mut reg = 0.0;
            let mut injected = None;
            if !keep.is_empty() {
                let zy = select_rows(trace.hidden_representation(config.layer)?, &keep);
                let za = select_rows(run.za(xb.view())?.view(), &keep);
                let dep = PairBatch::new(zy, za)?;
                let ind = shuffle_pairing(&dep, &mut reg_rng);
                let eval = critic_objective(&critic, &dep, &ind)?;
                reg = eval.value;
                if config.beta > 0.0 {
                    let g = eval.zy_grad(zy_width) * config.beta;
                    let mut full = Array2::zeros((idx.len(), zy_width));
                    for (row, &pos) in keep.iter().enumerate() {
                        full.row_mut(pos).assign(&g.row(row));
                    }
                    injected = Some(full);
                }
            }
            let grads = match &injected {
                Some(g) => classifier.backward_with(&trace, Some(logit_grad.view()), &[(config.layer, g.view())])?,
                None => classifier.backward(&trace, logit_grad.view())?,
            };
            if !(ce + config.beta * reg).is_finite() || !grads.is_finite() {
                return Err(WfcError::TrainingDiverged {
                    epoch,
                    reason: "non-finite loss or gradient".into(),
                });
            }
            opt.step(&mut classifier, &grads).map_err(|e| diverged(e, epoch))?;
            if !classifier.is_finite() {
                return Err(WfcError::TrainingDiverged {
                    epoch,
                    reason: "classifier weights became non-finite".into(),
                });
            }
            ce_sum += ce;
            reg_sum += reg;
        }
        let nd = config.classifier_iters as f64;
        let (ce_loss, reg_estimate) = (ce_sum / nd, reg_sum / nd);

        let mut iw_sum = 0.0;
        let mut iw_count = 0usize;
        for _ in 0..config.iw_eval_batches {
            let (dep, _) = run.pairs(&classifier, &eval_sampler.next_batch(config.batch_size))?;
            if dep.is_empty() {
                continue;
            }
            let ind = shuffle_pairing(&dep, &mut eval_rng);
            iw_sum += critic_value(&critic, &dep, &ind)?;
            iw_count += 1;
        }
        let iw_estimate = if iw_count == 0 { 0.0 } else { iw_sum / iw_count as f64 };

        let pred = classifier.predict(val.embeddings())?;
        let val_y = val.require_y()?;
        let val_acc = balanced_accuracy_of(val_y, &pred, num_classes)?;
        let table = PredictionTable::new(val_y.to_vec(), pred, val_groups.clone(), num_classes, 2)?;
        let val_fairness = fairness_score(&table)?;
        if !(ce_loss.is_finite() && iw_estimate.is_finite()) {
            return Err(WfcError::TrainingDiverged {
                epoch,
                reason: "non-finite epoch summary".into(),
            });
        }
        log.epochs.push(EpochRecord {
            epoch,
            loss: ce_loss + config.beta * reg_estimate,
            ce_loss,
            reg_estimate,
            iw_estimate,
            val_acc,
            val_fairness,
            val_dto: f64::NAN,
        });
        snapshots.offer(epoch, val_acc, val_fairness, &classifier);
    }

    let utopia = log.run_utopia().expect("at least one epoch");
    let best = log.finalize(utopia)?;
    let classifier = snapshots.take(best).ok_or_else(|| WfcError::InvalidState("selected epoch was not retained".into()))?;
    Ok(ModelBundle {
        classifier,
        config: config.clone(),
        demonic_id: None,
        log,
    })
}

/// Plain cross-entropy training with the same classifier batch schedule,
/// initialization and selection as [`train_wfc_with_validation`].
pub fn train_ce_baseline(
    train: &Dataset,
    val: &Dataset,
    demonic: &DemonicBundle,
    config: &TrainConfig,
) -> Result<ModelBundle> {
    check_inputs(train, val, demonic, config)?;
    let y = train.require_y()?;
    let num_classes = train.num_classes().max(val.num_classes());
    let mut log = TrainLog::default();
    let val_groups = validation_groups(val, demonic, &mut log.warnings)?;
    let mut dims = vec![train.dim()];
    dims.extend(&config.hidden);
    dims.push(num_classes);
    let mut classifier = MlpParams::init(&dims, config.activation, config.seed)?;
    let mut opt = OptimizerState::new(OptimizerKind::Adam, config.classifier_lr, &classifier)?;
    let mut batches = ClassifierBatches::new(train, demonic, config, &mut log.warnings)?;
    let mut snapshots = ParetoSnapshots { points: Vec::new() };
    for epoch in 0..config.epochs {
        let mut ce_sum = 0.0;
        for _ in 0..config.classifier_iters {
            let idx = batches.next_batch(config.batch_size);
            let xb = select_rows(train.embeddings(), &idx);
            let labels: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let trace = classifier.forward(xb.view())?;
            let (ce, logit_grad) = softmax_cross_entropy(trace.logits(), &labels).map_err(|e| diverged(e, epoch))?;
            let grads = classifier.backward(&trace, logit_grad.view())?;
            opt.step(&mut classifier, &grads).map_err(|e| diverged(e, epoch))?;
            ce_sum += ce;
        }
        let pred = classifier.predict(val.embeddings())?;
        let val_y = val.require_y()?;
        let val_acc = balanced_accuracy_of(val_y, &pred, num_classes)?;
        let table = PredictionTable::new(val_y.to_vec(), pred, val_groups.clone(), num_classes, 2)?;
        let val_fairness = fairness_score(&table)?;
        let ce_loss = ce_sum / config.classifier_iters as f64;
        log.epochs.push(EpochRecord {
            epoch,
            loss: ce_loss,
            ce_loss,
            reg_estimate: 0.0,
            iw_estimate: 0.0,
            val_acc,
            val_fairness,
            val_dto: f64::NAN,
        });
        snapshots.offer(epoch, val_acc, val_fairness, &classifier);
    }
    let utopia = log.run_utopia().expect("at least one epoch");
    let best = log.finalize(utopia)?;
    let classifier = snapshots.take(best).ok_or_else(|| WfcError::InvalidState("selected epoch was not retained".into()))?;
    Ok(ModelBundle {
        classifier,
        config: TrainConfig {
            beta: 0.0,
            ..config.clone()
        },
        demonic_id: None,
        log,
    })
}

/// Classifier batch source: plain reshuffled passes or balanced resampling.
enum ClassifierBatches {
    Plain(BatchSampler),
    Balanced(BteoSampler),
}

impl ClassifierBatches {
    fn new(train: &Dataset, demonic: &DemonicBundle, config: &TrainConfig, warnings: &mut Vec<String>) -> Result<Self> {
        let rng = seeded_stream(config.seed, STREAM_CLASSIFIER);
        if !config.bteo {
            return Ok(ClassifierBatches::Plain(BatchSampler::new(train.len(), rng)));
        }
        let groups = match train.a() {
            Some(a) => a.to_vec(),
            None => {
                warnings.push("balanced training uses predicted groups: training set has no attributes".into());
                demonic_predict(demonic, train)?
            }
        };
        let sampler = bteo_resample(train.require_y()?, &groups, rng)?;
        warnings.extend(sampler.warnings().iter().cloned());
        Ok(ClassifierBatches::Balanced(sampler))
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        match self {
            ClassifierBatches::Plain(s) => s.next_batch(size),
            ClassifierBatches::Balanced(s) => s.next_batch(size),
        }
    }
}

fn diverged(e: WfcError, epoch: usize) -> WfcError {
    match e {
        WfcError::Numeric(reason) => WfcError::TrainingDiverged { epoch, reason },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::demonic::{pretrain_demonic, DemonicConfig};

    fn setup(seed: u64) -> (Dataset, Dataset, DemonicBundle) {
        let d = gen_synthetic(&SyntheticSpec {
            n: 600,
            dim: 8,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let (train, val, _) = split(&d, [0.75, 0.25, 0.0], seed).unwrap();
        let demonic = pretrain_demonic(
            &train,
            &DemonicConfig {
                hidden: vec![8],
                lr: 1e-2,
                epochs: 5,
                ..DemonicConfig::default()
            },
        )
        .unwrap();
        (train, val, demonic)
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 6,
            critic_iters: 3,
            classifier_iters: 3,
            batch_size: 32,
            classifier_lr: 1e-2,
            critic_lr: 1e-3,
            hidden: vec![10, 6],
            critic_hidden: 12,
            clip: 0.1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_beta_matches_plain_cross_entropy() {
        let (train, val, demonic) = setup(1);
        let cfg = TrainConfig {
            beta: 0.0,
            ..small_config()
        };
        let wfc = train_wfc_with_validation(&train, &val, &demonic, &cfg).unwrap();
        let ce = train_ce_baseline(&train, &val, &demonic, &cfg).unwrap();
        assert_eq!(wfc.classifier, ce.classifier);
        for (a, b) in wfc.log.epochs.iter().zip(&ce.log.epochs) {
            assert_eq!(a.ce_loss, b.ce_loss);
            assert_eq!(a.val_acc, b.val_acc);
        }
    }

    #[test]
    fn runs_are_deterministic_and_leave_demonic_untouched() {
        let (train, val, demonic) = setup(2);
        let before = demonic.params.flat_values();
        let a = train_wfc_with_validation(&train, &val, &demonic, &small_config()).unwrap();
        let b = train_wfc_with_validation(&train, &val, &demonic, &small_config()).unwrap();
        assert_eq!(a, b);
        let after = demonic.params.flat_values();
        assert_eq!(
            before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            after.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn loss_decomposes() {
        let (train, val, demonic) = setup(3);
        let cfg = TrainConfig {
            beta: 2.5,
            ..small_config()
        };
        let m = train_wfc_with_validation(&train, &val, &demonic, &cfg).unwrap();
        assert_eq!(m.log.epochs.len(), cfg.epochs);
        for r in &m.log.epochs {
            assert!((r.loss - (r.ce_loss + cfg.beta * r.reg_estimate)).abs() < 1e-10);
        }
        let sel = m.log.selected_epoch.unwrap();
        assert_eq!(sel, select_best_epoch(&m.log).unwrap());
    }

    #[test]
    fn variants_and_layers_run() {
        let (train, val, demonic) = setup(4);
        for (variant, layer, hard, bteo) in [
            (Variant::Eo, LayerSelector::LastHidden, false, false),
            (Variant::Dp, LayerSelector::Output, false, true),
            (Variant::Dp, LayerSelector::FirstHidden, true, false),
        ] {
            let cfg = TrainConfig {
                variant,
                layer,
                hard_labels: hard,
                bteo,
                ..small_config()
            };
            let m = train_wfc_with_validation(&train, &val, &demonic, &cfg).unwrap();
            assert!(m.log.epochs.iter().all(|r| r.loss.is_finite()));
        }
    }

    #[test]
    fn divergence_reports_epoch() {
        let (train, val, demonic) = setup(5);
        let cfg = TrainConfig {
            classifier_lr: 1e308,
            ..small_config()
        };
        match train_wfc_with_validation(&train, &val, &demonic, &cfg) {
            Err(WfcError::TrainingDiverged { epoch, .. }) => assert!(epoch < cfg.epochs),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (train, val, _) = setup(6);
        let (_, _, other) = {
            let d = gen_synthetic(&SyntheticSpec {
                n: 100,
                dim: 6,
                ..SyntheticSpec::default()
            })
            .unwrap();
            let demonic = pretrain_demonic(&d, &DemonicConfig { hidden: vec![4], epochs: 1, ..DemonicConfig::default() }).unwrap();
            (d.clone(), d, demonic)
        };
        assert!(matches!(
            train_wfc_with_validation(&train, &val, &other, &small_config()),
            Err(WfcError::Shape(_))
        ));
    }

    #[test]
    fn eo_filter_cases() {
        assert_eq!(wfc_eo_filter(&[0, 1, 1], &[0, 1, 1]), vec![0, 1, 2]);
        assert!(wfc_eo_filter(&[1, 0], &[0, 1]).is_empty());
        assert_eq!(wfc_eo_filter(&[0, 0, 1, 1], &[0, 1, 1, 0]), vec![0, 2]);
    }

    #[test]
    fn select_best_epoch_cases() {
        let mk = |d: &[f64]| TrainLog {
            epochs: d
                .iter()
                .enumerate()
                .map(|(i, &v)| EpochRecord {
                    epoch: i,
                    loss: 0.0,
                    ce_loss: 0.0,
                    reg_estimate: 0.0,
                    iw_estimate: 0.0,
                    val_acc: 0.0,
                    val_fairness: 0.0,
                    val_dto: v,
                })
                .collect(),
            ..TrainLog::default()
        };
        assert_eq!(select_best_epoch(&mk(&[3.0, 1.2, 2.5])).unwrap(), 1);
        assert_eq!(select_best_epoch(&mk(&[3.0, 2.0, 1.0])).unwrap(), 2);
        assert_eq!(select_best_epoch(&mk(&[4.0])).unwrap(), 0);
        assert_eq!(select_best_epoch(&mk(&[1.0, 1.0])).unwrap(), 0);
        assert!(matches!(select_best_epoch(&mk(&[])), Err(WfcError::InvalidState(_))));
    }

    #[test]
    fn bteo_balances_groups() {
        let y = vec![0usize; 1000];
        let a: Vec<usize> = (0..1000).map(|i| usize::from(i >= 900)).collect();
        let mut s = bteo_resample(&y, &a, seeded_stream(0, 0)).unwrap();
        let draws = s.next_batch(10_000);
        let ones = draws.iter().filter(|&&i| a[i] == 1).count() as f64 / 10_000.0;
        assert!((ones - 0.5).abs() < 0.05, "{ones}");
        let again = bteo_resample(&y, &a, seeded_stream(0, 0)).unwrap().next_batch(10_000);
        assert_eq!(draws, again);
        let single = bteo_resample(&[0, 0, 1], &[0, 0, 1], seeded_stream(0, 0)).unwrap();
        assert_eq!(single.warnings().len(), 2);
    }

    #[test]
    fn log_csv_columns() {
        let (train, val, demonic) = setup(7);
        let m = train_wfc_with_validation(&train, &val, &demonic, &TrainConfig { epochs: 2, ..small_config() }).unwrap();
        let text = String::from_utf8(m.log.to_csv().unwrap()).unwrap();
        assert_eq!(text.lines().next().unwrap(), "epoch,loss,iw_estimate,val_acc,val_fairness,val_dto");
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn bundle_round_trip() {
        let (train, val, demonic) = setup(8);
        let m = train_wfc_with_validation(&train, &val, &demonic, &TrainConfig { epochs: 2, ..small_config() }).unwrap();
        let bytes = m.to_bundle().unwrap().encode().unwrap();
        let back = ModelBundle::from_bundle(&Bundle::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
