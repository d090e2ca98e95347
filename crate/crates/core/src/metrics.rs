//! Group-fairness and accuracy metrics for a set of predictions.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WfcError};
use crate::nn::{select_rows, train_ce_epoch, Activation, MlpParams, OptimizerKind, OptimizerState};

/// Row-aligned true labels, predictions and group ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTable {
    y_true: Vec<usize>,
    y_pred: Vec<usize>,
    a: Vec<usize>,
    num_classes: usize,
    num_groups: usize,
}

impl PredictionTable {
    pub fn new(
        y_true: Vec<usize>,
        y_pred: Vec<usize>,
        a: Vec<usize>,
        num_classes: usize,
        num_groups: usize,
    ) -> Result<Self> {
        if y_true.len() != y_pred.len() || y_true.len() != a.len() {
            return Err(WfcError::shape(format!(
                "column lengths differ: y_true {}, y_pred {}, a {}",
                y_true.len(),
                y_pred.len(),
                a.len()
            )));
        }
        if y_true.is_empty() {
            return Err(WfcError::config("prediction table is empty"));
        }
        for &y in y_true.iter().chain(&y_pred) {
            if y >= num_classes {
                return Err(WfcError::Label {
                    label: y,
                    classes: num_classes,
                });
            }
        }
        if let Some(&g) = a.iter().find(|&&g| g >= num_groups) {
            return Err(WfcError::UndefinedGroup(g));
        }
        Ok(PredictionTable {
            y_true,
            y_pred,
            a,
            num_classes,
            num_groups,
        })
    }

    pub fn len(&self) -> usize {
        self.y_true.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_true.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn y_true(&self) -> &[usize] {
        &self.y_true
    }

    pub fn y_pred(&self) -> &[usize] {
        &self.y_pred
    }

    pub fn a(&self) -> &[usize] {
        &self.a
    }

    fn rows(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.y_true
            .iter()
            .zip(&self.y_pred)
            .zip(&self.a)
            .map(|((&y, &p), &g)| (y, p, g))
    }
}

/// `DP[a, y] = P(Yhat = y | A = a) - P(Yhat = y)`, indexed `[group, class]`.
pub fn demographic_parity(table: &PredictionTable) -> Result<Array2<f64>> {
    let (k, c) = (table.num_groups, table.num_classes);
    let mut counts = Array2::<f64>::zeros((k, c));
    let mut group_sizes = vec![0.0; k];
    let mut overall = vec![0.0; c];
    for (_, p, g) in table.rows() {
        counts[[g, p]] += 1.0;
        group_sizes[g] += 1.0;
        overall[p] += 1.0;
    }
    if let Some(g) = group_sizes.iter().position(|&n| n == 0.0) {
        return Err(WfcError::UndefinedGroup(g));
    }
    let n = table.len() as f64;
    Ok(Array2::from_shape_fn((k, c), |(g, y)| counts[[g, y]] / group_sizes[g] - overall[y] / n))
}

/// `EO[a, y] = P(Yhat = Y | Y = y, A = a) - P(Yhat = Y | Y = y)`, indexed
/// `[group, class]`. Every `(y, a)` stratum must be present.
pub fn equality_of_opportunity(table: &PredictionTable) -> Result<Array2<f64>> {
    let (k, c) = (table.num_groups, table.num_classes);
    let mut hits = Array2::<f64>::zeros((k, c));
    let mut sizes = Array2::<f64>::zeros((k, c));
    for (y, p, g) in table.rows() {
        sizes[[g, y]] += 1.0;
        if p == y {
            hits[[g, y]] += 1.0;
        }
    }
    for ((g, y), &n) in sizes.indexed_iter() {
        if n == 0.0 {
            return Err(WfcError::UndefinedStratum { class: y, group: g });
        }
    }
    let class_rate: Vec<f64> = (0..c)
        .map(|y| hits.column(y).sum() / sizes.column(y).sum())
        .collect();
    Ok(Array2::from_shape_fn((k, c), |(g, y)| {
        hits[[g, y]] / sizes[[g, y]] - class_rate[y]
    }))
}

/// Per-`[group, class]` true-positive rates.
pub fn true_positive_rates(table: &PredictionTable) -> Result<Array2<f64>> {
    let (k, c) = (table.num_groups, table.num_classes);
    let mut hits = Array2::<f64>::zeros((k, c));
    let mut sizes = Array2::<f64>::zeros((k, c));
    for (y, p, g) in table.rows() {
        sizes[[g, y]] += 1.0;
        if p == y {
            hits[[g, y]] += 1.0;
        }
    }
    for ((g, y), &n) in sizes.indexed_iter() {
        if n == 0.0 {
            return Err(WfcError::UndefinedStratum { class: y, group: g });
        }
    }
    Ok(hits / sizes)
}

/// Root-mean-square over classes of the TPR gap between the two groups.
pub fn tpr_parity(table: &PredictionTable) -> Result<f64> {
    if table.num_groups != 2 {
        return Err(WfcError::UnsupportedGroupArity(table.num_groups));
    }
    let tpr = true_positive_rates(table)?;
    let c = table.num_classes as f64;
    let ms = tpr
        .row(1)
        .iter()
        .zip(tpr.row(0))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / c;
    Ok(ms.sqrt())
}

/// `(1 - tpr_parity) * 100`.
pub fn fairness_score(table: &PredictionTable) -> Result<f64> {
    Ok((1.0 - tpr_parity(table)?) * 100.0)
}

/// Mean per-class recall, in percent.
pub fn balanced_accuracy(table: &PredictionTable) -> Result<f64> {
    balanced_accuracy_of(&table.y_true, &table.y_pred, table.num_classes)
}

/// Mean per-class recall of raw label vectors, in percent.
pub fn balanced_accuracy_of(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(WfcError::shape("label vectors differ in length"));
    }
    let mut hits = vec![0.0; num_classes];
    let mut sizes = vec![0.0; num_classes];
    for (&y, &p) in y_true.iter().zip(y_pred) {
        if y >= num_classes {
            return Err(WfcError::Label {
                label: y,
                classes: num_classes,
            });
        }
        sizes[y] += 1.0;
        if p == y {
            hits[y] += 1.0;
        }
    }
    if let Some(c) = sizes.iter().position(|&n| n == 0.0) {
        return Err(WfcError::UndefinedClass(c));
    }
    let recall: f64 = hits.iter().zip(&sizes).map(|(h, n)| h / n).sum();
    Ok(100.0 * recall / num_classes as f64)
}

/// Euclidean distance from `(accuracy, fairness)` to the utopia point.
pub fn dto(model: (f64, f64), utopia: (f64, f64)) -> f64 {
    ((utopia.1 - model.1).powi(2) + (utopia.0 - model.0).powi(2)).sqrt()
}

/// Attacker setup for [`leakage`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub holdout_fraction: f64,
}

impl Default for LeakageConfig {
    fn default() -> Self {
        LeakageConfig {
            hidden: 100,
            lr: 1e-3,
            epochs: 20,
            batch_size: 128,
            holdout_fraction: 0.2,
        }
    }
}

/// Held-out accuracy (percent) of an MLP trained to recover `a` from
/// `representations`. The best held-out accuracy over epochs is reported.
pub fn leakage(representations: ArrayView2<f64>, a: &[usize], split_seed: u64) -> Result<f64> {
    leakage_with(representations, a, split_seed, &LeakageConfig::default())
}

pub fn leakage_with(
    representations: ArrayView2<f64>,
    a: &[usize],
    split_seed: u64,
    config: &LeakageConfig,
) -> Result<f64> {
    if representations.nrows() != a.len() {
        return Err(WfcError::shape(format!(
            "{} representation rows for {} attributes",
            representations.nrows(),
            a.len()
        )));
    }
    let k = a.iter().copied().max().map_or(0, |m| m + 1);
    let mut present = vec![false; k.max(2)];
    for &g in a {
        present[g] = true;
    }
    if let Some(g) = present.iter().position(|p| !p) {
        return Err(WfcError::UndefinedGroup(g));
    }
    let k = present.len();

    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.shuffle(&mut rng);
    let n_test = ((a.len() as f64) * config.holdout_fraction).round() as usize;
    let n_test = n_test.clamp(1, a.len().saturating_sub(1).max(1));
    let (test_idx, train_idx) = idx.split_at(n_test);
    let x_train = select_rows(representations, train_idx);
    let a_train: Vec<usize> = train_idx.iter().map(|&i| a[i]).collect();
    let x_test = select_rows(representations, test_idx);
    let a_test: Vec<usize> = test_idx.iter().map(|&i| a[i]).collect();

    let dims = [representations.ncols(), config.hidden, k];
    let mut attacker = MlpParams::init(&dims, Activation::Relu, split_seed.wrapping_add(1))?;
    let mut opt = OptimizerState::new(OptimizerKind::Adam, config.lr, &attacker)?;
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    let mut best = 0.0_f64;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        train_ce_epoch(&mut attacker, &mut opt, x_train.view(), &a_train, &order, config.batch_size)?;
        let pred = attacker.predict(x_test.view())?;
        let correct = pred.iter().zip(&a_test).filter(|(p, t)| p == t).count();
        best = best.max(100.0 * correct as f64 / a_test.len() as f64);
    }
    Ok(best)
}

fn keyed(table: &Array2<f64>) -> BTreeMap<String, f64> {
    table
        .indexed_iter()
        .map(|((g, y), &v)| (format!("{g},{y}"), v))
        .collect()
}

/// Full metric report for one evaluated model. `dp` and `eo` are keyed `"a,y"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub balanced_accuracy: f64,
    pub fairness: f64,
    pub tpr_parity: f64,
    pub dto: Option<f64>,
    pub leakage: Option<f64>,
    pub dp: BTreeMap<String, f64>,
    pub eo: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn compute(table: &PredictionTable, utopia: Option<(f64, f64)>) -> Result<Self> {
        let balanced_accuracy = balanced_accuracy(table)?;
        let tpr_parity = tpr_parity(table)?;
        let fairness = (1.0 - tpr_parity) * 100.0;
        Ok(MetricsReport {
            balanced_accuracy,
            fairness,
            tpr_parity,
            dto: utopia.map(|u| dto((balanced_accuracy, fairness), u)),
            leakage: None,
            dp: keyed(&demographic_parity(table)?),
            eo: keyed(&equality_of_opportunity(table)?),
        })
    }
}
