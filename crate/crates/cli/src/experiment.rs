use wfc_core::metrics::leakage;
use wfc_core::{
    split, train_wfc_with_validation, Dataset, DemonicBundle, MetricsReport, ModelBundle, PredictionTable, Result,
    TrainConfig,
};

/// Stratified 60/20/20 train/validation/test partition of one dataset.
#[derive(Clone, Debug)]
pub struct CellSplit {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl CellSplit {
    pub fn new(data: &Dataset, seed: u64) -> Result<Self> {
        let (train, val, test) = split(data, [0.6, 0.2, 0.2], seed)?;
        Ok(CellSplit { train, val, test })
    }
}

/// Test-split results of one trained model.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub balanced_accuracy: f64,
    pub fairness: f64,
    pub leakage: Option<f64>,
    /// Critic estimate of the dependency after the last epoch.
    pub final_iw: f64,
    pub selected_epoch: Option<usize>,
    pub model: ModelBundle,
}

/// Per-group report of `model` on `data`.
pub fn evaluate(model: &ModelBundle, data: &Dataset, utopia: Option<(f64, f64)>) -> Result<MetricsReport> {
    let y = data.require_y()?.to_vec();
    let a = data.require_a()?.to_vec();
    let pred = model.predict(data)?;
    let classes = data.num_classes().max(model.classifier.output_dim());
    let table = PredictionTable::new(y, pred, a, classes, data.num_groups().max(2))?;
    MetricsReport::compute(&table, utopia)
}

/// Train on `split.train`, select on `split.val`, score on `split.test`.
/// Leakage is measured when `leakage_seed` is given.
pub fn run_cell(
    split: &CellSplit,
    demonic: &DemonicBundle,
    config: &TrainConfig,
    leakage_seed: Option<u64>,
) -> Result<CellOutcome> {
    let model = train_wfc_with_validation(&split.train, &split.val, demonic, config)?;
    let report = evaluate(&model, &split.test, None)?;
    let leakage = match leakage_seed {
        Some(seed) => Some(leakage(
            model.representations(&split.test)?.view(),
            split.test.require_a()?,
            seed,
        )?),
        None => None,
    };
    let final_iw = model.log.epochs.last().map_or(f64::NAN, |e| e.iw_estimate);
    Ok(CellOutcome {
        balanced_accuracy: report.balanced_accuracy,
        fairness: report.fairness,
        leakage,
        final_iw,
        selected_epoch: model.log.selected_epoch,
        model,
    })
}

/// Median of the finite values; `None` if there are none.
pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}
