//! The frozen sensitive-attribute model: in-domain pre-training and
//! Wasserstein domain adaptation towards an unlabeled target domain.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{seeded_stream, split, BatchSampler, Dataset};
use crate::dependency::{critic_difference, critic_difference_step};
use crate::error::{Result, WfcError};
use crate::io::{mlp_from_tensors, mlp_tensors, Bundle, BundleKind};
use crate::metrics::balanced_accuracy_of;
use crate::nn::{
    select_rows, softmax_cross_entropy, Activation, LayerSelector, MlpParams, OptimizerKind, OptimizerState,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    InDomain,
    CrossDomain,
    DomainAdapted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemonicConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Model batches per epoch; `None` means one pass over the training rows.
    pub batches_per_epoch: Option<usize>,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for DemonicConfig {
    fn default() -> Self {
        DemonicConfig {
            hidden: vec![300, 300],
            activation: Activation::Tanh,
            lr: 1e-4,
            epochs: 20,
            batch_size: 128,
            batches_per_epoch: None,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

impl DemonicConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.batches_per_epoch == Some(0) {
            return Err(WfcError::config("epochs, batch size and batches per epoch must be positive"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(WfcError::config(format!(
                "holdout fraction must be in (0, 1), got {}",
                self.holdout_fraction
            )));
        }
        Ok(())
    }
}

/// Settings of the source/target alignment term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainAdaptConfig {
    pub eta: f64,
    pub critic_hidden: usize,
    pub critic_optimizer: OptimizerKind,
    pub critic_lr: f64,
    pub critic_batches: usize,
    pub clip: f64,
}

impl Default for DomainAdaptConfig {
    fn default() -> Self {
        DomainAdaptConfig {
            eta: 1.0,
            critic_hidden: 512,
            critic_optimizer: OptimizerKind::Rmsprop,
            critic_lr: 5e-5,
            critic_batches: 20,
            clip: 0.01,
        }
    }
}

impl DomainAdaptConfig {
    fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(WfcError::config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(self.clip > 0.0) || self.critic_batches == 0 || self.critic_hidden == 0 {
            return Err(WfcError::config("clip, critic batches and critic width must be positive"));
        }
        Ok(())
    }
}

/// A trained, frozen sensitive-attribute model.
#[derive(Clone, Debug, PartialEq)]
pub struct DemonicBundle {
    pub params: MlpParams,
    pub mode: TrainingMode,
    pub source_balanced_accuracy: f64,
    pub target_balanced_accuracy: Option<f64>,
    pub config: DemonicConfig,
    pub domain_adaptation: Option<DomainAdaptConfig>,
    /// Mean critic estimate of `W1(Z_S, Z_T)` per epoch (domain adaptation only).
    pub alignment_trace: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DemonicHeader {
    mode: TrainingMode,
    layer_dims: Vec<usize>,
    activation: Activation,
    source_balanced_accuracy: f64,
    target_balanced_accuracy: Option<f64>,
    config: DemonicConfig,
    domain_adaptation: Option<DomainAdaptConfig>,
    alignment_trace: Vec<f64>,
}

impl DemonicBundle {
    pub fn to_bundle(&self) -> Result<Bundle> {
        let header = DemonicHeader {
            mode: self.mode,
            layer_dims: self.params.layer_dims().to_vec(),
            activation: self.params.activation(),
            source_balanced_accuracy: self.source_balanced_accuracy,
            target_balanced_accuracy: self.target_balanced_accuracy,
            config: self.config.clone(),
            domain_adaptation: self.domain_adaptation.clone(),
            alignment_trace: self.alignment_trace.clone(),
        };
        Ok(Bundle {
            kind: BundleKind::Demonic,
            config: serde_json::to_value(header).map_err(|e| WfcError::Format(e.to_string()))?,
            tensors: mlp_tensors("demonic", &self.params),
        })
    }

    pub fn from_bundle(bundle: &Bundle) -> Result<Self> {
        if bundle.kind != BundleKind::Demonic {
            return Err(WfcError::Format("not a demonic bundle".into()));
        }
        let h: DemonicHeader =
            serde_json::from_value(bundle.config.clone()).map_err(|e| WfcError::Format(e.to_string()))?;
        let params = mlp_from_tensors(bundle, "demonic", h.layer_dims.len() - 1, h.activation)?;
        if params.layer_dims() != h.layer_dims.as_slice() {
            return Err(WfcError::Format("layer table disagrees with tensors".into()));
        }
        Ok(DemonicBundle {
            params,
            mode: h.mode,
            source_balanced_accuracy: h.source_balanced_accuracy,
            target_balanced_accuracy: h.target_balanced_accuracy,
            config: h.config,
            domain_adaptation: h.domain_adaptation,
            alignment_trace: h.alignment_trace,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_bundle()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        DemonicBundle::from_bundle(&Bundle::read(path)?)
    }

    pub fn num_groups(&self) -> usize {
        self.params.output_dim()
    }
}

/// The rows held out for the recorded source accuracy, and the rest.
pub fn holdout_split(source: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, held, _) = split(source, [1.0 - fraction, fraction, 0.0], seed)?;
    Ok((train, held))
}

/// Cross-entropy training of the attribute model on `(X, A)`.
pub fn pretrain_demonic(labeled: &Dataset, config: &DemonicConfig) -> Result<DemonicBundle> {
    let (params, acc, _) = fit(labeled, None, config)?;
    Ok(DemonicBundle {
        params,
        mode: TrainingMode::InDomain,
        source_balanced_accuracy: acc,
        target_balanced_accuracy: None,
        config: config.clone(),
        domain_adaptation: None,
        alignment_trace: Vec::new(),
    })
}

/// Source cross-entropy plus `eta` times a critic estimate of the
/// Wasserstein distance between last-hidden source and target
/// representations. Only the embeddings of `target` are read.
pub fn pretrain_demonic_da(
    source: &Dataset,
    target: &Dataset,
    config: &DemonicConfig,
    da: &DomainAdaptConfig,
) -> Result<DemonicBundle> {
    if source.dim() != target.dim() {
        return Err(WfcError::shape(format!(
            "source has {} features, target {}",
            source.dim(),
            target.dim()
        )));
    }
    if target.is_empty() {
        return Err(WfcError::config("target domain is empty"));
    }
    da.validate()?;
    let (params, acc, trace) = fit(source, Some((target, da)), config)?;
    Ok(DemonicBundle {
        params,
        mode: if da.eta > 0.0 {
            TrainingMode::DomainAdapted
        } else {
            TrainingMode::CrossDomain
        },
        source_balanced_accuracy: acc,
        target_balanced_accuracy: None,
        config: config.clone(),
        domain_adaptation: Some(da.clone()),
        alignment_trace: trace,
    })
}

fn fit(
    source: &Dataset,
    target: Option<(&Dataset, &DomainAdaptConfig)>,
    config: &DemonicConfig,
) -> Result<(MlpParams, f64, Vec<f64>)> {
    config.validate()?;
    let a = source.require_a()?;
    let k = source.num_groups();
    for g in 0..k {
        if !a.contains(&g) {
            return Err(WfcError::UndefinedGroup(g));
        }
    }
    let (train, held) = holdout_split(source, config.holdout_fraction, config.seed)?;
    let x = train.embeddings();
    let labels = train.require_a()?;

    let mut dims = vec![source.dim()];
    dims.extend(&config.hidden);
    dims.push(k);
    let mut params = MlpParams::init(&dims, config.activation, config.seed)?;
    let mut opt = OptimizerState::new(OptimizerKind::Adam, config.lr, &params)?;
    let mut sampler = BatchSampler::new(train.len(), seeded_stream(config.seed, 10));
    let batches = config
        .batches_per_epoch
        .unwrap_or_else(|| train.len().div_ceil(config.batch_size));

    let mut align = match target {
        Some((t, da)) => {
            let width = params.representation_dim(LayerSelector::LastHidden)?;
            let critic = MlpParams::init(&[width, da.critic_hidden, 1], Activation::Relu, config.seed ^ 0xc417)?;
            let critic_opt = OptimizerState::new(da.critic_optimizer, da.critic_lr, &critic)?;
            Some(Alignment {
                target: t,
                da,
                critic,
                critic_opt,
                critic_src: BatchSampler::new(train.len(), seeded_stream(config.seed, 11)),
                critic_tgt: BatchSampler::new(t.len(), seeded_stream(config.seed, 12)),
                model_tgt: BatchSampler::new(t.len(), seeded_stream(config.seed, 13)),
            })
        }
        None => None,
    };

    let mut trace = Vec::new();
    for epoch in 0..config.epochs {
        if let Some(al) = align.as_mut() {
            let mut total = 0.0;
            for _ in 0..al.da.critic_batches {
                let zs = last_hidden(&params, &select_rows(x, &al.critic_src.next_batch(config.batch_size)))?;
                let tb = al.critic_tgt.next_batch(config.batch_size);
                let zt = last_hidden(&params, &select_rows(al.target.embeddings(), &tb))?;
                total += critic_difference_step(&mut al.critic, &mut al.critic_opt, zs.view(), zt.view(), al.da.clip)?;
            }
            trace.push(total / al.da.critic_batches as f64);
        }
        for _ in 0..batches {
            let idx = sampler.next_batch(config.batch_size);
            let xb = select_rows(x, &idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let src = params.forward(xb.view())?;
            let (loss, logit_grad) = softmax_cross_entropy(src.logits(), &yb).map_err(|e| diverged(e, epoch))?;
            let mut grads = match align.as_mut().filter(|al| al.da.eta > 0.0) {
                None => params.backward(&src, logit_grad.view())?,
                Some(al) => {
                    let tb = al.model_tgt.next_batch(config.batch_size);
                    let tgt = params.forward(select_rows(al.target.embeddings(), &tb).view())?;
                    let zs = src.hidden_representation(LayerSelector::LastHidden)?;
                    let zt = tgt.hidden_representation(LayerSelector::LastHidden)?;
                    let eval = critic_difference(&al.critic, zs, zt)?;
                    let eta = al.da.eta;
                    let gs = &eval.dep_input_grad * eta;
                    let gt = &eval.ind_input_grad * eta;
                    let mut g = params.backward_with(&src, Some(logit_grad.view()), &[(LayerSelector::LastHidden, gs.view())])?;
                    let g_t = params.backward_with(&tgt, None, &[(LayerSelector::LastHidden, gt.view())])?;
                    for (acc, extra) in g.layers.iter_mut().zip(&g_t.layers) {
                        acc.weight += &extra.weight;
                        acc.bias += &extra.bias;
                    }
                    g
                }
            };
            if !loss.is_finite() || !grads.is_finite() {
                return Err(WfcError::TrainingDiverged {
                    epoch,
                    reason: "non-finite loss or gradient".into(),
                });
            }
            grads.input = Array2::zeros((0, 0));
            opt.step(&mut params, &grads)?;
        }
    }

    let pred = params.predict(held.embeddings())?;
    let acc = balanced_accuracy_of(held.require_a()?, &pred, k)?;
    Ok((params, acc, trace))
}

struct Alignment<'a> {
    target: &'a Dataset,
    da: &'a DomainAdaptConfig,
    critic: MlpParams,
    critic_opt: OptimizerState,
    critic_src: BatchSampler,
    critic_tgt: BatchSampler,
    model_tgt: BatchSampler,
}

fn last_hidden(params: &MlpParams, x: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(params.forward(x.view())?.hidden_representation(LayerSelector::LastHidden)?.to_owned())
}

fn diverged(e: WfcError, epoch: usize) -> WfcError {
    match e {
        WfcError::Numeric(reason) => WfcError::TrainingDiverged { epoch, reason },
        other => other,
    }
}

/// Predicted groups: argmax of the logits, ties to the lower id.
pub fn demonic_predict(bundle: &DemonicBundle, dataset: &Dataset) -> Result<Vec<usize>> {
    if dataset.dim() != bundle.params.input_dim() {
        return Err(WfcError::shape(format!(
            "dataset has {} features, model expects {}",
            dataset.dim(),
            bundle.params.input_dim()
        )));
    }
    bundle.params.predict(dataset.embeddings())
}

/// Balanced accuracy (percent) of the bundle's group predictions on a
/// dataset with known attributes.
pub fn demonic_balanced_accuracy(bundle: &DemonicBundle, dataset: &Dataset) -> Result<f64> {
    let pred = demonic_predict(bundle, dataset)?;
    balanced_accuracy_of(dataset.require_a()?, &pred, bundle.num_groups())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_shift_pair, gen_synthetic, SyntheticSpec};
    use crate::nn::Dense;
    use ndarray::array;

    fn quick() -> DemonicConfig {
        DemonicConfig {
            hidden: vec![16],
            lr: 1e-2,
            epochs: 10,
            batch_size: 64,
            ..DemonicConfig::default()
        }
    }

    #[test]
    fn separable_attribute_is_learned() {
        let d = gen_synthetic(&SyntheticSpec {
            n: 1000,
            dim: 8,
            bias: 0.0,
            leak: 3.0,
            seed: 1,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let b = pretrain_demonic(&d, &quick()).unwrap();
        assert!(b.source_balanced_accuracy >= 99.0, "{}", b.source_balanced_accuracy);
        assert_eq!(b.mode, TrainingMode::InDomain);
    }

    #[test]
    fn reported_accuracy_matches_holdout() {
        let d = gen_synthetic(&SyntheticSpec {
            n: 600,
            dim: 8,
            leak: 0.5,
            seed: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let cfg = quick();
        let b = pretrain_demonic(&d, &cfg).unwrap();
        let (_, held) = holdout_split(&d, cfg.holdout_fraction, cfg.seed).unwrap();
        assert_eq!(demonic_balanced_accuracy(&b, &held).unwrap(), b.source_balanced_accuracy);
    }

    #[test]
    fn missing_attribute_is_reported() {
        let d = Dataset::from_parts(Array2::zeros((10, 3)), Some(vec![0; 10]), None).unwrap();
        assert!(matches!(pretrain_demonic(&d, &quick()), Err(WfcError::MissingAttribute)));
    }

    #[test]
    fn zero_eta_matches_source_only_training() {
        let spec = SyntheticSpec {
            n: 400,
            dim: 8,
            shift: 3.0,
            seed: 3,
            ..SyntheticSpec::default()
        };
        let (source, target) = gen_shift_pair(&spec).unwrap();
        let cfg = DemonicConfig {
            batches_per_epoch: Some(5),
            ..quick()
        };
        let da = DomainAdaptConfig {
            eta: 0.0,
            critic_hidden: 8,
            ..DomainAdaptConfig::default()
        };
        let adapted = pretrain_demonic_da(&source, target.data(), &cfg, &da).unwrap();
        let plain = pretrain_demonic(&source, &cfg).unwrap();
        assert_eq!(adapted.params, plain.params);
        assert_eq!(adapted.mode, TrainingMode::CrossDomain);
        assert_eq!(adapted.alignment_trace.len(), cfg.epochs);
    }

    #[test]
    fn da_validation() {
        let d = gen_synthetic(&SyntheticSpec {
            n: 100,
            dim: 8,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let bad_eta = DomainAdaptConfig {
            eta: -1.0,
            ..DomainAdaptConfig::default()
        };
        assert!(matches!(
            pretrain_demonic_da(&d, &d, &quick(), &bad_eta),
            Err(WfcError::InvalidConfig(_))
        ));
        let narrow = Dataset::from_parts(Array2::zeros((5, 3)), None, None).unwrap();
        assert!(matches!(
            pretrain_demonic_da(&d, &narrow, &quick(), &DomainAdaptConfig::default()),
            Err(WfcError::Shape(_))
        ));
    }

    #[test]
    fn prediction_tie_breaks_low() {
        let params = MlpParams::from_layers(
            Activation::Tanh,
            vec![Dense {
                weight: array![[1.0], [0.0]],
                bias: array![0.0, 0.0],
            }],
        )
        .unwrap();
        let bundle = DemonicBundle {
            params,
            mode: TrainingMode::InDomain,
            source_balanced_accuracy: 0.0,
            target_balanced_accuracy: None,
            config: DemonicConfig::default(),
            domain_adaptation: None,
            alignment_trace: vec![],
        };
        let d = Dataset::from_parts(array![[2.0], [0.0], [-1.0]], None, None).unwrap();
        assert_eq!(demonic_predict(&bundle, &d).unwrap(), vec![0, 0, 1]);
    }

    #[test]
    fn bundle_round_trip() {
        let d = gen_synthetic(&SyntheticSpec {
            n: 200,
            dim: 6,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let b = pretrain_demonic(&d, &DemonicConfig { epochs: 2, ..quick() }).unwrap();
        let bytes = b.to_bundle().unwrap().encode().unwrap();
        let back = DemonicBundle::from_bundle(&Bundle::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bundle().unwrap().encode().unwrap(), bytes);
    }
}
