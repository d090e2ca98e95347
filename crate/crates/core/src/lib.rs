//! Fair classification by penalizing the Wasserstein dependency between a
//! classifier's representation and a frozen sensitive-attribute model's
//! representation.
//!
//! The crate holds the numeric core: a small MLP library, an exact discrete
//! optimal transport solver, dependency measures and critic estimators,
//! group-fairness metrics, attribute-model pretraining (optionally with
//! domain adaptation), the regularized trainer, and numeric checks of the
//! underlying identities and bounds.

pub mod data;
pub mod demonic;
pub mod dependency;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod ot;
pub mod theory;
pub mod trainer;

pub use data::{gen_shift_pair, gen_synthetic, split, Dataset, SyntheticSpec, TargetDomain};
pub use demonic::{
    demonic_balanced_accuracy, demonic_predict, pretrain_demonic, pretrain_demonic_da, DemonicBundle, DemonicConfig,
    DomainAdaptConfig, TrainingMode,
};
pub use dependency::{iw_exact, JointPmf, PairBatch};
pub use error::{Result, WfcError};
pub use metrics::{dto, fairness_score, MetricsReport, PredictionTable};
pub use nn::{Activation, LayerSelector, MlpParams, OptimizerKind};
pub use ot::{wasserstein1_exact, CostMatrix, DiscreteDistribution, TransportPlan};
pub use theory::{run_verification, CheckSummary, VerifyOptions, VerifyReport};
pub use trainer::{
    train_ce_baseline, train_wfc, train_wfc_with_validation, ModelBundle, TrainConfig, TrainLog, Variant,
};
