//! Mixture survival head, the full model and its two-phase training.

mod grid;
mod head;
mod model;
mod train;

pub use grid::{quantile_sorted, TimeGrid};
pub use head::{
    gate_distributions, piecewise_survival, survival_kernel, GateDistributions, HazardTable, HeadConfig, HeadForward,
    MixtureHead, PatientHead, RiskInput, SurvivalCurve, LOG_FLOOR,
};
pub use model::{
    cox_partial_likelihood, InputDims, ModelBatch, ModelConfig, Representation, SurvivalModel, ENCODER_PREFIXES,
};
pub use train::{
    grid_for, train, train_head, EpochLoss, GroupSearch, PhaseConfig, SearchResult, TrainConfig, TrainReport,
    TrainedModel,
};
