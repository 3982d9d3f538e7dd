//! Cohort data: CSV ingestion, preprocessing, splitting and simulation.

mod cohort;
mod preprocess;
mod simulate;
mod split;

pub use cohort::{
    cohort_summary, load_cohort, load_cohort_dir, write_cohort, Cohort, CohortPaths, FeatureBlock, Modality,
    ModalitySchema, PatientRecord, Value,
};
pub use preprocess::{
    fit_apply_preprocess, fit_preprocess, BlockFit, ColumnFit, FittedPreprocess, PreprocessSpec, ProcessedBlock,
    ProcessedCohort, Transform,
};
pub use simulate::{simulate_cohort, FeatureDims, PatientTruth, SimulationConfig, SyntheticTruth};
pub use split::{split_cohort, split_stratified};
