//! Glue from a loaded cohort to model-ready batches and evaluation reports.

use crate::dataio::{fit_apply_preprocess, split_cohort, Cohort, FittedPreprocess, PreprocessSpec, ProcessedCohort};
use crate::error::Result;
use crate::metrics::{default_ibs_grid, evaluate, evaluation_times, EvaluationReport, PredictedCurves};
use crate::numerics::{derive_seed, Real};
use crate::survival::{ModelBatch, SurvivalModel};

/// Default train/validation/test fractions.
pub const DEFAULT_SPLIT: [f64; 3] = [0.7, 0.15, 0.15];

/// Points in the default integrated-Brier grid.
pub const IBS_POINTS: usize = 100;

pub struct PreparedData<T> {
    pub processed: ProcessedCohort,
    pub preprocess: FittedPreprocess,
    /// One mask per split, in the order of the requested fractions.
    pub masks: Vec<Vec<bool>>,
    pub splits: Vec<ModelBatch<T>>,
}

/// Splits the cohort (stratified on event and treatment), fits preprocessing
/// on the first split and transforms every patient.
pub fn prepare<T: Real>(
    cohort: &Cohort,
    spec: &PreprocessSpec,
    fractions: &[f64],
    seed: u64,
) -> Result<PreparedData<T>> {
    let masks = split_cohort(cohort, fractions, derive_seed(seed, "split"))?;
    let (processed, preprocess) = fit_apply_preprocess(cohort, spec, &masks[0])?;
    let splits = masks
        .iter()
        .map(|m| ModelBatch::from_processed(&processed.subset_mask(m)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedData {
        processed,
        preprocess,
        masks,
        splits,
    })
}

/// C^td and integrated Brier score of the model's factual predictions.
pub fn evaluate_model<T: Real>(
    model: &SurvivalModel<T>,
    batch: &ModelBatch<T>,
) -> Result<(EvaluationReport, PredictedCurves)> {
    let grid = default_ibs_grid(&batch.times, IBS_POINTS)?;
    let times = evaluation_times(&batch.times, &grid);
    let curves = model.curves(batch, &times, None)?;
    let report = evaluate(&curves, &batch.times, &batch.events, &grid)?;
    Ok((report, curves))
}
