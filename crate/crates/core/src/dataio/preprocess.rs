//! Feature preprocessing fitted on the training split only.
//!
//! Numeric columns are z-scored (optionally after `log1p`) with the population
//! standard deviation; categorical columns are one-hot encoded with rare levels
//! collapsed into `other`. Missing cells are mean-imputed and, when the training
//! split had any, flagged in an extra `<name>__missing` indicator column.
//! Columns whose training variance falls below the threshold are dropped.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::dataio::{Cohort, Modality, ModalitySchema, Value};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    ZScore,
    Log1pZScore,
    OneHot,
    Passthrough,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSpec {
    #[serde(default = "default_transform")]
    pub default_transform: Transform,
    /// Per-column overrides keyed `modality.feature`, e.g. `clinical.grade`.
    #[serde(default)]
    pub overrides: BTreeMap<String, Transform>,
    #[serde(default = "default_variance_threshold")]
    pub variance_threshold: f64,
    /// One-hot levels seen fewer times than this in training collapse to `other`.
    #[serde(default = "default_rare_min")]
    pub rare_category_min: usize,
}

fn default_transform() -> Transform {
    Transform::ZScore
}
fn default_variance_threshold() -> f64 {
    1e-8
}
fn default_rare_min() -> usize {
    5
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            default_transform: default_transform(),
            overrides: BTreeMap::new(),
            variance_threshold: default_variance_threshold(),
            rare_category_min: default_rare_min(),
        }
    }
}

impl PreprocessSpec {
    pub fn transform_for(&self, modality: Modality, feature: &str) -> Transform {
        self.overrides
            .get(&format!("{modality}.{feature}"))
            .copied()
            .unwrap_or(self.default_transform)
    }

    /// Column keys the loader must keep as category labels.
    pub fn categorical_columns(&self) -> HashSet<String> {
        self.overrides
            .iter()
            .filter(|(_, t)| **t == Transform::OneHot)
            .map(|(k, _)| k.clone())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnFit {
    Numeric {
        feature: String,
        log1p: bool,
        /// Mean of the (possibly log-transformed) training values; also the imputation value.
        center: f64,
        /// Population deviation for z-scoring, 1 for passthrough.
        scale: f64,
        standardize: bool,
        indicator: bool,
    },
    OneHot {
        feature: String,
        /// Retained levels; each gets a column. Kept columns flagged in `keep`.
        levels: Vec<String>,
        /// Column kept after the variance filter, one per level plus trailing `other`.
        keep: Vec<bool>,
        /// Training frequency of each level column, used to impute missing cells.
        means: Vec<f64>,
        indicator: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockFit {
    pub modality: Modality,
    pub columns: Vec<ColumnFit>,
    pub output_names: Vec<String>,
}

/// Statistics fitted on the training split, applicable to any cohort with the same schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedPreprocess {
    pub blocks: Vec<BlockFit>,
    pub dropped: Vec<String>,
}

/// Dense model-ready design for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedBlock {
    pub modality: Modality,
    pub names: Vec<String>,
    /// `n × d`.
    pub matrix: Tensor<f64>,
    /// False when the patient had no row for this modality.
    pub present: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedCohort {
    pub ids: Vec<String>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub treatments: Vec<u8>,
    /// Same order as the source cohort's schemas.
    pub blocks: Vec<ProcessedBlock>,
}

impl ProcessedCohort {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn block(&self, modality: Modality) -> Option<&ProcessedBlock> {
        self.blocks.iter().find(|b| b.modality == modality)
    }

    pub fn omics_blocks(&self) -> impl Iterator<Item = &ProcessedBlock> {
        self.blocks.iter().filter(|b| b.modality.is_omics())
    }

    pub fn dims(&self) -> Vec<(Modality, usize)> {
        self.blocks.iter().map(|b| (b.modality, b.matrix.cols())).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> ProcessedCohort {
        ProcessedCohort {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            times: idx.iter().map(|&i| self.times[i]).collect(),
            events: idx.iter().map(|&i| self.events[i]).collect(),
            treatments: idx.iter().map(|&i| self.treatments[i]).collect(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ProcessedBlock {
                    modality: b.modality,
                    names: b.names.clone(),
                    matrix: b.matrix.select_rows(idx),
                    present: idx.iter().map(|&i| b.present[i]).collect(),
                })
                .collect(),
        }
    }

    pub fn subset_mask(&self, mask: &[bool]) -> ProcessedCohort {
        let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        self.subset(&idx)
    }
}

fn cell(cohort: &Cohort, row: usize, block: usize, col: usize) -> &Value {
    let b = &cohort.records[row].blocks[block];
    if b.block_missing {
        &Value::Missing
    } else {
        &b.values[col]
    }
}

fn numeric(v: &Value, log1p: bool, key: &str) -> Result<Option<f64>> {
    match v {
        Value::Missing => Ok(None),
        Value::Num(x) => {
            let t = if log1p { x.ln_1p() } else { *x };
            if t.is_finite() {
                Ok(Some(t))
            } else {
                Err(Error::InvalidInput(format!("{key}: log1p of {x} is not finite")))
            }
        }
        Value::Cat(s) => Err(Error::InvalidInput(format!(
            "{key}: categorical value '{s}' in a numeric column"
        ))),
    }
}

fn label(v: &Value) -> Option<String> {
    match v {
        Value::Missing => None,
        Value::Cat(s) => Some(s.clone()),
        Value::Num(x) => Some(format!("{x}")),
    }
}

fn population_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Fits preprocessing on the rows where `train` is true.
pub fn fit_preprocess(cohort: &Cohort, spec: &PreprocessSpec, train: &[bool]) -> Result<FittedPreprocess> {
    if train.len() != cohort.len() {
        return Err(Error::shape(
            "fit_preprocess",
            format!("mask of {} for {} patients", train.len(), cohort.len()),
        ));
    }
    let rows: Vec<usize> = (0..cohort.len()).filter(|&i| train[i]).collect();
    if rows.is_empty() {
        return Err(Error::InvalidInput("training mask is empty".into()));
    }
    let thr = spec.variance_threshold;
    let mut blocks = Vec::with_capacity(cohort.schemas.len());
    let mut dropped = Vec::new();

    for (b, schema) in cohort.schemas.iter().enumerate() {
        let mut columns = Vec::new();
        let mut names = Vec::new();
        for (c, feature) in schema.features.iter().enumerate() {
            let key = format!("{}.{}", schema.modality, feature);
            let transform = spec.transform_for(schema.modality, feature);
            let raw: Vec<&Value> = rows.iter().map(|&r| cell(cohort, r, b, c)).collect();
            let missing = raw.iter().filter(|v| v.is_missing()).count();
            if missing == raw.len() {
                return Err(Error::InvalidInput(format!(
                    "{key}: column is entirely missing in the training split"
                )));
            }
            let indicator = missing > 0;
            match transform {
                Transform::OneHot => {
                    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
                    for v in &raw {
                        if let Some(l) = label(v) {
                            *counts.entry(l).or_default() += 1;
                        }
                    }
                    let levels: Vec<String> = counts
                        .iter()
                        .filter(|(_, &n)| n >= spec.rare_category_min)
                        .map(|(l, _)| l.clone())
                        .collect();
                    let width = levels.len() + 1;
                    let mut cols = vec![Vec::with_capacity(rows.len() - missing); width];
                    for v in &raw {
                        if let Some(l) = label(v) {
                            let slot = levels.iter().position(|x| *x == l).unwrap_or(levels.len());
                            for (j, col) in cols.iter_mut().enumerate() {
                                col.push(if j == slot { 1.0 } else { 0.0 });
                            }
                        }
                    }
                    let mut keep = Vec::with_capacity(width);
                    let mut means = Vec::with_capacity(width);
                    for (j, col) in cols.iter().enumerate() {
                        let (mean, var) = population_stats(col);
                        let level_name = levels.get(j).map_or("other", String::as_str);
                        let out = format!("{feature}={level_name}");
                        let k = var >= thr;
                        if k {
                            names.push(out);
                        } else {
                            dropped.push(format!("{}.{out}", schema.modality));
                        }
                        keep.push(k);
                        means.push(mean);
                    }
                    if indicator {
                        names.push(format!("{feature}__missing"));
                    }
                    columns.push(ColumnFit::OneHot {
                        feature: feature.clone(),
                        levels,
                        keep,
                        means,
                        indicator,
                    });
                }
                t => {
                    let log1p = t == Transform::Log1pZScore;
                    let vals: Vec<f64> = raw
                        .iter()
                        .map(|v| numeric(v, log1p, &key))
                        .collect::<Result<Vec<_>>>()?
                        .into_iter()
                        .flatten()
                        .collect();
                    let (mean, var) = population_stats(&vals);
                    if var < thr {
                        log::warn!("{key}: training variance {var:e} below threshold, column dropped");
                        dropped.push(key);
                        continue;
                    }
                    let standardize = t != Transform::Passthrough;
                    names.push(feature.clone());
                    if indicator {
                        names.push(format!("{feature}__missing"));
                    }
                    columns.push(ColumnFit::Numeric {
                        feature: feature.clone(),
                        log1p,
                        center: mean,
                        scale: if standardize { var.sqrt() } else { 1.0 },
                        standardize,
                        indicator,
                    });
                }
            }
        }
        if names.is_empty() {
            return Err(Error::Schema(format!(
                "{}: no usable features remain after filtering",
                schema.modality
            )));
        }
        blocks.push(BlockFit {
            modality: schema.modality,
            columns,
            output_names: names,
        });
    }
    Ok(FittedPreprocess { blocks, dropped })
}

impl FittedPreprocess {
    /// Output dimension per modality.
    pub fn dims(&self) -> Vec<(Modality, usize)> {
        self.blocks.iter().map(|b| (b.modality, b.output_names.len())).collect()
    }

    /// Transforms a cohort whose schema contains every fitted feature.
    pub fn apply(&self, cohort: &Cohort) -> Result<ProcessedCohort> {
        let n = cohort.len();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for fit in &self.blocks {
            let b = cohort
                .block_index(fit.modality)
                .ok_or_else(|| Error::Schema(format!("cohort has no '{}' modality", fit.modality)))?;
            let schema: &ModalitySchema = &cohort.schemas[b];
            let d = fit.output_names.len();
            let mut data = Vec::with_capacity(n * d);
            let mut present = Vec::with_capacity(n);
            let mut sources = Vec::with_capacity(fit.columns.len());
            for col in &fit.columns {
                let feature = match col {
                    ColumnFit::Numeric { feature, .. } | ColumnFit::OneHot { feature, .. } => feature,
                };
                let c = schema
                    .features
                    .iter()
                    .position(|f| f == feature)
                    .ok_or_else(|| Error::Schema(format!("{}: feature '{feature}' is missing", fit.modality)))?;
                sources.push(c);
            }
            for r in 0..n {
                present.push(!cohort.records[r].blocks[b].block_missing);
                for (col, &c) in fit.columns.iter().zip(&sources) {
                    let v = cell(cohort, r, b, c);
                    match col {
                        ColumnFit::Numeric {
                            feature,
                            log1p,
                            center,
                            scale,
                            standardize,
                            indicator,
                        } => {
                            let key = format!("{}.{feature}", fit.modality);
                            let x = numeric(v, *log1p, &key)?;
                            let out = match (x, *standardize) {
                                (Some(x), true) => (x - center) / scale,
                                (Some(x), false) => x,
                                (None, true) => 0.0,
                                (None, false) => *center,
                            };
                            data.push(out);
                            if *indicator {
                                data.push(if x.is_none() { 1.0 } else { 0.0 });
                            }
                        }
                        ColumnFit::OneHot {
                            levels,
                            keep,
                            means,
                            indicator,
                            ..
                        } => {
                            let l = label(v);
                            let slot = l
                                .as_ref()
                                .map(|l| levels.iter().position(|x| x == l).unwrap_or(levels.len()));
                            for j in 0..keep.len() {
                                if !keep[j] {
                                    continue;
                                }
                                data.push(match slot {
                                    Some(s) if s == j => 1.0,
                                    Some(_) => 0.0,
                                    None => means[j],
                                });
                            }
                            if *indicator {
                                data.push(if l.is_none() { 1.0 } else { 0.0 });
                            }
                        }
                    }
                }
            }
            blocks.push(ProcessedBlock {
                modality: fit.modality,
                names: fit.output_names.clone(),
                matrix: Tensor::new(vec![n, d], data)?,
                present,
            });
        }
        Ok(ProcessedCohort {
            ids: cohort.ids(),
            times: cohort.times(),
            events: cohort.events(),
            treatments: cohort.treatments(),
            blocks,
        })
    }
}

/// Fits on the training rows and transforms the whole cohort.
pub fn fit_apply_preprocess(
    cohort: &Cohort,
    spec: &PreprocessSpec,
    train: &[bool],
) -> Result<(ProcessedCohort, FittedPreprocess)> {
    let fitted = fit_preprocess(cohort, spec, train)?;
    let processed = fitted.apply(cohort)?;
    Ok((processed, fitted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{FeatureBlock, PatientRecord};

    fn one_column(values: Vec<Value>) -> Cohort {
        let n = values.len();
        let records = values
            .into_iter()
            .enumerate()
            .map(|(i, v)| PatientRecord {
                id: format!("p{i}"),
                time: 1.0 + i as f64,
                event: i % 2 == 0,
                treatment: 0,
                blocks: vec![
                    FeatureBlock {
                        values: vec![v],
                        block_missing: false,
                    },
                    FeatureBlock::numeric([i as f64]),
                ],
            })
            .collect();
        let schemas = vec![
            ModalitySchema {
                modality: Modality::Clinical,
                features: vec!["x".into()],
            },
            ModalitySchema {
                modality: Modality::Demographic,
                features: vec!["age".into()],
            },
        ];
        let _ = n;
        Cohort::new(records, schemas).unwrap()
    }

    #[test]
    fn zscore_uses_population_deviation() {
        let c = one_column(vec![Value::Num(1.0), Value::Num(2.0), Value::Num(3.0)]);
        let (p, _) = fit_apply_preprocess(&c, &PreprocessSpec::default(), &[true; 3]).unwrap();
        let col = p.blocks[0].matrix.data();
        for (a, b) in col.iter().zip([-1.224744871, 0.0, 1.224744871]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn log1p_then_zscore() {
        let c = one_column(vec![Value::Num(0.0), Value::Num(std::f64::consts::E - 1.0)]);
        let spec = PreprocessSpec {
            default_transform: Transform::Log1pZScore,
            ..PreprocessSpec::default()
        };
        let fitted = fit_preprocess(&c, &spec, &[true, true]).unwrap();
        match &fitted.blocks[0].columns[0] {
            ColumnFit::Numeric { center, scale, .. } => {
                // pre-z values are [0, 1]
                assert!((center - 0.5).abs() < 1e-12);
                assert!((scale - 0.5).abs() < 1e-12);
            }
            other => panic!("unexpected fit {other:?}"),
        }
    }

    #[test]
    fn constant_column_is_dropped() {
        let mut c = one_column(vec![Value::Num(4.0); 3]);
        c.schemas[0].features.push("y".into());
        for (i, r) in c.records.iter_mut().enumerate() {
            r.blocks[0].values.push(Value::Num(i as f64));
        }
        let (p, fitted) = fit_apply_preprocess(&c, &PreprocessSpec::default(), &[true; 3]).unwrap();
        assert_eq!(p.blocks[0].names, vec!["y".to_string()]);
        assert_eq!(fitted.dropped, vec!["clinical.x".to_string()]);
    }

    #[test]
    fn all_missing_column_is_an_error() {
        let c = one_column(vec![Value::Missing, Value::Missing, Value::Num(1.0)]);
        let err = fit_preprocess(&c, &PreprocessSpec::default(), &[true, true, false]).unwrap_err();
        assert!(err.to_string().contains("entirely missing"));
        assert!(fit_preprocess(&c, &PreprocessSpec::default(), &[false; 3]).is_err());
    }

    #[test]
    fn missing_values_are_imputed_and_flagged() {
        let c = one_column(vec![Value::Num(1.0), Value::Missing, Value::Num(3.0)]);
        let (p, _) = fit_apply_preprocess(&c, &PreprocessSpec::default(), &[true; 3]).unwrap();
        assert_eq!(p.blocks[0].names, vec!["x".to_string(), "x__missing".to_string()]);
        assert_eq!(p.blocks[0].matrix.data(), &[-1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn one_hot_collapses_rare_levels() {
        let mut vals = vec![Value::Cat("a".into()); 5];
        vals.extend(vec![Value::Cat("b".into()); 5]);
        vals.push(Value::Cat("c".into()));
        let c = one_column(vals);
        let mut spec = PreprocessSpec::default();
        spec.overrides.insert("clinical.x".into(), Transform::OneHot);
        let (p, _) = fit_apply_preprocess(&c, &spec, &[true; 11]).unwrap();
        assert_eq!(
            p.blocks[0].names,
            vec!["x=a".to_string(), "x=b".to_string(), "x=other".to_string()]
        );
        assert_eq!(p.blocks[0].matrix.row_slice(10), &[0.0, 0.0, 1.0]);
    }
}
