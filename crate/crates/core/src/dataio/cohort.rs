//! Cohort data model and the per-modality CSV layout.
//!
//! A cohort directory holds `clinical.csv` (`id,time,event,treatment,...`),
//! `paraclinical.csv`, `demographic.csv` and one `omics_<s>.csv` per omics
//! sub-block (`id,...`). Empty cells are missing values. A patient absent from
//! a modality file gets a block flagged as entirely missing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Clinical,
    Paraclinical,
    Demographic,
    /// Omics sub-block, numbered from 1.
    Omics(usize),
}

impl Modality {
    pub fn file_stem(self) -> String {
        match self {
            Modality::Clinical => "clinical".into(),
            Modality::Paraclinical => "paraclinical".into(),
            Modality::Demographic => "demographic".into(),
            Modality::Omics(s) => format!("omics_{s}"),
        }
    }

    pub fn is_omics(self) -> bool {
        matches!(self, Modality::Omics(_))
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.file_stem())
    }
}

/// A raw cell: numeric, categorical (for one-hot columns) or missing.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Missing,
    Num(f64),
    Cat(String),
}

impl Value {
    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }

    fn to_cell(&self) -> String {
        match self {
            Value::Missing => String::new(),
            Value::Num(v) => format!("{v}"),
            Value::Cat(s) => s.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySchema {
    pub modality: Modality,
    pub features: Vec<String>,
}

impl ModalitySchema {
    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlock {
    pub values: Vec<Value>,
    /// The patient has no row at all in this modality's file.
    pub block_missing: bool,
}

impl FeatureBlock {
    pub fn missing(dim: usize) -> Self {
        Self {
            values: vec![Value::Missing; dim],
            block_missing: true,
        }
    }

    pub fn numeric(values: impl IntoIterator<Item = f64>) -> Self {
        Self {
            values: values.into_iter().map(Value::Num).collect(),
            block_missing: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub time: f64,
    pub event: bool,
    pub treatment: u8,
    /// One block per schema entry of the owning [`Cohort`], in the same order.
    pub blocks: Vec<FeatureBlock>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub records: Vec<PatientRecord>,
    /// Clinical, paraclinical, demographic, then omics blocks `1..=S`.
    pub schemas: Vec<ModalitySchema>,
    pub time_unit: String,
}

impl Cohort {
    pub fn new(records: Vec<PatientRecord>, schemas: Vec<ModalitySchema>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::data("cohort", format!("duplicate id '{}'", r.id)));
            }
            if !(r.time >= 0.0) || !r.time.is_finite() {
                return Err(Error::data(
                    "cohort",
                    format!("patient '{}' has invalid time {}", r.id, r.time),
                ));
            }
            if r.treatment > 1 {
                return Err(Error::data(
                    "cohort",
                    format!("patient '{}' has treatment {}", r.id, r.treatment),
                ));
            }
            if r.blocks.len() != schemas.len() {
                return Err(Error::Schema(format!(
                    "patient '{}' has {} blocks, schema has {}",
                    r.id,
                    r.blocks.len(),
                    schemas.len()
                )));
            }
            for (b, s) in r.blocks.iter().zip(&schemas) {
                if b.values.len() != s.dim() {
                    return Err(Error::Schema(format!(
                        "patient '{}' {}: {} values for {} features",
                        r.id,
                        s.modality,
                        b.values.len(),
                        s.dim()
                    )));
                }
            }
        }
        Ok(Self {
            records,
            schemas,
            time_unit: "months".into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.time).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.event).collect()
    }

    pub fn treatments(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.treatment).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn censored_count(&self) -> usize {
        self.records.iter().filter(|r| !r.event).count()
    }

    pub fn omics_count(&self) -> usize {
        self.schemas.iter().filter(|s| s.modality.is_omics()).count()
    }

    pub fn block_index(&self, modality: Modality) -> Option<usize> {
        self.schemas.iter().position(|s| s.modality == modality)
    }

    /// Keeps the records where `mask` is true, preserving order.
    pub fn subset(&self, mask: &[bool]) -> Cohort {
        Cohort {
            records: self
                .records
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(r, _)| r.clone())
                .collect(),
            schemas: self.schemas.clone(),
            time_unit: self.time_unit.clone(),
        }
    }
}

/// Locations of the per-modality files.
#[derive(Clone, Debug)]
pub struct CohortPaths {
    pub clinical: PathBuf,
    pub paraclinical: PathBuf,
    pub demographic: PathBuf,
    pub omics: Vec<PathBuf>,
}

impl CohortPaths {
    /// Standard file names inside `dir`; omics blocks are `omics_1.csv`, `omics_2.csv`, …
    /// up to the first gap.
    pub fn in_dir(dir: &Path) -> Self {
        let mut omics = Vec::new();
        for s in 1.. {
            let p = dir.join(format!("omics_{s}.csv"));
            if !p.exists() {
                break;
            }
            omics.push(p);
        }
        Self {
            clinical: dir.join("clinical.csv"),
            paraclinical: dir.join("paraclinical.csv"),
            demographic: dir.join("demographic.csv"),
            omics,
        }
    }
}

const MANDATORY: [&str; 4] = ["id", "time", "event", "treatment"];

struct RawTable {
    file: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let file = path.display().to_string();
    if !path.exists() {
        return Err(Error::data(&file, "file not found"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header.first().map(String::as_str) != Some("id") {
        return Err(Error::data(&file, "first column must be 'id'"));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        rows.push(rec.iter().map(str::to_owned).collect());
    }
    Ok(RawTable { file, header, rows })
}

fn parse_cell(table: &RawTable, row: usize, col: usize, categorical: bool) -> Result<Value> {
    let cell = table.rows[row][col].as_str();
    if cell.is_empty() {
        return Ok(Value::Missing);
    }
    if categorical {
        return Ok(Value::Cat(cell.to_owned()));
    }
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Value::Num)
        .ok_or_else(|| Error::Data {
            file: table.file.clone(),
            row: Some(row + 2),
            column: Some(table.header[col].clone()),
            message: format!("unparseable number '{cell}'"),
        })
}

fn parse_binary(table: &RawTable, row: usize, col: usize) -> Result<bool> {
    match table.rows[row][col].as_str() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Data {
            file: table.file.clone(),
            row: Some(row + 2),
            column: Some(table.header[col].clone()),
            message: format!("expected 0 or 1, got '{other}'"),
        }),
    }
}

/// Loads and joins the modality files. `categorical` names the columns
/// (as `modality.feature`) that hold category labels rather than numbers.
pub fn load_cohort(paths: &CohortPaths, categorical: &HashSet<String>) -> Result<Cohort> {
    let clinical = read_table(&paths.clinical)?;
    for (i, name) in MANDATORY.iter().enumerate() {
        if clinical.header.get(i).map(String::as_str) != Some(*name) {
            return Err(Error::data(
                &clinical.file,
                format!("clinical file must start with columns {}", MANDATORY.join(",")),
            ));
        }
    }

    let mut modalities = vec![
        (Modality::Paraclinical, read_table(&paths.paraclinical)?),
        (Modality::Demographic, read_table(&paths.demographic)?),
    ];
    for (s, p) in paths.omics.iter().enumerate() {
        modalities.push((Modality::Omics(s + 1), read_table(p)?));
    }

    let mut schemas = vec![ModalitySchema {
        modality: Modality::Clinical,
        features: clinical.header[MANDATORY.len()..].to_vec(),
    }];
    for (m, t) in &modalities {
        schemas.push(ModalitySchema {
            modality: *m,
            features: t.header[1..].to_vec(),
        });
    }
    let is_cat = |m: Modality, f: &str| categorical.contains(&format!("{m}.{f}"));

    let mut records = Vec::with_capacity(clinical.rows.len());
    let mut seen = HashSet::new();
    for r in 0..clinical.rows.len() {
        let id = clinical.rows[r][0].clone();
        if !seen.insert(id.clone()) {
            return Err(Error::Data {
                file: clinical.file.clone(),
                row: Some(r + 2),
                column: Some("id".into()),
                message: format!("duplicate id '{id}'"),
            });
        }
        let time = match parse_cell(&clinical, r, 1, false)? {
            Value::Num(t) if t >= 0.0 => t,
            Value::Num(t) => {
                return Err(Error::Data {
                    file: clinical.file.clone(),
                    row: Some(r + 2),
                    column: Some("time".into()),
                    message: format!("negative time {t}"),
                })
            }
            _ => {
                return Err(Error::Data {
                    file: clinical.file.clone(),
                    row: Some(r + 2),
                    column: Some("time".into()),
                    message: "time is required".into(),
                })
            }
        };
        let event = parse_binary(&clinical, r, 2)?;
        let treatment = u8::from(parse_binary(&clinical, r, 3)?);
        let features = (MANDATORY.len()..clinical.header.len())
            .map(|c| parse_cell(&clinical, r, c, is_cat(Modality::Clinical, &clinical.header[c])))
            .collect::<Result<Vec<_>>>()?;
        records.push(PatientRecord {
            id,
            time,
            event,
            treatment,
            blocks: vec![FeatureBlock {
                values: features,
                block_missing: false,
            }],
        });
    }

    let positions: HashMap<String, usize> = records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();

    for (modality, table) in &modalities {
        let dim = table.header.len() - 1;
        let mut blocks: Vec<Option<FeatureBlock>> = vec![None; records.len()];
        for r in 0..table.rows.len() {
            let id = &table.rows[r][0];
            let Some(&pos) = positions.get(id) else {
                log::warn!("{}: id '{id}' not in clinical file, row ignored", table.file);
                continue;
            };
            if blocks[pos].is_some() {
                return Err(Error::Data {
                    file: table.file.clone(),
                    row: Some(r + 2),
                    column: Some("id".into()),
                    message: format!("duplicate id '{id}'"),
                });
            }
            let values = (1..table.header.len())
                .map(|c| parse_cell(table, r, c, is_cat(*modality, &table.header[c])))
                .collect::<Result<Vec<_>>>()?;
            blocks[pos] = Some(FeatureBlock {
                values,
                block_missing: false,
            });
        }
        for (rec, b) in records.iter_mut().zip(blocks) {
            rec.blocks.push(b.unwrap_or_else(|| FeatureBlock::missing(dim)));
        }
    }

    Cohort::new(records, schemas)
}

/// Loads a cohort directory with the standard file names.
pub fn load_cohort_dir(dir: &Path, categorical: &HashSet<String>) -> Result<Cohort> {
    load_cohort(&CohortPaths::in_dir(dir), categorical)
}

/// Writes the cohort in the per-modality layout. Patients whose block is
/// flagged missing are left out of that modality's file.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (b, schema) in cohort.schemas.iter().enumerate() {
        let path = dir.join(format!("{}.csv", schema.modality.file_stem()));
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_path(&path)?;
        let mut header: Vec<&str> = if schema.modality == Modality::Clinical {
            MANDATORY.to_vec()
        } else {
            vec!["id"]
        };
        header.extend(schema.features.iter().map(String::as_str));
        w.write_record(&header)?;
        for r in &cohort.records {
            let block = &r.blocks[b];
            if block.block_missing {
                continue;
            }
            let mut row = vec![r.id.clone()];
            if schema.modality == Modality::Clinical {
                row.push(format!("{}", r.time));
                row.push(if r.event { "1" } else { "0" }.into());
                row.push(r.treatment.to_string());
            }
            row.extend(block.values.iter().map(Value::to_cell));
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Summary counts used by CLI reporting.
pub fn cohort_summary(cohort: &Cohort) -> BTreeMap<&'static str, f64> {
    let n = cohort.len() as f64;
    let events = cohort.records.iter().filter(|r| r.event).count() as f64;
    let treated = cohort.records.iter().filter(|r| r.treatment == 1).count() as f64;
    let mut m = BTreeMap::new();
    m.insert("n", n);
    m.insert("events", events);
    m.insert("censored", n - events);
    m.insert("event_rate", if n > 0.0 { events / n } else { 0.0 });
    m.insert("censor_rate", if n > 0.0 { 1.0 - events / n } else { 0.0 });
    m.insert("treated", treated);
    m
}
