use serde::{Deserialize, Serialize};

use crate::dataio::{Modality, ProcessedCohort};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig};
use crate::metrics::PredictedCurves;
use crate::numerics::nn::{Forward, Linear};
use crate::numerics::{ParamStore, Real, SeededRng, Tensor, Var};
use crate::omics::{MoeRouting, OmicsConfig, OmicsEncoder};
use crate::survival::{HazardTable, HeadConfig, MixtureHead, PatientHead, TimeGrid};

/// Input widths of every modality after preprocessing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDims {
    pub clinical: usize,
    pub paraclinical: usize,
    pub demographic: usize,
    pub omics: Vec<usize>,
}

impl InputDims {
    pub fn of(cohort: &ProcessedCohort) -> Result<Self> {
        let width = |m: Modality| {
            cohort
                .block(m)
                .map(|b| b.matrix.cols())
                .ok_or_else(|| Error::Schema(format!("cohort has no {m} block")))
        };
        let omics: Vec<usize> = cohort.omics_blocks().map(|b| b.matrix.cols()).collect();
        if omics.is_empty() {
            return Err(Error::Schema("cohort has no omics block".into()));
        }
        Ok(Self {
            clinical: width(Modality::Clinical)?,
            paraclinical: width(Modality::Paraclinical)?,
            demographic: width(Modality::Demographic)?,
            omics,
        })
    }

    /// Names the first modality whose width differs from `other`.
    pub fn check_matches(&self, other: &InputDims) -> Result<()> {
        let pairs = [
            ("clinical", self.clinical, other.clinical),
            ("paraclinical", self.paraclinical, other.paraclinical),
            ("demographic", self.demographic, other.demographic),
        ];
        for (name, a, b) in pairs {
            if a != b {
                return Err(Error::Schema(format!(
                    "{name} block has {b} features, model expects {a}"
                )));
            }
        }
        if self.omics.len() != other.omics.len() {
            return Err(Error::Schema(format!(
                "cohort has {} omics blocks, model expects {}",
                other.omics.len(),
                self.omics.len()
            )));
        }
        for (s, (a, b)) in self.omics.iter().zip(&other.omics).enumerate() {
            if a != b {
                return Err(Error::Schema(format!(
                    "omics_{} block has {b} features, model expects {a}",
                    s + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub omics: OmicsConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default = "default_aux_weight")]
    pub aux_weight: f64,
}

fn default_aux_weight() -> f64 {
    0.01
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            omics: OmicsConfig::default(),
            fusion: FusionConfig::default(),
            head: HeadConfig::default(),
            aux_weight: default_aux_weight(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.omics.validate()?;
        self.fusion.validate()?;
        self.head.validate()?;
        if !(self.aux_weight >= 0.0) || !self.aux_weight.is_finite() {
            return Err(Error::Config("aux_weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Model inputs and outcomes of a set of patients.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBatch<T> {
    pub ids: Vec<String>,
    pub clinical: Tensor<T>,
    pub paraclinical: Tensor<T>,
    pub demographic: Tensor<T>,
    pub omics: Vec<Tensor<T>>,
    pub omics_present: Vec<Vec<bool>>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub treatments: Vec<u8>,
}

impl<T: Real> ModelBatch<T> {
    pub fn from_processed(cohort: &ProcessedCohort) -> Result<Self> {
        InputDims::of(cohort)?;
        let get = |m: Modality| cohort.block(m).expect("checked by InputDims").matrix.cast::<T>();
        let omics: Vec<_> = cohort.omics_blocks().collect();
        Ok(Self {
            ids: cohort.ids.clone(),
            clinical: get(Modality::Clinical),
            paraclinical: get(Modality::Paraclinical),
            demographic: get(Modality::Demographic),
            omics: omics.iter().map(|b| b.matrix.cast::<T>()).collect(),
            omics_present: omics.iter().map(|b| b.present.clone()).collect(),
            times: cohort.times.clone(),
            events: cohort.events.clone(),
            treatments: cohort.treatments.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dims(&self) -> InputDims {
        InputDims {
            clinical: self.clinical.cols(),
            paraclinical: self.paraclinical.cols(),
            demographic: self.demographic.cols(),
            omics: self.omics.iter().map(Tensor::cols).collect(),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            clinical: self.clinical.select_rows(idx),
            paraclinical: self.paraclinical.select_rows(idx),
            demographic: self.demographic.select_rows(idx),
            omics: self.omics.iter().map(|m| m.select_rows(idx)).collect(),
            omics_present: self
                .omics_present
                .iter()
                .map(|p| idx.iter().map(|&i| p[i]).collect())
                .collect(),
            times: idx.iter().map(|&i| self.times[i]).collect(),
            events: idx.iter().map(|&i| self.events[i]).collect(),
            treatments: idx.iter().map(|&i| self.treatments[i]).collect(),
        }
    }

    /// Same patients with every treatment set to `a`.
    pub fn with_treatment(&self, a: u8) -> Self {
        let mut out = self.clone();
        out.treatments = vec![a; self.len()];
        out
    }

    pub fn event_count(&self) -> usize {
        self.events.iter().filter(|&&e| e).count()
    }

    /// Events per unit of observed time.
    pub fn crude_rate(&self) -> f64 {
        let exposure: f64 = self.times.iter().sum();
        self.event_count() as f64 / exposure
    }
}

/// Tape nodes of the encoder stack on a batch.
pub struct Representation {
    pub x: Var,
    pub aux_loss: Var,
    pub routing: Vec<MoeRouting>,
}

/// Encoder stack, phase-one risk head and mixture head sharing one parameter store.
#[derive(Clone, Debug)]
pub struct SurvivalModel<T> {
    pub config: ModelConfig,
    pub dims: InputDims,
    pub store: ParamStore<T>,
    pub omics: OmicsEncoder,
    pub fusion: Fusion,
    pub cox: Linear,
    pub head: MixtureHead,
    pub seed: u64,
}

pub const ENCODER_PREFIXES: [&str; 3] = ["omics.", "fusion.", "cox."];

impl<T: Real> SurvivalModel<T> {
    pub fn new(dims: InputDims, config: ModelConfig, grid: TimeGrid, init_rate: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let omics = OmicsEncoder::new(
            &mut store,
            "omics",
            &dims.omics,
            &config.omics,
            &mut root.split("init-omics"),
        )?;
        let fusion = Fusion::new(
            &mut store,
            "fusion",
            [dims.clinical, dims.paraclinical, omics.output_dim()],
            &config.fusion,
            &mut root.split("init-fusion"),
        )?;
        let rep_dim = fusion.output_dim(dims.demographic);
        let cox = Linear::new(&mut store, "cox", rep_dim, 1, &mut root.split("init-cox"));
        let head_label = format!("init-head-{}x{}", config.head.k_groups, config.head.m_groups);
        let head = MixtureHead::new(
            &mut store,
            "head",
            rep_dim,
            &config.head,
            grid,
            init_rate,
            &mut root.split(&head_label),
        )?;
        Ok(Self {
            config,
            dims,
            store,
            omics,
            fusion,
            cox,
            head,
            seed,
        })
    }

    pub fn representation_dim(&self) -> usize {
        self.head.input_dim
    }

    /// Overwrites every encoder-stack parameter with the same-named one from `other`.
    pub fn copy_encoder_from(&mut self, other: &SurvivalModel<T>) -> Result<()> {
        for id in other.store.ids() {
            let name = other.store.name(id);
            if ENCODER_PREFIXES.iter().any(|p| name.starts_with(p)) {
                let target = self
                    .store
                    .id(name)
                    .ok_or_else(|| Error::Schema(format!("parameter {name} missing from target model")))?;
                self.store.set(target, other.store.get(id).clone())?;
            }
        }
        Ok(())
    }

    /// Encodes a batch into the patient representation on the forward's tape.
    pub fn represent(&self, f: &mut Forward<T>, batch: &ModelBatch<T>) -> Result<Representation> {
        self.dims.check_matches(&batch.dims())?;
        let enc = self.omics.encode(f, &batch.omics, &batch.omics_present)?;
        let c = f.input(batch.clinical.clone());
        let p = f.input(batch.paraclinical.clone());
        let d = f.input(batch.demographic.clone());
        let x = self.fusion.forward(f, [c, p, enc.z], d)?;
        Ok(Representation {
            x,
            aux_loss: enc.aux_loss,
            routing: enc.routing,
        })
    }

    /// Representation values in evaluation mode.
    pub fn representation(&self, batch: &ModelBatch<T>) -> Result<Tensor<T>> {
        let mut f = Forward::eval(&self.store);
        let rep = self.represent(&mut f, batch)?;
        let x = f.tape.value(rep.x).clone();
        if !x.is_finite() {
            return Err(Error::NonFinite("patient representation".into()));
        }
        Ok(x)
    }

    /// End-to-end training objective: mixture likelihood plus the weighted
    /// load-balancing penalty.
    pub fn loss(&self, f: &mut Forward<T>, batch: &ModelBatch<T>) -> Result<Var> {
        let rep = self.represent(f, batch)?;
        let nll = self
            .head
            .negative_log_likelihood(f, rep.x, &batch.times, &batch.events, &batch.treatments)?;
        let aux = f.tape.scale(rep.aux_loss, T::lit(self.config.aux_weight));
        f.tape.add(nll, aux)
    }

    /// Phase-one objective: Breslow partial likelihood of a linear risk score
    /// plus the weighted load-balancing penalty.
    pub fn cox_loss(&self, f: &mut Forward<T>, batch: &ModelBatch<T>) -> Result<Var> {
        let rep = self.represent(f, batch)?;
        let risk = self.cox.forward(f, rep.x)?;
        let partial = cox_partial_likelihood(f, risk, &batch.times, &batch.events)?;
        let aux = f.tape.scale(rep.aux_loss, T::lit(self.config.aux_weight));
        f.tape.add(partial, aux)
    }

    pub fn hazard_table(&self) -> HazardTable<T> {
        self.head.table(&self.store)
    }

    /// Head state of every patient in `batch`.
    pub fn patients(&self, batch: &ModelBatch<T>) -> Result<Vec<PatientHead<T>>> {
        let x = self.representation(batch)?;
        self.patients_from_representation(&x)
    }

    /// Survival of every patient at `times`, using each patient's own
    /// treatment unless `treatment` overrides it.
    pub fn curves(&self, batch: &ModelBatch<T>, times: &[f64], treatment: Option<u8>) -> Result<PredictedCurves> {
        let patients = self.patients(batch)?;
        let table = self.hazard_table();
        let values = patients
            .iter()
            .zip(&batch.treatments)
            .map(|(p, &a)| {
                let a = treatment.unwrap_or(a);
                times.iter().map(|&t| table.survival_at(p, a, t).as_f64()).collect()
            })
            .collect();
        PredictedCurves::new(times.to_vec(), values)
    }

    pub fn patients_from_representation(&self, x: &Tensor<T>) -> Result<Vec<PatientHead<T>>> {
        (0..x.rows())
            .map(|i| self.head.patient(&self.store, x.row_slice(i)))
            .collect()
    }
}

/// Negative mean Breslow log partial likelihood of `risk` (`n × 1`):
/// `−(1/d) Σ_{i: δ_i} [r_i − log Σ_{j: Y_j ≥ Y_i} exp(r_j)]`. Zero without events.
pub fn cox_partial_likelihood<T: Real>(f: &mut Forward<T>, risk: Var, times: &[f64], events: &[bool]) -> Result<Var> {
    let n = times.len();
    let rv = f.tape.value(risk);
    if rv.shape() != [n, 1] || events.len() != n {
        return Err(Error::shape(
            "cox_partial_likelihood",
            "risk must be n × 1 with one event flag per row",
        ));
    }
    let d = events.iter().filter(|&&e| e).count();
    if d == 0 {
        return Ok(f.tape.constant(Tensor::scalar(T::zero())));
    }
    let max = rv.data().iter().copied().fold(T::neg_infinity(), T::max);
    let mut at_risk = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if times[j] >= times[i] {
                at_risk.set(i, j, T::one());
            }
        }
    }
    let centered = f.tape.add_scalar(risk, -max);
    let e = f.tape.exp(centered);
    let r = f.tape.constant(at_risk);
    let denom = f.tape.matmul(r, e)?;
    let log_denom = f.tape.log(denom);
    let diff = f.tape.sub(centered, log_denom)?;
    let mask = f.tape.constant(Tensor::column(
        events.iter().map(|&e| if e { T::one() } else { T::zero() }).collect(),
    ));
    let terms = f.tape.mul(diff, mask)?;
    let total = f.tape.sum(terms);
    Ok(f.tape.scale(total, -T::one() / T::from_usize_lossy(d)))
}
