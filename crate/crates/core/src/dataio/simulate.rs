//! Synthetic cohorts with planted baseline and treatment-response subgroups.
//!
//! Patient `i` belongs to baseline group `k` and response group `m`. Its event
//! time is exponential with rate `baseline_rates[k] · exp(a · effect_betas[m])`,
//! censoring is an independent exponential whose rate is solved so the expected
//! censored fraction equals `censor_rate`, and every modality block is a fixed
//! random linear image of the concatenated one-hot codes plus Gaussian noise.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{Cohort, FeatureBlock, Modality, ModalitySchema, PatientRecord};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDims {
    pub clinical: usize,
    pub paraclinical: usize,
    pub demographic: usize,
    /// One entry per omics sub-block.
    pub omics: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub n: usize,
    pub k_groups: usize,
    pub m_groups: usize,
    pub baseline_rates: Vec<f64>,
    pub effect_betas: Vec<f64>,
    pub censor_rate: f64,
    pub noise_sd: f64,
    pub seed: u64,
    pub dims: FeatureDims,
    #[serde(default = "default_treatment_prob")]
    pub treatment_prob: f64,
}

fn default_treatment_prob() -> f64 {
    0.5
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            k_groups: 2,
            m_groups: 2,
            baseline_rates: vec![0.1, 0.4],
            effect_betas: vec![1.0, -1.0],
            censor_rate: 0.3,
            noise_sd: 0.5,
            seed: 0,
            dims: FeatureDims {
                clinical: 8,
                paraclinical: 8,
                demographic: 4,
                omics: vec![512, 384],
            },
            treatment_prob: default_treatment_prob(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if self.k_groups == 0 || self.m_groups == 0 {
            return bad("k_groups and m_groups must be at least 1".into());
        }
        if self.baseline_rates.len() != self.k_groups {
            return bad(format!(
                "baseline_rates has {} entries for {} groups",
                self.baseline_rates.len(),
                self.k_groups
            ));
        }
        if self.effect_betas.len() != self.m_groups {
            return bad(format!(
                "effect_betas has {} entries for {} groups",
                self.effect_betas.len(),
                self.m_groups
            ));
        }
        if self.baseline_rates.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return bad("baseline_rates must be positive".into());
        }
        if self.effect_betas.iter().any(|b| !b.is_finite()) {
            return bad("effect_betas must be finite".into());
        }
        if !(0.0..1.0).contains(&self.censor_rate) {
            return bad(format!("censor_rate {} outside [0, 1)", self.censor_rate));
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return bad("noise_sd must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.treatment_prob) {
            return bad("treatment_prob outside [0, 1]".into());
        }
        let d = &self.dims;
        if d.clinical == 0 || d.paraclinical == 0 || d.demographic == 0 || d.omics.is_empty() || d.omics.contains(&0) {
            return bad("every modality needs at least one feature and one omics block".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientTruth {
    pub id: String,
    pub true_time: f64,
    /// `+∞` when the cohort is uncensored.
    pub censor_time: f64,
    /// 1-based baseline group.
    pub true_k: usize,
    /// 1-based response group.
    pub true_m: usize,
    /// Sign of the planted log-hazard effect of treatment.
    pub effect_sign: i8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    pub patients: Vec<PatientTruth>,
}

impl SyntheticTruth {
    pub fn true_m(&self) -> Vec<usize> {
        self.patients.iter().map(|p| p.true_m).collect()
    }

    pub fn true_k(&self) -> Vec<usize> {
        self.patients.iter().map(|p| p.true_k).collect()
    }

    /// Writes the `id,true_time,censor_time,true_k,true_m` sidecar.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_path(path)?;
        w.write_record(["id", "true_time", "censor_time", "true_k", "true_m"])?;
        for p in &self.patients {
            w.write_record([
                p.id.clone(),
                format!("{}", p.true_time),
                format!("{}", p.censor_time),
                p.true_k.to_string(),
                p.true_m.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut patients = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let get = |i: usize| rec.get(i).unwrap_or("").to_string();
            let num = |i: usize| -> Result<f64> {
                get(i)
                    .parse()
                    .map_err(|_| Error::data(path.display().to_string(), format!("bad number '{}'", get(i))))
            };
            let int = |i: usize| -> Result<usize> {
                get(i)
                    .parse()
                    .map_err(|_| Error::data(path.display().to_string(), format!("bad index '{}'", get(i))))
            };
            patients.push(PatientTruth {
                id: get(0),
                true_time: num(1)?,
                censor_time: num(2)?,
                true_k: int(3)?,
                true_m: int(4)?,
                effect_sign: 0,
            });
        }
        Ok(Self { patients })
    }
}

/// Rate of the exponential censoring law that makes the expected censored
/// fraction `mean_i μ/(μ + r_i)` equal to `target`.
fn censoring_rate(event_rates: &[f64], target: f64) -> f64 {
    let frac = |mu: f64| event_rates.iter().map(|r| mu / (mu + r)).sum::<f64>() / event_rates.len() as f64;
    let (mut lo, mut hi) = (1e-12f64, 1.0f64);
    while frac(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if frac(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

pub fn simulate_cohort(config: &SimulationConfig) -> Result<(Cohort, SyntheticTruth)> {
    config.validate()?;
    let root = SeededRng::new(config.seed);
    let mut groups_rng = root.split("groups");
    let mut time_rng = root.split("event-times");
    let mut censor_rng = root.split("censor-times");
    let mut load_rng = root.split("loadings");
    let mut noise_rng = root.split("feature-noise");

    let n = config.n;
    let code_len = config.k_groups + config.m_groups;
    let mut modalities = vec![
        (Modality::Clinical, config.dims.clinical, "c".to_string()),
        (Modality::Paraclinical, config.dims.paraclinical, "p".to_string()),
        (Modality::Demographic, config.dims.demographic, "d".to_string()),
    ];
    for (s, &d) in config.dims.omics.iter().enumerate() {
        modalities.push((Modality::Omics(s + 1), d, format!("g{}_", s + 1)));
    }
    let loadings: Vec<Vec<f64>> = modalities
        .iter()
        .map(|(_, d, _)| (0..d * code_len).map(|_| load_rng.normal()).collect())
        .collect();

    let mut ks = Vec::with_capacity(n);
    let mut ms = Vec::with_capacity(n);
    let mut treat = Vec::with_capacity(n);
    let mut rates = Vec::with_capacity(n);
    for _ in 0..n {
        let k = groups_rng.below(config.k_groups);
        let m = groups_rng.below(config.m_groups);
        let a = u8::from(groups_rng.bernoulli(config.treatment_prob));
        ks.push(k);
        ms.push(m);
        treat.push(a);
        rates.push(config.baseline_rates[k] * (f64::from(a) * config.effect_betas[m]).exp());
    }
    let censor_mu = if config.censor_rate > 0.0 {
        Some(censoring_rate(&rates, config.censor_rate))
    } else {
        None
    };

    let mut records = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("P{:05}", i + 1);
        let t = time_rng.exponential(rates[i]);
        let c = censor_mu.map_or(f64::INFINITY, |mu| censor_rng.exponential(mu));
        let mut code = vec![0.0; code_len];
        code[ks[i]] = 1.0;
        code[config.k_groups + ms[i]] = 1.0;
        let blocks = modalities
            .iter()
            .zip(&loadings)
            .map(|((_, d, _), l)| {
                FeatureBlock::numeric((0..*d).map(|j| {
                    let signal: f64 = (0..code_len).map(|q| l[j * code_len + q] * code[q]).sum();
                    signal + config.noise_sd * noise_rng.normal()
                }))
            })
            .collect();
        records.push(PatientRecord {
            id: id.clone(),
            time: t.min(c),
            event: t <= c,
            treatment: treat[i],
            blocks,
        });
        let beta = config.effect_betas[ms[i]];
        truth.push(PatientTruth {
            id,
            true_time: t,
            censor_time: c,
            true_k: ks[i] + 1,
            true_m: ms[i] + 1,
            effect_sign: if beta > 0.0 {
                1
            } else if beta < 0.0 {
                -1
            } else {
                0
            },
        });
    }

    let schemas = modalities
        .iter()
        .map(|(m, d, prefix)| ModalitySchema {
            modality: *m,
            features: (1..=*d).map(|j| format!("{prefix}{j}")).collect(),
        })
        .collect();
    Ok((Cohort::new(records, schemas)?, SyntheticTruth { patients: truth }))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn config(n: usize) -> SimulationConfig {
        SimulationConfig {
            n,
            k_groups: 2,
            m_groups: 2,
            baseline_rates: vec![0.1, 0.4],
            effect_betas: vec![1.0, -1.0],
            censor_rate: 0.3,
            noise_sd: 0.5,
            seed: 3,
            dims: FeatureDims {
                clinical: 4,
                paraclinical: 3,
                demographic: 2,
                omics: vec![6, 5],
            },
            treatment_prob: 0.5,
        }
    }

    #[test]
    fn observed_time_is_min_of_true_and_censor() {
        let (c, t) = simulate_cohort(&config(300)).unwrap();
        for (r, p) in c.records.iter().zip(&t.patients) {
            assert_eq!(r.time, p.true_time.min(p.censor_time));
            assert_eq!(r.event, p.true_time <= p.censor_time);
        }
    }

    #[test]
    fn zero_censoring_means_all_events() {
        let mut cfg = config(200);
        cfg.censor_rate = 0.0;
        let (c, _) = simulate_cohort(&cfg).unwrap();
        assert!(c.records.iter().all(|r| r.event));
    }

    #[test]
    fn group_means_follow_rates() {
        let mut cfg = config(1000);
        cfg.censor_rate = 0.0;
        cfg.effect_betas = vec![0.0, 0.0];
        let (_, t) = simulate_cohort(&cfg).unwrap();
        for (k, expected) in [(1, 10.0), (2, 2.5)] {
            let times: Vec<f64> = t
                .patients
                .iter()
                .filter(|p| p.true_k == k)
                .map(|p| p.true_time)
                .collect();
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            assert!((mean / expected - 1.0).abs() < 0.15, "group {k} mean {mean}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = config(10);
        cfg.censor_rate = 1.0;
        assert!(simulate_cohort(&cfg).is_err());
        let mut cfg = config(10);
        cfg.baseline_rates = vec![0.1];
        assert!(simulate_cohort(&cfg).is_err());
        let mut cfg = config(10);
        cfg.baseline_rates = vec![0.1, -1.0];
        assert!(simulate_cohort(&cfg).is_err());
    }
}
