//! Run configuration: defaults, a JSON document on top, then `--set` and flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use survmix::dataio::{PreprocessSpec, SimulationConfig};
use survmix::error::{Error, Result};
use survmix::pipeline::DEFAULT_SPLIT;
use survmix::survival::{ModelConfig, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    All,
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `clinical.csv`, `paraclinical.csv`, `demographic.csv` and `omics_<s>.csv`.
    pub dir: Option<PathBuf>,
    pub split: Vec<f64>,
    /// Patients scored by `eval`, `predict`, `phenotype` and `embed`.
    pub subset: Subset,
}

/// Allowed group counts for the mixture head and the group search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupBounds {
    pub k_min: usize,
    pub k_max: usize,
    pub m_min: usize,
    pub m_max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectsConfig {
    /// RMST horizon; the 95th percentile of observed times when absent.
    pub horizon: Option<f64>,
    pub subdivisions: usize,
    pub hopkins_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    /// Counterfactual arm emitted alongside the factual one.
    pub treatment: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub out: PathBuf,
    /// Checkpoint read by the scoring commands; `<out>/model.ckpt` when absent.
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub preprocess: PreprocessSpec,
    pub simulation: SimulationConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bounds: GroupBounds,
    pub effects: EffectsConfig,
    pub predict: PredictConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            out: PathBuf::from("out"),
            checkpoint: None,
            data: DataConfig {
                dir: None,
                split: DEFAULT_SPLIT.to_vec(),
                subset: Subset::All,
            },
            preprocess: PreprocessSpec::default(),
            simulation: SimulationConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            bounds: GroupBounds {
                k_min: 1,
                k_max: 5,
                m_min: 2,
                m_max: 3,
            },
            effects: EffectsConfig {
                horizon: None,
                subdivisions: 10,
                hopkins_fraction: 0.1,
            },
            predict: PredictConfig { treatment: None },
        }
    }
}

/// Keys fed from the root `seed` and therefore not settable directly.
const DERIVED_KEYS: [&str; 2] = ["simulation.seed", "train.seed"];

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Recursively overlays `patch` on `base`; objects merge key by key, anything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if !slot.is_null() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

fn has_path(value: &Value, path: &str) -> bool {
    path.split('.').try_fold(value, |v, key| v.get(key)).is_some()
}

fn set_path(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    if DERIVED_KEYS.contains(&path) {
        return Err(config_err(format!(
            "'{path}' follows the root seed; set 'seed' instead"
        )));
    }
    let mut slot = root;
    for key in path.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(key))
            .ok_or_else(|| config_err(format!("unknown key '{path}'")))?;
    }
    if slot.is_object() || slot.is_array() {
        return Err(config_err(format!("'{path}' is not a scalar key")));
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok(())
}

pub struct Overrides<'a> {
    pub config: Option<&'a Path>,
    pub seed: Option<u64>,
    pub out: Option<&'a Path>,
    pub set: &'a [String],
}

impl RunConfig {
    pub fn resolve(o: &Overrides<'_>) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = o.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
            let doc: Value = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            if !doc.is_object() {
                return Err(config_err(format!("{}: expected a JSON object", path.display())));
            }
            match doc.get("version").and_then(Value::as_u64) {
                Some(v) if v == u64::from(CONFIG_VERSION) => {}
                Some(v) => return Err(config_err(format!("unsupported config version {v}"))),
                None => return Err(config_err(format!("{}: missing 'version'", path.display()))),
            }
            if let Some(key) = DERIVED_KEYS.iter().find(|k| has_path(&doc, k)) {
                return Err(config_err(format!("'{key}' follows the root seed; set 'seed' instead")));
            }
            merge(&mut value, doc);
        }
        for item in o.set {
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| config_err(format!("--set expects key=value, got '{item}'")))?;
            set_path(&mut value, path.trim(), raw.trim())?;
        }
        if let Some(seed) = o.seed {
            value["seed"] = seed.into();
        }
        if let Some(out) = o.out {
            value["out"] = Value::String(out.display().to_string());
        }
        let mut config: RunConfig = serde_json::from_value(value).map_err(|e| config_err(e.to_string()))?;
        config.simulation.seed = config.seed;
        config.train.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let b = &self.bounds;
        if b.k_min == 0 || b.m_min == 0 || b.k_min > b.k_max || b.m_min > b.m_max {
            return Err(config_err("bounds must satisfy 1 <= min <= max"));
        }
        let check = |what: &str, v: usize, lo: usize, hi: usize| {
            if (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(config_err(format!("{what} = {v} outside bounds [{lo}, {hi}]")))
            }
        };
        check("model.head.k_groups", self.model.head.k_groups, b.k_min, b.k_max)?;
        check("model.head.m_groups", self.model.head.m_groups, b.m_min, b.m_max)?;
        if let Some(search) = &self.train.group_search {
            for &k in &search.k_values {
                check("train.group_search.k_values", k, b.k_min, b.k_max)?;
            }
            for &m in &search.m_values {
                check("train.group_search.m_values", m, b.m_min, b.m_max)?;
            }
        }
        if self.data.split.len() < 2 {
            return Err(config_err("data.split needs at least train and validation fractions"));
        }
        if let Some(dir) = &self.data.dir {
            if !dir.is_dir() {
                return Err(config_err(format!("data.dir {} does not exist", dir.display())));
            }
        }
        if let Some(ckpt) = &self.checkpoint {
            if !ckpt.is_file() {
                return Err(config_err(format!("checkpoint {} does not exist", ckpt.display())));
            }
        }
        if let Some(h) = self.effects.horizon {
            if !(h > 0.0 && h.is_finite()) {
                return Err(config_err("effects.horizon must be positive"));
            }
        }
        if self.effects.subdivisions == 0 {
            return Err(config_err("effects.subdivisions must be positive"));
        }
        if !(self.effects.hopkins_fraction > 0.0 && self.effects.hopkins_fraction <= 1.0) {
            return Err(config_err("effects.hopkins_fraction must lie in (0, 1]"));
        }
        if matches!(self.predict.treatment, Some(a) if a > 1) {
            return Err(config_err("predict.treatment must be 0 or 1"));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data
            .dir
            .as_deref()
            .ok_or_else(|| config_err("data.dir is required for this command"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    /// Hash of everything that shapes a trained model; output locations are excluded.
    pub fn fingerprint(&self) -> Result<String> {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.checkpoint = None;
        c.data.dir = None;
        survmix::checkpoint::config_hash(&c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(doc: Option<&str>, set: &[&str]) -> Result<RunConfig> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        if let Some(d) = doc {
            std::fs::write(&path, d).unwrap();
        }
        let set: Vec<String> = set.iter().map(|s| s.to_string()).collect();
        RunConfig::resolve(&Overrides {
            config: doc.map(|_| path.as_path()),
            seed: None,
            out: None,
            set: &set,
        })
    }

    #[test]
    fn defaults_validate() {
        let c = resolve(None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            resolve(Some(r#"{"version": 1, "modle": {}}"#), &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            resolve(
                Some(r#"{"version": 1, "model": {"head": {"bins": 5, "bogus": 1}}}"#),
                &[]
            ),
            Err(Error::Config(_))
        ));
        assert!(matches!(resolve(None, &["model.head.binz=3"]), Err(Error::Config(_))));
    }

    #[test]
    fn version_is_required() {
        assert!(resolve(Some(r#"{"seed": 3}"#), &[]).is_err());
        assert!(resolve(Some(r#"{"version": 2}"#), &[]).is_err());
    }

    #[test]
    fn partial_documents_and_sets_override_defaults() {
        let c = resolve(
            Some(r#"{"version": 1, "seed": 9, "model": {"head": {"bins": 7}}}"#),
            &[
                "model.fusion.d_model=16",
                "predict.treatment=1",
                "train.phase1.optimizer.kind=adam",
            ],
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.simulation.seed, 9);
        assert_eq!(c.model.head.bins, 7);
        assert_eq!(c.model.head.k_groups, 2);
        assert_eq!(c.model.fusion.d_model, 16);
        assert_eq!(c.predict.treatment, Some(1));
    }

    #[test]
    fn nested_seeds_and_containers_are_not_settable() {
        assert!(resolve(None, &["train.seed=4"]).is_err());
        assert!(resolve(Some(r#"{"version": 1, "simulation": {"seed": 4}}"#), &[]).is_err());
        assert!(resolve(None, &["model.head=3"]).is_err());
    }

    #[test]
    fn group_counts_respect_bounds() {
        assert!(resolve(None, &["model.head.m_groups=1"]).is_err());
        assert!(resolve(None, &["model.head.m_groups=1", "bounds.m_min=1"]).is_ok());
        assert!(resolve(None, &["model.head.k_groups=6"]).is_err());
    }

    #[test]
    fn fingerprint_ignores_locations() {
        let a = resolve(None, &["out=\"x\""]).unwrap();
        let b = resolve(None, &["out=\"y\""]).unwrap();
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        let c = resolve(None, &["seed=2"]).unwrap();
        assert_ne!(a.fingerprint().unwrap(), c.fingerprint().unwrap());
    }
}
