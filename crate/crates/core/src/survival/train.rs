use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::Forward;
use crate::numerics::{OptimizerConfig, OptimizerState, ParamId, Real, SeededRng, Tensor};
use crate::survival::{InputDims, ModelBatch, ModelConfig, SurvivalModel, TimeGrid, ENCODER_PREFIXES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Rows per mini-batch; 0 trains on the full set each step.
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping; `None` disables early stopping.
    pub patience: Option<usize>,
}

impl PhaseConfig {
    pub fn encoder_default() -> Self {
        Self {
            optimizer: OptimizerConfig::adamw(5e-4, 1e-5),
            epochs: 200,
            batch_size: 128,
            patience: Some(10),
        }
    }

    pub fn head_default() -> Self {
        Self {
            optimizer: OptimizerConfig::adam(0.01),
            epochs: 20,
            batch_size: 100,
            patience: None,
        }
    }
}

/// Candidate group counts for model selection by validation likelihood.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSearch {
    pub k_values: Vec<usize>,
    pub m_values: Vec<usize>,
}

impl Default for GroupSearch {
    fn default() -> Self {
        Self {
            k_values: (1..=5).collect(),
            m_values: vec![2, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "PhaseConfig::encoder_default")]
    pub phase1: PhaseConfig,
    #[serde(default = "PhaseConfig::head_default")]
    pub phase2: PhaseConfig,
    #[serde(default)]
    pub group_search: Option<GroupSearch>,
    /// Keeps the risk network at its current values during phase two.
    #[serde(default)]
    pub freeze_risk_network: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1: PhaseConfig::encoder_default(),
            phase2: PhaseConfig::head_default(),
            group_search: None,
            freeze_risk_network: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub phase: u8,
    pub epoch: usize,
    pub train: f64,
    pub validation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub k_groups: usize,
    pub m_groups: usize,
    pub validation_nll: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<EpochLoss>,
    /// Epoch whose encoder weights were kept (`None` when phase one did not run).
    pub best_phase1_epoch: Option<usize>,
    pub search: Vec<SearchResult>,
    pub k_groups: usize,
    pub m_groups: usize,
    pub validation_nll: f64,
}

pub struct TrainedModel<T> {
    pub model: SurvivalModel<T>,
    pub report: TrainReport,
}

/// Time grid and initial hazard rate derived from the training outcomes.
pub fn grid_for<T: Real>(train: &ModelBatch<T>, bins: usize) -> Result<(TimeGrid, f64)> {
    if train.event_count() == 0 {
        return Err(Error::InvalidInput("training split has no events".into()));
    }
    Ok((TimeGrid::quantile(&train.times, bins)?, train.crude_rate()))
}

/// Two-phase fit: the encoder stack against a partial-likelihood head, then
/// the mixture head on frozen representations.
pub fn train<T: Real>(
    train_set: &ModelBatch<T>,
    val_set: &ModelBatch<T>,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainedModel<T>> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidInput(
            "training and validation sets must be nonempty".into(),
        ));
    }
    let dims: InputDims = train_set.dims();
    dims.check_matches(&val_set.dims())?;
    let (grid, rate) = grid_for(train_set, model_config.head.bins)?;
    let beyond = val_set.times.iter().filter(|&&t| t > grid.end()).count();
    if beyond > 0 {
        log::warn!(
            "{beyond} validation times exceed the grid end {}; their likelihood uses the last bin",
            grid.end()
        );
    }
    let root = SeededRng::new(config.seed);

    let mut model = SurvivalModel::<T>::new(dims.clone(), model_config.clone(), grid.clone(), rate, config.seed)?;
    let mut losses = Vec::new();
    let best_phase1_epoch = fit_encoder(&mut model, train_set, val_set, &config.phase1, &root, &mut losses)?;

    let x_train = model.representation(train_set)?;
    let x_val = model.representation(val_set)?;

    let candidates: Vec<(usize, usize)> = match &config.group_search {
        Some(gs) => {
            if gs.k_values.is_empty() || gs.m_values.is_empty() {
                return Err(Error::Config("group search needs candidate K and M values".into()));
            }
            gs.k_values
                .iter()
                .flat_map(|&k| gs.m_values.iter().map(move |&m| (k, m)))
                .collect()
        }
        None => vec![(model_config.head.k_groups, model_config.head.m_groups)],
    };

    let mut search = Vec::new();
    let mut best: Option<(f64, SurvivalModel<T>, Vec<EpochLoss>)> = None;
    for (k, m) in candidates {
        let mut cfg = model_config.clone();
        cfg.head.k_groups = k;
        cfg.head.m_groups = m;
        let mut candidate = SurvivalModel::<T>::new(dims.clone(), cfg, grid.clone(), rate, config.seed)?;
        candidate.copy_encoder_from(&model)?;
        let mut trace = Vec::new();
        let label = format!("phase2-{k}x{m}");
        fit_head(
            &mut candidate,
            (&x_train, train_set),
            (&x_val, val_set),
            config,
            &root.split(&label),
            &mut trace,
        )?;
        let val_nll = head_nll(&candidate, &x_val, val_set)?;
        log::info!("K={k} M={m}: validation NLL {val_nll:.6}");
        search.push(SearchResult {
            k_groups: k,
            m_groups: m,
            validation_nll: val_nll,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_nll < *b) {
            best = Some((val_nll, candidate, trace));
        }
    }
    let (validation_nll, model, trace) = best.expect("at least one candidate");
    losses.extend(trace);
    let report = TrainReport {
        losses,
        best_phase1_epoch,
        search,
        k_groups: model.head.k_groups(),
        m_groups: model.head.m_groups(),
        validation_nll,
    };
    Ok(TrainedModel { model, report })
}

/// Phase two alone on an existing model: refits the mixture head on the
/// model's current representations and returns the per-epoch losses.
pub fn train_head<T: Real>(
    model: &mut SurvivalModel<T>,
    train_set: &ModelBatch<T>,
    val_set: &ModelBatch<T>,
    config: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidInput(
            "training and validation sets must be nonempty".into(),
        ));
    }
    let x_train = model.representation(train_set)?;
    let x_val = model.representation(val_set)?;
    let (k, m) = (model.head.k_groups(), model.head.m_groups());
    let root = SeededRng::new(config.seed);
    let mut losses = Vec::new();
    fit_head(
        model,
        (&x_train, train_set),
        (&x_val, val_set),
        config,
        &root.split(&format!("phase2-{k}x{m}")),
        &mut losses,
    )?;
    Ok(losses)
}

fn batches(n: usize, batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let order = rng.permutation(n);
    let size = if batch_size == 0 { n } else { batch_size };
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

fn check_finite(value: f64, phase: u8, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "phase {phase} loss became {value} in epoch {epoch}"
        )))
    }
}

fn step_error(e: Error, phase: u8, epoch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::Divergence(format!("phase {phase}, epoch {epoch}: non-finite {what}")),
        other => other,
    }
}

fn encoder_ids<T: Real>(model: &SurvivalModel<T>) -> Vec<ParamId> {
    model
        .store
        .ids()
        .filter(|&id| ENCODER_PREFIXES.iter().any(|p| model.store.name(id).starts_with(p)))
        .collect()
}

fn snapshot<T: Real>(model: &SurvivalModel<T>, ids: &[ParamId]) -> Vec<Tensor<T>> {
    ids.iter().map(|&id| model.store.get(id).clone()).collect()
}

fn restore<T: Real>(model: &mut SurvivalModel<T>, ids: &[ParamId], values: Vec<Tensor<T>>) -> Result<()> {
    for (&id, v) in ids.iter().zip(values) {
        model.store.set(id, v)?;
    }
    Ok(())
}

fn fit_encoder<T: Real>(
    model: &mut SurvivalModel<T>,
    train_set: &ModelBatch<T>,
    val_set: &ModelBatch<T>,
    phase: &PhaseConfig,
    root: &SeededRng,
    losses: &mut Vec<EpochLoss>,
) -> Result<Option<usize>> {
    if phase.epochs == 0 {
        return Ok(None);
    }
    let ids = encoder_ids(model);
    let mut opt = OptimizerState::new(phase.optimizer, &model.store, ids.clone());
    let mut shuffle = root.split("phase1-shuffle");
    let dropout = root.split("phase1-dropout");
    let mut best = (f64::INFINITY, 0usize, snapshot(model, &ids));
    let mut since_best = 0;

    for epoch in 0..phase.epochs {
        let mut total = 0.0;
        let mut count = 0;
        for (b, idx) in batches(train_set.len(), phase.batch_size, &mut shuffle)
            .into_iter()
            .enumerate()
        {
            let batch = train_set.select(&idx);
            let grads = {
                let mut f = Forward::train(&model.store, dropout.split(&format!("{epoch}-{b}")));
                let loss = model.cox_loss(&mut f, &batch)?;
                let value = f.tape.scalar_value(loss).as_f64();
                check_finite(value, 1, epoch)?;
                total += value * idx.len() as f64;
                count += idx.len();
                f.tape.backward(loss).map_err(|e| step_error(e, 1, epoch))?
            };
            opt.step(&mut model.store, &grads)
                .map_err(|e| step_error(e, 1, epoch))?;
        }
        let val = {
            let mut f = Forward::eval(&model.store);
            let loss = model.cox_loss(&mut f, val_set)?;
            f.tape.scalar_value(loss).as_f64()
        };
        check_finite(val, 1, epoch)?;
        let train_loss = total / count as f64;
        log::debug!("phase 1 epoch {epoch}: train {train_loss:.6} validation {val:.6}");
        losses.push(EpochLoss {
            phase: 1,
            epoch,
            train: train_loss,
            validation: val,
        });
        if val < best.0 {
            best = (val, epoch, snapshot(model, &ids));
            since_best = 0;
        } else {
            since_best += 1;
            if phase.patience.is_some_and(|p| since_best >= p) {
                log::info!("phase 1 stopped early after epoch {epoch}");
                break;
            }
        }
    }
    let (_, best_epoch, values) = best;
    restore(model, &ids, values)?;
    Ok(Some(best_epoch))
}

fn head_nll<T: Real>(model: &SurvivalModel<T>, x: &Tensor<T>, set: &ModelBatch<T>) -> Result<f64> {
    let mut f = Forward::eval(&model.store);
    let xv = f.input(x.clone());
    let loss = model
        .head
        .negative_log_likelihood(&mut f, xv, &set.times, &set.events, &set.treatments)?;
    Ok(f.tape.scalar_value(loss).as_f64())
}

/// Phase two on precomputed representations. The encoder is frozen, so its
/// load-balancing penalty is a constant and left out of this objective.
fn fit_head<T: Real>(
    model: &mut SurvivalModel<T>,
    (x_train, train_set): (&Tensor<T>, &ModelBatch<T>),
    (x_val, val_set): (&Tensor<T>, &ModelBatch<T>),
    config: &TrainConfig,
    rng: &SeededRng,
    losses: &mut Vec<EpochLoss>,
) -> Result<()> {
    let phase = &config.phase2;
    let ids = model.head.param_ids(!config.freeze_risk_network);
    let mut opt = OptimizerState::new(phase.optimizer, &model.store, ids.clone());
    let mut shuffle = rng.split("shuffle");
    let mut best = (f64::INFINITY, snapshot(model, &ids));
    let mut since_best = 0;
    for epoch in 0..phase.epochs {
        let mut total = 0.0;
        for idx in batches(train_set.len(), phase.batch_size, &mut shuffle) {
            let grads = {
                let mut f = Forward::eval(&model.store);
                let xv = f.input(x_train.select_rows(&idx));
                let times: Vec<f64> = idx.iter().map(|&i| train_set.times[i]).collect();
                let events: Vec<bool> = idx.iter().map(|&i| train_set.events[i]).collect();
                let treat: Vec<u8> = idx.iter().map(|&i| train_set.treatments[i]).collect();
                let loss = model
                    .head
                    .negative_log_likelihood(&mut f, xv, &times, &events, &treat)?;
                let value = f.tape.scalar_value(loss).as_f64();
                check_finite(value, 2, epoch)?;
                total += value * idx.len() as f64;
                f.tape.backward(loss).map_err(|e| step_error(e, 2, epoch))?
            };
            opt.step(&mut model.store, &grads)
                .map_err(|e| step_error(e, 2, epoch))?;
        }
        let val = head_nll(model, x_val, val_set)?;
        check_finite(val, 2, epoch)?;
        losses.push(EpochLoss {
            phase: 2,
            epoch,
            train: total / train_set.len() as f64,
            validation: val,
        });
        if let Some(p) = phase.patience {
            if val < best.0 {
                best = (val, snapshot(model, &ids));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= p {
                    break;
                }
            }
        }
    }
    if phase.patience.is_some() && phase.epochs > 0 {
        restore(model, &ids, best.1)?;
    }
    Ok(())
}
