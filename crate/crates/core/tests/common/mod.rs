//! Shared fixtures and independent reference implementations for the integration tests.
#![allow(dead_code)]

use survmix::fusion::FusionConfig;
use survmix::metrics::PredictedCurves;
use survmix::numerics::nn::Forward;
use survmix::numerics::{SeededRng, Tensor};
use survmix::omics::OmicsConfig;
use survmix::survival::{HeadConfig, InputDims, ModelBatch, ModelConfig, RiskInput, SurvivalModel};

// ---------------------------------------------------------------------------
// Censored outcome fixtures

pub struct CurveFixture {
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub curves: PredictedCurves,
}

/// Outcomes on a coarse lattice (so times tie) with nonincreasing curves whose
/// values are quantized (so predictions tie too).
pub fn curve_fixture(rng: &mut SeededRng, n: usize) -> CurveFixture {
    let mut times: Vec<f64> = (0..n).map(|_| (1 + rng.below(40)) as f64 * 0.25).collect();
    let mut events: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.6)).collect();
    // Guarantees one comparable pair.
    (times[0], events[0], times[1]) = (0.25, true, 10.0);
    let grid: Vec<f64> = (0..=45).map(|g| g as f64 * 0.25).collect();
    let values = (0..n)
        .map(|_| {
            let mut s = 1.0;
            grid.iter()
                .map(|_| {
                    s *= 1.0 - 0.1 * rng.uniform();
                    (s * 20.0).round() / 20.0
                })
                .collect()
        })
        .collect();
    CurveFixture {
        times,
        events,
        curves: PredictedCurves::new(grid, values).unwrap(),
    }
}

/// Step lookup by linear scan: value at the last grid point `≤ t`, 1 before the grid.
pub fn step_value(grid: &[f64], values: &[f64], t: f64) -> f64 {
    let mut out = 1.0;
    for (g, v) in grid.iter().zip(values) {
        if *g <= t {
            out = *v;
        }
    }
    out
}

/// All-pairs concordance: `(concordant + ties / 2) / comparable`.
pub fn oracle_ctd(curves: &PredictedCurves, times: &[f64], events: &[bool]) -> f64 {
    let s = |i: usize, t: f64| step_value(&curves.grid, &curves.values[i], t);
    let mut mass = 0.0;
    let mut pairs = 0.0;
    for i in 0..times.len() {
        for j in 0..times.len() {
            if i == j || !events[i] || !(times[i] < times[j]) {
                continue;
            }
            pairs += 1.0;
            let (si, sj) = (s(i, times[i]), s(j, times[i]));
            if si < sj {
                mass += 1.0;
            } else if si == sj {
                mass += 0.5;
            }
        }
    }
    mass / pairs
}

/// Censoring survival `G(t)` (or `G(t⁻)` when `left`) by direct product over
/// censoring times; events at a tied time stay in the risk set.
pub fn oracle_censor_survival(times: &[f64], events: &[bool], t: f64, left: bool) -> f64 {
    let mut distinct: Vec<f64> = times.iter().zip(events).filter(|(_, &e)| !e).map(|(&y, _)| y).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut g = 1.0;
    for s in distinct {
        if s > t || (left && s == t) {
            break;
        }
        let at_risk = times.iter().filter(|&&y| y >= s).count() as f64;
        let censored = times.iter().zip(events).filter(|(&y, &e)| y == s && !e).count() as f64;
        g *= 1.0 - censored / at_risk;
    }
    g
}

/// IPCW Brier score at `t` straight from its definition.
pub fn oracle_brier(t: f64, predicted: &[f64], times: &[f64], events: &[bool]) -> f64 {
    let g_t = oracle_censor_survival(times, events, t, false);
    let mut total = 0.0;
    for i in 0..times.len() {
        let s = predicted[i];
        if times[i] <= t && events[i] {
            let g = oracle_censor_survival(times, events, times[i], true);
            if g > 0.0 {
                total += s * s / g;
            }
        } else if times[i] > t && g_t > 0.0 {
            total += (1.0 - s) * (1.0 - s) / g_t;
        }
    }
    total / times.len() as f64
}

pub fn oracle_ibs(curves: &PredictedCurves, times: &[f64], events: &[bool], grid: &[f64]) -> f64 {
    let b: Vec<f64> = grid
        .iter()
        .map(|&t| {
            let pred: Vec<f64> = curves.values.iter().map(|v| step_value(&curves.grid, v, t)).collect();
            oracle_brier(t, &pred, times, events)
        })
        .collect();
    let mut area = 0.0;
    for g in 1..grid.len() {
        area += (grid[g] - grid[g - 1]) * (b[g] + b[g - 1]) / 2.0;
    }
    area / (grid[grid.len() - 1] - grid[0])
}

// ---------------------------------------------------------------------------
// Model fixtures

fn matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

/// Standard-normal features, exponential outcomes and a share of absent omics blocks.
pub fn random_batch(rng: &mut SeededRng, n: usize, dims: &InputDims, present_rate: f64) -> ModelBatch<f64> {
    let omics_present: Vec<Vec<bool>> = dims
        .omics
        .iter()
        .map(|_| (0..n).map(|_| rng.bernoulli(present_rate)).collect())
        .collect();
    let omics = dims
        .omics
        .iter()
        .zip(&omics_present)
        .map(|(&d, present)| {
            let mut m = matrix(rng, n, d);
            for (r, &p) in present.iter().enumerate() {
                if !p {
                    for c in 0..d {
                        m.set(r, c, 0.0);
                    }
                }
            }
            m
        })
        .collect();
    let mut events: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.7)).collect();
    events[0] = true;
    ModelBatch {
        ids: (0..n).map(|i| format!("P{i:03}")).collect(),
        clinical: matrix(rng, n, dims.clinical),
        paraclinical: matrix(rng, n, dims.paraclinical),
        demographic: matrix(rng, n, dims.demographic),
        omics,
        omics_present,
        times: (0..n).map(|_| 0.05 + rng.exponential(0.3)).collect(),
        events,
        treatments: (0..n).map(|_| u8::from(rng.bernoulli(0.5))).collect(),
    }
}

/// A random configuration within `d_omics ≤ 12, D ≤ 8, K, M ≤ 3, B ≤ 5`, dropout off.
pub fn random_small_config(rng: &mut SeededRng) -> (InputDims, ModelConfig) {
    let blocks = 1 + rng.below(2);
    let omics: Vec<usize> = (0..blocks).map(|_| 3 + rng.below(10)).collect();
    let min_in = *omics.iter().min().unwrap();
    let experts = 1 + rng.below(4);
    let d_model = [4, 6, 8][rng.below(3)];
    let heads = [1, 2][rng.below(2)];
    let dims = InputDims {
        clinical: 1 + rng.below(4),
        paraclinical: 1 + rng.below(4),
        demographic: 1 + rng.below(3),
        omics,
    };
    let config = ModelConfig {
        omics: OmicsConfig {
            d_pre: 2 + rng.below(min_in - 2),
            experts,
            top_k: 1 + rng.below(experts),
            dropout: 0.0,
        },
        fusion: FusionConfig {
            d_model,
            heads,
            ff_hidden: 2 + rng.below(7),
            encoder_layers: 1 + rng.below(2),
            dropout: 0.0,
        },
        head: HeadConfig {
            k_groups: 1 + rng.below(3),
            m_groups: 1 + rng.below(3),
            bins: 2 + rng.below(4),
            gate_hidden: 2 + rng.below(6),
            risk_hidden: 2 + rng.below(4),
            risk_input: if rng.bernoulli(0.5) {
                RiskInput::GateLogits
            } else {
                RiskInput::Representation
            },
        },
        aux_weight: 0.1,
    };
    (dims, config)
}

/// Replaces every parameter with `N(0, scale²)` draws.
pub fn randomize_parameters(model: &mut SurvivalModel<f64>, rng: &mut SeededRng, scale: f64) {
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v = scale * rng.normal();
        }
    }
}

// ---------------------------------------------------------------------------
// Finite differences

/// Training objective and the omics routing it used.
fn objective(model: &SurvivalModel<f64>, batch: &ModelBatch<f64>) -> (f64, Vec<Vec<Vec<usize>>>) {
    let mut f = Forward::eval(&model.store);
    let rep = model.represent(&mut f, batch).unwrap();
    let nll = model
        .head
        .negative_log_likelihood(&mut f, rep.x, &batch.times, &batch.events, &batch.treatments)
        .unwrap();
    let aux = f.tape.scale(rep.aux_loss, model.config.aux_weight);
    let loss = f.tape.add(nll, aux).unwrap();
    let routing = rep.routing.iter().map(|r| r.selected.clone()).collect();
    (f.tape.scalar_value(loss), routing)
}

pub struct GradientCheck {
    /// `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖)` over every checked coordinate.
    pub relative_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation changed the expert selection, where the
    /// objective is not differentiable.
    pub skipped: usize,
}

/// Central differences of the end-to-end objective against the tape gradient, every coordinate.
pub fn gradient_check(model: &mut SurvivalModel<f64>, batch: &ModelBatch<f64>, step: f64) -> GradientCheck {
    let analytic: Vec<Tensor<f64>> = {
        let mut f = Forward::eval(&model.store);
        let loss = model.loss(&mut f, batch).unwrap();
        let grads = f.tape.backward(loss).unwrap();
        model
            .store
            .ids()
            .map(|id| grads.param_or_zero(id, &model.store))
            .collect()
    };
    let (_, routing) = objective(model, batch);
    let ids: Vec<_> = model.store.ids().collect();
    let (mut diff, mut norm_a, mut norm_f) = (0.0, 0.0, 0.0);
    let (mut checked, mut skipped) = (0, 0);
    for (p, id) in ids.into_iter().enumerate() {
        for j in 0..model.store.get(id).len() {
            let orig = model.store.get(id).data()[j];
            model.store.get_mut(id).data_mut()[j] = orig + step;
            let (up, r_up) = objective(model, batch);
            model.store.get_mut(id).data_mut()[j] = orig - step;
            let (down, r_down) = objective(model, batch);
            model.store.get_mut(id).data_mut()[j] = orig;
            if r_up != routing || r_down != routing {
                skipped += 1;
                continue;
            }
            let fd = (up - down) / (2.0 * step);
            let a = analytic[p].data()[j];
            diff += (a - fd).powi(2);
            norm_a += a * a;
            norm_f += fd * fd;
            checked += 1;
        }
    }
    let scale = norm_a.sqrt().max(norm_f.sqrt()).max(1e-300);
    GradientCheck {
        relative_error: diff.sqrt() / scale,
        checked,
        skipped,
    }
}
