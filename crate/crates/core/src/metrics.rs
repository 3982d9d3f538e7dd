//! Censored-survival evaluation: Kaplan–Meier, time-dependent concordance,
//! IPCW Brier score and its time integral.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survival::quantile_sorted;

/// Product-limit estimate. At tied times events are counted before
/// censorings, so a censored patient is still at risk at its own time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KaplanMeier {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KaplanMeier {
    /// `S(t)`, right-continuous.
    pub fn at(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|&s| s <= t);
        if idx == 0 {
            1.0
        } else {
            self.survival[idx - 1]
        }
    }

    /// `S(t⁻)`.
    pub fn left_limit(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|&s| s < t);
        if idx == 0 {
            1.0
        } else {
            self.survival[idx - 1]
        }
    }
}

fn check_outcomes(times: &[f64], events: &[bool]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::InvalidInput("no observations".into()));
    }
    if times.len() != events.len() {
        return Err(Error::InvalidInput(format!(
            "{} times but {} event flags",
            times.len(),
            events.len()
        )));
    }
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::InvalidInput("times must be finite and nonnegative".into()));
    }
    Ok(())
}

pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<KaplanMeier> {
    check_outcomes(times, events)?;
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut km = KaplanMeier {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
    };
    let mut remaining = times.len();
    let mut s = 1.0;
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut j = i;
        let mut d = 0;
        while j < order.len() && times[order[j]] == t {
            d += usize::from(events[order[j]]);
            j += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / remaining as f64;
            km.times.push(t);
            km.survival.push(s);
            km.at_risk.push(remaining);
            km.events.push(d);
        }
        remaining -= j - i;
        i = j;
    }
    Ok(km)
}

/// Censoring distribution: Kaplan–Meier with the event indicator flipped.
pub fn censoring_km(times: &[f64], events: &[bool]) -> Result<KaplanMeier> {
    let flipped: Vec<bool> = events.iter().map(|&e| !e).collect();
    kaplan_meier(times, &flipped)
}

/// Survival curves of `n` patients on a shared grid, read as step functions.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedCurves {
    pub grid: Vec<f64>,
    /// `values[i][g]` is patient `i`'s survival at `grid[g]`.
    pub values: Vec<Vec<f64>>,
}

impl PredictedCurves {
    pub fn new(grid: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(
                "curve grid must be nonempty and strictly increasing".into(),
            ));
        }
        if values.iter().any(|v| v.len() != grid.len()) {
            return Err(Error::InvalidInput("every curve needs one value per grid point".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value at the last grid point not after `t`; 1 before the grid starts.
    pub fn at(&self, patient: usize, t: f64) -> f64 {
        let idx = self.grid.partition_point(|&g| g <= t);
        if idx == 0 {
            1.0
        } else {
            self.values[patient][idx - 1]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concordance {
    pub index: f64,
    pub comparable: u64,
    pub concordant: u64,
    pub tied: u64,
}

/// Time-dependent concordance over pairs with `Y_i < Y_j` and `δ_i = 1`,
/// comparing both curves at `Y_i`; tied predictions score one half.
pub fn ctd_index(curves: &PredictedCurves, times: &[f64], events: &[bool]) -> Result<Concordance> {
    check_outcomes(times, events)?;
    if curves.len() != times.len() {
        return Err(Error::InvalidInput("one curve per patient required".into()));
    }
    let (mut comparable, mut concordant, mut tied) = (0u64, 0u64, 0u64);
    for i in 0..times.len() {
        if !events[i] {
            continue;
        }
        let s_i = curves.at(i, times[i]);
        for j in 0..times.len() {
            if times[j] <= times[i] {
                continue;
            }
            comparable += 1;
            let s_j = curves.at(j, times[i]);
            if s_i < s_j {
                concordant += 1;
            } else if s_i == s_j {
                tied += 1;
            }
        }
    }
    if comparable == 0 {
        return Err(Error::InvalidInput("no comparable pairs for concordance".into()));
    }
    Ok(Concordance {
        index: (2 * concordant + tied) as f64 / (2 * comparable) as f64,
        comparable,
        concordant,
        tied,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrierPoint {
    pub t: f64,
    pub brier: f64,
    /// Terms skipped because the censoring survival was zero.
    pub dropped: usize,
}

/// IPCW Brier score at `t`; `predicted[i]` is patient `i`'s survival at `t`.
pub fn brier_at(t: f64, predicted: &[f64], times: &[f64], events: &[bool], censor: &KaplanMeier) -> Result<BrierPoint> {
    check_outcomes(times, events)?;
    if predicted.len() != times.len() {
        return Err(Error::InvalidInput("one prediction per patient required".into()));
    }
    let g_t = censor.at(t);
    let mut total = 0.0;
    let mut dropped = 0;
    for ((&s, &y), &e) in predicted.iter().zip(times).zip(events) {
        if y <= t && e {
            let g = censor.left_limit(y);
            if g > 0.0 {
                total += s * s / g;
            } else {
                dropped += 1;
            }
        } else if y > t {
            if g_t > 0.0 {
                total += (1.0 - s) * (1.0 - s) / g_t;
            } else {
                dropped += 1;
            }
        }
    }
    if dropped > 0 {
        log::warn!("Brier score at t={t}: {dropped} terms dropped for zero censoring survival");
    }
    Ok(BrierPoint {
        t,
        brier: total / times.len() as f64,
        dropped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratedBrier {
    pub ibs: f64,
    pub points: Vec<BrierPoint>,
}

/// Trapezoidal integral of the Brier score over `grid`, divided by its span.
pub fn integrated_brier(
    curves: &PredictedCurves,
    times: &[f64],
    events: &[bool],
    grid: &[f64],
) -> Result<IntegratedBrier> {
    if grid.len() < 2 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(
            "integration grid needs at least two strictly increasing points".into(),
        ));
    }
    if curves.len() != times.len() {
        return Err(Error::InvalidInput("one curve per patient required".into()));
    }
    let censor = censoring_km(times, events)?;
    let points = grid
        .iter()
        .map(|&t| {
            let pred: Vec<f64> = (0..curves.len()).map(|i| curves.at(i, t)).collect();
            brier_at(t, &pred, times, events, &censor)
        })
        .collect::<Result<Vec<_>>>()?;
    let area: f64 = points
        .windows(2)
        .map(|w| 0.5 * (w[0].brier + w[1].brier) * (w[1].t - w[0].t))
        .sum();
    Ok(IntegratedBrier {
        ibs: area / (grid[grid.len() - 1] - grid[0]),
        points,
    })
}

/// `points` equally spaced times between the 5th and 95th percentiles of `times`.
pub fn default_ibs_grid(times: &[f64], points: usize) -> Result<Vec<f64>> {
    if times.is_empty() || points < 2 {
        return Err(Error::InvalidInput(
            "grid needs observations and at least two points".into(),
        ));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&sorted, 0.05);
    let hi = quantile_sorted(&sorted, 0.95);
    if !(hi > lo) {
        return Err(Error::InvalidInput("observed times have no spread".into()));
    }
    Ok((0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect())
}

/// Evaluation-grid definition recorded in reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub start: f64,
    pub end: f64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n: usize,
    pub events: usize,
    pub ctd: f64,
    pub comparable_pairs: u64,
    pub ibs: f64,
    pub grid: GridSpec,
    pub brier: Vec<BrierPoint>,
}

/// Times at which predictions must be available for [`evaluate`]: every
/// distinct observed time plus the integration grid.
pub fn evaluation_times(times: &[f64], ibs_grid: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = times.iter().chain(ibs_grid).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    all
}

pub fn evaluate(
    curves: &PredictedCurves,
    times: &[f64],
    events: &[bool],
    ibs_grid: &[f64],
) -> Result<EvaluationReport> {
    let c = ctd_index(curves, times, events)?;
    let ib = integrated_brier(curves, times, events, ibs_grid)?;
    Ok(EvaluationReport {
        n: times.len(),
        events: events.iter().filter(|&&e| e).count(),
        ctd: c.index,
        comparable_pairs: c.comparable,
        ibs: ib.ibs,
        grid: GridSpec {
            start: ibs_grid[0],
            end: ibs_grid[ibs_grid.len() - 1],
            points: ibs_grid.len(),
        },
        brier: ib.points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn km_without_events_is_flat() {
        let km = kaplan_meier(&[1.0, 2.0], &[false, false]).unwrap();
        assert!(km.times.is_empty());
        assert_eq!(km.at(5.0), 1.0);
    }

    #[test]
    fn km_small_fixtures() {
        let km = kaplan_meier(&[1.0, 2.0, 3.0], &[true, false, true]).unwrap();
        assert!((km.at(1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(km.at(3.0), 0.0);
        assert!((km.left_limit(3.0) - 2.0 / 3.0).abs() < 1e-15);

        let km = kaplan_meier(&[4.0, 1.0, 3.0, 2.0], &[true; 4]).unwrap();
        assert_eq!(km.survival, vec![0.75, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn km_counts_censored_at_risk_on_ties() {
        let km = kaplan_meier(&[2.0, 2.0, 3.0], &[true, false, true]).unwrap();
        assert_eq!(km.at_risk, vec![3, 1]);
        assert!((km.at(2.0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identical_predictions_give_half() {
        let curves = PredictedCurves::new(vec![0.0, 5.0], vec![vec![1.0, 0.4]; 4]).unwrap();
        let c = ctd_index(&curves, &[1.0, 2.0, 3.0, 4.0], &[true, true, false, true]).unwrap();
        assert_eq!(c.index, 0.5);
    }

    #[test]
    fn perfect_order_gives_one() {
        let grid = vec![0.0, 1.0, 2.0, 3.0];
        let values = (0..3)
            .map(|i| vec![1.0, 0.3 + 0.2 * i as f64, 0.2 + 0.2 * i as f64, 0.1 + 0.2 * i as f64])
            .collect();
        let curves = PredictedCurves::new(grid, values).unwrap();
        let c = ctd_index(&curves, &[1.0, 2.0, 3.0], &[true, true, true]).unwrap();
        assert_eq!(c.index, 1.0);
    }

    #[test]
    fn no_comparable_pairs_is_an_error() {
        let curves = PredictedCurves::new(vec![0.0], vec![vec![1.0]; 2]).unwrap();
        assert!(ctd_index(&curves, &[1.0, 2.0], &[false, false]).is_err());
    }

    #[test]
    fn constant_half_brier_is_quarter() {
        let times = [1.0, 2.0, 3.0, 4.0];
        let censor = censoring_km(&times, &[true; 4]).unwrap();
        let b = brier_at(2.5, &[0.5; 4], &times, &[true; 4], &censor).unwrap();
        assert!((b.brier - 0.25).abs() < 1e-15);
    }

    #[test]
    fn flat_brier_integrates_to_itself() {
        let times = [1.0, 2.0, 3.0, 4.0];
        let curves = PredictedCurves::new(vec![0.0], vec![vec![0.5]; 4]).unwrap();
        let ib = integrated_brier(&curves, &times, &[true; 4], &[1.5, 2.0, 3.5]).unwrap();
        assert!((ib.ibs - 0.25).abs() < 1e-15);
        assert!(integrated_brier(&curves, &times, &[true; 4], &[2.0]).is_err());
    }

    #[test]
    fn default_grid_spans_central_ninety_percent() {
        let times: Vec<f64> = (0..=100).map(f64::from).collect();
        let g = default_ibs_grid(&times, 100).unwrap();
        assert_eq!(g.len(), 100);
        assert!((g[0] - 5.0).abs() < 1e-12 && (g[99] - 95.0).abs() < 1e-12);
    }
}
