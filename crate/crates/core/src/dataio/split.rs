use crate::dataio::Cohort;
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Disjoint, exhaustive masks stratified jointly on `(event, treatment)`.
///
/// Each stratum is shuffled with the seed and divided by largest-remainder
/// rounding of `fractions`, so every split mirrors the overall event and
/// treatment mix up to rounding.
pub fn split_cohort(cohort: &Cohort, fractions: &[f64], seed: u64) -> Result<Vec<Vec<bool>>> {
    split_stratified(&cohort.events(), &cohort.treatments(), fractions, seed)
}

pub fn split_stratified(events: &[bool], treatments: &[u8], fractions: &[f64], seed: u64) -> Result<Vec<Vec<bool>>> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "split fractions must be positive, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split fractions must sum to 1, got {total}"
        )));
    }
    let n = events.len();
    let k = fractions.len();
    let mut masks = vec![vec![false; n]; k];
    let mut rng = SeededRng::new(seed).split("split");

    for stratum in 0..4u8 {
        let (ev, tr) = (stratum & 1 == 1, stratum >> 1);
        let mut members: Vec<usize> = (0..n).filter(|&i| events[i] == ev && treatments[i] == tr).collect();
        if members.is_empty() {
            continue;
        }
        rng.shuffle(&mut members);
        let counts = apportion(members.len(), fractions);
        let mut start = 0;
        for (s, &c) in counts.iter().enumerate() {
            for &i in &members[start..start + c] {
                masks[s][i] = true;
            }
            start += c;
        }
    }

    for (s, mask) in masks.iter().enumerate() {
        let has_event = mask.iter().zip(events).any(|(&m, &e)| m && e);
        if !has_event {
            return Err(Error::InvalidInput(format!(
                "split {s} (fraction {}) holds no events",
                fractions[s]
            )));
        }
    }
    Ok(masks)
}

/// Largest-remainder apportionment of `n` items; ties favor earlier splits.
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &s in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[s] += 1;
        left -= 1;
    }
    counts
}
