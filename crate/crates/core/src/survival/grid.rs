use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Right edges `t_1 < … < t_B` of the piecewise-constant hazard bins; the
/// first bin starts at 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    edges: Vec<f64>,
}

impl TimeGrid {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a time grid needs at least 2 bins, got {}",
                edges.len()
            )));
        }
        let mut prev = 0.0;
        for &e in &edges {
            if !e.is_finite() || e <= prev {
                return Err(Error::InvalidInput(format!(
                    "grid edges must be finite and strictly increasing from 0, got {edges:?}"
                )));
            }
            prev = e;
        }
        Ok(Self { edges })
    }

    /// Edges at the `b/B` quantiles of `times` (linear interpolation), the last
    /// edge at the maximum. Coincident quantiles are merged, so heavily tied
    /// data may yield fewer than `bins` bins.
    pub fn quantile(times: &[f64], bins: usize) -> Result<Self> {
        if times.is_empty() || times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::InvalidInput("grid needs finite nonnegative times".into()));
        }
        let mut sorted = times.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut edges: Vec<f64> = Vec::with_capacity(bins);
        for b in 1..=bins {
            let e = quantile_sorted(&sorted, b as f64 / bins as f64);
            if e > edges.last().copied().unwrap_or(0.0) {
                edges.push(e);
            }
        }
        if edges.len() < bins {
            log::warn!(
                "tied observation times: time grid has {} of {bins} requested bins",
                edges.len()
            );
        }
        Self::new(edges)
    }

    pub fn bins(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// `[0, t_1, …, t_B]`.
    pub fn points(&self) -> Vec<f64> {
        std::iter::once(0.0).chain(self.edges.iter().copied()).collect()
    }

    pub fn end(&self) -> f64 {
        *self.edges.last().expect("nonempty grid")
    }

    pub fn start_of(&self, bin: usize) -> f64 {
        if bin == 0 {
            0.0
        } else {
            self.edges[bin - 1]
        }
    }

    pub fn widths(&self) -> Vec<f64> {
        (0..self.bins()).map(|b| self.edges[b] - self.start_of(b)).collect()
    }

    /// Bin `b` with `t_{b-1} < t ≤ t_b`; times past the grid map to the last bin.
    pub fn bin_of(&self, t: f64) -> usize {
        self.edges.partition_point(|&e| e < t).min(self.bins() - 1)
    }

    /// Time spent in each bin over `[0, min(t, t_B)]`, so the cumulative hazard
    /// at `t` is the dot product of this vector with the bin hazards.
    pub fn exposure(&self, t: f64) -> Vec<f64> {
        let t = t.clamp(0.0, self.end());
        (0..self.bins())
            .map(|b| (t.min(self.edges[b]) - self.start_of(b)).max(0.0))
            .collect()
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_and_exposure() {
        let g = TimeGrid::new(vec![1.0, 2.0, 4.0]).unwrap();
        assert_eq!(g.widths(), vec![1.0, 1.0, 2.0]);
        assert_eq!(g.bin_of(0.0), 0);
        assert_eq!(g.bin_of(1.0), 0);
        assert_eq!(g.bin_of(1.5), 1);
        assert_eq!(g.bin_of(9.0), 2);
        assert_eq!(g.exposure(2.5), vec![1.0, 1.0, 0.5]);
        assert_eq!(g.exposure(10.0), vec![1.0, 1.0, 2.0]);
        assert_eq!(g.exposure(0.0), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn quantile_grid_ends_at_max() {
        let times: Vec<f64> = (1..=100).map(f64::from).collect();
        let g = TimeGrid::quantile(&times, 4).unwrap();
        assert_eq!(g.bins(), 4);
        assert_eq!(g.end(), 100.0);
        assert!((g.edges()[1] - 50.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(TimeGrid::new(vec![1.0]).is_err());
        assert!(TimeGrid::new(vec![1.0, 1.0]).is_err());
        assert!(TimeGrid::quantile(&[2.0, 2.0, 2.0], 5).is_err());
    }
}
