//! Subgroup treatment effects, responder profiling and latent-space summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, Real, SeededRng, Tensor};
use crate::survival::{quantile_sorted, HazardTable, PatientHead};

/// Hard group assignment (0-based indices).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub k: usize,
    pub m: usize,
}

/// Argmax of each gate's logits; ties go to the lower index.
pub fn assign_subgroups<T: Real>(patients: &[PatientHead<T>]) -> Vec<Assignment> {
    patients
        .iter()
        .map(|p| Assignment {
            k: argmax(&p.gates.baseline_logits),
            m: argmax(&p.gates.response_logits),
        })
        .collect()
}

/// Default effect horizon: the 95th percentile of observed times.
pub fn default_horizon(times: &[f64]) -> Result<f64> {
    if times.is_empty() {
        return Err(Error::InvalidInput("no observed times".into()));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, 0.95))
}

/// Integration nodes on `[0, horizon]`: every grid point below the horizon,
/// each bin split into `subdivisions` equal steps, and the horizon itself.
pub fn integration_nodes(grid_points: &[f64], horizon: f64, subdivisions: usize) -> Vec<f64> {
    let steps = subdivisions.max(1);
    let mut nodes = vec![0.0];
    for w in grid_points.windows(2) {
        let (a, b) = (w[0], w[1].min(horizon));
        if a >= horizon {
            break;
        }
        for s in 1..=steps {
            nodes.push(a + (b - a) * s as f64 / steps as f64);
        }
    }
    if *nodes.last().expect("starts at 0") < horizon {
        nodes.push(horizon);
    }
    nodes
}

/// Trapezoidal `∫₀^horizon [Ŝ(t | x, 1) − Ŝ(t | x, 0)] dt` for one patient.
pub fn rmst_difference<T: Real>(
    table: &HazardTable<T>,
    patient: &PatientHead<T>,
    horizon: f64,
    subdivisions: usize,
) -> f64 {
    let nodes = integration_nodes(&table.grid.points(), horizon, subdivisions);
    let diff: Vec<f64> = nodes
        .iter()
        .map(|&t| (table.survival_at(patient, 1, t) - table.survival_at(patient, 0, t)).as_f64())
        .collect();
    nodes
        .windows(2)
        .zip(diff.windows(2))
        .map(|(t, d)| 0.5 * (d[0] + d[1]) * (t[1] - t[0]))
        .sum()
}

/// Mean RMST difference over the members of response group `m`.
pub fn subgroup_effect<T: Real>(
    table: &HazardTable<T>,
    patients: &[PatientHead<T>],
    assignments: &[Assignment],
    m: usize,
    horizon: f64,
    subdivisions: usize,
) -> Result<f64> {
    let members: Vec<usize> = (0..patients.len()).filter(|&i| assignments[i].m == m).collect();
    if members.is_empty() {
        return Err(Error::InvalidInput(format!("response group {} has no members", m + 1)));
    }
    let total: f64 = members
        .iter()
        .map(|&i| rmst_difference(table, &patients[i], horizon, subdivisions))
        .sum();
    Ok(total / members.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseGroup {
    /// 1-based group label.
    pub group: usize,
    pub count: usize,
    pub ids: Vec<String>,
    /// Mean RMST difference (treated minus control); absent for empty groups.
    pub effect: Option<f64>,
    pub omega: f64,
    pub risk_diff_mean: Option<f64>,
    pub risk_diff_sd: Option<f64>,
    pub tier: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineStratum {
    pub group: usize,
    pub count: usize,
    /// Mean untreated risk `1 − Ŝ(horizon | x, 0)`.
    pub risk_mean: Option<f64>,
    pub risk_sd: Option<f64>,
    pub tier: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientEffect {
    pub id: String,
    pub k_hat: usize,
    pub m_hat: usize,
    /// `Ŝ(horizon | x, 1) − Ŝ(horizon | x, 0)`: risk removed by treatment.
    pub risk_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub horizon: f64,
    pub response_groups: Vec<ResponseGroup>,
    pub tiers_distinguishable: bool,
    pub baseline_strata: Vec<BaselineStratum>,
    pub patients: Vec<PatientEffect>,
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (Some(mean), Some(sd))
}

/// Labels groups by the rank of `score` (low, moderate, high). Returns
/// `None` when every present score is equal.
fn tiers(scores: &[Option<f64>], labels: [&str; 3]) -> Option<Vec<String>> {
    let present: Vec<(usize, f64)> = scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|v| (i, v)))
        .collect();
    let first = present.first()?.1;
    if present
        .iter()
        .all(|p| (p.1 - first).abs() <= 1e-12 * (1.0 + first.abs()))
    {
        return None;
    }
    let mut order = present.clone();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut out = vec!["empty".to_string(); scores.len()];
    let last = order.len() - 1;
    for (rank, (i, _)) in order.iter().enumerate() {
        out[*i] = if rank == 0 {
            labels[0]
        } else if rank == last {
            labels[2]
        } else {
            labels[1]
        }
        .to_string();
    }
    Some(out)
}

pub fn profile_subgroups<T: Real>(
    ids: &[String],
    table: &HazardTable<T>,
    patients: &[PatientHead<T>],
    horizon: f64,
    subdivisions: usize,
) -> Result<EffectReport> {
    if ids.len() != patients.len() {
        return Err(Error::InvalidInput("one id per patient required".into()));
    }
    let assignments = assign_subgroups(patients);
    let per_patient: Vec<PatientEffect> = patients
        .iter()
        .zip(ids)
        .zip(&assignments)
        .map(|((p, id), a)| PatientEffect {
            id: id.clone(),
            k_hat: a.k + 1,
            m_hat: a.m + 1,
            risk_diff: (table.survival_at(p, 1, horizon) - table.survival_at(p, 0, horizon)).as_f64(),
        })
        .collect();

    let mut response_groups = Vec::with_capacity(table.m_groups);
    for m in 0..table.m_groups {
        let members: Vec<usize> = (0..patients.len()).filter(|&i| assignments[i].m == m).collect();
        let effect = if members.is_empty() {
            None
        } else {
            Some(subgroup_effect(
                table,
                patients,
                &assignments,
                m,
                horizon,
                subdivisions,
            )?)
        };
        let diffs: Vec<f64> = members.iter().map(|&i| per_patient[i].risk_diff).collect();
        let (risk_diff_mean, risk_diff_sd) = mean_sd(&diffs);
        response_groups.push(ResponseGroup {
            group: m + 1,
            count: members.len(),
            ids: members.iter().map(|&i| ids[i].clone()).collect(),
            effect,
            omega: table.omega[m].as_f64(),
            risk_diff_mean,
            risk_diff_sd,
            tier: String::new(),
        });
    }
    let magnitudes: Vec<Option<f64>> = response_groups.iter().map(|g| g.effect.map(f64::abs)).collect();
    let response_tiers = tiers(&magnitudes, ["low responder", "moderate responder", "high responder"]);
    let tiers_distinguishable = response_tiers.is_some();
    for (g, label) in response_groups.iter_mut().enumerate() {
        label.tier = match &response_tiers {
            Some(t) => t[g].clone(),
            None if label.count == 0 => "empty".into(),
            None => "indistinguishable".into(),
        };
    }

    let mut baseline_strata = Vec::with_capacity(table.k_groups);
    for k in 0..table.k_groups {
        let risks: Vec<f64> = (0..patients.len())
            .filter(|&i| assignments[i].k == k)
            .map(|i| 1.0 - table.survival_at(&patients[i], 0, horizon).as_f64())
            .collect();
        let (risk_mean, risk_sd) = mean_sd(&risks);
        baseline_strata.push(BaselineStratum {
            group: k + 1,
            count: risks.len(),
            risk_mean,
            risk_sd,
            tier: String::new(),
        });
    }
    let risk_scores: Vec<Option<f64>> = baseline_strata.iter().map(|s| s.risk_mean).collect();
    let risk_tiers = tiers(&risk_scores, ["low risk", "moderate risk", "high risk"]);
    for (k, s) in baseline_strata.iter_mut().enumerate() {
        s.tier = match &risk_tiers {
            Some(t) => t[k].clone(),
            None if s.count == 0 => "empty".into(),
            None => "indistinguishable".into(),
        };
    }

    Ok(EffectReport {
        horizon,
        response_groups,
        tiers_distinguishable,
        baseline_strata,
        patients: per_patient,
    })
}

fn check_points(points: &Tensor<f64>, min_rows: usize) -> Result<()> {
    if points.rows() < min_rows || points.cols() == 0 {
        return Err(Error::InvalidInput(format!(
            "need at least {min_rows} points with at least one coordinate, got {:?}",
            points.shape()
        )));
    }
    if !points.is_finite() {
        return Err(Error::NonFinite("points".into()));
    }
    Ok(())
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Hopkins statistic `Σu / (Σu + Σw)`: `u` are nearest-data distances of
/// uniform points in the bounding box, `w` nearest-neighbour distances of
/// sampled data points. Near 1 means clustered, about 0.5 means uniform.
pub fn hopkins(points: &Tensor<f64>, sample_fraction: f64, seed: u64) -> Result<f64> {
    check_points(points, 10)?;
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "sample fraction {sample_fraction} outside (0, 1]"
        )));
    }
    let (n, d) = (points.rows(), points.cols());
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for r in 0..n {
        for (j, &v) in points.row_slice(r).iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    if lo.iter().zip(&hi).all(|(a, b)| a == b) {
        return Err(Error::InvalidInput("all points are identical".into()));
    }
    let m = ((sample_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let root = SeededRng::new(seed);
    let sample = root.split("hopkins-sample").permutation(n);
    let mut uniform = root.split("hopkins-uniform");

    let mut sum_w = 0.0;
    for &i in &sample[..m] {
        let p = points.row_slice(i);
        let nearest = (0..n)
            .filter(|&j| j != i)
            .map(|j| distance(p, points.row_slice(j)))
            .fold(f64::INFINITY, f64::min);
        sum_w += nearest;
    }
    let mut sum_u = 0.0;
    for _ in 0..m {
        let q: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(&a, &b)| uniform.uniform_range(a, b.max(a)))
            .collect();
        let nearest = (0..n)
            .map(|j| distance(&q, points.row_slice(j)))
            .fold(f64::INFINITY, f64::min);
        sum_u += nearest;
    }
    if sum_u + sum_w == 0.0 {
        return Err(Error::InvalidInput("degenerate point set".into()));
    }
    Ok(sum_u / (sum_u + sum_w))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// `n` rows of `[pc1, pc2]`.
    pub coords: Vec<[f64; 2]>,
    pub explained: [f64; 2],
    pub components: Vec<Vec<f64>>,
}

pub const PCA_TOLERANCE: f64 = 1e-10;
pub const PCA_MAX_ITER: usize = 10_000;

fn mat_vec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Leading eigenpair of a symmetric positive semidefinite matrix.
fn power_iteration(a: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let d = a.len();
    let start = (0..d)
        .max_by(|&i, &j| a[i][i].total_cmp(&a[j][j]).then(j.cmp(&i)))
        .unwrap_or(0);
    let mut v = a[start].clone();
    let nv = norm(&v);
    if nv == 0.0 {
        let mut e = vec![0.0; d];
        e[start] = 1.0;
        return (0.0, e);
    }
    v.iter_mut().for_each(|x| *x /= nv);
    for _ in 0..PCA_MAX_ITER {
        let mut w = mat_vec(a, &v);
        let nw = norm(&w);
        if nw == 0.0 {
            return (0.0, v);
        }
        w.iter_mut().for_each(|x| *x /= nw);
        let delta = norm(&w.iter().zip(&v).map(|(x, y)| x - y).collect::<Vec<_>>());
        v = w;
        if delta < PCA_TOLERANCE {
            break;
        }
    }
    let lambda = v.iter().zip(mat_vec(a, &v)).map(|(x, y)| x * y).sum();
    (lambda, v)
}

fn orient(v: &mut [f64]) {
    let idx = (0..v.len())
        .max_by(|&i, &j| v[i].abs().total_cmp(&v[j].abs()).then(j.cmp(&i)))
        .unwrap_or(0);
    if v[idx] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Projects centred data onto its two leading principal axes.
pub fn pca_project(points: &Tensor<f64>) -> Result<Projection> {
    check_points(points, 2)?;
    let (n, d) = (points.rows(), points.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(points.row_slice(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<Vec<f64>> = (0..n)
        .map(|r| points.row_slice(r).iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for row in &centred {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += row[i] * row[j];
            }
        }
    }
    cov.iter_mut().flatten().for_each(|c| *c /= (n - 1) as f64);
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum();
    if !(trace > 0.0) {
        return Err(Error::InvalidInput("points have zero variance".into()));
    }

    let mut components = Vec::with_capacity(2);
    let mut explained = [0.0; 2];
    let mut deflated = cov.clone();
    for share in explained.iter_mut().take(d) {
        let (lambda, mut v) = power_iteration(&deflated);
        let lambda = lambda.max(0.0);
        if lambda <= trace * 1e-14 {
            break;
        }
        orient(&mut v);
        for i in 0..d {
            for j in 0..d {
                deflated[i][j] -= lambda * v[i] * v[j];
            }
        }
        *share = lambda / trace;
        components.push(v);
    }
    let coords = centred
        .iter()
        .map(|row| {
            let mut c = [0.0; 2];
            for (slot, comp) in components.iter().enumerate() {
                c[slot] = row.iter().zip(comp).map(|(x, y)| x * y).sum();
            }
            c
        })
        .collect();
    Ok(Projection {
        coords,
        explained,
        components,
    })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidInput(
            "labelings must be nonempty and of equal length".into(),
        ));
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(a.len() as u64);
    let expected = if total > 0.0 { sum_a * sum_b / total } else { 0.0 };
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentSpace {
    #[serde(rename = "X")]
    Representation,
    #[serde(rename = "Z-logits")]
    BaselineLogits,
    #[serde(rename = "Phi-logits")]
    ResponseLogits,
}

impl LatentSpace {
    pub fn tag(self) -> &'static str {
        match self {
            LatentSpace::Representation => "X",
            LatentSpace::BaselineLogits => "Z-logits",
            LatentSpace::ResponseLogits => "Phi-logits",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentExport {
    pub space: LatentSpace,
    pub coords: Vec<[f64; 2]>,
    pub explained: [f64; 2],
    /// `None` when the space is too small or degenerate for the statistic.
    pub hopkins: Option<f64>,
}

pub const HOPKINS_CONVENTION: &str = "H near 1 = clustered, 0.5 = uniform random";

/// PCA and Hopkins summaries of one latent space. Degenerate spaces yield
/// zero coordinates rather than an error.
pub fn latent_export(
    space: LatentSpace,
    points: &Tensor<f64>,
    sample_fraction: f64,
    seed: u64,
) -> Result<LatentExport> {
    let (coords, explained) = match pca_project(points) {
        Ok(p) => (p.coords, p.explained),
        Err(Error::InvalidInput(msg)) => {
            log::warn!("{}: {msg}; exporting zero coordinates", space.tag());
            (vec![[0.0; 2]; points.rows()], [0.0; 2])
        }
        Err(e) => return Err(e),
    };
    let hopkins = match hopkins(points, sample_fraction, seed) {
        Ok(h) => Some(h),
        Err(Error::InvalidInput(msg)) => {
            log::warn!("{}: Hopkins statistic unavailable: {msg}", space.tag());
            None
        }
        Err(e) => return Err(e),
    };
    Ok(LatentExport {
        space,
        coords,
        explained,
        hopkins,
    })
}

/// The representation, baseline-gate logits and response-gate logits as `n × ·` matrices.
pub fn latent_spaces<T: Real>(x: &Tensor<T>, patients: &[PatientHead<T>]) -> Result<Vec<(LatentSpace, Tensor<f64>)>> {
    let rows = |f: &dyn Fn(&PatientHead<T>) -> &Vec<T>| -> Result<Tensor<f64>> {
        let data: Vec<Vec<f64>> = patients
            .iter()
            .map(|p| f(p).iter().map(|v| v.as_f64()).collect())
            .collect();
        Tensor::from_rows(&data)
    };
    Ok(vec![
        (LatentSpace::Representation, x.cast::<f64>()),
        (LatentSpace::BaselineLogits, rows(&|p| &p.gates.baseline_logits)?),
        (LatentSpace::ResponseLogits, rows(&|p| &p.gates.response_logits)?),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survival::GateDistributions;

    fn patient(bl: Vec<f64>, rl: Vec<f64>) -> PatientHead<f64> {
        let k = bl.len();
        PatientHead {
            gates: GateDistributions::from_logits(bl, rl).unwrap(),
            risk: vec![0.0; k],
        }
    }

    #[test]
    fn ties_go_to_first_group() {
        let a = assign_subgroups(&[patient(vec![0.2, 0.2], vec![0.2, 0.2])]);
        assert_eq!(a[0], Assignment { k: 0, m: 0 });
    }

    #[test]
    fn nodes_hit_grid_and_horizon() {
        let nodes = integration_nodes(&[0.0, 1.0, 2.0, 4.0], 3.0, 2);
        assert_eq!(nodes, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn ari_extremes() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let ari = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!((ari + 0.5).abs() < 1e-12);
        assert!(adjusted_rand_index(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn collinear_points_have_one_component() {
        let pts = Tensor::from_rows(&(0..20).map(|i| vec![i as f64, 2.0 * i as f64]).collect::<Vec<_>>()).unwrap();
        let p = pca_project(&pts).unwrap();
        assert!((p.explained[0] - 1.0).abs() < 1e-9);
        let m1: f64 = p.coords.iter().map(|c| c[0]).sum::<f64>() / 20.0;
        assert!(m1.abs() < 1e-9);
        assert!(p.components[0].iter().all(|&v| v > 0.0));
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let same = Tensor::from_rows(&vec![vec![1.0, 1.0]; 12]).unwrap();
        assert!(pca_project(&same).is_err());
        assert!(hopkins(&same, 0.1, 0).is_err());
        let few = Tensor::from_rows(&vec![vec![1.0]; 5]).unwrap();
        assert!(hopkins(&few, 0.1, 0).is_err());
    }

    #[test]
    fn tiers_rank_magnitudes() {
        let t = tiers(&[Some(0.3), Some(0.1), Some(0.2)], ["l", "m", "h"]).unwrap();
        assert_eq!(t, vec!["h", "l", "m"]);
        assert!(tiers(&[Some(0.2), Some(0.2)], ["l", "m", "h"]).is_none());
    }
}
