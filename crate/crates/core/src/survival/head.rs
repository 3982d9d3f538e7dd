//! Mixture survival head.
//!
//! Two gates map the patient representation to a baseline-group distribution
//! over `K` groups and a response-group distribution over `M` groups; their
//! outer product weights `K·M` kernels
//! `S_km(t)^{exp(h_k + a·ω_m)}`, where `S_km` comes from nonnegative
//! piecewise-constant bin hazards and `h = f(gate logits)` is a small risk
//! network. Survival is the weighted sum of kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{mlp_apply, Forward, Mlp};
use crate::numerics::scalar::{softplus, softplus_inv};
use crate::numerics::{softmax, ParamId, ParamStore, Real, SeededRng, Tensor, Var};
use crate::survival::TimeGrid;

/// Floor applied inside every log of the likelihood.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskInput {
    /// The risk network reads the baseline-gate logits.
    GateLogits,
    /// The risk network reads the patient representation directly.
    Representation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub k_groups: usize,
    pub m_groups: usize,
    pub bins: usize,
    pub gate_hidden: usize,
    pub risk_hidden: usize,
    pub risk_input: RiskInput,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            k_groups: 2,
            m_groups: 2,
            bins: 20,
            gate_hidden: 64,
            risk_hidden: 32,
            risk_input: RiskInput::GateLogits,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_groups == 0 || self.m_groups == 0 {
            return Err(Error::Config("k_groups and m_groups must be at least 1".into()));
        }
        if self.bins < 2 {
            return Err(Error::Config(format!("bins must be at least 2, got {}", self.bins)));
        }
        if self.gate_hidden == 0 || self.risk_hidden == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn pairs(&self) -> usize {
        self.k_groups * self.m_groups
    }
}

#[derive(Clone, Debug)]
pub struct MixtureHead {
    pub config: HeadConfig,
    pub grid: TimeGrid,
    pub input_dim: usize,
    pub gate_k: Mlp,
    pub gate_m: Mlp,
    pub risk: Mlp,
    /// `KM × B` raw bin hazards, row `k·M + m`.
    pub rho: ParamId,
    /// `1 × M` treatment effects.
    pub omega: ParamId,
}

/// Tape nodes of a head evaluation on a batch.
pub struct HeadForward {
    pub baseline_logits: Var,
    pub response_logits: Var,
    /// `n × KM` joint group weights.
    pub joint: Var,
    /// `n × KM` kernel exponents `exp(h_k + a·ω_m)`.
    pub exponent: Var,
    /// `B × KM` bin hazards.
    pub hazards_t: Var,
}

impl MixtureHead {
    /// `init_rate` seeds every bin hazard; `rng` adds a small jitter so pairs
    /// start distinguishable.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        config: &HeadConfig,
        grid: TimeGrid,
        init_rate: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        if !(init_rate > 0.0) || !init_rate.is_finite() {
            return Err(Error::InvalidInput(format!(
                "initial hazard rate {init_rate} must be positive"
            )));
        }
        let (k, m, b) = (config.k_groups, config.m_groups, grid.bins());
        let gate_k = Mlp::new(store, &format!("{name}.gate_k"), input_dim, config.gate_hidden, k, rng);
        let gate_m = Mlp::new(store, &format!("{name}.gate_m"), input_dim, config.gate_hidden, m, rng);
        let risk_in = match config.risk_input {
            RiskInput::GateLogits => k,
            RiskInput::Representation => input_dim,
        };
        let risk = Mlp::new(store, &format!("{name}.risk"), risk_in, config.risk_hidden, k, rng);
        let base = softplus_inv(init_rate);
        let rho_data = (0..k * m * b)
            .map(|_| T::lit(base + rng.uniform_range(-0.05, 0.05)))
            .collect();
        let rho = store.add(format!("{name}.rho"), Tensor::new(vec![k * m, b], rho_data)?);
        let omega_data = (0..m)
            .map(|j| {
                if m == 1 {
                    T::zero()
                } else {
                    T::lit(-0.5 + j as f64 / (m - 1) as f64)
                }
            })
            .collect();
        let omega = store.add(format!("{name}.omega"), Tensor::row(omega_data));
        Ok(Self {
            config: config.clone(),
            grid,
            input_dim,
            gate_k,
            gate_m,
            risk,
            rho,
            omega,
        })
    }

    pub fn k_groups(&self) -> usize {
        self.config.k_groups
    }

    pub fn m_groups(&self) -> usize {
        self.config.m_groups
    }

    pub fn param_ids(&self, include_risk: bool) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend(self.gate_k.params());
        ids.extend(self.gate_m.params());
        if include_risk {
            ids.extend(self.risk.params());
        }
        ids.push(self.rho);
        ids.push(self.omega);
        ids
    }

    /// Expansion matrices `K × KM` and `M × KM` that copy group `k` (or `m`)
    /// into every joint column `k·M + m` it belongs to.
    fn expanders<T: Real>(&self) -> (Tensor<T>, Tensor<T>) {
        let (k, m) = (self.k_groups(), self.m_groups());
        let mut ek = Tensor::zeros(&[k, k * m]);
        let mut em = Tensor::zeros(&[m, k * m]);
        for i in 0..k {
            for j in 0..m {
                ek.set(i, i * m + j, T::one());
                em.set(j, i * m + j, T::one());
            }
        }
        (ek, em)
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var, treatments: &[u8]) -> Result<HeadForward> {
        let (rows, cols) = {
            let xv = f.tape.value(x);
            (xv.rows(), xv.cols())
        };
        if cols != self.input_dim {
            return Err(Error::shape(
                "mixture_head",
                format!("expected representation width {}, got {cols}", self.input_dim),
            ));
        }
        if treatments.len() != rows {
            return Err(Error::shape("mixture_head", "one treatment per row required"));
        }
        let (ek, em) = self.expanders::<T>();
        let ek = f.tape.constant(ek);
        let em = f.tape.constant(em);

        let v = self.gate_k.forward(f, x)?;
        let u = self.gate_m.forward(f, x)?;
        let pk = f.tape.softmax_rows(v)?;
        let pm = f.tape.softmax_rows(u)?;
        let pk_wide = f.tape.matmul(pk, ek)?;
        let pm_wide = f.tape.matmul(pm, em)?;
        let joint = f.tape.mul(pk_wide, pm_wide)?;

        let risk_in = match self.config.risk_input {
            RiskInput::GateLogits => v,
            RiskInput::Representation => x,
        };
        let h = self.risk.forward(f, risk_in)?;
        let h_wide = f.tape.matmul(h, ek)?;
        let omega = f.param(self.omega);
        let omega_wide = f.tape.matmul(omega, em)?;
        let zeros = f.tape.constant(Tensor::zeros(&[rows, self.config.pairs()]));
        let omega_rows = f.tape.add_row(zeros, omega_wide)?;
        let a = f.tape.constant(Tensor::column(
            treatments.iter().map(|&a| T::from(a).unwrap()).collect(),
        ));
        let shift = f.tape.mul_col(omega_rows, a)?;
        let log_exponent = f.tape.add(h_wide, shift)?;
        let exponent = f.tape.exp(log_exponent);

        let rho = f.param(self.rho);
        let hazards = f.tape.softplus(rho);
        let hazards_t = f.tape.transpose(hazards);
        Ok(HeadForward {
            baseline_logits: v,
            response_logits: u,
            joint,
            exponent,
            hazards_t,
        })
    }

    /// `n × KM` kernel values at per-row exposure vectors (`n × B`).
    pub fn kernels<T: Real>(&self, f: &mut Forward<T>, hf: &HeadForward, exposure: Tensor<T>) -> Result<Var> {
        let w = f.tape.constant(exposure);
        let cum = f.tape.matmul(w, hf.hazards_t)?;
        let scaled = f.tape.mul(hf.exponent, cum)?;
        let neg = f.tape.neg(scaled);
        Ok(f.tape.exp(neg))
    }

    /// `n × 1` mixture survival at one time per row.
    pub fn survival<T: Real>(&self, f: &mut Forward<T>, hf: &HeadForward, times: &[f64]) -> Result<Var> {
        let exposure = self.exposure_matrix(times);
        let k = self.kernels(f, hf, exposure)?;
        let weighted = f.tape.mul(hf.joint, k)?;
        Ok(f.tape.row_sum(weighted))
    }

    fn exposure_matrix<T: Real>(&self, times: &[f64]) -> Tensor<T> {
        let b = self.grid.bins();
        let data = times
            .iter()
            .flat_map(|&t| self.grid.exposure(t).into_iter().map(T::lit))
            .collect();
        Tensor::new(vec![times.len(), b], data).expect("one exposure row per time")
    }

    /// Mean censored log-likelihood loss of a batch, without the encoder's
    /// load-balancing term. Events use the mixture density over the bin
    /// holding `Y`; censored rows use the exact survival at `Y`.
    pub fn negative_log_likelihood<T: Real>(
        &self,
        f: &mut Forward<T>,
        x: Var,
        times: &[f64],
        events: &[bool],
        treatments: &[u8],
    ) -> Result<Var> {
        let n = times.len();
        if n == 0 {
            return Err(Error::InvalidInput("likelihood of an empty batch".into()));
        }
        if events.len() != n || treatments.len() != n {
            return Err(Error::shape(
                "negative_log_likelihood",
                "times, events and treatments differ in length",
            ));
        }
        let end = self.grid.end();
        let beyond = times.iter().filter(|&&t| t > end).count();
        if beyond > 0 {
            log::debug!("{beyond} observation times exceed the grid end {end}; clamped to the last bin");
        }
        let hf = self.forward(f, x, treatments)?;
        let widths = self.grid.widths();

        let mut lo = Vec::with_capacity(n);
        let mut hi = Vec::with_capacity(n);
        let mut inv_width = Vec::with_capacity(n);
        for &t in times {
            let b = self.grid.bin_of(t);
            lo.push(self.grid.start_of(b));
            hi.push(self.grid.edges()[b]);
            inv_width.push(T::lit(1.0 / widths[b]));
        }
        let k_lo = self.kernels(f, &hf, self.exposure_matrix(&lo))?;
        let k_hi = self.kernels(f, &hf, self.exposure_matrix(&hi))?;
        let drop = f.tape.sub(k_lo, k_hi)?;
        let mass = f.tape.mul(hf.joint, drop)?;
        let mass = f.tape.row_sum(mass);
        let inv_w = f.tape.constant(Tensor::column(inv_width));
        let density = f.tape.mul(mass, inv_w)?;
        let density = f.tape.clamp_min(density, T::lit(LOG_FLOOR));
        let log_density = f.tape.log(density);

        let surv = self.survival(f, &hf, times)?;
        let surv = f.tape.clamp_min(surv, T::lit(LOG_FLOOR));
        let log_surv = f.tape.log(surv);

        let ev = f.tape.constant(Tensor::column(
            events.iter().map(|&e| if e { T::one() } else { T::zero() }).collect(),
        ));
        let cens = f.tape.constant(Tensor::column(
            events.iter().map(|&e| if e { T::zero() } else { T::one() }).collect(),
        ));
        let ev_terms = f.tape.mul(log_density, ev)?;
        let cens_terms = f.tape.mul(log_surv, cens)?;
        let total = f.tape.add(ev_terms, cens_terms)?;
        let total = f.tape.sum(total);
        Ok(f.tape.scale(total, -T::one() / T::from_usize_lossy(n)))
    }

    /// Gate outputs and risk scores of one patient, without a tape.
    pub fn patient<T: Real>(&self, store: &ParamStore<T>, x: &[T]) -> Result<PatientHead<T>> {
        if x.len() != self.input_dim {
            return Err(Error::shape(
                "mixture_head",
                format!("expected representation width {}, got {}", self.input_dim, x.len()),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("patient representation".into()));
        }
        let gates = gate_distributions(&self.gate_k, &self.gate_m, store, x)?;
        let risk = match self.config.risk_input {
            RiskInput::GateLogits => mlp_apply(&self.risk, store, &gates.baseline_logits),
            RiskInput::Representation => mlp_apply(&self.risk, store, x),
        };
        Ok(PatientHead { gates, risk })
    }

    /// Bin hazards and treatment effects read out of the parameter store.
    pub fn table<T: Real>(&self, store: &ParamStore<T>) -> HazardTable<T> {
        let rho = store.get(self.rho);
        HazardTable {
            k_groups: self.k_groups(),
            m_groups: self.m_groups(),
            grid: self.grid.clone(),
            hazards: rho.data().iter().map(|&r| softplus(r)).collect(),
            omega: store.get(self.omega).data().to_vec(),
        }
    }
}

/// Marginal and joint group distributions of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDistributions<T> {
    pub baseline_logits: Vec<T>,
    pub response_logits: Vec<T>,
    pub baseline: Vec<T>,
    pub response: Vec<T>,
    /// Row-major `K × M`.
    pub joint: Vec<T>,
}

impl<T: Real> GateDistributions<T> {
    pub fn from_logits(baseline_logits: Vec<T>, response_logits: Vec<T>) -> Result<Self> {
        let baseline = softmax(&baseline_logits)?;
        let response = softmax(&response_logits)?;
        let joint = baseline
            .iter()
            .flat_map(|&p| response.iter().map(move |&q| p * q))
            .collect();
        Ok(Self {
            baseline_logits,
            response_logits,
            baseline,
            response,
            joint,
        })
    }

    pub fn joint_at(&self, k: usize, m: usize) -> T {
        self.joint[k * self.response.len() + m]
    }
}

pub fn gate_distributions<T: Real>(
    gate_k: &Mlp,
    gate_m: &Mlp,
    store: &ParamStore<T>,
    x: &[T],
) -> Result<GateDistributions<T>> {
    GateDistributions::from_logits(mlp_apply(gate_k, store, x), mlp_apply(gate_m, store, x))
}

/// Per-patient head state: gates plus the `K` log-relative risks.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientHead<T> {
    pub gates: GateDistributions<T>,
    pub risk: Vec<T>,
}

/// `S^{exp(h + a·ω)}`.
pub fn survival_kernel<T: Real>(baseline: T, risk: T, treatment: u8, omega: T) -> T {
    let a = if treatment == 0 { T::zero() } else { T::one() };
    baseline.powf((risk + a * omega).exp())
}

/// Piecewise-exponential survival `exp(−Σ λ_b Δ_b)` at every grid point, starting with 1 at 0.
pub fn piecewise_survival<T: Real>(hazards: &[T], widths: &[f64]) -> Vec<T> {
    let mut out = Vec::with_capacity(hazards.len() + 1);
    out.push(T::one());
    let mut cum = T::zero();
    for (&l, &w) in hazards.iter().zip(widths) {
        cum += l * T::lit(w);
        out.push((-cum).exp());
    }
    out
}

/// Evaluated bin hazards and treatment effects of a fitted head.
#[derive(Clone, Debug, PartialEq)]
pub struct HazardTable<T> {
    pub k_groups: usize,
    pub m_groups: usize,
    pub grid: TimeGrid,
    /// Row-major `KM × B`.
    pub hazards: Vec<T>,
    pub omega: Vec<T>,
}

/// A predicted survival curve on the grid points `[0, t_1, …, t_B]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalCurve<T> {
    pub times: Vec<f64>,
    pub values: Vec<T>,
    pub treatment: u8,
}

impl<T: Real> SurvivalCurve<T> {
    /// Step-function lookup: value at the last grid point not after `t`.
    pub fn at(&self, t: f64) -> T {
        let idx = self.times.partition_point(|&g| g <= t);
        self.values[idx.saturating_sub(1)]
    }
}

impl<T: Real> HazardTable<T> {
    fn pair_hazards(&self, k: usize, m: usize) -> &[T] {
        let b = self.grid.bins();
        let row = k * self.m_groups + m;
        &self.hazards[row * b..(row + 1) * b]
    }

    pub fn cumulative_hazard(&self, k: usize, m: usize, t: f64) -> T {
        self.pair_hazards(k, m)
            .iter()
            .zip(self.grid.exposure(t))
            .fold(T::zero(), |acc, (&l, w)| acc + l * T::lit(w))
    }

    /// Baseline survival of pair `(k, m)` on the grid points, starting at 1.
    pub fn baseline_survival(&self, k: usize, m: usize) -> Vec<T> {
        piecewise_survival(self.pair_hazards(k, m), &self.grid.widths())
    }

    /// Kernel of pair `(k, m)` at an arbitrary time.
    pub fn kernel_at(&self, patient: &PatientHead<T>, k: usize, m: usize, treatment: u8, t: f64) -> T {
        let a = if treatment == 0 { T::zero() } else { T::one() };
        let e = (patient.risk[k] + a * self.omega[m]).exp();
        (-(e * self.cumulative_hazard(k, m, t))).exp()
    }

    /// Mixture survival at an arbitrary time, exact within bins.
    pub fn survival_at(&self, patient: &PatientHead<T>, treatment: u8, t: f64) -> T {
        if t <= 0.0 {
            return T::one();
        }
        let mut s = T::zero();
        for k in 0..self.k_groups {
            for m in 0..self.m_groups {
                s += patient.gates.joint_at(k, m) * self.kernel_at(patient, k, m, treatment, t);
            }
        }
        // Gate weights sum to one only up to rounding.
        s.min(T::one())
    }

    pub fn predict(&self, patient: &PatientHead<T>, treatment: u8) -> SurvivalCurve<T> {
        let times = self.grid.points();
        let mut values = vec![T::zero(); times.len()];
        for k in 0..self.k_groups {
            for m in 0..self.m_groups {
                let w = patient.gates.joint_at(k, m);
                let base = self.baseline_survival(k, m);
                for (v, &s) in values.iter_mut().zip(&base) {
                    *v += w * survival_kernel(s, patient.risk[k], treatment, self.omega[m]);
                }
            }
        }
        for v in &mut values {
            *v = v.min(T::one());
        }
        values[0] = T::one();
        SurvivalCurve {
            times,
            values,
            treatment,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(k: usize, m: usize) -> (ParamStore<f64>, MixtureHead) {
        let mut store = ParamStore::new();
        let cfg = HeadConfig {
            k_groups: k,
            m_groups: m,
            bins: 3,
            gate_hidden: 4,
            risk_hidden: 3,
            risk_input: RiskInput::GateLogits,
        };
        let grid = TimeGrid::new(vec![1.0, 2.0, 3.0]).unwrap();
        let h = MixtureHead::new(&mut store, "head", 3, &cfg, grid, 0.2, &mut SeededRng::new(4)).unwrap();
        (store, h)
    }

    fn zero_all(store: &mut ParamStore<f64>, ids: &[ParamId]) {
        for &id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
    }

    #[test]
    fn single_group_joint_is_one() {
        let g = GateDistributions::from_logits(vec![0.3], vec![-2.0]).unwrap();
        assert_eq!(g.joint, vec![1.0]);
    }

    #[test]
    fn joint_is_outer_product() {
        let g = GateDistributions::from_logits(vec![0.7f64.ln(), 0.3f64.ln()], vec![0.4f64.ln(), 0.6f64.ln()]).unwrap();
        for (a, b) in g.joint.iter().zip([0.28, 0.42, 0.12, 0.18]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gates_are_uniform_and_zero_risk_is_neutral() {
        let (mut store, h) = head(3, 2);
        let mut ids = h.gate_k.params().to_vec();
        ids.extend(h.gate_m.params());
        ids.extend(h.risk.params());
        zero_all(&mut store, &ids);
        let p = h.patient(&store, &[1.0, -2.0, 0.5]).unwrap();
        assert!(p.gates.baseline.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(p.gates.response.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert_eq!(p.risk, vec![0.0; 3]);
    }

    #[test]
    fn piecewise_constant_half_rate() {
        let s = piecewise_survival(&[0.5, 0.5], &[1.0, 1.0]);
        assert!((s[2] - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(piecewise_survival(&[0.0, 0.0], &[1.0, 1.0]), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(survival_kernel(1.0, 3.7, 1, 9.0), 1.0);
        assert!((survival_kernel(0.5, 0.0, 1, 2f64.ln()) - 0.25).abs() < 1e-15);
        assert_eq!(survival_kernel(0.5, 0.4, 0, 1.0), survival_kernel(0.5, 0.4, 0, -3.0));
    }

    #[test]
    fn tape_survival_matches_table() {
        let (store, h) = head(2, 3);
        let x = vec![vec![0.2, -1.0, 0.7], vec![1.5, 0.0, -0.3]];
        let times = [0.5, 2.5];
        let treat = [1u8, 0];
        let mut f = Forward::eval(&store);
        let xv = f.input(Tensor::from_rows(&x).unwrap());
        let hf = h.forward(&mut f, xv, &treat).unwrap();
        let s = h.survival(&mut f, &hf, &times).unwrap();
        let table = h.table(&store);
        for i in 0..2 {
            let p = h.patient(&store, &x[i]).unwrap();
            let direct = table.survival_at(&p, treat[i], times[i]);
            assert!((f.tape.value(s).data()[i] - direct).abs() < 1e-12);
        }
    }
}
