//! Omics sub-block encoder: linear bottleneck followed by a top-k mixture of experts.
//!
//! For sub-block `s` the bottleneck computes
//! `h = dropout(relu(layernorm(x W + b)))` with `W: d_omics × d_pre`.
//! The gate scores every expert, keeps the `top_k` highest logits (ties go to
//! the lower index) and renormalizes with a softmax over the kept logits only,
//! so the routing weights of a sample sum to one and unselected experts get an
//! exact zero. Each expert is a residual two-layer perceptron
//! `f_e(h) = h + W₂ relu(W₁ h + b₁) + b₂`.
//!
//! The load-balancing penalty is `E · Σ_e P̄_e²`, where `P̄_e` is the batch mean
//! of the full (unmasked) gate probability of expert `e`. Since `Σ_e P̄_e = 1`
//! the penalty is at least 1, with equality exactly at uniform usage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{Forward, LayerNorm, Linear, Mlp};
use crate::numerics::{ParamId, ParamStore, Real, SeededRng, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OmicsConfig {
    pub d_pre: usize,
    pub experts: usize,
    pub top_k: usize,
    pub dropout: f64,
}

impl Default for OmicsConfig {
    fn default() -> Self {
        Self {
            d_pre: 256,
            experts: 4,
            top_k: 2,
            dropout: 0.1,
        }
    }
}

impl OmicsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_pre == 0 {
            return Err(Error::Config("d_pre must be positive".into()));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::Config(format!(
                "top_k = {} must be in 1..={} (number of experts)",
                self.top_k, self.experts
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Per-sample expert selection for one sub-block.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeRouting {
    /// Selected expert indices per sample, highest weight first.
    pub selected: Vec<Vec<usize>>,
    /// `n × E` routing weights; zero outside the selection.
    pub weights: Tensor<f64>,
}

pub struct MoeOutput {
    pub z: Var,
    pub routing: MoeRouting,
    pub aux_loss: Var,
}

#[derive(Clone, Debug)]
pub struct OmicsBlockEncoder {
    pub d_in: usize,
    pub bottleneck: Linear,
    pub norm: LayerNorm,
    pub experts: Vec<Mlp>,
    pub gate: Linear,
    pub default_embedding: ParamId,
    top_k: usize,
    dropout: f64,
}

impl OmicsBlockEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        config: &OmicsConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        if config.d_pre >= d_in {
            return Err(Error::Config(format!(
                "{name}: bottleneck width {} must be smaller than the {d_in} input features",
                config.d_pre
            )));
        }
        let d = config.d_pre;
        let bottleneck = Linear::new(store, &format!("{name}.bottleneck"), d_in, d, rng);
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d);
        let experts = (0..config.experts)
            .map(|e| Mlp::new(store, &format!("{name}.expert{e}"), d, d, d, rng))
            .collect();
        let gate = Linear::new(store, &format!("{name}.gate"), d, config.experts, rng);
        let default_embedding = store.add(format!("{name}.default"), Tensor::zeros(&[1, d]));
        Ok(Self {
            d_in,
            bottleneck,
            norm,
            experts,
            gate,
            default_embedding,
            top_k: config.top_k,
            dropout: config.dropout,
        })
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn d_pre(&self) -> usize {
        self.bottleneck.fan_out
    }

    /// `h = dropout(relu(layernorm(x W + b)))`.
    pub fn bottleneck_forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let cols = f.tape.value(x).cols();
        if cols != self.d_in {
            return Err(Error::shape(
                "bottleneck_forward",
                format!("expected {} omics features, got {cols}", self.d_in),
            ));
        }
        let lin = self.bottleneck.forward(f, x)?;
        let normed = self.norm.forward(f, lin)?;
        let act = f.tape.relu(normed);
        Ok(f.dropout(act, self.dropout))
    }

    /// Routes each row of `h` through its top-k experts. `active` (one flag
    /// per row) limits which rows count toward the load-balancing penalty.
    pub fn moe_forward<T: Real>(&self, f: &mut Forward<T>, h: Var, active: Option<&[bool]>) -> Result<MoeOutput> {
        let logits = self.gate.forward(f, h)?;
        let lv = f.tape.value(logits).clone();
        let (n, e) = (lv.rows(), lv.cols());
        if !lv.is_finite() {
            return Err(Error::NonFinite("gate logits".into()));
        }

        let mut selected = Vec::with_capacity(n);
        let mut mask = Tensor::<T>::zeros(&[n, e]);
        let mut shift = Vec::with_capacity(n);
        for r in 0..n {
            let top = top_k_indices(lv.row_slice(r), self.top_k);
            for &j in &top {
                mask.set(r, j, T::one());
            }
            shift.push(-lv.at(r, top[0]));
            selected.push(top);
        }
        let mask_v = f.tape.constant(mask);
        let shift_v = f.tape.constant(Tensor::column(shift));
        let centered = f.tape.add_col(logits, shift_v)?;
        let ex = f.tape.exp(centered);
        let kept = f.tape.mul(ex, mask_v)?;
        let denom = f.tape.row_sum(kept);
        let inv = f.tape.recip(denom);
        let alpha = f.tape.mul_col(kept, inv)?;

        let mut z: Option<Var> = None;
        for (j, expert) in self.experts.iter().enumerate() {
            let body = expert.forward(f, h)?;
            let out = f.tape.add(h, body)?;
            let w = f.tape.slice_cols(alpha, j, j + 1)?;
            let contrib = f.tape.mul_col(out, w)?;
            z = Some(match z {
                Some(acc) => f.tape.add(acc, contrib)?,
                None => contrib,
            });
        }
        let z = z.expect("at least one expert");

        let probs = f.tape.softmax_rows(logits)?;
        let weights = match active {
            Some(a) => a.to_vec(),
            None => vec![true; n],
        };
        let n_active = weights.iter().filter(|&&a| a).count();
        let aux_loss = if n_active == 0 {
            f.tape.constant(Tensor::scalar(T::zero()))
        } else {
            let w = T::one() / T::from_usize_lossy(n_active);
            let row = Tensor::row(weights.iter().map(|&a| if a { w } else { T::zero() }).collect());
            let row_v = f.tape.constant(row);
            let mean_p = f.tape.matmul(row_v, probs)?;
            let sq = f.tape.mul(mean_p, mean_p)?;
            let s = f.tape.sum(sq);
            f.tape.scale(s, T::from_usize_lossy(e))
        };

        let alpha_val = f.tape.value(alpha);
        let routing = MoeRouting {
            selected,
            weights: Tensor::new(vec![n, e], alpha_val.data().iter().map(|v| v.as_f64()).collect())?,
        };
        Ok(MoeOutput { z, routing, aux_loss })
    }
}

/// Indices of the `k` largest values, descending; ties keep the lower index first.
pub fn top_k_indices<T: Real>(values: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Encoders for every omics sub-block.
#[derive(Clone, Debug)]
pub struct OmicsEncoder {
    pub blocks: Vec<OmicsBlockEncoder>,
    pub config: OmicsConfig,
}

/// Result of [`OmicsEncoder::encode`] for a batch.
pub struct OmicsEncoding {
    /// `n × (S · d_pre)`: the per-block embeddings side by side.
    pub z: Var,
    /// Sum of per-block load-balancing penalties.
    pub aux_loss: Var,
    pub routing: Vec<MoeRouting>,
}

impl OmicsEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        block_dims: &[usize],
        config: &OmicsConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if block_dims.is_empty() {
            return Err(Error::Config("at least one omics sub-block is required".into()));
        }
        let blocks = block_dims
            .iter()
            .enumerate()
            .map(|(s, &d)| OmicsBlockEncoder::new(store, &format!("{name}.block{}", s + 1), d, config, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            config: config.clone(),
        })
    }

    pub fn output_dim(&self) -> usize {
        self.blocks.len() * self.config.d_pre
    }

    /// Encodes a batch. `inputs[s]` is the `n × d_s` matrix of sub-block `s` and
    /// `present[s]` flags the rows that actually have that block; absent rows
    /// take the block's learned default embedding and add nothing to the penalty.
    pub fn encode<T: Real>(
        &self,
        f: &mut Forward<T>,
        inputs: &[Tensor<T>],
        present: &[Vec<bool>],
    ) -> Result<OmicsEncoding> {
        if inputs.len() != self.blocks.len() || present.len() != self.blocks.len() {
            return Err(Error::shape(
                "encode_omics",
                format!("{} blocks supplied for {} encoders", inputs.len(), self.blocks.len()),
            ));
        }
        let mut parts = Vec::with_capacity(self.blocks.len());
        let mut aux: Option<Var> = None;
        let mut routing = Vec::with_capacity(self.blocks.len());
        for ((enc, x), mask) in self.blocks.iter().zip(inputs).zip(present) {
            let n = x.rows();
            if mask.len() != n {
                return Err(Error::shape("encode_omics", "presence mask length differs from rows"));
            }
            let xv = f.input(x.clone());
            let h = enc.bottleneck_forward(f, xv)?;
            let out = enc.moe_forward(f, h, Some(mask))?;
            let z = if mask.iter().all(|&p| p) {
                out.z
            } else {
                let keep = Tensor::column(mask.iter().map(|&p| if p { T::one() } else { T::zero() }).collect());
                let fill = Tensor::column(mask.iter().map(|&p| if p { T::zero() } else { T::one() }).collect());
                let keep_v = f.tape.constant(keep);
                let fill_v = f.tape.constant(fill);
                let kept = f.tape.mul_col(out.z, keep_v)?;
                let zeros = f.tape.constant(Tensor::zeros(&[n, enc.d_pre()]));
                let default = f.param(enc.default_embedding);
                let tiled = f.tape.add_row(zeros, default)?;
                let filled = f.tape.mul_col(tiled, fill_v)?;
                f.tape.add(kept, filled)?
            };
            parts.push(z);
            aux = Some(match aux {
                Some(a) => f.tape.add(a, out.aux_loss)?,
                None => out.aux_loss,
            });
            routing.push(out.routing);
        }
        let z = f.tape.concat_cols(&parts)?;
        Ok(OmicsEncoding {
            z,
            aux_loss: aux.expect("at least one block"),
            routing,
        })
    }
}
