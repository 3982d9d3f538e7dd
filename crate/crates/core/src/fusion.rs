//! Modality embedding, pairwise cross-attention and fusion into the patient
//! representation.
//!
//! Every patient-modality is a single token. Each modality passes through a
//! two-layer perceptron into `D` dimensions and then through two feed-forward
//! sublayers, each `Z ← layernorm(Z + dropout(FF(Z)))`. Cross-attention runs
//! for the six ordered pairs of clinical, paraclinical and omics embeddings and
//! the outputs are averaged; demographics are appended unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{Forward, LayerNorm, Mlp};
use crate::numerics::{ParamId, ParamStore, Real, SeededRng, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub encoder_layers: usize,
    pub dropout: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            ff_hidden: 128,
            encoder_layers: 2,
            dropout: 0.1,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.ff_hidden == 0 {
            return Err(Error::Config("ff_hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Indices into the embedding triple `[clinical, paraclinical, omics]`.
pub const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)];
const PAIR_NAMES: [&str; 6] = ["cp", "co", "pc", "po", "oc", "op"];
const MODALITY_NAMES: [&str; 3] = ["clinical", "paraclinical", "omics"];

#[derive(Clone, Debug)]
pub struct FeedForwardSublayer {
    pub ff: Mlp,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct ModalityEncoder {
    pub d_in: usize,
    pub mlp: Mlp,
    pub sublayers: Vec<FeedForwardSublayer>,
}

impl ModalityEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        config: &FusionConfig,
        rng: &mut SeededRng,
    ) -> Self {
        let d = config.d_model;
        let mlp = Mlp::new(store, &format!("{name}.mlp"), d_in, d, d, rng);
        let sublayers = (0..config.encoder_layers)
            .map(|l| FeedForwardSublayer {
                ff: Mlp::new(store, &format!("{name}.ff{l}"), d, config.ff_hidden, d, rng),
                norm: LayerNorm::new(store, &format!("{name}.ln{l}"), d),
            })
            .collect();
        Self { d_in, mlp, sublayers }
    }
}

/// Embeds one modality batch (`n × d_r`) into `n × D`.
pub fn modality_embed<T: Real>(enc: &ModalityEncoder, f: &mut Forward<T>, x: Var, dropout: f64) -> Result<Var> {
    let cols = f.tape.value(x).cols();
    if cols != enc.d_in {
        return Err(Error::shape(
            "modality_embed",
            format!("expected {} features, got {cols}", enc.d_in),
        ));
    }
    let mut z = enc.mlp.forward(f, x)?;
    for layer in &enc.sublayers {
        let ff = layer.ff.forward(f, z)?;
        let ff = f.dropout(ff, dropout);
        let res = f.tape.add(z, ff)?;
        z = layer.norm.forward(f, res)?;
    }
    Ok(z)
}

#[derive(Clone, Debug)]
pub struct PairAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl PairAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut mat = |suffix: &str, rng: &mut SeededRng| {
            let data = (0..d * d).map(|_| T::lit(rng.uniform_range(-bound, bound))).collect();
            store.add(
                format!("{name}.{suffix}"),
                Tensor::new(vec![d, d], data).expect("square"),
            )
        };
        let w_q = mat("w_q", rng);
        let w_k = mat("w_k", rng);
        let w_v = mat("w_v", rng);
        Self { w_q, w_k, w_v }
    }
}

/// Output of one cross-attention pair.
pub struct PairOutput {
    /// `n × D`.
    pub z: Var,
    /// `n × heads` attention weights over the single key token.
    pub attention: Var,
}

/// Multi-head attention of `query` (`n × D`) over the single token `kv`.
pub fn cross_attention_pair<T: Real>(
    pair: &PairAttention,
    f: &mut Forward<T>,
    query: Var,
    kv: Var,
    heads: usize,
) -> Result<PairOutput> {
    let d = f.tape.value(query).cols();
    if f.tape.value(kv).cols() != d || f.tape.value(kv).rows() != f.tape.value(query).rows() {
        return Err(Error::shape(
            "cross_attention_pair",
            "query and key/value shapes differ",
        ));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let d_k = d / heads;
    let wq = f.param(pair.w_q);
    let wk = f.param(pair.w_k);
    let wv = f.param(pair.w_v);
    let q = f.tape.matmul(query, wq)?;
    let k = f.tape.matmul(kv, wk)?;
    let v = f.tape.matmul(kv, wv)?;
    let inv_sqrt = T::one() / T::from_usize_lossy(d_k).sqrt();

    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for j in 0..heads {
        let (lo, hi) = (j * d_k, (j + 1) * d_k);
        let qj = f.tape.slice_cols(q, lo, hi)?;
        let kj = f.tape.slice_cols(k, lo, hi)?;
        let vj = f.tape.slice_cols(v, lo, hi)?;
        let dot = f.tape.mul(qj, kj)?;
        let score = f.tape.row_sum(dot);
        let score = f.tape.scale(score, inv_sqrt);
        let attn = f.tape.softmax_rows(score)?;
        outs.push(f.tape.mul_col(vj, attn)?);
        weights.push(attn);
    }
    Ok(PairOutput {
        z: f.tape.concat_cols(&outs)?,
        attention: f.tape.concat_cols(&weights)?,
    })
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub config: FusionConfig,
    /// Clinical, paraclinical and omics encoders, in that order.
    pub encoders: Vec<ModalityEncoder>,
    /// One projection set per entry of [`PAIRS`].
    pub pairs: Vec<PairAttention>,
}

impl Fusion {
    /// `input_dims` are the clinical, paraclinical and omics input widths.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dims: [usize; 3],
        config: &FusionConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        if input_dims.contains(&0) {
            return Err(Error::Config("every fused modality needs at least one feature".into()));
        }
        let encoders = input_dims
            .iter()
            .zip(MODALITY_NAMES)
            .map(|(&d, m)| ModalityEncoder::new(store, &format!("{name}.{m}"), d, config, rng))
            .collect();
        let pairs = PAIR_NAMES
            .iter()
            .map(|p| PairAttention::new(store, &format!("{name}.attn_{p}"), config.d_model, rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            encoders,
            pairs,
        })
    }

    pub fn output_dim(&self, demographic_dim: usize) -> usize {
        self.config.d_model + demographic_dim
    }

    /// Embeds the three modalities, fuses them and appends demographics.
    pub fn forward<T: Real>(&self, f: &mut Forward<T>, inputs: [Var; 3], demographics: Var) -> Result<Var> {
        let mut z = Vec::with_capacity(3);
        for (enc, &x) in self.encoders.iter().zip(&inputs) {
            z.push(modality_embed(enc, f, x, self.config.dropout)?);
        }
        fuse_patient(self, f, [z[0], z[1], z[2]], demographics)
    }
}

/// Averages the six pairwise cross-attention outputs and appends `demographics`.
pub fn fuse_patient<T: Real>(fusion: &Fusion, f: &mut Forward<T>, z: [Var; 3], demographics: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (pair, &(r, n)) in fusion.pairs.iter().zip(&PAIRS) {
        let out = cross_attention_pair(pair, f, z[r], z[n], fusion.config.heads)?;
        acc = Some(match acc {
            Some(a) => f.tape.add(a, out.z)?,
            None => out.z,
        });
    }
    let fused = f.tape.scale(acc.expect("six pairs"), T::one() / T::lit(6.0));
    if f.tape.value(demographics).rows() != f.tape.value(fused).rows() {
        return Err(Error::shape("fuse_patient", "demographic rows differ from batch size"));
    }
    f.tape.concat_cols(&[fused, demographics])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, heads: usize) -> FusionConfig {
        FusionConfig {
            d_model: d,
            heads,
            ff_hidden: 6,
            encoder_layers: 2,
            dropout: 0.1,
        }
    }

    #[test]
    fn zero_weights_embed_to_zero() {
        let mut store = ParamStore::<f64>::new();
        let enc = ModalityEncoder::new(&mut store, "m", 5, &cfg(4, 2), &mut SeededRng::new(1));
        for id in store.ids().collect::<Vec<_>>() {
            if !store.name(id).contains("gamma") {
                let shape = store.get(id).shape().to_vec();
                store.set(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let mut f = Forward::eval(&store);
        let x = f.input(Tensor::row(vec![1.0, -2.0, 0.5, 3.0, 0.0]));
        let z = modality_embed(&enc, &mut f, x, 0.1).unwrap();
        assert!(f.tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_value_single_head_returns_kv() {
        let mut store = ParamStore::<f64>::new();
        let pair = PairAttention::new(&mut store, "p", 3, &mut SeededRng::new(2));
        store.set(pair.w_v, Tensor::identity(3)).unwrap();
        let mut f = Forward::eval(&store);
        let q = f.input(Tensor::row(vec![0.3, 2.0, -1.0]));
        let kv = f.input(Tensor::row(vec![5.0, -4.0, 0.25]));
        let out = cross_attention_pair(&pair, &mut f, q, kv, 1).unwrap();
        assert_eq!(f.tape.value(out.z).data(), &[5.0, -4.0, 0.25]);
        assert_eq!(f.tape.value(out.attention).data(), &[1.0]);
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(cfg(6, 4).validate().is_err());
        let mut store = ParamStore::<f64>::new();
        let pair = PairAttention::new(&mut store, "p", 6, &mut SeededRng::new(2));
        let mut f = Forward::eval(&store);
        let q = f.input(Tensor::zeros(&[1, 6]));
        assert!(cross_attention_pair(&pair, &mut f, q, q, 4).is_err());
    }

    #[test]
    fn demographics_extend_width() {
        let mut store = ParamStore::<f64>::new();
        let fusion = Fusion::new(&mut store, "f", [3, 2, 4], &cfg(16, 4), &mut SeededRng::new(3)).unwrap();
        let mut f = Forward::eval(&store);
        let xs = [
            f.input(Tensor::zeros(&[2, 3])),
            f.input(Tensor::zeros(&[2, 2])),
            f.input(Tensor::zeros(&[2, 4])),
        ];
        let demo = f.input(Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.0, 7.5]]).unwrap());
        let x = fusion.forward(&mut f, xs, demo).unwrap();
        let xv = f.tape.value(x);
        assert_eq!(xv.shape(), &[2, 19]);
        assert_eq!(&xv.row_slice(1)[16..], &[-1.0, 0.0, 7.5]);
    }
}
