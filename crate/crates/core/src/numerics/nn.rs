//! Layer building blocks recorded on a [`Tape`].

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Real, SeededRng, Tape, Tensor, Var};

/// One forward pass: a fresh tape, read access to parameters, and a dropout
/// stream when training. `dropout_rng: None` means evaluation mode.
pub struct Forward<'a, T> {
    pub tape: Tape<T>,
    pub store: &'a ParamStore<T>,
    pub dropout_rng: Option<SeededRng>,
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            dropout_rng: None,
        }
    }

    pub fn train(store: &'a ParamStore<T>, rng: SeededRng) -> Self {
        Self {
            tape: Tape::new(),
            store,
            dropout_rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.tape.constant(x)
    }

    /// Inverted dropout; identity in evaluation mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let scale = T::lit(1.0 / keep);
        let shape = self.tape.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.bernoulli(keep) { scale } else { T::zero() })
            .collect();
        let mask = self
            .tape
            .constant(Tensor::new(shape, mask).expect("mask matches input"));
        self.tape.mul(x, mask).expect("mask matches input")
    }
}

fn uniform_init<T: Real>(rng: &mut SeededRng, rows: usize, cols: usize, bound: f64) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.uniform_range(-bound, bound)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("positive extents")
}

/// `y = x W + b` with `W` stored as `fan_in × fan_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, fan_in, fan_out, bound));
        let bias = store.add(format!("{name}.bias"), uniform_init(rng, 1, fan_out, bound));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let cols = f.tape.value(x).cols();
        if cols != self.fan_in {
            return Err(Error::shape(
                "linear",
                format!("expected {} input features, got {cols}", self.fan_in),
            ));
        }
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        let xw = f.tape.matmul(x, w)?;
        f.tape.add_row(xw, b)
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[1, width], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[1, width]));
        Self {
            gamma,
            beta,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let normed = f.tape.normalize_rows(x, T::lit(self.eps))?;
        let g = f.param(self.gamma);
        let b = f.param(self.beta);
        let scaled = f.tape.mul_row(normed, g)?;
        f.tape.add_row(scaled, b)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), input, hidden, rng),
            second: Linear::new(store, &format!("{name}.1"), hidden, output, rng),
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let h = self.first.forward(f, x)?;
        let h = f.tape.relu(h);
        self.second.forward(f, h)
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.first.weight, self.first.bias, self.second.weight, self.second.bias]
    }
}

/// Evaluates an [`Mlp`] on a single input without a tape.
pub fn mlp_apply<T: Real>(mlp: &Mlp, store: &ParamStore<T>, x: &[T]) -> Vec<T> {
    let h: Vec<T> = linear_apply(&mlp.first, store, x)
        .into_iter()
        .map(|v| v.max(T::zero()))
        .collect();
    linear_apply(&mlp.second, store, &h)
}

pub fn linear_apply<T: Real>(lin: &Linear, store: &ParamStore<T>, x: &[T]) -> Vec<T> {
    let w = store.get(lin.weight);
    let b = store.get(lin.bias);
    debug_assert_eq!(x.len(), lin.fan_in);
    let mut out = b.data().to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(w.row_slice(i)) {
            *o += xi * wij;
        }
    }
    out
}
