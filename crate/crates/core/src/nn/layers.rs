use catebounds_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use super::params::ParamStore;
use crate::Result;

/// Affine layer `x W + b` with `W: [fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    /// Weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let w = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out))
            .expect("length matches shape");
        let b = Tensor::new(vec![1, fan_out], draw(fan_out)).expect("length matches shape");
        let w = store.add(format!("{name}.w"), w);
        let b = store.add(format!("{name}.b"), b);
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = tape.matmul(x, vars[self.w])?;
        Ok(tape.add_row(h, vars[self.b])?)
    }

    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.matmul(store.get(self.w))?;
        add_bias(&mut h, store.get(self.b).data());
        Ok(h)
    }
}

pub(crate) fn add_bias(h: &mut Tensor, bias: &[f64]) {
    let m = bias.len();
    for row in h.data_mut().chunks_mut(m) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn relu_in_place(h: &mut Tensor) {
    for v in h.data_mut() {
        *v = v.max(0.0);
    }
}

/// Stack of dense layers, each followed by a ReLU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        width: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let fan_in = if i == 0 { input } else { width };
                Dense::new(store, &format!("{name}.{i}"), fan_in, width, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            let pre = layer.forward(tape, vars, h)?;
            h = tape.relu(pre)?;
        }
        Ok(h)
    }

    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.eval(store, &h)?;
            relu_in_place(&mut h);
        }
        Ok(h)
    }
}
