use catebounds_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{add_bias, Dense, Mlp};
use super::params::ParamStore;
use crate::{Error, Result};

pub const DEFAULT_WIDTH: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputTransform {
    Identity,
    Sigmoid,
}

impl OutputTransform {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Self::Identity => v,
            Self::Sigmoid => sigmoid(v),
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Layout of a network taking `(x, z)`: separate encoders, concatenation,
/// shared layers and linear heads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct XzSpec {
    pub z_dim: usize,
    pub width: usize,
    pub x_depth: usize,
    pub z_depth: usize,
    pub shared_depth: usize,
    pub heads: usize,
    pub output: OutputTransform,
}

impl XzSpec {
    pub fn new(z_dim: usize, heads: usize, output: OutputTransform) -> Self {
        Self {
            z_dim,
            width: DEFAULT_WIDTH,
            x_depth: 2,
            z_depth: 3,
            shared_depth: 2,
            heads,
            output,
        }
    }
}

#[derive(Clone, Debug)]
pub struct XzNet {
    pub spec: XzSpec,
    pub x_enc: Mlp,
    pub z_enc: Mlp,
    pub shared: Mlp,
    pub head: Dense,
    pub params: ParamStore,
}

impl XzNet {
    pub fn new(spec: XzSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.x_depth == 0 || spec.z_depth == 0 || spec.shared_depth == 0 {
            return Err(Error::InvalidInput(
                "encoders and shared trunk need at least one layer".into(),
            ));
        }
        let mut params = ParamStore::new();
        let w = spec.width;
        let x_enc = Mlp::new(&mut params, "x_enc", 1, w, spec.x_depth, rng);
        let z_enc = Mlp::new(&mut params, "z_enc", spec.z_dim, w, spec.z_depth, rng);
        let shared = Mlp::new(&mut params, "shared", 2 * w, w, spec.shared_depth, rng);
        let head = Dense::new(&mut params, "head", w, spec.heads, rng);
        Ok(Self {
            spec,
            x_enc,
            z_enc,
            shared,
            head,
            params,
        })
    }

    /// Pre-transform outputs `[n, heads]` on the tape.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, z: Var) -> Result<Var> {
        let ex = self.x_enc.forward(tape, vars, x)?;
        let ez = self.z_enc.forward(tape, vars, z)?;
        let h = tape.concat_cols(&[ex, ez])?;
        let h = self.shared.forward(tape, vars, h)?;
        self.head.forward(tape, vars, h)
    }

    /// Transformed outputs `[n, heads]` for paired rows of `x` and `z`.
    pub fn predict(&self, x: &[f64], z: &Tensor) -> Result<Tensor> {
        let ex = self.x_enc.eval(&self.params, &Tensor::column(x.to_vec()))?;
        let ez = self.z_enc.eval(&self.params, z)?;
        let n = x.len();
        let w = self.spec.width;
        let mut cat = Vec::with_capacity(n * 2 * w);
        for i in 0..n {
            cat.extend_from_slice(ex.row_slice(i));
            cat.extend_from_slice(ez.row_slice(i));
        }
        let h = self
            .shared
            .eval(&self.params, &Tensor::matrix(n, 2 * w, cat)?)?;
        let out = self.head.eval(&self.params, &h)?;
        Ok(out.map(|v| self.spec.output.apply(v)))
    }

    /// Transformed outputs on every pair `(x_i, z_j)`: one `[n_x, n_z]`
    /// matrix per head.
    pub fn cross(&self, x: &[f64], z: &Tensor) -> Result<Vec<Tensor>> {
        let w = self.spec.width;
        let ex = self.x_enc.eval(&self.params, &Tensor::column(x.to_vec()))?;
        let ez = self.z_enc.eval(&self.params, z)?;
        // The first shared layer is affine in the concatenation, so it splits
        // into an x part and a z part.
        let first = &self.shared.layers[0];
        let wmat = self.params.get(first.w).data();
        let wx = Tensor::matrix(w, w, wmat[..w * w].to_vec())?;
        let wz = Tensor::matrix(w, w, wmat[w * w..].to_vec())?;
        let px = ex.matmul(&wx)?;
        let mut pz = ez.matmul(&wz)?;
        add_bias(&mut pz, self.params.get(first.b).data());

        let (nx, nz) = (x.len(), pz.rows());
        let heads = self.spec.heads;
        let rest = &self.shared.layers[1..];
        let rows: Vec<Vec<f64>> = (0..nx)
            .into_par_iter()
            .map(|i| {
                let mut out = vec![0.0; heads * nz];
                let mut h = vec![0.0; w];
                let mut next = vec![0.0; w];
                for j in 0..nz {
                    for (c, hv) in h.iter_mut().enumerate() {
                        *hv = (px.get(i, c) + pz.get(j, c)).max(0.0);
                    }
                    for layer in rest {
                        dense_relu(&self.params, layer, &h, &mut next);
                        std::mem::swap(&mut h, &mut next);
                    }
                    let hw = self.params.get(self.head.w).data();
                    let hb = self.params.get(self.head.b).data();
                    for k in 0..heads {
                        let mut v = hb[k];
                        for (c, hv) in h.iter().enumerate() {
                            v += hv * hw[c * heads + k];
                        }
                        out[k * nz + j] = self.spec.output.apply(v);
                    }
                }
                out
            })
            .collect();
        (0..heads)
            .map(|k| {
                let mut data = Vec::with_capacity(nx * nz);
                for row in &rows {
                    data.extend_from_slice(&row[k * nz..(k + 1) * nz]);
                }
                Tensor::matrix(nx, nz, data).map_err(Error::from)
            })
            .collect()
    }
}

fn dense_relu(params: &ParamStore, layer: &Dense, h: &[f64], out: &mut [f64]) {
    let w = params.get(layer.w).data();
    let b = params.get(layer.b).data();
    let m = layer.fan_out;
    out[..m].copy_from_slice(b);
    for (c, hv) in h.iter().enumerate() {
        if *hv == 0.0 {
            continue;
        }
        for (o, wv) in out[..m].iter_mut().zip(&w[c * m..(c + 1) * m]) {
            *o += hv * wv;
        }
    }
    for o in out[..m].iter_mut() {
        *o = o.max(0.0);
    }
}

/// Network on `z` alone with one sigmoid output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZSpec {
    pub z_dim: usize,
    pub width: usize,
    pub depth: usize,
}

impl ZSpec {
    pub fn new(z_dim: usize) -> Self {
        Self {
            z_dim,
            width: DEFAULT_WIDTH,
            depth: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EtaNet {
    pub spec: ZSpec,
    pub body: Mlp,
    pub head: Dense,
    pub params: ParamStore,
}

impl EtaNet {
    pub fn new(spec: ZSpec, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let body = Mlp::new(&mut params, "body", spec.z_dim, spec.width, spec.depth, rng);
        let head = Dense::new(&mut params, "head", spec.width, 1, rng);
        Self {
            spec,
            body,
            head,
            params,
        }
    }

    /// Logits `[n, 1]` on the tape.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], z: Var) -> Result<Var> {
        let h = self.body.forward(tape, vars, z)?;
        self.head.forward(tape, vars, h)
    }

    pub fn predict(&self, z: &Tensor) -> Result<Vec<f64>> {
        let h = self.body.eval(&self.params, z)?;
        let out = self.head.eval(&self.params, &h)?;
        Ok(out.data().iter().map(|&v| sigmoid(v)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub z_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub k: usize,
}

impl PartitionSpec {
    pub fn new(z_dim: usize, k: usize) -> Self {
        Self {
            z_dim,
            width: DEFAULT_WIDTH,
            depth: 3,
            k,
        }
    }
}

/// Maps an instrument to `k` cell logits, with an auxiliary linear head on
/// the last hidden layer.
#[derive(Clone, Debug)]
pub struct PartitionNet {
    pub spec: PartitionSpec,
    pub body: Mlp,
    pub logits: Dense,
    pub aux: Dense,
    pub params: ParamStore,
}

impl PartitionNet {
    pub fn new(spec: PartitionSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        let mut params = ParamStore::new();
        let body = Mlp::new(&mut params, "body", spec.z_dim, spec.width, spec.depth, rng);
        let logits = Dense::new(&mut params, "logits", spec.width, spec.k, rng);
        let aux = Dense::new(&mut params, "aux", spec.width, spec.k, rng);
        Ok(Self {
            spec,
            body,
            logits,
            aux,
            params,
        })
    }

    /// `(logits, aux_logits)`, both `[n, k]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], z: Var) -> Result<(Var, Var)> {
        let h = self.body.forward(tape, vars, z)?;
        let logits = self.logits.forward(tape, vars, h)?;
        let aux = self.aux.forward(tape, vars, h)?;
        Ok((logits, aux))
    }

    pub fn eval_logits(&self, z: &Tensor) -> Result<Tensor> {
        let h = self.body.eval(&self.params, z)?;
        self.logits.eval(&self.params, &h)
    }

    /// `(logits, aux_logits)` without a tape.
    pub fn eval_both(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.body.eval(&self.params, z)?;
        Ok((
            self.logits.eval(&self.params, &h)?,
            self.aux.eval(&self.params, &h)?,
        ))
    }

    /// Deterministic cell of each row: argmax of the logits, lowest index on
    /// ties.
    pub fn assign(&self, z: &Tensor) -> Result<Vec<usize>> {
        let logits = self.eval_logits(z)?;
        Ok(argmax_rows(&logits))
    }
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let m = t.cols();
    t.data()
        .chunks(m)
        .map(|row| {
            let mut best = 0;
            for j in 1..m {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
