//! First-stage nuisance networks: `mu^a(x, z) = E[Y | x, z, A = a]`,
//! `pi(x, z) = P(A = 1 | x, z)` and `eta(z) = P(A = 1 | z)`.

use std::path::Path;

use catebounds_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, LabeledSample};
use crate::nn::{
    read_checkpoint, train, write_checkpoint, EtaNet, OutputTransform, ParamStore, TrainConfig,
    TrainLog, XzNet, XzSpec, ZSpec,
};
use crate::population::NuisanceFns;
use crate::rng::{substream, Stream};
use crate::{Error, Result};

pub const NUISANCE_BATCH_SIZE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceConfig {
    pub train: TrainConfig,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                batch_size: NUISANCE_BATCH_SIZE,
                ..TrainConfig::default()
            },
        }
    }
}

/// Instruments of `samples` as an `[n, d]` matrix.
pub fn instrument_matrix(samples: &[LabeledSample]) -> Result<Tensor> {
    let d = samples.first().map_or(0, |s| s.z.len());
    let mut data = Vec::with_capacity(samples.len() * d);
    for s in samples {
        if s.z.len() != d {
            return Err(Error::LengthMismatch {
                what: "instrument dimension",
                left: d,
                right: s.z.len(),
            });
        }
        data.extend_from_slice(&s.z);
    }
    Ok(Tensor::matrix(samples.len(), d, data)?)
}

fn rows(m: &Tensor, idx: &[usize]) -> Tensor {
    let d = m.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(m.row_slice(i));
    }
    Tensor::matrix(idx.len(), d, data).expect("length matches shape")
}

/// Mean binary cross-entropy of `logits` (`[n, 1]`) against 0/1 targets.
pub fn bce_with_logits(tape: &mut Tape, logits: Var, targets: &[f64]) -> Result<Var> {
    let n = targets.len();
    let zeros = tape.constant(Tensor::zeros(&[n, 1]))?;
    let both = tape.concat_cols(&[zeros, logits])?;
    let log_p = tape.log_softmax_rows(both)?;
    let t: Vec<f64> = targets.iter().flat_map(|&a| [1.0 - a, a]).collect();
    let t = tape.constant(Tensor::matrix(n, 2, t)?)?;
    let picked = tape.mul(log_p, t)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / n as f64)?)
}

fn bce_value(probs: &[f64], targets: &[f64]) -> f64 {
    let eps = 1e-12;
    probs
        .iter()
        .zip(targets)
        .map(|(p, a)| -(a * p.max(eps).ln() + (1.0 - a) * (1.0 - p).max(eps).ln()))
        .sum::<f64>()
        / probs.len() as f64
}

struct Prepared {
    x: Vec<f64>,
    z: Tensor,
    a: Vec<f64>,
    y: Vec<f64>,
}

impl Prepared {
    fn new(samples: &[LabeledSample]) -> Result<Self> {
        Ok(Self {
            x: samples.iter().map(|s| s.x).collect(),
            z: instrument_matrix(samples)?,
            a: samples.iter().map(LabeledSample::a_f64).collect(),
            y: samples.iter().map(|s| s.y).collect(),
        })
    }

    fn pick(v: &[f64], idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| v[i]).collect()
    }
}

fn mu_mse(net: &XzNet, data: &Prepared) -> Result<f64> {
    let out = net.predict(&data.x, &data.z)?;
    let n = data.y.len();
    let sse: f64 = (0..n)
        .map(|i| (out.get(i, data.a[i] as usize) - data.y[i]).powi(2))
        .sum();
    Ok(sse / n as f64)
}

/// Layouts of the outcome and propensity networks for a `z_dim`-wide
/// instrument encoding. Both methods build their nuisances from these.
pub fn nuisance_specs(z_dim: usize) -> (XzSpec, XzSpec) {
    (
        XzSpec::new(z_dim, 2, OutputTransform::Identity),
        XzSpec::new(z_dim, 1, OutputTransform::Sigmoid),
    )
}

pub fn fit_mu(
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    cfg: &NuisanceConfig,
    seed: u64,
) -> Result<(XzNet, TrainLog)> {
    let tr = Prepared::new(train_set)?;
    let va = Prepared::new(val_set)?;
    let mut net = XzNet::new(
        nuisance_specs(tr.z.cols()).0,
        &mut substream(seed, Stream::Init, 0),
    )?;
    let mut shuffle = substream(seed, Stream::Shuffle, 0);
    let arch = net.clone();
    let log = train(
        &mut net.params,
        &cfg.train,
        tr.y.len(),
        &mut shuffle,
        |tape, vars, batch| {
            let x = tape.constant(Tensor::column(Prepared::pick(&tr.x, batch)))?;
            let z = tape.constant(rows(&tr.z, batch))?;
            let out = arch.forward(tape, vars, x, z)?;
            let mask: Vec<f64> = batch
                .iter()
                .flat_map(|&i| [1.0 - tr.a[i], tr.a[i]])
                .collect();
            let mask = tape.constant(Tensor::matrix(batch.len(), 2, mask)?)?;
            let picked = tape.mul(out, mask)?;
            let ones = tape.constant(Tensor::column(vec![1.0, 1.0]))?;
            let pred = tape.matmul(picked, ones)?;
            let y = tape.constant(Tensor::column(Prepared::pick(&tr.y, batch)))?;
            let d = tape.sub(pred, y)?;
            let sq = tape.mul(d, d)?;
            let loss = tape.mean(sq)?;
            Ok((loss, vec![]))
        },
        |params| {
            let mut probe = arch.clone();
            probe.params.load_from(params)?;
            Ok((mu_mse(&probe, &va)?, vec![]))
        },
    )?;
    Ok((net, log))
}

pub fn fit_pi(
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    cfg: &NuisanceConfig,
    seed: u64,
) -> Result<(XzNet, TrainLog)> {
    let tr = Prepared::new(train_set)?;
    let va = Prepared::new(val_set)?;
    // Logits are trained with a cross-entropy loss; the stored transform
    // applies the sigmoid at prediction time.
    let mut net = XzNet::new(
        nuisance_specs(tr.z.cols()).1,
        &mut substream(seed, Stream::Init, 1),
    )?;
    let mut shuffle = substream(seed, Stream::Shuffle, 1);
    let arch = net.clone();
    let log = train(
        &mut net.params,
        &cfg.train,
        tr.y.len(),
        &mut shuffle,
        |tape, vars, batch| {
            let x = tape.constant(Tensor::column(Prepared::pick(&tr.x, batch)))?;
            let z = tape.constant(rows(&tr.z, batch))?;
            let logits = arch.forward(tape, vars, x, z)?;
            let loss = bce_with_logits(tape, logits, &Prepared::pick(&tr.a, batch))?;
            Ok((loss, vec![]))
        },
        |params| {
            let mut probe = arch.clone();
            probe.params.load_from(params)?;
            let p = probe.predict(&va.x, &va.z)?;
            Ok((bce_value(p.data(), &va.a), vec![]))
        },
    )?;
    Ok((net, log))
}

pub fn fit_eta(
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    cfg: &NuisanceConfig,
    seed: u64,
) -> Result<(EtaNet, TrainLog)> {
    let tr = Prepared::new(train_set)?;
    let va = Prepared::new(val_set)?;
    let mut net = EtaNet::new(
        ZSpec::new(tr.z.cols()),
        &mut substream(seed, Stream::Init, 2),
    );
    let mut shuffle = substream(seed, Stream::Shuffle, 2);
    let arch = net.clone();
    let log = train(
        &mut net.params,
        &cfg.train,
        tr.y.len(),
        &mut shuffle,
        |tape, vars, batch| {
            let z = tape.constant(rows(&tr.z, batch))?;
            let logits = arch.forward(tape, vars, z)?;
            let loss = bce_with_logits(tape, logits, &Prepared::pick(&tr.a, batch))?;
            Ok((loss, vec![]))
        },
        |params| {
            let mut probe = arch.clone();
            probe.params.load_from(params)?;
            Ok((bce_value(&probe.predict(&va.z)?, &va.a), vec![]))
        },
    )?;
    Ok((net, log))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NuisanceLogs {
    pub mu: TrainLog,
    pub pi: TrainLog,
    pub eta: TrainLog,
}

/// The three fitted first-stage networks. They are frozen once fitted: the
/// second stage only reads their predictions.
#[derive(Clone, Debug)]
pub struct NuisanceSet {
    pub mu: XzNet,
    pub pi: XzNet,
    pub eta: EtaNet,
}

#[derive(Serialize, Deserialize)]
struct NuisanceMeta {
    mu: XzSpec,
    pi: XzSpec,
    eta: ZSpec,
}

const CHECKPOINT_KIND: &str = "nuisance";

impl NuisanceSet {
    pub fn fit(split: &DatasetSplit, cfg: &NuisanceConfig) -> Result<(Self, NuisanceLogs)> {
        let (mu, mu_log) = fit_mu(&split.train, &split.val, cfg, split.seed)?;
        let (pi, pi_log) = fit_pi(&split.train, &split.val, cfg, split.seed)?;
        let (eta, eta_log) = fit_eta(&split.train, &split.val, cfg, split.seed)?;
        Ok((
            Self { mu, pi, eta },
            NuisanceLogs {
                mu: mu_log,
                pi: pi_log,
                eta: eta_log,
            },
        ))
    }

    /// Combined parameters with `mu/`, `pi/` and `eta/` prefixes.
    fn combined(&self) -> ParamStore {
        let mut all = ParamStore::new();
        for (prefix, store) in [
            ("mu", &self.mu.params),
            ("pi", &self.pi.params),
            ("eta", &self.eta.params),
        ] {
            for (n, t) in store.iter() {
                all.add(format!("{prefix}/{n}"), t.clone());
            }
        }
        all
    }

    pub fn fingerprint(&self) -> String {
        self.combined().fingerprint()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(NuisanceMeta {
            mu: self.mu.spec.clone(),
            pi: self.pi.spec.clone(),
            eta: self.eta.spec.clone(),
        })?;
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(file, CHECKPOINT_KIND, &meta, &self.combined())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))?;
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found `{}`",
                ck.kind
            )));
        }
        let meta: NuisanceMeta = serde_json::from_value(ck.meta)?;
        let mut rng = substream(0, Stream::Init, 0);
        let mut set = Self {
            mu: XzNet::new(meta.mu, &mut rng)?,
            pi: XzNet::new(meta.pi, &mut rng)?,
            eta: EtaNet::new(meta.eta, &mut rng),
        };
        let part = |prefix: &str| {
            let mut s = ParamStore::new();
            for (n, t) in ck.params.iter() {
                if let Some(rest) = n.strip_prefix(prefix) {
                    s.add(rest, t.clone());
                }
            }
            s
        };
        set.mu.params.load_from(&part("mu/"))?;
        set.pi.params.load_from(&part("pi/"))?;
        set.eta.params.load_from(&part("eta/"))?;
        Ok(set)
    }

    /// Validation metrics: outcome MSE on the observed arm and the two
    /// cross-entropies.
    pub fn validation_losses(&self, samples: &[LabeledSample]) -> Result<[f64; 3]> {
        let d = Prepared::new(samples)?;
        let pi = self.pi.predict(&d.x, &d.z)?;
        let eta = self.eta.predict(&d.z)?;
        Ok([
            mu_mse(&self.mu, &d)?,
            bce_value(pi.data(), &d.a),
            bce_value(&eta, &d.a),
        ])
    }
}

impl NuisanceFns for NuisanceSet {
    fn mu(&self, x: f64, z: &[f64], a: bool) -> f64 {
        let zt = Tensor::row(z.to_vec());
        let out = self
            .mu
            .predict(&[x], &zt)
            .expect("instrument dimension matches");
        out.get(0, a as usize)
    }

    fn pi(&self, x: f64, z: &[f64]) -> f64 {
        let zt = Tensor::row(z.to_vec());
        self.pi
            .predict(&[x], &zt)
            .expect("instrument dimension matches")
            .item()
    }

    fn eta(&self, z: &[f64]) -> f64 {
        let zt = Tensor::row(z.to_vec());
        self.eta.predict(&zt).expect("instrument dimension matches")[0]
    }
}
