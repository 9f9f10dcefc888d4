//! Synthetic data-generating processes, splits and CSV exchange.
//!
//! All three processes share an observed confounder `X ~ U[-1, 1]`, an
//! unobserved confounder `U ~ U[-1, 1]` and the outcome model
//! `Y = (X + 0.5 U + 0.1 L) / 4 + tau(X) A` with `L ~ Laplace(0, 1)`.
//! They differ in the instrument and in how the propensity depends on it.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Number of instrument bits in dataset 3.
pub const D3_BITS: usize = 20;
/// Bits of the dataset-3 instrument that drive the latent score.
pub const D3_RELEVANT_BITS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum DatasetId {
    One,
    Two,
    Three,
}

impl DatasetId {
    pub const ALL: [DatasetId; 3] = [DatasetId::One, DatasetId::Two, DatasetId::Three];

    pub fn number(self) -> u8 {
        match self {
            DatasetId::One => 1,
            DatasetId::Two => 2,
            DatasetId::Three => 3,
        }
    }

    /// Instrument dimension.
    pub fn z_dim(self) -> usize {
        match self {
            DatasetId::One | DatasetId::Two => 1,
            DatasetId::Three => D3_BITS,
        }
    }

    pub fn generate(self, n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
        match self {
            DatasetId::One => generate_dataset1(n, seed),
            DatasetId::Two => generate_dataset2(n, seed),
            DatasetId::Three => generate_dataset3(n, seed),
        }
    }
}

impl TryFrom<u8> for DatasetId {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(DatasetId::One),
            2 => Ok(DatasetId::Two),
            3 => Ok(DatasetId::Three),
            other => Err(format!("unknown dataset {other}")),
        }
    }
}

impl From<DatasetId> for u8 {
    fn from(d: DatasetId) -> u8 {
        d.number()
    }
}

impl FromStr for DatasetId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let n: u8 = s
            .trim()
            .parse()
            .map_err(|_| format!("bad dataset id `{s}`"))?;
        DatasetId::try_from(n)
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// One observational tuple plus the hidden fields only used for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub z: Vec<f64>,
    pub x: f64,
    pub a: bool,
    pub y: f64,
    pub u: f64,
    pub tau_true: f64,
    pub pi_true: f64,
    pub rho: Option<u32>,
}

impl LabeledSample {
    pub fn a_f64(&self) -> f64 {
        if self.a {
            1.0
        } else {
            0.0
        }
    }
}

/// CATE shared by datasets 1 and 2.
pub fn tau_12(x: f64) -> f64 {
    -((2.5 * x).powi(4) + 12.0 * (6.0 * x).sin() + 0.5 * x.cos()) / 80.0 + 0.5
}

/// CATE of dataset 3.
pub fn tau_3(x: f64) -> f64 {
    -(-(1.6 * x + 0.5).powi(4) + 12.0 * (4.0 * x + 1.5).sin() + x.cos()) / 80.0 + 0.5
}

pub fn tau(dataset: DatasetId, x: f64) -> f64 {
    match dataset {
        DatasetId::One | DatasetId::Two => tau_12(x),
        DatasetId::Three => tau_3(x),
    }
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Upper end of the dataset-1/2 instrument support, used in the dataset-1
/// propensity.
pub const Z_MAX: f64 = 1.0;

/// Propensity `P(A = 1 | X, Z, U)` of each process. For dataset 3, `z` is the
/// bit vector and only its first five components matter.
pub fn propensity(dataset: DatasetId, x: f64, z: &[f64], u: f64) -> f64 {
    match dataset {
        DatasetId::One => {
            let rho = logistic((2.0 * z[0].abs() - Z_MAX) + x + 0.5 * u);
            (rho - 0.5) * 0.9 + 0.5
        }
        DatasetId::Two => {
            let z = z[0];
            (2.5 * z + x + u).sin() * 0.48 + 0.48 + 0.04 / (1.0 + (-3.0 * z.abs()).exp())
        }
        DatasetId::Three => propensity_d3(x, latent_score(z) as f64, u),
    }
}

pub fn propensity_d3(x: f64, rho: f64, u: f64) -> f64 {
    0.48 * (10.0 * rho + x + u).sin() + 0.48 + 0.04 / (1.0 + (-3.0 * (5.0 * rho).abs()).exp())
}

/// Latent score of a dataset-3 instrument: the number of set bits among the
/// first five.
pub fn latent_score(z: &[f64]) -> u32 {
    z.iter()
        .take(D3_RELEVANT_BITS)
        .filter(|&&b| b > 0.5)
        .count() as u32
}

/// `E[Y | X = x, U = u, A = a]` (the Laplace noise has mean zero).
pub fn outcome_mean(dataset: DatasetId, x: f64, u: f64, a: bool) -> f64 {
    0.25 * (x + 0.5 * u) + if a { tau(dataset, x) } else { 0.0 }
}

fn laplace(rng: &mut impl Rng) -> f64 {
    // inverse CDF on (-1/2, 1/2)
    let p: f64 = rng.random::<f64>() - 0.5;
    let p = if p == -0.5 { -0.5 + f64::EPSILON } else { p };
    -p.signum() * (1.0 - 2.0 * p.abs()).ln()
}

struct Streams {
    instrument: crate::rng::StreamRng,
    confounders: crate::rng::StreamRng,
    treatment: crate::rng::StreamRng,
    noise: crate::rng::StreamRng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            instrument: stream(seed, Stream::Instrument),
            confounders: stream(seed, Stream::Confounders),
            treatment: stream(seed, Stream::Treatment),
            noise: stream(seed, Stream::OutcomeNoise),
        }
    }

    fn confounders(&mut self) -> (f64, f64) {
        let x = self.confounders.random_range(-1.0..=1.0);
        let u = self.confounders.random_range(-1.0..=1.0);
        (x, u)
    }

    fn finish(
        &mut self,
        dataset: DatasetId,
        z: Vec<f64>,
        x: f64,
        u: f64,
        rho: Option<u32>,
    ) -> LabeledSample {
        let pi = propensity(dataset, x, &z, u);
        let a = self.treatment.random::<f64>() < pi;
        let t = tau(dataset, x);
        let noise = laplace(&mut self.noise);
        let y = (x + 0.5 * u + 0.1 * noise) * 0.25 + if a { t } else { 0.0 };
        LabeledSample {
            z,
            x,
            a,
            y,
            u,
            tau_true: t,
            pi_true: pi,
            rho,
        }
    }
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidInput(
            "sample count must be at least 1".into(),
        ));
    }
    Ok(())
}

/// Draws from the dataset-1/2 instrument mixture:
/// 1/2 U[-1, 1] + 1/4 Beta(2, 2) + 1/4 (-Beta(2, 2)).
fn mixture_instrument(rng: &mut impl Rng, beta: &Beta<f64>) -> f64 {
    let c: f64 = rng.random();
    if c < 0.5 {
        rng.random_range(-1.0..=1.0)
    } else if c < 0.75 {
        beta.sample(rng)
    } else {
        -beta.sample(rng)
    }
}

fn generate_scalar_instrument(
    dataset: DatasetId,
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    check_n(n)?;
    let beta = Beta::new(2.0, 2.0).expect("valid beta parameters");
    let mut s = Streams::new(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let z = mixture_instrument(&mut s.instrument, &beta);
        let (x, u) = s.confounders();
        out.push(s.finish(dataset, vec![z], x, u, None));
    }
    Ok(out)
}

/// Scalar mixture instrument with a simple propensity driven by `|Z|`.
pub fn generate_dataset1(n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    generate_scalar_instrument(DatasetId::One, n, seed)
}

/// Same instrument and outcome as dataset 1 but an oscillating propensity.
pub fn generate_dataset2(n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    generate_scalar_instrument(DatasetId::Two, n, seed)
}

/// Twenty independent fair bits; only the first five enter the propensity,
/// through their sum.
pub fn generate_dataset3(n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    check_n(n)?;
    let mut s = Streams::new(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..D3_BITS)
            .map(|_| {
                if s.instrument.random::<bool>() {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let rho = latent_score(&z);
        let (x, u) = s.confounders();
        out.push(s.finish(DatasetId::Three, z, x, u, Some(rho)));
    }
    Ok(out)
}

/// Train/validation/test partition of one generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub seed: u64,
}

pub const TRAIN_FRACTION: f64 = 0.4;
pub const VAL_FRACTION: f64 = 0.2;

/// Uniformly shuffles and partitions 40/20/40.
pub fn split_dataset(samples: Vec<LabeledSample>, seed: u64) -> Result<DatasetSplit> {
    let n = samples.len();
    if n < 5 {
        return Err(Error::InvalidInput(format!(
            "need at least 5 samples to split, got {n}"
        )));
    }
    let n_train = ((n as f64) * TRAIN_FRACTION).round() as usize;
    let n_val = ((n as f64) * VAL_FRACTION).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Stream::Split));

    let mut slots: Vec<Option<LabeledSample>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<LabeledSample> {
        idx.iter()
            .map(|&i| slots[i].take().expect("index used once"))
            .collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok(DatasetSplit {
        train,
        val,
        test,
        seed,
    })
}

/// Outcome support `[s1, s2]` used by every bound formula.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRange {
    pub s1: f64,
    pub s2: f64,
}

impl OutcomeRange {
    pub fn new(s1: f64, s2: f64) -> Result<Self> {
        if !(s1.is_finite() && s2.is_finite() && s1 < s2) {
            return Err(Error::InvalidInput(format!(
                "outcome range requires s1 < s2, got ({s1}, {s2})"
            )));
        }
        Ok(Self { s1, s2 })
    }

    pub fn width(&self) -> f64 {
        self.s2 - self.s1
    }
}

/// Empirical min/max of the training outcomes.
pub fn outcome_range_from_train(train: &[LabeledSample]) -> Result<OutcomeRange> {
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training split".into()));
    }
    let s1 = train.iter().map(|s| s.y).fold(f64::INFINITY, f64::min);
    let s2 = train.iter().map(|s| s.y).fold(f64::NEG_INFINITY, f64::max);
    OutcomeRange::new(s1, s2)
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes samples as CSV with header `z_0..z_{d-1},x,a,y,tau_true,pi_true,u[,rho]`.
pub fn write_csv<W: Write>(samples: &[LabeledSample], writer: W) -> Result<()> {
    let d = samples.first().map_or(1, |s| s.z.len());
    let with_rho = samples.first().is_some_and(|s| s.rho.is_some());
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..d).map(|j| format!("z_{j}")).collect();
    header.extend(["x", "a", "y", "tau_true", "pi_true", "u"].map(String::from));
    if with_rho {
        header.push("rho".into());
    }
    w.write_record(&header)?;
    for s in samples {
        if s.z.len() != d {
            return Err(Error::LengthMismatch {
                what: "instrument dimension",
                left: d,
                right: s.z.len(),
            });
        }
        let mut rec: Vec<String> = s.z.iter().map(|&v| fmt_f64(v)).collect();
        rec.push(fmt_f64(s.x));
        rec.push(if s.a { "1".into() } else { "0".into() });
        rec.extend([s.y, s.tau_true, s.pi_true, s.u].map(fmt_f64));
        if with_rho {
            rec.push(s.rho.unwrap_or_default().to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(reader: R) -> Result<Vec<LabeledSample>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    let d = header.iter().filter(|h| h.starts_with("z_")).count();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("missing column `{name}`")))
    };
    let (cx, ca, cy, ct, cp, cu) = (
        col("x")?,
        col("a")?,
        col("y")?,
        col("tau_true")?,
        col("pi_true")?,
        col("u")?,
    );
    let crho = header.iter().position(|h| h == "rho");
    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|e| Error::InvalidInput(format!("bad number `{s}`: {e}")))
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let z = (0..d).map(|j| parse(&rec[j])).collect::<Result<Vec<_>>>()?;
        let a = match rec[ca].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::InvalidInput(format!(
                    "treatment must be 0/1, got `{other}`"
                )))
            }
        };
        let rho = match crho {
            Some(c) => Some(
                rec[c]
                    .trim()
                    .parse::<u32>()
                    .map_err(|e| Error::InvalidInput(format!("bad rho: {e}")))?,
            ),
            None => None,
        };
        out.push(LabeledSample {
            z,
            x: parse(&rec[cx])?,
            a,
            y: parse(&rec[cy])?,
            u: parse(&rec[cu])?,
            tau_true: parse(&rec[ct])?,
            pi_true: parse(&rec[cp])?,
            rho,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_values_at_zero() {
        assert!((tau_12(0.0) - 0.49375).abs() < 1e-15);
        let expected = -(-(0.5f64).powi(4) + 12.0 * 1.5f64.sin() + 1.0) / 80.0 + 0.5;
        assert!((tau_3(0.0) - expected).abs() < 1e-15);
        assert!((tau_3(0.0) - 0.33866).abs() < 1e-5);
    }

    #[test]
    fn dataset1_propensity_range() {
        let s = generate_dataset1(5000, 3).unwrap();
        assert!(s.iter().all(|s| (0.05..=0.95).contains(&s.pi_true)));
        assert!(s
            .iter()
            .all(|s| (-1.0..=1.0).contains(&s.x) && (-1.0..=1.0).contains(&s.u)));
        assert!(s.iter().all(|s| (-1.0..=1.0).contains(&s.z[0])));
    }

    #[test]
    fn dataset2_propensity_range() {
        // sine term in [0, 0.96]; logistic term in [0.02, 0.04 / (1 + e^-3)]
        let hi = 0.96 + 0.04 / (1.0 + (-3.0f64).exp());
        let s = generate_dataset2(5000, 4).unwrap();
        assert!(s.iter().all(|s| s.pi_true >= 0.0 && s.pi_true <= hi));
        assert!(s.iter().all(|s| s.pi_true <= 1.0));
    }

    #[test]
    fn datasets_share_the_instrument_and_confounder_streams() {
        let a = generate_dataset1(200, 11).unwrap();
        let b = generate_dataset2(200, 11).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert_eq!((p.x, p.u, &p.z), (q.x, q.u, &q.z));
            assert_eq!(p.tau_true, q.tau_true);
        }
        assert_eq!(generate_dataset2(200, 11).unwrap(), b);
    }

    #[test]
    fn dataset3_bits_and_score() {
        let s = generate_dataset3(2000, 5).unwrap();
        for smp in &s {
            assert_eq!(smp.z.len(), D3_BITS);
            assert!(smp.z.iter().all(|&b| b == 0.0 || b == 1.0));
            let rho = smp.rho.unwrap();
            assert!(rho <= 5);
            assert_eq!(rho, latent_score(&smp.z));
            assert!((0.0..=1.0).contains(&smp.pi_true));
        }
    }

    #[test]
    fn zero_samples_is_an_error() {
        assert!(generate_dataset1(0, 1).is_err());
        assert!(generate_dataset3(0, 1).is_err());
    }

    #[test]
    fn split_sizes_and_union() {
        let s = generate_dataset1(2000, 9).unwrap();
        let split = split_dataset(s.clone(), 9).unwrap();
        assert_eq!(
            (split.train.len(), split.val.len(), split.test.len()),
            (800, 400, 800)
        );
        let mut all: Vec<_> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .map(|s| s.x.to_bits())
            .collect();
        let mut orig: Vec<_> = s.iter().map(|s| s.x.to_bits()).collect();
        all.sort_unstable();
        orig.sort_unstable();
        assert_eq!(all, orig);
        assert_eq!(split_dataset(s.clone(), 9).unwrap(), split);
        assert!(split_dataset(s[..4].to_vec(), 1).is_err());
    }

    #[test]
    fn outcome_range() {
        let mk = |y: f64| LabeledSample {
            z: vec![0.0],
            x: 0.0,
            a: false,
            y,
            u: 0.0,
            tau_true: 0.0,
            pi_true: 0.5,
            rho: None,
        };
        let r = outcome_range_from_train(&[mk(0.1), mk(0.9), mk(0.4)]).unwrap();
        assert_eq!((r.s1, r.s2), (0.1, 0.9));
        assert!(outcome_range_from_train(&[mk(0.3), mk(0.3)]).is_err());
        assert!(outcome_range_from_train(&[]).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        for d in DatasetId::ALL {
            let s = d.generate(50, 2).unwrap();
            let mut buf = Vec::new();
            write_csv(&s, &mut buf).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            let header = text.lines().next().unwrap();
            assert_eq!(
                header.split(',').filter(|h| h.starts_with("z_")).count(),
                d.z_dim()
            );
            assert_eq!(header.ends_with(",rho"), d == DatasetId::Three);
            let back = read_csv(buf.as_slice()).unwrap();
            assert_eq!(back, s);
        }
    }
}
