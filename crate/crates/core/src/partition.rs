//! Second stage: learning a `k`-cell partition of the instrument space that
//! minimises the estimated bound width, with the first-stage nuisances frozen.

use std::io::Write;
use std::path::Path;

use catebounds_autodiff::{finite_diff_check, AutodiffError, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{hard_weights, representation_nuisance, BoundSet, NuisanceGrid};
use crate::data::{DatasetSplit, LabeledSample, OutcomeRange};
use crate::nn::gumbel::{gumbel_noise, gumbel_softmax_tape, one_hot};
use crate::nn::{
    argmax_rows, read_checkpoint, train, write_checkpoint, PartitionNet, PartitionSpec,
    TrainConfig, TrainLog,
};
use crate::nuisance::{instrument_matrix, NuisanceSet};
use crate::rng::{substream, Stream};
use crate::{Error, Result};

/// Floor applied to cell masses inside the log of the mass penalty.
pub const MASS_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub k: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub temperature: f64,
    /// Sample cell weights with Gumbel noise during training; otherwise the
    /// weights are the noise-free softmax of the logits.
    pub gumbel: bool,
    /// Straight-through one-hot forward pass for Gumbel samples.
    pub hard: bool,
    /// Independent initializations; the one with the lowest validation
    /// `l_b + lambda * l_reg` is kept.
    pub restarts: usize,
    pub train: TrainConfig,
}

impl PartitionConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            lambda: 1.0,
            gamma: 0.5,
            temperature: 1.0,
            gumbel: false,
            hard: true,
            restarts: 5,
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.restarts == 0 {
            return bad("at least one restart is required");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.train.batch_size < 2 * self.k {
            return bad("batch size must be at least 2k");
        }
        if !(self.train.adam.lr > 0.0) || self.train.max_epochs == 0 {
            return bad("learning rate and epoch count must be positive");
        }
        Ok(())
    }
}

/// Frozen first-stage predictions for the second stage: for units `i, j` of
/// one split, `g1[i, j] = mu^1(x_i, z_j) eta(z_j)`,
/// `g0[i, j] = mu^0(x_i, z_j) (1 - eta(z_j))` and `p[i, j] = pi(x_i, z_j)`.
#[derive(Clone, Debug)]
pub struct StageTwoData {
    pub x: Vec<f64>,
    pub z: Tensor,
    pub a: Vec<bool>,
    pub g1: Tensor,
    pub g0: Tensor,
    pub p: Tensor,
}

impl StageTwoData {
    pub fn new(set: &NuisanceSet, samples: &[LabeledSample]) -> Result<Self> {
        let x: Vec<f64> = samples.iter().map(|s| s.x).collect();
        let grid = NuisanceGrid::from_set(set, &x, samples)?;
        Self::from_grid(&grid, instrument_matrix(samples)?)
    }

    /// Uses grid rows as query points; requires `grid.x.len() == grid.nz()`.
    pub fn from_grid(grid: &NuisanceGrid, z: Tensor) -> Result<Self> {
        let n = grid.nz();
        if grid.x.len() != n || z.rows() != n {
            return Err(Error::LengthMismatch {
                what: "stage-two query and aggregation units",
                left: grid.x.len(),
                right: n,
            });
        }
        let weight = |t: &Tensor, arm: bool| {
            let mut out = t.clone();
            for row in out.data_mut().chunks_mut(n) {
                for (v, e) in row.iter_mut().zip(&grid.eta) {
                    *v *= if arm { *e } else { 1.0 - e };
                }
            }
            out
        };
        Ok(Self {
            x: grid.x.clone(),
            z,
            a: grid.a.clone(),
            g1: weight(&grid.mu1, true),
            g0: weight(&grid.mu0, false),
            p: grid.pi.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    fn block(t: &Tensor, idx: &[usize]) -> Tensor {
        let n = t.cols();
        let mut data = Vec::with_capacity(idx.len() * idx.len());
        for &i in idx {
            let row = &t.data()[i * n..(i + 1) * n];
            data.extend(idx.iter().map(|&j| row[j]));
        }
        Tensor::matrix(idx.len(), idx.len(), data).expect("length matches shape")
    }

    fn z_rows(&self, idx: &[usize]) -> Tensor {
        let d = self.z.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.z.row_slice(i));
        }
        Tensor::matrix(idx.len(), d, data).expect("length matches shape")
    }
}

/// Mean estimated bound width on the tape for assignment weights `w`
/// (`[n, k]`) of the units in `batch`, which serve as both query points and
/// aggregation sample. Cell-arm pairs without any unit are left out of the
/// min/max; the second value counts them.
pub fn width_loss(
    tape: &mut Tape,
    w: Var,
    data: &StageTwoData,
    batch: &[usize],
    range: OutcomeRange,
) -> Result<(Var, usize)> {
    let n = batch.len();
    let k = tape.value(w).cols();
    let wv = tape.value(w).clone();
    let arm: Vec<bool> = batch.iter().map(|&j| data.a[j]).collect();
    let indicator = |want: Option<bool>| {
        Tensor::row(
            arm.iter()
                .map(|&a| f64::from(want.is_none_or(|v| v == a)))
                .collect(),
        )
    };
    let ones_col = tape.constant(Tensor::column(vec![1.0; n]))?;

    // Column sums of the weights over a unit subset, with empty cells
    // patched to 1 so the division stays finite. Returns the valid cells.
    let denominator = |tape: &mut Tape, want: Option<bool>| -> Result<(Var, Vec<usize>)> {
        let ind = indicator(want);
        let raw = ind.matmul(&wv)?;
        let valid: Vec<usize> = (0..k).filter(|&l| raw.data()[l] > 0.0).collect();
        let patch = Tensor::row(raw.data().iter().map(|&v| f64::from(v <= 0.0)).collect());
        let ind = tape.constant(ind)?;
        let d = tape.matmul(ind, w)?;
        let patch = tape.constant(patch)?;
        let d = tape.add(d, patch)?;
        Ok((tape.matmul(ones_col, d)?, valid))
    };
    let (den1, valid1) = denominator(tape, Some(true))?;
    let (den0, valid0) = denominator(tape, Some(false))?;
    let (mass, _) = denominator(tape, None)?;

    let g1 = tape.constant(StageTwoData::block(&data.g1, batch))?;
    let g0 = tape.constant(StageTwoData::block(&data.g0, batch))?;
    let p = tape.constant(StageTwoData::block(&data.p, batch))?;
    let num1 = tape.matmul(g1, w)?;
    let mu1 = tape.div(num1, den1)?;
    let num0 = tape.matmul(g0, w)?;
    let mu0 = tape.div(num0, den0)?;
    let num_pi = tape.matmul(p, w)?;
    let pi = tape.div(num_pi, mass)?;

    let mut ls = Vec::new();
    let mut ms = Vec::new();
    for &l in &valid1 {
        for &m in &valid0 {
            ls.push(l);
            ms.push(m);
        }
    }
    if ls.is_empty() {
        return Err(Error::NoValidPair);
    }
    let excluded = k * k - ls.len();

    let (s1, s2) = (range.s1, range.s2);
    let pm1 = tape.mul(pi, mu1)?;
    let pm0 = tape.mul(pi, mu0)?;
    let base0 = tape.sub(mu0, pm0)?;
    let side = |tape: &mut Tape, v: Var, c: f64| -> Result<Var> {
        let s = tape.scale(pi, c)?;
        Ok(tape.add(v, s)?)
    };
    // l-side: pi mu1 + (1 - pi) s  =  pi mu1 - s pi + s
    let ul = side(tape, pm1, -s2)?;
    let ul = tape.add_scalar(ul, s2)?;
    let ll = side(tape, pm1, -s1)?;
    let ll = tape.add_scalar(ll, s1)?;
    // m-side: (1 - pi) mu0 + pi s
    let um = side(tape, base0, s1)?;
    let lm = side(tape, base0, s2)?;

    let ul = tape.gather_cols(ul, &ls)?;
    let um = tape.gather_cols(um, &ms)?;
    let upper = tape.sub(ul, um)?;
    let ll = tape.gather_cols(ll, &ls)?;
    let lm = tape.gather_cols(lm, &ms)?;
    let lower = tape.sub(ll, lm)?;
    let ub = tape.min_cols(upper)?;
    let lb = tape.max_cols(lower)?;
    let width = tape.sub(ub, lb)?;
    Ok((tape.mean(width)?, excluded))
}

/// `-sum_l log(max(p_l, floor))` of the column means of `w`; the flag reports
/// whether the floor was hit.
pub fn mass_penalty(tape: &mut Tape, w: Var) -> Result<(Var, bool)> {
    let masses = tape.mean_rows(w)?;
    let clamped = tape.value(masses).data().iter().any(|&p| p < MASS_FLOOR);
    let floored = tape.clamp_min(masses, MASS_FLOOR)?;
    let logs = tape.log(floored)?;
    let total = tape.sum(logs)?;
    Ok((tape.scale(total, -1.0)?, clamped))
}

/// Cross-entropy of the auxiliary head against fixed labels.
pub fn aux_loss(tape: &mut Tape, aux_logits: Var, labels: &[usize]) -> Result<Var> {
    let k = tape.value(aux_logits).cols();
    let logp = tape.log_softmax_rows(aux_logits)?;
    let target = tape.constant(one_hot(labels, k))?;
    let picked = tape.mul(logp, target)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / labels.len() as f64)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_b: f64,
    pub l_reg: f64,
    pub l_aux: f64,
    pub total: f64,
    pub excluded_pairs: usize,
    pub mass_clamped: bool,
}

/// Composite loss `L_b + lambda L_reg + gamma L_aux` of one batch on the tape.
///
/// With `noise`, cell weights are Gumbel-softmax samples (straight-through
/// one-hot when `cfg.hard`); without, they are the softmax of the logits.
/// The mass penalty uses the relaxed weights so that it keeps a gradient
/// when a cell empties.
pub fn composite_loss(
    tape: &mut Tape,
    net: &PartitionNet,
    vars: &[Var],
    data: &StageTwoData,
    batch: &[usize],
    noise: Option<&Tensor>,
    cfg: &PartitionConfig,
    range: OutcomeRange,
) -> Result<(Var, LossParts)> {
    let z = tape.constant(data.z_rows(batch))?;
    let (logits, aux) = net.forward(tape, vars, z)?;
    let (w, soft, labels) = match noise {
        Some(noise) => {
            let (soft, labels) = gumbel_softmax_tape(tape, logits, noise, cfg.temperature, false)?;
            let w = if cfg.hard {
                tape.straight_through(soft, one_hot(&labels, cfg.k))?
            } else {
                soft
            };
            (w, soft, labels)
        }
        None => {
            let t = tape.scale(logits, 1.0 / cfg.temperature)?;
            let soft = tape.softmax_rows(t)?;
            let labels = argmax_rows(tape.value(soft));
            (soft, soft, labels)
        }
    };
    let (l_b, excluded) = width_loss(tape, w, data, batch, range)?;
    let (l_reg, clamped) = mass_penalty(tape, soft)?;
    let l_aux = aux_loss(tape, aux, &labels)?;
    let reg = tape.scale(l_reg, cfg.lambda)?;
    let auxw = tape.scale(l_aux, cfg.gamma)?;
    let total = tape.add(l_b, reg)?;
    let total = tape.add(total, auxw)?;
    let parts = LossParts {
        l_b: tape.value(l_b).item(),
        l_reg: tape.value(l_reg).item(),
        l_aux: tape.value(l_aux).item(),
        total: tape.value(total).item(),
        excluded_pairs: excluded,
        mass_clamped: clamped,
    };
    Ok((total, parts))
}

/// Hard-assignment losses of a split, evaluated without a tape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardLosses {
    pub l_b: f64,
    pub l_reg: f64,
    pub l_aux: f64,
    pub min_cell_mass: f64,
}

impl HardLosses {
    pub fn total(&self, cfg: &PartitionConfig) -> f64 {
        self.l_b + cfg.lambda * self.l_reg + cfg.gamma * self.l_aux
    }
}

pub fn hard_losses(
    net: &PartitionNet,
    grid: &NuisanceGrid,
    z: &Tensor,
    range: OutcomeRange,
) -> Result<HardLosses> {
    let (logits, aux) = net.eval_both(z)?;
    let labels = argmax_rows(&logits);
    let k = net.spec.k;
    let w = hard_weights(&labels, k)?;
    let bounds = BoundSet::from_representation(&representation_nuisance(grid, &w)?, range)?;
    let l_b = bounds.rows.iter().map(|r| r.bound.width()).sum::<f64>() / bounds.rows.len() as f64;
    let masses = cell_masses(&labels, k);
    let l_reg = -masses.iter().map(|p| p.max(MASS_FLOOR).ln()).sum::<f64>();
    let mut l_aux = 0.0;
    for (row, &l) in aux.data().chunks(k).zip(&labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        l_aux += lse - row[l];
    }
    Ok(HardLosses {
        l_b,
        l_reg,
        l_aux: l_aux / labels.len() as f64,
        min_cell_mass: masses.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

pub fn cell_masses(labels: &[usize], k: usize) -> Vec<f64> {
    let mut m = vec![0.0; k];
    for &l in labels {
        m[l] += 1.0;
    }
    m.iter().map(|c| c / labels.len().max(1) as f64).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionDiagnostics {
    /// Batches in which at least one cell-arm pair was left out.
    pub batches_with_excluded_pairs: usize,
    pub excluded_pairs: usize,
    /// Batches in which a relaxed cell mass fell below the floor.
    pub mass_clamp_events: usize,
    pub batches: usize,
}

#[derive(Clone, Debug)]
pub struct PartitionFit {
    pub net: PartitionNet,
    pub config: PartitionConfig,
    pub log: TrainLog,
    pub diagnostics: PartitionDiagnostics,
    pub validation: HardLosses,
}

impl PartitionFit {
    /// Validation `l_b + lambda * l_reg` with hard assignments; used to pick
    /// among restarts and `gamma` trials.
    pub fn selection_score(&self) -> f64 {
        self.validation.l_b + self.config.lambda * self.validation.l_reg
    }
}

/// Per-epoch training log in CSV form.
pub fn write_train_log<W: Write>(log: &TrainLog, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "epoch",
        "l_b",
        "l_reg",
        "l_aux",
        "total",
        "val_total",
        "min_cell_mass",
    ])?;
    for e in &log.epochs {
        let part = |i: usize| e.train_parts.get(i).copied().unwrap_or(f64::NAN);
        let min_mass = e.val_parts.get(3).copied().unwrap_or(f64::NAN);
        w.write_record([
            e.epoch.to_string(),
            format!("{:.10e}", part(0)),
            format!("{:.10e}", part(1)),
            format!("{:.10e}", part(2)),
            format!("{:.10e}", e.train_loss),
            format!("{:.10e}", e.val_loss),
            format!("{:.10e}", min_mass),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fits a partition network on the training split, early-stopping on the
/// hard-assignment composite loss of the validation split.
pub fn train_partition(
    train_data: &StageTwoData,
    val_grid: &NuisanceGrid,
    val_z: &Tensor,
    range: OutcomeRange,
    cfg: &PartitionConfig,
    seed: u64,
) -> Result<PartitionFit> {
    cfg.validate()?;
    let mut best: Option<PartitionFit> = None;
    for r in 0..cfg.restarts {
        let fit = train_once(train_data, val_grid, val_z, range, cfg, seed, r as u64)?;
        if best
            .as_ref()
            .is_none_or(|b| fit.selection_score() < b.selection_score())
        {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn train_once(
    train_data: &StageTwoData,
    val_grid: &NuisanceGrid,
    val_z: &Tensor,
    range: OutcomeRange,
    cfg: &PartitionConfig,
    seed: u64,
    restart: u64,
) -> Result<PartitionFit> {
    let stream = 100 + cfg.k as u64 + 1000 * restart;
    let mut net = PartitionNet::new(
        PartitionSpec::new(train_data.z.cols(), cfg.k),
        &mut substream(seed, Stream::Init, stream),
    )?;
    let mut shuffle = substream(seed, Stream::Shuffle, stream);
    let mut gumbel = substream(seed, Stream::Gumbel, stream);
    let arch = net.clone();
    let mut diag = PartitionDiagnostics::default();
    let log = train(
        &mut net.params,
        &cfg.train,
        train_data.len(),
        &mut shuffle,
        |tape, vars, batch| {
            let noise = gumbel_noise(&mut gumbel, batch.len(), cfg.k);
            let noise = cfg.gumbel.then_some(&noise);
            let (loss, parts) =
                composite_loss(tape, &arch, vars, train_data, batch, noise, cfg, range)?;
            diag.batches += 1;
            if parts.excluded_pairs > 0 {
                diag.batches_with_excluded_pairs += 1;
                diag.excluded_pairs += parts.excluded_pairs;
            }
            diag.mass_clamp_events += usize::from(parts.mass_clamped);
            Ok((loss, vec![parts.l_b, parts.l_reg, parts.l_aux]))
        },
        |params| {
            let mut probe = arch.clone();
            probe.params.load_from(params)?;
            let h = hard_losses(&probe, val_grid, val_z, range)?;
            Ok((h.total(cfg), vec![h.l_b, h.l_reg, h.l_aux, h.min_cell_mass]))
        },
    )?;
    let validation = hard_losses(&net, val_grid, val_z, range)?;
    Ok(PartitionFit {
        net,
        config: *cfg,
        log,
        diagnostics: diag,
        validation,
    })
}

/// Random search over `gamma` in `[0, 1]`: the default plus `trials` uniform
/// draws, keeping the fit with the lowest validation `L_b + lambda L_reg`.
pub fn tune_gamma(
    train_data: &StageTwoData,
    val_grid: &NuisanceGrid,
    val_z: &Tensor,
    range: OutcomeRange,
    cfg: &PartitionConfig,
    trials: usize,
    seed: u64,
) -> Result<PartitionFit> {
    let mut rng = substream(seed, Stream::Search, cfg.k as u64);
    let mut gammas = vec![cfg.gamma];
    gammas.extend((0..trials).map(|_| rng.random_range(0.0..=1.0)));
    let mut best: Option<(f64, PartitionFit)> = None;
    for g in gammas {
        let c = PartitionConfig { gamma: g, ..*cfg };
        let fit = train_partition(train_data, val_grid, val_z, range, &c, seed)?;
        let score = fit.selection_score();
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, fit));
        }
    }
    Ok(best.expect("at least one trial").1)
}

/// Everything needed to evaluate a fitted partition on a split.
pub struct SplitGrids {
    pub train: StageTwoData,
    pub val_grid: NuisanceGrid,
    pub val_z: Tensor,
}

impl SplitGrids {
    pub fn new(set: &NuisanceSet, split: &DatasetSplit) -> Result<Self> {
        let val_x: Vec<f64> = split.val.iter().map(|s| s.x).collect();
        Ok(Self {
            train: StageTwoData::new(set, &split.train)?,
            val_grid: NuisanceGrid::from_set(set, &val_x, &split.val)?,
            val_z: instrument_matrix(&split.val)?,
        })
    }
}

/// Test-time bounds: hard cells of the aggregation sample, evaluated at the
/// query points `x`.
pub fn partition_bounds(
    net: &PartitionNet,
    set: &NuisanceSet,
    x: &[f64],
    aggregation: &[LabeledSample],
    range: OutcomeRange,
) -> Result<(BoundSet, Vec<f64>)> {
    let z = instrument_matrix(aggregation)?;
    let labels = net.assign(&z)?;
    let grid = NuisanceGrid::from_set(set, x, aggregation)?;
    let w = hard_weights(&labels, net.spec.k)?;
    let bounds = BoundSet::from_representation(&representation_nuisance(&grid, &w)?, range)?;
    Ok((bounds, cell_masses(&labels, net.spec.k)))
}

/// A small random stage-two instance with `n` units (both arms present)
/// and a freshly initialized partition net over a scalar instrument.
pub fn gradient_check_instance(
    n: usize,
    k: usize,
    seed: u64,
) -> Result<(PartitionNet, StageTwoData)> {
    let mut rng = substream(seed, Stream::Init, 0);
    let mut draw = |lo: f64, hi: f64, len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.random_range(lo..hi)).collect()
    };
    let z = draw(-1.0, 1.0, n);
    let grid = NuisanceGrid {
        x: draw(-1.0, 1.0, n),
        mu1: Tensor::matrix(n, n, draw(-0.5, 1.0, n * n))?,
        mu0: Tensor::matrix(n, n, draw(-0.5, 1.0, n * n))?,
        pi: Tensor::matrix(n, n, draw(0.1, 0.9, n * n))?,
        eta: draw(0.2, 0.8, n),
        a: (0..n).map(|j| j % 2 == 0).collect(),
    };
    let data = StageTwoData::from_grid(&grid, Tensor::column(z))?;
    let net = PartitionNet::new(
        PartitionSpec::new(1, k),
        &mut substream(seed, Stream::Init, 1),
    )?;
    Ok((net, data))
}

/// Largest relative finite-difference error of the composite-loss gradient
/// over all partition-net parameters, using every unit as one batch and
/// noise-free soft assignments (the straight-through forward pass is
/// piecewise constant and has no useful finite differences).
pub fn composite_loss_gradient_error(
    net: &PartitionNet,
    data: &StageTwoData,
    cfg: &PartitionConfig,
    range: OutcomeRange,
    step: f64,
) -> Result<f64> {
    let batch: Vec<usize> = (0..data.len()).collect();
    let cfg = PartitionConfig {
        gumbel: false,
        ..*cfg
    };
    let mut worst = 0.0f64;
    for idx in 0..net.params.len() {
        let f = |tape: &mut Tape, x: Var| -> std::result::Result<Var, AutodiffError> {
            let vars = net
                .params
                .iter()
                .enumerate()
                .map(|(i, (_, v))| {
                    if i == idx {
                        Ok(x)
                    } else {
                        tape.constant(v.clone())
                    }
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            composite_loss(tape, net, &vars, data, &batch, None, &cfg, range)
                .map(|(loss, _)| loss)
                .map_err(|e| match e {
                    Error::Autodiff(e) => e,
                    other => AutodiffError::InvalidArgument {
                        op: "composite_loss",
                        reason: other.to_string(),
                    },
                })
        };
        worst = worst.max(finite_diff_check(f, net.params.get(idx), step)?);
    }
    Ok(worst)
}

const CHECKPOINT_KIND: &str = "partition";

pub fn save_partition(net: &PartitionNet, cfg: &PartitionConfig, path: &Path) -> Result<()> {
    let meta = serde_json::json!({ "spec": net.spec, "config": cfg });
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(file, CHECKPOINT_KIND, &meta, &net.params)
}

pub fn load_partition(path: &Path) -> Result<(PartitionNet, PartitionConfig)> {
    let ck = read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))?;
    if ck.kind != CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!(
            "expected a {CHECKPOINT_KIND} checkpoint, found `{}`",
            ck.kind
        )));
    }
    let spec: PartitionSpec = serde_json::from_value(ck.meta["spec"].clone())?;
    let cfg: PartitionConfig = serde_json::from_value(ck.meta["config"].clone())?;
    let mut net = PartitionNet::new(spec, &mut substream(0, Stream::Init, 0))?;
    net.params.load_from(&ck.params)?;
    Ok((net, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::bounds_for_weights;

    fn range() -> OutcomeRange {
        OutcomeRange::new(-0.6, 1.4).unwrap()
    }

    fn toy(n: usize, seed: u64) -> (NuisanceGrid, StageTwoData) {
        let mut rng = substream(seed, Stream::Init, 7);
        let mut draw = |lo: f64, hi: f64, len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.random_range(lo..hi)).collect()
        };
        let z = draw(-1.0, 1.0, n);
        let grid = NuisanceGrid {
            x: draw(-1.0, 1.0, n),
            mu1: Tensor::matrix(n, n, draw(-0.5, 1.0, n * n)).unwrap(),
            mu0: Tensor::matrix(n, n, draw(-0.5, 1.0, n * n)).unwrap(),
            pi: Tensor::matrix(n, n, draw(0.05, 0.95, n * n)).unwrap(),
            eta: draw(0.1, 0.9, n),
            a: (0..n).map(|j| j % 3 != 0).collect(),
        };
        let data = StageTwoData::from_grid(&grid, Tensor::column(z)).unwrap();
        (grid, data)
    }

    fn tape_width(data: &StageTwoData, w: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let wv = tape.constant(w.clone()).unwrap();
        let batch: Vec<usize> = (0..data.len()).collect();
        let (l, _) = width_loss(&mut tape, wv, data, &batch, range()).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn width_loss_matches_the_bound_engine_for_hard_weights() {
        let (grid, data) = toy(12, 1);
        let labels: Vec<usize> = (0..12).map(|j| (j * 7 + 3) % 3).collect();
        let w = hard_weights(&labels, 3).unwrap();
        let engine = bounds_for_weights(&grid, &w, range()).unwrap();
        let mean = engine.rows.iter().map(|r| r.bound.width()).sum::<f64>() / 12.0;
        assert!((tape_width(&data, &w) - mean).abs() < 1e-12);
    }

    #[test]
    fn single_cell_width_is_the_outcome_range() {
        let (_, data) = toy(9, 2);
        let w = hard_weights(&[0; 9], 1).unwrap();
        assert!((tape_width(&data, &w) - range().width()).abs() < 1e-12);
    }

    fn penalty(masses: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let w = tape
            .constant(Tensor::matrix(1, masses.len(), masses.to_vec()).unwrap())
            .unwrap();
        let (v, _) = mass_penalty(&mut tape, w).unwrap();
        tape.value(v).item()
    }

    #[test]
    fn mass_penalty_examples() {
        assert!((penalty(&[0.5, 0.5]) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((penalty(&[1.0 / 3.0; 3]) - 3.0 * 3f64.ln()).abs() < 1e-12);
        let skewed = -(0.99f64.ln() + 0.01f64.ln());
        assert!((penalty(&[0.99, 0.01]) - skewed).abs() < 1e-12);
        assert!((skewed - 4.6152).abs() < 1e-4);
        // an empty cell is floored, not infinite
        assert!((penalty(&[1.0, 0.0]) + MASS_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn aux_loss_examples() {
        let mut tape = Tape::new();
        let flat = tape
            .constant(Tensor::matrix(4, 2, vec![0.3; 8]).unwrap())
            .unwrap();
        let v = aux_loss(&mut tape, flat, &[0, 1, 1, 0]).unwrap();
        assert!((tape.value(v).item() - 2f64.ln()).abs() < 1e-12);
        let sharp = tape
            .constant(Tensor::matrix(2, 2, vec![40.0, -40.0, -40.0, 40.0]).unwrap())
            .unwrap();
        let v = aux_loss(&mut tape, sharp, &[0, 1]).unwrap();
        assert!(tape.value(v).item() < 1e-30);
    }

    #[test]
    fn losses_are_invariant_to_relabeling_cells() {
        let (_, data) = toy(10, 3);
        let mut rng = substream(5, Stream::Init, 0);
        let raw: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let norm = |v: &[f64]| -> Vec<f64> {
            v.chunks(3)
                .flat_map(|r| {
                    let s: f64 = r.iter().sum();
                    r.iter().map(move |x| x / s).collect::<Vec<_>>()
                })
                .collect()
        };
        let w = Tensor::matrix(10, 3, norm(&raw)).unwrap();
        let perm = [2, 0, 1];
        let permuted: Vec<f64> = w
            .data()
            .chunks(3)
            .flat_map(|r| perm.iter().map(|&c| r[c]).collect::<Vec<_>>())
            .collect();
        let wp = Tensor::matrix(10, 3, permuted).unwrap();
        assert!((tape_width(&data, &w) - tape_width(&data, &wp)).abs() < 1e-12);
        let masses = |t: &Tensor| -> Vec<f64> {
            (0..3)
                .map(|l| (0..10).map(|j| t.get(j, l)).sum::<f64>() / 10.0)
                .collect()
        };
        assert!((penalty(&masses(&w)) - penalty(&masses(&wp))).abs() < 1e-12);
    }

    #[test]
    fn composite_loss_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let (net, data) = gradient_check_instance(16, 2, seed).unwrap();
            let err =
                composite_loss_gradient_error(&net, &data, &PartitionConfig::new(2), range(), 1e-6)
                    .unwrap();
            assert!(err < 1e-3, "seed {seed}: {err}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(PartitionConfig::new(2).validate().is_ok());
        assert!(PartitionConfig::new(0).validate().is_err());
        let mut c = PartitionConfig::new(200);
        assert!(c.validate().is_err());
        c.k = 2;
        c.restarts = 0;
        assert!(c.validate().is_err());
    }
}
