//! Closed-form bounds on the CATE given a partition of the instrument space.
//!
//! For cells `l, m` of a partition with cell propensities `pi_l` and
//! arm-specific outcome means `mu1_l`, `mu0_m`, and outcome support `[s1, s2]`:
//!
//! ```text
//! b+_{l,m} = pi_l mu1_l + (1 - pi_l) s2 - (1 - pi_m) mu0_m - pi_m s1
//! b-_{l,m} = pi_l mu1_l + (1 - pi_l) s1 - (1 - pi_m) mu0_m - pi_m s2
//! ```
//!
//! The bounds are `min b+` and `max b-` over all usable pairs.

use std::io::Write;

use catebounds_autodiff::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledSample, OutcomeRange};
use crate::nuisance::{instrument_matrix, NuisanceSet};
use crate::population::{mixture_density, trapezoid_rule, NuisanceFns};
use crate::{Error, Result};

/// Per-cell nuisances at one covariate value. An arm mean is `None` when no
/// unit of that arm falls in the cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellValues {
    pub pi: f64,
    pub mu1: Option<f64>,
    pub mu0: Option<f64>,
}

impl CellValues {
    pub fn full(pi: f64, mu1: f64, mu0: f64) -> Self {
        Self {
            pi,
            mu1: Some(mu1),
            mu0: Some(mu0),
        }
    }
}

pub fn upper_pair(l: &CellValues, m: &CellValues, mu1: f64, mu0: f64, r: OutcomeRange) -> f64 {
    l.pi * mu1 + (1.0 - l.pi) * r.s2 - (1.0 - m.pi) * mu0 - m.pi * r.s1
}

pub fn lower_pair(l: &CellValues, m: &CellValues, mu1: f64, mu0: f64, r: OutcomeRange) -> f64 {
    l.pi * mu1 + (1.0 - l.pi) * r.s1 - (1.0 - m.pi) * mu0 - m.pi * r.s2
}

/// `k x k` matrices of pairwise bounds, row `l`, column `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseBounds {
    pub k: usize,
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
    pub valid: Vec<bool>,
}

pub fn pairwise_bounds(cells: &[CellValues], range: OutcomeRange) -> PairwiseBounds {
    let k = cells.len();
    let mut upper = vec![f64::NAN; k * k];
    let mut lower = vec![f64::NAN; k * k];
    let mut valid = vec![false; k * k];
    for (l, cl) in cells.iter().enumerate() {
        for (m, cm) in cells.iter().enumerate() {
            if let (Some(mu1), Some(mu0)) = (cl.mu1, cm.mu0) {
                upper[l * k + m] = upper_pair(cl, cm, mu1, mu0, range);
                lower[l * k + m] = lower_pair(cl, cm, mu1, mu0, range);
                valid[l * k + m] = true;
            }
        }
    }
    PairwiseBounds {
        k,
        upper,
        lower,
        valid,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub lower: f64,
    pub upper: f64,
    /// Pair attaining the upper bound.
    pub argmin: (usize, usize),
    /// Pair attaining the lower bound.
    pub argmax: (usize, usize),
}

impl BoundValue {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Tightest bounds over usable pairs; ties go to the lexicographically
/// smallest `(l, m)`.
pub fn tightest_bounds(cells: &[CellValues], range: OutcomeRange) -> Result<BoundValue> {
    let pw = pairwise_bounds(cells, range);
    let k = pw.k;
    let mut best: Option<BoundValue> = None;
    for l in 0..k {
        for m in 0..k {
            let i = l * k + m;
            if !pw.valid[i] {
                continue;
            }
            let b = best.get_or_insert(BoundValue {
                lower: pw.lower[i],
                upper: pw.upper[i],
                argmin: (l, m),
                argmax: (l, m),
            });
            if pw.upper[i] < b.upper {
                b.upper = pw.upper[i];
                b.argmin = (l, m);
            }
            if pw.lower[i] > b.lower {
                b.lower = pw.lower[i];
                b.argmax = (l, m);
            }
        }
    }
    best.ok_or(Error::NoValidPair)
}

/// Bounds when the instrument itself takes finitely many values and each
/// value is its own cell.
pub fn discrete_instrument_bounds(
    pi: &[f64],
    mu1: &[f64],
    mu0: &[f64],
    range: OutcomeRange,
) -> Result<BoundValue> {
    if pi.len() != mu1.len() || pi.len() != mu0.len() {
        return Err(Error::LengthMismatch {
            what: "instrument levels",
            left: pi.len(),
            right: mu1.len().min(mu0.len()),
        });
    }
    let cells: Vec<CellValues> = (0..pi.len())
        .map(|i| CellValues::full(pi[i], mu1[i], mu0[i]))
        .collect();
    tightest_bounds(&cells, range)
}

/// Nuisance predictions at covariate grid points `x_i` crossed with the
/// instruments `z_j` of an aggregation sample.
#[derive(Clone, Debug)]
pub struct NuisanceGrid {
    pub x: Vec<f64>,
    /// `[n_x, n_z]` predictions `mu^1(x_i, z_j)`.
    pub mu1: Tensor,
    pub mu0: Tensor,
    pub pi: Tensor,
    /// `eta(z_j)`.
    pub eta: Vec<f64>,
    /// Observed treatment of unit `j`.
    pub a: Vec<bool>,
}

impl NuisanceGrid {
    pub fn nz(&self) -> usize {
        self.a.len()
    }

    /// Grid from fitted networks.
    pub fn from_set(set: &NuisanceSet, x: &[f64], samples: &[LabeledSample]) -> Result<Self> {
        let z = instrument_matrix(samples)?;
        let mut mu = set.mu.cross(x, &z)?;
        let pi = set.pi.cross(x, &z)?.remove(0);
        let mu1 = mu.remove(1);
        let mu0 = mu.remove(0);
        Ok(Self {
            x: x.to_vec(),
            mu1,
            mu0,
            pi,
            eta: set.eta.predict(&z)?,
            a: samples.iter().map(|s| s.a).collect(),
        })
    }

    /// Grid from arbitrary nuisance functions.
    pub fn from_fns(fns: &dyn NuisanceFns, x: &[f64], samples: &[LabeledSample]) -> Result<Self> {
        let nz = samples.len();
        let rows: Vec<[Vec<f64>; 3]> = x
            .par_iter()
            .map(|&xi| {
                let mut mu1 = Vec::with_capacity(nz);
                let mut mu0 = Vec::with_capacity(nz);
                let mut pi = Vec::with_capacity(nz);
                for s in samples {
                    mu1.push(fns.mu(xi, &s.z, true));
                    mu0.push(fns.mu(xi, &s.z, false));
                    pi.push(fns.pi(xi, &s.z));
                }
                [mu1, mu0, pi]
            })
            .collect();
        let stack = |which: usize| {
            let data: Vec<f64> = rows.iter().flat_map(|r| r[which].iter().copied()).collect();
            Tensor::matrix(x.len(), nz, data)
        };
        Ok(Self {
            x: x.to_vec(),
            mu1: stack(0)?,
            mu0: stack(1)?,
            pi: stack(2)?,
            eta: samples.par_iter().map(|s| fns.eta(&s.z)).collect(),
            a: samples.iter().map(|s| s.a).collect(),
        })
    }
}

/// Assignment weights `[n_z, k]`; rows of a hard partition are one-hot.
pub fn hard_weights(assign: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; assign.len() * k];
    for (j, &c) in assign.iter().enumerate() {
        if c >= k {
            return Err(Error::InvalidInput(format!(
                "cell {c} out of range for k = {k}"
            )));
        }
        data[j * k + c] = 1.0;
    }
    Ok(Tensor::matrix(assign.len(), k, data)?)
}

fn check_weights(grid: &NuisanceGrid, w: &Tensor) -> Result<usize> {
    if w.rows() != grid.nz() {
        return Err(Error::LengthMismatch {
            what: "assignment rows",
            left: w.rows(),
            right: grid.nz(),
        });
    }
    Ok(w.cols())
}

/// Plug-in arm mean of each cell at grid point `i`:
/// `sum_j mu^a(x, z_j) w_jl eta_a(z_j) / sum_j w_jl 1{a_j = a}`, `None` for
/// cells with no unit of arm `a`.
pub fn cell_mu(grid: &NuisanceGrid, w: &Tensor, i: usize, arm: bool) -> Vec<Option<f64>> {
    let k = w.cols();
    let mu = if arm { &grid.mu1 } else { &grid.mu0 };
    let mut num = vec![0.0; k];
    let mut den = vec![0.0; k];
    for j in 0..grid.nz() {
        let ea = if arm { grid.eta[j] } else { 1.0 - grid.eta[j] };
        let g = mu.get(i, j) * ea;
        let in_arm = grid.a[j] == arm;
        for (l, wl) in w.row_slice(j).iter().enumerate() {
            if *wl != 0.0 {
                num[l] += g * wl;
                if in_arm {
                    den[l] += wl;
                }
            }
        }
    }
    num.iter()
        .zip(&den)
        .map(|(n, d)| (*d > 0.0).then(|| n / d))
        .collect()
}

/// Plug-in cell propensity `sum_j pi(x, z_j) w_jl / sum_j w_jl`.
pub fn cell_pi(grid: &NuisanceGrid, w: &Tensor, i: usize) -> Vec<Option<f64>> {
    let k = w.cols();
    let mut num = vec![0.0; k];
    let mut den = vec![0.0; k];
    for j in 0..grid.nz() {
        let p = grid.pi.get(i, j);
        for (l, wl) in w.row_slice(j).iter().enumerate() {
            num[l] += p * wl;
            den[l] += wl;
        }
    }
    num.iter()
        .zip(&den)
        .map(|(n, d)| (*d > 0.0).then(|| n / d))
        .collect()
}

/// Strict arm-mean aggregation: fails on the first empty cell-arm pair.
pub fn aggregate_mu_phi(grid: &NuisanceGrid, w: &Tensor, arm: bool) -> Result<Vec<Vec<f64>>> {
    check_weights(grid, w)?;
    (0..grid.x.len())
        .map(|i| {
            cell_mu(grid, w, i, arm)
                .into_iter()
                .enumerate()
                .map(|(cell, v)| {
                    v.ok_or(Error::EmptyCellArm {
                        cell,
                        arm: arm as u8,
                    })
                })
                .collect()
        })
        .collect()
}

/// Strict cell-propensity aggregation: fails on the first empty cell.
pub fn aggregate_pi_phi(grid: &NuisanceGrid, w: &Tensor) -> Result<Vec<Vec<f64>>> {
    check_weights(grid, w)?;
    (0..grid.x.len())
        .map(|i| {
            cell_pi(grid, w, i)
                .into_iter()
                .enumerate()
                .map(|(cell, v)| v.ok_or(Error::EmptyCell { cell }))
                .collect()
        })
        .collect()
}

/// Cell-level nuisances on the covariate grid, with the cells or cell-arm
/// pairs that had to be left out.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationNuisance {
    pub x: Vec<f64>,
    pub cells: Vec<Vec<CellValues>>,
    pub empty_cells: Vec<usize>,
    pub empty_cell_arms: Vec<(usize, u8)>,
}

pub fn representation_nuisance(grid: &NuisanceGrid, w: &Tensor) -> Result<RepresentationNuisance> {
    let k = check_weights(grid, w)?;
    let mass: Vec<f64> = (0..k)
        .map(|l| (0..grid.nz()).map(|j| w.get(j, l)).sum())
        .collect();
    let mut empty_cell_arms = Vec::new();
    for l in 0..k {
        for arm in [false, true] {
            let has = (0..grid.nz()).any(|j| grid.a[j] == arm && w.get(j, l) > 0.0);
            if !has {
                empty_cell_arms.push((l, arm as u8));
            }
        }
    }
    let cells = (0..grid.x.len())
        .into_par_iter()
        .map(|i| {
            let pi = cell_pi(grid, w, i);
            let mu1 = cell_mu(grid, w, i, true);
            let mu0 = cell_mu(grid, w, i, false);
            (0..k)
                .filter_map(|l| {
                    // empty cells are dropped
                    pi[l].map(|p| CellValues {
                        pi: p,
                        mu1: mu1[l],
                        mu0: mu0[l],
                    })
                })
                .collect()
        })
        .collect();
    Ok(RepresentationNuisance {
        x: grid.x.clone(),
        cells,
        empty_cells: (0..k).filter(|&l| mass[l] <= 0.0).collect(),
        empty_cell_arms,
    })
}

/// One row of a bound table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub x: f64,
    #[serde(flatten)]
    pub bound: BoundValue,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundSet {
    pub rows: Vec<BoundRow>,
}

impl BoundSet {
    pub fn from_representation(rep: &RepresentationNuisance, range: OutcomeRange) -> Result<Self> {
        let rows = rep
            .x
            .iter()
            .zip(&rep.cells)
            .map(|(&x, cells)| {
                Ok(BoundRow {
                    x,
                    bound: tightest_bounds(cells, range)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    pub fn lower(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.bound.lower).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.bound.upper).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "x", "lower", "upper", "argmin_l", "argmin_m", "argmax_l", "argmax_m",
        ])?;
        for r in &self.rows {
            let b = &r.bound;
            w.write_record([
                format!("{:.16e}", r.x),
                format!("{:.16e}", b.lower),
                format!("{:.16e}", b.upper),
                b.argmin.0.to_string(),
                b.argmin.1.to_string(),
                b.argmax.0.to_string(),
                b.argmax.1.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let f = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("bad bound field {i}")))
            };
            let u = |i: usize| -> Result<usize> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("bad bound field {i}")))
            };
            rows.push(BoundRow {
                x: f(0)?,
                bound: BoundValue {
                    lower: f(1)?,
                    upper: f(2)?,
                    argmin: (u(3)?, u(4)?),
                    argmax: (u(5)?, u(6)?),
                },
            });
        }
        Ok(Self { rows })
    }
}

/// Bounds on the grid of `grid` for assignment weights `w`.
pub fn bounds_for_weights(
    grid: &NuisanceGrid,
    w: &Tensor,
    range: OutcomeRange,
) -> Result<BoundSet> {
    BoundSet::from_representation(&representation_nuisance(grid, w)?, range)
}

/// Instrument law and partition for exact population bounds.
pub enum PopulationPartition<'a> {
    /// Instrument with the dataset-1/2 density on `[-1, 1]`, split at the
    /// sorted `cuts`; interval `i` belongs to cell `cells[i]`.
    Intervals { cuts: Vec<f64>, cells: Vec<usize> },
    /// Uniform law over the bit patterns of the first five instrument bits
    /// (remaining bits zero), mapped to cells by `cell`.
    Bits {
        dim: usize,
        cell: &'a (dyn Fn(&[f64]) -> usize + Sync),
    },
}

impl PopulationPartition<'_> {
    fn k(&self) -> usize {
        match self {
            Self::Intervals { cells, .. } => cells.iter().max().map_or(0, |m| m + 1),
            Self::Bits { dim, cell } => {
                let mut k = 0;
                for p in 0..32u32 {
                    k = k.max(cell(&bit_pattern(p, *dim)) + 1);
                }
                k
            }
        }
    }

    /// Weighted instrument nodes: `(z, weight, cell)` with weights summing
    /// to one.
    fn nodes(&self, per_interval: usize) -> Vec<(Vec<f64>, f64, usize)> {
        match self {
            Self::Intervals { cuts, cells } => {
                let mut edges = vec![-1.0];
                edges.extend(cuts.iter().copied());
                edges.push(1.0);
                let mut out = Vec::new();
                for (i, win) in edges.windows(2).enumerate() {
                    if win[1] <= win[0] {
                        continue;
                    }
                    let (zs, ws) = trapezoid_rule(win[0], win[1], per_interval);
                    for (z, w) in zs.into_iter().zip(ws) {
                        out.push((vec![z], w * mixture_density(z), cells[i]));
                    }
                }
                out
            }
            Self::Bits { dim, cell } => (0..32u32)
                .map(|p| {
                    let z = bit_pattern(p, *dim);
                    let c = cell(&z);
                    (z, 1.0 / 32.0, c)
                })
                .collect(),
        }
    }
}

fn bit_pattern(p: u32, dim: usize) -> Vec<f64> {
    let mut z = vec![0.0; dim];
    for (b, v) in z.iter_mut().enumerate().take(5) {
        *v = f64::from((p >> b) & 1);
    }
    z
}

/// Population cell nuisances at `x`:
/// `mu_phi^a = int_cell mu^a eta_a p / int_cell eta_a p` and
/// `pi_phi = int_cell pi p / int_cell p`.
fn population_cells(
    fns: &dyn NuisanceFns,
    nodes: &[(Vec<f64>, f64, usize)],
    eta: &[f64],
    k: usize,
    x: f64,
) -> Vec<CellValues> {
    let mut mass = vec![0.0; k];
    let mut pi = vec![0.0; k];
    let mut num = [vec![0.0; k], vec![0.0; k]];
    let mut den = [vec![0.0; k], vec![0.0; k]];
    for ((z, w, c), &e) in nodes.iter().zip(eta) {
        if *w == 0.0 {
            continue;
        }
        mass[*c] += w;
        pi[*c] += w * fns.pi(x, z);
        for (arm, ea) in [(0, 1.0 - e), (1, e)] {
            num[arm][*c] += w * ea * fns.mu(x, z, arm == 1);
            den[arm][*c] += w * ea;
        }
    }
    (0..k)
        .filter(|&l| mass[l] > 0.0)
        .map(|l| CellValues {
            pi: pi[l] / mass[l],
            mu1: (den[1][l] > 0.0).then(|| num[1][l] / den[1][l]),
            mu0: (den[0][l] > 0.0).then(|| num[0][l] / den[0][l]),
        })
        .collect()
}

pub const ORACLE_NODES: usize = 2001;
pub const ORACLE_TOLERANCE: f64 = 1e-4;

/// Population cell nuisances on a covariate grid.
pub fn population_representation(
    fns: &dyn NuisanceFns,
    partition: &PopulationPartition,
    x: &[f64],
    per_interval: usize,
) -> Vec<Vec<CellValues>> {
    let k = partition.k();
    let nodes = partition.nodes(per_interval);
    let eta: Vec<f64> = nodes.par_iter().map(|(z, _, _)| fns.eta(z)).collect();
    x.par_iter()
        .map(|&xi| population_cells(fns, &nodes, &eta, k, xi))
        .collect()
}

/// Exact bounds of a fixed partition, by quadrature over the instrument.
/// The node count is doubled once; a relative change above
/// [`ORACLE_TOLERANCE`] (relative to `max(|b|, 1e-2)`) is reported as an
/// error.
pub fn population_bounds(
    fns: &dyn NuisanceFns,
    partition: &PopulationPartition,
    x: &[f64],
    range: OutcomeRange,
) -> Result<BoundSet> {
    let eval = |nodes: usize| -> Result<BoundSet> {
        let rep = RepresentationNuisance {
            x: x.to_vec(),
            cells: population_representation(fns, partition, x, nodes),
            empty_cells: vec![],
            empty_cell_arms: vec![],
        };
        BoundSet::from_representation(&rep, range)
    };
    let coarse = eval(ORACLE_NODES)?;
    if matches!(partition, PopulationPartition::Bits { .. }) {
        return Ok(coarse);
    }
    let fine = eval(2 * ORACLE_NODES - 1)?;
    let mut change: f64 = 0.0;
    for (a, b) in coarse.rows.iter().zip(&fine.rows) {
        for (u, v) in [
            (a.bound.lower, b.bound.lower),
            (a.bound.upper, b.bound.upper),
        ] {
            change = change.max((u - v).abs() / v.abs().max(1e-2));
        }
    }
    if change > ORACLE_TOLERANCE {
        return Err(Error::Quadrature { change });
    }
    Ok(fine)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn range() -> OutcomeRange {
        OutcomeRange::new(-0.6, 1.4).unwrap()
    }

    #[test]
    fn single_cell_width_is_the_outcome_range() {
        let cells = [CellValues::full(0.37, 0.8, 0.1)];
        let b = tightest_bounds(&cells, range()).unwrap();
        assert!((b.width() - 2.0).abs() < 1e-12);
        assert_eq!(b.argmin, (0, 0));
    }

    #[test]
    fn pairwise_width_identity() {
        let cells = [
            CellValues::full(0.2, 0.5, 0.1),
            CellValues::full(0.9, 0.7, -0.2),
            CellValues::full(0.55, 0.3, 0.0),
        ];
        let r = range();
        let pw = pairwise_bounds(&cells, r);
        for l in 0..3 {
            for m in 0..3 {
                let i = l * 3 + m;
                let expected = ((1.0 - cells[l].pi) + cells[m].pi) * r.width();
                assert!((pw.upper[i] - pw.lower[i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ties_resolve_to_the_smallest_pair() {
        let c = CellValues::full(0.5, 0.2, 0.1);
        let b = tightest_bounds(&[c, c, c], range()).unwrap();
        assert_eq!(b.argmin, (0, 0));
        assert_eq!(b.argmax, (0, 0));
    }

    #[test]
    fn pairs_with_missing_arms_are_skipped() {
        let cells = [
            CellValues {
                pi: 0.1,
                mu1: None,
                mu0: Some(0.0),
            },
            CellValues {
                pi: 0.9,
                mu1: Some(0.4),
                mu0: None,
            },
        ];
        let b = tightest_bounds(&cells, range()).unwrap();
        assert_eq!(b.argmin, (1, 0));
        let none = [CellValues {
            pi: 0.5,
            mu1: None,
            mu0: Some(0.0),
        }];
        assert!(matches!(
            tightest_bounds(&none, range()),
            Err(Error::NoValidPair)
        ));
    }

    fn toy_grid() -> NuisanceGrid {
        // one grid point, four units
        NuisanceGrid {
            x: vec![0.0],
            mu1: Tensor::row(vec![1.0, 2.0, 3.0, 4.0]),
            mu0: Tensor::row(vec![0.5, 0.5, 1.5, 1.5]),
            pi: Tensor::row(vec![0.2, 0.4, 0.6, 0.8]),
            eta: vec![0.5, 0.25, 0.75, 1.0],
            a: vec![true, false, true, true],
        }
    }

    #[test]
    fn plug_in_aggregation_by_hand() {
        let g = toy_grid();
        let w = hard_weights(&[0, 0, 1, 1], 2).unwrap();
        let mu1 = aggregate_mu_phi(&g, &w, true).unwrap();
        // cell 0: (1 * 0.5 + 2 * 0.25) / 1, cell 1: (3 * 0.75 + 4 * 1.0) / 2
        assert!((mu1[0][0] - 1.0).abs() < 1e-15);
        assert!((mu1[0][1] - 3.125).abs() < 1e-15);
        let pi = aggregate_pi_phi(&g, &w).unwrap();
        assert!((pi[0][0] - 0.3).abs() < 1e-15);
        assert!((pi[0][1] - 0.7).abs() < 1e-15);
        assert!(matches!(
            aggregate_mu_phi(&g, &w, false),
            Err(Error::EmptyCellArm { cell: 1, arm: 0 })
        ));
        let rep = representation_nuisance(&g, &w).unwrap();
        assert_eq!(rep.empty_cell_arms, vec![(1, 0)]);
        let w3 = hard_weights(&[0, 0, 1, 1], 3).unwrap();
        assert!(matches!(
            aggregate_pi_phi(&g, &w3),
            Err(Error::EmptyCell { cell: 2 })
        ));
        assert_eq!(
            representation_nuisance(&g, &w3).unwrap().empty_cells,
            vec![2]
        );
    }

    #[test]
    fn bound_csv_round_trip() {
        let set = BoundSet {
            rows: vec![BoundRow {
                x: -0.25,
                bound: BoundValue {
                    lower: -0.1,
                    upper: 1.0 / 3.0,
                    argmin: (1, 0),
                    argmax: (0, 2),
                },
            }],
        };
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x,lower,upper,argmin_l,argmin_m,argmax_l,argmax_m\n"));
        assert_eq!(BoundSet::read_csv(buf.as_slice()).unwrap(), set);
    }
}
