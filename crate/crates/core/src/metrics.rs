//! Evaluation metrics for bound curves and Monte Carlo checks of the plug-in
//! cell estimators.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{discrete_instrument_bounds, tightest_bounds, BoundRow, BoundSet, CellValues};
use crate::data::{outcome_mean, DatasetId, OutcomeRange, D3_RELEVANT_BITS};
use crate::population::{
    d3_level_nuisances, latent_level_probabilities, mixture_density, trapezoid_rule, NuisanceFns,
    TrueNuisances, UniformRule,
};
use crate::rng::{substream, Stream};
use crate::{Error, Result};

fn check_len(what: &'static str, left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::LengthMismatch { what, left, right });
    }
    Ok(())
}

fn check_grid(a: &BoundSet, b: &BoundSet) -> Result<()> {
    check_len("bound grids", a.rows.len(), b.rows.len())?;
    if a.rows.iter().zip(&b.rows).any(|(u, v)| u.x != v.x) {
        return Err(Error::InvalidInput(
            "bound sets are on different grids".into(),
        ));
    }
    Ok(())
}

/// Fraction of points with `lower <= tau <= upper`; crossed bounds never
/// cover.
pub fn coverage(bounds: &BoundSet, tau: &[f64]) -> Result<f64> {
    check_len("bounds and true effects", bounds.rows.len(), tau.len())?;
    if tau.is_empty() {
        return Err(Error::InvalidInput("no evaluation points".into()));
    }
    let hits = bounds
        .rows
        .iter()
        .zip(tau)
        .filter(|(r, t)| r.bound.contains(**t))
        .count();
    Ok(hits as f64 / tau.len() as f64)
}

pub fn mean_width(bounds: &BoundSet) -> Result<f64> {
    if bounds.rows.is_empty() {
        return Err(Error::InvalidInput("no evaluation points".into()));
    }
    let w = bounds.rows.iter().map(|r| r.bound.width()).sum::<f64>() / bounds.rows.len() as f64;
    if !w.is_finite() {
        return Err(Error::InvalidInput("non-finite bound width".into()));
    }
    Ok(w)
}

/// Fraction of points with `lower > upper`.
pub fn crossing_rate(bounds: &BoundSet) -> f64 {
    if bounds.rows.is_empty() {
        return 0.0;
    }
    let n = bounds
        .rows
        .iter()
        .filter(|r| r.bound.lower > r.bound.upper)
        .count();
    n as f64 / bounds.rows.len() as f64
}

/// Mean squared difference between bound curves fitted with different `k`:
/// averaged over unordered pairs of curves, grid points and the two bound
/// sides.
pub fn msd_over_k(sets: &[BoundSet]) -> Result<f64> {
    if sets.len() < 2 {
        return Err(Error::InvalidInput(
            "need bound sets for at least two k".into(),
        ));
    }
    for s in &sets[1..] {
        check_grid(&sets[0], s)?;
    }
    let n = sets[0].rows.len();
    if n == 0 {
        return Err(Error::InvalidInput("no evaluation points".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let sq: f64 = sets[i]
                .rows
                .iter()
                .zip(&sets[j].rows)
                .map(|(a, b)| {
                    let dl = a.bound.lower - b.bound.lower;
                    let du = a.bound.upper - b.bound.upper;
                    0.5 * (dl * dl + du * du)
                })
                .sum();
            total += sq / n as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Confounder nodes of the dataset-3 oracle.
pub const ORACLE_U_NODES: usize = 10_001;
/// Largest change between the oracle at [`ORACLE_U_NODES`] and at half as
/// many nodes before the quadrature counts as unconverged.
pub const ORACLE_CONVERGENCE: f64 = 1e-8;

fn d3_level_bounds(rule: &UniformRule, x: f64, range: OutcomeRange) -> Result<BoundRow> {
    let levels = 0..=D3_RELEVANT_BITS as u32;
    let vals: Vec<(f64, f64, f64)> = levels.map(|rho| d3_level_nuisances(rule, x, rho)).collect();
    let pi: Vec<f64> = vals.iter().map(|v| v.0).collect();
    let mu1: Vec<f64> = vals.iter().map(|v| v.1).collect();
    let mu0: Vec<f64> = vals.iter().map(|v| v.2).collect();
    Ok(BoundRow {
        x,
        bound: discrete_instrument_bounds(&pi, &mu1, &mu0, range)?,
    })
}

/// Bounds of dataset 3 with exact nuisances over the six latent levels, the
/// tightest reference available for that process.
pub fn oracle_bounds_dataset3(x: &[f64], range: OutcomeRange) -> Result<BoundSet> {
    let fine = UniformRule::simpson(ORACLE_U_NODES);
    let coarse = UniformRule::simpson(ORACLE_U_NODES / 2);
    let rows = x
        .par_iter()
        .map(|&xi| {
            let f = d3_level_bounds(&fine, xi, range)?;
            let c = d3_level_bounds(&coarse, xi, range)?;
            let change = (f.bound.lower - c.bound.lower)
                .abs()
                .max((f.bound.upper - c.bound.upper).abs());
            if change > ORACLE_CONVERGENCE {
                return Err(Error::Quadrature { change });
            }
            Ok(f)
        })
        .collect::<Result<_>>()?;
    Ok(BoundSet { rows })
}

/// Size of the fixed covariate grid used for seed-independent oracle output.
pub const GRID_POINTS: usize = 101;

/// [`GRID_POINTS`] equally spaced covariate values on `[-1, 1]`.
pub fn covariate_grid() -> Vec<f64> {
    (0..GRID_POINTS)
        .map(|i| -1.0 + 2.0 * i as f64 / (GRID_POINTS - 1) as f64)
        .collect()
}

/// Smallest interval holding every conditional outcome mean
/// `E[Y | X, U, A]` of a dataset.
pub fn conditional_mean_range(dataset: DatasetId) -> OutcomeRange {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..=10_000 {
        let x = -1.0 + 2.0 * i as f64 / 10_000.0;
        for u in [-1.0, 1.0] {
            for a in [false, true] {
                let m = outcome_mean(dataset, x, u, a);
                lo = lo.min(m);
                hi = hi.max(m);
            }
        }
    }
    OutcomeRange::new(lo, hi).expect("non-degenerate outcome means")
}

/// Dataset-3 oracle on the fixed covariate grid with the conditional-mean
/// range; depends on nothing random.
pub fn oracle_grid_dataset3() -> Result<BoundSet> {
    oracle_bounds_dataset3(&covariate_grid(), conditional_mean_range(DatasetId::Three))
}

/// `(mse, coverage)` of estimated bounds against oracle bounds on the same
/// grid. The error averages both sides; coverage counts points where the
/// estimated interval contains the oracle interval.
pub fn oracle_comparison(estimated: &BoundSet, oracle: &BoundSet) -> Result<(f64, f64)> {
    check_grid(estimated, oracle)?;
    let n = estimated.rows.len();
    if n == 0 {
        return Err(Error::InvalidInput("no evaluation points".into()));
    }
    let (mut mse, mut hits) = (0.0, 0usize);
    for (e, o) in estimated.rows.iter().zip(&oracle.rows) {
        let du = e.bound.upper - o.bound.upper;
        let dl = e.bound.lower - o.bound.lower;
        mse += 0.5 * (du * du + dl * dl);
        if e.bound.lower <= o.bound.lower && o.bound.upper <= e.bound.upper {
            hits += 1;
        }
    }
    Ok((mse / n as f64, hits as f64 / n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ours,
    Naive,
    Oracle,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ours" => Ok(Self::Ours),
            "naive" => Ok(Self::Naive),
            "oracle" => Ok(Self::Oracle),
            _ => Err(Error::InvalidInput(format!("unknown method {s:?}"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ours => "ours",
            Self::Naive => "naive",
            Self::Oracle => "oracle",
        })
    }
}

/// Metrics of one `(dataset, method, k, seed)` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: u8,
    pub method: Method,
    pub k: usize,
    pub seed: u64,
    pub n_points: usize,
    pub coverage: f64,
    pub mean_width: f64,
    pub crossing_rate: f64,
    pub msd_k: Option<f64>,
    pub oracle_mse: Option<f64>,
    pub oracle_coverage: Option<f64>,
    pub min_cell_mass: Option<f64>,
}

impl MetricsReport {
    pub fn new(
        dataset: DatasetId,
        method: Method,
        k: usize,
        seed: u64,
        bounds: &BoundSet,
        tau: &[f64],
    ) -> Result<Self> {
        Ok(Self {
            dataset: dataset.number(),
            method,
            k,
            seed,
            n_points: bounds.rows.len(),
            coverage: coverage(bounds, tau)?,
            mean_width: mean_width(bounds)?,
            crossing_rate: crossing_rate(bounds),
            msd_k: None,
            oracle_mse: None,
            oracle_coverage: None,
            min_cell_mass: None,
        })
    }

    pub fn with_oracle(mut self, bounds: &BoundSet, oracle: &BoundSet) -> Result<Self> {
        let (mse, cov) = oracle_comparison(bounds, oracle)?;
        self.oracle_mse = Some(mse);
        self.oracle_coverage = Some(cov);
        Ok(self)
    }

    /// Aligned `name value` lines.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        let rows = [
            ("dataset", self.dataset.to_string()),
            ("method", self.method.to_string()),
            ("k", self.k.to_string()),
            ("seed", self.seed.to_string()),
            ("n_points", self.n_points.to_string()),
            ("coverage", format!("{:.6}", self.coverage)),
            ("mean_width", format!("{:.6}", self.mean_width)),
            ("crossing_rate", format!("{:.6}", self.crossing_rate)),
            ("msd_k", opt(self.msd_k)),
            ("oracle_mse", opt(self.oracle_mse)),
            ("oracle_coverage", opt(self.oracle_coverage)),
            ("min_cell_mass", opt(self.min_cell_mass)),
        ];
        rows.iter().map(|(k, v)| format!("{k:<16} {v}\n")).collect()
    }
}

/// A fixed finite instrument law with fixed nuisance values at one covariate
/// value `x` and a fixed hard partition of its atoms. Atom `j` has
/// probability `prob[j]`, cell `cell[j]`, and `P(A = 1 | Z = z_j) = eta[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedDesign {
    pub x: f64,
    pub k: usize,
    pub prob: Vec<f64>,
    pub cell: Vec<usize>,
    pub mu1: Vec<f64>,
    pub mu0: Vec<f64>,
    pub pi: Vec<f64>,
    pub eta: Vec<f64>,
}

/// Draws of one Monte Carlo replicate: atom index and treatment.
#[derive(Clone, Debug)]
pub struct DesignSample {
    pub atoms: Vec<usize>,
    pub a: Vec<bool>,
}

impl FixedDesign {
    pub fn validate(&self) -> Result<()> {
        let n = self.prob.len();
        for (what, len) in [
            ("design cells", self.cell.len()),
            ("design mu1", self.mu1.len()),
            ("design mu0", self.mu0.len()),
            ("design pi", self.pi.len()),
            ("design eta", self.eta.len()),
        ] {
            check_len(what, n, len)?;
        }
        let total: f64 = self.prob.iter().sum();
        if n == 0 || (total - 1.0).abs() > 1e-9 || self.prob.iter().any(|p| *p < 0.0) {
            return Err(Error::InvalidInput(
                "atom probabilities must sum to one".into(),
            ));
        }
        if self.cell.iter().any(|c| *c >= self.k) {
            return Err(Error::InvalidInput("atom cell out of range".into()));
        }
        if self.eta.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::InvalidInput("eta must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Dataset 1 or 2 at `x`, with the instrument discretized to `atoms`
    /// equally spaced points weighted by its density.
    pub fn scalar(
        dataset: DatasetId,
        x: f64,
        atoms: usize,
        k: usize,
        cell: impl Fn(f64) -> usize,
    ) -> Result<Self> {
        if dataset == DatasetId::Three {
            return Err(Error::InvalidInput(
                "dataset 3 has a discrete instrument".into(),
            ));
        }
        let truth = TrueNuisances::new(dataset);
        let (nodes, w) = trapezoid_rule(-1.0, 1.0, atoms);
        let mass: Vec<f64> = nodes
            .iter()
            .zip(&w)
            .map(|(z, w)| w * mixture_density(*z))
            .collect();
        let total: f64 = mass.iter().sum();
        let at = |f: &dyn Fn(f64) -> f64| nodes.iter().map(|z| f(*z)).collect::<Vec<_>>();
        let design = Self {
            x,
            k,
            prob: mass.iter().map(|m| m / total).collect(),
            cell: nodes.iter().map(|z| cell(*z)).collect(),
            mu1: at(&|z| truth.mu(x, &[z], true)),
            mu0: at(&|z| truth.mu(x, &[z], false)),
            pi: at(&|z| truth.pi(x, &[z])),
            eta: at(&|z| truth.eta(&[z])),
        };
        design.validate()?;
        Ok(design)
    }

    /// Dataset 3 at `x` with one atom per latent level.
    pub fn latent_levels(x: f64, k: usize, cell: impl Fn(u32) -> usize) -> Result<Self> {
        let truth = TrueNuisances::new(DatasetId::Three);
        let levels: Vec<u32> = (0..=D3_RELEVANT_BITS as u32).collect();
        let design = Self {
            x,
            k,
            prob: latent_level_probabilities(),
            cell: levels.iter().map(|r| cell(*r)).collect(),
            mu1: levels.iter().map(|r| truth.mu_level(x, *r, true)).collect(),
            mu0: levels
                .iter()
                .map(|r| truth.mu_level(x, *r, false))
                .collect(),
            pi: levels.iter().map(|r| truth.pi_level(x, *r)).collect(),
            eta: levels
                .iter()
                .map(|r| {
                    let mut z = vec![0.0; D3_RELEVANT_BITS];
                    z[..*r as usize].fill(1.0);
                    truth.eta(&z)
                })
                .collect(),
        };
        design.validate()?;
        Ok(design)
    }

    /// Same law with every atom in its own cell.
    pub fn finest(&self) -> Self {
        Self {
            k: self.prob.len(),
            cell: (0..self.prob.len()).collect(),
            ..self.clone()
        }
    }

    pub fn cell_masses(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.k];
        for (p, c) in self.prob.iter().zip(&self.cell) {
            m[*c] += p;
        }
        m
    }

    fn eta_arm(&self, j: usize, arm: bool) -> f64 {
        if arm {
            self.eta[j]
        } else {
            1.0 - self.eta[j]
        }
    }

    fn mu_arm(&self, j: usize, arm: bool) -> f64 {
        if arm {
            self.mu1[j]
        } else {
            self.mu0[j]
        }
    }

    /// Cell nuisances from weighted atoms. `arm_weight(j, a)` is the weight of
    /// atom `j` in the arm-`a` denominator; cells without weight are dropped.
    fn cells_from(
        &self,
        weight: &[f64],
        arm_weight: impl Fn(usize, bool) -> f64,
    ) -> Vec<CellValues> {
        let k = self.k;
        let mut mass = vec![0.0; k];
        let mut pi = vec![0.0; k];
        let mut num = [vec![0.0; k], vec![0.0; k]];
        let mut den = [vec![0.0; k], vec![0.0; k]];
        for (j, &w) in weight.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let c = self.cell[j];
            mass[c] += w;
            pi[c] += w * self.pi[j];
            for arm in [false, true] {
                num[arm as usize][c] += w * self.mu_arm(j, arm) * self.eta_arm(j, arm);
                den[arm as usize][c] += arm_weight(j, arm);
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

    /// Population cell nuisances by enumeration of the atoms.
    pub fn population_cells(&self) -> Vec<CellValues> {
        self.cells_from(&self.prob, |j, arm| self.prob[j] * self.eta_arm(j, arm))
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<DesignSample> {
        let alias = WeightedAliasIndex::new(self.prob.clone())
            .map_err(|e| Error::InvalidInput(format!("atom law: {e}")))?;
        let atoms: Vec<usize> = (0..n).map(|_| alias.sample(rng)).collect();
        let a = atoms
            .iter()
            .map(|&j| rng.random::<f64>() < self.eta[j])
            .collect();
        Ok(DesignSample { atoms, a })
    }

    /// Plug-in cell nuisances from one sample: cell means of `pi`, and
    /// `sum mu^a eta_a / #{A = a}` within each cell.
    pub fn estimate_cells(&self, s: &DesignSample) -> Vec<CellValues> {
        let mut count = vec![0.0; self.prob.len()];
        let mut arm_count = [vec![0.0; self.prob.len()], vec![0.0; self.prob.len()]];
        for (&j, &a) in s.atoms.iter().zip(&s.a) {
            count[j] += 1.0;
            arm_count[a as usize][j] += 1.0;
        }
        self.cells_from(&count, |j, arm| arm_count[arm as usize][j])
    }
}

/// Cell moments entering the asymptotic variances of the plug-in cell
/// estimators, with `g(Z) = mu^a(x, Z) eta_a(Z)` and `h(Z) = pi(x, Z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceFormulaInputs {
    /// `P(cell)`.
    pub p: f64,
    /// `P(A = a | cell)`.
    pub q: f64,
    /// `E[g | cell]`.
    pub theta: f64,
    /// `E[g^2 | cell]`.
    pub gamma: f64,
    /// `E[g 1{A = a} | cell]`.
    pub g_treated: f64,
    pub h_mean: f64,
    pub h_var: f64,
}

impl VarianceFormulaInputs {
    pub fn from_design(design: &FixedDesign, cell: usize, arm: bool) -> Result<Self> {
        let (mut p, mut q, mut theta, mut gamma, mut gt, mut h1, mut h2) =
            (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for j in 0..design.prob.len() {
            if design.cell[j] != cell {
                continue;
            }
            let w = design.prob[j];
            let ea = design.eta_arm(j, arm);
            let g = design.mu_arm(j, arm) * ea;
            p += w;
            q += w * ea;
            theta += w * g;
            gamma += w * g * g;
            gt += w * g * ea;
            h1 += w * design.pi[j];
            h2 += w * design.pi[j] * design.pi[j];
        }
        if p <= 0.0 {
            return Err(Error::EmptyCell { cell });
        }
        let (q, theta, gamma, gt, h1, h2) = (q / p, theta / p, gamma / p, gt / p, h1 / p, h2 / p);
        if q <= 0.0 || q >= 1.0 {
            return Err(Error::EmptyCellArm {
                cell,
                arm: arm as u8,
            });
        }
        Ok(Self {
            p,
            q,
            theta,
            gamma,
            g_treated: gt,
            h_mean: h1,
            h_var: (h2 - h1 * h1).max(0.0),
        })
    }

    pub fn c(&self) -> f64 {
        self.q * self.q
    }

    pub fn d(&self) -> f64 {
        self.theta * self.theta * (1.0 - self.p * self.q) / self.q.powi(3)
    }

    /// Closed form for `n Var` of the arm-mean estimator as stated with the
    /// asymptotic normality result:
    /// `(Var(g | cell) / q^2 + theta^2 (1 - p q) / q^3) / p`.
    pub fn stated_mu_variance(&self) -> f64 {
        ((self.gamma - self.theta * self.theta) / self.c() + self.d()) / self.p
    }

    /// Full delta-method `n Var` of the ratio `mean(g 1{cell}) /
    /// mean(1{A = a, cell})`, including the numerator-denominator covariance.
    pub fn delta_mu_variance(&self) -> f64 {
        let (p, q, th) = (self.p, self.q, self.theta);
        let r = th / q;
        let var_num = p * self.gamma - (p * th).powi(2);
        let var_den = p * q * (1.0 - p * q);
        let cov = p * self.g_treated - p * th * p * q;
        (var_num - 2.0 * r * cov + r * r * var_den) / (p * q).powi(2)
    }

    /// `n Var` of the cell-propensity estimator: `Var(h | cell) / p`.
    pub fn pi_variance(&self) -> f64 {
        self.h_var / self.p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub estimator: String,
    pub cell: usize,
    pub arm: u8,
    pub n: usize,
    pub replicates: usize,
    pub inputs: VarianceFormulaInputs,
    /// `n` times the sample variance across replicates.
    pub empirical: f64,
    pub stated: f64,
    pub delta: f64,
    pub rel_err_stated: Option<f64>,
    pub rel_err_delta: Option<f64>,
}

fn rel_err(empirical: f64, formula: f64) -> Option<f64> {
    (formula > 0.0).then(|| (empirical - formula).abs() / formula)
}

fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
}

/// Smallest `p q` accepted by [`variance_mc_check`].
pub const MIN_CELL_ARM_MASS: f64 = 0.05;

/// Monte Carlo variance of the arm-mean and propensity estimators of one
/// cell, against their closed forms. Returns `[arm mean, propensity]`.
pub fn variance_mc_check(
    design: &FixedDesign,
    cell: usize,
    arm: bool,
    n: usize,
    replicates: usize,
    seed: u64,
) -> Result<[VarianceReport; 2]> {
    let inputs = VarianceFormulaInputs::from_design(design, cell, arm)?;
    if inputs.p * inputs.q < MIN_CELL_ARM_MASS {
        return Err(Error::InvalidInput(format!(
            "cell-arm mass {:.4} is below {MIN_CELL_ARM_MASS}",
            inputs.p * inputs.q
        )));
    }
    if replicates < 2 || n == 0 {
        return Err(Error::InvalidInput(
            "need n >= 1 and at least two replicates".into(),
        ));
    }
    let draws: Vec<(f64, f64)> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, Stream::MonteCarlo, r as u64);
            let s = design.sample(n, &mut rng)?;
            let (mut num, mut den, mut pi, mut cnt) = (0.0, 0.0, 0.0, 0.0);
            for (&j, &a) in s.atoms.iter().zip(&s.a) {
                if design.cell[j] != cell {
                    continue;
                }
                cnt += 1.0;
                pi += design.pi[j];
                num += design.mu_arm(j, arm) * design.eta_arm(j, arm);
                if a == arm {
                    den += 1.0;
                }
            }
            if den == 0.0 {
                return Err(Error::EmptyCellArm {
                    cell,
                    arm: arm as u8,
                });
            }
            Ok((num / den, pi / cnt))
        })
        .collect::<Result<_>>()?;
    let mu: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let pi: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let report = |estimator: &str, empirical: f64, stated: f64, delta: f64| VarianceReport {
        estimator: estimator.to_string(),
        cell,
        arm: arm as u8,
        n,
        replicates,
        inputs,
        empirical,
        stated,
        delta,
        rel_err_stated: rel_err(empirical, stated),
        rel_err_delta: rel_err(empirical, delta),
    };
    let nf = n as f64;
    Ok([
        report(
            "mu_phi",
            nf * sample_variance(&mu),
            inputs.stated_mu_variance(),
            inputs.delta_mu_variance(),
        ),
        report(
            "pi_phi",
            nf * sample_variance(&pi),
            inputs.pi_variance(),
            inputs.pi_variance(),
        ),
    ])
}

/// Squared-error decomposition of the estimated upper bound of a fixed
/// partition at one covariate value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub n: usize,
    pub replicates: usize,
    /// Population upper bound of the partition.
    pub b_phi: f64,
    /// Population upper bound of the finest partition of the same law, the
    /// tightest bound the instrument supports.
    pub b_star: f64,
    pub mean_estimate: f64,
    /// `E[(b_phi - b_hat)^2]`.
    pub mse: f64,
    /// `E[b_phi - b_hat]`.
    pub bias: f64,
    /// Unbiased sample variance of `b_hat`.
    pub variance: f64,
    /// `|mse - (bias^2 + variance)| / mse`.
    pub identity_rel_err: f64,
    /// `E[(b_star - b_hat)^2]`.
    pub mse_star: f64,
    /// `2 ((b_star - b_phi)^2 + mse)`.
    pub tradeoff_bound: f64,
    /// Aggregates (the full run and consecutive blocks) in which `mse_star`
    /// exceeded `tradeoff_bound`.
    pub tradeoff_violations: usize,
    pub aggregates_checked: usize,
}

/// Replicates per block when checking the tightness-bias-variance bound on
/// partial aggregates.
pub const DECOMPOSITION_BLOCK: usize = 100;

pub fn decomposition_check(
    design: &FixedDesign,
    range: OutcomeRange,
    n: usize,
    replicates: usize,
    seed: u64,
) -> Result<DecompositionReport> {
    if replicates < 2 || n == 0 {
        return Err(Error::InvalidInput(
            "need n >= 1 and at least two replicates".into(),
        ));
    }
    let b_phi = tightest_bounds(&design.population_cells(), range)?.upper;
    let b_star = tightest_bounds(&design.finest().population_cells(), range)?.upper;
    let est: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, Stream::MonteCarlo, r as u64);
            let s = design.sample(n, &mut rng)?;
            Ok(tightest_bounds(&design.estimate_cells(&s), range)?.upper)
        })
        .collect::<Result<_>>()?;
    let r = est.len() as f64;
    let sq = |v: f64| v * v;
    let mse = est.iter().map(|b| sq(b_phi - b)).sum::<f64>() / r;
    let bias = est.iter().map(|b| b_phi - b).sum::<f64>() / r;
    let variance = sample_variance(&est);
    let gap = sq(b_star - b_phi);
    let tradeoff = |xs: &[f64]| {
        let m = xs.len() as f64;
        let mse_star = xs.iter().map(|b| sq(b_star - b)).sum::<f64>() / m;
        let mse_phi = xs.iter().map(|b| sq(b_phi - b)).sum::<f64>() / m;
        (mse_star, 2.0 * (gap + mse_phi))
    };
    let (mse_star, tradeoff_bound) = tradeoff(&est);
    let mut aggregates = vec![tradeoff(&est)];
    aggregates.extend(est.chunks(DECOMPOSITION_BLOCK).map(tradeoff));
    Ok(DecompositionReport {
        n,
        replicates,
        b_phi,
        b_star,
        mean_estimate: est.iter().sum::<f64>() / r,
        mse,
        bias,
        variance,
        identity_rel_err: (mse - (bias * bias + variance)).abs() / mse,
        mse_star,
        tradeoff_bound,
        tradeoff_violations: aggregates.iter().filter(|(l, r)| l > r).count(),
        aggregates_checked: aggregates.len(),
    })
}
