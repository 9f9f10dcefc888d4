//! Pass/fail checks of the method's guarantees: coverage and tightness of
//! seed sweeps, algebraic identities, oracle validity, estimator
//! consistency, variance formulas, the squared-error decomposition and
//! gradient integrity.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use catebounds_autodiff::{op_gradient_error, OpKind};

use crate::bounds::{
    discrete_instrument_bounds, lower_pair, tightest_bounds, upper_pair, BoundValue, CellValues,
};
use crate::data::{outcome_mean, tau, DatasetId, OutcomeRange};
use crate::experiment::{summarize, SeedResult, SummaryRow};
use crate::metrics::{
    conditional_mean_range, covariate_grid, decomposition_check, oracle_bounds_dataset3,
    variance_mc_check, FixedDesign, Method, VarianceReport, GRID_POINTS,
};
use crate::partition::{composite_loss_gradient_error, gradient_check_instance, PartitionConfig};
use crate::rng::{substream, Stream};
use crate::{Error, Result};

pub const MIN_COVERAGE: f64 = 0.95;
pub const MAX_RUN_SECONDS: f64 = 15.0 * 60.0;
pub const D1_K2_WIDTH_BAND: (f64, f64) = (0.7, 1.4);
pub const K1_WIDTH_TOL: f64 = 1e-9;
pub const PAIR_IDENTITY_TOL: f64 = 1e-12;
pub const IDENTITY_DRAWS: usize = 100_000;
pub const CONSISTENCY_TOL: f64 = 0.02;
pub const CONSISTENCY_SIZES: [usize; 3] = [1_000, 10_000, 100_000];
pub const CONSISTENCY_REPLICATES: usize = 20;
pub const VARIANCE_TOL: f64 = 0.10;
pub const VARIANCE_N: usize = 1_000;
pub const VARIANCE_REPLICATES: usize = 10_000;
pub const DECOMPOSITION_TOL: f64 = 0.05;
pub const DECOMPOSITION_N: usize = 1_000;
pub const DECOMPOSITION_REPLICATES: usize = 2_000;
pub const OP_GRAD_TOL: f64 = 1e-4;
pub const COMPOSITE_GRAD_TOL: f64 = 1e-3;
pub const COMPOSITE_GRAD_STEP: f64 = 1e-6;
/// Seeds of the gradient checks.
pub const GRADIENT_SEEDS: u64 = 3;

/// One criterion's verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub criterion: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(criterion: u8, name: &str, passed: bool, detail: String) -> Self {
        Self {
            criterion,
            name: name.to_string(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} [{}] {}: {}",
            self.criterion,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

fn find(rows: &[SummaryRow], ds: DatasetId, method: Method, k: usize) -> Option<&SummaryRow> {
    rows.iter()
        .find(|r| r.dataset == ds.number() && r.method == method && r.k == k)
}

fn missing(criterion: u8, name: &str, what: String) -> CheckOutcome {
    CheckOutcome::new(criterion, name, false, format!("missing runs: {what}"))
}

/// Criteria over seed sweeps: per-run coverage and runtime, the dataset-2
/// and dataset-1 width orderings, and robustness across `k`.
pub fn sweep_checks(results: &[SeedResult]) -> Vec<CheckOutcome> {
    let runs: Vec<_> = results.iter().flat_map(|r| &r.runs).collect();
    let reports: Vec<_> = runs.iter().map(|r| r.report.clone()).collect();
    let rows = summarize(&reports);
    let mut out = Vec::new();

    let ours: Vec<_> = runs
        .iter()
        .filter(|r| r.report.method == Method::Ours)
        .collect();
    let name = "coverage of every run on datasets 1-3";
    let datasets: Vec<u8> = DatasetId::ALL.iter().map(|d| d.number()).collect();
    let seen: Vec<u8> = datasets
        .iter()
        .copied()
        .filter(|d| ours.iter().any(|r| r.report.dataset == *d))
        .collect();
    if seen.len() < datasets.len() {
        out.push(missing(1, name, format!("datasets with our runs {seen:?}")));
    } else {
        let failing: Vec<String> = ours
            .iter()
            .filter(|r| r.report.coverage < MIN_COVERAGE)
            .map(|r| {
                format!(
                    "d{} k{} seed{} = {:.4}",
                    r.report.dataset, r.report.k, r.report.seed, r.report.coverage
                )
            })
            .collect();
        let min = ours.iter().map(|r| r.report.coverage).fold(1.0, f64::min);
        let slowest = ours.iter().map(|r| r.seconds).fold(0.0, f64::max);
        let passed = failing.is_empty() && slowest <= MAX_RUN_SECONDS;
        out.push(CheckOutcome::new(
            1,
            name,
            passed,
            format!(
                "{} runs, min coverage {min:.4} (need >= {MIN_COVERAGE}), slowest run {slowest:.1}s (limit {MAX_RUN_SECONDS}s){}",
                ours.len(),
                if failing.is_empty() {
                    String::new()
                } else {
                    format!(", below threshold: {}", failing.join("; "))
                }
            ),
        ));
    }

    let name = "dataset 2 width, ours <= naive for k = 2, 3";
    let mut parts = Vec::new();
    let mut passed = true;
    for k in [2, 3] {
        match (
            find(&rows, DatasetId::Two, Method::Ours, k),
            find(&rows, DatasetId::Two, Method::Naive, k),
        ) {
            (Some(o), Some(n)) => {
                passed &= o.width.mean <= n.width.mean;
                parts.push(format!(
                    "k{k}: ours {:.4} vs naive {:.4}",
                    o.width.mean, n.width.mean
                ));
            }
            _ => {
                passed = false;
                parts.push(format!("k{k}: missing"));
            }
        }
    }
    out.push(CheckOutcome::new(2, name, passed, parts.join(", ")));

    let name = "dataset 1 k = 2, ours <= naive and ours in band";
    out.push(
        match (
            find(&rows, DatasetId::One, Method::Ours, 2),
            find(&rows, DatasetId::One, Method::Naive, 2),
        ) {
            (Some(o), Some(n)) => {
                let (lo, hi) = D1_K2_WIDTH_BAND;
                let w = o.width.mean;
                CheckOutcome::new(
                    3,
                    name,
                    w <= n.width.mean && (lo..=hi).contains(&w),
                    format!("ours {} vs naive {} (band [{lo}, {hi}])", o.width, n.width),
                )
            }
            _ => missing(3, name, "dataset 1 k2".into()),
        },
    );

    let name = "MSD(k), ours <= naive on datasets 1 and 3";
    let mut parts = Vec::new();
    let mut passed = true;
    for ds in [DatasetId::One, DatasetId::Three] {
        let msd = |m: Method| -> Option<f64> {
            let v: Vec<f64> = reports
                .iter()
                .filter(|r| r.dataset == ds.number() && r.method == m)
                .map(|r| (r.seed, r.msd_k))
                .collect::<BTreeMap<_, _>>()
                .into_values()
                .collect::<Option<Vec<f64>>>()?;
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        match (msd(Method::Ours), msd(Method::Naive)) {
            (Some(o), Some(n)) => {
                passed &= o <= n;
                parts.push(format!("d{}: ours {o:.4} vs naive {n:.4}", ds.number()));
            }
            _ => {
                passed = false;
                parts.push(format!("d{}: missing", ds.number()));
            }
        }
    }
    out.push(CheckOutcome::new(4, name, passed, parts.join(", ")));
    out
}

fn random_cell(rng: &mut impl Rng) -> CellValues {
    CellValues::full(
        rng.random_range(0.0..=1.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
    )
}

fn random_range(rng: &mut impl Rng) -> OutcomeRange {
    let s1 = rng.random_range(-3.0..1.0);
    OutcomeRange::new(s1, s1 + rng.random_range(0.01..4.0)).expect("s2 > s1")
}

/// Largest deviations `(k = 1 width, pairwise width)` from the exact width
/// identities over random nuisance values.
pub fn identity_errors(draws: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = substream(seed, Stream::MonteCarlo, 0);
    let (mut k1, mut pair) = (0.0f64, 0.0f64);
    for _ in 0..draws {
        let r = random_range(&mut rng);
        let c = random_cell(&mut rng);
        let b = tightest_bounds(std::slice::from_ref(&c), r)?;
        k1 = k1.max((b.width() - (r.s2 - r.s1)).abs());
        let (l, m) = (random_cell(&mut rng), random_cell(&mut rng));
        let (mu1, mu0) = (l.mu1.expect("full"), m.mu0.expect("full"));
        let width = upper_pair(&l, &m, mu1, mu0, r) - lower_pair(&l, &m, mu1, mu0, r);
        let exact = ((1.0 - l.pi) + m.pi) * (r.s2 - r.s1);
        pair = pair.max((width - exact).abs());
    }
    Ok((k1, pair))
}

pub fn identity_check(seed: u64) -> Result<CheckOutcome> {
    let (k1, pair) = identity_errors(IDENTITY_DRAWS, seed)?;
    Ok(CheckOutcome::new(
        5,
        "width identities",
        k1 <= K1_WIDTH_TOL && pair <= PAIR_IDENTITY_TOL,
        format!(
            "{IDENTITY_DRAWS} draws: max |k=1 width - (s2 - s1)| = {k1:.2e} (tol {K1_WIDTH_TOL:.0e}), max pairwise deviation = {pair:.2e} (tol {PAIR_IDENTITY_TOL:.0e})"
        ),
    ))
}

/// A process with every variable discrete: a uniform confounder and an
/// independent uniform instrument on finite level sets, a logistic
/// treatment, and outcome means from the dataset-1 structural equation, so
/// all nuisances follow by enumeration.
#[derive(Clone, Debug, PartialEq)]
pub struct EnumerableDgp {
    pub z_levels: Vec<f64>,
    pub u_levels: Vec<f64>,
    /// Instrument strength in the treatment logit.
    pub z_coef: f64,
    /// Confounding strength in the treatment logit.
    pub u_coef: f64,
    pub x_coef: f64,
}

impl Default for EnumerableDgp {
    /// Binary instrument and binary confounder.
    fn default() -> Self {
        Self {
            z_levels: vec![0.0, 1.0],
            u_levels: vec![-1.0, 1.0],
            z_coef: 3.0,
            u_coef: 1.2,
            x_coef: 0.5,
        }
    }
}

impl EnumerableDgp {
    fn treat(&self, x: f64, z: f64, u: f64) -> f64 {
        let logit = self.z_coef * (z - 0.5) + self.u_coef * u + self.x_coef * x;
        1.0 / (1.0 + (-logit).exp())
    }

    fn mean(x: f64, u: f64, a: bool) -> f64 {
        outcome_mean(DatasetId::One, x, u, a)
    }

    pub fn tau(x: f64) -> f64 {
        tau(DatasetId::One, x)
    }

    /// Smallest interval holding every conditional outcome mean for `x` in
    /// `[-1, 1]`.
    pub fn range(&self) -> OutcomeRange {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..=10_000 {
            let x = -1.0 + 2.0 * i as f64 / 10_000.0;
            for &u in &self.u_levels {
                for a in [false, true] {
                    let m = Self::mean(x, u, a);
                    lo = lo.min(m);
                    hi = hi.max(m);
                }
            }
        }
        OutcomeRange::new(lo, hi).expect("non-degenerate outcome means")
    }

    /// Exact `(pi, mu1, mu0)` at `x` for each instrument level.
    pub fn nuisances(&self, x: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let pu = 1.0 / self.u_levels.len() as f64;
        let mut out = (vec![], vec![], vec![]);
        for &z in &self.z_levels {
            let (mut pi, mut n1, mut n0) = (0.0, 0.0, 0.0);
            for &u in &self.u_levels {
                let p = self.treat(x, z, u);
                pi += pu * p;
                n1 += pu * p * Self::mean(x, u, true);
                n0 += pu * (1.0 - p) * Self::mean(x, u, false);
            }
            out.0.push(pi);
            out.1.push(n1 / pi);
            out.2.push(n0 / (1.0 - pi));
        }
        out
    }

    pub fn bounds(&self, x: f64, range: OutcomeRange) -> Result<BoundValue> {
        let (pi, mu1, mu0) = self.nuisances(x);
        discrete_instrument_bounds(&pi, &mu1, &mu0, range)
    }
}

pub fn oracle_validity_check() -> Result<CheckOutcome> {
    let grid = covariate_grid();
    let dgp = EnumerableDgp::default();
    let range = dgp.range();
    let mut misses = 0;
    for &x in &grid {
        if !dgp.bounds(x, range)?.contains(EnumerableDgp::tau(x)) {
            misses += 1;
        }
    }
    let r3 = conditional_mean_range(DatasetId::Three);
    let oracle = oracle_bounds_dataset3(&grid, r3)?;
    let misses3 = oracle
        .rows
        .iter()
        .filter(|row| !row.bound.contains(tau(DatasetId::Three, row.x)))
        .count();
    Ok(CheckOutcome::new(
        6,
        "exact-nuisance bounds contain the CATE",
        misses == 0 && misses3 == 0,
        format!(
            "enumerable process: {}/{GRID_POINTS} grid points covered; dataset-3 oracle: {}/{GRID_POINTS} covered (range [{:.4}, {:.4}])",
            GRID_POINTS - misses,
            GRID_POINTS - misses3,
            r3.s1,
            r3.s2
        ),
    ))
}

/// Designs of the consistency, variance and decomposition checks: dataset 1
/// at `x = 0.3` split at `|z| = 0.5`, and dataset 3 at `x = 0.2` split at
/// latent level 3.
pub fn check_designs() -> Result<Vec<(&'static str, FixedDesign)>> {
    Ok(vec![
        (
            "dataset 1, x = 0.3, cells |z| <= 0.5 / > 0.5",
            FixedDesign::scalar(DatasetId::One, 0.3, 2001, 2, |z| usize::from(z.abs() > 0.5))?,
        ),
        (
            "dataset 3, x = 0.2, cells rho <= 2 / > 2",
            FixedDesign::latent_levels(0.2, 2, |r| usize::from(r > 2))?,
        ),
    ])
}

/// Range used by the designed checks.
pub fn check_range() -> OutcomeRange {
    OutcomeRange::new(-0.6, 1.4).expect("valid range")
}

fn cell_deviation(est: &[CellValues], pop: &[CellValues], range: OutcomeRange) -> Result<f64> {
    if est.len() != pop.len() {
        return Err(Error::LengthMismatch {
            what: "estimated cells",
            left: est.len(),
            right: pop.len(),
        });
    }
    let mut dev = 0.0f64;
    for (e, p) in est.iter().zip(pop) {
        dev = dev.max((e.pi - p.pi).abs());
        for (a, b) in [(e.mu1, p.mu1), (e.mu0, p.mu0)] {
            match (a, b) {
                (Some(a), Some(b)) => dev = dev.max((a - b).abs()),
                _ => return Err(Error::EmptyCell { cell: 0 }),
            }
        }
    }
    let (eb, pb) = (tightest_bounds(est, range)?, tightest_bounds(pop, range)?);
    Ok(dev
        .max((eb.upper - pb.upper).abs())
        .max((eb.lower - pb.lower).abs()))
}

/// Per sample size: `(n, mean deviation, max deviation)` over replicates of
/// the largest absolute error of the plug-in cell aggregates and bounds.
pub fn consistency_profile(
    design: &FixedDesign,
    range: OutcomeRange,
    seed: u64,
) -> Result<Vec<(usize, f64, f64)>> {
    let pop = design.population_cells();
    CONSISTENCY_SIZES
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let devs: Vec<f64> = (0..CONSISTENCY_REPLICATES)
                .into_par_iter()
                .map(|r| {
                    let id = (i * CONSISTENCY_REPLICATES + r) as u64;
                    let s = design.sample(n, &mut substream(seed, Stream::MonteCarlo, id))?;
                    cell_deviation(&design.estimate_cells(&s), &pop, range)
                })
                .collect::<Result<_>>()?;
            let mean = devs.iter().sum::<f64>() / devs.len() as f64;
            Ok((n, mean, devs.iter().copied().fold(0.0, f64::max)))
        })
        .collect()
}

pub fn consistency_check(seed: u64) -> Result<CheckOutcome> {
    let mut passed = true;
    let mut parts = Vec::new();
    for (name, design) in check_designs()? {
        let prof = consistency_profile(&design, check_range(), seed)?;
        let last = prof.last().expect("three sizes");
        let monotone = prof.windows(2).all(|w| w[1].1 <= w[0].1);
        passed &= last.2 <= CONSISTENCY_TOL && monotone;
        let path: Vec<String> = prof.iter().map(|p| format!("{:.4}", p.1)).collect();
        parts.push(format!(
            "{name}: mean deviation {} over n = 1e3/1e4/1e5, worst at 1e5 {:.4}",
            path.join(" -> "),
            last.2
        ));
    }
    Ok(CheckOutcome::new(
        7,
        "plug-in aggregates converge to the population oracle",
        passed,
        format!(
            "{} (tol {CONSISTENCY_TOL}, {CONSISTENCY_REPLICATES} replicates)",
            parts.join("; ")
        ),
    ))
}

/// Pre-declared `(cell, arm)` configurations of the variance check: every
/// cell and arm of the dataset-1 design, and the single cell of the same
/// law at `k = 1` (`p = 1`).
pub fn variance_reports(seed: u64) -> Result<Vec<VarianceReport>> {
    let split = FixedDesign::scalar(DatasetId::One, 0.3, 2001, 2, |z| usize::from(z.abs() > 0.5))?;
    let whole = FixedDesign::scalar(DatasetId::One, 0.3, 2001, 1, |_| 0)?;
    let mut out = Vec::new();
    for (design, cells) in [(&whole, 1), (&split, 2)] {
        for cell in 0..cells {
            for arm in [false, true] {
                out.extend(variance_mc_check(
                    design,
                    cell,
                    arm,
                    VARIANCE_N,
                    VARIANCE_REPLICATES,
                    seed,
                )?);
            }
        }
    }
    Ok(out)
}

pub fn variance_check(seed: u64) -> Result<CheckOutcome> {
    let reports = variance_reports(seed)?;
    let mut passed = true;
    let mut parts = Vec::new();
    for est in ["mu_phi", "pi_phi"] {
        let rs: Vec<&VarianceReport> = reports.iter().filter(|r| r.estimator == est).collect();
        let mut configs: Vec<(u64, u64)> = rs
            .iter()
            .map(|r| (r.inputs.p.to_bits(), r.inputs.q.to_bits()))
            .collect();
        configs.sort_unstable();
        configs.dedup();
        let ok = |e: Option<f64>| e.is_some_and(|e| e <= VARIANCE_TOL);
        let within = rs.iter().filter(|r| ok(r.rel_err_stated)).count();
        passed &= within == rs.len() && configs.len() >= 2;
        let worst = |f: fn(&VarianceReport) -> Option<f64>| {
            rs.iter().filter_map(|r| f(r)).fold(0.0, f64::max)
        };
        parts.push(format!(
            "{est}: {within}/{} configurations within {:.0}% of the closed form (worst {:.1}%; delta-method form worst {:.1}%)",
            rs.len(),
            VARIANCE_TOL * 100.0,
            100.0 * worst(|r| r.rel_err_stated),
            100.0 * worst(|r| r.rel_err_delta),
        ));
    }
    Ok(CheckOutcome::new(
        8,
        "n Var of the cell estimators matches the closed form",
        passed,
        format!(
            "{} (n = {VARIANCE_N}, {VARIANCE_REPLICATES} replicates)",
            parts.join("; ")
        ),
    ))
}

pub fn decomposition_identity_check(seed: u64) -> Result<CheckOutcome> {
    let mut passed = true;
    let mut parts = Vec::new();
    for (name, design) in check_designs()? {
        let r = decomposition_check(
            &design,
            check_range(),
            DECOMPOSITION_N,
            DECOMPOSITION_REPLICATES,
            seed,
        )?;
        passed &= r.identity_rel_err <= DECOMPOSITION_TOL && r.tradeoff_violations == 0;
        parts.push(format!(
            "{name}: identity error {:.2e}, bound violated in {}/{} aggregates",
            r.identity_rel_err, r.tradeoff_violations, r.aggregates_checked
        ));
    }
    Ok(CheckOutcome::new(
        9,
        "bias-variance identity and the factor-2 bound",
        passed,
        format!(
            "{} (tol {DECOMPOSITION_TOL}, {DECOMPOSITION_REPLICATES} replicates)",
            parts.join("; ")
        ),
    ))
}

pub fn gradient_check() -> Result<CheckOutcome> {
    let mut worst_op = (f64::NEG_INFINITY, "");
    for kind in OpKind::ALL {
        for seed in 0..GRADIENT_SEEDS {
            let e = op_gradient_error(kind, seed)?;
            if e > worst_op.0 {
                worst_op = (e, kind.name());
            }
        }
    }
    let mut composite = 0.0f64;
    for seed in 0..GRADIENT_SEEDS {
        let (net, data) = gradient_check_instance(16, 2, seed)?;
        composite = composite.max(composite_loss_gradient_error(
            &net,
            &data,
            &PartitionConfig::new(2),
            check_range(),
            COMPOSITE_GRAD_STEP,
        )?);
    }
    Ok(CheckOutcome::new(
        10,
        "finite-difference gradient checks",
        worst_op.0 <= OP_GRAD_TOL && composite <= COMPOSITE_GRAD_TOL,
        format!(
            "{} ops: worst relative error {:.2e} ({}, tol {OP_GRAD_TOL:.0e}); composite loss n = 16, k = 2: {composite:.2e} (tol {COMPOSITE_GRAD_TOL:.0e})",
            OpKind::ALL.len(),
            worst_op.0,
            worst_op.1
        ),
    ))
}

/// Criteria that need no trained model, in order.
pub fn property_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        identity_check(seed)?,
        oracle_validity_check()?,
        consistency_check(seed)?,
        variance_check(seed)?,
        decomposition_identity_check(seed)?,
        gradient_check()?,
    ])
}
