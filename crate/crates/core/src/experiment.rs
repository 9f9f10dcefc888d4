//! End-to-end runs: data generation, both stages or a baseline, bound
//! export, metrics, seed sweeps and aggregated tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::BoundSet;
use crate::data::{
    outcome_range_from_train, read_csv, split_dataset, write_csv, DatasetId, DatasetSplit,
    LabeledSample, OutcomeRange,
};
use crate::metrics::{
    msd_over_k, oracle_bounds_dataset3, oracle_grid_dataset3, Method, MetricsReport,
};
use crate::naive::fit_naive;
use crate::nn::{TrainConfig, TrainLog, XzSpec};
use crate::nuisance::{NuisanceConfig, NuisanceSet};
use crate::partition::{
    partition_bounds, save_partition, train_partition, tune_gamma, write_train_log,
    PartitionConfig, PartitionFit, SplitGrids,
};
use crate::{Error, Result};

/// Version tag of the synthetic processes, recorded in every manifest.
pub const DGP_VERSION: &str = "1";
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Stage-two settings shared by every `k` of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSettings {
    pub lambda: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub gumbel: bool,
    pub hard: bool,
    pub restarts: usize,
    /// Random `gamma` draws tried besides the default; 0 disables the search.
    pub gamma_trials: usize,
    pub train: TrainConfig,
}

impl Default for PartitionSettings {
    fn default() -> Self {
        let c = PartitionConfig::new(1);
        Self {
            lambda: c.lambda,
            gamma: c.gamma,
            temperature: c.temperature,
            gumbel: c.gumbel,
            hard: c.hard,
            restarts: c.restarts,
            gamma_trials: 0,
            train: c.train,
        }
    }
}

impl PartitionSettings {
    pub fn config(&self, k: usize) -> PartitionConfig {
        PartitionConfig {
            k,
            lambda: self.lambda,
            gamma: self.gamma,
            temperature: self.temperature,
            gumbel: self.gumbel,
            hard: self.hard,
            restarts: self.restarts,
            train: self.train,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: u8,
    pub n: usize,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub nuisance: NuisanceConfig,
    pub partition: PartitionSettings,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_dataset(DatasetId::One)
    }
}

pub const DEFAULT_N: usize = 2000;
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// The `k` values swept for a dataset: `{2, 3}` for the scalar instruments
/// and `{2, 4, 6, 8}` for the bit-vector instrument.
pub fn default_ks(dataset: DatasetId) -> Vec<usize> {
    match dataset {
        DatasetId::Three => vec![2, 4, 6, 8],
        _ => vec![2, 3],
    }
}

impl ExperimentConfig {
    pub fn for_dataset(dataset: DatasetId) -> Self {
        Self {
            dataset: dataset.number(),
            n: DEFAULT_N,
            ks: default_ks(dataset),
            seeds: DEFAULT_SEEDS.to_vec(),
            methods: vec![Method::Ours, Method::Naive],
            nuisance: NuisanceConfig::default(),
            partition: PartitionSettings::default(),
            out: PathBuf::from("out"),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn dataset_id(&self) -> Result<DatasetId> {
        DatasetId::try_from(self.dataset).map_err(Error::InvalidInput)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        let ds = self.dataset_id()?;
        if self.n < 5 {
            return bad(format!("n = {} is too small to split", self.n));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("k values must be non-empty and at least 1".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if self.seeds.is_empty() || seeds.len() != self.seeds.len() {
            return bad("seeds must be non-empty and distinct".into());
        }
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        if self.methods.contains(&Method::Oracle) && ds != DatasetId::Three {
            return bad("oracle bounds exist for dataset 3 only".into());
        }
        for &k in &self.ks {
            self.partition.config(k).validate()?;
        }
        Ok(())
    }

    /// SHA-256 (hex) of the canonical JSON form of the configuration,
    /// without the output directory.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(&Self {
            out: PathBuf::new(),
            ..self.clone()
        })?;
        Ok(crate::hex(&Sha256::digest(json)))
    }
}

/// One generated and split dataset with its outcome range.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub dataset: DatasetId,
    pub split: DatasetSplit,
    pub range: OutcomeRange,
}

impl PreparedData {
    pub fn generate(dataset: DatasetId, n: usize, seed: u64) -> Result<Self> {
        let split = split_dataset(dataset.generate(n, seed)?, seed)?;
        let range = outcome_range_from_train(&split.train)?;
        Ok(Self {
            dataset,
            split,
            range,
        })
    }

    pub fn test_x(&self) -> Vec<f64> {
        self.split.test.iter().map(|s| s.x).collect()
    }

    pub fn test_tau(&self) -> Vec<f64> {
        self.split.test.iter().map(|s| s.tau_true).collect()
    }
}

/// Provenance of a generated dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub dataset: u8,
    pub seed: u64,
    pub n: usize,
    pub dgp_version: String,
    pub code_version: String,
    pub train_rows: usize,
    pub val_rows: usize,
    pub test_rows: usize,
    pub z_columns: usize,
    pub files: BTreeMap<String, String>,
}

pub const DATA_DIR: &str = "data";
const SPLIT_FILES: [&str; 3] = ["train.csv", "val.csv", "test.csv"];

/// Writes the three splits and a manifest under `dir/data/`.
pub fn write_data(dir: &Path, data: &PreparedData) -> Result<DataManifest> {
    let split = &data.split;
    let mut w = OutputWriter::new(dir.join(DATA_DIR));
    for (name, part) in SPLIT_FILES
        .iter()
        .zip([&split.train, &split.val, &split.test])
    {
        w.write_with(name, |b| write_csv(part, b))?;
    }
    let manifest = DataManifest {
        dataset: data.dataset.number(),
        seed: split.seed,
        n: split.train.len() + split.val.len() + split.test.len(),
        dgp_version: DGP_VERSION.into(),
        code_version: CODE_VERSION.into(),
        train_rows: split.train.len(),
        val_rows: split.val.len(),
        test_rows: split.test.len(),
        z_columns: data.dataset.z_dim(),
        files: w.files().clone(),
    };
    w.write("manifest.json", &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a directory written by [`write_data`].
pub fn read_data(dir: &Path) -> Result<(DataManifest, PreparedData)> {
    let root = dir.join(DATA_DIR);
    let manifest: DataManifest = serde_json::from_slice(&fs::read(root.join("manifest.json"))?)?;
    let dataset = DatasetId::try_from(manifest.dataset).map_err(Error::InvalidInput)?;
    let read = |name: &str| -> Result<Vec<LabeledSample>> {
        read_csv(std::io::BufReader::new(fs::File::open(root.join(name))?))
    };
    let split = DatasetSplit {
        train: read(SPLIT_FILES[0])?,
        val: read(SPLIT_FILES[1])?,
        test: read(SPLIT_FILES[2])?,
        seed: manifest.seed,
    };
    let range = outcome_range_from_train(&split.train)?;
    Ok((
        manifest,
        PreparedData {
            dataset,
            split,
            range,
        },
    ))
}

/// Result of one `(method, k)` on one seed.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub bounds: BoundSet,
    pub partition: Option<PartitionFit>,
    /// Wall-clock seconds of the method's own stages; never written to disk.
    pub seconds: f64,
}

/// Every run of one seed, sharing its data and first stage.
#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub data: PreparedData,
    pub nuisance: Option<NuisanceSet>,
    pub nuisance_seconds: f64,
    pub oracle: Option<BoundSet>,
    pub runs: Vec<RunOutput>,
}

/// Number of latent levels the dataset-3 oracle is built on.
pub const ORACLE_LEVELS: usize = crate::data::D3_RELEVANT_BITS + 1;

fn min_mass(m: &[f64]) -> f64 {
    m.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Runs every configured method and `k` on one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    let ds = cfg.dataset_id()?;
    let data = PreparedData::generate(ds, cfg.n, seed).map_err(|e| e.in_stage("generate"))?;
    let x = data.test_x();
    let tau = data.test_tau();
    let range = data.range;
    let oracle = match ds {
        DatasetId::Three => {
            Some(oracle_bounds_dataset3(&x, range).map_err(|e| e.in_stage("oracle"))?)
        }
        _ => None,
    };
    let with_oracle = |r: MetricsReport, b: &BoundSet| -> Result<MetricsReport> {
        match &oracle {
            Some(o) => r.with_oracle(b, o),
            None => Ok(r),
        }
    };
    let mut runs = Vec::new();
    let mut nuisance = None;
    let mut nuisance_seconds = 0.0;
    for &method in &cfg.methods {
        match method {
            Method::Ours => {
                let t = Instant::now();
                let (set, _) = NuisanceSet::fit(&data.split, &cfg.nuisance)
                    .map_err(|e| e.in_stage("fit-nuisance"))?;
                let grids =
                    SplitGrids::new(&set, &data.split).map_err(|e| e.in_stage("fit-nuisance"))?;
                nuisance_seconds = t.elapsed().as_secs_f64();
                let frozen = set.fingerprint();
                for &k in &cfg.ks {
                    let t = Instant::now();
                    let pc = cfg.partition.config(k);
                    let fit = if cfg.partition.gamma_trials > 0 {
                        tune_gamma(
                            &grids.train,
                            &grids.val_grid,
                            &grids.val_z,
                            range,
                            &pc,
                            cfg.partition.gamma_trials,
                            seed,
                        )
                    } else {
                        train_partition(
                            &grids.train,
                            &grids.val_grid,
                            &grids.val_z,
                            range,
                            &pc,
                            seed,
                        )
                    }
                    .map_err(|e| e.in_stage(format!("fit-partition k={k}")))?;
                    let (bounds, masses) =
                        partition_bounds(&fit.net, &set, &x, &data.split.test, range)
                            .map_err(|e| e.in_stage(format!("bounds k={k}")))?;
                    let mut report = MetricsReport::new(ds, method, k, seed, &bounds, &tau)?;
                    report.min_cell_mass = Some(min_mass(&masses));
                    runs.push(RunOutput {
                        report: with_oracle(report, &bounds)?,
                        bounds,
                        partition: Some(fit),
                        seconds: nuisance_seconds + t.elapsed().as_secs_f64(),
                    });
                }
                if set.fingerprint() != frozen {
                    return Err(Error::InvalidInput(
                        "first-stage parameters changed during the second stage".into(),
                    )
                    .in_stage("fit-partition"));
                }
                nuisance = Some(set);
            }
            Method::Naive => {
                for &k in &cfg.ks {
                    let t = Instant::now();
                    let nf = fit_naive(&data.split, k, &cfg.nuisance)
                        .map_err(|e| e.in_stage(format!("naive k={k}")))?;
                    let bounds = nf
                        .bounds(&x, range)
                        .map_err(|e| e.in_stage(format!("naive bounds k={k}")))?;
                    let mut report = MetricsReport::new(ds, method, k, seed, &bounds, &tau)?;
                    report.min_cell_mass = Some(min_mass(&nf.cell_masses()));
                    runs.push(RunOutput {
                        report: with_oracle(report, &bounds)?,
                        bounds,
                        partition: None,
                        seconds: t.elapsed().as_secs_f64(),
                    });
                }
            }
            Method::Oracle => {
                let bounds = oracle.clone().expect("validated: dataset 3");
                let report = MetricsReport::new(ds, method, ORACLE_LEVELS, seed, &bounds, &tau)?;
                runs.push(RunOutput {
                    report: with_oracle(report, &bounds)?,
                    bounds,
                    partition: None,
                    seconds: 0.0,
                });
            }
        }
    }
    attach_msd(&mut runs)?;
    Ok(SeedResult {
        seed,
        data,
        nuisance,
        nuisance_seconds,
        oracle,
        runs,
    })
}

/// Sets `msd_k` on every run of a method that was fitted for two or more `k`.
fn attach_msd(runs: &mut [RunOutput]) -> Result<()> {
    let mut by_method: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in runs.iter().enumerate() {
        by_method
            .entry(r.report.method.to_string())
            .or_default()
            .push(i);
    }
    for idx in by_method.values() {
        if idx.len() < 2 {
            continue;
        }
        let sets: Vec<BoundSet> = idx.iter().map(|&i| runs[i].bounds.clone()).collect();
        let msd = msd_over_k(&sets)?;
        for &i in idx {
            runs[i].report.msd_k = Some(msd);
        }
    }
    Ok(())
}

/// Runs all seeds in parallel.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SeedResult>> {
    cfg.validate()?;
    cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect()
}

/// Records output files with their digests.
#[derive(Debug, Default)]
pub struct OutputWriter {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl OutputWriter {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            files: BTreeMap::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel.as_ref());
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, bytes)?;
        self.files.insert(
            rel.as_ref().to_string_lossy().replace('\\', "/"),
            crate::hex(&Sha256::digest(bytes)),
        );
        Ok(path)
    }

    /// Writes through a temporary buffer.
    pub fn write_with(
        &mut self,
        rel: impl AsRef<Path>,
        f: impl FnOnce(&mut Vec<u8>) -> Result<()>,
    ) -> Result<PathBuf> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(rel, &buf)
    }

    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.files
    }
}

/// Architecture record proving both methods use the same nuisance networks
/// up to the instrument encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureRecord {
    pub ours_mu: XzSpec,
    pub ours_pi: XzSpec,
    pub naive_mu: XzSpec,
    pub naive_pi: XzSpec,
    pub identical_up_to_instrument_encoding: bool,
}

fn same_up_to_z(a: &XzSpec, b: &XzSpec) -> bool {
    XzSpec {
        z_dim: 0,
        ..a.clone()
    } == XzSpec {
        z_dim: 0,
        ..b.clone()
    }
}

/// Nuisance specs of both methods for a dataset and `k`.
pub fn architecture_record(dataset: DatasetId, k: usize) -> ArchitectureRecord {
    let (mu, pi) = crate::nuisance::nuisance_specs(dataset.z_dim());
    let (nmu, npi) = crate::nuisance::nuisance_specs(k);
    let same = same_up_to_z(&mu, &nmu) && same_up_to_z(&pi, &npi);
    ArchitectureRecord {
        ours_mu: mu,
        ours_pi: pi,
        naive_mu: nmu,
        naive_pi: npi,
        identical_up_to_instrument_encoding: same,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub dgp_version: String,
    pub dataset: u8,
    pub seed: u64,
    pub n: usize,
    pub outcome_range: OutcomeRange,
    pub nuisance_fingerprint: Option<String>,
    pub architectures: Vec<(usize, ArchitectureRecord)>,
    pub files: BTreeMap<String, String>,
}

fn run_dir(dataset: DatasetId, seed: u64) -> PathBuf {
    PathBuf::from(format!("d{}", dataset.number())).join(format!("seed{seed}"))
}

/// Writes data, bounds, metrics, logs, checkpoints and a manifest for one
/// seed under `d<dataset>/seed<seed>/`.
pub fn write_seed_outputs(
    out: &Path,
    cfg: &ExperimentConfig,
    result: &SeedResult,
) -> Result<PathBuf> {
    let ds = result.data.dataset;
    let dir = run_dir(ds, result.seed);
    let mut w = OutputWriter::new(out.join(&dir));
    let data = write_data(w.root(), &result.data)?;
    for (name, digest) in data.files {
        w.files.insert(format!("{DATA_DIR}/{name}"), digest);
    }
    if let Some(set) = &result.nuisance {
        let path = w.root().join("nuisance.ckpt");
        set.save(&path)?;
        w.write("nuisance.ckpt", &fs::read(&path)?)?;
    }
    for run in &result.runs {
        let r = &run.report;
        let rel = PathBuf::from(r.method.to_string()).join(format!("k{}", r.k));
        w.write_with(rel.join("bounds.csv"), |b| run.bounds.write_csv(b))?;
        w.write(rel.join("metrics.json"), &serde_json::to_vec_pretty(r)?)?;
        w.write(rel.join("metrics.txt"), r.to_text().as_bytes())?;
        if r.method == Method::Oracle {
            let grid = oracle_grid_dataset3()?;
            w.write_with(
                PathBuf::from(r.method.to_string()).join("grid_bounds.csv"),
                |b| grid.write_csv(b),
            )?;
        }
        if let Some(fit) = &run.partition {
            w.write_with(rel.join("train_log.csv"), |b| write_train_log(&fit.log, b))?;
            let path = w.root().join(&rel).join("partition.ckpt");
            save_partition(&fit.net, &fit.config, &path)?;
            w.write(rel.join("partition.ckpt"), &fs::read(&path)?)?;
        }
    }
    let manifest = RunManifest {
        config_hash: cfg.hash()?,
        code_version: CODE_VERSION.into(),
        dgp_version: DGP_VERSION.into(),
        dataset: ds.number(),
        seed: result.seed,
        n: cfg.n,
        outcome_range: result.data.range,
        nuisance_fingerprint: result.nuisance.as_ref().map(NuisanceSet::fingerprint),
        architectures: cfg
            .ks
            .iter()
            .map(|&k| (k, architecture_record(ds, k)))
            .collect(),
        files: w.files().clone(),
    };
    let path = out.join(&dir).join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd })
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.sd)
    }
}

/// Seed-aggregated metrics of one `(dataset, method, k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: u8,
    pub method: Method,
    pub k: usize,
    pub runs: usize,
    pub coverage: MeanSd,
    pub min_coverage: f64,
    pub width: MeanSd,
    pub msd_k: Option<MeanSd>,
    pub oracle_mse: Option<MeanSd>,
    pub oracle_coverage: Option<MeanSd>,
    pub crossing_rate: MeanSd,
    pub min_cell_mass: Option<f64>,
}

pub fn summarize(reports: &[MetricsReport]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(u8, String, usize), Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((r.dataset, r.method.to_string(), r.k))
            .or_default()
            .push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let col = |f: &dyn Fn(&MetricsReport) -> f64| -> Vec<f64> {
                g.iter().map(|r| f(r)).collect()
            };
            let opt = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Option<MeanSd> {
                let v: Vec<f64> = g.iter().filter_map(|r| f(r)).collect();
                MeanSd::of(&v)
            };
            let cov = col(&|r| r.coverage);
            SummaryRow {
                dataset: g[0].dataset,
                method: g[0].method,
                k: g[0].k,
                runs: g.len(),
                coverage: MeanSd::of(&cov).expect("non-empty group"),
                min_coverage: cov.iter().copied().fold(f64::INFINITY, f64::min),
                width: MeanSd::of(&col(&|r| r.mean_width)).expect("non-empty group"),
                msd_k: opt(&|r| r.msd_k),
                oracle_mse: opt(&|r| r.oracle_mse),
                oracle_coverage: opt(&|r| r.oracle_coverage),
                crossing_rate: MeanSd::of(&col(&|r| r.crossing_rate)).expect("non-empty group"),
                min_cell_mass: g.iter().filter_map(|r| r.min_cell_mass).reduce(f64::min),
            }
        })
        .collect()
}

/// Writes a summary as CSV.
pub fn write_summary_csv<W: std::io::Write>(rows: &[SummaryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "dataset",
        "method",
        "k",
        "runs",
        "coverage_mean",
        "coverage_sd",
        "coverage_min",
        "width_mean",
        "width_sd",
        "msd_mean",
        "msd_sd",
        "oracle_mse_mean",
        "oracle_mse_sd",
        "oracle_coverage_mean",
        "oracle_coverage_sd",
        "crossing_rate_mean",
        "min_cell_mass",
    ])?;
    let f = |v: f64| format!("{v:.6}");
    let o = |v: Option<MeanSd>| -> [String; 2] {
        v.map_or([String::new(), String::new()], |m| [f(m.mean), f(m.sd)])
    };
    for r in rows {
        let [msd_m, msd_s] = o(r.msd_k);
        let [om_m, om_s] = o(r.oracle_mse);
        let [oc_m, oc_s] = o(r.oracle_coverage);
        w.write_record([
            r.dataset.to_string(),
            r.method.to_string(),
            r.k.to_string(),
            r.runs.to_string(),
            f(r.coverage.mean),
            f(r.coverage.sd),
            f(r.min_coverage),
            f(r.width.mean),
            f(r.width.sd),
            msd_m,
            msd_s,
            om_m,
            om_s,
            oc_m,
            oc_s,
            f(r.crossing_rate.mean),
            r.min_cell_mass.map(f).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Aligned text table in the layout of the published comparison tables.
pub fn summary_table_text(rows: &[SummaryRow]) -> String {
    let oracle = rows.iter().any(|r| r.oracle_mse.is_some());
    let mut header = vec!["dataset", "method", "k", "coverage", "width", "msd(k)"];
    if oracle {
        header.extend(["oracle mse", "oracle coverage"]);
    }
    let cell = |v: Option<MeanSd>| v.map_or("-".to_string(), |m| m.to_string());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut line = vec![
                r.dataset.to_string(),
                r.method.to_string(),
                r.k.to_string(),
                r.coverage.to_string(),
                r.width.to_string(),
                cell(r.msd_k),
            ];
            if oracle {
                line.push(cell(r.oracle_mse));
                line.push(cell(r.oracle_coverage));
            }
            line
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            body.iter()
                .map(|l| l[c].chars().count())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let fmt_line = |cells: Vec<String>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        format!("{}\n", parts.join("  ").trim_end())
    };
    let mut out = fmt_line(header.iter().map(|s| s.to_string()).collect());
    for line in body {
        out.push_str(&fmt_line(line));
    }
    out
}

/// Plot-ready long-form bound curves, sorted by `x` within each run.
pub fn write_curve_csv<W: std::io::Write>(results: &[SeedResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "dataset", "method", "k", "seed", "x", "tau", "lower", "upper",
    ])?;
    for res in results {
        for run in &res.runs {
            let r = &run.report;
            let mut rows: Vec<(f64, f64, f64, f64)> = run
                .bounds
                .rows
                .iter()
                .zip(&res.data.split.test)
                .map(|(b, s)| (b.x, s.tau_true, b.bound.lower, b.bound.upper))
                .collect();
            rows.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (x, tau, lo, hi) in rows {
                w.write_record([
                    r.dataset.to_string(),
                    r.method.to_string(),
                    r.k.to_string(),
                    res.seed.to_string(),
                    format!("{x:.10}"),
                    format!("{tau:.10}"),
                    format!("{lo:.10}"),
                    format!("{hi:.10}"),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Mean width against `k` for every method.
pub fn write_width_vs_k_csv<W: std::io::Write>(rows: &[SummaryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["dataset", "method", "k", "width_mean", "width_sd"])?;
    for r in rows {
        w.write_record([
            r.dataset.to_string(),
            r.method.to_string(),
            r.k.to_string(),
            format!("{:.6}", r.width.mean),
            format!("{:.6}", r.width.sd),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Configurations behind a published table: table 1 covers datasets 1 and 2,
/// table 2 covers dataset 3 with oracle columns.
pub fn table_configs(table: u8, base: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
    let datasets = match table {
        1 => vec![DatasetId::One, DatasetId::Two],
        2 => vec![DatasetId::Three],
        _ => return Err(Error::InvalidInput(format!("unknown table {table}"))),
    };
    Ok(datasets
        .into_iter()
        .map(|ds| ExperimentConfig {
            dataset: ds.number(),
            ks: default_ks(ds),
            methods: vec![Method::Naive, Method::Ours],
            ..base.clone()
        })
        .collect())
}

/// Outputs of a table reproduction.
#[derive(Debug)]
pub struct TableOutput {
    pub summary: Vec<SummaryRow>,
    pub results: Vec<SeedResult>,
    pub table_path: PathBuf,
}

/// Runs every configuration of a table and writes per-run artifacts, the
/// aggregated table (CSV and text) and figure data under `out`.
pub fn reproduce_table(table: u8, base: &ExperimentConfig, out: &Path) -> Result<TableOutput> {
    let mut results = Vec::new();
    let mut reports = Vec::new();
    for cfg in table_configs(table, base)? {
        let res = run_experiment(&cfg)?;
        for r in &res {
            write_seed_outputs(out, &cfg, r)?;
            reports.extend(r.runs.iter().map(|run| run.report.clone()));
        }
        results.extend(res);
    }
    let summary = summarize(&reports);
    let mut w = OutputWriter::new(out);
    w.write_with(format!("table{table}.csv"), |b| {
        write_summary_csv(&summary, b)
    })?;
    let table_path = w.write(
        format!("table{table}.txt"),
        summary_table_text(&summary).as_bytes(),
    )?;
    w.write_with(format!("figure_bounds_table{table}.csv"), |b| {
        write_curve_csv(&results, b)
    })?;
    w.write_with(format!("figure_width_vs_k_table{table}.csv"), |b| {
        write_width_vs_k_csv(&summary, b)
    })?;
    let manifest = serde_json::json!({
        "table": table,
        "config_hash": base.hash()?,
        "code_version": CODE_VERSION,
        "dgp_version": DGP_VERSION,
        "files": w.files(),
    });
    fs::write(
        out.join(format!("table{table}_manifest.json")),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(TableOutput {
        summary,
        results,
        table_path,
    })
}

/// Per-run training log entry point for callers that only need the log.
pub fn partition_log(run: &RunOutput) -> Option<&TrainLog> {
    run.partition.as_ref().map(|p| &p.log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::for_dataset(DatasetId::Three);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let partial =
            ExperimentConfig::from_toml("dataset = 2\nks = [2]\n[partition]\nrestarts = 2\n")
                .unwrap();
        assert_eq!(partial.partition.restarts, 2);
        assert_eq!(partial.n, DEFAULT_N);
        assert!(ExperimentConfig::from_toml("dataset = 2\nbogus = 1\n").is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = ExperimentConfig::for_dataset(DatasetId::One);
        let bad = [
            ExperimentConfig {
                seeds: vec![1, 1],
                ..base.clone()
            },
            ExperimentConfig {
                ks: vec![0],
                ..base.clone()
            },
            ExperimentConfig {
                methods: vec![Method::Oracle],
                ..base.clone()
            },
            ExperimentConfig {
                dataset: 4,
                ..base.clone()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn hash_changes_with_the_config() {
        let a = ExperimentConfig::for_dataset(DatasetId::One);
        let b = ExperimentConfig {
            n: 1000,
            ..a.clone()
        };
        assert_eq!(a.hash().unwrap(), a.hash().unwrap());
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        let moved = ExperimentConfig {
            out: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash().unwrap(), moved.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn mean_sd() {
        let m = MeanSd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.mean, 2.0);
        assert!((m.sd - 1.0).abs() < 1e-15);
        assert_eq!(MeanSd::of(&[4.0]).unwrap().sd, 0.0);
        assert!(MeanSd::of(&[]).is_none());
        assert_eq!(m.to_string(), "2.00 ± 1.00");
    }

    #[test]
    fn architectures_match_up_to_the_instrument() {
        for ds in DatasetId::ALL {
            assert!(architecture_record(ds, 3).identical_up_to_instrument_encoding);
        }
    }
}
