use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use catebounds_core::bounds::BoundSet;
use catebounds_core::checks::{property_checks, sweep_checks, CheckOutcome};
use catebounds_core::data::DatasetId;
use catebounds_core::experiment::{
    read_data, reproduce_table, run_experiment, summarize, summary_table_text, write_data,
    write_seed_outputs, write_summary_csv, ExperimentConfig, PreparedData, DEFAULT_N,
};
use catebounds_core::metrics::{
    msd_over_k, oracle_bounds_dataset3, oracle_grid_dataset3, Method, MetricsReport,
};
use catebounds_core::naive::fit_naive;
use catebounds_core::nuisance::NuisanceSet;
use catebounds_core::partition::{
    load_partition, partition_bounds, save_partition, train_partition, tune_gamma, write_train_log,
    SplitGrids,
};
use catebounds_core::Error;

#[derive(Parser)]
#[command(
    name = "catebounds",
    version,
    about = "Bounds on conditional treatment effects with complex instruments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration; flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output or run directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and its train/validation/test split
    Generate {
        #[arg(long)]
        dataset: DatasetId,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_N)]
        n: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Fit the first-stage nuisance networks of a generated run directory
    FitNuisance {
        #[command(flatten)]
        common: Common,
    },
    /// Train the partition network on frozen nuisances
    FitPartition {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: usize,
    },
    /// Compute test-set bounds for one method and k
    Bounds {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value = "ours")]
        method: Method,
    },
    /// Score bounds written by `bounds`
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value = "ours")]
        method: Method,
    },
    /// Run every configured method, k and seed end to end
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<DatasetId>,
        #[arg(long, num_args = 1..)]
        seed: Vec<u64>,
        #[arg(long, num_args = 1..)]
        k: Vec<usize>,
        #[arg(long, num_args = 1..)]
        method: Vec<Method>,
    },
    /// Reproduce a comparison table with figure data
    Reproduce {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        table: u8,
        #[arg(long, num_args = 1..)]
        seed: Vec<u64>,
    },
    /// Run the pass/fail checks; exits with 1 if any fails
    Checks {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also run the seed sweeps over datasets 1-3
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Checks,
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// 2 for input, output and format problems, 3 for numeric failures.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Autodiff(_)
        | Error::EmptyCellArm { .. }
        | Error::EmptyCell { .. }
        | Error::NoValidPair
        | Error::NonFiniteLoss { .. }
        | Error::Quadrature { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks) => ExitCode::from(1),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn config(common: &Common, dataset: Option<DatasetId>) -> Result<ExperimentConfig, Error> {
    match (&common.config, dataset) {
        (Some(path), Some(ds)) => Ok(ExperimentConfig {
            dataset: ds.number(),
            ..ExperimentConfig::load(path)?
        }),
        (Some(path), None) => ExperimentConfig::load(path),
        (None, ds) => Ok(ExperimentConfig::for_dataset(ds.unwrap_or(DatasetId::One))),
    }
}

fn method_dir(dir: &Path, method: Method, k: usize) -> PathBuf {
    dir.join(method.to_string()).join(format!("k{k}"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn load_nuisance(dir: &Path) -> Result<NuisanceSet, Error> {
    NuisanceSet::load(&dir.join("nuisance.ckpt"))
        .map_err(|e| e.in_stage("load nuisance (run fit-nuisance first)"))
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Generate {
            dataset,
            seed,
            n,
            out,
        } => {
            let data = PreparedData::generate(dataset, n, seed)?;
            let m = write_data(&out, &data)?;
            println!(
                "dataset {} seed {}: {} train, {} validation, {} test rows in {}",
                m.dataset,
                m.seed,
                m.train_rows,
                m.val_rows,
                m.test_rows,
                out.join("data").display()
            );
        }
        Command::FitNuisance { common } => {
            let dir = &common.out;
            let (_, data) = read_data(dir)?;
            let cfg = config(&common, Some(data.dataset))?;
            let (set, logs) = NuisanceSet::fit(&data.split, &cfg.nuisance)
                .map_err(|e| e.in_stage("fit-nuisance"))?;
            set.save(&dir.join("nuisance.ckpt"))?;
            write_file(
                &dir.join("nuisance_logs.json"),
                &serde_json::to_vec_pretty(&logs).map_err(Error::from)?,
            )?;
            let [mu, pi, eta] = set.validation_losses(&data.split.val)?;
            println!("validation: mu mse {mu:.5}, pi bce {pi:.5}, eta bce {eta:.5}");
            println!("fingerprint {}", set.fingerprint());
        }
        Command::FitPartition { common, k } => {
            let dir = &common.out;
            let (manifest, data) = read_data(dir)?;
            let cfg = config(&common, Some(data.dataset))?;
            let set = load_nuisance(dir)?;
            let frozen = set.fingerprint();
            let grids = SplitGrids::new(&set, &data.split)?;
            let pc = cfg.partition.config(k);
            pc.validate()?;
            let fit = if cfg.partition.gamma_trials > 0 {
                tune_gamma(
                    &grids.train,
                    &grids.val_grid,
                    &grids.val_z,
                    data.range,
                    &pc,
                    cfg.partition.gamma_trials,
                    manifest.seed,
                )
            } else {
                train_partition(
                    &grids.train,
                    &grids.val_grid,
                    &grids.val_z,
                    data.range,
                    &pc,
                    manifest.seed,
                )
            }
            .map_err(|e| e.in_stage("fit-partition"))?;
            if set.fingerprint() != frozen {
                return Err(Error::InvalidInput(
                    "nuisance parameters changed during partition training".into(),
                )
                .into());
            }
            let out = method_dir(dir, Method::Ours, k);
            fs::create_dir_all(&out).map_err(Error::from)?;
            save_partition(&fit.net, &fit.config, &out.join("partition.ckpt"))?;
            let mut log = Vec::new();
            write_train_log(&fit.log, &mut log)?;
            write_file(&out.join("train_log.csv"), &log)?;
            println!(
                "k {k}: validation width loss {:.4}, mass penalty {:.4}, gamma {}",
                fit.validation.l_b, fit.validation.l_reg, fit.config.gamma
            );
        }
        Command::Bounds { common, k, method } => {
            let dir = &common.out;
            let (_, data) = read_data(dir)?;
            let x = data.test_x();
            let bounds = match method {
                Method::Ours => {
                    let set = load_nuisance(dir)?;
                    let (net, _) =
                        load_partition(&method_dir(dir, method, k).join("partition.ckpt"))
                            .map_err(|e| e.in_stage("load partition (run fit-partition first)"))?;
                    partition_bounds(&net, &set, &x, &data.split.test, data.range)?.0
                }
                Method::Naive => {
                    let cfg = config(&common, Some(data.dataset))?;
                    fit_naive(&data.split, k, &cfg.nuisance)?.bounds(&x, data.range)?
                }
                Method::Oracle => {
                    let mut grid = Vec::new();
                    oracle_grid_dataset3()?.write_csv(&mut grid)?;
                    write_file(&dir.join(method.to_string()).join("grid_bounds.csv"), &grid)?;
                    oracle(&data)?
                }
            };
            let mut buf = Vec::new();
            bounds.write_csv(&mut buf)?;
            let path = method_dir(dir, method, k).join("bounds.csv");
            write_file(&path, &buf)?;
            println!("{} rows written to {}", bounds.rows.len(), path.display());
        }
        Command::Evaluate { common, k, method } => {
            let dir = &common.out;
            let (manifest, data) = read_data(dir)?;
            let read = |k: usize| -> Result<BoundSet, Error> {
                let f = fs::File::open(method_dir(dir, method, k).join("bounds.csv"))?;
                BoundSet::read_csv(std::io::BufReader::new(f))
            };
            let bounds = read(k).map_err(|e| e.in_stage("read bounds (run bounds first)"))?;
            let mut report = MetricsReport::new(
                data.dataset,
                method,
                k,
                manifest.seed,
                &bounds,
                &data.test_tau(),
            )?;
            if data.dataset == DatasetId::Three {
                report = report.with_oracle(&bounds, &oracle(&data)?)?;
            }
            let mut sets = vec![];
            for other in sibling_ks(&dir.join(method.to_string()))? {
                sets.push(read(other)?);
            }
            if sets.len() >= 2 {
                report.msd_k = Some(msd_over_k(&sets)?);
            }
            let out = method_dir(dir, method, k);
            write_file(
                &out.join("metrics.json"),
                &serde_json::to_vec_pretty(&report).map_err(Error::from)?,
            )?;
            write_file(&out.join("metrics.txt"), report.to_text().as_bytes())?;
            print!("{}", report.to_text());
        }
        Command::Run {
            common,
            dataset,
            seed,
            k,
            method,
        } => {
            let mut cfg = config(&common, dataset)?;
            if !seed.is_empty() {
                cfg.seeds = seed;
            }
            if !k.is_empty() {
                cfg.ks = k;
            }
            if !method.is_empty() {
                cfg.methods = method;
            }
            cfg.out = common.out.clone();
            cfg.validate()?;
            let results = run_experiment(&cfg)?;
            let mut reports = vec![];
            for r in &results {
                write_seed_outputs(&common.out, &cfg, r)?;
                reports.extend(r.runs.iter().map(|run| run.report.clone()));
            }
            let rows = summarize(&reports);
            let base = common.out.join(format!("d{}", cfg.dataset));
            let mut csv = Vec::new();
            write_summary_csv(&rows, &mut csv)?;
            write_file(&base.join("summary.csv"), &csv)?;
            let text = summary_table_text(&rows);
            write_file(&base.join("summary.txt"), text.as_bytes())?;
            print!("{text}");
        }
        Command::Reproduce {
            common,
            table,
            seed,
        } => {
            let mut cfg = config(&common, None)?;
            if !seed.is_empty() {
                cfg.seeds = seed;
            }
            cfg.out = common.out.clone();
            let out = reproduce_table(table, &cfg, &common.out)?;
            print!("{}", summary_table_text(&out.summary));
            println!("written to {}", out.table_path.display());
        }
        Command::Checks { seed, sweep, out } => {
            let mut outcomes: Vec<CheckOutcome> = Vec::new();
            if sweep {
                let mut results = vec![];
                for ds in DatasetId::ALL {
                    results.extend(run_experiment(&ExperimentConfig::for_dataset(ds))?);
                }
                outcomes.extend(sweep_checks(&results));
            }
            outcomes.extend(property_checks(seed)?);
            for o in &outcomes {
                println!("{}", o.line());
            }
            if let Some(dir) = out {
                write_file(
                    &dir.join("checks.json"),
                    &serde_json::to_vec_pretty(&outcomes).map_err(Error::from)?,
                )?;
            }
            if outcomes.iter().any(|o| !o.passed) {
                return Err(Failure::Checks);
            }
        }
    }
    Ok(())
}

fn oracle(data: &PreparedData) -> Result<BoundSet, Error> {
    if data.dataset != DatasetId::Three {
        return Err(Error::InvalidInput(
            "oracle bounds exist for dataset 3 only".into(),
        ));
    }
    oracle_bounds_dataset3(&data.test_x(), data.range)
}

/// `k` values with a `bounds.csv` under a method directory, ascending.
fn sibling_ks(method_root: &Path) -> Result<Vec<usize>, Error> {
    let mut ks = vec![];
    if !method_root.is_dir() {
        return Ok(ks);
    }
    for entry in fs::read_dir(method_root)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(k) = name.strip_prefix('k').and_then(|v| v.parse::<usize>().ok()) {
            if entry.path().join("bounds.csv").is_file() {
                ks.push(k);
            }
        }
    }
    ks.sort_unstable();
    Ok(ks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_root_error() {
        let io = Error::Io(std::io::Error::other("x"));
        assert_eq!(exit_code(&io), 2);
        assert_eq!(exit_code(&Error::NoValidPair.in_stage("bounds")), 3);
        assert_eq!(exit_code(&Error::Quadrature { change: 1.0 }), 3);
        assert_eq!(
            exit_code(&Error::InvalidInput("x".into()).in_stage("a").in_stage("b")),
            2
        );
    }
}
