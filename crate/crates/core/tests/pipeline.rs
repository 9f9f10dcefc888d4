use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use catebounds_core::bounds::{population_bounds, BoundSet, PopulationPartition};
use catebounds_core::data::{latent_score, tau, DatasetId};
use catebounds_core::experiment::{
    architecture_record, read_data, run_seed, write_data, write_seed_outputs, ExperimentConfig,
    PreparedData, RunManifest,
};
use catebounds_core::metrics::{conditional_mean_range, covariate_grid};
use catebounds_core::metrics::{oracle_bounds_dataset3, Method};
use catebounds_core::naive::{fit_naive, kmeans_fit};
use catebounds_core::nuisance::{NuisanceConfig, NuisanceSet};
use catebounds_core::partition::{train_partition, PartitionConfig, SplitGrids};
use catebounds_core::population::TrueNuisances;

#[test]
fn kmeans_finds_two_gaussian_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let points: Vec<Vec<f64>> = (0..10_000)
        .map(|i| vec![if i % 2 == 0 { -3.0 } else { 3.0 } + noise.sample(&mut rng)])
        .collect();
    let m = kmeans_fit(&points, 2, 1).unwrap();
    let mut c: Vec<f64> = m.centroids.iter().map(|c| c[0]).collect();
    c.sort_by(f64::total_cmp);
    assert!(
        (c[0] + 3.0).abs() < 0.1 && (c[1] - 3.0).abs() < 0.1,
        "{c:?}"
    );
    assert!(m.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-9));
}

#[test]
fn second_stage_leaves_nuisances_untouched() {
    let data = PreparedData::generate(DatasetId::One, 600, 3).unwrap();
    let cfg = NuisanceConfig::default();
    let (set, _) = NuisanceSet::fit(&data.split, &cfg).unwrap();
    let before = set.clone();
    let grids = SplitGrids::new(&set, &data.split).unwrap();
    let pc = PartitionConfig {
        restarts: 1,
        ..PartitionConfig::new(2)
    };
    train_partition(
        &grids.train,
        &grids.val_grid,
        &grids.val_z,
        data.range,
        &pc,
        3,
    )
    .unwrap();
    assert_eq!(set.fingerprint(), before.fingerprint());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("n.ckpt");
    set.save(&path).unwrap();
    let back = NuisanceSet::load(&path).unwrap();
    assert_eq!(back.fingerprint(), set.fingerprint());
    assert_eq!(
        back.validation_losses(&data.split.val).unwrap(),
        set.validation_losses(&data.split.val).unwrap()
    );
}

#[test]
fn naive_with_one_cluster_is_uninformative() {
    let data = PreparedData::generate(DatasetId::Two, 600, 2).unwrap();
    let fit = fit_naive(&data.split, 1, &NuisanceConfig::default()).unwrap();
    let b = fit.bounds(&data.test_x(), data.range).unwrap();
    let w = data.range.s2 - data.range.s1;
    assert!(b.rows.iter().all(|r| (r.bound.width() - w).abs() < 1e-9));
}

#[test]
fn dataset3_oracle_properties() {
    let x = covariate_grid();
    let r = conditional_mean_range(DatasetId::Three);
    let oracle = oracle_bounds_dataset3(&x, r).unwrap();
    for row in &oracle.rows {
        assert!(row.bound.contains(tau(DatasetId::Three, row.x)));
        assert!(row.bound.width() < r.s2 - r.s1 - 1e-6);
    }
    // all 32 patterns of the relevant bits, each its own cell, collapse to
    // the six latent levels
    let patterns = |z: &[f64]| {
        z.iter()
            .take(5)
            .enumerate()
            .map(|(i, b)| (*b as usize) << i)
            .sum()
    };
    let truth = TrueNuisances::new(DatasetId::Three);
    let x5: Vec<f64> = x.iter().step_by(20).copied().collect();
    let by_pattern = population_bounds(
        &truth,
        &PopulationPartition::Bits {
            dim: 20,
            cell: &patterns,
        },
        &x5,
        r,
    )
    .unwrap();
    let levels = |z: &[f64]| latent_score(z) as usize;
    let by_level = population_bounds(
        &truth,
        &PopulationPartition::Bits {
            dim: 20,
            cell: &levels,
        },
        &x5,
        r,
    )
    .unwrap();
    let reference = oracle_bounds_dataset3(&x5, r).unwrap();
    for ((p, l), o) in by_pattern
        .rows
        .iter()
        .zip(&by_level.rows)
        .zip(&reference.rows)
    {
        assert!(
            (p.bound.upper - l.bound.upper).abs() < 1e-12
                && (p.bound.lower - l.bound.lower).abs() < 1e-12
        );
        assert!(
            (l.bound.upper - o.bound.upper).abs() < 1e-6
                && (l.bound.lower - o.bound.lower).abs() < 1e-6
        );
    }
    let one = |_: &[f64]| 0usize;
    let coarse = population_bounds(
        &truth,
        &PopulationPartition::Bits {
            dim: 20,
            cell: &one,
        },
        &x5,
        r,
    )
    .unwrap();
    assert!(coarse
        .rows
        .iter()
        .all(|row| (row.bound.width() - (r.s2 - r.s1)).abs() < 1e-12));
}

#[test]
fn dataset1_sign_split_oracle_contains_the_effect() {
    let x = covariate_grid();
    let r = conditional_mean_range(DatasetId::One);
    let split = PopulationPartition::Intervals {
        cuts: vec![0.0],
        cells: vec![0, 1],
    };
    let b = population_bounds(&TrueNuisances::new(DatasetId::One), &split, &x, r).unwrap();
    for row in &b.rows {
        assert!(row.bound.contains(tau(DatasetId::One, row.x)), "{row:?}");
    }
}

fn small_config(dataset: DatasetId) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_dataset(dataset);
    cfg.n = 500;
    cfg.ks = vec![2, 3];
    cfg.seeds = vec![1];
    cfg.partition.restarts = 1;
    cfg.partition.train.max_epochs = 20;
    cfg.nuisance.train.max_epochs = 20;
    cfg
}

#[test]
fn runs_are_reproducible_and_fully_recorded() {
    let cfg = small_config(DatasetId::One);
    let a = run_seed(&cfg, 1).unwrap();
    let b = run_seed(&cfg, 1).unwrap();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = write_seed_outputs(da.path(), &cfg, &a).unwrap();
    let mb = write_seed_outputs(db.path(), &cfg, &b).unwrap();
    assert_eq!(std::fs::read(&ma).unwrap(), std::fs::read(&mb).unwrap());

    let manifest: RunManifest = serde_json::from_slice(&std::fs::read(&ma).unwrap()).unwrap();
    assert_eq!(manifest.config_hash, cfg.hash().unwrap());
    assert!(manifest
        .architectures
        .iter()
        .all(|(_, a)| a.identical_up_to_instrument_encoding));
    let run = ma.parent().unwrap();
    for (file, digest) in &manifest.files {
        let bytes = std::fs::read(run.join(file)).unwrap();
        assert_eq!(digest.len(), 64, "{file}");
        assert!(!bytes.is_empty(), "{file}");
    }
    for m in ["ours", "naive"] {
        for k in [2, 3] {
            assert!(manifest.files.contains_key(&format!("{m}/k{k}/bounds.csv")));
            assert!(manifest
                .files
                .contains_key(&format!("{m}/k{k}/metrics.json")));
        }
    }
    assert!(manifest.files.contains_key("ours/k2/train_log.csv"));
    let log = std::fs::read_to_string(run.join("ours/k2/train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,l_b,l_reg,l_aux,total,val_total,min_cell_mass"));
    assert!(a.runs.iter().all(|r| r.report.msd_k.is_some()));
}

#[test]
fn oracle_runs_do_not_depend_on_the_seed() {
    let mut cfg = small_config(DatasetId::Three);
    cfg.methods = vec![Method::Oracle];
    let a = run_seed(&cfg, 1).unwrap();
    let b = run_seed(&cfg, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let grid = |res| {
        let m = write_seed_outputs(dir.path(), &cfg, res).unwrap();
        std::fs::read(m.parent().unwrap().join("oracle/grid_bounds.csv")).unwrap()
    };
    let (ga, gb) = (grid(&a), grid(&b));
    assert_eq!(ga, gb);
    let rows = BoundSet::read_csv(ga.as_slice()).unwrap().rows;
    assert_eq!(rows.len(), covariate_grid().len());
    for run in a.runs.iter().chain(&b.runs) {
        assert_eq!(run.report.oracle_mse, Some(0.0));
        assert_eq!(run.report.oracle_coverage, Some(1.0));
    }
}

#[test]
fn data_directories_round_trip() {
    let data = PreparedData::generate(DatasetId::Three, 2000, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = write_data(dir.path(), &data).unwrap();
    assert_eq!((m.train_rows, m.val_rows, m.test_rows), (800, 400, 800));
    assert_eq!(m.z_columns, 20);
    let (back_m, back) = read_data(dir.path()).unwrap();
    assert_eq!(back_m, m);
    assert_eq!(back.split, data.split);
    assert_eq!(back.range, data.range);
}

#[test]
fn naive_nets_match_ours_up_to_the_instrument() {
    for k in [2, 8] {
        let rec = architecture_record(DatasetId::Three, k);
        assert_eq!(rec.ours_mu.z_dim, 20);
        assert_eq!(rec.naive_mu.z_dim, k);
        assert_eq!(rec.ours_mu.width, rec.naive_mu.width);
        assert!(rec.identical_up_to_instrument_encoding);
    }
}
