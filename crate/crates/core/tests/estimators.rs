use catebounds_core::bounds::{population_representation, PopulationPartition};
use catebounds_core::data::DatasetId;
use catebounds_core::metrics::{variance_mc_check, FixedDesign, VarianceFormulaInputs};
use catebounds_core::population::TrueNuisances;
use catebounds_core::rng::{substream, Stream};

/// Four atoms of mass 1/4. Atoms 0 and 1 form cell 0, atoms 2 and 3 cell 1.
fn four_atoms(pi: [f64; 4], mu1: [f64; 4], eta: [f64; 4]) -> FixedDesign {
    let d = FixedDesign {
        x: 0.0,
        k: 2,
        prob: vec![0.25; 4],
        cell: vec![0, 0, 1, 1],
        mu1: mu1.to_vec(),
        mu0: vec![0.1, 0.2, 0.3, 0.4],
        pi: pi.to_vec(),
        eta: eta.to_vec(),
    };
    d.validate().unwrap();
    d
}

#[test]
fn indicator_propensity_variance() {
    // h = 1{z > 0} on a cell of mass 1/2 with P(z > 0 | cell) = 1/2:
    // n Var = Var(h | cell) / p = 0.25 / 0.5
    let d = four_atoms([0.0, 1.0, 0.5, 0.5], [1.0; 4], [0.5; 4]);
    let [_, pi] = variance_mc_check(&d, 0, true, 1000, 10_000, 11).unwrap();
    assert!((pi.stated - 0.5).abs() < 1e-12);
    assert!((pi.empirical - 0.5).abs() / 0.5 < 0.10, "{}", pi.empirical);
}

#[test]
fn constant_propensity_has_no_variance() {
    let d = four_atoms([0.3; 4], [1.0; 4], [0.5; 4]);
    let [_, pi] = variance_mc_check(&d, 0, true, 10_000, 200, 12).unwrap();
    assert_eq!(pi.stated, 0.0);
    assert!(pi.empirical < 1e-3);
}

#[test]
fn constant_g_arm_mean_variance() {
    // g = mu eta = c e is constant, so the estimator is c e N_cell / N_cell,a
    // and its delta-method variance is theta^2 (1 - q) / (p q^3).
    let (c, e) = (2.0, 0.5);
    let d = four_atoms([0.5; 4], [c; 4], [e; 4]);
    let inputs = VarianceFormulaInputs::from_design(&d, 0, true).unwrap();
    let (p, q, theta) = (0.5, e, c * e);
    assert!((inputs.p - p).abs() < 1e-12 && (inputs.q - q).abs() < 1e-12);
    assert!((inputs.theta - theta).abs() < 1e-12);
    let delta = theta * theta * (1.0 - q) / (p * q.powi(3));
    let stated = theta * theta * (1.0 - p * q) / (p * q.powi(3));
    assert!((inputs.delta_mu_variance() - delta).abs() < 1e-12);
    assert!((inputs.stated_mu_variance() - stated).abs() < 1e-12);
    let [mu, _] = variance_mc_check(&d, 0, true, 1000, 10_000, 13).unwrap();
    assert!(
        (mu.empirical - delta).abs() / delta < 0.10,
        "{} vs {delta}",
        mu.empirical
    );
}

#[test]
fn arm_mean_variance_error_shrinks_with_n() {
    let d =
        FixedDesign::scalar(DatasetId::One, 0.3, 2001, 2, |z| usize::from(z.abs() > 0.5)).unwrap();
    for (cell, arm) in [(0, false), (0, true), (1, false), (1, true)] {
        let errs: Vec<(f64, f64)> = [100, 1000, 10_000]
            .iter()
            .map(|&n| {
                let [mu, pi] = variance_mc_check(&d, cell, arm, n, 10_000, 3).unwrap();
                (mu.rel_err_delta.unwrap(), pi.rel_err_delta.unwrap())
            })
            .collect();
        assert!(
            errs.windows(2).all(|w| w[1].0 <= w[0].0),
            "cell {cell} arm {arm}: {errs:?}"
        );
        // the propensity estimator is a plain mean, exact at every n
        assert!(errs.iter().all(|e| e.1 < 0.05), "{errs:?}");
    }
}

#[test]
fn plug_in_matches_quadrature_at_large_n() {
    let x = 0.3;
    let d = FixedDesign::scalar(DatasetId::One, x, 4001, 2, |z| usize::from(z >= 0.0)).unwrap();
    let partition = PopulationPartition::Intervals {
        cuts: vec![0.0],
        cells: vec![0, 1],
    };
    let oracle =
        &population_representation(&TrueNuisances::new(DatasetId::One), &partition, &[x], 2001)[0];
    let s = d
        .sample(100_000, &mut substream(5, Stream::MonteCarlo, 0))
        .unwrap();
    let est = d.estimate_cells(&s);
    assert_eq!(est.len(), 2);
    for (e, o) in est.iter().zip(oracle) {
        assert!((e.pi - o.pi).abs() < 0.01, "{e:?} vs {o:?}");
        assert!(
            (e.mu1.unwrap() - o.mu1.unwrap()).abs() < 0.02,
            "{e:?} vs {o:?}"
        );
        assert!(
            (e.mu0.unwrap() - o.mu0.unwrap()).abs() < 0.02,
            "{e:?} vs {o:?}"
        );
    }
}

#[test]
fn constant_nuisances_recover_the_constant() {
    let c = 0.7;
    let mut d = FixedDesign::scalar(DatasetId::One, 0.0, 201, 1, |_| 0).unwrap();
    d.mu1.fill(c);
    d.mu0.fill(c);
    d.eta.fill(0.35);
    let s = d
        .sample(100_000, &mut substream(6, Stream::MonteCarlo, 0))
        .unwrap();
    let cell = &d.estimate_cells(&s)[0];
    assert!((cell.mu1.unwrap() - c).abs() < 0.02);
    assert!((cell.mu0.unwrap() - c).abs() < 0.02);
}
