use proptest::prelude::*;

use catebounds_core::bounds::{
    discrete_instrument_bounds, lower_pair, pairwise_bounds, tightest_bounds, upper_pair,
    CellValues,
};
use catebounds_core::checks::EnumerableDgp;
use catebounds_core::data::OutcomeRange;
use catebounds_core::metrics::covariate_grid;

fn cell() -> impl Strategy<Value = CellValues> {
    (0.0..=1.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(p, m1, m0)| CellValues::full(p, m1, m0))
}

fn range() -> impl Strategy<Value = OutcomeRange> {
    (-3.0..1.0f64, 0.01..4.0f64).prop_map(|(s1, w)| OutcomeRange::new(s1, s1 + w).unwrap())
}

fn upper(l: &CellValues, m: &CellValues, r: OutcomeRange) -> f64 {
    upper_pair(l, m, l.mu1.unwrap(), m.mu0.unwrap(), r)
}

fn lower(l: &CellValues, m: &CellValues, r: OutcomeRange) -> f64 {
    lower_pair(l, m, l.mu1.unwrap(), m.mu0.unwrap(), r)
}

proptest! {
    #[test]
    fn pairwise_width_identity(l in cell(), m in cell(), r in range()) {
        let width = upper(&l, &m, r) - lower(&l, &m, r);
        let exact = ((1.0 - l.pi) + m.pi) * (r.s2 - r.s1);
        prop_assert!((width - exact).abs() <= 1e-12);
        prop_assert!(width >= -1e-12);
    }

    #[test]
    fn single_cell_width_is_the_range(c in cell(), r in range()) {
        let b = tightest_bounds(&[c], r).unwrap();
        prop_assert!((b.width() - (r.s2 - r.s1)).abs() <= 1e-9);
    }

    #[test]
    fn reduction_matches_brute_force(cells in prop::collection::vec(cell(), 1..6), r in range()) {
        let b = tightest_bounds(&cells, r).unwrap();
        let (mut up, mut lo) = ((f64::INFINITY, (0, 0)), (f64::NEG_INFINITY, (0, 0)));
        for (i, l) in cells.iter().enumerate() {
            for (j, m) in cells.iter().enumerate() {
                let (u, v) = (upper(l, m, r), lower(l, m, r));
                if u < up.0 { up = (u, (i, j)); }
                if v > lo.0 { lo = (v, (i, j)); }
            }
        }
        prop_assert_eq!(b.upper, up.0);
        prop_assert_eq!(b.lower, lo.0);
        prop_assert_eq!(b.argmin, up.1);
        prop_assert_eq!(b.argmax, lo.1);
        let m = pairwise_bounds(&cells, r);
        prop_assert_eq!(m.upper.iter().copied().fold(f64::INFINITY, f64::min), b.upper);
    }

    #[test]
    fn duplicating_a_cell_leaves_bounds_unchanged(
        cells in prop::collection::vec(cell(), 1..6),
        pick in 0usize..6,
        r in range(),
    ) {
        let b = tightest_bounds(&cells, r).unwrap();
        let mut more = cells.clone();
        more.push(cells[pick % cells.len()]);
        let d = tightest_bounds(&more, r).unwrap();
        prop_assert!((b.upper - d.upper).abs() <= 1e-12);
        prop_assert!((b.lower - d.lower).abs() <= 1e-12);
    }

    #[test]
    fn wider_ranges_give_wider_bounds(cells in prop::collection::vec(cell(), 1..5), r in range(), grow in 0.0..1.0f64) {
        let wide = OutcomeRange::new(r.s1 - grow, r.s2 + grow).unwrap();
        let (b, w) = (tightest_bounds(&cells, r).unwrap(), tightest_bounds(&cells, wide).unwrap());
        prop_assert!(w.upper >= b.upper - 1e-12 && w.lower <= b.lower + 1e-12);
    }

    #[test]
    fn enumerable_processes_are_covered(
        z in prop::collection::vec(-1.0..2.0f64, 1..5),
        u in prop::collection::vec(-1.0..1.0f64, 1..4),
        z_coef in -4.0..4.0f64,
        u_coef in -3.0..3.0f64,
        x_coef in -1.0..1.0f64,
    ) {
        let dgp = EnumerableDgp { z_levels: z, u_levels: u, z_coef, u_coef, x_coef };
        let r = dgp.range();
        for x in covariate_grid() {
            let b = dgp.bounds(x, r).unwrap();
            prop_assert!(b.contains(EnumerableDgp::tau(x)), "x = {x}: {b:?}");
        }
    }
}

#[test]
fn substitution_example() {
    let r = OutcomeRange::new(0.0, 1.0).unwrap();
    let l = CellValues::full(0.8, 0.6, 0.0);
    let m = CellValues::full(0.3, 0.0, 0.2);
    // 0.48 + 0.2 - 0.14 - 0 and 0.48 + 0 - 0.14 - 0.3
    assert!((upper(&l, &m, r) - 0.54).abs() < 1e-15);
    assert!((lower(&l, &m, r) - 0.04).abs() < 1e-15);
}

#[test]
fn point_identification() {
    let r = OutcomeRange::new(-1.0, 2.0).unwrap();
    let b = discrete_instrument_bounds(&[1.0, 0.0], &[0.7, 0.1], &[0.4, 0.25], r).unwrap();
    assert!((b.upper - 0.45).abs() < 1e-15 && (b.lower - 0.45).abs() < 1e-15);
}

#[test]
fn binary_enumerable_process_is_informative_and_valid() {
    let dgp = EnumerableDgp::default();
    let r = dgp.range();
    for x in covariate_grid() {
        let b = dgp.bounds(x, r).unwrap();
        assert!(b.contains(EnumerableDgp::tau(x)));
        assert!(b.width() < r.s2 - r.s1);
    }
}
