use catebounds_autodiff::{
    finite_diff_check, op_gradient_error, AutodiffError, OpKind, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, away_from_zero: bool) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.5..1.5);
            if !away_from_zero || v.abs() > 1e-3 {
                break v;
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

#[test]
fn every_op_kind_passes_the_gradient_check() {
    for kind in OpKind::ALL {
        let err = op_gradient_error(kind, 17).unwrap();
        println!("{:<18} max rel err {err:.2e}", kind.name());
        assert!(err < 1e-4, "{} gradient error {err}", kind.name());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn gradient_check_on_random_inputs(seed in 0u64..10_000, which in 0usize..OpKind::ALL.len()) {
        let kind = OpKind::ALL[which];
        let err = op_gradient_error(kind, seed).unwrap();
        prop_assert!(err < 1e-4, "{} err {}", kind.name(), err);
    }
}

#[test]
fn forward_examples() {
    let mut t = Tape::new();
    let x = t.input("x", Tensor::scalar(-2.0)).unwrap();
    let r = t.relu(x).unwrap();
    assert_eq!(t.value(r).item(), 0.0);

    let z = t.input("z", Tensor::scalar(0.0)).unwrap();
    let s = t.sigmoid(z).unwrap();
    assert_eq!(t.value(s).item(), 0.5);

    let a = t
        .input(
            "a",
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
        )
        .unwrap();
    let eye = t
        .input(
            "b",
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        )
        .unwrap();
    let p = t.matmul(a, eye).unwrap();
    assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.param("x", Tensor::scalar(3.0)).unwrap();
    let y = t.mul(x, x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.by_name("x").unwrap().item(), 6.0);

    let mut t = Tape::new();
    let x = t.param("x", Tensor::scalar(0.0)).unwrap();
    let y = t.sigmoid(x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 0.25);
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    match t.matmul(a, b) {
        Err(AutodiffError::ShapeMismatch { op, left, right }) => {
            assert_eq!(op, "matmul");
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let c = t.constant(Tensor::zeros(&[3, 2])).unwrap();
    assert!(matches!(
        t.add(a, c),
        Err(AutodiffError::ShapeMismatch { op: "add", .. })
    ));
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut t = Tape::new();
    let a = t.param("a", Tensor::zeros(&[2, 2])).unwrap();
    let r = t.relu(a).unwrap();
    assert!(matches!(
        t.backward(r),
        Err(AutodiffError::NonScalarRoot { .. })
    ));
}

#[test]
fn nan_gradient_reports_node() {
    // d/dx of x / y at y = 1e-300 overflows to infinity in the backward pass
    let mut t = Tape::new();
    let x = t.param("x", Tensor::scalar(1e300)).unwrap();
    let y = t.param("y", Tensor::scalar(1e-300)).unwrap();
    let tiny = t.scale(y, 1e-10).unwrap();
    let q = t.div(x, tiny);
    // the forward value itself overflows here
    assert!(matches!(
        q,
        Err(AutodiffError::NonFiniteValue { op: "div", .. })
    ));

    let mut t = Tape::new();
    let x = t.param("x", Tensor::scalar(1e-160)).unwrap();
    let y = t.param("y", Tensor::scalar(1e-160)).unwrap();
    let q = t.div(x, y).unwrap();
    let big = t.scale(q, 1e300).unwrap();
    match t.backward(big) {
        Err(AutodiffError::NonFiniteGradient { node, .. }) => assert!(node <= big.id()),
        other => panic!("expected non-finite gradient, got {other:?}"),
    }
}

fn mlp_loss(
    t: &mut Tape,
    w1: Var,
    inputs: &Tensor,
    targets: &Tensor,
) -> Result<Var, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = t.constant(inputs.clone())?;
    let b1 = t.constant(random_matrix(&mut rng, 1, 5, false))?;
    let w2 = t.constant(random_matrix(&mut rng, 5, 1, false))?;
    let h = t.matmul(x, w1)?;
    let h = t.add_row(h, b1)?;
    let h = t.relu(h)?;
    let out = t.matmul(h, w2)?;
    let y = t.constant(targets.clone())?;
    let d = t.sub(out, y)?;
    let sq = t.mul(d, d)?;
    t.mean(sq)
}

#[test]
fn two_layer_mlp_mse_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = random_matrix(&mut rng, 8, 3, false);
    let targets = random_matrix(&mut rng, 8, 1, false);
    let w1 = random_matrix(&mut rng, 3, 5, true);
    let err = finite_diff_check(|t, w| mlp_loss(t, w, &inputs, &targets), &w1, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn repeated_passes_are_bitwise_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = random_matrix(&mut rng, 8, 3, false);
    let targets = random_matrix(&mut rng, 8, 1, false);
    let w1 = random_matrix(&mut rng, 3, 5, true);
    let run = || {
        let mut t = Tape::new();
        let w = t.param("w1", w1.clone()).unwrap();
        let l = mlp_loss(&mut t, w, &inputs, &targets).unwrap();
        let g = t.backward(l).unwrap();
        (
            t.value(l).item().to_bits(),
            g.by_name("w1")
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn chain_rule_matches_separate_graphs() {
    // f(u) = sum(sigmoid(u)^2), g(x) = x W
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x0 = random_matrix(&mut rng, 2, 3, false);
    let w = random_matrix(&mut rng, 3, 2, false);

    let mut t = Tape::new();
    let x = t.param("x", x0.clone()).unwrap();
    let wv = t.constant(w.clone()).unwrap();
    let u = t.matmul(x, wv).unwrap();
    let s = t.sigmoid(u).unwrap();
    let sq = t.mul(s, s).unwrap();
    let f = t.sum(sq).unwrap();
    let fused = t.backward(f).unwrap().get(x).unwrap().clone();

    // outer graph: df/du
    let mut t1 = Tape::new();
    let u0 = x0.matmul(&w).unwrap();
    let uv = t1.param("u", u0).unwrap();
    let s = t1.sigmoid(uv).unwrap();
    let sq = t1.mul(s, s).unwrap();
    let f = t1.sum(sq).unwrap();
    let dfdu = t1.backward(f).unwrap().get(uv).unwrap().clone();
    // inner graph is linear: df/dx = df/du W^T
    let composed = dfdu.matmul(&w.transpose()).unwrap();

    for (a, b) in fused.data().iter().zip(composed.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn constants_do_not_receive_gradients() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::scalar(2.0)).unwrap();
    let x = t.param("x", Tensor::scalar(1.5)).unwrap();
    let y = t.mul(c, x).unwrap();
    let g = t.backward(y).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().item(), 2.0);
    assert_eq!(g.named().len(), 1);
}

#[test]
fn straight_through_forward_is_hard_backward_is_soft() {
    let logits = Tensor::from_rows(&[vec![0.3, -0.2, 1.1]]).unwrap();
    let weights = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
    let grad_for = |hard: bool| {
        let mut t = Tape::new();
        let l = t.param("l", logits.clone()).unwrap();
        let soft = t.softmax_rows(l).unwrap();
        let y = if hard {
            t.straight_through(soft, Tensor::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap())
                .unwrap()
        } else {
            soft
        };
        if hard {
            assert_eq!(t.value(y).data(), &[0.0, 0.0, 1.0]);
        }
        let w = t.constant(weights.clone()).unwrap();
        let p = t.mul(y, w).unwrap();
        let s = t.sum(p).unwrap();
        t.backward(s).unwrap().get(l).unwrap().clone()
    };
    assert_eq!(grad_for(true), grad_for(false));
}
