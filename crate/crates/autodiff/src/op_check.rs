//! Finite-difference checks of every operation kind on fixed random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::AutodiffError;
use crate::finite_diff::finite_diff_check;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Step of the central differences in [`op_gradient_error`].
pub const OP_CHECK_STEP: f64 = 1e-5;

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

/// Weighted sum `sum(w * t)` so that every output coordinate matters.
fn weighted_sum(tape: &mut Tape, t: Var, seed: u64) -> Result<Var, AutodiffError> {
    let shape = tape.value(t).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect()).unwrap();
    let w = tape.constant(w)?;
    let prod = tape.mul(t, w)?;
    tape.sum(prod)
}

/// One scalar test function per op-kind, all taking a `[3, 4]` input.
fn op_function(kind: OpKind, seed: u64) -> impl Fn(&mut Tape, Var) -> Result<Var, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let other = random_matrix(&mut rng, 3, 4, true);
    let right = random_matrix(&mut rng, 4, 2, true);
    let row = random_matrix(&mut rng, 1, 4, true);
    let noise = random_matrix(&mut rng, 3, 4, false);
    move |t: &mut Tape, x: Var| {
        let out = match kind {
            OpKind::Input => x,
            OpKind::MatMul => {
                let r = t.constant(right.clone())?;
                t.matmul(x, r)?
            }
            OpKind::Add => {
                let o = t.constant(other.clone())?;
                let s = t.add(x, o)?;
                t.mul(s, s)?
            }
            OpKind::Sub => {
                let o = t.constant(other.clone())?;
                let s = t.sub(o, x)?;
                t.mul(s, x)?
            }
            OpKind::Mul => t.mul(x, x)?,
            OpKind::Div => {
                let o = t.constant(other.clone().map(|v| v.abs() + 0.5))?;
                let e = t.exp(x)?;
                let a = t.div(o, e)?;
                let b = t.div(x, e)?;
                t.add(a, b)?
            }
            OpKind::AddRow => {
                let r = t.param("row", row.clone())?;
                let s = t.add_row(x, r)?;
                t.mul(s, s)?
            }
            OpKind::Scale => t.scale(x, -2.5)?,
            OpKind::AddScalar => {
                let s = t.add_scalar(x, 0.7)?;
                t.mul(s, s)?
            }
            OpKind::Relu => t.relu(x)?,
            OpKind::Sigmoid => t.sigmoid(x)?,
            OpKind::Exp => t.exp(x)?,
            OpKind::Log => {
                let e = t.exp(x)?;
                let s = t.add_scalar(e, 0.5)?;
                t.log(s)?
            }
            OpKind::SoftmaxRows => t.softmax_rows(x)?,
            OpKind::LogSoftmaxRows => t.log_softmax_rows(x)?,
            OpKind::Sum => {
                let s = t.sum(x)?;
                t.mul(s, s)?
            }
            OpKind::Mean => {
                let s = t.mean(x)?;
                t.mul(s, s)?
            }
            OpKind::MeanRows => {
                let m = t.mean_rows(x)?;
                t.mul(m, m)?
            }
            OpKind::GatherCols => t.gather_cols(x, &[3, 0, 0, 2, 1, 3])?,
            OpKind::ConcatCols => {
                let sq = t.mul(x, x)?;
                t.concat_cols(&[x, sq])?
            }
            OpKind::GumbelNoiseAdd => {
                let s = t.gumbel_noise_add(x, &noise)?;
                t.mul(s, s)?
            }
            OpKind::StraightThrough => {
                let soft = t.softmax_rows(x)?;
                // with the forward override equal to the soft value the op is
                // differentiable, which checks the gradient routing
                let hard = t.value(soft).clone();
                t.straight_through(soft, hard)?
            }
            OpKind::ClampMin => {
                // evaluated away from the kink by the input sampler
                let s = t.clamp_min(x, 0.0)?;
                t.mul(s, x)?
            }
            OpKind::MinCols => {
                let sq = t.mul(x, x)?;
                t.min_cols(sq)?
            }
            OpKind::MaxCols => t.max_cols(x)?,
        };
        weighted_sum(t, out, seed)
    }
}

/// Largest relative gradient error of a scalar test function built around
/// `kind`, on a `[3, 4]` input drawn from `seed`.
pub fn op_gradient_error(kind: OpKind, seed: u64) -> Result<f64, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut point = random_matrix(&mut rng, 3, 4, true);
    if matches!(kind, OpKind::MinCols | OpKind::MaxCols) {
        // keep the selected column well separated so the subgradient is a gradient
        for (i, v) in point.data_mut().iter_mut().enumerate() {
            *v = (i % 4) as f64 * 0.4 + 0.1 + (*v * 0.05);
        }
    }
    finite_diff_check(op_function(kind, seed), &point, OP_CHECK_STEP)
}
