//! Gumbel-softmax relaxation of categorical cell assignments.

use catebounds_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use super::models::argmax_rows;
use crate::Result;

/// Standard Gumbel draws `-ln(-ln U)`, `U ~ U(0, 1)` open at both ends.
pub fn gumbel_noise(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let mut u: f64 = rng.random();
            while u <= 0.0 {
                u = rng.random();
            }
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("length matches shape")
}

/// Relaxed sample `softmax((logits + g) / t)` for given noise, and the hard
/// one-hot index of each row.
pub fn gumbel_softmax_with_noise(
    logits: &Tensor,
    noise: &Tensor,
    temperature: f64,
) -> (Tensor, Vec<usize>) {
    let k = logits.cols();
    let mut soft = Vec::with_capacity(logits.len());
    for (row, g) in logits.data().chunks(k).zip(noise.data().chunks(k)) {
        let y: Vec<f64> = row
            .iter()
            .zip(g)
            .map(|(l, e)| (l + e) / temperature)
            .collect();
        let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = y.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = e.iter().sum();
        soft.extend(e.iter().map(|v| v / total));
    }
    let soft = Tensor::matrix(logits.rows(), k, soft).expect("length matches shape");
    let hard = argmax_rows(&soft);
    (soft, hard)
}

pub fn gumbel_softmax_sample(
    logits: &Tensor,
    temperature: f64,
    rng: &mut impl Rng,
) -> (Tensor, Vec<usize>) {
    let noise = gumbel_noise(rng, logits.rows(), logits.cols());
    gumbel_softmax_with_noise(logits, &noise, temperature)
}

pub fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        data[i * k + l] = 1.0;
    }
    Tensor::matrix(labels.len(), k, data).expect("length matches shape")
}

/// Gumbel-softmax weights on the tape. With `hard`, the forward value is the
/// one-hot argmax and gradients flow through the relaxed sample.
pub fn gumbel_softmax_tape(
    tape: &mut Tape,
    logits: Var,
    noise: &Tensor,
    temperature: f64,
    hard: bool,
) -> Result<(Var, Vec<usize>)> {
    let y = tape.gumbel_noise_add(logits, noise)?;
    let y = tape.scale(y, 1.0 / temperature)?;
    let soft = tape.softmax_rows(y)?;
    let labels = argmax_rows(tape.value(soft));
    if !hard {
        return Ok((soft, labels));
    }
    let k = tape.value(soft).cols();
    let w = tape.straight_through(soft, one_hot(&labels, k))?;
    Ok((w, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sampled_frequencies_match_softmax_of_logits() {
        let logits = Tensor::row(vec![0.5, -1.0, 1.2]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 3];
        let n = 60_000;
        for _ in 0..n {
            let (_, hard) = gumbel_softmax_sample(&logits, 1.0, &mut rng);
            counts[hard[0]] += 1;
        }
        let z: f64 = logits.data().iter().map(|v| v.exp()).sum();
        for (c, l) in counts.iter().zip(logits.data()) {
            let p = l.exp() / z;
            assert!((*c as f64 / n as f64 - p).abs() < 0.01);
        }
    }

    #[test]
    fn soft_rows_sum_to_one_and_hard_is_argmax() {
        let logits = Tensor::from_rows(&[vec![0.1, 0.2], vec![3.0, -3.0]]).unwrap();
        let noise = Tensor::zeros(&[2, 2]);
        let (soft, hard) = gumbel_softmax_with_noise(&logits, &noise, 0.5);
        assert_eq!(hard, vec![1, 0]);
        for r in 0..2 {
            let s: f64 = soft.row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn tape_version_matches_plain_version() {
        let logits = Tensor::from_rows(&[vec![0.3, -0.2, 0.9], vec![1.0, 2.0, 0.0]]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let noise = gumbel_noise(&mut rng, 2, 3);
        let (soft, labels) = gumbel_softmax_with_noise(&logits, &noise, 1.0);
        let mut tape = Tape::new();
        let l = tape.param("l", logits).unwrap();
        let (w, tl) = gumbel_softmax_tape(&mut tape, l, &noise, 1.0, false).unwrap();
        assert_eq!(labels, tl);
        for (a, b) in tape.value(w).data().iter().zip(soft.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let (h, _) = gumbel_softmax_tape(&mut tape, l, &noise, 1.0, true).unwrap();
        assert_eq!(tape.value(h), &one_hot(&labels, 3));
    }
}
