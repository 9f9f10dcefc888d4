//! Minibatch training with early stopping on a validation loss.

use catebounds_autodiff::{AutodiffError, Tape, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::params::ParamStore;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            patience: 10,
            batch_size: 256,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Size-weighted batch averages of the loss components.
    pub train_parts: Vec<f64>,
    pub val_loss: f64,
    pub val_parts: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
}

/// Splits `0..n` (shuffled) into `max(1, round(n / batch_size))` batches of
/// near-equal size.
pub fn make_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let count = ((n as f64 / batch_size.max(1) as f64).round() as usize).clamp(1, n.max(1));
    let base = n / count;
    let extra = n % count;
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for b in 0..count {
        let len = base + usize::from(b < extra);
        out.push(idx[start..start + len].to_vec());
        start += len;
    }
    out
}

fn non_finite(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::Autodiff(
            a @ (AutodiffError::NonFiniteValue { .. } | AutodiffError::NonFiniteGradient { .. }),
        ) => Error::NonFiniteLoss {
            epoch,
            batch,
            detail: a.to_string(),
        },
        other => other,
    }
}

/// Runs Adam on `params`. `batch_loss` records the loss of a batch on the tape
/// and returns it with its reported components; `validate` scores the current
/// parameters. The parameters with the lowest validation loss are restored.
pub fn train<F, V>(
    params: &mut ParamStore,
    cfg: &TrainConfig,
    n: usize,
    rng: &mut impl Rng,
    mut batch_loss: F,
    mut validate: V,
) -> Result<TrainLog>
where
    F: FnMut(&mut Tape, &[Var], &[usize]) -> Result<(Var, Vec<f64>)>,
    V: FnMut(&ParamStore) -> Result<(f64, Vec<f64>)>,
{
    if n == 0 {
        return Err(Error::InvalidInput("no training rows".into()));
    }
    let mut adam = Adam::new(cfg.adam, params);
    let mut log = TrainLog {
        best_val: f64::INFINITY,
        ..TrainLog::default()
    };
    let mut best = params.clone();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut total = 0.0;
        let mut parts: Vec<f64> = Vec::new();
        for (b, batch) in make_batches(n, cfg.batch_size, rng).into_iter().enumerate() {
            let mut tape = Tape::new();
            let step = (|| {
                let vars = params.attach(&mut tape)?;
                let (loss, p) = batch_loss(&mut tape, &vars, &batch)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b,
                        detail: format!("loss {value}"),
                    });
                }
                let grads = tape.backward(loss)?;
                Ok((value, p, params.gradients(&grads, &vars)))
            })();
            let (value, p, grads) = step.map_err(|e| non_finite(epoch, b, e))?;
            adam.step(params, &grads);
            let w = batch.len() as f64 / n as f64;
            total += w * value;
            if parts.len() < p.len() {
                parts.resize(p.len(), 0.0);
            }
            for (acc, v) in parts.iter_mut().zip(&p) {
                *acc += w * v;
            }
        }
        let (val_loss, val_parts) = validate(params)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                detail: format!("validation loss {val_loss}"),
            });
        }
        log.epochs.push(EpochStats {
            epoch,
            train_loss: total,
            train_parts: parts,
            val_loss,
            val_parts,
        });
        if val_loss < log.best_val {
            log.best_val = val_loss;
            log.best_epoch = epoch;
            best.clone_from(params);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    params.load_from(&best)?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use catebounds_autodiff::Tensor;
    use rand::SeedableRng;

    #[test]
    fn batches_cover_every_index_once() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let b = make_batches(800, 256, &mut rng);
        assert_eq!(b.len(), 3);
        let sizes: Vec<usize> = b.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![267, 267, 266]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..800).collect::<Vec<_>>());
        assert_eq!(make_batches(5, 256, &mut rng).len(), 1);
    }

    #[test]
    fn fits_a_line_and_restores_the_best_epoch() {
        let xs: Vec<f64> = (0..64).map(|i| i as f64 / 32.0 - 1.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x - 0.5).collect();
        let mut params = ParamStore::new();
        params.add("w", Tensor::row(vec![0.0]));
        params.add("b", Tensor::row(vec![0.0]));
        let cfg = TrainConfig {
            max_epochs: 300,
            patience: 300,
            batch_size: 16,
            adam: AdamConfig::default(),
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let loss_of = |p: &ParamStore| {
            let (w, b) = (p.get(0).item(), p.get(1).item());
            xs.iter()
                .zip(&ys)
                .map(|(x, y)| (w * x + b - y).powi(2))
                .sum::<f64>()
                / xs.len() as f64
        };
        let log = train(
            &mut params,
            &cfg,
            xs.len(),
            &mut rng,
            |tape, vars, batch| {
                let x = tape.constant(Tensor::column(batch.iter().map(|&i| xs[i]).collect()))?;
                let y = tape.constant(Tensor::column(batch.iter().map(|&i| ys[i]).collect()))?;
                let w = tape.matmul(x, vars[0])?;
                let p = tape.add_row(w, vars[1])?;
                let d = tape.sub(p, y)?;
                let sq = tape.mul(d, d)?;
                let l = tape.mean(sq)?;
                Ok((l, vec![]))
            },
            |p| Ok((loss_of(p), vec![])),
        )
        .unwrap();
        assert!(log.best_val < 1e-4);
        assert_eq!(loss_of(&params), log.best_val);
    }

    #[test]
    fn non_finite_loss_reports_epoch_and_batch() {
        let mut params = ParamStore::new();
        params.add("w", Tensor::row(vec![1.0]));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let err = train(
            &mut params,
            &TrainConfig::default(),
            10,
            &mut rng,
            |tape, vars, _| {
                let z = tape.constant(Tensor::row(vec![0.0]))?;
                let d = tape.div(vars[0], z)?;
                Ok((tape.sum(d)?, vec![]))
            },
            |_| Ok((0.0, vec![])),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::NonFiniteLoss {
                epoch: 1,
                batch: 0,
                ..
            }
        ));
    }
}
