use catebounds_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::row(vec![1.0, -2.0, 0.5]));
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Tensor::row(vec![0.3, -4.0, 1e-3])]);
        let got = p.get(0).data();
        // bias correction makes the first step -lr * sign(g) up to eps
        assert!((got[0] - (1.0 - 0.03)).abs() < 1e-9);
        assert!((got[1] - (-2.0 + 0.03)).abs() < 1e-9);
        assert!((got[2] - (0.5 - 0.03 * 1e-3 / (1e-3 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::row(vec![3.0, -1.0]));
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &p,
        );
        for _ in 0..2000 {
            let g: Vec<f64> = p.get(0).data().iter().map(|w| 2.0 * (w - 0.5)).collect();
            adam.step(&mut p, &[Tensor::row(g)]);
        }
        for w in p.get(0).data() {
            assert!((w - 0.5).abs() < 1e-3);
        }
    }
}
