//! Exact population quantities of the synthetic processes.
//!
//! The confounders are uniform on `[-1, 1]`, so every nuisance is an integral
//! against a uniform law and is evaluated with composite Simpson rules. The
//! instrument law is either a density on `[-1, 1]` (datasets 1 and 2) or the
//! uniform law on bit patterns (dataset 3).

use crate::data::{self, DatasetId, D3_RELEVANT_BITS};

/// Nodes and weights of a composite Simpson rule for the uniform law on
/// `[-1, 1]` (weights sum to one).
#[derive(Clone, Debug)]
pub struct UniformRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl UniformRule {
    pub fn simpson(points: usize) -> Self {
        let n = if points.is_multiple_of(2) {
            points + 1
        } else {
            points.max(3)
        };
        let h = 2.0 / (n - 1) as f64;
        let mut nodes = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            nodes.push(-1.0 + i as f64 * h);
            let c = if i == 0 || i == n - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            // (h / 3) * c, divided by the interval length 2
            weights.push(h * c / 6.0);
        }
        Self { nodes, weights }
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&u, &w)| w * f(u))
            .sum()
    }
}

/// Trapezoid nodes/weights on `[a, b]` (weights sum to `b - a`).
pub fn trapezoid_rule(a: f64, b: f64, points: usize) -> (Vec<f64>, Vec<f64>) {
    let n = points.max(2);
    let h = (b - a) / (n - 1) as f64;
    let nodes = (0..n).map(|i| a + i as f64 * h).collect();
    let weights = (0..n)
        .map(|i| if i == 0 || i == n - 1 { h / 2.0 } else { h })
        .collect();
    (nodes, weights)
}

/// Density of the dataset-1/2 instrument:
/// `1/4 + 3/2 |z| (1 - |z|)` on `[-1, 1]`.
pub fn mixture_density(z: f64) -> f64 {
    if !(-1.0..=1.0).contains(&z) {
        return 0.0;
    }
    let a = z.abs();
    0.25 + 1.5 * a * (1.0 - a)
}

/// Nuisance functions `mu^a(x, z)`, `pi(x, z)` and `eta(z)`.
///
/// Implemented by the exact population nuisances, by closures, and by trained
/// first-stage networks.
pub trait NuisanceFns: Sync {
    fn mu(&self, x: f64, z: &[f64], a: bool) -> f64;
    fn pi(&self, x: f64, z: &[f64]) -> f64;
    fn eta(&self, z: &[f64]) -> f64;
}

/// Closure-backed nuisances.
pub struct FnNuisances<M, P, E> {
    pub mu: M,
    pub pi: P,
    pub eta: E,
}

impl<M, P, E> NuisanceFns for FnNuisances<M, P, E>
where
    M: Fn(f64, &[f64], bool) -> f64 + Sync,
    P: Fn(f64, &[f64]) -> f64 + Sync,
    E: Fn(&[f64]) -> f64 + Sync,
{
    fn mu(&self, x: f64, z: &[f64], a: bool) -> f64 {
        (self.mu)(x, z, a)
    }
    fn pi(&self, x: f64, z: &[f64]) -> f64 {
        (self.pi)(x, z)
    }
    fn eta(&self, z: &[f64]) -> f64 {
        (self.eta)(z)
    }
}

/// Exact nuisances of one synthetic process.
#[derive(Clone, Debug)]
pub struct TrueNuisances {
    dataset: DatasetId,
    rule: UniformRule,
    eta_table: Vec<f64>,
}

const ETA_TABLE_POINTS: usize = 4001;

impl TrueNuisances {
    pub fn new(dataset: DatasetId) -> Self {
        Self::with_points(dataset, 201)
    }

    /// `points` Simpson nodes per confounder integral.
    pub fn with_points(dataset: DatasetId, points: usize) -> Self {
        let rule = UniformRule::simpson(points);
        let eta_table = match dataset {
            DatasetId::Three => (0..=D3_RELEVANT_BITS as u32)
                .map(|rho| eta_exact_d3(&rule, rho as f64))
                .collect(),
            _ => {
                let h = 2.0 / (ETA_TABLE_POINTS - 1) as f64;
                (0..ETA_TABLE_POINTS)
                    .map(|i| eta_exact_scalar(dataset, &rule, -1.0 + i as f64 * h))
                    .collect()
            }
        };
        Self {
            dataset,
            rule,
            eta_table,
        }
    }

    pub fn dataset(&self) -> DatasetId {
        self.dataset
    }

    /// `P(A = 1 | X = x, Z = z, U = u)`.
    pub fn propensity(&self, x: f64, z: &[f64], u: f64) -> f64 {
        data::propensity(self.dataset, x, z, u)
    }

    /// Nuisances at latent level `rho` of dataset 3.
    pub fn mu_level(&self, x: f64, rho: u32, a: bool) -> f64 {
        let p = |u: f64| data::propensity_d3(x, rho as f64, u);
        self.mu_with(x, a, p)
    }

    pub fn pi_level(&self, x: f64, rho: u32) -> f64 {
        self.rule.expect(|u| data::propensity_d3(x, rho as f64, u))
    }

    fn mu_with(&self, x: f64, a: bool, p: impl Fn(f64) -> f64) -> f64 {
        arm_mean(&self.rule, self.dataset, x, a, p)
    }

    fn eta_scalar(&self, z: f64) -> f64 {
        let h = 2.0 / (ETA_TABLE_POINTS - 1) as f64;
        let pos = ((z.clamp(-1.0, 1.0) + 1.0) / h).min((ETA_TABLE_POINTS - 1) as f64);
        let i = (pos.floor() as usize).min(ETA_TABLE_POINTS - 2);
        let t = pos - i as f64;
        self.eta_table[i] * (1.0 - t) + self.eta_table[i + 1] * t
    }
}

/// `E[Y | X = x, A = a]` restricted to units whose propensity given the
/// confounder `u` is `p(u)`.
fn arm_mean(
    rule: &UniformRule,
    dataset: DatasetId,
    x: f64,
    a: bool,
    p: impl Fn(f64) -> f64,
) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (&u, &w) in rule.nodes.iter().zip(&rule.weights) {
        let pa = if a { p(u) } else { 1.0 - p(u) };
        num += w * pa * data::outcome_mean(dataset, x, u, a);
        den += w * pa;
    }
    num / den
}

/// `(pi, mu^1, mu^0)` of dataset 3 at latent level `rho`, integrating the
/// confounder with `rule`.
pub fn d3_level_nuisances(rule: &UniformRule, x: f64, rho: u32) -> (f64, f64, f64) {
    let p = |u: f64| data::propensity_d3(x, rho as f64, u);
    (
        rule.expect(p),
        arm_mean(rule, DatasetId::Three, x, true, p),
        arm_mean(rule, DatasetId::Three, x, false, p),
    )
}

fn eta_exact_scalar(dataset: DatasetId, rule: &UniformRule, z: f64) -> f64 {
    rule.expect(|x| rule.expect(|u| data::propensity(dataset, x, &[z], u)))
}

fn eta_exact_d3(rule: &UniformRule, rho: f64) -> f64 {
    rule.expect(|x| rule.expect(|u| data::propensity_d3(x, rho, u)))
}

impl NuisanceFns for TrueNuisances {
    fn mu(&self, x: f64, z: &[f64], a: bool) -> f64 {
        match self.dataset {
            DatasetId::Three => self.mu_level(x, data::latent_score(z), a),
            d => self.mu_with(x, a, |u| data::propensity(d, x, z, u)),
        }
    }

    fn pi(&self, x: f64, z: &[f64]) -> f64 {
        match self.dataset {
            DatasetId::Three => self.pi_level(x, data::latent_score(z)),
            d => self.rule.expect(|u| data::propensity(d, x, z, u)),
        }
    }

    fn eta(&self, z: &[f64]) -> f64 {
        match self.dataset {
            DatasetId::Three => self.eta_table[data::latent_score(z) as usize],
            _ => self.eta_scalar(z[0]),
        }
    }
}

/// Probability of each latent level `rho = 0..=5` of dataset 3.
pub fn latent_level_probabilities() -> Vec<f64> {
    let n = D3_RELEVANT_BITS as u32;
    (0..=n)
        .map(|k| binomial(n, k) as f64 / 2f64.powi(n as i32))
        .collect()
}

fn binomial(n: u32, k: u32) -> u64 {
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_integrates_cubics_exactly() {
        let r = UniformRule::simpson(11);
        let v = r.expect(|u| u * u * u + 3.0 * u * u + 1.0);
        assert!((v - 2.0).abs() < 1e-14);
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn mixture_density_integrates_to_one_and_is_symmetric() {
        let (nodes, w) = trapezoid_rule(-1.0, 1.0, 20001);
        let total: f64 = nodes
            .iter()
            .zip(&w)
            .map(|(z, w)| w * mixture_density(*z))
            .sum();
        assert!((total - 1.0).abs() < 1e-7);
        let mean: f64 = nodes
            .iter()
            .zip(&w)
            .map(|(z, w)| w * z * mixture_density(*z))
            .sum();
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn level_probabilities() {
        let p = latent_level_probabilities();
        assert_eq!(p.len(), 6);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(p[0], 1.0 / 32.0);
        assert_eq!(p[2], 10.0 / 32.0);
    }

    #[test]
    fn eta_table_matches_direct_quadrature() {
        let t = TrueNuisances::new(DatasetId::Two);
        for &z in &[-0.93, -0.2, 0.0, 0.37, 0.81] {
            let direct = eta_exact_scalar(DatasetId::Two, &t.rule, z);
            assert!((t.eta(&[z]) - direct).abs() < 1e-6);
        }
    }

    #[test]
    fn mu_matches_monte_carlo() {
        use rand::{Rng, SeedableRng};
        let t = TrueNuisances::new(DatasetId::One);
        let (x, z) = (0.3, [0.6]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (mut num, mut den) = (0.0, 0.0);
        for _ in 0..400_000 {
            let u: f64 = rng.random_range(-1.0..1.0);
            let p = t.propensity(x, &z, u);
            if rng.random::<f64>() < p {
                num += data::outcome_mean(DatasetId::One, x, u, true);
                den += 1.0;
            }
        }
        assert!((t.mu(x, &z, true) - num / den).abs() < 3e-3);
    }
}
