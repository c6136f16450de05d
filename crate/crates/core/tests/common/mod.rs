//! Data simulation and naive reference formulas shared by integration tests.
#![allow(dead_code)]

use mixrrm::dataset::{ChoiceDataset, LongRow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Regret of every alternative, written out term by term.
pub fn naive_regrets(beta: &[f64], x: &[Vec<f64>], asc: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut r = asc.get(i).copied().unwrap_or(0.0);
            for j in 0..x.len() {
                if j != i {
                    for m in 0..beta.len() {
                        r += (1.0 + (beta[m] * (x[j][m] - x[i][m])).exp()).ln();
                    }
                }
            }
            r
        })
        .collect()
}

pub fn naive_probabilities(beta: &[f64], x: &[Vec<f64>], asc: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = naive_regrets(beta, x, asc).iter().map(|r| (-r).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

/// Simulated panel: `n` individuals, `s` situations each, `j` alternatives.
pub struct Simulation {
    pub n: usize,
    pub s: usize,
    pub j: usize,
    pub attribute_names: Vec<String>,
    /// Attribute `m` is drawn uniformly from `ranges[m]`.
    pub ranges: Vec<(f64, f64)>,
    /// ASC per alternative (index 0 is the base).
    pub asc: Vec<f64>,
}

impl Simulation {
    /// Simulates choices; `coefficients` returns each individual's betas
    /// in attribute order.
    pub fn run(&self, seed: u64, mut coefficients: impl FnMut(&mut ChaCha8Rng) -> Vec<f64>) -> ChoiceDataset {
        let mut rng = rng(seed);
        let mut rows = Vec::with_capacity(self.n * self.s * self.j);
        for id in 0..self.n {
            let beta = coefficients(&mut rng);
            for sit in 0..self.s {
                let x: Vec<Vec<f64>> = (0..self.j)
                    .map(|_| self.ranges.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect())
                    .collect();
                let p = naive_probabilities(&beta, &x, &self.asc);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = self.j - 1;
                for (a, pa) in p.iter().enumerate() {
                    acc += pa;
                    if u < acc {
                        chosen = a;
                        break;
                    }
                }
                for (a, xa) in x.into_iter().enumerate() {
                    rows.push(LongRow {
                        id: id as i64 + 1,
                        group: (id * self.s + sit) as i64 + 1,
                        alternative: a as i64 + 1,
                        chosen: a == chosen,
                        attributes: xa,
                        extras: vec![((id / 10) + 1).to_string()],
                    });
                }
            }
        }
        ChoiceDataset::from_rows(self.attribute_names.clone(), vec!["region".into()], rows).unwrap()
    }
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}
