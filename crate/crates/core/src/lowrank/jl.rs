use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2};

/// `Pr[|u·v − h(u)·h(v)| ≥ cε] ≤ 4·exp(−(ε² − ε³)·k/4)` for one pair.
pub fn jl_bound(eps: f64, k: usize) -> f64 {
    4.0 * (-(eps * eps - eps * eps * eps) * k as f64 / 4.0).exp()
}

/// Union bound over all `N²` ordered pairs of an `N`-point set.
pub fn jl_union_bound(eps: f64, k: usize, n: usize) -> f64 {
    (n * n) as f64 * jl_bound(eps, k)
}

/// Projection rank `⌈20·c⁴·ln N / ε²⌉` at which a kernel over `N` points is
/// preserved to `c²ε` with high probability.
pub fn jl_rank(c: f64, n: usize, eps: f64) -> usize {
    (20.0 * c.powi(4) * (n as f64).ln() / (eps * eps)).ceil() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JlStats {
    pub trials: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub bound: f64,
    pub c: f64,
    pub k: usize,
    pub eps: f64,
}

/// Monte-Carlo estimate of how often a fresh `N(0, 1/k)` projection moves an
/// inner product by at least `cε`. Trial `t` uses pair `t mod |pairs|` and a
/// projection drawn from stream `t` of `seed`.
pub fn jl_preservation_stats(
    pairs: &[(Vec<f64>, Vec<f64>)],
    c: f64,
    k: usize,
    eps: f64,
    trials: usize,
    seed: u64,
) -> Result<JlStats> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::config(format!("eps must lie in (0, 1), got {eps}")));
    }
    if k == 0 || trials < 100 {
        return Err(Error::config(format!(
            "need k >= 1 and at least 100 trials (k={k}, trials={trials})"
        )));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::config(format!(
            "norm bound c must be positive, got {c}"
        )));
    }
    if pairs.is_empty() {
        return Err(Error::input("no vector pairs"));
    }
    let d = pairs[0].0.len();
    for (i, (u, v)) in pairs.iter().enumerate() {
        if u.len() != d || v.len() != d {
            return Err(Error::shape(format!(
                "pair {i} does not have dimension {d}"
            )));
        }
        for w in [u, v] {
            let sq = norm2(w).powi(2);
            if sq > c * (1.0 + 1e-12) {
                return Err(Error::input(format!(
                    "pair {i}: squared norm {sq} exceeds declared bound c = {c}"
                )));
            }
        }
    }
    let scale = 1.0 / (k as f64).sqrt();
    let failures = (0..trials)
        .into_par_iter()
        .filter(|&t| {
            let (u, v) = &pairs[t % pairs.len()];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let mut row = vec![0.0; d];
            let mut projected = 0.0;
            for _ in 0..k {
                row.iter_mut()
                    .for_each(|a| *a = StandardNormal.sample(&mut rng));
                projected += scale * dot(&row, u) * scale * dot(&row, v);
            }
            (dot(u, v) - projected).abs() >= c * eps
        })
        .count();
    Ok(JlStats {
        trials,
        failures,
        failure_rate: failures as f64 / trials as f64,
        bound: jl_bound(eps, k),
        c,
        k,
        eps,
    })
}

/// `count` pairs of independent uniformly random unit vectors in `R^dim`.
pub fn random_unit_pairs(count: usize, dim: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = || {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm2(&v);
        v.iter_mut().for_each(|x| *x /= n);
        v
    };
    (0..count).map(|_| (unit(), unit())).collect()
}
