use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, Dense};

pub const POWER_ITERATIONS: usize = 50;
pub const POWER_TOL: f64 = 1e-8;

fn to_nalgebra(k: &Dense) -> DMatrix<f64> {
    DMatrix::from_row_slice(k.rows(), k.cols(), k.as_slice())
}

/// Largest singular value by power iteration on `KᵀK` (`K` itself when
/// square and symmetric), from a fixed all-ones start.
pub fn operator_norm(k: &Dense) -> f64 {
    let n = k.cols();
    if n == 0 || k.rows() == 0 {
        return 0.0;
    }
    let symmetric = k.rows() == n && (0..n).all(|i| (0..i).all(|j| k.get(i, j) == k.get(j, i)));
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut estimate = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let w = if symmetric {
            k.matvec(&v)
        } else {
            k.matvec_t(&k.matvec(&v))
        };
        let norm = norm2(&w);
        if norm == 0.0 {
            return 0.0;
        }
        let next = if symmetric { norm } else { norm.sqrt() };
        v = w.iter().map(|x| x / norm).collect();
        let done = (next - estimate).abs() <= POWER_TOL * next;
        estimate = next;
        if done {
            break;
        }
    }
    estimate
}

/// Solves `(K + λI) α = y` by LU with one round of iterative refinement.
/// Accepts the solution only if `‖(K + λI)α − y‖∞ ≤ 1e−9 · max(1, ‖y‖∞)`.
pub fn ridge_solve(k: &Dense, targets: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let n = k.rows();
    if k.cols() != n {
        return Err(Error::shape(format!(
            "ridge needs a square Gram, got {}×{}",
            n,
            k.cols()
        )));
    }
    if targets.len() != n {
        return Err(Error::shape(format!(
            "{} targets for a {n}×{n} Gram",
            targets.len()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!(
            "regularization must be finite and non-negative, got {lambda}"
        )));
    }
    let mut a = to_nalgebra(k);
    for i in 0..n {
        a[(i, i)] += lambda;
    }
    let y = DVector::from_column_slice(targets);
    let singular = || {
        Error::Solver(format!(
            "K + λI is singular at λ = {lambda:e}; use lambda > 0"
        ))
    };
    let lu = a.clone().lu();
    let mut x = lu.solve(&y).ok_or_else(singular)?;
    let r = &y - &a * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    let residual = (&a * &x - &y).amax();
    let scale = y.amax().max(1.0);
    if !residual.is_finite() || residual > 1e-9 * scale {
        return Err(Error::Solver(format!(
            "ridge residual {residual:e} exceeds tolerance at λ = {lambda:e}; use lambda > 0"
        )));
    }
    Ok(x.iter().copied().collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticSolution {
    pub alpha: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Objective `Σ_r log(1 + exp(−s_r m_r)) + (λ/2)‖α‖²` with margins
/// `m = Kα + offset`, minimized by full-batch gradient descent with step
/// `1 / (‖K‖²/4 + λ)` until the gradient norm drops below `tol`.
pub fn logistic_solve(
    k: &Dense,
    signs: &[f64],
    offsets: &[f64],
    lambda: f64,
    max_iters: usize,
    tol: f64,
) -> Result<LogisticSolution> {
    let n = k.rows();
    if k.cols() != n || signs.len() != n || offsets.len() != n {
        return Err(Error::shape(
            "logistic fit needs a square Gram with one sign and offset per row",
        ));
    }
    let op = operator_norm(k);
    let lipschitz = op * op / 4.0 + lambda;
    if lipschitz == 0.0 {
        return Ok(LogisticSolution {
            alpha: vec![0.0; n],
            iterations: 0,
            grad_norm: 0.0,
            converged: true,
        });
    }
    let step = 1.0 / lipschitz;
    let mut alpha = vec![0.0; n];
    let mut grad_norm = f64::INFINITY;
    for it in 0..max_iters {
        let margins = k.matvec(&alpha);
        // d/dm of log(1 + exp(−s m)) is −s σ(−s m)
        let dm: Vec<f64> = margins
            .iter()
            .zip(offsets)
            .zip(signs)
            .map(|((m, o), s)| -s * sigmoid(-s * (m + o)))
            .collect();
        let mut grad = k.matvec_t(&dm);
        for (g, a) in grad.iter_mut().zip(&alpha) {
            *g += lambda * a;
        }
        grad_norm = norm2(&grad);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric("logistic gradient became non-finite".into()));
        }
        if grad_norm <= tol {
            return Ok(LogisticSolution {
                alpha,
                iterations: it,
                grad_norm,
                converged: true,
            });
        }
        for (a, g) in alpha.iter_mut().zip(&grad) {
            *a -= step * g;
        }
    }
    Ok(LogisticSolution {
        alpha,
        iterations: max_iters,
        grad_norm,
        converged: false,
    })
}

pub fn logistic_objective(
    k: &Dense,
    signs: &[f64],
    offsets: &[f64],
    lambda: f64,
    alpha: &[f64],
) -> f64 {
    let m = k.matvec(alpha);
    let data: f64 = m
        .iter()
        .zip(offsets)
        .zip(signs)
        .map(|((m, o), s)| log1p_exp(-s * (m + o)))
        .sum();
    data + 0.5 * lambda * dot(alpha, alpha)
}

/// Solves `[[I/γ, H], [Hᵀ, I/γ]] [α; β] = [1; 1]` with `H = diag(s) K diag(s)`.
pub fn asymmetric_solve(k: &Dense, signs: &[f64], gamma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = k.rows();
    if k.cols() != n || signs.len() != n {
        return Err(Error::shape(
            "asymmetric fit needs a square Gram and one sign per row",
        ));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::config(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        a[(i, i)] = 1.0 / gamma;
        a[(n + i, n + i)] = 1.0 / gamma;
        for j in 0..n {
            let h = signs[i] * k.get(i, j) * signs[j];
            a[(i, n + j)] = h;
            a[(n + j, i)] = h;
        }
    }
    let rhs = DVector::from_element(2 * n, 1.0);
    let lu = a.clone().lu();
    let fail = |cond: f64| {
        Error::Solver(format!(
            "augmented system is singular at γ = {gamma:e} (condition estimate {cond:e})"
        ))
    };
    let Some(mut x) = lu.solve(&rhs) else {
        return Err(fail(f64::INFINITY));
    };
    if let Some(dx) = lu.solve(&(&rhs - &a * &x)) {
        x += dx;
    }
    let residual = (&a * &x - &rhs).amax();
    if !residual.is_finite() || residual > 1e-9 {
        let sv = a.singular_values();
        let cond = sv.max() / sv.min();
        return Err(fail(cond));
    }
    Ok((
        x.rows(0, n).iter().copied().collect(),
        x.rows(n, n).iter().copied().collect(),
    ))
}
