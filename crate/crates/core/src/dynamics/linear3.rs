use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Dense};

/// `f(ξ) = Vᵀ W U ξ` with `U: n × d`, `W: n × n`, `V: n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear3Instance {
    pub u: Dense,
    pub w: Dense,
    pub v: Vec<f64>,
    pub xi_train: Vec<f64>,
    pub xi_probe: Vec<f64>,
    pub eta_u: f64,
    pub eta_w: f64,
    pub chi: f64,
}

impl Linear3Instance {
    /// Entries scaled so `f = O(1)`: `U ~ N(0, 1/d)`, `W ~ N(0, 1/n)`, `V ~ N(0, 1/n)`.
    pub fn random(n: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Dense::gaussian(n, d, 1.0 / (d as f64).sqrt(), &mut rng);
        let w = Dense::gaussian(n, n, 1.0 / (n as f64).sqrt(), &mut rng);
        let v = Dense::gaussian(n, 1, 1.0 / (n as f64).sqrt(), &mut rng).into_vec();
        let xi_train = Dense::gaussian(d, 1, 1.0, &mut rng).into_vec();
        let xi_probe = Dense::gaussian(d, 1, 1.0, &mut rng).into_vec();
        Self {
            u,
            w,
            v,
            xi_train,
            xi_probe,
            eta_u: rng.random_range(0.01..1.0),
            eta_w: rng.random_range(0.01..1.0),
            chi: rng.random_range(-1.0..1.0),
        }
    }

    pub fn decompose(&self) -> Result<Linear3Terms> {
        linear3_decompose(
            &self.u,
            &self.w,
            &self.v,
            &self.xi_train,
            &self.xi_probe,
            self.eta_u,
            self.eta_w,
            self.chi,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear3Terms {
    /// `Vᵀ ΔW U ξ`.
    pub t1: f64,
    /// `Vᵀ W ΔU ξ`.
    pub t2: f64,
    /// `Vᵀ ΔW ΔU ξ`.
    pub t3: f64,
    /// `f_1(ξ) − f_0(ξ)`, evaluated by two forward passes.
    pub delta_f: f64,
    /// `|Δf − (T1 + T2 + T3)|`.
    pub residual: f64,
    /// `η_W ‖V‖² ⟨Uξ_t, Uξ⟩ + η_U VᵀWWᵀV ⟨ξ_t, ξ⟩`.
    pub kernel: f64,
    /// `|T1 + T2 + χ K(ξ, ξ_t)|`.
    pub kernel_residual: f64,
    /// `η_U η_W χ² ‖V‖² ⟨ξ_t, ξ⟩ f_0(ξ_t)`.
    pub t3_closed_form: f64,
}

fn forward(u: &Dense, w: &Dense, v: &[f64], xi: &[f64]) -> f64 {
    dot(v, &w.matvec(&u.matvec(xi)))
}

/// One SGD step on `(U, W)` of the three-layer linear network with `V`
/// frozen, split into first-order and cross terms.
#[allow(clippy::too_many_arguments)]
pub fn linear3_decompose(
    u: &Dense,
    w: &Dense,
    v: &[f64],
    xi_train: &[f64],
    xi_probe: &[f64],
    eta_u: f64,
    eta_w: f64,
    chi: f64,
) -> Result<Linear3Terms> {
    let (n, d) = (u.rows(), u.cols());
    if w.rows() != n || w.cols() != n || v.len() != n || xi_train.len() != d || xi_probe.len() != d
    {
        return Err(Error::input(format!(
            "shapes do not conform: U {}×{}, W {}×{}, V {}, ξ_t {}, ξ {}",
            n,
            d,
            w.rows(),
            w.cols(),
            v.len(),
            xi_train.len(),
            xi_probe.len()
        )));
    }
    let wt_v = w.matvec_t(v);
    let u_xt = u.matvec(xi_train);
    // ΔU = −η_U χ WᵀV ξ_tᵀ,  ΔW = −η_W χ V (U ξ_t)ᵀ
    let du = Dense::outer(&wt_v, xi_train, -eta_u * chi);
    let dw = Dense::outer(v, &u_xt, -eta_w * chi);

    let u_x = u.matvec(xi_probe);
    let du_x = du.matvec(xi_probe);
    let t1 = dot(v, &dw.matvec(&u_x));
    let t2 = dot(v, &w.matvec(&du_x));
    let t3 = dot(v, &dw.matvec(&du_x));

    let mut u1 = u.clone();
    u1.add_assign(&du);
    let mut w1 = w.clone();
    w1.add_assign(&dw);
    let delta_f = forward(&u1, &w1, v, xi_probe) - forward(u, w, v, xi_probe);

    let v_sq = dot(v, v);
    let xt_x = dot(xi_train, xi_probe);
    let kernel = eta_w * v_sq * dot(&u_xt, &u_x) + eta_u * dot(&wt_v, &wt_v) * xt_x;
    let f0_train = dot(&wt_v, &u_xt);
    Ok(Linear3Terms {
        t1,
        t2,
        t3,
        delta_f,
        residual: (delta_f - (t1 + t2 + t3)).abs(),
        kernel,
        kernel_residual: (t1 + t2 + chi * kernel).abs(),
        t3_closed_form: eta_u * eta_w * chi * chi * v_sq * xt_x * f0_train,
    })
}
