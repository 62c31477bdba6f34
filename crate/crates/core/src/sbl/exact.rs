//! Exact Gaussian E-step and its reverse-mode derivative with respect to gamma.
//!
//! With `C = Phi diag(gamma) Phi^H + sigma^2 I = L L^H` and `W = L^{-1} Phi`:
//! `mu = gamma .* (W^H L^{-1} y)` and `tau = gamma - gamma^2 .* colnorm2(W)`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{left_mul_stacked, stack_parts, unstack_parts, weighted_gram};

/// Phi together with its stacked real/imaginary parts, reused across iterations.
#[derive(Debug, Clone)]
pub struct ExactOperator {
    pub phi: DMatrix<Complex64>,
    stacked: DMatrix<f64>,
}

impl ExactOperator {
    pub fn new(phi: DMatrix<Complex64>) -> Self {
        let stacked = stack_parts(&phi);
        Self { phi, stacked }
    }

    pub fn rows(&self) -> usize {
        self.phi.nrows()
    }

    pub fn cols(&self) -> usize {
        self.phi.ncols()
    }
}

/// Quantities kept from the forward pass for [`exact_e_step_backward`].
#[derive(Debug, Clone)]
pub struct ExactTape {
    pub gamma: Vec<f64>,
    /// `Phi^H C^{-1} y`.
    pub z: DVector<Complex64>,
    /// `diag(Phi^H C^{-1} Phi)`.
    pub d: Vec<f64>,
    /// `L^{-1} Phi`, stacked real/imag.
    w_stacked: DMatrix<f64>,
    w: DMatrix<Complex64>,
}

#[derive(Debug, Clone)]
pub struct ExactOutput {
    pub mu: DVector<Complex64>,
    pub tau: DVector<f64>,
    pub tape: ExactTape,
}

pub fn exact_e_step(
    op: &ExactOperator,
    y: &DVector<Complex64>,
    sigma2: f64,
    gamma: &[f64],
) -> Result<ExactOutput> {
    let (m, g) = (op.rows(), op.cols());
    if y.len() != m || gamma.len() != g {
        return Err(Error::Dimension(format!(
            "exact E-step: Phi is {m}x{g}, y has {}, gamma has {}",
            y.len(),
            gamma.len()
        )));
    }
    let mut c = weighted_gram(&op.stacked, gamma);
    for i in 0..m {
        c[(i, i)] += Complex64::new(sigma2, 0.0);
    }
    let chol = c
        .cholesky()
        .ok_or_else(|| Error::Singular("Phi R_x Phi^H + sigma^2 I is not positive definite".into()))?;
    let l = chol.l();
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(m, m))
        .ok_or_else(|| Error::Singular("Cholesky factor is singular".into()))?;
    let w_stacked = left_mul_stacked(&l_inv, &op.stacked);
    let w = unstack_parts(&w_stacked);
    let v = &l_inv * y;
    let z = w.ad_mul(&v);
    let d: Vec<f64> = w.column_iter().map(|col| col.norm_squared()).collect();

    let mu = DVector::from_fn(g, |j, _| z[j] * gamma[j]);
    let tau = DVector::from_fn(g, |j, _| {
        let t = gamma[j] - gamma[j] * gamma[j] * d[j];
        // rounding can push tau a hair outside [0, gamma]
        t.clamp(0.0, gamma[j])
    });
    Ok(ExactOutput {
        mu,
        tau,
        tape: ExactTape {
            gamma: gamma.to_vec(),
            z,
            d,
            w_stacked,
            w,
        },
    })
}

/// Gradient with respect to gamma given upstream gradients on `mu`
/// (as `dL/dRe + i dL/dIm`) and on `tau`.
pub fn exact_e_step_backward(
    tape: &ExactTape,
    g_mu: &DVector<Complex64>,
    g_tau: &[f64],
) -> Vec<f64> {
    let gamma = &tape.gamma;
    let g = gamma.len();
    let w = &tape.w;

    // sum_i conj(g_mu_i) gamma_i P_ij = (W^T e)_j with e = conj(W (gamma .* g_mu))
    let scaled = DVector::from_fn(g, |i, _| g_mu[i] * gamma[i]);
    let e = (w * scaled).map(|v| v.conj());
    let t = w.tr_mul(&e);

    // sum_i b_i |P_ij|^2 = W_j^H (W diag(b) W^H) W_j with b = g_tau .* gamma^2
    let b: Vec<f64> = (0..g).map(|i| g_tau[i] * gamma[i] * gamma[i]).collect();
    let tmat = weighted_gram(&tape.w_stacked, &b);
    let tw = unstack_parts(&left_mul_stacked(&tmat, &tape.w_stacked));

    (0..g)
        .map(|j| {
            let zj = tape.z[j];
            let quad: f64 = w
                .column(j)
                .iter()
                .zip(tw.column(j).iter())
                .map(|(a, b)| (a.conj() * b).re)
                .sum();
            (g_mu[j].conj() * zj).re - (t[j] * zj).re + g_tau[j] * (1.0 - 2.0 * gamma[j] * tape.d[j])
                + quad
        })
        .collect()
}
