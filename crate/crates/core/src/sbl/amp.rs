//! AMP E-step on the unitarily transformed model `r = A x + w`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AmpOperator {
    /// A, R x G.
    pub a: DMatrix<Complex64>,
    /// `A^H`, kept explicitly so both products stream contiguous memory.
    pub a_adj: DMatrix<Complex64>,
    /// `|A|.^2`, R x G.
    pub a_sq: DMatrix<f64>,
    /// `|A^H|.^2`, G x R.
    pub a_adj_sq: DMatrix<f64>,
}

impl AmpOperator {
    pub fn new(a: DMatrix<Complex64>) -> Self {
        let a_adj = a.adjoint();
        let a_sq = a.map(|z| z.norm_sqr());
        let a_adj_sq = a_sq.transpose();
        Self {
            a,
            a_adj,
            a_sq,
            a_adj_sq,
        }
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn cols(&self) -> usize {
        self.a.ncols()
    }
}

/// Every intermediate of one AMP E-step, in the order they are computed.
#[derive(Debug, Clone)]
pub struct AmpTape {
    pub mu_prev: DVector<Complex64>,
    pub tau_x_prev: DVector<f64>,
    pub s_prev: DVector<Complex64>,
    pub gamma: DVector<f64>,
    pub tau_p: DVector<f64>,
    pub p: DVector<Complex64>,
    pub tau_s: DVector<f64>,
    pub s: DVector<Complex64>,
    pub tau_q: DVector<f64>,
    /// `A^H s`.
    pub a_adj_s: DVector<Complex64>,
    pub q: DVector<Complex64>,
    pub mu: DVector<Complex64>,
    pub tau_x: DVector<f64>,
}

/// One AMP E-step:
///
/// 1. `tau_p = |A|^2 tau_x`
/// 2. `p = A mu - tau_p .* s`, `tau_s = 1 / (tau_p + sigma^2)`
/// 3. `s' = tau_s .* (r - p)`, `tau_q = 1 / (|A^H|^2 tau_s)`
/// 4. `q = mu + tau_q .* (A^H s')`
/// 5. `mu' = q / (1 + tau_q gamma)`, `tau_x' = tau_q / (1 + tau_q gamma)`
///
/// Non-finite intermediates are reported as divergence at `iteration`.
pub fn amp_e_step(
    op: &AmpOperator,
    r: &DVector<Complex64>,
    sigma2: f64,
    mu: &DVector<Complex64>,
    tau_x: &DVector<f64>,
    s: &DVector<Complex64>,
    gamma: &DVector<f64>,
    iteration: usize,
) -> Result<AmpTape> {
    let (rows, cols) = (op.rows(), op.cols());
    if r.len() != rows || s.len() != rows || mu.len() != cols || tau_x.len() != cols || gamma.len() != cols {
        return Err(Error::Dimension(format!(
            "AMP E-step: A is {rows}x{cols}, got r {}, s {}, mu {}, tau_x {}, gamma {}",
            r.len(),
            s.len(),
            mu.len(),
            tau_x.len(),
            gamma.len()
        )));
    }
    let tau_p = &op.a_sq * tau_x;
    let p = &op.a * mu - s.zip_map(&tau_p, |si, tp| si * tp);
    let tau_s = tau_p.map(|tp| 1.0 / (tp + sigma2));
    let s_new = (r - &p).zip_map(&tau_s, |v, ts| v * ts);
    let tau_q = (&op.a_adj_sq * &tau_s).map(|v| 1.0 / v);
    let a_adj_s = &op.a_adj * &s_new;
    let q = mu + a_adj_s.zip_map(&tau_q, |v, tq| v * tq);
    let den = tau_q.zip_map(gamma, |tq, g| 1.0 + tq * g);
    let mu_new = q.zip_map(&den, |qi, di| qi / di);
    let tau_x_new = tau_q.zip_map(&den, |tq, di| tq / di);

    let finite = tau_p.iter().all(|v| v.is_finite())
        && tau_s.iter().all(|v| v.is_finite())
        && tau_q.iter().all(|v| v.is_finite())
        && s_new.iter().all(|v| v.is_finite())
        && mu_new.iter().all(|v| v.is_finite())
        && tau_x_new.iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::Divergence {
            iteration,
            trace: Vec::new(),
        });
    }
    Ok(AmpTape {
        mu_prev: mu.clone(),
        tau_x_prev: tau_x.clone(),
        s_prev: s.clone(),
        gamma: gamma.clone(),
        tau_p,
        p,
        tau_s,
        s: s_new,
        tau_q,
        a_adj_s,
        q,
        mu: mu_new,
        tau_x: tau_x_new,
    })
}

/// Gradients flowing back out of one AMP E-step.
#[derive(Debug, Clone)]
pub struct AmpGrads {
    pub mu_prev: DVector<Complex64>,
    pub tau_x_prev: DVector<f64>,
    pub s_prev: DVector<Complex64>,
    pub gamma: DVector<f64>,
}

/// Reverse-mode pass through the five lines of [`amp_e_step`]. Complex
/// gradients use the `dL/dRe + i dL/dIm` convention.
pub fn amp_e_step_backward(
    op: &AmpOperator,
    r: &DVector<Complex64>,
    tape: &AmpTape,
    g_mu: &DVector<Complex64>,
    g_tau_x: &DVector<f64>,
    g_s: &DVector<Complex64>,
) -> AmpGrads {
    let cols = op.cols();
    let rows = op.rows();

    // line 5
    let den = tape.tau_q.zip_map(&tape.gamma, |tq, g| 1.0 + tq * g);
    let mut g_q = DVector::<Complex64>::zeros(cols);
    let mut g_tau_q = DVector::<f64>::zeros(cols);
    let mut g_gamma = DVector::<f64>::zeros(cols);
    for j in 0..cols {
        let inv = 1.0 / den[j];
        g_q[j] = g_mu[j] * inv;
        let g_inv = (g_mu[j].conj() * tape.q[j]).re + g_tau_x[j] * tape.tau_q[j];
        g_tau_q[j] = g_tau_x[j] * inv;
        let g_den = -g_inv * inv * inv;
        g_tau_q[j] += g_den * tape.gamma[j];
        g_gamma[j] = g_den * tape.tau_q[j];
    }

    // line 4
    let mut g_mu_prev = g_q.clone();
    let mut g_a_adj_s = DVector::<Complex64>::zeros(cols);
    for j in 0..cols {
        g_tau_q[j] += (g_q[j].conj() * tape.a_adj_s[j]).re;
        g_a_adj_s[j] = g_q[j] * tape.tau_q[j];
    }
    let g_s_new = g_s + &op.a * g_a_adj_s;

    // line 3, tau_q = 1 / v with v = |A^H|^2 tau_s
    let g_v = DVector::from_fn(cols, |j, _| -g_tau_q[j] * tape.tau_q[j] * tape.tau_q[j]);
    let mut g_tau_s = op.a_adj_sq.tr_mul(&g_v);
    let mut g_p = DVector::<Complex64>::zeros(rows);
    for i in 0..rows {
        let resid = r[i] - tape.p[i];
        g_tau_s[i] += (g_s_new[i].conj() * resid).re;
        g_p[i] = -g_s_new[i] * tape.tau_s[i];
    }

    // line 2
    let mut g_tau_p = DVector::from_fn(rows, |i, _| -g_tau_s[i] * tape.tau_s[i] * tape.tau_s[i]);
    g_mu_prev += &op.a_adj * &g_p;
    let mut g_s_prev = DVector::<Complex64>::zeros(rows);
    for i in 0..rows {
        g_tau_p[i] -= (g_p[i].conj() * tape.s_prev[i]).re;
        g_s_prev[i] = -g_p[i] * tape.tau_p[i];
    }

    // line 1
    let g_tau_x_prev = op.a_sq.tr_mul(&g_tau_p);

    AmpGrads {
        mu_prev: g_mu_prev,
        tau_x_prev: g_tau_x_prev,
        s_prev: g_s_prev,
        gamma: g_gamma,
    }
}
