//! Sparse Bayesian learning as an E-step / M-step loop.
//!
//! Two E-steps (exact Gaussian posterior, AMP) and two M-steps (classic
//! `gamma = |mu|^2 + tau`, learned convolutional update) combine into the four
//! estimators: SBL, AMP-SBL, SBL unfolding and AMP-SBL unfolding.

mod amp;
mod exact;

pub use amp::{amp_e_step, amp_e_step_backward, AmpGrads, AmpOperator, AmpTape};
pub use exact::{exact_e_step, exact_e_step_backward, ExactOperator, ExactOutput, ExactTape};

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::dictionaries::DictionarySet;
use crate::error::{Error, Result};
use crate::eval::nmse;
use crate::learned::MStepNet;
use crate::measurement::MeasurementOperator;

/// `||mu|| > DIVERGENCE_RATIO * ||r||` counts as divergence.
pub const DIVERGENCE_RATIO: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct SblState {
    pub iteration: usize,
    pub mu: DVector<Complex64>,
    pub tau_x: DVector<f64>,
    pub gamma: DVector<f64>,
    /// AMP residual state, one entry per measurement row.
    pub s: DVector<Complex64>,
}

/// `gamma = 1`, `mu = 0`, `s = 0`; `tau_x` starts at the prior variance.
pub fn init_state(grid_size: usize, n_measurements: usize) -> SblState {
    SblState {
        iteration: 0,
        mu: DVector::zeros(grid_size),
        tau_x: DVector::from_element(grid_size, 1.0),
        gamma: DVector::from_element(grid_size, 1.0),
        s: DVector::zeros(n_measurements),
    }
}

/// Line 5 of the AMP E-step weighs `q` by a prior precision; the rest of the
/// pipeline carries variances, so the AMP branch is fed `1 / gamma`.
pub fn variance_to_precision(gamma: &DVector<f64>) -> DVector<f64> {
    gamma.map(|g| 1.0 / g)
}

/// `gamma = |mu|^2 + tau_x`.
pub fn classic_m_step(mu: &DVector<Complex64>, tau_x: &DVector<f64>) -> DVector<f64> {
    mu.zip_map(tau_x, |m, t| m.norm_sqr() + t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EStepKind {
    Exact,
    Amp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MStepKind {
    Classic,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorSpec {
    pub e_step: EStepKind,
    pub m_step: MStepKind,
    pub iterations: usize,
    /// Weight on the new AMP iterate for `mu` and `s`; 1 disables damping.
    pub damping: f64,
}

impl EstimatorSpec {
    pub fn new(e_step: EStepKind, m_step: MStepKind, iterations: usize) -> Self {
        Self {
            e_step,
            m_step,
            iterations,
            damping: 1.0,
        }
    }

    /// Number of per-iteration networks a learned M-step needs. The M-step of
    /// the final iteration never reaches the estimate, so depth L uses L-1.
    pub fn required_layers(&self) -> usize {
        self.iterations.saturating_sub(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    /// NMSE of the reconstructed channel, linear, when a reference is supplied.
    pub nmse: Option<f64>,
    pub gamma_l1: f64,
}

/// Reference channel used to score each iteration.
pub struct TraceTarget<'a> {
    pub dicts: &'a DictionarySet,
    pub h: &'a DMatrix<Complex64>,
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub x_hat: DVector<Complex64>,
    pub state: SblState,
    pub trace: Vec<TraceEntry>,
}

/// Observations fed to an estimator: `y` for the exact E-step, `r = U^H y` for AMP.
#[derive(Debug, Clone, Copy)]
pub struct Measurements<'a> {
    pub y: &'a DVector<Complex64>,
    pub r: &'a DVector<Complex64>,
}

/// Prepared operator views for both E-steps.
#[derive(Debug, Clone)]
pub struct Estimator {
    pub exact: ExactOperator,
    pub amp: AmpOperator,
}

impl Estimator {
    pub fn new(op: &MeasurementOperator) -> Self {
        Self {
            exact: ExactOperator::new(op.phi.clone()),
            amp: op.amp.clone(),
        }
    }

    pub fn grid_size(&self) -> usize {
        self.exact.cols()
    }

    pub fn n_measurements(&self) -> usize {
        self.exact.rows()
    }

    /// Alternates E- and M-steps for `spec.iterations` rounds and returns
    /// `mu` after the last E-step. Divergence errors carry the trace so far.
    pub fn run(
        &self,
        spec: &EstimatorSpec,
        meas: Measurements<'_>,
        sigma2: f64,
        net: Option<&MStepNet>,
        target: Option<TraceTarget<'_>>,
    ) -> Result<Estimate> {
        if spec.m_step == MStepKind::Learned {
            let net = net.ok_or_else(|| {
                Error::InvalidConfig("learned M-step requested without a network".into())
            })?;
            if net.n_layers() != spec.required_layers() {
                return Err(Error::InvalidConfig(format!(
                    "network has {} layers, depth {} needs {}",
                    net.n_layers(),
                    spec.iterations,
                    spec.required_layers()
                )));
            }
        }
        let mut state = init_state(self.grid_size(), self.n_measurements());
        let mut trace = Vec::with_capacity(spec.iterations);
        let guard_norm = match spec.e_step {
            EStepKind::Exact => meas.y.norm(),
            EStepKind::Amp => meas.r.norm(),
        };
        for l in 1..=spec.iterations {
            let step = match spec.e_step {
                EStepKind::Exact => exact_e_step(&self.exact, meas.y, sigma2, state.gamma.as_slice())
                    .map(|out| (out.mu, out.tau, None)),
                EStepKind::Amp => amp_e_step(
                    &self.amp,
                    meas.r,
                    sigma2,
                    &state.mu,
                    &state.tau_x,
                    &state.s,
                    &variance_to_precision(&state.gamma),
                    l,
                )
                .map(|t| (t.mu, t.tau_x, Some(t.s))),
            };
            let (mu, tau_x, s) = match step {
                Ok(v) => v,
                Err(Error::Divergence { .. }) => {
                    return Err(Error::Divergence { iteration: l, trace })
                }
                Err(e) => return Err(e),
            };
            let beta = spec.damping;
            if beta != 1.0 && spec.e_step == EStepKind::Amp {
                state.mu = &mu * Complex64::new(beta, 0.0) + &state.mu * Complex64::new(1.0 - beta, 0.0);
                if let Some(s) = s {
                    state.s = s * Complex64::new(beta, 0.0) + &state.s * Complex64::new(1.0 - beta, 0.0);
                }
            } else {
                state.mu = mu;
                if let Some(s) = s {
                    state.s = s;
                }
            }
            state.tau_x = tau_x;
            state.iteration = l;

            let mu_norm = state.mu.norm();
            if !mu_norm.is_finite() || mu_norm > DIVERGENCE_RATIO * guard_norm {
                return Err(Error::Divergence { iteration: l, trace });
            }

            match spec.m_step {
                MStepKind::Classic => state.gamma = classic_m_step(&state.mu, &state.tau_x),
                MStepKind::Learned if l < spec.iterations => {
                    let net = net.expect("checked above");
                    state.gamma = net.forward(l - 1, &state.mu, &state.tau_x, &state.gamma)?;
                }
                MStepKind::Learned => {}
            }

            let nmse_l = match &target {
                Some(t) => Some(nmse(t.h, &t.dicts.reconstruct_channel(&state.mu)?)?),
                None => None,
            };
            trace.push(TraceEntry {
                iteration: l,
                nmse: nmse_l,
                gamma_l1: state.gamma.iter().map(|g| g.abs()).sum(),
            });
        }
        Ok(Estimate {
            x_hat: state.mu.clone(),
            state,
            trace,
        })
    }
}

/// Convenience wrapper building the operator views on the fly.
pub fn run_estimator(
    spec: &EstimatorSpec,
    op: &MeasurementOperator,
    meas: Measurements<'_>,
    sigma2: f64,
    net: Option<&MStepNet>,
    target: Option<TraceTarget<'_>>,
) -> Result<Estimate> {
    Estimator::new(op).run(spec, meas, sigma2, net, target)
}

/// Writes `iteration,nmse_db,gamma_l1`; iterations without a reference NMSE
/// leave the column empty.
pub fn write_trace_csv(trace: &[TraceEntry], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "nmse_db", "gamma_l1"])?;
    for e in trace {
        w.write_record([
            e.iteration.to_string(),
            e.nmse.map(|v| crate::eval::to_db(v).to_string()).unwrap_or_default(),
            e.gamma_l1.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
