//! One-bit pilot combining, pre-whitening and the angular-delay measurement model.
//!
//! Rows of the stacked observation are ordered subcarrier-major: entry
//! `m + M * k` is row m of the whitened vector at subcarrier k, with
//! `M = Q * N_RF`. Columns follow the AD vec order of [`crate::dictionaries`].

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

use crate::binio::{check_config, Reader, Writer};
use crate::channel::ChannelRealization;
use crate::config::SystemConfig;
use crate::dictionaries::DictionarySet;
use crate::error::{Error, Result};
use crate::rng::complex_normal;
use crate::sbl::AmpOperator;

/// Redraws allowed per channel use before whitening is declared impossible.
pub const MAX_COMBINER_DRAWS: usize = 32;

#[derive(Debug, Clone)]
pub struct PilotCombiner {
    /// W_q, each N_RF x N.
    pub per_use: Vec<DMatrix<Complex64>>,
    /// Stacked W, QN_RF x N.
    pub w: DMatrix<Complex64>,
    /// Block-diagonal lower Cholesky factor with `R = sigma^2 D D^H`.
    pub d: DMatrix<Complex64>,
    /// `D^{-1} W`.
    pub w_bar: DMatrix<Complex64>,
}

impl PilotCombiner {
    /// Builds the whitener for fixed per-use matrices. Fails if any
    /// `W_q W_q^H` is not positive definite.
    pub fn from_blocks(per_use: Vec<DMatrix<Complex64>>) -> Result<Self> {
        let n_rf = per_use[0].nrows();
        let n = per_use[0].ncols();
        let q = per_use.len();
        let mut w = DMatrix::zeros(q * n_rf, n);
        let mut d = DMatrix::zeros(q * n_rf, q * n_rf);
        for (i, wq) in per_use.iter().enumerate() {
            let chol = (wq * wq.adjoint())
                .cholesky()
                .ok_or(Error::Whitening { attempts: 1 })?;
            w.view_mut((i * n_rf, 0), (n_rf, n)).copy_from(wq);
            d.view_mut((i * n_rf, i * n_rf), (n_rf, n_rf))
                .copy_from(&chol.l());
        }
        let w_bar = d
            .solve_lower_triangular(&w)
            .ok_or_else(|| Error::Singular("whitening factor is singular".into()))?;
        Ok(Self {
            per_use,
            w,
            d,
            w_bar,
        })
    }

    pub fn n_uses(&self) -> usize {
        self.per_use.len()
    }

    /// `D^{-1} v`.
    pub fn whiten(&self, v: &DVector<Complex64>) -> DVector<Complex64> {
        self.d
            .solve_lower_triangular(v)
            .expect("whitening factor has a positive diagonal")
    }
}

/// Draws `W` with i.i.d. equiprobable entries in `{+1, -1} / sqrt(N)` and
/// factors the combined-noise covariance. A channel use whose `W_q W_q^H` is
/// rank deficient is redrawn.
pub fn draw_combiner<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Result<PilotCombiner> {
    let (n, n_rf) = (cfg.n_antennas, cfg.n_rf);
    let amp = 1.0 / (n as f64).sqrt();
    let mut blocks = Vec::with_capacity(cfg.n_uses);
    for _ in 0..cfg.n_uses {
        let mut accepted = None;
        for _ in 0..MAX_COMBINER_DRAWS {
            let wq = DMatrix::from_fn(n_rf, n, |_, _| {
                Complex64::new(if rng.random::<bool>() { amp } else { -amp }, 0.0)
            });
            let gram = &wq * wq.adjoint();
            // reject nearly collinear rows as well as exactly dependent ones
            if let Some(ch) = gram.cholesky() {
                let l = ch.l();
                let min_diag = (0..n_rf).map(|i| l[(i, i)].re).fold(f64::INFINITY, f64::min);
                if min_diag > 1e-6 {
                    accepted = Some(wq);
                    break;
                }
            }
        }
        blocks.push(accepted.ok_or(Error::Whitening {
            attempts: MAX_COMBINER_DRAWS,
        })?);
    }
    PilotCombiner::from_blocks(blocks)
}

#[derive(Debug, Clone)]
pub struct MeasurementOperator {
    /// Phi, K Q N_RF x G_A G_D.
    pub phi: DMatrix<Complex64>,
    /// Left singular vectors of Phi.
    pub u: DMatrix<Complex64>,
    /// `A = U^H Phi` with its cached squared magnitudes.
    pub amp: AmpOperator,
    pub rows_per_subcarrier: usize,
    pub n_subcarriers: usize,
}

impl MeasurementOperator {
    pub fn rows(&self) -> usize {
        self.phi.nrows()
    }

    pub fn cols(&self) -> usize {
        self.phi.ncols()
    }

    /// Finishes an operator from Phi: economy SVD for U, then `A = U^H Phi`.
    pub fn from_phi(phi: DMatrix<Complex64>, rows_per_subcarrier: usize) -> Result<Self> {
        let n_subcarriers = phi.nrows() / rows_per_subcarrier.max(1);
        let svd = nalgebra::SVD::try_new(phi.clone(), true, false, f64::EPSILON, 0)
            .ok_or_else(|| Error::Singular("SVD of the measurement matrix did not converge".into()))?;
        let u = svd.u.expect("U requested");
        Self::from_parts(phi, u, rows_per_subcarrier, n_subcarriers)
    }

    fn from_parts(
        phi: DMatrix<Complex64>,
        u: DMatrix<Complex64>,
        rows_per_subcarrier: usize,
        n_subcarriers: usize,
    ) -> Result<Self> {
        let a = u.ad_mul(&phi);
        Ok(Self {
            amp: AmpOperator::new(a),
            phi,
            u,
            rows_per_subcarrier,
            n_subcarriers,
        })
    }

    /// `r = U^H y`.
    pub fn unitary_transform(&self, y: &DVector<Complex64>) -> DVector<Complex64> {
        self.u.ad_mul(y)
    }

    pub fn save(&self, cfg: &SystemConfig, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::new(BufWriter::new(File::create(path)?));
        w.bytes(OPERATOR_MAGIC)?;
        w.u32(FORMAT_VERSION)?;
        w.config(cfg)?;
        w.u32(self.rows_per_subcarrier as u32)?;
        w.matrix(&self.phi)?;
        w.matrix(&self.u)?;
        w.finish()?;
        Ok(())
    }

    /// Loads an exported operator, rejecting files written under a different
    /// physical configuration.
    pub fn load(cfg: &SystemConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut r = Reader::new(BufReader::new(File::open(path)?));
        r.magic(OPERATOR_MAGIC)?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported operator version {version}")));
        }
        let stored = r.config()?;
        check_config(cfg, &stored)?;
        let rows_per = r.u32()? as usize;
        let phi = r.matrix()?;
        let u = r.matrix()?;
        r.expect_end()?;
        if u.nrows() != phi.nrows() || phi.ncols() != cfg.grid_size() || phi.nrows() != cfg.n_measurements() {
            return Err(Error::Format("operator shapes disagree with the config".into()));
        }
        let k = phi.nrows() / rows_per.max(1);
        Self::from_parts(phi, u, rows_per, k)
    }
}

const OPERATOR_MAGIC: &[u8; 8] = b"ASBLOPER";
const FORMAT_VERSION: u32 = 1;

/// `Phi = (I_K kron W_bar) A_A (A_D kron I_{G_A})`, built block by block:
/// rows of subcarrier k, column `a + G_A d`, hold `(W_bar A_A^k)[:, a] * A_D[k, d]`.
pub fn assemble_operator(
    cfg: &SystemConfig,
    comb: &PilotCombiner,
    dicts: &DictionarySet,
) -> Result<MeasurementOperator> {
    let m = cfg.measurements_per_subcarrier();
    let (ga, gd, k) = (cfg.grid_angular, cfg.grid_delay, cfg.n_subcarriers);
    if dicts.n_antennas != cfg.n_antennas
        || dicts.n_subcarriers != k
        || dicts.grid_angular() != ga
        || dicts.grid_delay() != gd
    {
        return Err(Error::Dimension("dictionaries were built under a different config".into()));
    }
    if comb.w_bar.shape() != (m, cfg.n_antennas) {
        return Err(Error::Dimension(format!(
            "combiner is {:?}, expected ({m}, {})",
            comb.w_bar.shape(),
            cfg.n_antennas
        )));
    }
    let mut phi = DMatrix::zeros(k * m, ga * gd);
    for k0 in 0..k {
        let block = &comb.w_bar * &dicts.angular[k0];
        for d in 0..gd {
            let coef = dicts.delay[(k0, d)];
            for a in 0..ga {
                let col = a + ga * d;
                for i in 0..m {
                    phi[(k0 * m + i, col)] = block[(i, a)] * coef;
                }
            }
        }
    }
    MeasurementOperator::from_phi(phi, m)
}

#[derive(Debug, Clone)]
pub struct Observation {
    /// Whitened observations stacked over subcarriers.
    pub y: DVector<Complex64>,
    /// `U^H y`.
    pub r: DVector<Complex64>,
    /// True antenna-frequency channel.
    pub h: DMatrix<Complex64>,
}

impl Observation {
    /// Whitened vector of (0-based) subcarrier `k0`.
    pub fn subcarrier(&self, k0: usize, rows_per_subcarrier: usize) -> DVector<Complex64> {
        self.y.rows(k0 * rows_per_subcarrier, rows_per_subcarrier).into_owned()
    }
}

/// Pilot reception with `s_q^k = 1`: per subcarrier and channel use,
/// `W_q (h^k + n_q^k)`, stacked over uses, whitened by `D^{-1}`, stacked over
/// subcarriers. Noise is drawn subcarrier-major, then per use.
pub fn simulate_observation<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    comb: &PilotCombiner,
    op: &MeasurementOperator,
    channel: &ChannelRealization,
    rng: &mut R,
) -> Observation {
    observe(cfg, comb, op, &channel.h, rng)
}

pub fn observe<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    comb: &PilotCombiner,
    op: &MeasurementOperator,
    h: &DMatrix<Complex64>,
    rng: &mut R,
) -> Observation {
    let n = cfg.n_antennas;
    let n_rf = cfg.n_rf;
    let m = cfg.measurements_per_subcarrier();
    let mut y = DVector::zeros(cfg.n_measurements());
    for k0 in 0..cfg.n_subcarriers {
        let mut yk = DVector::zeros(m);
        for (q, wq) in comb.per_use.iter().enumerate() {
            let noise = DVector::from_fn(n, |_, _| complex_normal(rng, cfg.noise_var));
            let received = h.column(k0) + noise;
            yk.rows_mut(q * n_rf, n_rf).copy_from(&(wq * received));
        }
        y.rows_mut(k0 * m, m).copy_from(&comb.whiten(&yk));
    }
    let r = op.unitary_transform(&y);
    Observation { y, r, h: h.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::desk_config;
    use crate::dictionaries::{build_dictionaries, AngularMode};
    use crate::rng::{substream, Stream};

    #[test]
    fn combiner_entries_and_whitener() {
        let cfg = desk_config();
        let comb = draw_combiner(&cfg, &mut substream(1, Stream::Pilot, &[])).unwrap();
        let amp = 1.0 / (cfg.n_antennas as f64).sqrt();
        for z in comb.w.iter() {
            assert!((z.re.abs() - amp).abs() < 1e-15 && z.im == 0.0);
        }
        for row in comb.w.row_iter() {
            assert!((row.norm() - 1.0).abs() < 1e-14);
        }
        // D^{-1} (R / sigma^2) D^{-H} = I with R / sigma^2 = Blkdiag(W_q W_q^H)
        let m = cfg.measurements_per_subcarrier();
        let mut r = DMatrix::<Complex64>::zeros(m, m);
        for (q, wq) in comb.per_use.iter().enumerate() {
            r.view_mut((q * cfg.n_rf, q * cfg.n_rf), (cfg.n_rf, cfg.n_rf))
                .copy_from(&(wq * wq.adjoint()));
        }
        let dinv_r = comb.d.solve_lower_triangular(&r).unwrap();
        let white = comb.d.solve_lower_triangular(&dinv_r.adjoint()).unwrap();
        assert!((white - DMatrix::identity(m, m)).norm() < 1e-10);
        for i in 0..m {
            assert!(comb.d[(i, i)].re > 0.0 && comb.d[(i, i)].im == 0.0);
        }
    }

    #[test]
    fn rank_deficient_combiner_is_rejected() {
        let row = DMatrix::from_element(1, 4, Complex64::new(0.5, 0.0));
        let wq = DMatrix::from_rows(&[row.row(0).into_owned(), row.row(0).into_owned()]);
        assert!(matches!(
            PilotCombiner::from_blocks(vec![wq]),
            Err(Error::Whitening { .. })
        ));
        // more RF chains than antennas can never be whitened
        let cfg = SystemConfig {
            n_antennas: 2,
            n_rf: 3,
            ..desk_config()
        };
        assert!(draw_combiner(&cfg, &mut substream(0, Stream::Pilot, &[])).is_err());
    }

    #[test]
    fn operator_shape_and_unitary_factor() {
        let cfg = desk_config();
        let comb = draw_combiner(&cfg, &mut substream(2, Stream::Pilot, &[])).unwrap();
        let dicts = build_dictionaries(&cfg, AngularMode::FrequencyDependent);
        let op = assemble_operator(&cfg, &comb, &dicts).unwrap();
        assert_eq!(op.phi.shape(), (32, 256));
        let utu = op.u.ad_mul(&op.u);
        assert!((utu - DMatrix::identity(op.u.ncols(), op.u.ncols())).norm() < 1e-8);
        assert!((op.amp.a.norm() - op.phi.norm()).abs() < 1e-8 * op.phi.norm());
        let y = DVector::from_fn(32, |i, _| Complex64::new(i as f64, 1.0));
        assert!((op.unitary_transform(&y).norm() - y.norm()).abs() < 1e-10 * y.norm());
    }

    #[test]
    fn single_subcarrier_collapses_kronecker() {
        let cfg = SystemConfig {
            n_subcarriers: 1,
            grid_delay: 1,
            ..desk_config()
        };
        let comb = draw_combiner(&cfg, &mut substream(4, Stream::Pilot, &[])).unwrap();
        let dicts = build_dictionaries(&cfg, AngularMode::FrequencyDependent);
        let op = assemble_operator(&cfg, &comb, &dicts).unwrap();
        // K = 1 and G_D = 1 give A_D = [1] and Phi = W_bar A_A^1.
        assert!((dicts.delay[(0, 0)] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        let expect = &comb.w_bar * &dicts.angular[0];
        assert!((&op.phi - expect).norm() < 1e-12);
    }

    #[test]
    fn mismatched_dictionaries_rejected() {
        let cfg = desk_config();
        let comb = draw_combiner(&cfg, &mut substream(2, Stream::Pilot, &[])).unwrap();
        let other = SystemConfig {
            grid_angular: 8,
            ..desk_config()
        };
        let dicts = build_dictionaries(&other, AngularMode::FrequencyDependent);
        assert!(assemble_operator(&cfg, &comb, &dicts).is_err());
    }
}
