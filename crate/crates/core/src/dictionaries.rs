//! Delay and angular dictionaries, plus the angular-delay <-> antenna-frequency maps.
//!
//! The angular-delay matrix X is `G_A x G_D` and is vectorised column by column
//! (`x[a + G_A * d] = X[a, d]`). The antenna-frequency channel is rebuilt as
//! `Q = X A_D^T` followed by `H[:, k] = A_A^k Q[:, k]`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;

use crate::channel::steering_vector;
use crate::config::SystemConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngularMode {
    /// Per-subcarrier grids pre-distorted by `f_k / f_c`.
    FrequencyDependent,
    /// One common grid for all subcarriers.
    FrequencyIndependent,
}

/// `-1 + (2i - 1) / g` for `i = 1..=g`.
pub fn uniform_grid(g: usize) -> Vec<f64> {
    (1..=g)
        .map(|i| -1.0 + (2 * i - 1) as f64 / g as f64)
        .collect()
}

fn dictionary(order: usize, grid: &[f64]) -> DMatrix<Complex64> {
    let cols: Vec<_> = grid.iter().map(|&z| steering_vector(order, z)).collect();
    DMatrix::from_columns(&cols)
}

#[derive(Debug, Clone)]
pub struct DictionarySet {
    pub mode: AngularMode,
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    pub delay_grid: Vec<f64>,
    /// One angular grid per subcarrier.
    pub angular_grids: Vec<Vec<f64>>,
    /// K x G_D.
    pub delay: DMatrix<Complex64>,
    /// One N x G_A matrix per subcarrier.
    pub angular: Vec<DMatrix<Complex64>>,
}

pub fn build_dictionaries(cfg: &SystemConfig, mode: AngularMode) -> DictionarySet {
    let delay_grid = uniform_grid(cfg.grid_delay);
    let base = uniform_grid(cfg.grid_angular);
    let angular_grids: Vec<Vec<f64>> = cfg
        .subcarrier_freqs()
        .into_iter()
        .map(|fk| match mode {
            AngularMode::FrequencyDependent => {
                let ratio = fk / cfg.center_freq;
                base.iter().map(|v| ratio * v).collect()
            }
            AngularMode::FrequencyIndependent => base.clone(),
        })
        .collect();
    let angular = angular_grids
        .iter()
        .map(|g| dictionary(cfg.n_antennas, g))
        .collect();
    DictionarySet {
        mode,
        n_antennas: cfg.n_antennas,
        n_subcarriers: cfg.n_subcarriers,
        delay: dictionary(cfg.n_subcarriers, &delay_grid),
        delay_grid,
        angular_grids,
        angular,
    }
}

impl DictionarySet {
    pub fn grid_angular(&self) -> usize {
        self.angular[0].ncols()
    }

    pub fn grid_delay(&self) -> usize {
        self.delay.ncols()
    }

    pub fn grid_size(&self) -> usize {
        self.grid_angular() * self.grid_delay()
    }

    /// `Blkdiag(A_A^1, ..., A_A^K)`, NK x K G_A.
    pub fn angular_block_diag(&self) -> DMatrix<Complex64> {
        let (n, ga, k) = (self.n_antennas, self.grid_angular(), self.n_subcarriers);
        let mut out = DMatrix::zeros(n * k, ga * k);
        for (k0, a) in self.angular.iter().enumerate() {
            out.view_mut((k0 * n, k0 * ga), (n, ga)).copy_from(a);
        }
        out
    }

    fn check_len(&self, x: &DVector<Complex64>) -> Result<()> {
        if x.len() != self.grid_size() {
            return Err(Error::Dimension(format!(
                "angular-delay vector has length {}, expected {}",
                x.len(),
                self.grid_size()
            )));
        }
        Ok(())
    }

    /// Reshapes a vectorised AD channel back to `G_A x G_D`.
    pub fn unvec(&self, x: &DVector<Complex64>) -> Result<DMatrix<Complex64>> {
        self.check_len(x)?;
        Ok(DMatrix::from_column_slice(
            self.grid_angular(),
            self.grid_delay(),
            x.as_slice(),
        ))
    }

    /// AD vector to antenna-frequency channel (N x K).
    pub fn reconstruct_channel(&self, x: &DVector<Complex64>) -> Result<DMatrix<Complex64>> {
        let xm = self.unvec(x)?;
        let q = xm * self.delay.transpose();
        let mut h = DMatrix::zeros(self.n_antennas, self.n_subcarriers);
        for (k0, a) in self.angular.iter().enumerate() {
            h.set_column(k0, &(a * q.column(k0)));
        }
        Ok(h)
    }

    /// Adjoint of [`Self::reconstruct_channel`]: maps an N x K matrix back to a
    /// length-G vector.
    pub fn reconstruct_adjoint(&self, g: &DMatrix<Complex64>) -> Result<DVector<Complex64>> {
        if g.shape() != (self.n_antennas, self.n_subcarriers) {
            return Err(Error::Dimension(format!(
                "channel is {:?}, expected ({}, {})",
                g.shape(),
                self.n_antennas,
                self.n_subcarriers
            )));
        }
        let mut q = DMatrix::zeros(self.grid_angular(), self.n_subcarriers);
        for (k0, a) in self.angular.iter().enumerate() {
            q.set_column(k0, &a.ad_mul(&g.column(k0)));
        }
        let gx = q * self.delay.map(|z| z.conj());
        Ok(DVector::from_column_slice(gx.as_slice()))
    }

    /// Explicit NK x G reconstruction matrix; column m is the vectorised channel
    /// of atom m. Intended for tests and small configurations.
    pub fn reconstruction_matrix(&self) -> DMatrix<Complex64> {
        let (n, k, ga) = (self.n_antennas, self.n_subcarriers, self.grid_angular());
        DMatrix::from_fn(n * k, self.grid_size(), |row, m| {
            let (ant, k0) = (row % n, row / n);
            let (a, d) = (m % ga, m / ga);
            self.angular[k0][(ant, a)] * self.delay[(k0, d)]
        })
    }
}

/// Ridge least-squares projection of a channel onto the dictionary pair,
/// `x = Psi^H (Psi Psi^H + lambda I)^{-1} vec(H)`.
///
/// The Gram `Psi Psi^H` is assembled block-wise from
/// `(A_A^k A_A^{k'H}) * (A_D A_D^H)[k, k']`, so the NK x G matrix is never formed.
pub struct RidgeProjector {
    dicts: DictionarySet,
    chol: Cholesky<Complex64, Dyn>,
    pub lambda: f64,
}

impl RidgeProjector {
    /// `lambda = rel * trace(Psi Psi^H) / (N K)`.
    pub fn new(dicts: &DictionarySet, rel: f64) -> Result<Self> {
        let (n, k) = (dicts.n_antennas, dicts.n_subcarriers);
        let dd = &dicts.delay * dicts.delay.adjoint();
        let mut gram = DMatrix::<Complex64>::zeros(n * k, n * k);
        for k1 in 0..k {
            for k2 in 0..=k1 {
                let block = (&dicts.angular[k1] * dicts.angular[k2].adjoint()) * dd[(k1, k2)];
                gram.view_mut((k1 * n, k2 * n), (n, n)).copy_from(&block);
                if k1 != k2 {
                    gram.view_mut((k2 * n, k1 * n), (n, n))
                        .copy_from(&block.adjoint());
                }
            }
        }
        let trace: f64 = (0..n * k).map(|i| gram[(i, i)].re).sum();
        let lambda = rel * trace / (n * k) as f64;
        for i in 0..n * k {
            gram[(i, i)] += Complex64::new(lambda, 0.0);
        }
        let chol = Cholesky::new(gram)
            .ok_or_else(|| Error::Singular("ridge Gram matrix is not positive definite".into()))?;
        Ok(Self {
            dicts: dicts.clone(),
            chol,
            lambda,
        })
    }

    pub fn project(&self, h: &DMatrix<Complex64>) -> Result<DVector<Complex64>> {
        let (n, k) = (self.dicts.n_antennas, self.dicts.n_subcarriers);
        if h.shape() != (n, k) {
            return Err(Error::Dimension(format!("channel is {:?}, expected ({n}, {k})", h.shape())));
        }
        let z = self.chol.solve(&DVector::from_column_slice(h.as_slice()));
        self.dicts
            .reconstruct_adjoint(&DMatrix::from_column_slice(n, k, z.as_slice()))
    }
}

/// Number of atoms that make up the top 1% of the grid.
pub fn sparsity_budget(grid_size: usize) -> usize {
    grid_size.div_ceil(100).max(1)
}

/// Energy concentration of `h` in the dictionary pair: the fraction of
/// `||H||_F^2` captured by the best `ceil(G / 100)`-atom representation,
/// found by orthogonal matching pursuit. 1 means the channel is exactly a
/// combination of 1% of the atoms.
pub fn sparsity_score(dicts: &DictionarySet, h: &DMatrix<Complex64>) -> Result<f64> {
    let (n, k) = (dicts.n_antennas, dicts.n_subcarriers);
    if h.shape() != (n, k) {
        return Err(Error::Dimension(format!("channel is {:?}, expected ({n}, {k})", h.shape())));
    }
    let total = h.norm_squared();
    if total == 0.0 {
        return Ok(1.0);
    }
    let budget = sparsity_budget(dicts.grid_size());
    let ga = dicts.grid_angular();
    let mut residual = h.clone();
    let mut basis: Vec<DVector<Complex64>> = Vec::with_capacity(budget);
    let mut chosen = vec![false; dicts.grid_size()];
    for _ in 0..budget {
        let corr = dicts.reconstruct_adjoint(&residual)?;
        let best = corr
            .iter()
            .enumerate()
            .filter(|(m, _)| !chosen[*m])
            .max_by(|a, b| a.1.norm_sqr().total_cmp(&b.1.norm_sqr()))
            .map(|(m, _)| m);
        let Some(m) = best else { break };
        chosen[m] = true;
        let (a, d) = (m % ga, m / ga);
        let mut atom = DVector::from_fn(n * k, |row, _| {
            dicts.angular[row / n][(row % n, a)] * dicts.delay[(row / n, d)]
        });
        // Gram-Schmidt twice for stability with closely spaced atoms.
        for _ in 0..2 {
            for b in &basis {
                let c = b.dotc(&atom);
                atom.axpy(-c, b, Complex64::new(1.0, 0.0));
            }
        }
        let norm = atom.norm();
        if norm < 1e-12 {
            continue;
        }
        atom.unscale_mut(norm);
        let mut r = DVector::from_column_slice(residual.as_slice());
        let c = atom.dotc(&r);
        r.axpy(-c, &atom, Complex64::new(1.0, 0.0));
        residual = DMatrix::from_column_slice(n, k, r.as_slice());
        basis.push(atom);
    }
    Ok(1.0 - residual.norm_squared() / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{default_config, desk_config};

    #[test]
    fn delay_grid_example() {
        let g = uniform_grid(4);
        assert_eq!(g, vec![-0.75, -0.25, 0.25, 0.75]);
    }

    #[test]
    fn frequency_dependent_grid_scaling() {
        let cfg = default_config();
        let d = build_dictionaries(&cfg, AngularMode::FrequencyDependent);
        for i in 1..=64usize {
            let expect = (29.9375 / 28.0) * (-1.0 + (2 * i - 1) as f64 / 64.0);
            assert!((d.angular_grids[31][i - 1] - expect).abs() < 1e-14);
        }
        for w in d.angular_grids[0].windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn centre_subcarrier_matches_common_grid() {
        let cfg = SystemConfig {
            n_subcarriers: 5,
            ..desk_config()
        };
        let fd = build_dictionaries(&cfg, AngularMode::FrequencyDependent);
        let fi = build_dictionaries(&cfg, AngularMode::FrequencyIndependent);
        assert_eq!(fd.angular_grids[2], fi.angular_grids[2]);
        let g = &fi.angular_grids[0];
        for i in 0..g.len() {
            assert!((g[i] + g[g.len() - 1 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn columns_have_steering_norms() {
        let cfg = desk_config();
        let d = build_dictionaries(&cfg, AngularMode::FrequencyDependent);
        for col in d.delay.column_iter() {
            assert!((col.norm() - 1.0 / (cfg.n_subcarriers as f64).sqrt()).abs() < 1e-14);
        }
        for col in d.angular[3].column_iter() {
            assert!((col.norm() - 1.0 / (cfg.n_antennas as f64).sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn reconstruct_zero_and_length_checks() {
        let cfg = desk_config();
        let d = build_dictionaries(&cfg, AngularMode::FrequencyDependent);
        let h = d.reconstruct_channel(&DVector::zeros(cfg.grid_size())).unwrap();
        assert_eq!(h.norm(), 0.0);
        assert!(d.reconstruct_channel(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn explicit_matrix_agrees_with_structured_maps() {
        let cfg = SystemConfig {
            n_antennas: 6,
            n_subcarriers: 4,
            grid_angular: 8,
            grid_delay: 6,
            ..default_config()
        };
        let d = build_dictionaries(&cfg, AngularMode::FrequencyDependent);
        let psi = d.reconstruction_matrix();
        let x = DVector::from_fn(48, |i, _| Complex64::new((i as f64).sin(), (i as f64 * 0.3).cos()));
        let h = d.reconstruct_channel(&x).unwrap();
        let hv = &psi * &x;
        assert!((DVector::from_column_slice(h.as_slice()) - hv).norm() < 1e-12);

        let g = DMatrix::from_fn(6, 4, |i, j| Complex64::new(i as f64 - 1.0, j as f64 * 0.5));
        let adj = d.reconstruct_adjoint(&g).unwrap();
        let direct = psi.ad_mul(&DVector::from_column_slice(g.as_slice()));
        assert!((adj - direct).norm() < 1e-12);
    }

    #[test]
    fn delay_phase_wraps_with_period_two() {
        let a = steering_vector(8, 0.37);
        let b = steering_vector(8, 2.37);
        assert!((a - b).norm() < 1e-12);
    }
}
