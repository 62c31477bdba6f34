//! Clustered wideband mmWave channel with beam squint.
//!
//! Each subpath contributes `alpha * exp(-j 2 pi f_k tau) * a_N((f_k/f_c) sin theta)`
//! at subcarrier k, so the spatial frequency of a path drifts across the band.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::Exp1;

use crate::config::SystemConfig;
use crate::rng::complex_normal;

/// ULA response `[1, e^{-j pi z}, ..., e^{-j pi (n-1) z}] / n`.
pub fn steering_vector(n: usize, z: f64) -> DVector<Complex64> {
    let inv = 1.0 / n as f64;
    DVector::from_iterator(
        n,
        (0..n).map(|m| Complex64::from_polar(inv, -PI * m as f64 * z)),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub mean_angle: f64,
    pub mean_delay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub cluster: usize,
    pub gain: Complex64,
    /// `gain * exp(-j 2 pi f_1 tau)`.
    pub equiv_gain: Complex64,
    pub delay: f64,
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub clusters: Vec<Cluster>,
    pub paths: Vec<Path>,
}

impl PathSet {
    /// Rebuilds the equivalent gains for the lowest subcarrier of `cfg`.
    pub fn refresh_equiv_gains(&mut self, cfg: &SystemConfig) {
        let f1 = cfg.subcarrier_freq_unchecked(0);
        for p in &mut self.paths {
            p.equiv_gain = p.gain * Complex64::from_polar(1.0, -2.0 * PI * f1 * p.delay);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub paths: PathSet,
    /// Antenna-frequency channel, N x K.
    pub h: DMatrix<Complex64>,
}

/// Zero-mean Laplacian with standard deviation `std` (scale `std / sqrt 2`).
pub fn sample_laplacian<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    let b = std / std::f64::consts::SQRT_2;
    let e1: f64 = rng.sample(Exp1);
    let e2: f64 = rng.sample(Exp1);
    b * (e1 - e2)
}

pub fn draw_paths<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> PathSet {
    let mut clusters = Vec::with_capacity(cfg.n_clusters);
    let mut paths = Vec::with_capacity(cfg.n_paths());
    for i in 0..cfg.n_clusters {
        let mean_angle = rng.random::<f64>() * 2.0 * PI;
        let mean_delay = rng.random::<f64>() * cfg.max_mean_delay;
        for _ in 0..cfg.n_subpaths {
            let angle = mean_angle + sample_laplacian(rng, cfg.angle_spread);
            // negative jitter clamps to a zero delay
            let delay = (mean_delay + sample_laplacian(rng, cfg.delay_spread)).max(0.0);
            let gain = complex_normal(rng, 1.0);
            paths.push(Path {
                cluster: i,
                gain,
                equiv_gain: Complex64::new(0.0, 0.0),
                delay,
                angle,
            });
        }
        clusters.push(Cluster {
            mean_angle,
            mean_delay,
        });
    }
    let mut set = PathSet { clusters, paths };
    set.refresh_equiv_gains(cfg);
    set
}

fn path_scale(cfg: &SystemConfig, n_paths: usize) -> f64 {
    (cfg.n_antennas as f64 / n_paths.max(1) as f64).sqrt()
}

/// Per-subcarrier construction with absolute phases `exp(-j 2 pi f_k tau)`.
pub fn build_channel(cfg: &SystemConfig, paths: &PathSet) -> ChannelRealization {
    let n = cfg.n_antennas;
    let scale = path_scale(cfg, paths.paths.len());
    let mut h = DMatrix::<Complex64>::zeros(n, cfg.n_subcarriers);
    for (k0, fk) in cfg.subcarrier_freqs().into_iter().enumerate() {
        let ratio = fk / cfg.center_freq;
        let mut col = h.column_mut(k0);
        for p in &paths.paths {
            let coef = p.gain * Complex64::from_polar(scale, -2.0 * PI * fk * p.delay);
            let a = steering_vector(n, ratio * p.angle.sin());
            col.axpy(coef, &a, Complex64::new(1.0, 0.0));
        }
    }
    ChannelRealization {
        paths: paths.clone(),
        h,
    }
}

/// Squint matrix, `Theta(theta)[n, k] = exp(-j pi n sin(theta) (k - 1 - (K-1)/2) eta / f_c)`.
pub fn squint_matrix(cfg: &SystemConfig, angle: f64) -> DMatrix<Complex64> {
    let s = angle.sin() * cfg.subcarrier_spacing() / cfg.center_freq;
    DMatrix::from_fn(cfg.n_antennas, cfg.n_subcarriers, |n, k0| {
        Complex64::from_polar(1.0, -PI * n as f64 * s * cfg.subcarrier_offset(k0))
    })
}

/// Matrix-form construction: sum of `alpha_bar * (a_N(sin theta) a_K(2 eta tau)^T) .* Theta(theta)`.
///
/// `a_K` carries a `1/K` normalisation that the per-subcarrier form does not,
/// so the sum is rescaled by K to describe the same channel.
pub fn build_channel_matrix_form(cfg: &SystemConfig, paths: &PathSet) -> DMatrix<Complex64> {
    let (n, k) = (cfg.n_antennas, cfg.n_subcarriers);
    let scale = path_scale(cfg, paths.paths.len()) * k as f64;
    let eta = cfg.subcarrier_spacing();
    let mut h = DMatrix::<Complex64>::zeros(n, k);
    for p in &paths.paths {
        let a_ant = steering_vector(n, p.angle.sin());
        let a_freq = steering_vector(k, 2.0 * eta * p.delay);
        let outer = &a_ant * a_freq.transpose();
        let term = outer.component_mul(&squint_matrix(cfg, p.angle));
        h += term * (p.equiv_gain * scale);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{default_config, desk_config};
    use crate::rng::{substream, Stream};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn steering_vector_examples() {
        let v = steering_vector(4, 0.0);
        assert!(v.iter().all(|z| (*z - c(0.25, 0.0)).norm() < 1e-15));
        let v = steering_vector(2, 1.0);
        assert!((v[0] - c(0.5, 0.0)).norm() < 1e-15);
        assert!((v[1] - c(-0.5, 0.0)).norm() < 1e-15);
        for z in [0.3, -0.77, 1.9] {
            let v = steering_vector(32, z);
            assert!((v.norm() - 1.0 / 32f64.sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn draw_is_deterministic() {
        let cfg = default_config();
        let a = draw_paths(&cfg, &mut substream(5, Stream::Channel, &[0]));
        let b = draw_paths(&cfg, &mut substream(5, Stream::Channel, &[0]));
        assert_eq!(a, b);
        assert_eq!(a.paths.len(), 30);
        assert!(a.paths.iter().all(|p| p.delay >= 0.0 && p.gain.is_finite()));
    }

    #[test]
    fn zero_delay_spread_pins_delays() {
        let cfg = SystemConfig {
            delay_spread: 0.0,
            ..default_config()
        };
        let set = draw_paths(&cfg, &mut substream(3, Stream::Channel, &[]));
        for p in &set.paths {
            assert_eq!(p.delay, set.clusters[p.cluster].mean_delay);
        }
    }

    #[test]
    fn single_broadside_path_is_flat() {
        let cfg = SystemConfig {
            n_clusters: 1,
            n_subpaths: 1,
            ..desk_config()
        };
        let mut set = PathSet {
            clusters: vec![Cluster {
                mean_angle: 0.0,
                mean_delay: 0.0,
            }],
            paths: vec![Path {
                cluster: 0,
                gain: c(1.0, 0.0),
                equiv_gain: c(0.0, 0.0),
                delay: 0.0,
                angle: 0.0,
            }],
        };
        set.refresh_equiv_gains(&cfg);
        let ch = build_channel(&cfg, &set);
        let expect = 1.0 / (cfg.n_antennas as f64).sqrt();
        assert!(ch.h.iter().all(|z| (*z - c(expect, 0.0)).norm() < 1e-14));
    }

    #[test]
    fn squint_first_row_is_ones() {
        let cfg = default_config();
        let t = squint_matrix(&cfg, 1.1);
        assert!(t.row(0).iter().all(|z| (*z - c(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn both_constructions_agree() {
        for seed in 0..5 {
            let cfg = default_config();
            let set = draw_paths(&cfg, &mut substream(seed, Stream::Channel, &[]));
            let h6 = build_channel(&cfg, &set).h;
            let h7 = build_channel_matrix_form(&cfg, &set);
            let rel = (&h6 - &h7).norm() / h6.norm();
            assert!(rel < 1e-10, "seed {seed}: rel {rel}");
        }
    }

    #[test]
    fn narrowband_limit_has_no_squint() {
        let cfg = SystemConfig {
            bandwidth: 1e-3,
            ..default_config()
        };
        let t = squint_matrix(&cfg, 0.7);
        assert!(t.iter().all(|z| (*z - c(1.0, 0.0)).norm() < 1e-9));
    }
}
