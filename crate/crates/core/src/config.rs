//! Experiment parameters shared by every stage of the pipeline.
//!
//! A [`SystemConfig`] is serialized as a small `key = value` text block. The
//! canonical form (see [`SystemConfig::to_kv_string`]) is what gets hashed and
//! embedded in dataset files, operator exports and network checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub n_antennas: usize,
    pub n_rf: usize,
    /// Pilot channel uses Q.
    pub n_uses: usize,
    pub n_subcarriers: usize,
    /// Hz.
    pub center_freq: f64,
    /// Hz.
    pub bandwidth: f64,
    pub grid_angular: usize,
    pub grid_delay: usize,
    /// Per-antenna noise variance; the transmit SNR is `1 / noise_var`.
    pub noise_var: f64,
    pub n_clusters: usize,
    pub n_subpaths: usize,
    /// Standard deviation of the intra-cluster angle offsets, radians.
    pub angle_spread: f64,
    /// Standard deviation of the intra-cluster delay offsets, seconds.
    pub delay_spread: f64,
    /// Cluster mean delays are drawn from `U[0, max_mean_delay]`, seconds.
    pub max_mean_delay: f64,
    /// Estimator depth L.
    pub n_iterations: usize,
    pub rng_seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        default_config()
    }
}

/// The default system: 32-antenna ULA with 4 RF chains, 4 pilot uses,
/// 32 subcarriers over 4 GHz at 28 GHz, 64x64 angular-delay grid, 10 dB SNR.
pub fn default_config() -> SystemConfig {
    SystemConfig {
        n_antennas: 32,
        n_rf: 4,
        n_uses: 4,
        n_subcarriers: 32,
        center_freq: 28e9,
        bandwidth: 4e9,
        grid_angular: 64,
        grid_delay: 64,
        noise_var: snr_db_to_noise_var(10.0),
        n_clusters: 3,
        n_subpaths: 10,
        angle_spread: 4f64.to_radians(),
        delay_spread: 0.06e-9,
        max_mean_delay: 25e-9,
        n_iterations: 30,
        rng_seed: 2023,
    }
}

/// Reduced system used for desk-scale training and evaluation:
/// N = 16, K = 8, Q = 2, N_RF = 2, G_A = G_D = 16, all else default.
pub fn desk_config() -> SystemConfig {
    SystemConfig {
        n_antennas: 16,
        n_rf: 2,
        n_uses: 2,
        n_subcarriers: 8,
        grid_angular: 16,
        grid_delay: 16,
        ..default_config()
    }
}

pub fn snr_db_to_noise_var(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// f_k = f_c + (k - 1 - (K - 1)/2) * eta, with 1-based k.
pub fn subcarrier_freq(cfg: &SystemConfig, k: usize) -> Result<f64> {
    if k == 0 || k > cfg.n_subcarriers {
        return Err(Error::IndexOutOfRange {
            index: k,
            max: cfg.n_subcarriers,
        });
    }
    Ok(cfg.subcarrier_freq_unchecked(k - 1))
}

impl SystemConfig {
    /// eta = f_s / K.
    pub fn subcarrier_spacing(&self) -> f64 {
        self.bandwidth / self.n_subcarriers as f64
    }

    pub fn snr_db(&self) -> f64 {
        -10.0 * self.noise_var.log10()
    }

    pub fn set_snr_db(&mut self, snr_db: f64) {
        self.noise_var = snr_db_to_noise_var(snr_db);
    }

    /// Offset of 0-based subcarrier `k0` from the band centre in units of eta.
    pub fn subcarrier_offset(&self, k0: usize) -> f64 {
        k0 as f64 - (self.n_subcarriers as f64 - 1.0) / 2.0
    }

    pub(crate) fn subcarrier_freq_unchecked(&self, k0: usize) -> f64 {
        self.center_freq + self.subcarrier_offset(k0) * self.subcarrier_spacing()
    }

    pub fn subcarrier_freqs(&self) -> Vec<f64> {
        (0..self.n_subcarriers)
            .map(|k0| self.subcarrier_freq_unchecked(k0))
            .collect()
    }

    /// Rows per subcarrier, M = Q * N_RF.
    pub fn measurements_per_subcarrier(&self) -> usize {
        self.n_uses * self.n_rf
    }

    /// Total rows of the measurement matrix, K * Q * N_RF.
    pub fn n_measurements(&self) -> usize {
        self.n_subcarriers * self.measurements_per_subcarrier()
    }

    /// G = G_A * G_D.
    pub fn grid_size(&self) -> usize {
        self.grid_angular * self.grid_delay
    }

    pub fn n_paths(&self) -> usize {
        self.n_clusters * self.n_subpaths
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_antennas", self.n_antennas),
            ("n_rf", self.n_rf),
            ("n_uses", self.n_uses),
            ("n_subcarriers", self.n_subcarriers),
            ("grid_angular", self.grid_angular),
            ("grid_delay", self.grid_delay),
            ("n_clusters", self.n_clusters),
            ("n_subpaths", self.n_subpaths),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be finite and > 0, got {v}")))
            }
        };
        positive("bandwidth", self.bandwidth)?;
        positive("noise_var", self.noise_var)?;
        if !(self.center_freq.is_finite() && self.center_freq > self.bandwidth / 2.0) {
            return Err(Error::InvalidConfig(format!(
                "center_freq ({}) must exceed bandwidth/2 ({})",
                self.center_freq,
                self.bandwidth / 2.0
            )));
        }
        let non_negative = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        non_negative("angle_spread", self.angle_spread)?;
        non_negative("delay_spread", self.delay_spread)?;
        non_negative("max_mean_delay", self.max_mean_delay)?;
        Ok(())
    }

    /// Canonical text form. Floats use Rust's shortest round-trip formatting,
    /// so parsing the output reproduces the config bit for bit.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("n_antennas", self.n_antennas.to_string());
        put("n_rf", self.n_rf.to_string());
        put("n_uses", self.n_uses.to_string());
        put("n_subcarriers", self.n_subcarriers.to_string());
        put("center_freq", format!("{:?}", self.center_freq));
        put("bandwidth", format!("{:?}", self.bandwidth));
        put("grid_angular", self.grid_angular.to_string());
        put("grid_delay", self.grid_delay.to_string());
        put("noise_var", format!("{:?}", self.noise_var));
        put("n_clusters", self.n_clusters.to_string());
        put("n_subpaths", self.n_subpaths.to_string());
        put("angle_spread_rad", format!("{:?}", self.angle_spread));
        put("delay_spread", format!("{:?}", self.delay_spread));
        put("max_mean_delay", format!("{:?}", self.max_mean_delay));
        put("n_iterations", self.n_iterations.to_string());
        put("rng_seed", self.rng_seed.to_string());
        s
    }

    /// Parses a `key = value` block on top of the defaults. `#` starts a
    /// comment; blank lines are ignored; unknown keys are rejected.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = default_config();
        cfg.apply_kv_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a `key = value` block on top of `self` without validating.
    pub fn apply_kv_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_kv_string())?;
        Ok(())
    }

    /// Sets one key. Accepts the canonical keys plus the aliases
    /// `snr_db` and `angle_spread_deg`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad value '{value}' for key '{key}'")))
        }
        match key {
            "n_antennas" => self.n_antennas = parse(key, value)?,
            "n_rf" => self.n_rf = parse(key, value)?,
            "n_uses" => self.n_uses = parse(key, value)?,
            "n_subcarriers" => self.n_subcarriers = parse(key, value)?,
            "center_freq" => self.center_freq = parse(key, value)?,
            "bandwidth" => self.bandwidth = parse(key, value)?,
            "grid_angular" => self.grid_angular = parse(key, value)?,
            "grid_delay" => self.grid_delay = parse(key, value)?,
            "noise_var" => self.noise_var = parse(key, value)?,
            "snr_db" => self.set_snr_db(parse(key, value)?),
            "n_clusters" => self.n_clusters = parse(key, value)?,
            "n_subpaths" => self.n_subpaths = parse(key, value)?,
            "angle_spread_rad" => self.angle_spread = parse(key, value)?,
            "angle_spread_deg" => self.angle_spread = parse::<f64>(key, value)?.to_radians(),
            "delay_spread" => self.delay_spread = parse(key, value)?,
            "max_mean_delay" => self.max_mean_delay = parse(key, value)?,
            "n_iterations" => self.n_iterations = parse(key, value)?,
            "rng_seed" => self.rng_seed = parse(key, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hash of everything except the seed, iteration count and noise level.
    /// Two configs with equal physical hashes produce interchangeable
    /// operators and channels up to the random draws.
    pub fn physical_hash(&self) -> String {
        SystemConfig {
            rng_seed: 0,
            n_iterations: 0,
            noise_var: 1.0,
            ..self.clone()
        }
        .hash()
    }
}
