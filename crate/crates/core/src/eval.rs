//! NMSE scoring, FLOPs accounting and paired sweeps.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::config::{snr_db_to_noise_var, SystemConfig};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::learned::MStepNet;
use crate::rng::{substream, Stream};
use crate::sbl::{EStepKind, EstimatorSpec, MStepKind, Measurements};
use crate::system::System;

/// Reported NMSE for a perfect reconstruction.
pub const NMSE_FLOOR_DB: f64 = -120.0;

/// `||H - H_hat||_F^2 / ||H||_F^2`.
pub fn nmse(h: &DMatrix<Complex64>, h_hat: &DMatrix<Complex64>) -> Result<f64> {
    if h.shape() != h_hat.shape() {
        return Err(Error::Dimension(format!(
            "nmse: truth is {:?}, estimate is {:?}",
            h.shape(),
            h_hat.shape()
        )));
    }
    let den = h.norm_squared();
    if den == 0.0 {
        return Err(Error::InvalidConfig("nmse of an all-zero channel is undefined".into()));
    }
    Ok((h - h_hat).norm_squared() / den)
}

pub fn to_db(v: f64) -> f64 {
    if v <= 0.0 {
        NMSE_FLOOR_DB
    } else {
        (10.0 * v.log10()).max(NMSE_FLOOR_DB)
    }
}

/// Averages linear ratios first, then converts.
pub fn mean_db(ratios: &[f64]) -> f64 {
    if ratios.is_empty() {
        return f64::NAN;
    }
    to_db(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

// ---------------------------------------------------------------- FLOPs

/// Rows of the complexity table plus the classic AMP-SBL, which has no row of
/// its own and is counted as the unfolded variant minus its network.
pub const FLOPS_ALGORITHMS: [&str; 7] = [
    "sbl",
    "sbl-unfolding",
    "amp-sbl",
    "amp-sbl-unfolding",
    "sbl-af",
    "sbl-af-fid",
    "lista-reference",
];

/// Real FLOPs of one network M-step per grid point.
pub const NET_FLOPS_PER_PIXEL: u64 = 432;

struct Dims {
    k: u64,
    m: u64,
    n: u64,
    g: u64,
    ga: u64,
}

fn dims(cfg: &SystemConfig) -> Dims {
    Dims {
        k: cfg.n_subcarriers as u64,
        m: cfg.measurements_per_subcarrier() as u64,
        n: cfg.n_antennas as u64,
        g: cfg.grid_size() as u64,
        ga: cfg.grid_angular as u64,
    }
}

pub fn flops_per_iteration(algo: &str, cfg: &SystemConfig) -> Result<u64> {
    let Dims { k, m, n, g, ga } = dims(cfg);
    let km = k * m;
    Ok(match algo {
        "sbl" => 16 * km * km * g,
        "sbl-unfolding" => (16 * km * km + NET_FLOPS_PER_PIXEL) * g,
        "amp-sbl" => 20 * km * g,
        "amp-sbl-unfolding" => (20 * km + NET_FLOPS_PER_PIXEL) * g,
        "sbl-af" => 16 * k * m * m * ga,
        "sbl-af-fid" => 16 * m * m * ga + 8 * k * m * ga,
        "lista-reference" => 4 * k * ((4 * m + 256) * n + 32768),
        other => return Err(Error::UnknownAlgorithm(other.to_string())),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconstructionFamily {
    AngularFrequency,
    AngularDelay,
}

pub fn reconstruction_flops(family: ReconstructionFamily, cfg: &SystemConfig) -> u64 {
    let Dims { k, n, g, ga, .. } = dims(cfg);
    match family {
        ReconstructionFamily::AngularFrequency => 8 * k * ga * n,
        ReconstructionFamily::AngularDelay => 8 * k * ga * n + 8 * k * g,
    }
}

// ---------------------------------------------------------------- algorithms

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algo {
    Sbl,
    AmpSbl,
    SblUnfolding,
    AmpSblUnfolding,
}

impl Algo {
    pub const ALL: [Algo; 4] = [Algo::Sbl, Algo::AmpSbl, Algo::SblUnfolding, Algo::AmpSblUnfolding];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Sbl => "sbl",
            Algo::AmpSbl => "amp-sbl",
            Algo::SblUnfolding => "sbl-unfolding",
            Algo::AmpSblUnfolding => "amp-sbl-unfolding",
        }
    }

    pub fn e_step(self) -> EStepKind {
        match self {
            Algo::Sbl | Algo::SblUnfolding => EStepKind::Exact,
            Algo::AmpSbl | Algo::AmpSblUnfolding => EStepKind::Amp,
        }
    }

    pub fn m_step(self) -> MStepKind {
        match self {
            Algo::Sbl | Algo::AmpSbl => MStepKind::Classic,
            Algo::SblUnfolding | Algo::AmpSblUnfolding => MStepKind::Learned,
        }
    }

    pub fn is_learned(self) -> bool {
        self.m_step() == MStepKind::Learned
    }

    pub fn from_parts(e: EStepKind, m: MStepKind) -> Self {
        match (e, m) {
            (EStepKind::Exact, MStepKind::Classic) => Algo::Sbl,
            (EStepKind::Amp, MStepKind::Classic) => Algo::AmpSbl,
            (EStepKind::Exact, MStepKind::Learned) => Algo::SblUnfolding,
            (EStepKind::Amp, MStepKind::Learned) => Algo::AmpSblUnfolding,
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownAlgorithm(s.to_string()))
    }
}

/// One estimator to score: classic variants run `iterations` rounds, learned
/// ones take their depth from the network.
#[derive(Debug, Clone, Copy)]
pub struct AlgoRun<'a> {
    pub algo: Algo,
    pub net: Option<&'a MStepNet>,
    pub iterations: usize,
}

impl<'a> AlgoRun<'a> {
    pub fn classic(algo: Algo, iterations: usize) -> Self {
        Self {
            algo,
            net: None,
            iterations,
        }
    }

    pub fn learned(algo: Algo, net: &'a MStepNet) -> Self {
        Self {
            algo,
            net: Some(net),
            iterations: net.n_layers() + 1,
        }
    }

    pub fn spec(&self) -> EstimatorSpec {
        EstimatorSpec::new(self.algo.e_step(), self.algo.m_step(), self.iterations)
    }
}

/// Outcome of one estimator on one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleOutcome {
    Nmse(f64),
    Diverged { iteration: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgoScore {
    pub algo: Algo,
    pub iterations: usize,
    pub outcomes: Vec<SampleOutcome>,
}

impl AlgoScore {
    pub fn n_samples(&self) -> usize {
        self.outcomes.len()
    }

    pub fn n_failed(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| matches!(o, SampleOutcome::Diverged { .. }))
            .count()
    }

    pub fn fail_rate(&self) -> f64 {
        if self.outcomes.is_empty() {
            0.0
        } else {
            self.n_failed() as f64 / self.outcomes.len() as f64
        }
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.outcomes
            .iter()
            .filter_map(|o| match o {
                SampleOutcome::Nmse(v) => Some(*v),
                SampleOutcome::Diverged { .. } => None,
            })
            .collect()
    }

    /// Mean over non-diverged samples; NaN when every sample failed.
    pub fn nmse_db(&self) -> f64 {
        mean_db(&self.ratios())
    }
}

/// Scores every estimator on the same observations: sample `i` is observed
/// once with noise from `(EvalNoise, noise_tag.., i)` and handed to all runs.
/// Samples run in parallel, results come back in sample order.
pub fn evaluate_paired(
    sys: &System,
    channels: &[DMatrix<Complex64>],
    runs: &[AlgoRun<'_>],
    noise_tag: &[u64],
) -> Result<Vec<AlgoScore>> {
    let sigma2 = sys.cfg.noise_var;
    let per_sample: Vec<Result<Vec<SampleOutcome>>> = channels
        .par_iter()
        .enumerate()
        .map(|(i, h)| {
            let mut idx = noise_tag.to_vec();
            idx.push(i as u64);
            let mut rng = substream(sys.cfg.rng_seed, Stream::EvalNoise, &idx);
            let obs = sys.observe(h, &mut rng);
            runs.iter()
                .map(|run| {
                    let meas = Measurements { y: &obs.y, r: &obs.r };
                    match sys.estimator.run(&run.spec(), meas, sigma2, run.net, None) {
                        Ok(est) => Ok(SampleOutcome::Nmse(nmse(h, &sys.dicts.reconstruct_channel(&est.x_hat)?)?)),
                        Err(Error::Divergence { iteration, .. }) => Ok(SampleOutcome::Diverged { iteration }),
                        Err(e) => Err(e),
                    }
                })
                .collect()
        })
        .collect();
    let mut scores: Vec<AlgoScore> = runs
        .iter()
        .map(|r| AlgoScore {
            algo: r.algo,
            iterations: r.iterations,
            outcomes: Vec::with_capacity(channels.len()),
        })
        .collect();
    for sample in per_sample {
        for (score, o) in scores.iter_mut().zip(sample?) {
            score.outcomes.push(o);
        }
    }
    Ok(scores)
}

/// FLOPs of a whole run: `iterations` E/M rounds plus the AD reconstruction.
pub fn total_flops(algo: Algo, iterations: usize, cfg: &SystemConfig) -> u64 {
    let per = flops_per_iteration(algo.name(), cfg).expect("every runnable algorithm has a FLOPs row");
    per * iterations as u64 + reconstruction_flops(ReconstructionFamily::AngularDelay, cfg)
}

// ---------------------------------------------------------------- sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    SnrDb,
    /// Number of pilot channel uses; each point has its own operator.
    Uses,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::SnrDb => "snr_db",
            SweepAxis::Uses => "q",
        }
    }

    /// The configuration of one sweep point.
    pub fn apply(self, base: &SystemConfig, value: f64) -> Result<SystemConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::SnrDb => cfg.noise_var = snr_db_to_noise_var(value),
            SweepAxis::Uses => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::InvalidConfig(format!("Q must be a positive integer, got {value}")));
                }
                cfg.n_uses = value as usize;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snr" | "snr_db" => Ok(SweepAxis::SnrDb),
            "q" | "Q" | "uses" => Ok(SweepAxis::Uses),
            _ => Err(Error::InvalidConfig(format!("unknown sweep axis '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub algo: Algo,
    pub iterations: usize,
    pub nmse_db: f64,
    pub n_samples: usize,
    pub flops_total: u64,
    pub fail_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

/// Networks for learned algorithms, keyed by algorithm and point index.
pub type NetTable = HashMap<(Algo, usize), MStepNet>;

/// For every point: one operator, `n_samples` test channels, one noise draw
/// per sample shared by all algorithms. Learned algorithms without a network
/// for a point are an error.
pub fn run_sweep(
    axis: SweepAxis,
    points: &[f64],
    algos: &[Algo],
    base: &SystemConfig,
    n_samples: usize,
    nets: &NetTable,
) -> Result<SweepResult> {
    let mut rows = Vec::new();
    let mut cached: Option<System> = None;
    for (pi, &value) in points.iter().enumerate() {
        let cfg = axis.apply(base, value)?;
        // the SNR axis keeps the operator; only the noise level moves
        let sys = match (&cached, axis) {
            (Some(s), SweepAxis::SnrDb) => s.with_noise_var(cfg.noise_var),
            _ => System::new(&cfg)?,
        };
        if axis == SweepAxis::SnrDb && cached.is_none() {
            cached = Some(sys.clone());
        }
        let channels: Vec<_> = Dataset::generate(&cfg, Split::Test, n_samples)
            .samples
            .into_iter()
            .map(|s| s.h)
            .collect();
        let runs = algos
            .iter()
            .map(|&a| {
                if a.is_learned() {
                    nets.get(&(a, pi))
                        .map(|n| AlgoRun::learned(a, n))
                        .ok_or_else(|| Error::InvalidConfig(format!("no network for {a} at {} = {value}", axis.name())))
                } else {
                    Ok(AlgoRun::classic(a, cfg.n_iterations))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let scores = evaluate_paired(&sys, &channels, &runs, &[2, pi as u64])?;
        for s in scores {
            rows.push(SweepRow {
                value,
                algo: s.algo,
                iterations: s.iterations,
                nmse_db: s.nmse_db(),
                n_samples: s.n_samples(),
                flops_total: total_flops(s.algo, s.iterations, &cfg),
                fail_rate: s.fail_rate(),
            });
        }
    }
    Ok(SweepResult {
        axis,
        config_hash: base.hash(),
        seed: base.rng_seed,
        rows,
    })
}

fn fmt_db(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        String::new()
    }
}

/// `axis,value,algo,nmse_db,n_samples,flops_total,fail_rate`, preceded by a
/// `# config_hash=.. seed=..` line.
pub fn write_sweep_csv(res: &SweepResult, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("# config_hash={} seed={}\n", res.config_hash, res.seed);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["axis", "value", "algo", "nmse_db", "n_samples", "flops_total", "fail_rate"])?;
    for r in &res.rows {
        w.write_record([
            res.axis.name().to_string(),
            r.value.to_string(),
            r.algo.name().to_string(),
            fmt_db(r.nmse_db),
            r.n_samples.to_string(),
            r.flops_total.to_string(),
            r.fail_rate.to_string(),
        ])?;
    }
    out.push_str(std::str::from_utf8(&w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv is utf-8"));
    std::fs::write(path, out)?;
    Ok(())
}

/// `algo,flops,nmse_db,iterations`, preceded by the config hash line.
pub fn write_tradeoff_csv(cfg: &SystemConfig, scores: &[AlgoScore], path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("# config_hash={} seed={}\n", cfg.hash(), cfg.rng_seed);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["algo", "flops", "nmse_db", "iterations"])?;
    for s in scores {
        w.write_record([
            s.algo.name().to_string(),
            total_flops(s.algo, s.iterations, cfg).to_string(),
            fmt_db(s.nmse_db()),
            s.iterations.to_string(),
        ])?;
    }
    out.push_str(std::str::from_utf8(&w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv is utf-8"));
    std::fs::write(path, out)?;
    Ok(())
}
