//! Command-line front end.
//!
//! Configuration precedence is flag > `--config` file > base, where the base
//! is the configuration stored with a dataset when one is read and otherwise
//! the `--scale` preset (paper by default).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::config::{default_config, desk_config, SystemConfig};
use crate::dataset::{load_dataset, save_dataset, export_csv, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_paired, flops_per_iteration, reconstruction_flops, run_sweep, total_flops, write_sweep_csv,
    write_tradeoff_csv, Algo, AlgoRun, NetTable, ReconstructionFamily, SweepAxis, FLOPS_ALGORITHMS,
};
use crate::learned::{FeatureMode, MStepNet};
use crate::sbl::EStepKind;
use crate::selftest;
use crate::system::System;
use crate::training::{
    empty_net, train_layerwise, write_report_csv, GradientMode, LossDomain, SplitSizes, TrainConfig, TrainData,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Maps a library error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Csv(_) | Error::Format(_) => EXIT_IO,
        Error::Divergence { .. } | Error::TrainingDiverged { .. } | Error::Singular(_) | Error::Whitening { .. } => {
            EXIT_NUMERICAL
        }
        _ => EXIT_USAGE,
    }
}

#[derive(Parser, Debug)]
#[command(name = "ampsbl", version, about = "Wideband mmWave channel estimation with SBL, AMP-SBL and unfolded variants")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw train/val/test channel sets and write a manifest.
    GenData(GenDataArgs),
    /// Layer-wise training of an unfolded estimator.
    Train(TrainArgs),
    /// Paired NMSE of several estimators on one test set.
    Evaluate(EvaluateArgs),
    /// NMSE over an SNR or pilot-length axis.
    Sweep(SweepArgs),
    /// Per-iteration FLOPs table.
    Flops(FlopsArgs),
    /// Run the built-in property checks.
    Selftest,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scale {
    Paper,
    Desk,
}

impl Scale {
    fn config(self) -> SystemConfig {
        match self {
            Scale::Paper => default_config(),
            Scale::Desk => desk_config(),
        }
    }

    fn sizes(self) -> SplitSizes {
        match self {
            Scale::Paper => SplitSizes::PAPER,
            Scale::Desk => SplitSizes::DESK,
        }
    }
}

/// One flag per configuration key.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// `key = value` file layered over the base configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset when no dataset supplies one.
    #[arg(long, value_enum)]
    scale: Option<Scale>,
    #[arg(long)]
    n_antennas: Option<String>,
    #[arg(long)]
    n_rf: Option<String>,
    #[arg(long)]
    n_uses: Option<String>,
    #[arg(long)]
    n_subcarriers: Option<String>,
    #[arg(long)]
    center_freq: Option<String>,
    #[arg(long)]
    bandwidth: Option<String>,
    #[arg(long)]
    grid_angular: Option<String>,
    #[arg(long)]
    grid_delay: Option<String>,
    #[arg(long, conflicts_with = "snr_db")]
    noise_var: Option<String>,
    #[arg(long)]
    snr_db: Option<String>,
    #[arg(long)]
    n_clusters: Option<String>,
    #[arg(long)]
    n_subpaths: Option<String>,
    #[arg(long, conflicts_with = "angle_spread_deg")]
    angle_spread_rad: Option<String>,
    #[arg(long)]
    angle_spread_deg: Option<String>,
    #[arg(long)]
    delay_spread: Option<String>,
    #[arg(long)]
    max_mean_delay: Option<String>,
    #[arg(long)]
    n_iterations: Option<String>,
    #[arg(long, visible_alias = "seed")]
    rng_seed: Option<String>,
}

impl ConfigArgs {
    fn flags(&self) -> [(&'static str, &Option<String>); 18] {
        [
            ("n_antennas", &self.n_antennas),
            ("n_rf", &self.n_rf),
            ("n_uses", &self.n_uses),
            ("n_subcarriers", &self.n_subcarriers),
            ("center_freq", &self.center_freq),
            ("bandwidth", &self.bandwidth),
            ("grid_angular", &self.grid_angular),
            ("grid_delay", &self.grid_delay),
            ("noise_var", &self.noise_var),
            ("snr_db", &self.snr_db),
            ("n_clusters", &self.n_clusters),
            ("n_subpaths", &self.n_subpaths),
            ("angle_spread_rad", &self.angle_spread_rad),
            ("angle_spread_deg", &self.angle_spread_deg),
            ("delay_spread", &self.delay_spread),
            ("max_mean_delay", &self.max_mean_delay),
            ("n_iterations", &self.n_iterations),
            ("rng_seed", &self.rng_seed),
        ]
    }

    fn resolve(&self, base: Option<&SystemConfig>) -> Result<SystemConfig> {
        let mut cfg = match base {
            Some(c) => c.clone(),
            None => self.scale.unwrap_or(Scale::Paper).config(),
        };
        if let Some(path) = &self.config {
            cfg.apply_kv_str(&fs::read_to_string(path)?)?;
        }
        for (key, value) in self.flags() {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// `train,val,test` counts; defaults follow --scale.
    #[arg(long, value_parser = parse_sizes)]
    sizes: Option<SplitSizes>,
    /// Also export every split as CSV.
    #[arg(long)]
    csv: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EStepArg {
    Amp,
    Exact,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Channel,
    Sparse,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GradientArg {
    EndToEnd,
    Truncated,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FeatureArg {
    Mag2,
    Mag,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for net.bin and report.csv.
    #[arg(long)]
    out: PathBuf,
    /// Unrolled iterations L (>= 2).
    #[arg(long, default_value_t = 6)]
    depth: usize,
    /// Continue from an existing out/net.bin, training only the missing stages.
    #[arg(long)]
    resume: bool,
    #[arg(long, value_enum, default_value = "amp")]
    e_step: EStepArg,
    #[arg(long, value_enum, default_value = "channel")]
    loss: LossArg,
    #[arg(long, value_enum, default_value = "end-to-end")]
    gradient: GradientArg,
    #[arg(long, value_enum, default_value = "mag2")]
    features: FeatureArg,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_patience: Option<usize>,
    #[arg(long)]
    early_stop_patience: Option<usize>,
    /// No per-epoch log on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory written by gen-data; its test split is scored. Without it
    /// the test split is drawn from the configuration.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Comma-separated algorithms; defaults to sbl, amp-sbl and every --net.
    #[arg(long, value_delimiter = ',', value_parser = parse_algo)]
    algos: Vec<Algo>,
    /// `ALGO=PATH` checkpoint for a learned algorithm.
    #[arg(long = "net")]
    nets: Vec<String>,
    /// CSV with NMSE and FLOPs per algorithm.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// `snr` or `q`.
    #[arg(long, value_parser = parse_axis)]
    axis: SweepAxis,
    /// `start:stop:step` (inclusive) or a comma list.
    #[arg(long)]
    points: String,
    #[arg(long, value_delimiter = ',', value_parser = parse_algo, default_value = "sbl,amp-sbl")]
    algos: Vec<Algo>,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// `ALGO=PATH` for every point or `ALGO@INDEX=PATH` for one point.
    #[arg(long = "net")]
    nets: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Ignore every other configuration source and use the defaults.
    #[arg(long)]
    defaults: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_sizes(s: &str) -> std::result::Result<SplitSizes, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("'{p}': {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v.as_slice() {
        [train, val, test] => Ok(SplitSizes {
            train: *train,
            val: *val,
            test: *test,
        }),
        _ => Err("expected three counts: train,val,test".into()),
    }
}

fn parse_algo(s: &str) -> std::result::Result<Algo, String> {
    s.trim().parse::<Algo>().map_err(|e| e.to_string())
}

fn parse_axis(s: &str) -> std::result::Result<SweepAxis, String> {
    s.parse::<SweepAxis>().map_err(|e| e.to_string())
}

/// `a:b:step` inclusive of `b` (up to rounding), or `v1,v2,...`.
pub fn parse_points(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidConfig(format!("bad point list '{s}'"));
    let num = |p: &str| p.trim().parse::<f64>().map_err(|_| bad());
    if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let [a, b, step] = parts.as_slice() else {
            return Err(bad());
        };
        let (a, b, step) = (num(a)?, num(b)?, num(step)?);
        if !(step > 0.0) || b < a {
            return Err(bad());
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| a + i as f64 * step).collect())
    } else {
        s.split(',').map(num).collect()
    }
}

fn header(cfg: &SystemConfig) -> String {
    format!("# config_hash={} seed={}\n", cfg.hash(), cfg.rng_seed)
}

fn write_config(cfg: &SystemConfig, path: &Path) -> Result<()> {
    fs::write(path, header(cfg) + &cfg.to_kv_string())?;
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// `||H||_F^2 / K` over a split: mean, min, max.
fn power_stats(ds: &Dataset) -> (f64, f64, f64) {
    let k = ds.config.n_subcarriers as f64;
    let p: Vec<f64> = ds.samples.iter().map(|s| s.h.norm_squared() / k).collect();
    let mean = p.iter().sum::<f64>() / p.len().max(1) as f64;
    let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = a.cfg.resolve(None)?;
    let sizes = a.sizes.unwrap_or(a.cfg.scale.unwrap_or(Scale::Paper).sizes());
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(Error::InvalidConfig("split sizes must be positive".into()));
    }
    fs::create_dir_all(&a.out)?;
    write_config(&cfg, &a.out.join("config.txt"))?;
    let mut manifest = header(&cfg);
    let _ = writeln!(manifest, "physical_hash = {}", cfg.physical_hash());
    for (split, count) in [(Split::Train, sizes.train), (Split::Val, sizes.val), (Split::Test, sizes.test)] {
        let ds = Dataset::generate(&cfg, split, count);
        let file = format!("{}.bin", split.name());
        let path = a.out.join(&file);
        save_dataset(&ds, &path)?;
        if a.csv {
            export_csv(&ds, a.out.join(format!("{}.csv", split.name())))?;
        }
        let (mean, min, max) = power_stats(&ds);
        println!(
            "{:<5} {:>6} samples  ||H||_F^2/K mean {mean:.4} min {min:.4} max {max:.4}",
            split.name(),
            count
        );
        let name = split.name();
        let _ = writeln!(manifest, "{name}.file = {file}");
        let _ = writeln!(manifest, "{name}.count = {count}");
        let _ = writeln!(manifest, "{name}.sha256 = {}", sha256_file(&path)?);
        let _ = writeln!(manifest, "{name}.power_mean = {mean:.6}");
    }
    fs::write(a.out.join("manifest.txt"), manifest)?;
    println!("config {} seed {} -> {}", cfg.hash(), cfg.rng_seed, a.out.display());
    Ok(())
}

/// Loads `dir/<split>.bin` and checks it against the resolved configuration.
fn load_split(dir: &Path, split: Split, cfg: &SystemConfig) -> Result<Dataset> {
    let ds = load_dataset(dir.join(format!("{}.bin", split.name())))?;
    if ds.config.physical_hash() != cfg.physical_hash() {
        return Err(Error::ConfigMismatch {
            expected: cfg.physical_hash(),
            found: ds.config.physical_hash(),
        });
    }
    Ok(ds)
}

fn data_config(dir: &Path) -> Result<SystemConfig> {
    Ok(load_dataset(dir.join("test.bin"))?.config)
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut tc = TrainConfig {
        depth: a.depth,
        e_step: match a.e_step {
            EStepArg::Amp => EStepKind::Amp,
            EStepArg::Exact => EStepKind::Exact,
        },
        loss: match a.loss {
            LossArg::Channel => LossDomain::Channel,
            LossArg::Sparse => LossDomain::Sparse,
        },
        gradient: match a.gradient {
            GradientArg::EndToEnd => GradientMode::EndToEnd,
            GradientArg::Truncated => GradientMode::Truncated,
        },
        feature_mode: match a.features {
            FeatureArg::Mag2 => FeatureMode::MagnitudeSquared,
            FeatureArg::Mag => FeatureMode::Magnitude,
        },
        ..TrainConfig::default()
    };
    if let Some(v) = a.max_epochs {
        tc.max_epochs = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.lr {
        tc.learning_rate = v;
    }
    if let Some(v) = a.lr_patience {
        tc.lr_patience = v;
    }
    if let Some(v) = a.early_stop_patience {
        tc.early_stop_patience = v;
    }
    tc.validate()?;

    let base = load_dataset(a.data.join("train.bin"))?.config;
    let cfg = a.cfg.resolve(Some(&base))?;
    let train_ds = load_split(&a.data, Split::Train, &cfg)?;
    let val_ds = load_split(&a.data, Split::Val, &cfg)?;
    let test_ds = match load_split(&a.data, Split::Test, &cfg) {
        Ok(d) => Some(d),
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e),
    };
    fs::create_dir_all(&a.out)?;
    let net_path = a.out.join("net.bin");
    let report_path = a.out.join("report.csv");
    let net = if a.resume && net_path.exists() {
        let net = MStepNet::load(&cfg, &net_path)?;
        if net.feature_mode != tc.feature_mode {
            return Err(Error::InvalidConfig("checkpoint was trained with another feature mode".into()));
        }
        eprintln!("resuming from depth {}", net.n_layers() + 1);
        net
    } else {
        empty_net(&cfg, tc.feature_mode)
    };
    let previous_rows = if a.resume && report_path.exists() {
        fs::read_to_string(&report_path)?
            .lines()
            .skip(2)
            .map(|l| format!("{l}\n"))
            .collect::<String>()
    } else {
        String::new()
    };

    let sys = System::new(&cfg)?;
    let data = TrainData {
        train: &train_ds,
        val: &val_ds,
        test: test_ds.as_ref(),
    };
    let quiet = a.quiet;
    let (net, report) = train_layerwise(&tc, &sys, data, net, |r| {
        if !quiet {
            eprintln!(
                "stage {} depth {} epoch {:>3}  train {:.5}  val {:.5}  lr {:.0e} {}",
                r.stage,
                r.depth,
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.lr,
                r.event.name()
            );
        }
    })?;
    net.save(&cfg, &net_path)?;
    write_report_csv(&report, &report_path)?;
    if !previous_rows.is_empty() {
        let text = fs::read_to_string(&report_path)?;
        let mut lines = text.lines();
        let mut merged = String::new();
        for _ in 0..2 {
            if let Some(l) = lines.next() {
                merged.push_str(l);
                merged.push('\n');
            }
        }
        merged.push_str(&previous_rows);
        for l in lines {
            merged.push_str(l);
            merged.push('\n');
        }
        fs::write(&report_path, merged)?;
    }
    write_config(&cfg, &a.out.join("config.txt"))?;
    for s in &report.stages {
        println!(
            "stage {} depth {}: best val {:.5} at epoch {} of {}",
            s.stage, s.depth, s.best_val_loss, s.best_epoch, s.stop_epoch
        );
    }
    if let Some(db) = report.final_test_nmse_db {
        println!("{} depth {} test nmse_db={db:.3}", tc.algo(), net.n_layers() + 1);
    }
    println!("checkpoint {}", net_path.display());
    Ok(())
}

/// Parses `ALGO=PATH` or `ALGO@INDEX=PATH`.
fn parse_net_spec(s: &str) -> Result<(Algo, Option<usize>, PathBuf)> {
    let (lhs, path) = s
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("expected ALGO=PATH, got '{s}'")))?;
    let (algo, idx) = match lhs.split_once('@') {
        Some((a, i)) => (
            a,
            Some(i.parse::<usize>().map_err(|_| Error::InvalidConfig(format!("bad point index in '{s}'")))?),
        ),
        None => (lhs, None),
    };
    let algo: Algo = algo.parse()?;
    if !algo.is_learned() {
        return Err(Error::InvalidConfig(format!("{algo} has no network")));
    }
    Ok((algo, idx, PathBuf::from(path)))
}

fn default_algos(explicit: &[Algo], nets: &[(Algo, Option<usize>, PathBuf)]) -> Vec<Algo> {
    if !explicit.is_empty() {
        return explicit.to_vec();
    }
    let mut v = vec![Algo::Sbl, Algo::AmpSbl];
    for (a, _, _) in nets {
        if !v.contains(a) {
            v.push(*a);
        }
    }
    v
}

/// Divergence of anything but classic AMP-SBL is a numerical failure.
fn unexpected_failures(counts: &[(Algo, usize)]) -> Result<()> {
    match counts.iter().find(|(a, n)| *a != Algo::AmpSbl && *n > 0) {
        Some((algo, n)) => {
            eprintln!("{algo}: {n} samples diverged");
            Err(Error::Divergence {
                iteration: 0,
                trace: Vec::new(),
            })
        }
        None => Ok(()),
    }
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let base = match &a.data {
        Some(dir) => Some(data_config(dir)?),
        None => None,
    };
    let cfg = a.cfg.resolve(base.as_ref())?;
    let channels: Vec<_> = match &a.data {
        Some(dir) => {
            let ds = load_split(dir, Split::Test, &cfg)?;
            if ds.len() < a.samples {
                return Err(Error::InvalidConfig(format!(
                    "test split has {} samples, {} requested",
                    ds.len(),
                    a.samples
                )));
            }
            ds.samples.into_iter().take(a.samples).map(|s| s.h).collect()
        }
        None => Dataset::generate(&cfg, Split::Test, a.samples).samples.into_iter().map(|s| s.h).collect(),
    };
    let specs = a.nets.iter().map(|s| parse_net_spec(s)).collect::<Result<Vec<_>>>()?;
    let mut nets = Vec::new();
    for (algo, idx, path) in &specs {
        if idx.is_some() {
            return Err(Error::InvalidConfig("point indices only apply to sweeps".into()));
        }
        nets.push((*algo, MStepNet::load(&cfg, path)?));
    }
    let algos = default_algos(&a.algos, &specs);
    let runs = algos
        .iter()
        .map(|&algo| {
            if algo.is_learned() {
                nets.iter()
                    .find(|(a, _)| *a == algo)
                    .map(|(_, n)| AlgoRun::learned(algo, n))
                    .ok_or_else(|| Error::InvalidConfig(format!("{algo} needs --net {algo}=PATH")))
            } else {
                Ok(AlgoRun::classic(algo, cfg.n_iterations))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let sys = System::new(&cfg)?;
    let scores = evaluate_paired(&sys, &channels, &runs, &[3])?;
    print!("{}", header(&cfg));
    for s in &scores {
        println!(
            "{:<18} nmse_db={:.3} iterations={} samples={} fail_rate={:.3} flops_total={}",
            s.algo.name(),
            s.nmse_db(),
            s.iterations,
            s.n_samples(),
            s.fail_rate(),
            total_flops(s.algo, s.iterations, &cfg)
        );
    }
    if let Some(out) = &a.out {
        write_tradeoff_csv(&cfg, &scores, out)?;
    }
    unexpected_failures(&scores.iter().map(|s| (s.algo, s.n_failed())).collect::<Vec<_>>())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let cfg = a.cfg.resolve(None)?;
    let points = parse_points(&a.points)?;
    let specs = a.nets.iter().map(|s| parse_net_spec(s)).collect::<Result<Vec<_>>>()?;
    let mut table = NetTable::new();
    for (pi, &value) in points.iter().enumerate() {
        let point_cfg = a.axis.apply(&cfg, value)?;
        // shared checkpoints first so a per-point one overwrites them
        let shared = specs.iter().filter(|(_, i, _)| i.is_none());
        let own = specs.iter().filter(|(_, i, _)| *i == Some(pi));
        for (algo, _, path) in shared.chain(own) {
            table.insert((*algo, pi), MStepNet::load(&point_cfg, path)?);
        }
    }
    let res = run_sweep(a.axis, &points, &a.algos, &cfg, a.samples, &table)?;
    write_sweep_csv(&res, &a.out)?;
    for r in &res.rows {
        println!(
            "{}={:<8} {:<18} nmse_db={:.3} fail_rate={:.3}",
            a.axis.name(),
            r.value,
            r.algo.name(),
            r.nmse_db,
            r.fail_rate
        );
    }
    unexpected_failures(&res.rows.iter().map(|r| (r.algo, (r.fail_rate * r.n_samples as f64).round() as usize)).collect::<Vec<_>>())
}

/// The FLOPs table as text, one `name flops` line per row.
pub fn flops_table(cfg: &SystemConfig) -> Result<Vec<(String, u64)>> {
    let mut rows = FLOPS_ALGORITHMS
        .iter()
        .map(|name| Ok((name.to_string(), flops_per_iteration(name, cfg)?)))
        .collect::<Result<Vec<_>>>()?;
    rows.push((
        "reconstruction-af".into(),
        reconstruction_flops(ReconstructionFamily::AngularFrequency, cfg),
    ));
    rows.push((
        "reconstruction-ad".into(),
        reconstruction_flops(ReconstructionFamily::AngularDelay, cfg),
    ));
    Ok(rows)
}

fn flops(a: &FlopsArgs) -> Result<()> {
    let cfg = if a.defaults { default_config() } else { a.cfg.resolve(None)? };
    let rows = flops_table(&cfg)?;
    let mut text = header(&cfg);
    text.push_str("algo,flops\n");
    for (name, v) in &rows {
        println!("{name:<20} {v:>16}");
        let _ = writeln!(text, "{name},{v}");
    }
    if let Some(out) = &a.out {
        fs::write(out, text)?;
    }
    Ok(())
}

fn run_selftest() -> i32 {
    let results = selftest::run_all();
    let mut failed = 0;
    for r in &results {
        println!("{} {:<24} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    println!("{} of {} checks passed", results.len() - failed, results.len());
    if failed == 0 {
        EXIT_OK
    } else {
        EXIT_NUMERICAL
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        // fails only if the pool was already built, e.g. by an earlier call
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::Flops(a) => flops(a),
        Command::Selftest => return run_selftest(),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
