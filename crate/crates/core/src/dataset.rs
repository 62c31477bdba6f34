//! Channel datasets and their binary file format.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "ASBLDSET" | u32 version | u8 split | config block (u32 len + kv text)
//! u64 count | u32 N | u32 K | u32 clusters | u32 paths
//! per sample:
//!   clusters x (f64 mean_angle, f64 mean_delay)
//!   paths    x (u32 cluster, f64 gain.re, f64 gain.im, f64 delay, f64 angle)
//!   H row-major, N x K x (f64 re, f64 im)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::binio::{check_config, Reader, Writer};
use crate::channel::{build_channel, draw_paths, ChannelRealization, Cluster, Path as ChannelPath, PathSet};
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

const MAGIC: &[u8; 8] = b"ASBLDSET";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub config: SystemConfig,
    pub samples: Vec<ChannelRealization>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Draws `count` channels; sample i of a split always comes from the
    /// channel sub-stream `(split, i)`, independent of the other splits.
    pub fn generate(cfg: &SystemConfig, split: Split, count: usize) -> Self {
        let samples = (0..count)
            .map(|i| {
                let mut rng = substream(cfg.rng_seed, Stream::Channel, &[split.code() as u64, i as u64]);
                build_channel(cfg, &draw_paths(cfg, &mut rng))
            })
            .collect();
        Self {
            split,
            config: cfg.clone(),
            samples,
        }
    }
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let cfg = &ds.config;
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    w.u8(ds.split.code())?;
    w.config(cfg)?;
    w.u64(ds.samples.len() as u64)?;
    w.u32(cfg.n_antennas as u32)?;
    w.u32(cfg.n_subcarriers as u32)?;
    w.u32(cfg.n_clusters as u32)?;
    w.u32(cfg.n_paths() as u32)?;
    for s in &ds.samples {
        if s.h.shape() != (cfg.n_antennas, cfg.n_subcarriers)
            || s.paths.clusters.len() != cfg.n_clusters
            || s.paths.paths.len() != cfg.n_paths()
        {
            return Err(Error::Dimension("sample does not match the dataset config".into()));
        }
        for c in &s.paths.clusters {
            w.f64(c.mean_angle)?;
            w.f64(c.mean_delay)?;
        }
        for p in &s.paths.paths {
            w.u32(p.cluster as u32)?;
            w.complex(p.gain)?;
            w.f64(p.delay)?;
            w.f64(p.angle)?;
        }
        for i in 0..s.h.nrows() {
            for j in 0..s.h.ncols() {
                w.complex(s.h[(i, j)])?;
            }
        }
    }
    w.finish()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let split = Split::from_code(r.u8()?)?;
    let config = r.config()?;
    let count = r.u64()? as usize;
    let n = r.u32()? as usize;
    let k = r.u32()? as usize;
    let n_clusters = r.u32()? as usize;
    let n_paths = r.u32()? as usize;
    if n != config.n_antennas
        || k != config.n_subcarriers
        || n_clusters != config.n_clusters
        || n_paths != config.n_paths()
    {
        return Err(Error::Format("header sizes disagree with the embedded config".into()));
    }
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let clusters = (0..n_clusters)
            .map(|_| {
                Ok(Cluster {
                    mean_angle: r.f64()?,
                    mean_delay: r.f64()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let paths = (0..n_paths)
            .map(|_| {
                Ok(ChannelPath {
                    cluster: r.u32()? as usize,
                    gain: r.complex()?,
                    equiv_gain: Complex64::new(0.0, 0.0),
                    delay: r.f64()?,
                    angle: r.f64()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut set = PathSet { clusters, paths };
        set.refresh_equiv_gains(&config);
        let mut h = DMatrix::zeros(n, k);
        for i in 0..n {
            for j in 0..k {
                h[(i, j)] = r.complex()?;
            }
        }
        samples.push(ChannelRealization { paths: set, h });
    }
    r.expect_end()?;
    Ok(Dataset {
        split,
        config,
        samples,
    })
}

/// Loads a dataset and rejects it unless it was drawn under `expected`
/// (seed and iteration count aside).
pub fn load_dataset_checked(path: impl AsRef<Path>, expected: &SystemConfig) -> Result<Dataset> {
    let ds = load_dataset(path)?;
    check_config(expected, &ds.config)?;
    Ok(ds)
}

/// `sample,antenna,subcarrier,re,im`, one row per channel entry.
pub fn export_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample", "antenna", "subcarrier", "re", "im"])?;
    for (s, sample) in ds.samples.iter().enumerate() {
        for i in 0..sample.h.nrows() {
            for j in 0..sample.h.ncols() {
                let z = sample.h[(i, j)];
                w.write_record([
                    s.to_string(),
                    i.to_string(),
                    j.to_string(),
                    format!("{:?}", z.re),
                    format!("{:?}", z.im),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
