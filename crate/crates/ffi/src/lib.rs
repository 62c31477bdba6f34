//! C interface to the channel estimators.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! and released by the matching `*_free`. Every fallible call returns an
//! [`AmpsblStatus`]; the message of the last failure on the calling thread is
//! available from [`ampsbl_last_error`]. Complex arrays are interleaved
//! `(re, im)` pairs; channel matrices are N x K in column-major order.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ampsbl::dataset::{Dataset, Split};
use ampsbl::eval::{flops_per_iteration, nmse, Algo};
use ampsbl::learned::MStepNet;
use ampsbl::rng::{substream, Stream};
use ampsbl::sbl::{EstimatorSpec, Measurements};
use ampsbl::{default_config, desk_config, Error, System, SystemConfig};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmpsblStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    Dimension = 4,
    /// The estimator diverged; classic AMP-SBL does this routinely.
    Divergence = 5,
    /// Singular or indefinite linear algebra.
    Numerical = 6,
    Io = 7,
    Format = 8,
    ConfigMismatch = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmpsblPreset {
    /// The full-size system.
    Paper = 0,
    /// N = 16, K = 8, Q = 2, N_RF = 2, 16 x 16 grid.
    Desk = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmpsblAlgo {
    Sbl = 0,
    AmpSbl = 1,
    SblUnfolding = 2,
    AmpSblUnfolding = 3,
}

impl From<AmpsblAlgo> for Algo {
    fn from(a: AmpsblAlgo) -> Self {
        match a {
            AmpsblAlgo::Sbl => Algo::Sbl,
            AmpsblAlgo::AmpSbl => Algo::AmpSbl,
            AmpsblAlgo::SblUnfolding => Algo::SblUnfolding,
            AmpsblAlgo::AmpSblUnfolding => Algo::AmpSblUnfolding,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AmpsblComplex {
    pub re: f64,
    pub im: f64,
}

/// System dimensions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AmpsblDims {
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    /// Length of an observation vector, K Q N_RF.
    pub n_measurements: usize,
    /// G_A G_D.
    pub grid_size: usize,
}

/// Opaque configuration.
pub struct AmpsblConfig(SystemConfig);

/// Opaque system: dictionaries, combiner and measurement operator.
pub struct AmpsblSystem(System);

/// Opaque learned M-step network.
pub struct AmpsblNet(MStepNet);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> AmpsblStatus {
    match e {
        Error::InvalidConfig(_) | Error::UnknownAlgorithm(_) | Error::IndexOutOfRange { .. } => AmpsblStatus::InvalidConfig,
        Error::Dimension(_) => AmpsblStatus::Dimension,
        Error::Divergence { .. } | Error::TrainingDiverged { .. } => AmpsblStatus::Divergence,
        Error::Singular(_) | Error::Whitening { .. } => AmpsblStatus::Numerical,
        Error::Io(_) => AmpsblStatus::Io,
        Error::Csv(_) | Error::Format(_) => AmpsblStatus::Format,
        Error::ConfigMismatch { .. } => AmpsblStatus::ConfigMismatch,
    }
}

/// Failure inside a guarded call: a status plus its message.
struct Fail(AmpsblStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(AmpsblStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AmpsblStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AmpsblStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AmpsblStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(AmpsblStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, expect: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len != expect {
        return Err(Fail(AmpsblStatus::Dimension, format!("{what} has length {len}, expected {expect}")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, expect: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len != expect {
        return Err(Fail(AmpsblStatus::Dimension, format!("{what} has length {len}, expected {expect}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn to_complex(v: &[AmpsblComplex]) -> Vec<Complex64> {
    v.iter().map(|z| Complex64::new(z.re, z.im)).collect()
}

fn from_complex(src: &[Complex64], dst: &mut [AmpsblComplex]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = AmpsblComplex { re: s.re, im: s.im };
    }
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ampsbl_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates a configuration from a preset.
///
/// # Safety
/// `out` must point to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn ampsbl_config_new(preset: AmpsblPreset, out: *mut *mut AmpsblConfig) -> AmpsblStatus {
    guard(|| {
        let cfg = match preset {
            AmpsblPreset::Paper => default_config(),
            AmpsblPreset::Desk => desk_config(),
        };
        put(out, AmpsblConfig(cfg))
    })
}

/// Reads a `key = value` configuration file layered over the paper preset.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ampsbl_config_load(path: *const c_char, out: *mut *mut AmpsblConfig) -> AmpsblStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        put(out, AmpsblConfig(SystemConfig::load(path)?))
    })
}

/// Sets one configuration key, e.g. `("snr_db", "20")`. The configuration is
/// validated when a system is built from it.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ampsbl_config_set(
    cfg: *mut AmpsblConfig,
    key: *const c_char,
    value: *const c_char,
) -> AmpsblStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("config"))?;
        let (key, value) = (str_arg(key, "key")?, str_arg(value, "value")?);
        cfg.0.set(key, value)?;
        Ok(())
    })
}

/// Writes the 16-hex-digit configuration hash plus a NUL; `len` must be >= 17.
///
/// # Safety
/// `cfg` must be a live handle; `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ampsbl_config_hash(cfg: *const AmpsblConfig, buf: *mut c_char, len: usize) -> AmpsblStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "config")?;
        let hash = cfg.0.hash();
        if len < hash.len() + 1 {
            return Err(Fail(AmpsblStatus::InvalidArgument, format!("hash buffer needs {} bytes", hash.len() + 1)));
        }
        let out = slice_out(buf, hash.len() + 1, hash.len() + 1, "hash buffer")?;
        for (o, b) in out.iter_mut().zip(hash.bytes()) {
            *o = b as c_char;
        }
        out[hash.len()] = 0;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn ampsbl_config_free(cfg: *mut AmpsblConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Per-iteration FLOPs of a named algorithm (`sbl`, `amp-sbl-unfolding`, ...).
///
/// # Safety
/// `cfg` must be a live handle, `algo` a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ampsbl_flops_per_iteration(
    cfg: *const AmpsblConfig,
    algo: *const c_char,
    out: *mut u64,
) -> AmpsblStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "config")?;
        let algo = str_arg(algo, "algo")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = flops_per_iteration(algo, &cfg.0)?;
        Ok(())
    })
}

/// Builds dictionaries, combiner and measurement operator. This is the
/// expensive step (an SVD of the operator).
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ampsbl_system_new(cfg: *const AmpsblConfig, out: *mut *mut AmpsblSystem) -> AmpsblStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "config")?;
        put(out, AmpsblSystem(System::new(&cfg.0)?))
    })
}

/// # Safety
/// `sys` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn ampsbl_system_free(sys: *mut AmpsblSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// # Safety
/// `sys` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ampsbl_system_dims(sys: *const AmpsblSystem, out: *mut AmpsblDims) -> AmpsblStatus {
    guard(|| {
        let sys = ref_arg(sys, "system")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let cfg = &sys.0.cfg;
        *out = AmpsblDims {
            n_antennas: cfg.n_antennas,
            n_subcarriers: cfg.n_subcarriers,
            n_measurements: cfg.n_measurements(),
            grid_size: cfg.grid_size(),
        };
        Ok(())
    })
}

/// Channel `index` of the test split under the system's seed, N x K
/// column-major into `h_out` (`h_len` = N K).
///
/// # Safety
/// `sys` must be a live handle; `h_out` must point to `h_len` elements.
#[no_mangle]
pub unsafe extern "C" fn ampsbl_channel_draw(
    sys: *const AmpsblSystem,
    index: u64,
    h_out: *mut AmpsblComplex,
    h_len: usize,
) -> AmpsblStatus {
    guard(|| {
        let sys = ref_arg(sys, "system")?;
        let cfg = &sys.0.cfg;
        let out = slice_out(h_out, h_len, cfg.n_antennas * cfg.n_subcarriers, "h_out")?;
        let n = usize::try_from(index)
            .ok()
            .and_then(|i| i.checked_add(1))
            .ok_or_else(|| Fail(AmpsblStatus::InvalidArgument, "index too large".into()))?;
        // sample i only depends on (split, i), so drawing a prefix is exact
        let ds = Dataset::generate(cfg, Split::Test, n);
        from_complex(ds.samples[n - 1].h.as_slice(), out);
        Ok(())
    })
}

/// Pilot observation of channel `h` (N x K, column-major) with noise drawn
/// from the evaluation stream `noise_index`. Writes the whitened `y`.
///
/// # Safety
/// `sys` must be a live handle; the arrays must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ampsbl_observe(
    sys: *const AmpsblSystem,
    h: *const AmpsblComplex,
    h_len: usize,
    noise_index: u64,
    y_out: *mut AmpsblComplex,
    y_len: usize,
) -> AmpsblStatus {
    guard(|| {
        let sys = ref_arg(sys, "system")?;
        let cfg = &sys.0.cfg;
        let h = slice_arg(h, h_len, cfg.n_antennas * cfg.n_subcarriers, "h")?;
        let y_out = slice_out(y_out, y_len, cfg.n_measurements(), "y_out")?;
        let hm = DMatrix::from_column_slice(cfg.n_antennas, cfg.n_subcarriers, &to_complex(h));
        let mut rng = substream(cfg.rng_seed, Stream::EvalNoise, &[5, noise_index]);
        let obs = sys.0.observe(&hm, &mut rng);
        from_complex(obs.y.as_slice(), y_out);
        Ok(())
    })
}

/// Loads a trained network; the checkpoint must match `cfg`'s physical system.
///
/// # Safety
/// `cfg` must be a live handle, `path` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ampsbl_net_load(
    cfg: *const AmpsblConfig,
    path: *const c_char,
    out: *mut *mut AmpsblNet,
) -> AmpsblStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "config")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        put(out, AmpsblNet(MStepNet::load(&cfg.0, path)?))
    })
}

/// Depth L of the unfolded estimator the network drives (layers + 1).
///
/// # Safety
/// `net` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ampsbl_net_depth(net: *const AmpsblNet, out: *mut usize) -> AmpsblStatus {
    guard(|| {
        let net = ref_arg(net, "net")?;
        *out.as_mut().ok_or_else(|| null("out"))? = net.0.n_layers() + 1;
        Ok(())
    })
}

/// # Safety
/// `net` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn ampsbl_net_free(net: *mut AmpsblNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Estimates the channel from a whitened observation `y` and writes it N x K
/// column-major to `h_out`. Classic algorithms run `iterations` rounds;
/// unfolded ones need `net` and take their depth from it (`iterations` is
/// ignored). On divergence the status is `Divergence` and, if
/// `diverged_at` is non-null, the failing iteration is stored there.
///
/// # Safety
/// `sys` must be a live handle, `net` null or live, arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ampsbl_estimate(
    sys: *const AmpsblSystem,
    algo: AmpsblAlgo,
    iterations: usize,
    net: *const AmpsblNet,
    y: *const AmpsblComplex,
    y_len: usize,
    h_out: *mut AmpsblComplex,
    h_len: usize,
    diverged_at: *mut usize,
) -> AmpsblStatus {
    guard(|| {
        let sys = ref_arg(sys, "system")?;
        let cfg = &sys.0.cfg;
        let algo = Algo::from(algo);
        let y = slice_arg(y, y_len, cfg.n_measurements(), "y")?;
        let h_out = slice_out(h_out, h_len, cfg.n_antennas * cfg.n_subcarriers, "h_out")?;
        let net = if algo.is_learned() {
            Some(&ref_arg(net, "net")?.0)
        } else {
            None
        };
        let depth = net.map_or(iterations, |n| n.n_layers() + 1);
        let y = DVector::from_vec(to_complex(y));
        let r = sys.0.op.unitary_transform(&y);
        let spec = EstimatorSpec::new(algo.e_step(), algo.m_step(), depth);
        match sys.0.estimator.run(&spec, Measurements { y: &y, r: &r }, cfg.noise_var, net, None) {
            Ok(est) => {
                let h = sys.0.dicts.reconstruct_channel(&est.x_hat)?;
                from_complex(h.as_slice(), h_out);
                Ok(())
            }
            Err(Error::Divergence { iteration, .. }) => {
                if let Some(d) = diverged_at.as_mut() {
                    *d = iteration;
                }
                Err(Fail(AmpsblStatus::Divergence, format!("estimator diverged at iteration {iteration}")))
            }
            Err(e) => Err(e.into()),
        }
    })
}

/// `||h - h_hat||^2 / ||h||^2` over two arrays of equal length.
///
/// # Safety
/// `h` and `h_hat` must point to `len` elements; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ampsbl_nmse(
    h: *const AmpsblComplex,
    h_hat: *const AmpsblComplex,
    len: usize,
    out: *mut f64,
) -> AmpsblStatus {
    guard(|| {
        let a = slice_arg(h, len, len, "h")?;
        let b = slice_arg(h_hat, len, len, "h_hat")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let col = |v: &[AmpsblComplex]| DMatrix::from_column_slice(len, 1, &to_complex(v));
        *out = nmse(&col(a), &col(b))?;
        Ok(())
    })
}
