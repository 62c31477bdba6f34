use std::ffi::{c_char, CStr, CString};
use std::ptr;

use ampsbl::dataset::{Dataset, Split};
use ampsbl::learned::{FeatureMode, MStepNet};
use ampsbl::desk_config;
use ampsbl_ffi::*;
use rand::SeedableRng;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe {
        ampsbl_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn desk() -> *mut AmpsblConfig {
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { ampsbl_config_new(AmpsblPreset::Desk, &mut cfg) }, AmpsblStatus::Ok);
    cfg
}

fn system(cfg: *const AmpsblConfig) -> *mut AmpsblSystem {
    let mut sys = ptr::null_mut();
    assert_eq!(unsafe { ampsbl_system_new(cfg, &mut sys) }, AmpsblStatus::Ok);
    sys
}

#[test]
fn config_keys_and_hash() {
    let cfg = desk();
    let key = CString::new("snr_db").unwrap();
    let val = CString::new("20").unwrap();
    assert_eq!(unsafe { ampsbl_config_set(cfg, key.as_ptr(), val.as_ptr()) }, AmpsblStatus::Ok);

    let mut expect = desk_config();
    expect.set_snr_db(20.0);
    let mut buf = [0 as c_char; 17];
    assert_eq!(unsafe { ampsbl_config_hash(cfg, buf.as_mut_ptr(), buf.len()) }, AmpsblStatus::Ok);
    let got = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_owned();
    assert_eq!(got, expect.hash());

    let mut small = [0 as c_char; 8];
    assert_eq!(
        unsafe { ampsbl_config_hash(cfg, small.as_mut_ptr(), small.len()) },
        AmpsblStatus::InvalidArgument
    );

    let bad = CString::new("no_such_key").unwrap();
    assert_eq!(unsafe { ampsbl_config_set(cfg, bad.as_ptr(), val.as_ptr()) }, AmpsblStatus::InvalidConfig);
    assert!(last_error().contains("no_such_key"));
    unsafe { ampsbl_config_free(cfg) };
}

#[test]
fn null_handles_are_reported() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ampsbl_system_new(ptr::null(), &mut out) }, AmpsblStatus::NullPointer);
    assert!(out.is_null());
    assert_eq!(unsafe { ampsbl_config_new(AmpsblPreset::Desk, ptr::null_mut()) }, AmpsblStatus::NullPointer);
    unsafe {
        ampsbl_config_free(ptr::null_mut());
        ampsbl_system_free(ptr::null_mut());
        ampsbl_net_free(ptr::null_mut());
    }
}

#[test]
fn invalid_config_fails_at_system_build() {
    let cfg = desk();
    let (k, v) = (CString::new("n_antennas").unwrap(), CString::new("0").unwrap());
    assert_eq!(unsafe { ampsbl_config_set(cfg, k.as_ptr(), v.as_ptr()) }, AmpsblStatus::Ok);
    let mut sys = ptr::null_mut();
    assert_eq!(unsafe { ampsbl_system_new(cfg, &mut sys) }, AmpsblStatus::InvalidConfig);
    unsafe { ampsbl_config_free(cfg) };
}

#[test]
fn flops_through_the_boundary() {
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { ampsbl_config_new(AmpsblPreset::Paper, &mut cfg) }, AmpsblStatus::Ok);
    let mut v = 0u64;
    let name = CString::new("amp-sbl-unfolding").unwrap();
    assert_eq!(unsafe { ampsbl_flops_per_iteration(cfg, name.as_ptr(), &mut v) }, AmpsblStatus::Ok);
    assert_eq!(v, 43_712_512);
    let name = CString::new("nope").unwrap();
    assert_eq!(unsafe { ampsbl_flops_per_iteration(cfg, name.as_ptr(), &mut v) }, AmpsblStatus::InvalidConfig);
    unsafe { ampsbl_config_free(cfg) };
}

#[test]
fn simulate_and_estimate() {
    let cfg = desk();
    let sys = system(cfg);
    let mut dims = AmpsblDims::default();
    assert_eq!(unsafe { ampsbl_system_dims(sys, &mut dims) }, AmpsblStatus::Ok);
    let c = desk_config();
    assert_eq!(dims.n_antennas, c.n_antennas);
    assert_eq!(dims.n_measurements, c.n_measurements());
    assert_eq!(dims.grid_size, c.grid_size());
    let nk = dims.n_antennas * dims.n_subcarriers;

    let mut h = vec![AmpsblComplex::default(); nk];
    assert_eq!(unsafe { ampsbl_channel_draw(sys, 3, h.as_mut_ptr(), nk) }, AmpsblStatus::Ok);
    let reference = &Dataset::generate(&c, Split::Test, 4).samples[3].h;
    for (a, b) in h.iter().zip(reference.iter()) {
        assert_eq!((a.re, a.im), (b.re, b.im));
    }

    let mut y = vec![AmpsblComplex::default(); dims.n_measurements];
    assert_eq!(
        unsafe { ampsbl_observe(sys, h.as_ptr(), nk, 0, y.as_mut_ptr(), y.len()) },
        AmpsblStatus::Ok
    );
    let mut y2 = vec![AmpsblComplex::default(); dims.n_measurements];
    unsafe { ampsbl_observe(sys, h.as_ptr(), nk, 0, y2.as_mut_ptr(), y2.len()) };
    assert_eq!(y, y2);

    let mut h_hat = vec![AmpsblComplex::default(); nk];
    let mut at = 0usize;
    let st = unsafe {
        ampsbl_estimate(sys, AmpsblAlgo::Sbl, 30, ptr::null(), y.as_ptr(), y.len(), h_hat.as_mut_ptr(), nk, &mut at)
    };
    assert_eq!(st, AmpsblStatus::Ok, "{}", last_error());
    let mut e = 0.0;
    assert_eq!(unsafe { ampsbl_nmse(h.as_ptr(), h_hat.as_ptr(), nk, &mut e) }, AmpsblStatus::Ok);
    assert!(e.is_finite() && e > 0.0 && e < 10.0);

    // wrong lengths and a learned algorithm without a net
    let st = unsafe {
        ampsbl_estimate(sys, AmpsblAlgo::Sbl, 30, ptr::null(), y.as_ptr(), y.len() - 1, h_hat.as_mut_ptr(), nk, ptr::null_mut())
    };
    assert_eq!(st, AmpsblStatus::Dimension);
    let st = unsafe {
        ampsbl_estimate(sys, AmpsblAlgo::AmpSblUnfolding, 0, ptr::null(), y.as_ptr(), y.len(), h_hat.as_mut_ptr(), nk, ptr::null_mut())
    };
    assert_eq!(st, AmpsblStatus::NullPointer);
    unsafe {
        ampsbl_system_free(sys);
        ampsbl_config_free(cfg);
    }
}

#[test]
fn learned_estimate_with_loaded_net() {
    let c = desk_config();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.bin");
    let mut net = MStepNet::new(c.grid_angular, c.grid_delay, FeatureMode::MagnitudeSquared);
    net.push_layer(&mut rand_chacha::ChaCha8Rng::seed_from_u64(5));
    net.save(&c, &path).unwrap();

    let cfg = desk();
    let sys = system(cfg);
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { ampsbl_net_load(cfg, cpath.as_ptr(), &mut handle) }, AmpsblStatus::Ok);
    let mut depth = 0;
    assert_eq!(unsafe { ampsbl_net_depth(handle, &mut depth) }, AmpsblStatus::Ok);
    assert_eq!(depth, 2);

    let nk = c.n_antennas * c.n_subcarriers;
    let mut h = vec![AmpsblComplex::default(); nk];
    unsafe { ampsbl_channel_draw(sys, 0, h.as_mut_ptr(), nk) };
    let mut y = vec![AmpsblComplex::default(); c.n_measurements()];
    unsafe { ampsbl_observe(sys, h.as_ptr(), nk, 1, y.as_mut_ptr(), y.len()) };
    let mut h_hat = vec![AmpsblComplex::default(); nk];
    let st = unsafe {
        ampsbl_estimate(sys, AmpsblAlgo::AmpSblUnfolding, 0, handle, y.as_ptr(), y.len(), h_hat.as_mut_ptr(), nk, ptr::null_mut())
    };
    assert_eq!(st, AmpsblStatus::Ok, "{}", last_error());
    assert!(h_hat.iter().all(|z| z.re.is_finite() && z.im.is_finite()));

    let missing = CString::new(dir.path().join("absent.bin").to_str().unwrap()).unwrap();
    let mut other = ptr::null_mut();
    assert_eq!(unsafe { ampsbl_net_load(cfg, missing.as_ptr(), &mut other) }, AmpsblStatus::Io);

    let mut paper = ptr::null_mut();
    unsafe { ampsbl_config_new(AmpsblPreset::Paper, &mut paper) };
    assert_eq!(unsafe { ampsbl_net_load(paper, cpath.as_ptr(), &mut other) }, AmpsblStatus::ConfigMismatch);
    unsafe {
        ampsbl_net_free(handle);
        ampsbl_system_free(sys);
        ampsbl_config_free(cfg);
        ampsbl_config_free(paper);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/ampsbl.h")).unwrap();
    for f in [
        "ampsbl_last_error",
        "ampsbl_config_new",
        "ampsbl_config_load",
        "ampsbl_config_set",
        "ampsbl_config_hash",
        "ampsbl_config_free",
        "ampsbl_flops_per_iteration",
        "ampsbl_system_new",
        "ampsbl_system_free",
        "ampsbl_system_dims",
        "ampsbl_channel_draw",
        "ampsbl_observe",
        "ampsbl_net_load",
        "ampsbl_net_depth",
        "ampsbl_net_free",
        "ampsbl_estimate",
        "ampsbl_nmse",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct AmpsblSystem AmpsblSystem;"));
}

/// The header must compile as C on its own.
#[test]
fn header_is_valid_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        "#include \"ampsbl.h\"\nint main(void) { AmpsblConfig *c = 0; return ampsbl_config_new(AMPSBL_PRESET_DESK, &c) == AMPSBL_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let status = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .status();
    match status {
        Ok(s) => assert!(s.success(), "C compiler rejected the header"),
        Err(_) => eprintln!("no C compiler on PATH; skipped"),
    }
}
