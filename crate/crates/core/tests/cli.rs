use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ampsbl::config::desk_config;

fn ampsbl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ampsbl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen_small(dir: &Path, seed: &str) {
    let o = ampsbl(&[
        "gen-data",
        "--scale",
        "desk",
        "--sizes",
        "24,8,8",
        "--seed",
        seed,
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_data_writes_three_splits_and_a_stable_manifest() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen_small(a.path(), "7");
    gen_small(b.path(), "7");
    for f in ["train.bin", "val.bin", "test.bin", "manifest.txt", "config.txt"] {
        assert!(a.path().join(f).exists(), "{f} missing");
    }
    let ma = fs::read_to_string(a.path().join("manifest.txt")).unwrap();
    let mb = fs::read_to_string(b.path().join("manifest.txt")).unwrap();
    assert_eq!(ma, mb);
    let mut cfg = desk_config();
    cfg.rng_seed = 7;
    assert!(ma.starts_with(&format!("# config_hash={} seed=7", cfg.hash())));
    assert!(ma.contains("train.count = 24"));

    let c = tempfile::tempdir().unwrap();
    gen_small(c.path(), "8");
    assert_ne!(ma, fs::read_to_string(c.path().join("manifest.txt")).unwrap());
}

#[test]
fn train_resume_and_evaluate() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    gen_small(data.path(), "3");
    let (d, o) = (data.path().to_str().unwrap(), out.path().to_str().unwrap());
    let base = ["train", "--data", d, "--out", o, "--max-epochs", "2", "--batch-size", "8", "--quiet"];

    let r = ampsbl(&[&base[..], &["--depth", "2"]].concat());
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(stdout(&r).contains("stage 1 depth 2"));
    let report = fs::read_to_string(out.path().join("report.csv")).unwrap();
    assert!(report.starts_with("# config_hash="));
    let rows = |t: &str| t.lines().skip(2).map(|l| l.split(',').next().unwrap().to_string()).collect::<Vec<_>>();
    assert_eq!(rows(&report), vec!["1", "1"]);

    // resuming to depth 3 trains stage 2 only and keeps the earlier rows
    let r = ampsbl(&[&base[..], &["--depth", "3", "--resume"]].concat());
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(!stdout(&r).contains("stage 1 "));
    assert!(stdout(&r).contains("stage 2 depth 3"));
    let report = fs::read_to_string(out.path().join("report.csv")).unwrap();
    assert_eq!(rows(&report), vec!["1", "1", "2", "2"]);

    let net = format!("amp-sbl-unfolding={}", out.path().join("net.bin").display());
    let csv = out.path().join("eval.csv");
    let r = ampsbl(&["evaluate", "--data", d, "--samples", "8", "--net", &net, "--out", csv.to_str().unwrap()]);
    assert!(code(&r) == 0 || code(&r) == 2, "{}", String::from_utf8_lossy(&r.stderr));
    let text = stdout(&r);
    for algo in ["sbl ", "amp-sbl ", "amp-sbl-unfolding "] {
        assert_eq!(text.lines().filter(|l| l.starts_with(algo)).count(), 1, "{text}");
    }
    assert!(fs::read_to_string(&csv).unwrap().starts_with("# config_hash="));

    let r = ampsbl(&["evaluate", "--data", d, "--samples", "100"]);
    assert_eq!(code(&r), 1);
}

#[test]
fn usage_errors_exit_with_one() {
    let data = tempfile::tempdir().unwrap();
    gen_small(data.path(), "4");
    let d = data.path().to_str().unwrap();
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    assert_eq!(code(&ampsbl(&["train", "--data", d, "--out", o, "--depth", "1"])), 1);
    assert_eq!(code(&ampsbl(&["flops", "--no-such-flag"])), 1);
    assert_eq!(code(&ampsbl(&["frobnicate"])), 1);
    assert_eq!(code(&ampsbl(&["flops", "--snr-db", "3", "--noise-var", "0.1"])), 1);
    assert_eq!(code(&ampsbl(&["flops", "--n-antennas", "0"])), 1);
    assert_eq!(code(&ampsbl(&["sweep", "--axis", "bogus", "--points", "0", "--out", "x.csv"])), 1);
}

#[test]
fn io_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let m = missing.to_str().unwrap();
    assert_eq!(code(&ampsbl(&["train", "--data", m, "--out", m])), 3);
    fs::write(dir.path().join("test.bin"), b"garbage").unwrap();
    assert_eq!(code(&ampsbl(&["evaluate", "--data", dir.path().to_str().unwrap()])), 3);
}

#[test]
fn flops_defaults_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("flops.csv");
    let r = ampsbl(&["flops", "--defaults", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&r), 0);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.contains("amp-sbl-unfolding,43712512"));
    assert!(text.contains("sbl,17179869184"));
    assert!(text.lines().next().unwrap().starts_with("# config_hash="));
}

#[test]
fn config_precedence_flag_over_file_over_default() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.txt");
    fs::write(&file, "n_subcarriers = 16\nn_rf = 2\n").unwrap();
    let out = dir.path().join("f.csv");
    let f = file.to_str().unwrap();
    let r = ampsbl(&["flops", "--config", f, "--n-rf", "8", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&r), 0);
    // K = 16 from the file, M = Q N_RF = 4 * 8 from the flag, G = 4096 default
    let km = 16u64 * 32;
    let expect = (20 * km + 432) * 4096;
    assert!(fs::read_to_string(&out).unwrap().contains(&format!("amp-sbl-unfolding,{expect}")));
}

#[test]
fn sweep_writes_csv_per_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let r = ampsbl(&[
        "sweep",
        "--scale",
        "desk",
        "--axis",
        "snr",
        "--points",
        "0:20:10",
        "--samples",
        "4",
        "--n-iterations",
        "5",
        "--out",
        out.to_str().unwrap(),
        "--threads",
        "1",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert_eq!(lines.next().unwrap(), "axis,value,algo,nmse_db,n_samples,flops_total,fail_rate");
    assert_eq!(lines.count(), 3 * 2);
}

#[test]
fn selftest_passes() {
    let r = ampsbl(&["selftest"]);
    assert_eq!(code(&r), 0, "{}", stdout(&r));
    assert!(!stdout(&r).contains("FAIL"));
}
