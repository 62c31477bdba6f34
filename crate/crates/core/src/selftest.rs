//! Quick property checks run by `ampsbl selftest`. Sample counts are kept
//! small so the whole suite finishes in seconds.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{default_config, desk_config, SystemConfig};
use crate::dataset::{load_dataset, save_dataset, Dataset, Split};
use crate::eval::flops_per_iteration;
use crate::learned::{build_features, layer_backward, layer_forward, FeatureMode, Layer, PARAMS_PER_LAYER};
use crate::rng::{complex_normal, substream, Stream};
use crate::sbl::{amp_e_step, exact_e_step, variance_to_precision, AmpOperator, ExactOperator};
use crate::system::System;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<String, String>;

const CHECKS: [(&str, Check); 10] = [
    ("exact-posterior", exact_posterior),
    ("amp-iid-fixed-point", amp_iid_fixed_point),
    ("conv-layer-gradient", conv_layer_gradient),
    ("channel-power", channel_power),
    ("whitening", whitening),
    ("measurement-operator", measurement_operator),
    ("flops-worked-values", flops_worked_values),
    ("config-round-trip", config_round_trip),
    ("dataset-round-trip", dataset_round_trip),
    ("seeded-determinism", seeded_determinism),
];

pub fn run_all() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult { name, passed, detail }
        })
        .collect()
}

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<Complex64> {
    DMatrix::from_fn(r, c, |_, _| complex_normal(rng, 1.0 / r as f64))
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, var: f64) -> DVector<Complex64> {
    DVector::from_fn(n, |_, _| complex_normal(rng, var))
}

/// Posterior mean from `(Phi^H Phi / s2 + diag(1/gamma))^-1 Phi^H y / s2`.
fn information_form_mean(phi: &DMatrix<Complex64>, y: &DVector<Complex64>, s2: f64, gamma: &[f64]) -> Option<DVector<Complex64>> {
    let mut p = phi.ad_mul(phi).unscale(s2);
    for (j, g) in gamma.iter().enumerate() {
        p[(j, j)] += Complex64::new(1.0 / g, 0.0);
    }
    Some(p.try_inverse()? * phi.ad_mul(y).unscale(s2))
}

fn exact_posterior() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (r, g) = (rng.random_range(2..=16), rng.random_range(4..=32));
        let phi = rand_matrix(&mut rng, r, g);
        let y = rand_vec(&mut rng, r, 1.0);
        let gamma: Vec<f64> = (0..g).map(|_| rng.random_range(0.05..3.0)).collect();
        let s2 = rng.random_range(0.01..1.0);
        let out = exact_e_step(&ExactOperator::new(phi.clone()), &y, s2, &gamma).map_err(|e| e.to_string())?;
        let oracle = information_form_mean(&phi, &y, s2, &gamma).ok_or("oracle inverse failed")?;
        worst = worst.max((&out.mu - &oracle).norm() / oracle.norm());
    }
    ensure(worst < 1e-10, format!("worst relative error {worst:.2e}"))
}

fn amp_iid_fixed_point() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (rows, cols, s2) = (64, 128, 0.01);
    let trials = 10;
    let mut pass = 0;
    for _ in 0..trials {
        let a = rand_matrix(&mut rng, rows, cols);
        let gamma = DVector::from_fn(cols, |_, _| if rng.random::<f64>() < 0.2 { 1.0 } else { 0.01 });
        let x = DVector::from_fn(cols, |j, _| complex_normal(&mut rng, gamma[j]));
        let y = &a * x + rand_vec(&mut rng, rows, s2);
        let exact = exact_e_step(&ExactOperator::new(a.clone()), &y, s2, gamma.as_slice()).map_err(|e| e.to_string())?;
        let op = AmpOperator::new(a);
        let prec = variance_to_precision(&gamma);
        let (mut mu, mut tau, mut s) = (DVector::zeros(cols), gamma.clone(), DVector::zeros(rows));
        for it in 1..=200 {
            let t = amp_e_step(&op, &y, s2, &mu, &tau, &s, &prec, it).map_err(|e| e.to_string())?;
            (mu, tau, s) = (t.mu, t.tau_x, t.s);
        }
        if (&mu - &exact.mu).norm() / exact.mu.norm() < 1e-2 {
            pass += 1;
        }
    }
    ensure(pass * 10 >= trials * 9, format!("{pass}/{trials} within 1e-2"))
}

fn conv_layer_gradient() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (ga, gd) = (6, 5);
    let layer = Layer::he_init(&mut rng);
    let mu = rand_vec(&mut rng, ga * gd, 1.0);
    let tau = DVector::from_fn(ga * gd, |_, _| rng.random_range(0.1..1.0));
    let f = build_features(&mu, &tau, ga, gd, FeatureMode::MagnitudeSquared).map_err(|e| e.to_string())?;
    let gamma_prev: Vec<f64> = (0..ga * gd).map(|_| rng.random_range(0.5..2.0)).collect();
    let w: Vec<f64> = (0..ga * gd).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |l: &Layer| -> f64 {
        let (out, _) = layer_forward(l, &f, &gamma_prev);
        out.iter().zip(&w).map(|(o, wi)| o * wi).sum()
    };
    let (_, cache) = layer_forward(&layer, &f, &gamma_prev);
    let grads = layer_backward(&layer, &cache, &w);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..40 {
        let i = rng.random_range(0..PARAMS_PER_LAYER);
        let mut plus = layer.clone();
        plus.params[i] += h;
        let mut minus = layer.clone();
        minus.params[i] -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let err = (fd - grads.params[i]).abs() / fd.abs().max(grads.params[i].abs()).max(1e-3);
        worst = worst.max(err);
    }
    ensure(worst < 1e-5, format!("worst relative error {worst:.2e} over 40 parameters"))
}

fn channel_power() -> Result<String, String> {
    let cfg = desk_config();
    let ds = Dataset::generate(&cfg, Split::Test, 2000);
    let k = cfg.n_subcarriers as f64;
    let mean = ds.samples.iter().map(|s| s.h.norm_squared() / k).sum::<f64>() / ds.len() as f64;
    ensure((mean - 1.0).abs() < 0.05, format!("mean ||H||_F^2/K = {mean:.4}"))
}

fn whitening() -> Result<String, String> {
    let cfg = desk_config();
    let sys = System::new(&cfg).map_err(|e| e.to_string())?;
    let m = cfg.measurements_per_subcarrier();
    let mut rng = substream(cfg.rng_seed, Stream::Noise, &[u64::MAX]);
    let draws = 20_000;
    let mut cov = DMatrix::<Complex64>::zeros(m, m);
    for _ in 0..draws {
        let mut v = DVector::zeros(m);
        for (q, wq) in sys.combiner.per_use.iter().enumerate() {
            let n = rand_vec_rng(&mut rng, cfg.n_antennas, cfg.noise_var);
            v.rows_mut(q * cfg.n_rf, cfg.n_rf).copy_from(&(wq * n));
        }
        let w = sys.combiner.whiten(&v);
        cov += &w * w.adjoint();
    }
    cov.unscale_mut(draws as f64);
    let s2 = cfg.noise_var;
    let worst = (0..m)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| {
            let target = if i == j { s2 } else { 0.0 };
            (cov[(i, j)] - Complex64::new(target, 0.0)).norm() / s2
        })
        .fold(0.0, f64::max);
    ensure(worst < 0.05, format!("worst entry deviation {:.2}% of sigma^2", 100.0 * worst))
}

fn rand_vec_rng<R: Rng + ?Sized>(rng: &mut R, n: usize, var: f64) -> DVector<Complex64> {
    DVector::from_fn(n, |_, _| complex_normal(rng, var))
}

fn measurement_operator() -> Result<String, String> {
    let cfg = desk_config();
    let sys = System::new(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (ga, gd, m) = (cfg.grid_angular, cfg.grid_delay, cfg.measurements_per_subcarrier());
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let x = rand_vec(&mut rng, ga * gd, 1.0);
        let y = &sys.op.phi * &x;
        let xm = DMatrix::from_column_slice(ga, gd, x.as_slice());
        for k in 0..cfg.n_subcarriers {
            let xk = &xm * sys.dicts.delay.row(k).transpose();
            let yk = &sys.combiner.w_bar * (&sys.dicts.angular[k] * xk);
            let got = y.rows(k * m, m);
            worst = worst.max((got - &yk).norm() / yk.norm().max(1e-300));
        }
    }
    ensure(worst < 1e-10, format!("worst relative error {worst:.2e}"))
}

fn flops_worked_values() -> Result<String, String> {
    let cfg = default_config();
    let amp = flops_per_iteration("amp-sbl-unfolding", &cfg).map_err(|e| e.to_string())?;
    let sbl = flops_per_iteration("sbl", &cfg).map_err(|e| e.to_string())?;
    ensure(
        amp == 43_712_512 && sbl == 17_179_869_184,
        format!("amp-sbl-unfolding {amp}, sbl {sbl}"),
    )
}

fn config_round_trip() -> Result<String, String> {
    let mut cfg = desk_config();
    cfg.set_snr_db(3.7);
    let back = SystemConfig::from_kv_str(&cfg.to_kv_string()).map_err(|e| e.to_string())?;
    ensure(back == cfg && back.hash() == cfg.hash(), format!("hash {}", cfg.hash()))
}

fn dataset_round_trip() -> Result<String, String> {
    let cfg = desk_config();
    let ds = Dataset::generate(&cfg, Split::Val, 5);
    let path = std::env::temp_dir().join(format!("ampsbl-selftest-{}.bin", std::process::id()));
    let result = (|| -> crate::Result<bool> {
        save_dataset(&ds, &path)?;
        let first = std::fs::read(&path)?;
        let back = load_dataset(&path)?;
        save_dataset(&back, &path)?;
        Ok(back == ds && std::fs::read(&path)? == first)
    })();
    let _ = std::fs::remove_file(&path);
    let ok = result.map_err(|e| e.to_string())?;
    ensure(ok, "load -> save is byte-identical".into())
}

fn seeded_determinism() -> Result<String, String> {
    let cfg = desk_config();
    let a = Dataset::generate(&cfg, Split::Train, 3);
    let b = Dataset::generate(&cfg, Split::Train, 3);
    let sys = System::new(&cfg).map_err(|e| e.to_string())?;
    let o1 = sys.observe(&a.samples[0].h, &mut substream(cfg.rng_seed, Stream::EvalNoise, &[9]));
    let o2 = sys.observe(&a.samples[0].h, &mut substream(cfg.rng_seed, Stream::EvalNoise, &[9]));
    ensure(a == b && o1.y == o2.y, "same seed, same channels and observations".into())
}
