use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::rng::complex_normal;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, cols: usize) -> DMatrix<Complex64> {
    DMatrix::from_fn(r, cols, |_, _| complex_normal(rng, 1.0 / r as f64))
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<Complex64> {
    DVector::from_fn(n, |_, _| complex_normal(rng, 1.0))
}

/// Information-form posterior: `Sigma = (Phi^H Phi / s2 + diag(1/gamma))^-1`.
fn info_form(phi: &DMatrix<Complex64>, y: &DVector<Complex64>, s2: f64, gamma: &[f64]) -> (DVector<Complex64>, Vec<f64>) {
    let mut p = phi.ad_mul(phi) / c(s2, 0.0);
    for (j, g) in gamma.iter().enumerate() {
        p[(j, j)] += c(1.0 / g, 0.0);
    }
    let sigma = p.try_inverse().unwrap();
    let mu = &sigma * phi.ad_mul(y) / c(s2, 0.0);
    (mu, (0..gamma.len()).map(|j| sigma[(j, j)].re).collect())
}

#[test]
fn scalar_posterior() {
    let op = ExactOperator::new(DMatrix::from_element(1, 1, c(1.0, 0.0)));
    let out = exact_e_step(&op, &DVector::from_element(1, c(2.0, 0.0)), 1.0, &[1.0]).unwrap();
    assert!((out.mu[0] - c(1.0, 0.0)).norm() < 1e-15);
    assert!((out.tau[0] - 0.5).abs() < 1e-15);
}

#[test]
fn zero_prior_pins_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let phi = rand_matrix(&mut rng, 4, 6);
    let y = rand_vec(&mut rng, 4);
    let out = exact_e_step(&ExactOperator::new(phi), &y, 0.1, &[0.0; 6]).unwrap();
    assert!(out.mu.iter().all(|v| *v == c(0.0, 0.0)));
    assert!(out.tau.iter().all(|v| *v == 0.0));
}

#[test]
fn exact_matches_information_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (r, g) = (rng.random_range(2..=8), rng.random_range(4..=16));
        let phi = rand_matrix(&mut rng, r, g);
        let y = rand_vec(&mut rng, r);
        let gamma: Vec<f64> = (0..g).map(|_| rng.random_range(0.05..3.0)).collect();
        let s2 = rng.random_range(0.01..1.0);
        let out = exact_e_step(&ExactOperator::new(phi.clone()), &y, s2, &gamma).unwrap();
        let (mu, tau) = info_form(&phi, &y, s2, &gamma);
        assert!((&out.mu - &mu).norm() / mu.norm() < 1e-10);
        for j in 0..g {
            assert!((out.tau[j] - tau[j]).abs() / tau[j] < 1e-10);
        }
    }
}

#[test]
fn dimension_errors() {
    let op = ExactOperator::new(DMatrix::zeros(2, 3));
    assert!(matches!(
        exact_e_step(&op, &DVector::zeros(3), 1.0, &[1.0; 3]),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn classic_m_step_examples() {
    let g = classic_m_step(
        &DVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0), c(3.0, 4.0)]),
        &DVector::from_vec(vec![0.5, 0.0, 0.0]),
    );
    assert_eq!(g.as_slice(), &[1.5, 0.0, 25.0]);
}

/// Lines 1-5 evaluated by hand, scalar by scalar.
#[test]
fn amp_hand_computed_2x3() {
    let a = DMatrix::from_row_slice(2, 3, &[c(1.0, 0.0), c(0.0, 1.0), c(0.5, -0.5), c(0.0, -1.0), c(2.0, 0.0), c(1.0, 1.0)]);
    let r = DVector::from_vec(vec![c(1.0, 2.0), c(-1.0, 0.5)]);
    let s2 = 0.5;
    let mu0 = DVector::from_vec(vec![c(0.5, 0.0), c(0.0, -1.0), c(1.0, 1.0)]);
    let tau0 = DVector::from_vec(vec![1.0, 2.0, 0.5]);
    let s0 = DVector::from_vec(vec![c(0.25, 0.0), c(0.0, 0.5)]);
    let prec = DVector::from_vec(vec![1.0, 0.5, 4.0]);
    let t = amp_e_step(&AmpOperator::new(a), &r, s2, &mu0, &tau0, &s0, &prec, 1).unwrap();

    // |A|^2 = [[1, 1, .5], [1, 4, 2]]
    let tau_p = [1.0 * 1.0 + 1.0 * 2.0 + 0.5 * 0.5, 1.0 * 1.0 + 4.0 * 2.0 + 2.0 * 0.5];
    assert_eq!(tau_p, [3.25, 10.0]);
    // A mu0: row 0 = .5 + i(-i) + (.5-.5i)(1+i) = .5 + 1 + 1 = 2.5
    //        row 1 = -i(.5) + 2(-i) + (1+i)(1+i) = -2.5i + 2i = -0.5i
    let p = [c(2.5, 0.0) - s0[0] * 3.25, c(0.0, -0.5) - s0[1] * 10.0];
    assert_eq!(p, [c(1.6875, 0.0), c(0.0, -5.5)]);
    let tau_s = [1.0 / 3.75, 1.0 / 10.5];
    let s = [(r[0] - p[0]) * tau_s[0], (r[1] - p[1]) * tau_s[1]];
    let tau_q = [
        1.0 / (tau_s[0] + tau_s[1]),
        1.0 / (tau_s[0] + 4.0 * tau_s[1]),
        1.0 / (0.5 * tau_s[0] + 2.0 * tau_s[1]),
    ];
    // A^H s, column by column
    let ahs = [
        s[0] + c(0.0, 1.0) * s[1],
        c(0.0, -1.0) * s[0] + 2.0 * s[1],
        c(0.5, 0.5) * s[0] + c(1.0, -1.0) * s[1],
    ];
    for j in 0..3 {
        let q = mu0[j] + ahs[j] * tau_q[j];
        let den = 1.0 + tau_q[j] * prec[j];
        assert!((t.tau_q[j] - tau_q[j]).abs() <= 4.0 * f64::EPSILON * tau_q[j]);
        assert!((t.q[j] - q).norm() <= 8.0 * f64::EPSILON * q.norm());
        assert!((t.mu[j] - q / den).norm() <= 8.0 * f64::EPSILON * q.norm());
        assert!((t.tau_x[j] - tau_q[j] / den).abs() <= 8.0 * f64::EPSILON * tau_q[j]);
    }
    for i in 0..2 {
        assert_eq!(t.tau_p[i], tau_p[i]);
        assert_eq!(t.p[i], p[i]);
        assert!((t.tau_s[i] - tau_s[i]).abs() <= f64::EPSILON * tau_s[i]);
        assert!((t.s[i] - s[i]).norm() <= 4.0 * f64::EPSILON * s[i].norm());
    }
}

#[test]
fn amp_large_precision_pins_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let op = AmpOperator::new(rand_matrix(&mut rng, 4, 6));
    let r = rand_vec(&mut rng, 4);
    let t = amp_e_step(
        &op,
        &r,
        0.1,
        &DVector::zeros(6),
        &DVector::from_element(6, 1.0),
        &DVector::zeros(4),
        &DVector::from_element(6, 1e15),
        1,
    )
    .unwrap();
    assert!(t.mu.norm() < 1e-12 && t.tau_x.max() < 1e-12);
}

#[test]
fn amp_reports_non_finite_as_divergence() {
    let op = AmpOperator::new(DMatrix::zeros(2, 3));
    let e = amp_e_step(
        &op,
        &DVector::zeros(2),
        0.0,
        &DVector::zeros(3),
        &DVector::from_element(3, 1.0),
        &DVector::zeros(2),
        &DVector::from_element(3, 1.0),
        7,
    )
    .unwrap_err();
    assert!(matches!(e, Error::Divergence { iteration: 7, .. }));
}

/// Scalar probe `sum Re(conj(w) v)` over every output of a step.
struct Probe {
    w_mu: DVector<Complex64>,
    w_tau: DVector<f64>,
    w_s: DVector<Complex64>,
}

impl Probe {
    fn amp(&self, t: &AmpTape) -> f64 {
        let a: f64 = self.w_mu.iter().zip(t.mu.iter()).map(|(w, v)| (w.conj() * v).re).sum();
        let b: f64 = self.w_tau.iter().zip(t.tau_x.iter()).map(|(w, v)| w * v).sum();
        let c: f64 = self.w_s.iter().zip(t.s.iter()).map(|(w, v)| (w.conj() * v).re).sum();
        a + b + c
    }
}

/// Fourth-order central difference of `f` along one direction.
fn fd4(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn amp_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (rows, cols) = (5, 8);
    let op = AmpOperator::new(rand_matrix(&mut rng, rows, cols));
    let r = rand_vec(&mut rng, rows);
    let s2 = 0.3;
    let mu = rand_vec(&mut rng, cols);
    let tau: DVector<f64> = DVector::from_fn(cols, |_, _| rng.random_range(0.2..1.5));
    let s = rand_vec(&mut rng, rows);
    let prec: DVector<f64> = DVector::from_fn(cols, |_, _| rng.random_range(0.2..2.0));
    let probe = Probe {
        w_mu: rand_vec(&mut rng, cols),
        w_tau: DVector::from_fn(cols, |_, _| rng.random_range(-1.0..1.0)),
        w_s: rand_vec(&mut rng, rows),
    };
    let f = |mu: &DVector<Complex64>, tau: &DVector<f64>, s: &DVector<Complex64>, g: &DVector<f64>| {
        probe.amp(&amp_e_step(&op, &r, s2, mu, tau, s, g, 1).unwrap())
    };
    let tape = amp_e_step(&op, &r, s2, &mu, &tau, &s, &prec, 1).unwrap();
    let g = amp_e_step_backward(&op, &r, &tape, &probe.w_mu, &probe.w_tau, &probe.w_s);
    let h = 1e-4;
    for j in 0..cols {
        for (part, unit) in [(0, c(1.0, 0.0)), (1, c(0.0, 1.0))] {
            let fd = fd4(
                |e| {
                    let mut p = mu.clone();
                    p[j] += unit * e;
                    f(&p, &tau, &s, &prec)
                },
                h,
            );
            let an = if part == 0 { g.mu_prev[j].re } else { g.mu_prev[j].im };
            assert!(rel_err(fd, an) < 1e-8, "mu[{j}].{part}: fd {fd} vs {an}");
        }
        let fd = fd4(
            |e| {
                let mut p = tau.clone();
                p[j] += e;
                f(&mu, &p, &s, &prec)
            },
            h,
        );
        assert!(rel_err(fd, g.tau_x_prev[j]) < 1e-8, "tau[{j}]");
        let fd = fd4(
            |e| {
                let mut p = prec.clone();
                p[j] += e;
                f(&mu, &tau, &s, &p)
            },
            h,
        );
        assert!(rel_err(fd, g.gamma[j]) < 1e-8, "gamma[{j}]");
    }
    for i in 0..rows {
        for (part, unit) in [(0, c(1.0, 0.0)), (1, c(0.0, 1.0))] {
            let fd = fd4(
                |e| {
                    let mut p = s.clone();
                    p[i] += unit * e;
                    f(&mu, &tau, &p, &prec)
                },
                h,
            );
            let an = if part == 0 { g.s_prev[i].re } else { g.s_prev[i].im };
            assert!(rel_err(fd, an) < 1e-8, "s[{i}].{part}");
        }
    }
}

#[test]
fn exact_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (rows, cols) = (6, 10);
    let op = ExactOperator::new(rand_matrix(&mut rng, rows, cols));
    let y = rand_vec(&mut rng, rows);
    let s2 = 0.2;
    let gamma: Vec<f64> = (0..cols).map(|_| rng.random_range(0.2..2.0)).collect();
    let w_mu = rand_vec(&mut rng, cols);
    let w_tau: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = |g: &[f64]| {
        let o = exact_e_step(&op, &y, s2, g).unwrap();
        let a: f64 = w_mu.iter().zip(o.mu.iter()).map(|(w, v)| (w.conj() * v).re).sum();
        let b: f64 = w_tau.iter().zip(o.tau.iter()).map(|(w, v)| w * v).sum();
        a + b
    };
    let out = exact_e_step(&op, &y, s2, &gamma).unwrap();
    let grad = exact_e_step_backward(&out.tape, &w_mu, &w_tau);
    for j in 0..cols {
        let fd = fd4(
            |e| {
                let mut p = gamma.clone();
                p[j] += e;
                f(&p)
            },
            1e-4,
        );
        assert!(rel_err(fd, grad[j]) < 1e-8, "gamma[{j}]: fd {fd} vs {}", grad[j]);
    }
}

#[test]
fn zero_iterations_return_the_prior_mean() {
    let cfg = crate::config::desk_config();
    let sys = crate::system::System::new(&cfg).unwrap();
    let y = DVector::from_element(sys.op.rows(), c(1.0, 0.0));
    let r = sys.op.unitary_transform(&y);
    let spec = EstimatorSpec::new(EStepKind::Exact, MStepKind::Classic, 0);
    let est = sys
        .estimator
        .run(&spec, Measurements { y: &y, r: &r }, cfg.noise_var, None, None)
        .unwrap();
    assert!(est.x_hat.iter().all(|v| *v == c(0.0, 0.0)));
    assert!(est.trace.is_empty());
}

#[test]
fn learned_spec_needs_matching_net() {
    let cfg = crate::config::desk_config();
    let sys = crate::system::System::new(&cfg).unwrap();
    let y = DVector::zeros(sys.op.rows());
    let spec = EstimatorSpec::new(EStepKind::Amp, MStepKind::Learned, 4);
    let meas = Measurements { y: &y, r: &y };
    assert!(sys.estimator.run(&spec, meas, 0.1, None, None).is_err());
    let net = crate::learned::MStepNet::new(16, 16, crate::learned::FeatureMode::MagnitudeSquared);
    assert!(sys.estimator.run(&spec, meas, 0.1, Some(&net), None).is_err());
}
