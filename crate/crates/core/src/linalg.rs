//! Complex products routed through real GEMM.
//!
//! nalgebra multiplies complex matrices with a generic kernel; splitting into
//! real and imaginary parts lets the exact E-step use the optimised f64 path.

use nalgebra::DMatrix;
use num_complex::Complex64;

/// `[Re(M); Im(M)]`, 2R x C.
pub fn stack_parts(m: &DMatrix<Complex64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    DMatrix::from_fn(2 * r, c, |i, j| {
        if i < r {
            m[(i, j)].re
        } else {
            m[(i - r, j)].im
        }
    })
}

pub fn unstack_parts(s: &DMatrix<f64>) -> DMatrix<Complex64> {
    let r = s.nrows() / 2;
    DMatrix::from_fn(r, s.ncols(), |i, j| Complex64::new(s[(i, j)], s[(i + r, j)]))
}

/// `B diag(w) B^H` from the stacked parts of B, for real weights w.
pub fn weighted_gram(stacked: &DMatrix<f64>, weights: &[f64]) -> DMatrix<Complex64> {
    let r = stacked.nrows() / 2;
    let mut scaled = stacked.clone();
    for (j, w) in weights.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*w);
    }
    let s = scaled * stacked.transpose();
    DMatrix::from_fn(r, r, |i, j| {
        Complex64::new(
            s[(i, j)] + s[(i + r, j + r)],
            s[(i + r, j)] - s[(i, j + r)],
        )
    })
}

/// `L B` for complex L (R x R) and stacked B, returned stacked.
pub fn left_mul_stacked(l: &DMatrix<Complex64>, stacked: &DMatrix<f64>) -> DMatrix<f64> {
    let r = l.nrows();
    let embed = DMatrix::from_fn(2 * r, 2 * r, |i, j| {
        let z = l[(i % r, j % r)];
        match (i < r, j < r) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    });
    embed * stacked
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(r: usize, c: usize, seed: f64) -> DMatrix<Complex64> {
        DMatrix::from_fn(r, c, |i, j| {
            Complex64::new((seed + i as f64 * 1.3 + j as f64).sin(), (seed * 0.7 + j as f64 * 0.4 - i as f64).cos())
        })
    }

    #[test]
    fn gram_and_left_product_match_complex_arithmetic() {
        let b = sample(5, 9, 0.2);
        let w: Vec<f64> = (0..9).map(|j| 0.5 + j as f64 * 0.25 - 1.0).collect();
        let wd = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            9,
            w.iter().map(|x| Complex64::new(*x, 0.0)),
        ));
        let expect = &b * wd * b.adjoint();
        assert!((weighted_gram(&stack_parts(&b), &w) - expect).norm() < 1e-12);

        let l = sample(5, 5, 1.1);
        let lb = unstack_parts(&left_mul_stacked(&l, &stack_parts(&b)));
        assert!((lb - &l * &b).norm() < 1e-12);
    }
}
