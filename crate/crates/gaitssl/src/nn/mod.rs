//! From-scratch neural network layers with analytic forward/backward passes.
//!
//! Everything is generic over [`Real`](crate::Real) so the same code path runs
//! in f32 for training and in f64 for finite-difference gradient verification.
//! Layers expose their tensors through the visitor in [`params`]; gradients
//! are accumulated by name in a [`GradStore`].

pub mod conv;
pub mod fft;
pub mod linear;
pub mod norm;
pub mod params;

pub use params::{GradStore, ParamModule};

use crate::real::Real;
use ndarray::{Array2, ArrayD};

/// Elementwise rectifier.
pub fn relu<R: Real>(x: &ArrayD<R>) -> ArrayD<R> {
    x.mapv(|v| if v > R::zero() { v } else { R::zero() })
}

/// Rectifier backward: pass gradient where the forward output was positive.
pub fn relu_backward<R: Real>(dy: &ArrayD<R>, y: &ArrayD<R>) -> ArrayD<R> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |g, &o| {
        if o <= R::zero() {
            *g = R::zero();
        }
    });
    dx
}

/// Row-wise L2 normalization to the unit sphere.
pub fn normalize_rows<R: Real>(x: &Array2<R>) -> Array2<R> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|&v| v * v).fold(R::zero(), |a, b| a + b).sqrt();
        if norm > R::zero() {
            row.mapv_inplace(|v| v / norm);
        }
    }
    out
}

/// Backward of row-wise normalization: dx = (dy - y * (y . dy)) / ||x||.
pub fn normalize_rows_backward<R: Real>(
    x: &Array2<R>,
    y: &Array2<R>,
    dy: &Array2<R>,
) -> Array2<R> {
    let mut dx = Array2::<R>::zeros(x.raw_dim());
    for i in 0..x.nrows() {
        let norm = x
            .row(i)
            .iter()
            .map(|&v| v * v)
            .fold(R::zero(), |a, b| a + b)
            .sqrt();
        if norm == R::zero() {
            continue;
        }
        let dot = y
            .row(i)
            .iter()
            .zip(dy.row(i).iter())
            .fold(R::zero(), |a, (&u, &g)| a + u * g);
        for j in 0..x.ncols() {
            dx[[i, j]] = (dy[[i, j]] - y[[i, j]] * dot) / norm;
        }
    }
    dx
}

/// Central-difference gradient checking helpers shared by tests.
pub mod check {
    /// Relative error with an absolute floor for near-zero pairs.
    pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
        let denom = analytic.abs().max(numeric.abs());
        if denom < 1e-8 {
            return 0.0;
        }
        (analytic - numeric).abs() / denom
    }

    /// Central finite difference of a scalar function.
    pub fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64, step: f64) -> f64 {
        (f(x0 + step) - f(x0 - step)) / (2.0 * step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn relu_zeroes_negatives() {
        let x = arr2(&[[1.0f64, -2.0], [0.0, 3.0]]).into_dyn();
        let y = relu(&x);
        assert_eq!(y, arr2(&[[1.0, 0.0], [0.0, 3.0]]).into_dyn());
    }

    #[test]
    fn normalize_rows_unit_norm() {
        let x = arr2(&[[3.0f64, 4.0], [0.5, 0.0]]);
        let y = normalize_rows(&x);
        for row in y.rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let x = arr2(&[[0.8f64, -0.3, 0.9], [1.5, 0.2, -0.7]]);
        let w = arr2(&[[0.3f64, -1.1, 0.7], [0.2, 0.9, -0.4]]);
        let loss = |x: &ndarray::Array2<f64>| -> f64 {
            let y = normalize_rows(x);
            (&y * &w).sum()
        };
        let y = normalize_rows(&x);
        let dx = normalize_rows_backward(&x, &y, &w);
        for i in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                let numeric = check::central_diff(
                    |v| {
                        xp[[i, j]] = v;
                        loss(&xp)
                    },
                    x[[i, j]],
                    1e-6,
                );
                assert!(
                    check::rel_err(dx[[i, j]], numeric) < 1e-6,
                    "dx[{i},{j}] = {} vs {numeric}",
                    dx[[i, j]]
                );
            }
        }
    }
}
