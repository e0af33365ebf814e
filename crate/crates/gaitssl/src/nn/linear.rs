//! Fully connected layer.

use crate::nn::params::{GradStore, ParamModule};
use crate::real::Real;
use crate::rng::RngStream;
use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};

#[derive(Debug, Clone)]
pub struct Linear<R: Real> {
    /// (out_dim, in_dim)
    pub w: Array2<R>,
    pub b: Array1<R>,
}

impl<R: Real> Linear<R> {
    /// Glorot-uniform initialisation.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| R::fr(rng.uniform(-limit, limit)));
        Linear {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    /// x: (N, in) -> (N, out)
    pub fn forward(&self, x: &Array2<R>) -> Array2<R> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    /// Returns dx and accumulates dw/db under `prefix`.
    pub fn backward(
        &self,
        x: &Array2<R>,
        dy: &Array2<R>,
        prefix: &str,
        grads: &mut GradStore<R>,
    ) -> Array2<R> {
        let dw = dy.t().dot(x);
        let db = dy.sum_axis(Axis(0));
        grads.accumulate(&format!("{prefix}.weight"), dw.into_dyn());
        grads.accumulate(&format!("{prefix}.bias"), db.into_dyn());
        dy.dot(&self.w)
    }
}

impl<R: Real> ParamModule<R> for Linear<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, R>, bool)) {
        f(&format!("{prefix}.weight"), self.w.view().into_dyn(), true);
        f(&format!("{prefix}.bias"), self.b.view().into_dyn(), true);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, R>, bool)) {
        f(&format!("{prefix}.weight"), self.w.view_mut().into_dyn(), true);
        f(&format!("{prefix}.bias"), self.b.view_mut().into_dyn(), true);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::{central_diff, rel_err};

    fn toy() -> (Linear<f64>, Array2<f64>) {
        let mut rng = RngStream::new(5);
        let mut layer = Linear::<f64>::new(3, 2, &mut rng);
        layer.b = ndarray::arr1(&[0.1, -0.2]);
        let x = Array2::from_shape_fn((4, 3), |_| rng.uniform(-1.0, 1.0));
        (layer, x)
    }

    #[test]
    fn forward_is_affine() {
        let (layer, x) = toy();
        let y = layer.forward(&x);
        for n in 0..4 {
            for o in 0..2 {
                let expect: f64 = (0..3).map(|i| x[[n, i]] * layer.w[[o, i]]).sum::<f64>()
                    + layer.b[o];
                assert!((y[[n, o]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (layer, x) = toy();
        // Scalar loss: weighted sum of outputs.
        let w_loss = Array2::from_shape_fn((4, 2), |(i, j)| ((i + 2 * j) as f64 * 0.37).sin());
        let loss = |l: &Linear<f64>, x: &Array2<f64>| (&l.forward(x) * &w_loss).sum();

        let mut grads = GradStore::new();
        let dx = layer.backward(&x, &w_loss, "lin", &mut grads);

        for i in 0..2 {
            for j in 0..3 {
                let mut l2 = layer.clone();
                let numeric = central_diff(
                    |v| {
                        l2.w[[i, j]] = v;
                        loss(&l2, &x)
                    },
                    layer.w[[i, j]],
                    1e-6,
                );
                let analytic = grads.get("lin.weight").unwrap()[[i, j]];
                assert!(rel_err(analytic, numeric) < 1e-7);
            }
        }
        for n in 0..4 {
            for j in 0..3 {
                let mut x2 = x.clone();
                let numeric = central_diff(
                    |v| {
                        x2[[n, j]] = v;
                        loss(&layer, &x2)
                    },
                    x[[n, j]],
                    1e-6,
                );
                assert!(rel_err(dx[[n, j]], numeric) < 1e-7);
            }
        }
    }
}
