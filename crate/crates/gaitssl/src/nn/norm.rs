//! Batch and layer normalization.

use crate::nn::params::{GradStore, ParamModule};
use crate::real::Real;
use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rayon::prelude::*;

/// Batch normalization over the channel axis of (N, C, L) tensors.
///
/// Train mode normalizes with batch statistics and folds them into the
/// running estimates; eval mode uses the running estimates only.
#[derive(Debug, Clone)]
pub struct BatchNorm<R: Real> {
    pub gamma: Array1<R>,
    pub beta: Array1<R>,
    pub running_mean: Array1<R>,
    pub running_var: Array1<R>,
    pub eps: R,
    /// Fraction of the batch statistic folded into the running estimate.
    pub momentum: R,
}

#[derive(Debug, Clone)]
pub struct BnCache<R: Real> {
    /// The raw input; normalized values are recomputed from the statistics
    /// during the backward pass.
    pub x: Array3<R>,
    pub inv_std: Array1<R>,
    /// Batch statistics, folded into the running estimates on commit.
    pub mean: Array1<R>,
    pub var: Array1<R>,
}

impl<R: Real> BatchNorm<R> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: R::fr(1e-5),
            momentum: R::fr(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalize with batch statistics without touching the running
    /// estimates; the key-branch forward relies on this being pure. The input
    /// moves into the cache for the backward pass.
    pub fn forward_stats(&self, x: Array3<R>) -> (Array3<R>, BnCache<R>) {
        let (n, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        debug_assert_eq!(c, self.channels());
        let m = R::fr((n * l) as f64);
        let stats: Vec<(R, R)> = (0..c)
            .into_par_iter()
            .map(|ci| {
                let mut sum = R::zero();
                let mut sq = R::zero();
                for ni in 0..n {
                    let row = x.slice(ndarray::s![ni, ci, ..]);
                    let row = row.as_slice().expect("contiguous input");
                    for &v in row {
                        sum += v;
                        sq += v * v;
                    }
                }
                let mu = sum / m;
                (mu, sq / m - mu * mu)
            })
            .collect();
        let mean = Array1::from_iter(stats.iter().map(|&(mu, _)| mu));
        let var = Array1::from_iter(stats.iter().map(|&(_, v)| v));
        let inv_std = var.mapv(|v| R::one() / (v + self.eps).sqrt());

        let mut y = Array3::<R>::zeros((n, c, l));
        ndarray::Zip::from(y.outer_iter_mut())
            .and(x.outer_iter())
            .par_for_each(|mut yrow, xrow| {
                for ci in 0..c {
                    let (mu, is) = (mean[ci], inv_std[ci]);
                    let (g, b) = (self.gamma[ci], self.beta[ci]);
                    let src = xrow.row(ci);
                    let src = src.to_slice().expect("contiguous");
                    let mut dst = yrow.row_mut(ci);
                    let dst = dst.as_slice_mut().expect("contiguous");
                    for (yv, &xv) in dst.iter_mut().zip(src) {
                        *yv = g * (xv - mu) * is + b;
                    }
                }
            });
        (
            y,
            BnCache {
                x,
                inv_std,
                mean,
                var,
            },
        )
    }

    /// Fold the batch statistics of a cached forward into the running
    /// estimates.
    pub fn commit_stats(&mut self, cache: &BnCache<R>) {
        let one = R::one();
        for ci in 0..self.channels() {
            self.running_mean[ci] =
                (one - self.momentum) * self.running_mean[ci] + self.momentum * cache.mean[ci];
            self.running_var[ci] =
                (one - self.momentum) * self.running_var[ci] + self.momentum * cache.var[ci];
        }
    }

    /// Batch-statistics forward that also updates the running estimates.
    pub fn forward_train(&mut self, x: Array3<R>) -> (Array3<R>, BnCache<R>) {
        let (y, cache) = self.forward_stats(x);
        self.commit_stats(&cache);
        (y, cache)
    }

    pub fn forward_eval(&self, x: &Array3<R>) -> Array3<R> {
        let c = self.channels();
        let mut y = x.clone();
        for ci in 0..c {
            let is = R::one() / (self.running_var[ci] + self.eps).sqrt();
            let (mu, g, b) = (self.running_mean[ci], self.gamma[ci], self.beta[ci]);
            y.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|v| g * (v - mu) * is + b);
        }
        y
    }

    pub fn backward(
        &self,
        cache: &BnCache<R>,
        dy: ndarray::ArrayView3<R>,
        prefix: &str,
        grads: &mut GradStore<R>,
    ) -> Array3<R> {
        let (n, c, l) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
        let m = R::fr((n * l) as f64);
        let mut dx = Array3::<R>::zeros(dy.raw_dim());
        let sums: Vec<(R, R)> = (0..c)
            .into_par_iter()
            .map(|ci| {
                let mu = cache.mean[ci];
                let is = cache.inv_std[ci];
                let mut sum_dy = R::zero();
                let mut sum_dy_xhat = R::zero();
                for ni in 0..n {
                    let g = dy.slice(ndarray::s![ni, ci, ..]);
                    let g = g.as_slice().expect("contiguous");
                    let xr = cache.x.slice(ndarray::s![ni, ci, ..]);
                    let xr = xr.as_slice().expect("contiguous");
                    for (&gv, &xv) in g.iter().zip(xr) {
                        sum_dy += gv;
                        sum_dy_xhat += gv * (xv - mu) * is;
                    }
                }
                (sum_dy, sum_dy_xhat)
            })
            .collect();
        ndarray::Zip::from(dx.outer_iter_mut())
            .and(dy.outer_iter())
            .and(cache.x.outer_iter())
            .par_for_each(|mut drow, grow, xrow| {
                for ci in 0..c {
                    let (sum_dy, sum_dy_xhat) = sums[ci];
                    let mu = cache.mean[ci];
                    let is = cache.inv_std[ci];
                    let scale = self.gamma[ci] * is / m;
                    let g = grow.row(ci);
                    let g = g.to_slice().expect("contiguous");
                    let xr = xrow.row(ci);
                    let xr = xr.to_slice().expect("contiguous");
                    let mut d = drow.row_mut(ci);
                    let d = d.as_slice_mut().expect("contiguous");
                    for ((dv, &gv), &xv) in d.iter_mut().zip(g).zip(xr) {
                        let hv = (xv - mu) * is;
                        *dv = scale * (m * gv - sum_dy - hv * sum_dy_xhat);
                    }
                }
            });
        let dgamma = Array1::from_iter(sums.iter().map(|&(_, sx)| sx));
        let dbeta = Array1::from_iter(sums.iter().map(|&(sd, _)| sd));
        grads.accumulate(&format!("{prefix}.gamma"), dgamma.into_dyn());
        grads.accumulate(&format!("{prefix}.beta"), dbeta.into_dyn());
        dx
    }
}

impl<R: Real> ParamModule<R> for BatchNorm<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, R>, bool)) {
        f(&format!("{prefix}.gamma"), self.gamma.view().into_dyn(), true);
        f(&format!("{prefix}.beta"), self.beta.view().into_dyn(), true);
        f(
            &format!("{prefix}.running_mean"),
            self.running_mean.view().into_dyn(),
            false,
        );
        f(
            &format!("{prefix}.running_var"),
            self.running_var.view().into_dyn(),
            false,
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, R>, bool)) {
        f(
            &format!("{prefix}.gamma"),
            self.gamma.view_mut().into_dyn(),
            true,
        );
        f(
            &format!("{prefix}.beta"),
            self.beta.view_mut().into_dyn(),
            true,
        );
        f(
            &format!("{prefix}.running_mean"),
            self.running_mean.view_mut().into_dyn(),
            false,
        );
        f(
            &format!("{prefix}.running_var"),
            self.running_var.view_mut().into_dyn(),
            false,
        );
    }
}

/// Layer normalization over the last axis of (M, D) views.
#[derive(Debug, Clone)]
pub struct LayerNorm<R: Real> {
    pub gamma: Array1<R>,
    pub beta: Array1<R>,
    pub eps: R,
}

#[derive(Debug, Clone)]
pub struct LnCache<R: Real> {
    pub xhat: Array2<R>,
    pub inv_std: Array1<R>,
}

impl<R: Real> LayerNorm<R> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps: R::fr(1e-5),
        }
    }

    pub fn forward(&self, x: &Array2<R>) -> (Array2<R>, LnCache<R>) {
        let (m, d) = (x.nrows(), x.ncols());
        let dm = R::fr(d as f64);
        let mut xhat = x.clone();
        let mut inv_std = Array1::<R>::zeros(m);
        for i in 0..m {
            let row = x.row(i);
            let mu = row.iter().fold(R::zero(), |a, &b| a + b) / dm;
            let var = row.iter().fold(R::zero(), |a, &b| a + (b - mu) * (b - mu)) / dm;
            let is = R::one() / (var + self.eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                xhat[[i, j]] = (x[[i, j]] - mu) * is;
            }
        }
        let mut y = xhat.clone();
        for i in 0..m {
            for j in 0..d {
                y[[i, j]] = self.gamma[j] * y[[i, j]] + self.beta[j];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LnCache<R>,
        dy: &Array2<R>,
        prefix: &str,
        grads: &mut GradStore<R>,
    ) -> Array2<R> {
        let (m, d) = (dy.nrows(), dy.ncols());
        let dm = R::fr(d as f64);
        let mut dgamma = Array1::<R>::zeros(d);
        let mut dbeta = Array1::<R>::zeros(d);
        let mut dx = Array2::<R>::zeros(dy.raw_dim());
        for i in 0..m {
            let mut sum_g = R::zero();
            let mut sum_g_xhat = R::zero();
            for j in 0..d {
                let g = dy[[i, j]] * self.gamma[j];
                sum_g = sum_g + g;
                sum_g_xhat = sum_g_xhat + g * cache.xhat[[i, j]];
                dgamma[j] = dgamma[j] + dy[[i, j]] * cache.xhat[[i, j]];
                dbeta[j] = dbeta[j] + dy[[i, j]];
            }
            let is = cache.inv_std[i];
            for j in 0..d {
                let g = dy[[i, j]] * self.gamma[j];
                dx[[i, j]] = is / dm * (dm * g - sum_g - cache.xhat[[i, j]] * sum_g_xhat);
            }
        }
        grads.accumulate(&format!("{prefix}.gamma"), dgamma.into_dyn());
        grads.accumulate(&format!("{prefix}.beta"), dbeta.into_dyn());
        dx
    }
}

impl<R: Real> ParamModule<R> for LayerNorm<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, R>, bool)) {
        f(&format!("{prefix}.gamma"), self.gamma.view().into_dyn(), true);
        f(&format!("{prefix}.beta"), self.beta.view().into_dyn(), true);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, R>, bool)) {
        f(
            &format!("{prefix}.gamma"),
            self.gamma.view_mut().into_dyn(),
            true,
        );
        f(
            &format!("{prefix}.beta"),
            self.beta.view_mut().into_dyn(),
            true,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::{central_diff, rel_err};
    use crate::rng::RngStream;

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut bn = BatchNorm::<f64>::new(3);
        let mut rng = RngStream::new(2);
        let x = Array3::from_shape_fn((4, 3, 5), |_| rng.uniform(-2.0, 3.0));
        let (y, _) = bn.forward_train(x.clone());
        for c in 0..3 {
            let vals: Vec<f64> = y.index_axis(Axis(1), c).iter().copied().collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4); // eps shrinks variance slightly
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats_and_is_pure() {
        let mut bn = BatchNorm::<f64>::new(2);
        let mut rng = RngStream::new(3);
        let x = Array3::from_shape_fn((8, 2, 4), |_| rng.uniform(-1.0, 1.0));
        let _ = bn.forward_train(x.clone());
        let snapshot_mean = bn.running_mean.clone();
        let y1 = bn.forward_eval(&x);
        let y2 = bn.forward_eval(&x);
        assert_eq!(y1, y2);
        assert_eq!(bn.running_mean, snapshot_mean);
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut rng = RngStream::new(7);
        let x = Array3::from_shape_fn((3, 2, 4), |_| rng.uniform(-1.0, 1.0));
        let w = Array3::from_shape_fn((3, 2, 4), |_| rng.uniform(-1.0, 1.0));
        let make_bn = || {
            let mut bn = BatchNorm::<f64>::new(2);
            bn.gamma = ndarray::arr1(&[1.3, 0.8]);
            bn.beta = ndarray::arr1(&[0.2, -0.4]);
            bn
        };
        let loss = |x: &Array3<f64>| {
            let mut bn = make_bn();
            let (y, _) = bn.forward_train(x.clone());
            (&y * &w).sum()
        };
        let mut bn = make_bn();
        let (_, cache) = bn.forward_train(x.clone());
        let mut grads = GradStore::new();
        let dx = bn.backward(&cache, w.view(), "bn", &mut grads);
        for n in 0..3 {
            for c in 0..2 {
                for l in 0..4 {
                    let mut x2 = x.clone();
                    let numeric = central_diff(
                        |v| {
                            x2[[n, c, l]] = v;
                            loss(&x2)
                        },
                        x[[n, c, l]],
                        1e-6,
                    );
                    assert!(
                        rel_err(dx[[n, c, l]], numeric) < 1e-5,
                        "dx[{n},{c},{l}]: {} vs {numeric}",
                        dx[[n, c, l]]
                    );
                }
            }
        }
        // gamma gradient
        let loss_g = |g0: f64, g1: f64| {
            let mut bn = make_bn();
            bn.gamma = ndarray::arr1(&[g0, g1]);
            let (y, _) = bn.forward_train(x.clone());
            (&y * &w).sum()
        };
        let a = grads.get("bn.gamma").unwrap();
        let n0 = central_diff(|v| loss_g(v, 0.8), 1.3, 1e-6);
        let n1 = central_diff(|v| loss_g(1.3, v), 0.8, 1e-6);
        assert!(rel_err(a[0], n0) < 1e-6);
        assert!(rel_err(a[1], n1) < 1e-6);
    }

    #[test]
    fn layernorm_backward_matches_finite_differences() {
        let mut rng = RngStream::new(11);
        let x = Array2::from_shape_fn((3, 5), |_| rng.uniform(-1.0, 1.0));
        let w = Array2::from_shape_fn((3, 5), |_| rng.uniform(-1.0, 1.0));
        let make_ln = || {
            let mut ln = LayerNorm::<f64>::new(5);
            for (i, g) in ln.gamma.iter_mut().enumerate() {
                *g = 0.5 + 0.2 * i as f64;
            }
            ln
        };
        let loss = |x: &Array2<f64>| {
            let ln = make_ln();
            let (y, _) = ln.forward(x);
            (&y * &w).sum()
        };
        let ln = make_ln();
        let (_, cache) = ln.forward(&x);
        let mut grads = GradStore::new();
        let dx = ln.backward(&cache, &w, "ln", &mut grads);
        for i in 0..3 {
            for j in 0..5 {
                let mut x2 = x.clone();
                let numeric = central_diff(
                    |v| {
                        x2[[i, j]] = v;
                        loss(&x2)
                    },
                    x[[i, j]],
                    1e-6,
                );
                assert!(rel_err(dx[[i, j]], numeric) < 1e-5);
            }
        }
    }
}
