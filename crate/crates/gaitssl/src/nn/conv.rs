//! Convolutions implemented as im2col + matrix multiply, parallel over the
//! batch axis.

use crate::nn::params::{GradStore, ParamModule};
use crate::real::Real;
use crate::rng::RngStream;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rayon::prelude::*;

/// 1-D convolution along the time axis of (N, C, T, J) tensors, applied
/// independently per joint. Zero padding keeps `T_out = ceil(T / stride)` for
/// odd kernels.
#[derive(Debug, Clone)]
pub struct TemporalConv<R: Real> {
    /// (c_out, c_in, kernel)
    pub w: Array3<R>,
    pub b: Array1<R>,
    pub stride: usize,
    pub pad: usize,
}

impl<R: Real> TemporalConv<R> {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut RngStream) -> Self {
        let fan_in = (c_in * kernel) as f64;
        let limit = (6.0 / (fan_in + c_out as f64)).sqrt();
        let w = Array3::from_shape_fn((c_out, c_in, kernel), |_| R::fr(rng.uniform(-limit, limit)));
        TemporalConv {
            w,
            b: Array1::zeros(c_out),
            stride,
            pad: (kernel - 1) / 2,
        }
    }

    pub fn out_len(&self, t: usize) -> usize {
        (t + 2 * self.pad - self.w.shape()[2]) / self.stride + 1
    }

    /// Output positions `to` whose source index `to*stride + kk - pad` lies in
    /// [0, t); returns (to_lo, to_hi) half-open.
    fn valid_range(&self, kk: usize, t: usize, t_out: usize) -> (usize, usize) {
        let shift = kk as isize - self.pad as isize;
        let lo = if shift >= 0 {
            0
        } else {
            ((-shift) as usize).div_ceil(self.stride)
        };
        let hi_excl = {
            // to*stride + shift <= t-1
            let limit = t as isize - 1 - shift;
            if limit < 0 {
                0
            } else {
                (limit as usize / self.stride + 1).min(t_out)
            }
        };
        (lo.min(t_out), hi_excl)
    }

    /// Fill a preallocated (c_in * k, t_out * j) buffer. Only the in-range
    /// regions are written; the buffer's boundary zeros are invariant across
    /// samples, so one zeroed buffer can be reused per thread.
    fn im2col_into(&self, x: &ArrayView3<R>, cols: &mut Array2<R>) {
        let (c_in, t, j) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = self.w.shape()[2];
        let t_out = self.out_len(t);
        debug_assert_eq!(cols.shape(), &[c_in * k, t_out * j]);
        for ci in 0..c_in {
            for kk in 0..k {
                let row = ci * k + kk;
                let (lo, hi) = self.valid_range(kk, t, t_out);
                if lo >= hi {
                    continue;
                }
                let ti_lo = (lo * self.stride + kk) as isize - self.pad as isize;
                let src = x.slice(s![
                    ci,
                    ti_lo as usize..;self.stride,
                    ..
                ]);
                let src = src.slice(s![..hi - lo, ..]);
                let dst = cols.slice_mut(s![row, lo * j..hi * j]);
                let mut dst = dst
                    .into_shape_with_order((hi - lo, j))
                    .expect("contiguous row segment");
                dst.assign(&src);
            }
        }
    }

    /// (N, C_in, T, J) -> (N, C_out, T_out, J)
    ///
    /// For stride 1 the kernel taps are applied as shifted accumulating
    /// matrix multiplies over views, avoiding any im2col materialization;
    /// strided layers fall back to im2col.
    pub fn forward(&self, x: &Array4<R>) -> Array4<R> {
        let (n, c_in, t, j) = dims4(x);
        let c_out = self.w.shape()[0];
        let k = self.w.shape()[2];
        let t_out = self.out_len(t);

        let mut out = Array4::<R>::uninit((n, c_out, t_out, j));
        if self.stride == 1 {
            ndarray::Zip::from(out.axis_iter_mut(Axis(0)))
                .and(x.axis_iter(Axis(0)))
                .into_par_iter()
                .for_each(|(out_s, x_s)| {
                    let x2 = x_s
                        .into_shape_with_order((c_in, t * j))
                        .expect("contiguous");
                    let mut y = Array2::<R>::zeros((c_out, t_out * j));
                    for (co, mut row) in y.rows_mut().into_iter().enumerate() {
                        row.fill(self.b[co]);
                    }
                    for kk in 0..k {
                        let (lo, hi) = self.valid_range(kk, t, t_out);
                        if lo >= hi {
                            continue;
                        }
                        let ti_lo = (lo + kk) - self.pad; // stride 1, in range
                        let sel = hi - lo;
                        let x_sub = x2.slice(s![.., ti_lo * j..(ti_lo + sel) * j]);
                        let w_kk = self.w.slice(s![.., .., kk]);
                        let mut y_sub = y.slice_mut(s![.., lo * j..hi * j]);
                        ndarray::linalg::general_mat_mul(
                            R::one(),
                            &w_kk,
                            &x_sub,
                            R::one(),
                            &mut y_sub,
                        );
                    }
                    y.into_shape_with_order((c_out, t_out, j))
                        .expect("contiguous")
                        .assign_to(out_s);
                });
        } else {
            let w_mat = self
                .w
                .view()
                .into_shape_with_order((c_out, c_in * k))
                .expect("weight is contiguous");
            ndarray::Zip::from(out.axis_iter_mut(Axis(0)))
                .and(x.axis_iter(Axis(0)))
                .into_par_iter()
                .for_each_init(
                    || Array2::<R>::zeros((c_in * k, t_out * j)),
                    |cols, (out_s, x_s)| {
                        self.im2col_into(&x_s, cols);
                        let mut y = w_mat.dot(&*cols);
                        for (co, mut row) in y.rows_mut().into_iter().enumerate() {
                            row.mapv_inplace(|v| v + self.b[co]);
                        }
                        y.into_shape_with_order((c_out, t_out, j))
                            .expect("contiguous")
                            .assign_to(out_s);
                    },
                );
        }
        unsafe { out.assume_init() }
    }

    /// Returns dx; accumulates weight/bias gradients under `prefix`.
    pub fn backward(
        &self,
        x: &Array4<R>,
        dy: &Array4<R>,
        prefix: &str,
        grads: &mut GradStore<R>,
    ) -> Array4<R> {
        let (n, c_in, t, j) = dims4(x);
        let c_out = self.w.shape()[0];
        let k = self.w.shape()[2];
        let t_out = self.out_len(t);
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((c_out, c_in * k))
            .expect("weight is contiguous");

        let mut dx = Array4::<R>::uninit((n, c_in, t, j));
        let partials: Vec<(Array3<R>, Array1<R>)> = if self.stride == 1 {
            ndarray::Zip::from(dx.axis_iter_mut(Axis(0)))
                .and(x.axis_iter(Axis(0)))
                .and(dy.axis_iter(Axis(0)))
                .into_par_iter()
                .map(|(dx_s, xs, dys)| {
                    let x2 = xs.into_shape_with_order((c_in, t * j)).expect("contiguous");
                    let dy_mat = dys
                        .into_shape_with_order((c_out, t_out * j))
                        .expect("dy is contiguous");
                    let db = dy_mat.sum_axis(Axis(1));
                    let mut dw = Array3::<R>::zeros((c_out, c_in, k));
                    let mut dxs = Array2::<R>::zeros((c_in, t * j));
                    for kk in 0..k {
                        let (lo, hi) = self.valid_range(kk, t, t_out);
                        if lo >= hi {
                            continue;
                        }
                        let ti_lo = (lo + kk) - self.pad;
                        let sel = hi - lo;
                        let x_sub = x2.slice(s![.., ti_lo * j..(ti_lo + sel) * j]);
                        let dy_sub = dy_mat.slice(s![.., lo * j..hi * j]);
                        let mut dw_kk = dw.slice_mut(s![.., .., kk]);
                        ndarray::linalg::general_mat_mul(
                            R::one(),
                            &dy_sub,
                            &x_sub.t(),
                            R::zero(),
                            &mut dw_kk,
                        );
                        let w_kk = self.w.slice(s![.., .., kk]);
                        let mut dx_sub = dxs.slice_mut(s![.., ti_lo * j..(ti_lo + sel) * j]);
                        ndarray::linalg::general_mat_mul(
                            R::one(),
                            &w_kk.t(),
                            &dy_sub,
                            R::one(),
                            &mut dx_sub,
                        );
                    }
                    dxs.into_shape_with_order((c_in, t, j))
                        .expect("contiguous")
                        .assign_to(dx_s);
                    (dw, db)
                })
                .collect()
        } else {
            ndarray::Zip::from(dx.axis_iter_mut(Axis(0)))
                .and(x.axis_iter(Axis(0)))
                .and(dy.axis_iter(Axis(0)))
                .into_par_iter()
                .map_init(
                    || Array2::<R>::zeros((c_in * k, t_out * j)),
                    |cols, (dx_s, xs, dys)| {
                        self.im2col_into(&xs, cols);
                        let dy_mat = dys
                            .into_shape_with_order((c_out, t_out * j))
                            .expect("dy is contiguous");
                        let dw = dy_mat.dot(&cols.t());
                        let db = dy_mat.sum_axis(Axis(1));
                        let dcols = w_mat.t().dot(&dy_mat);
                        // col2im scatter-add
                        let mut dxs = Array3::<R>::zeros((c_in, t, j));
                        for ci in 0..c_in {
                            for kk in 0..k {
                                let row = ci * k + kk;
                                let (lo, hi) = self.valid_range(kk, t, t_out);
                                if lo >= hi {
                                    continue;
                                }
                                let ti_lo =
                                    (lo * self.stride + kk) as isize - self.pad as isize;
                                let src = dcols.slice(s![row, lo * j..hi * j]);
                                let src = src
                                    .into_shape_with_order((hi - lo, j))
                                    .expect("contiguous row segment");
                                let mut dst = dxs.slice_mut(s![
                                    ci,
                                    ti_lo as usize..;self.stride,
                                    ..
                                ]);
                                let mut dst = dst.slice_mut(s![..hi - lo, ..]);
                                dst += &src;
                            }
                        }
                        dxs.assign_to(dx_s);
                        let dw3 = dw
                            .into_shape_with_order((c_out, c_in, k))
                            .expect("contiguous");
                        (dw3, db)
                    },
                )
                .collect()
        };
        let dx = unsafe { dx.assume_init() };

        let mut dw_total = Array3::<R>::zeros((c_out, c_in, k));
        let mut db_total = Array1::<R>::zeros(c_out);
        for (dw, db) in partials {
            dw_total += &dw;
            db_total += &db;
        }
        grads.accumulate(&format!("{prefix}.weight"), dw_total.into_dyn());
        grads.accumulate(&format!("{prefix}.bias"), db_total.into_dyn());
        dx
    }
}

impl<R: Real> ParamModule<R> for TemporalConv<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, R>, bool)) {
        f(&format!("{prefix}.weight"), self.w.view().into_dyn(), true);
        f(&format!("{prefix}.bias"), self.b.view().into_dyn(), true);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, R>, bool)) {
        f(&format!("{prefix}.weight"), self.w.view_mut().into_dyn(), true);
        f(&format!("{prefix}.bias"), self.b.view_mut().into_dyn(), true);
    }
}

/// Unpadded 2-D convolution used as the tokenizer stem:
/// (N, C, T, J) -> (N, D, H, W).
#[derive(Debug, Clone)]
pub struct Conv2d<R: Real> {
    /// (d, c, kh, kw)
    pub w: Array4<R>,
    pub b: Array1<R>,
    pub stride: (usize, usize),
}

impl<R: Real> Conv2d<R> {
    pub fn new(
        c_in: usize,
        d_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        rng: &mut RngStream,
    ) -> Self {
        let fan_in = (c_in * kernel.0 * kernel.1) as f64;
        let limit = (6.0 / (fan_in + d_out as f64)).sqrt();
        let w = Array4::from_shape_fn((d_out, c_in, kernel.0, kernel.1), |_| {
            R::fr(rng.uniform(-limit, limit))
        });
        Conv2d {
            w,
            b: Array1::zeros(d_out),
            stride,
        }
    }

    pub fn out_dims(&self, t: usize, j: usize) -> (usize, usize) {
        let (kh, kw) = (self.w.shape()[2], self.w.shape()[3]);
        ((t - kh) / self.stride.0 + 1, (j - kw) / self.stride.1 + 1)
    }

    fn im2col(&self, x: &ArrayView3<R>) -> Array2<R> {
        let (c_in, t, j) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw) = (self.w.shape()[2], self.w.shape()[3]);
        let (h, w) = self.out_dims(t, j);
        let mut cols = Array2::<R>::zeros((c_in * kh * kw, h * w));
        for ci in 0..c_in {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for hi in 0..h {
                        for wi in 0..w {
                            let ti = hi * self.stride.0 + ki;
                            let ji = wi * self.stride.1 + kj;
                            cols[[row, hi * w + wi]] = x[[ci, ti, ji]];
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Array4<R>) -> Array4<R> {
        let (n, _c, t, j) = dims4(x);
        let d = self.w.shape()[0];
        let (h, w) = self.out_dims(t, j);
        let flat = self.w.len() / d;
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((d, flat))
            .expect("weight is contiguous");
        let per_sample: Vec<Array2<R>> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let cols = self.im2col(&x.index_axis(Axis(0), ni));
                let mut y = w_mat.dot(&cols);
                for (di, mut row) in y.rows_mut().into_iter().enumerate() {
                    row.mapv_inplace(|v| v + self.b[di]);
                }
                y
            })
            .collect();
        let mut out = Array4::<R>::zeros((n, d, h, w));
        for (ni, y) in per_sample.into_iter().enumerate() {
            let reshaped = y.into_shape_with_order((d, h, w)).expect("contiguous");
            out.index_axis_mut(Axis(0), ni).assign(&reshaped);
        }
        out
    }

    pub fn backward(
        &self,
        x: &Array4<R>,
        dy: &Array4<R>,
        prefix: &str,
        grads: &mut GradStore<R>,
    ) -> Array4<R> {
        let (n, c_in, t, j) = dims4(x);
        let d = self.w.shape()[0];
        let (kh, kw) = (self.w.shape()[2], self.w.shape()[3]);
        let (h, w) = self.out_dims(t, j);
        let flat = c_in * kh * kw;
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((d, flat))
            .expect("weight is contiguous");

        let results: Vec<(Array3<R>, Array2<R>, Array1<R>)> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let xs = x.index_axis(Axis(0), ni);
                let cols = self.im2col(&xs);
                let dy_mat = dy
                    .index_axis(Axis(0), ni)
                    .into_shape_with_order((d, h * w))
                    .expect("dy is contiguous");
                let dw = dy_mat.dot(&cols.t());
                let db = dy_mat.sum_axis(Axis(1));
                let dcols = w_mat.t().dot(&dy_mat);
                let mut dx = Array3::<R>::zeros((c_in, t, j));
                for ci in 0..c_in {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let row = (ci * kh + ki) * kw + kj;
                            for hi in 0..h {
                                for wi in 0..w {
                                    let ti = hi * self.stride.0 + ki;
                                    let ji = wi * self.stride.1 + kj;
                                    dx[[ci, ti, ji]] =
                                        dx[[ci, ti, ji]] + dcols[[row, hi * w + wi]];
                                }
                            }
                        }
                    }
                }
                (dx, dw, db)
            })
            .collect();

        let mut dx = Array4::<R>::zeros((n, c_in, t, j));
        let mut dw_total = Array2::<R>::zeros((d, flat));
        let mut db_total = Array1::<R>::zeros(d);
        for (ni, (dxs, dw, db)) in results.into_iter().enumerate() {
            dx.index_axis_mut(Axis(0), ni).assign(&dxs);
            dw_total += &dw;
            db_total += &db;
        }
        grads.accumulate(
            &format!("{prefix}.weight"),
            dw_total
                .into_shape_with_order((d, c_in, kh, kw))
                .expect("contiguous")
                .into_dyn(),
        );
        grads.accumulate(&format!("{prefix}.bias"), db_total.into_dyn());
        dx
    }
}

impl<R: Real> ParamModule<R> for Conv2d<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, R>, bool)) {
        f(&format!("{prefix}.weight"), self.w.view().into_dyn(), true);
        f(&format!("{prefix}.bias"), self.b.view().into_dyn(), true);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, R>, bool)) {
        f(&format!("{prefix}.weight"), self.w.view_mut().into_dyn(), true);
        f(&format!("{prefix}.bias"), self.b.view_mut().into_dyn(), true);
    }
}

fn dims4<R: Real>(x: &Array4<R>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::{central_diff, rel_err};

    #[test]
    fn temporal_conv_output_lengths_for_strides() {
        let mut rng = RngStream::new(1);
        let c1 = TemporalConv::<f64>::new(4, 4, 9, 1, &mut rng);
        assert_eq!(c1.out_len(120), 120);
        let c2 = TemporalConv::<f64>::new(4, 4, 9, 2, &mut rng);
        assert_eq!(c2.out_len(120), 60);
        assert_eq!(c2.out_len(60), 30);
    }

    #[test]
    fn temporal_conv_matches_direct_convolution() {
        let mut rng = RngStream::new(2);
        let conv = TemporalConv::<f64>::new(2, 3, 3, 1, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 6, 2), |_| rng.uniform(-1.0, 1.0));
        let y = conv.forward(&x);
        // direct triple loop oracle
        for co in 0..3 {
            for to in 0..6 {
                for j in 0..2 {
                    let mut acc = conv.b[co];
                    for ci in 0..2 {
                        for kk in 0..3 {
                            let ti = to as isize + kk as isize - 1;
                            if ti < 0 || ti >= 6 {
                                continue;
                            }
                            acc += conv.w[[co, ci, kk]] * x[[0, ci, ti as usize, j]];
                        }
                    }
                    assert!((y[[0, co, to, j]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn temporal_conv_backward_matches_finite_differences() {
        let mut rng = RngStream::new(3);
        let conv = TemporalConv::<f64>::new(2, 2, 3, 2, &mut rng);
        let x = Array4::from_shape_fn((2, 2, 7, 2), |_| rng.uniform(-1.0, 1.0));
        let t_out = conv.out_len(7);
        let wl = Array4::from_shape_fn((2, 2, t_out, 2), |_| rng.uniform(-1.0, 1.0));
        let loss =
            |c: &TemporalConv<f64>, x: &Array4<f64>| -> f64 { (&c.forward(x) * &wl).sum() };

        let mut grads = GradStore::new();
        let dx = conv.backward(&x, &wl, "tc", &mut grads);

        for idx in [[0usize, 0, 0], [1, 1, 2], [0, 1, 1]] {
            let mut c2 = conv.clone();
            let numeric = central_diff(
                |v| {
                    c2.w[[idx[0], idx[1], idx[2]]] = v;
                    loss(&c2, &x)
                },
                conv.w[[idx[0], idx[1], idx[2]]],
                1e-6,
            );
            let analytic = grads.get("tc.weight").unwrap()[[idx[0], idx[1], idx[2]]];
            assert!(rel_err(analytic, numeric) < 1e-7);
        }
        for n in 0..2 {
            for ci in 0..2 {
                for t in 0..7 {
                    let mut x2 = x.clone();
                    let numeric = central_diff(
                        |v| {
                            x2[[n, ci, t, 0]] = v;
                            loss(&conv, &x2)
                        },
                        x[[n, ci, t, 0]],
                        1e-6,
                    );
                    assert!(rel_err(dx[[n, ci, t, 0]], numeric) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn conv2d_stem_output_dims() {
        let mut rng = RngStream::new(4);
        let stem = Conv2d::<f64>::new(3, 8, (4, 2), (4, 2), &mut rng);
        assert_eq!(stem.out_dims(120, 16), (30, 8));
    }

    #[test]
    fn conv2d_backward_matches_finite_differences() {
        let mut rng = RngStream::new(5);
        let stem = Conv2d::<f64>::new(2, 3, (2, 2), (2, 1), &mut rng);
        let x = Array4::from_shape_fn((2, 2, 6, 4), |_| rng.uniform(-1.0, 1.0));
        let (h, w) = stem.out_dims(6, 4);
        let wl = Array4::from_shape_fn((2, 3, h, w), |_| rng.uniform(-1.0, 1.0));
        let loss = |c: &Conv2d<f64>, x: &Array4<f64>| -> f64 { (&c.forward(x) * &wl).sum() };

        let mut grads = GradStore::new();
        let dx = stem.backward(&x, &wl, "stem", &mut grads);

        for idx in [[0usize, 0, 0, 0], [2, 1, 1, 1], [1, 0, 1, 0]] {
            let mut c2 = stem.clone();
            let numeric = central_diff(
                |v| {
                    c2.w[[idx[0], idx[1], idx[2], idx[3]]] = v;
                    loss(&c2, &x)
                },
                stem.w[[idx[0], idx[1], idx[2], idx[3]]],
                1e-6,
            );
            let analytic = grads.get("stem.weight").unwrap()[[idx[0], idx[1], idx[2], idx[3]]];
            assert!(rel_err(analytic, numeric) < 1e-7);
        }
        for n in 0..2 {
            for t in 0..6 {
                for j in 0..4 {
                    let mut x2 = x.clone();
                    let numeric = central_diff(
                        |v| {
                            x2[[n, 1, t, j]] = v;
                            loss(&stem, &x2)
                        },
                        x[[n, 1, t, j]],
                        1e-6,
                    );
                    assert!(rel_err(dx[[n, 1, t, j]], numeric) < 1e-6);
                }
            }
        }
    }
}
