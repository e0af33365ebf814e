//! 2-D discrete Fourier transform over token grids.
//!
//! Thin wrapper around rustfft with cached plans for a fixed grid size. Both
//! directions are unnormalized; callers scale by `1/(h*w)` on inversion. For
//! the unnormalized transform the adjoint of the forward pass is the
//! unnormalized inverse pass, which the frequency-mixer backward relies on.

use crate::real::Real;
use ndarray::Array2;
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

pub struct Fft2<R: Real> {
    h: usize,
    w: usize,
    fwd_h: Arc<dyn Fft<R>>,
    inv_h: Arc<dyn Fft<R>>,
    fwd_w: Arc<dyn Fft<R>>,
    inv_w: Arc<dyn Fft<R>>,
}

impl<R: Real> std::fmt::Debug for Fft2<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2({}x{})", self.h, self.w)
    }
}

impl<R: Real> Clone for Fft2<R> {
    fn clone(&self) -> Self {
        Fft2::new(self.h, self.w)
    }
}

impl<R: Real> Fft2<R> {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::<R>::new();
        Fft2 {
            h,
            w,
            fwd_h: planner.plan_fft_forward(h),
            inv_h: planner.plan_fft_inverse(h),
            fwd_w: planner.plan_fft_forward(w),
            inv_w: planner.plan_fft_inverse(w),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn transform(&self, grid: &mut Array2<Complex<R>>, row_plan: &Arc<dyn Fft<R>>, col_plan: &Arc<dyn Fft<R>>) {
        debug_assert_eq!(grid.shape(), &[self.h, self.w]);
        // Rows are contiguous in standard layout.
        for mut row in grid.rows_mut() {
            let slice = row.as_slice_mut().expect("row is contiguous");
            row_plan.process(slice);
        }
        let mut scratch = vec![Complex::new(R::zero(), R::zero()); self.h];
        for col in 0..self.w {
            for r in 0..self.h {
                scratch[r] = grid[[r, col]];
            }
            col_plan.process(&mut scratch);
            for r in 0..self.h {
                grid[[r, col]] = scratch[r];
            }
        }
    }

    /// In-place unnormalized forward DFT.
    pub fn forward(&self, grid: &mut Array2<Complex<R>>) {
        self.transform(grid, &self.fwd_w, &self.fwd_h);
    }

    /// In-place unnormalized inverse DFT (no 1/(h*w) factor).
    pub fn inverse(&self, grid: &mut Array2<Complex<R>>) {
        self.transform(grid, &self.inv_w, &self.inv_h);
    }
}
