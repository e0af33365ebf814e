//! Image-domain branch: a strided convolution tokenizer over the time-joint
//! grid followed by token-mixer blocks that filter the token spectrum in the
//! frequency domain, pooled to a 64-d feature.
//!
//! Each block: layer normalization -> pointwise channel mixing -> 2-D Fourier
//! transform over the token grid -> elementwise multiplication by real gains
//! generated from the spectrum magnitudes -> inverse transform -> additive
//! fusion with the block input. Because the gains are a pointwise function of
//! the magnitudes they inherit the conjugate symmetry of a real signal's
//! spectrum, so the inverse transform is real up to rounding.

use crate::nn::conv::Conv2d;
use crate::nn::fft::Fft2;
use crate::nn::linear::Linear;
use crate::nn::norm::{LayerNorm, LnCache};
use crate::nn::params::{GradStore, ParamModule};
use crate::real::Real;
use crate::rng::RngStream;
use ndarray::{Array2, Array4, ArrayViewD, ArrayViewMutD};
use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageBranchConfig {
    /// Token embedding width; also the branch output dimension.
    pub embed_dim: usize,
    /// Number of token-mixer blocks.
    pub blocks: usize,
    pub stem_kernel: (usize, usize),
    pub stem_stride: (usize, usize),
    /// Hidden width of the pointwise gain generator.
    pub filter_hidden: usize,
}

impl Default for ImageBranchConfig {
    fn default() -> Self {
        ImageBranchConfig {
            embed_dim: 64,
            blocks: 2,
            stem_kernel: (4, 2),
            stem_stride: (4, 2),
            filter_hidden: 64,
        }
    }
}

impl ImageBranchConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.blocks == 0 {
            return Err(crate::Error::InvalidConfig(
                "image branch needs at least one block".into(),
            ));
        }
        if self.embed_dim == 0 || self.filter_hidden == 0 {
            return Err(crate::Error::InvalidConfig(
                "image branch dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One token-mixer block over (N, H, W, D) tokens.
#[derive(Debug, Clone)]
pub struct AffBlock<R: Real> {
    pub ln: LayerNorm<R>,
    pub mix: Linear<R>,
    pub gain1: Linear<R>,
    pub gain2: Linear<R>,
}

pub struct FreqMixCache<R: Real> {
    /// Forward spectrum of the mixed tokens, (N, H, W, D).
    spectrum: Vec<Array2<Complex<R>>>,
    magnitude: Array2<R>,
    hidden: Array2<R>,
    gains: Array2<R>,
    /// Largest |imaginary| component left after the inverse transform.
    pub imag_residue: R,
}

pub struct BlockCache<R: Real> {
    ln: LnCache<R>,
    u: Array2<R>,
    v: Array4<R>,
    pub freq: FreqMixCache<R>,
}

impl<R: Real> AffBlock<R> {
    pub fn new(dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let mut gain2 = Linear::new(hidden, dim, rng);
        // Start as a near-identity filter: unit gains at initialisation.
        gain2.b.fill(R::one());
        gain2.w.mapv_inplace(|v| v * R::fr(0.1));
        AffBlock {
            ln: LayerNorm::new(dim),
            mix: Linear::new(dim, dim, rng),
            gain1: Linear::new(dim, hidden, rng),
            gain2,
        }
    }

    /// Frequency-domain token mixing of (N, H, W, D) tokens.
    pub fn freq_mix_forward(&self, v: &Array4<R>, fft: &Fft2<R>) -> (Array4<R>, FreqMixCache<R>) {
        let (n, h, w, d) = dims4(v);
        // Per (sample, channel) grids, transformed in parallel.
        let spectra: Vec<Array2<Complex<R>>> = (0..n * d)
            .into_par_iter()
            .map(|idx| {
                let (ni, di) = (idx / d, idx % d);
                let mut grid = Array2::<Complex<R>>::zeros((h, w));
                for hi in 0..h {
                    for wi in 0..w {
                        grid[[hi, wi]] = Complex::new(v[[ni, hi, wi, di]], R::zero());
                    }
                }
                fft.forward(&mut grid);
                grid
            })
            .collect();

        // Magnitudes arranged as (N*H*W, D) for the pointwise gain generator.
        let mut magnitude = Array2::<R>::zeros((n * h * w, d));
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let row = (ni * h + hi) * w + wi;
                    for di in 0..d {
                        magnitude[[row, di]] = spectra[ni * d + di][[hi, wi]].norm();
                    }
                }
            }
        }
        let hidden_pre = self.gain1.forward(&magnitude);
        let hidden = crate::nn::relu(&hidden_pre.into_dyn())
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let gains = self.gain2.forward(&hidden);

        // Filter and invert.
        let scale = R::fr(1.0 / (h * w) as f64);
        let filtered: Vec<(Array2<R>, R)> = (0..n * d)
            .into_par_iter()
            .map(|idx| {
                let (ni, di) = (idx / d, idx % d);
                let mut grid = spectra[idx].clone();
                for hi in 0..h {
                    for wi in 0..w {
                        let row = (ni * h + hi) * w + wi;
                        grid[[hi, wi]] = grid[[hi, wi]] * gains[[row, di]];
                    }
                }
                fft.inverse(&mut grid);
                let mut out = Array2::<R>::zeros((h, w));
                let mut residue = R::zero();
                for hi in 0..h {
                    for wi in 0..w {
                        let c = grid[[hi, wi]];
                        out[[hi, wi]] = c.re * scale;
                        residue = residue.max((c.im * scale).abs());
                    }
                }
                (out, residue)
            })
            .collect();

        let mut out = Array4::<R>::zeros((n, h, w, d));
        let mut residue = R::zero();
        for (idx, (grid, r)) in filtered.into_iter().enumerate() {
            let (ni, di) = (idx / d, idx % d);
            for hi in 0..h {
                for wi in 0..w {
                    out[[ni, hi, wi, di]] = grid[[hi, wi]];
                }
            }
            residue = residue.max(r);
        }
        (
            out,
            FreqMixCache {
                spectrum: spectra,
                magnitude,
                hidden,
                gains,
                imag_residue: residue,
            },
        )
    }

    pub fn freq_mix_backward(
        &self,
        cache: &FreqMixCache<R>,
        dy: &Array4<R>,
        fft: &Fft2<R>,
        prefix: &str,
        grads: &mut GradStore<R>,
    ) -> Array4<R> {
        let (n, h, w, d) = dims4(dy);
        let scale = R::fr(1.0 / (h * w) as f64);
        let tiny = R::fr(1e-30);

        // Adjoint of Re(inverse/(h*w)): embed the real gradient and run the
        // forward transform scaled by 1/(h*w).
        let dspec_filtered: Vec<Array2<Complex<R>>> = (0..n * d)
            .into_par_iter()
            .map(|idx| {
                let (ni, di) = (idx / d, idx % d);
                let mut grid = Array2::<Complex<R>>::zeros((h, w));
                for hi in 0..h {
                    for wi in 0..w {
                        grid[[hi, wi]] = Complex::new(dy[[ni, hi, wi, di]] * scale, R::zero());
                    }
                }
                fft.forward(&mut grid);
                grid
            })
            .collect();

        // dL/dgains and the direct spectrum path dV = dV' * g.
        let mut dgains = Array2::<R>::zeros((n * h * w, d));
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let row = (ni * h + hi) * w + wi;
                    for di in 0..d {
                        let v = cache.spectrum[ni * d + di][[hi, wi]];
                        let dvf = dspec_filtered[ni * d + di][[hi, wi]];
                        dgains[[row, di]] = v.re * dvf.re + v.im * dvf.im;
                    }
                }
            }
        }

        // Gain generator backward to magnitudes.
        let mut dhidden = self.gain2.backward(&cache.hidden, &dgains, &format!("{prefix}.gain2"), grads);
        dhidden = crate::nn::relu_backward(&dhidden.into_dyn(), &cache.hidden.clone().into_dyn())
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let dmagnitude =
            self.gain1
                .backward(&cache.magnitude, &dhidden, &format!("{prefix}.gain1"), grads);

        // Combine both spectrum paths and invert back to token space.
        let dv: Vec<Array2<R>> = (0..n * d)
            .into_par_iter()
            .map(|idx| {
                let (ni, di) = (idx / d, idx % d);
                let mut dgrid = Array2::<Complex<R>>::zeros((h, w));
                for hi in 0..h {
                    for wi in 0..w {
                        let row = (ni * h + hi) * w + wi;
                        let v = cache.spectrum[idx][[hi, wi]];
                        let g = cache.gains[[row, di]];
                        let dvf = dspec_filtered[idx][[hi, wi]];
                        let mut dv = dvf * g;
                        let mag = cache.magnitude[[row, di]];
                        if mag > tiny {
                            let coeff = dmagnitude[[row, di]] / mag;
                            dv = dv + v * coeff;
                        }
                        dgrid[[hi, wi]] = dv;
                    }
                }
                // Adjoint of the unnormalized forward transform.
                fft.inverse(&mut dgrid);
                let mut out = Array2::<R>::zeros((h, w));
                for hi in 0..h {
                    for wi in 0..w {
                        out[[hi, wi]] = dgrid[[hi, wi]].re;
                    }
                }
                out
            })
            .collect();

        let mut out = Array4::<R>::zeros((n, h, w, d));
        for (idx, grid) in dv.into_iter().enumerate() {
            let (ni, di) = (idx / d, idx % d);
            for hi in 0..h {
                for wi in 0..w {
                    out[[ni, hi, wi, di]] = grid[[hi, wi]];
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Array4<R>, fft: &Fft2<R>) -> (Array4<R>, BlockCache<R>) {
        let (n, h, w, d) = dims4(x);
        let x2 = x
            .view()
            .into_shape_with_order((n * h * w, d))
            .expect("contiguous")
            .into_owned();
        let (u, ln_cache) = self.ln.forward(&x2);
        let v_pre = self.mix.forward(&u);
        let v2 = crate::nn::relu(&v_pre.into_dyn())
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let v = v2
            .into_shape_with_order((n, h, w, d))
            .expect("contiguous");
        let (mixed, freq) = self.freq_mix_forward(&v, fft);
        let out = x + &mixed;
        (
            out,
            BlockCache {
                ln: ln_cache,
                u,
                v,
                freq,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &BlockCache<R>,
        dy: &Array4<R>,
        fft: &Fft2<R>,
        prefix: &str,
        grads: &mut GradStore<R>,
    ) -> Array4<R> {
        let (n, h, w, d) = dims4(dy);
        let dmixed = self.freq_mix_backward(&cache.freq, dy, fft, prefix, grads);
        let dv2 = dmixed
            .view()
            .into_shape_with_order((n * h * w, d))
            .expect("contiguous")
            .into_owned();
        let dv_pre = crate::nn::relu_backward(
            &dv2.into_dyn(),
            &cache
                .v
                .view()
                .into_shape_with_order((n * h * w, d))
                .expect("contiguous")
                .into_owned()
                .into_dyn(),
        )
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
        let du = self
            .mix
            .backward(&cache.u, &dv_pre, &format!("{prefix}.mix"), grads);
        let dx2 = self.ln.backward(&cache.ln, &du, &format!("{prefix}.ln"), grads);
        let dx = dx2
            .into_shape_with_order((n, h, w, d))
            .expect("contiguous");
        // Residual/local path.
        dx + dy
    }
}

impl<R: Real> ParamModule<R> for AffBlock<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, R>, bool)) {
        self.ln.visit(&format!("{prefix}.ln"), f);
        self.mix.visit(&format!("{prefix}.mix"), f);
        self.gain1.visit(&format!("{prefix}.gain1"), f);
        self.gain2.visit(&format!("{prefix}.gain2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, R>, bool)) {
        self.ln.visit_mut(&format!("{prefix}.ln"), f);
        self.mix.visit_mut(&format!("{prefix}.mix"), f);
        self.gain1.visit_mut(&format!("{prefix}.gain1"), f);
        self.gain2.visit_mut(&format!("{prefix}.gain2"), f);
    }
}

/// Stem tokenizer plus token-mixer blocks plus mean pooling.
#[derive(Debug, Clone)]
pub struct ImageBranch<R: Real> {
    pub cfg: ImageBranchConfig,
    pub stem: Conv2d<R>,
    pub blocks: Vec<AffBlock<R>>,
    fft: Fft2<R>,
}

pub struct ImageCache<R: Real> {
    stem_in: Array4<R>,
    tokens: Array4<R>,
    blocks: Vec<BlockCache<R>>,
    grid: (usize, usize),
}

impl<R: Real> ImageBranch<R> {
    pub fn new(cfg: ImageBranchConfig, in_channels: usize, frames: usize, joints: usize, rng: &mut RngStream) -> Self {
        cfg.validate().expect("image config");
        let stem = Conv2d::new(in_channels, cfg.embed_dim, cfg.stem_kernel, cfg.stem_stride, rng);
        let (h, w) = stem.out_dims(frames, joints);
        let blocks = (0..cfg.blocks)
            .map(|_| AffBlock::new(cfg.embed_dim, cfg.filter_hidden, rng))
            .collect();
        ImageBranch {
            stem,
            blocks,
            fft: Fft2::new(h, w),
            cfg,
        }
    }

    pub fn fft(&self) -> &Fft2<R> {
        &self.fft
    }

    pub fn token_grid(&self, frames: usize, joints: usize) -> (usize, usize) {
        self.stem.out_dims(frames, joints)
    }

    fn tokens_from_stem(&self, stem_out: &Array4<R>) -> Array4<R> {
        // (N, D, H, W) -> (N, H, W, D)
        stem_out
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_owned()
    }

    /// The image branch is stateless apart from parameters, so the training
    /// forward is pure.
    pub fn forward_train(&self, x: &Array4<R>) -> (Array2<R>, ImageCache<R>) {
        let stem_out = self.stem.forward(x);
        let tokens = self.tokens_from_stem(&stem_out);
        let (_, h, w, _) = dims4(&tokens);
        let mut cur = tokens.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&cur, &self.fft);
            caches.push(cache);
            cur = next;
        }
        let pooled = pool_tokens(&cur);
        (
            pooled,
            ImageCache {
                stem_in: x.clone(),
                tokens,
                blocks: caches,
                grid: (h, w),
            },
        )
    }

    pub fn forward_eval(&self, x: &Array4<R>) -> Array2<R> {
        let stem_out = self.stem.forward(x);
        let mut cur = self.tokens_from_stem(&stem_out);
        for block in &self.blocks {
            let (next, _) = block.forward(&cur, &self.fft);
            cur = next;
        }
        pool_tokens(&cur)
    }

    pub fn backward(
        &self,
        cache: &ImageCache<R>,
        dpooled: &Array2<R>,
        prefix: &str,
        grads: &mut GradStore<R>,
    ) {
        let (h, w) = cache.grid;
        let d = self.cfg.embed_dim;
        let mut dcur = unpool_tokens(dpooled, h, w, d);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            dcur = block.backward(
                &cache.blocks[i],
                &dcur,
                &self.fft,
                &format!("{prefix}.block{i}"),
                grads,
            );
        }
        let _ = &cache.tokens;
        // (N, H, W, D) -> (N, D, H, W) for the stem backward.
        let dstem = dcur
            .view()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .into_owned();
        let _ = self
            .stem
            .backward(&cache.stem_in, &dstem, &format!("{prefix}.stem"), grads);
    }
}

impl<R: Real> ParamModule<R> for ImageBranch<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, R>, bool)) {
        self.stem.visit(&format!("{prefix}.stem"), f);
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("{prefix}.block{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, R>, bool)) {
        self.stem.visit_mut(&format!("{prefix}.stem"), f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&format!("{prefix}.block{i}"), f);
        }
    }
}

/// Mean over the token grid: (N, H, W, D) -> (N, D).
pub fn pool_tokens<R: Real>(x: &Array4<R>) -> Array2<R> {
    let (n, h, w, d) = dims4(x);
    let scale = R::fr(1.0 / (h * w) as f64);
    let mut out = Array2::<R>::zeros((n, d));
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                for di in 0..d {
                    out[[ni, di]] += x[[ni, hi, wi, di]];
                }
            }
        }
    }
    out.mapv_inplace(|v| v * scale);
    out
}

pub fn unpool_tokens<R: Real>(d2: &Array2<R>, h: usize, w: usize, d: usize) -> Array4<R> {
    let n = d2.nrows();
    let scale = R::fr(1.0 / (h * w) as f64);
    let mut out = Array4::<R>::zeros((n, h, w, d));
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                for di in 0..d {
                    out[[ni, hi, wi, di]] = d2[[ni, di]] * scale;
                }
            }
        }
    }
    out
}

fn dims4<R: Real>(x: &Array4<R>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}
