//! The complementary feature fusion encoder: a graph-convolution branch and a
//! frequency-filter token-mixer branch, concatenated to a 128-d fused feature
//! and projected to a unit-norm embedding by a two-layer head.

pub mod graph;
pub mod image;
pub mod simam;

pub use graph::{AdjacencySubsets, GraphBranch, GraphBranchConfig};
pub use image::{ImageBranch, ImageBranchConfig};
pub use simam::{simam_drop, simam_energy};

use crate::nn::linear::Linear;
use crate::nn::params::{GradStore, ParamModule};
use crate::nn::{normalize_rows, normalize_rows_backward, relu, relu_backward};
use crate::real::Real;
use crate::rng::{tags, RngStream};
use crate::sequence::SkeletonSequence;
use crate::topology::JointTopology;
use ndarray::{s, Array2, Array4, ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};

/// Complete encoder configuration; serialized next to checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub graph: GraphBranchConfig,
    pub image: ImageBranchConfig,
    /// Projection head output dimension.
    pub projector_dim: usize,
    /// Regularizer of the energy-based salience.
    pub simam_lambda: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            graph: GraphBranchConfig::default(),
            image: ImageBranchConfig::default(),
            projector_dim: 128,
            simam_lambda: 1e-4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> crate::Result<()> {
        self.graph.validate()?;
        self.image.validate()?;
        if self.projector_dim == 0 {
            return Err(crate::Error::InvalidConfig(
                "projector dimension must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Width of the fused feature (graph output + image output).
    pub fn fused_dim(&self) -> usize {
        self.graph.feature_dim() + self.image.embed_dim
    }
}

/// Two-layer projection head with output normalized to the unit sphere.
#[derive(Debug, Clone)]
pub struct Projector<R: Real> {
    pub fc1: Linear<R>,
    pub fc2: Linear<R>,
}

pub struct ProjCache<R: Real> {
    x: Array2<R>,
    h: Array2<R>,
    z0: Array2<R>,
    z: Array2<R>,
}

impl<R: Real> Projector<R> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        Projector {
            fc1: Linear::new(in_dim, in_dim, rng),
            fc2: Linear::new(in_dim, out_dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<R>) -> (Array2<R>, ProjCache<R>) {
        let h0 = self.fc1.forward(x);
        let h = relu(&h0.into_dyn())
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let z0 = self.fc2.forward(&h);
        let z = normalize_rows(&z0);
        (
            z.clone(),
            ProjCache {
                x: x.clone(),
                h,
                z0,
                z,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &ProjCache<R>,
        dz: &Array2<R>,
        prefix: &str,
        grads: &mut GradStore<R>,
    ) -> Array2<R> {
        let dz0 = normalize_rows_backward(&cache.z0, &cache.z, dz);
        let dh = self
            .fc2
            .backward(&cache.h, &dz0, &format!("{prefix}.fc2"), grads);
        let dh0 = relu_backward(&dh.into_dyn(), &cache.h.clone().into_dyn())
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        self.fc1
            .backward(&cache.x, &dh0, &format!("{prefix}.fc1"), grads)
    }
}

impl<R: Real> ParamModule<R> for Projector<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, R>, bool)) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, R>, bool)) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), f);
    }
}

/// The full two-branch encoder plus projection head.
#[derive(Debug, Clone)]
pub struct Cffn<R: Real> {
    pub cfg: EncoderConfig,
    pub graph: GraphBranch<R>,
    pub image: ImageBranch<R>,
    pub projector: Projector<R>,
}

pub struct CffnCache<R: Real> {
    graph: graph::GraphCache<R>,
    image: image::ImageCache<R>,
    graph_dim: usize,
}

impl<R: Real> Cffn<R> {
    /// Deterministic seeded construction; all weights are drawn in f64 before
    /// casting, so f32 and f64 encoders built from the same seed agree up to
    /// rounding.
    pub fn new(cfg: EncoderConfig, topo: &JointTopology, seed: u64) -> crate::Result<Self> {
        cfg.validate()?;
        topo.validate()?;
        let mut rng = RngStream::new(seed).substream(&[tags::INIT]);
        let graph = GraphBranch::new(cfg.graph.clone(), topo, crate::sequence::CANON_COORDS, &mut rng);
        let image = ImageBranch::new(
            cfg.image.clone(),
            crate::sequence::CANON_COORDS,
            crate::sequence::CANON_FRAMES,
            crate::sequence::CANON_JOINTS,
            &mut rng,
        );
        let projector = Projector::new(cfg.fused_dim(), cfg.projector_dim, &mut rng);
        Ok(Cffn {
            cfg,
            graph,
            image,
            projector,
        })
    }

    /// Fused features under batch statistics without mutating running stats;
    /// the momentum key branch uses this.
    pub fn forward_stats(&self, x: &Array4<R>) -> (Array2<R>, CffnCache<R>) {
        let (gf, gcache) = self.graph.forward_stats(x);
        let (imf, icache) = self.image.forward_train(x);
        let fused = concat_features(&gf, &imf);
        (
            fused,
            CffnCache {
                graph: gcache,
                image: icache,
                graph_dim: gf.ncols(),
            },
        )
    }

    /// Fold cached batch statistics into the running estimates.
    pub fn commit_stats(&mut self, cache: &CffnCache<R>) {
        self.graph.commit_stats(&cache.graph);
    }

    /// Fused features in train mode (batch statistics; running stats updated).
    pub fn forward_train(&mut self, x: &Array4<R>) -> (Array2<R>, CffnCache<R>) {
        let (fused, cache) = self.forward_stats(x);
        self.commit_stats(&cache);
        (fused, cache)
    }

    /// Fused features in eval mode; pure and does not touch any state.
    pub fn forward_eval(&self, x: &Array4<R>) -> Array2<R> {
        let gf = self.graph.forward_eval(x);
        let imf = self.image.forward_eval(x);
        concat_features(&gf, &imf)
    }

    /// Backward from fused-feature gradients into parameter gradients.
    pub fn backward(&self, cache: &CffnCache<R>, dfused: &Array2<R>, grads: &mut GradStore<R>) {
        let dg = dfused.slice(s![.., ..cache.graph_dim]).to_owned();
        let di = dfused.slice(s![.., cache.graph_dim..]).to_owned();
        self.graph.backward(&cache.graph, &dg, "graph", grads);
        self.image.backward(&cache.image, &di, "image", grads);
    }

    pub fn project(&self, fused: &Array2<R>) -> (Array2<R>, ProjCache<R>) {
        self.projector.forward(fused)
    }

    pub fn project_backward(
        &self,
        cache: &ProjCache<R>,
        dz: &Array2<R>,
        grads: &mut GradStore<R>,
    ) -> Array2<R> {
        self.projector.backward(cache, dz, "projector", grads)
    }

    /// Unit-norm projected embeddings in eval mode.
    pub fn embed_eval(&self, x: &Array4<R>) -> Array2<R> {
        let fused = self.forward_eval(x);
        let (z, _) = self.project(&fused);
        z
    }
}

impl<R: Real> ParamModule<R> for Cffn<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, R>, bool)) {
        let p = if prefix.is_empty() {
            String::new()
        } else {
            format!("{prefix}.")
        };
        self.graph.visit(&format!("{p}graph"), f);
        self.image.visit(&format!("{p}image"), f);
        self.projector.visit(&format!("{p}projector"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, R>, bool)) {
        let p = if prefix.is_empty() {
            String::new()
        } else {
            format!("{prefix}.")
        };
        self.graph.visit_mut(&format!("{p}graph"), f);
        self.image.visit_mut(&format!("{p}image"), f);
        self.projector.visit_mut(&format!("{p}projector"), f);
    }
}

/// Concatenate per-sample feature vectors: graph features first, image second.
pub fn concat_features<R: Real>(a: &Array2<R>, b: &Array2<R>) -> Array2<R> {
    debug_assert_eq!(a.nrows(), b.nrows());
    let mut out = Array2::<R>::zeros((a.nrows(), a.ncols() + b.ncols()));
    out.slice_mut(s![.., ..a.ncols()]).assign(a);
    out.slice_mut(s![.., a.ncols()..]).assign(b);
    out
}

/// Pack sequences into the model input layout (N, C, T, J).
pub fn batch_to_input<R: Real>(batch: &[&SkeletonSequence]) -> Array4<R> {
    let n = batch.len();
    assert!(n > 0, "empty batch");
    let (t, j, c) = (batch[0].frames(), batch[0].joints(), batch[0].coords());
    let mut x = Array4::<R>::zeros((n, c, t, j));
    for (ni, seq) in batch.iter().enumerate() {
        for ti in 0..t {
            for ji in 0..j {
                for ci in 0..c {
                    x[[ni, ci, ti, ji]] = R::fr(seq.data[[ti, ji, ci]]);
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::tensor_catalog;

    fn random_input(n: usize, seed: u64) -> Array4<f64> {
        let mut rng = RngStream::new(seed);
        Array4::from_shape_fn((n, 3, 120, 16), |_| rng.uniform(-1.0, 1.0))
    }

    fn encoder(seed: u64) -> Cffn<f64> {
        Cffn::new(EncoderConfig::default(), &JointTopology::canonical16(), seed).unwrap()
    }

    #[test]
    fn fused_feature_is_concat_of_branches() {
        let mut enc = encoder(1);
        let x = random_input(2, 2);
        let (fused, _) = enc.forward_train(&x);
        assert_eq!(fused.shape(), &[2, 128]);
        // eval path: exact concatenation layout
        let fused_eval = enc.forward_eval(&x);
        let gf = enc.graph.forward_eval(&x);
        let imf = enc.image.forward_eval(&x);
        for n in 0..2 {
            for c in 0..64 {
                assert_eq!(fused_eval[[n, c]], gf[[n, c]]);
                assert_eq!(fused_eval[[n, 64 + c]], imf[[n, c]]);
            }
        }
    }

    #[test]
    fn zeroing_image_branch_leaves_graph_features_unchanged() {
        let mut enc = encoder(3);
        let x = random_input(2, 4);
        let before = enc.forward_eval(&x);
        // ablate: zero every image-branch tensor
        enc.visit_mut("", &mut |name, mut view, _| {
            if name.starts_with("image") {
                view.fill(0.0);
            }
        });
        let after = enc.forward_eval(&x);
        for n in 0..2 {
            for c in 0..64 {
                assert_eq!(before[[n, c]], after[[n, c]]);
            }
        }
        let _ = before;
    }

    #[test]
    fn projector_outputs_unit_norm() {
        let enc = encoder(5);
        let mut rng = RngStream::new(6);
        let fused = Array2::from_shape_fn((4, 128), |_| rng.uniform(-2.0, 2.0));
        let (z, _) = enc.project(&fused);
        for row in z.rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn projector_with_zero_bias_is_scale_invariant_after_normalization() {
        let mut enc = encoder(7);
        enc.projector.fc1.b.fill(0.0);
        enc.projector.fc2.b.fill(0.0);
        let mut rng = RngStream::new(8);
        let fused = Array2::from_shape_fn((3, 128), |_| rng.uniform(-1.0, 1.0));
        let scaled = &fused * 2.0;
        let (z1, _) = enc.project(&fused);
        let (z2, _) = enc.project(&scaled);
        for (a, b) in z1.iter().zip(z2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_similarity_equals_dot_product_of_projected() {
        let enc = encoder(9);
        let mut rng = RngStream::new(10);
        let fused = Array2::from_shape_fn((2, 128), |_| rng.uniform(-1.0, 1.0));
        let (z, _) = enc.project(&fused);
        let dot: f64 = z.row(0).iter().zip(z.row(1).iter()).map(|(a, b)| a * b).sum();
        let na: f64 = z.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = z.row(1).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(((dot / (na * nb)) - dot).abs() < 1e-9);
    }

    #[test]
    fn eval_forward_is_pure_to_high_precision() {
        let mut enc = encoder(11);
        let x = random_input(2, 12);
        let _ = enc.forward_train(&x); // warm running stats
        let a = enc.forward_eval(&x);
        let b = enc.forward_eval(&x);
        let max_diff = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-10);
    }

    #[test]
    fn tensor_names_are_unique_and_cover_both_branches() {
        let enc = encoder(13);
        let catalog = tensor_catalog(&enc);
        let names: Vec<&str> = catalog.iter().map(|(n, _, _)| n.as_str()).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len(), "duplicate tensor names");
        assert!(names.iter().any(|n| n.starts_with("graph.unit8")));
        assert!(names.iter().any(|n| n.starts_with("image.block1")));
        assert!(names.iter().any(|n| n.starts_with("projector.fc2")));
        // running stats are present but not trainable
        let running: Vec<_> = catalog
            .iter()
            .filter(|(n, _, t)| n.contains("running_") && !t)
            .collect();
        assert!(!running.is_empty());
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let a = encoder(21);
        let b = encoder(21);
        let mut equal = true;
        a.visit("", &mut |name, view, _| {
            b.visit("", &mut |name2, view2, _| {
                if name == name2 && view != view2 {
                    equal = false;
                }
            });
        });
        assert!(equal);
    }
}
