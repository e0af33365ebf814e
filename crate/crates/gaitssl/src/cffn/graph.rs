//! Graph-domain branch: a 9-layer spatial-temporal graph convolution stack
//! over the skeleton tree, pooled to a 64-d feature.

use crate::nn::conv::TemporalConv;
use crate::nn::norm::{BatchNorm, BnCache};
use crate::nn::params::{GradStore, ParamModule};
use crate::real::Real;
use crate::rng::RngStream;
use crate::topology::JointTopology;
use ndarray::{Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Structure of the graph branch. The defaults pin the published stack:
/// 9 layers with output channels 16,16,16,32,32,32,64,64,64, temporal kernel
/// 9, spatial kernel 3 (self/centripetal/centrifugal subsets) and temporal
/// strides of 2 at layers 4 and 7.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphBranchConfig {
    pub out_channels: Vec<usize>,
    pub temporal_kernel: usize,
    pub spatial_kernel: usize,
    pub strides: Vec<usize>,
    pub input_bn: bool,
}

impl Default for GraphBranchConfig {
    fn default() -> Self {
        GraphBranchConfig {
            out_channels: vec![16, 16, 16, 32, 32, 32, 64, 64, 64],
            temporal_kernel: 9,
            spatial_kernel: 3,
            strides: vec![1, 1, 1, 2, 1, 1, 2, 1, 1],
            input_bn: true,
        }
    }
}

impl GraphBranchConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.out_channels.len() != 9 || self.strides.len() != 9 {
            return Err(crate::Error::InvalidConfig(format!(
                "graph branch needs 9 layers, got {} channels / {} strides",
                self.out_channels.len(),
                self.strides.len()
            )));
        }
        if self.spatial_kernel != 3 {
            return Err(crate::Error::InvalidConfig(
                "spatial kernel must be 3 (self/centripetal/centrifugal)".into(),
            ));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(crate::Error::InvalidConfig(
                "temporal kernel must be odd".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.out_channels.last().expect("validated")
    }
}

/// The three normalized adjacency subsets. Their sum is the symmetric
/// degree-normalized adjacency with self-loops.
#[derive(Debug, Clone)]
pub struct AdjacencySubsets<R: Real> {
    pub subsets: [Array2<R>; 3],
}

impl<R: Real> AdjacencySubsets<R> {
    pub fn from_topology(topo: &JointTopology) -> Self {
        let n = topo.num_joints();
        let mut a = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            a[[i, i]] = 1.0;
        }
        for &(p, c) in &topo.edges {
            a[[p, c]] = 1.0;
            a[[c, p]] = 1.0;
        }
        let degree: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
        let mut norm = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                if a[[i, j]] != 0.0 {
                    norm[[i, j]] = a[[i, j]] / (degree[i] * degree[j]).sqrt();
                }
            }
        }
        let depth = topo.depths();
        let mut subsets = [
            Array2::<R>::zeros((n, n)),
            Array2::<R>::zeros((n, n)),
            Array2::<R>::zeros((n, n)),
        ];
        // Entry (j, i) weights the flow from joint j into joint i.
        for j in 0..n {
            for i in 0..n {
                if norm[[j, i]] == 0.0 {
                    continue;
                }
                let k = if i == j {
                    0
                } else if depth[j] < depth[i] {
                    1 // centripetal: source closer to the root
                } else {
                    2
                };
                subsets[k][[j, i]] = R::fr(norm[[j, i]]);
            }
        }
        AdjacencySubsets { subsets }
    }

    /// The full normalized adjacency (sum of subsets).
    pub fn combined(&self) -> Array2<R> {
        let mut sum = self.subsets[0].clone();
        sum += &self.subsets[1];
        sum += &self.subsets[2];
        sum
    }
}

/// Spatial graph convolution: y = sum_k W_k (x A_k) + b.
#[derive(Debug, Clone)]
pub struct GraphConv<R: Real> {
    /// (subsets, c_out, c_in)
    pub w: Array3<R>,
    pub b: Array1<R>,
}

impl<R: Real> GraphConv<R> {
    pub fn new(c_in: usize, c_out: usize, subsets: usize, rng: &mut RngStream) -> Self {
        let limit = (6.0 / ((subsets * c_in) as f64 + c_out as f64)).sqrt();
        let w = Array3::from_shape_fn((subsets, c_out, c_in), |_| R::fr(rng.uniform(-limit, limit)));
        GraphConv {
            w,
            b: Array1::zeros(c_out),
        }
    }

    /// (N, C_in, T, J) -> (N, C_out, T, J)
    pub fn forward(&self, x: &Array4<R>, adj: &AdjacencySubsets<R>) -> Array4<R> {
        let (n, c_in, t, j) = dims4(x);
        let c_out = self.w.shape()[1];
        let mut out = Array4::<R>::uninit((n, c_out, t, j));
        ndarray::Zip::from(out.axis_iter_mut(Axis(0)))
            .and(x.axis_iter(Axis(0)))
            .into_par_iter()
            .for_each(|(out_s, xs)| {
                let x_mat = xs
                    .into_shape_with_order((c_in * t, j))
                    .expect("contiguous");
                let mut y = Array2::<R>::zeros((c_out, t * j));
                for (k, a_k) in adj.subsets.iter().enumerate() {
                    let xa = x_mat.dot(a_k); // (c_in * t, j)
                    let xa2 = xa
                        .into_shape_with_order((c_in, t * j))
                        .expect("contiguous");
                    let w_k = self.w.index_axis(Axis(0), k);
                    ndarray::linalg::general_mat_mul(R::one(), &w_k, &xa2, R::one(), &mut y);
                }
                for (co, mut row) in y.rows_mut().into_iter().enumerate() {
                    row.mapv_inplace(|v| v + self.b[co]);
                }
                y.into_shape_with_order((c_out, t, j))
                    .expect("contiguous")
                    .assign_to(out_s);
            });
        unsafe { out.assume_init() }
    }

    pub fn backward(
        &self,
        x: &Array4<R>,
        adj: &AdjacencySubsets<R>,
        dy: &Array4<R>,
        prefix: &str,
        grads: &mut GradStore<R>,
    ) -> Array4<R> {
        let (n, c_in, t, j) = dims4(x);
        let c_out = self.w.shape()[1];
        let k_n = self.w.shape()[0];
        let mut dx_out = Array4::<R>::uninit((n, c_in, t, j));
        let partials: Vec<(Array3<R>, Array1<R>)> =
            ndarray::Zip::from(dx_out.axis_iter_mut(Axis(0)))
                .and(x.axis_iter(Axis(0)))
                .and(dy.axis_iter(Axis(0)))
                .into_par_iter()
                .map(|(dx_s, xs, dys)| {
                    let x_mat = xs.into_shape_with_order((c_in * t, j)).expect("contiguous");
                    let dy_mat = dys
                        .into_shape_with_order((c_out, t * j))
                        .expect("contiguous");
                    let mut dx = Array2::<R>::zeros((c_in * t, j));
                    let mut dw = Array3::<R>::zeros((k_n, c_out, c_in));
                    for (k, a_k) in adj.subsets.iter().enumerate() {
                        let xa = x_mat.dot(a_k);
                        let xa2 = xa.into_shape_with_order((c_in, t * j)).expect("contiguous");
                        let mut dw_k = dw.index_axis_mut(Axis(0), k);
                        ndarray::linalg::general_mat_mul(R::one(), &dy_mat, &xa2.t(), R::zero(), &mut dw_k);
                        let w_k = self.w.index_axis(Axis(0), k);
                        let dxa2 = w_k.t().dot(&dy_mat); // (c_in, t*j)
                        let dxa = dxa2
                            .into_shape_with_order((c_in * t, j))
                            .expect("contiguous");
                        ndarray::linalg::general_mat_mul(R::one(), &dxa, &a_k.t(), R::one(), &mut dx);
                    }
                    let db = dy_mat.sum_axis(Axis(1));
                    dx.into_shape_with_order((c_in, t, j))
                        .expect("contiguous")
                        .assign_to(dx_s);
                    (dw, db)
                })
                .collect();
        let dx_out = unsafe { dx_out.assume_init() };
        let mut dw_total = Array3::<R>::zeros((k_n, c_out, c_in));
        let mut db_total = Array1::<R>::zeros(c_out);
        for (dw, db) in partials {
            dw_total += &dw;
            db_total += &db;
        }
        grads.accumulate(&format!("{prefix}.weight"), dw_total.into_dyn());
        grads.accumulate(&format!("{prefix}.bias"), db_total.into_dyn());
        dx_out
    }
}

impl<R: Real> ParamModule<R> for GraphConv<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, R>, bool)) {
        f(&format!("{prefix}.weight"), self.w.view().into_dyn(), true);
        f(&format!("{prefix}.bias"), self.b.view().into_dyn(), true);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, R>, bool)) {
        f(&format!("{prefix}.weight"), self.w.view_mut().into_dyn(), true);
        f(&format!("{prefix}.bias"), self.b.view_mut().into_dyn(), true);
    }
}

/// One ST-GCN unit: graph conv -> BN -> ReLU -> temporal conv -> BN ->
/// (+ identity residual when shapes agree) -> ReLU.
#[derive(Debug, Clone)]
pub struct StGcnUnit<R: Real> {
    pub gcn: GraphConv<R>,
    pub bn1: BatchNorm<R>,
    pub tconv: TemporalConv<R>,
    pub bn2: BatchNorm<R>,
    pub residual: bool,
}

pub struct UnitCache<R: Real> {
    x: Array4<R>,
    bn1: BnCache<R>,
    h: Array4<R>,
    bn2: BnCache<R>,
    y: Array4<R>,
}

impl<R: Real> StGcnUnit<R> {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, subsets: usize, rng: &mut RngStream) -> Self {
        StGcnUnit {
            gcn: GraphConv::new(c_in, c_out, subsets, rng),
            bn1: BatchNorm::new(c_out),
            tconv: TemporalConv::new(c_out, c_out, kernel, stride, rng),
            bn2: BatchNorm::new(c_out),
            residual: c_in == c_out && stride == 1,
        }
    }

    /// Batch-statistics forward without state mutation. Intermediates are
    /// moved through contiguous reshapes; nothing is copied beyond the cache.
    pub fn forward_stats(&self, x: Array4<R>, adj: &AdjacencySubsets<R>) -> (Array4<R>, UnitCache<R>) {
        let g = self.gcn.forward(&x, adj);
        let (n, c, t, j) = dims4(&g);
        let g3 = g.into_shape_with_order((n, c, t * j)).expect("contiguous");
        let (mut h3, bn1_cache) = self.bn1.forward_stats(g3);
        relu_inplace(&mut h3);
        let h4 = h3.into_shape_with_order((n, c, t, j)).expect("contiguous");
        let tc = self.tconv.forward(&h4);
        let t2 = tc.shape()[2];
        let tc3 = tc.into_shape_with_order((n, c, t2 * j)).expect("contiguous");
        let (b2, bn2_cache) = self.bn2.forward_stats(tc3);
        let mut pre = b2.into_shape_with_order((n, c, t2, j)).expect("contiguous");
        if self.residual {
            add_relu_inplace(&mut pre, &x);
        } else {
            relu4_inplace(&mut pre);
        }
        let cache = UnitCache {
            x,
            bn1: bn1_cache,
            h: h4,
            bn2: bn2_cache,
            y: pre.clone(),
        };
        (pre, cache)
    }

    pub fn commit_stats(&mut self, cache: &UnitCache<R>) {
        self.bn1.commit_stats(&cache.bn1);
        self.bn2.commit_stats(&cache.bn2);
    }

    pub fn forward_train(
        &mut self,
        x: Array4<R>,
        adj: &AdjacencySubsets<R>,
    ) -> (Array4<R>, UnitCache<R>) {
        let (y, cache) = self.forward_stats(x, adj);
        self.commit_stats(&cache);
        (y, cache)
    }

    pub fn forward_eval(&self, x: &Array4<R>, adj: &AdjacencySubsets<R>) -> Array4<R> {
        let g = self.gcn.forward(x, adj);
        let (n, c, t, j) = dims4(&g);
        let g3 = g.into_shape_with_order((n, c, t * j)).expect("contiguous");
        let mut h3 = self.bn1.forward_eval(&g3);
        relu_inplace(&mut h3);
        let h4 = h3.into_shape_with_order((n, c, t, j)).expect("contiguous");
        let tc = self.tconv.forward(&h4);
        let t2 = tc.shape()[2];
        let tc3 = tc.into_shape_with_order((n, c, t2 * j)).expect("contiguous");
        let mut pre = self
            .bn2
            .forward_eval(&tc3)
            .into_shape_with_order((n, c, t2, j))
            .expect("contiguous");
        if self.residual {
            add_relu_inplace(&mut pre, x);
        } else {
            relu4_inplace(&mut pre);
        }
        pre
    }

    pub fn backward(
        &self,
        cache: &UnitCache<R>,
        adj: &AdjacencySubsets<R>,
        dy: &Array4<R>,
        prefix: &str,
        grads: &mut GradStore<R>,
    ) -> Array4<R> {
        let mut dpre = dy.clone();
        mask_by(&mut dpre, &cache.y);
        let (n, c, t2, j) = dims4(&dpre);
        let dpre3 = dpre
            .view()
            .into_shape_with_order((n, c, t2 * j))
            .expect("contiguous");
        let db2 = self
            .bn2
            .backward(&cache.bn2, dpre3, &format!("{prefix}.bn2"), grads);
        let dtc = db2.into_shape_with_order((n, c, t2, j)).expect("contiguous");
        let mut dh = self
            .tconv
            .backward(&cache.h, &dtc, &format!("{prefix}.tconv"), grads);
        mask_by(&mut dh, &cache.h);
        let t = cache.x.shape()[2];
        let dh3 = dh.into_shape_with_order((n, c, t * j)).expect("contiguous");
        let db1 = self
            .bn1
            .backward(&cache.bn1, dh3.view(), &format!("{prefix}.bn1"), grads);
        let dg = db1.into_shape_with_order((n, c, t, j)).expect("contiguous");
        let mut dx = self
            .gcn
            .backward(&cache.x, adj, &dg, &format!("{prefix}.gcn"), grads);
        if self.residual {
            ndarray::Zip::from(dx.outer_iter_mut())
                .and(dpre.outer_iter())
                .into_par_iter()
                .for_each(|(mut d, p)| {
                    ndarray::Zip::from(&mut d).and(&p).for_each(|dv, &pv| *dv += pv);
                });
        }
        dx
    }
}

impl<R: Real> ParamModule<R> for StGcnUnit<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, R>, bool)) {
        self.gcn.visit(&format!("{prefix}.gcn"), f);
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.tconv.visit(&format!("{prefix}.tconv"), f);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, R>, bool)) {
        self.gcn.visit_mut(&format!("{prefix}.gcn"), f);
        self.bn1.visit_mut(&format!("{prefix}.bn1"), f);
        self.tconv.visit_mut(&format!("{prefix}.tconv"), f);
        self.bn2.visit_mut(&format!("{prefix}.bn2"), f);
    }
}

/// The full graph branch with input batch normalization over (coordinate,
/// joint) channels and mean pooling over time and joints.
#[derive(Debug, Clone)]
pub struct GraphBranch<R: Real> {
    pub cfg: GraphBranchConfig,
    pub data_bn: BatchNorm<R>,
    pub units: Vec<StGcnUnit<R>>,
    pub adj: AdjacencySubsets<R>,
}

pub struct GraphCache<R: Real> {
    input_shape: (usize, usize, usize, usize),
    data_bn: Option<BnCache<R>>,
    units: Vec<UnitCache<R>>,
    pooled_t: usize,
    pooled_j: usize,
}

impl<R: Real> GraphBranch<R> {
    pub fn new(
        cfg: GraphBranchConfig,
        topo: &JointTopology,
        in_channels: usize,
        rng: &mut RngStream,
    ) -> Self {
        cfg.validate().expect("graph config");
        let adj = AdjacencySubsets::from_topology(topo);
        let j = topo.num_joints();
        let mut units = Vec::with_capacity(cfg.out_channels.len());
        let mut c_prev = in_channels;
        for (i, (&c_out, &stride)) in cfg.out_channels.iter().zip(&cfg.strides).enumerate() {
            let _ = i;
            units.push(StGcnUnit::new(
                c_prev,
                c_out,
                cfg.temporal_kernel,
                stride,
                cfg.spatial_kernel,
                rng,
            ));
            c_prev = c_out;
        }
        GraphBranch {
            data_bn: BatchNorm::new(in_channels * j),
            cfg,
            units,
            adj,
        }
    }

    /// Temporal length after each unit for a given input length.
    pub fn temporal_profile(&self, t_in: usize) -> Vec<usize> {
        let mut t = t_in;
        self.units
            .iter()
            .map(|u| {
                t = u.tconv.out_len(t);
                t
            })
            .collect()
    }

    /// (N, C, T, J) -> per-channel (C*J) normalization layout (N, C*J, T).
    fn to_bn_layout(&self, x: &Array4<R>) -> Array3<R> {
        let (n, c, t, j) = dims4(x);
        let perm = x.view().permuted_axes([0, 1, 3, 2]); // (N, C, J, T)
        let std = perm.as_standard_layout().into_owned();
        std.into_shape_with_order((n, c * j, t)).expect("contiguous")
    }

    fn from_bn_layout(&self, x: &Array3<R>, n: usize, c: usize, t: usize, j: usize) -> Array4<R> {
        let back = x
            .view()
            .into_shape_with_order((n, c, j, t))
            .expect("contiguous");
        let perm = back.permuted_axes([0, 1, 3, 2]);
        perm.as_standard_layout().into_owned()
    }

    /// Batch-statistics forward without state mutation.
    pub fn forward_stats(&self, x: &Array4<R>) -> (Array2<R>, GraphCache<R>) {
        let (n, c, t, j) = dims4(x);
        let (mut cur, data_bn_cache) = if self.cfg.input_bn {
            let bn_in = self.to_bn_layout(x);
            let (bn_out, cache) = self.data_bn.forward_stats(bn_in);
            (self.from_bn_layout(&bn_out, n, c, t, j), Some(cache))
        } else {
            (x.clone(), None)
        };
        let mut unit_caches = Vec::with_capacity(self.units.len());
        for unit in &self.units {
            let (next, cache) = unit.forward_stats(cur, &self.adj);
            unit_caches.push(cache);
            cur = next;
        }
        let (_, _, tf, jf) = dims4(&cur);
        let pooled = mean_pool(&cur);
        let cache = GraphCache {
            input_shape: (n, c, t, j),
            data_bn: data_bn_cache,
            units: unit_caches,
            pooled_t: tf,
            pooled_j: jf,
        };
        (pooled, cache)
    }

    pub fn commit_stats(&mut self, cache: &GraphCache<R>) {
        if let Some(bn_cache) = &cache.data_bn {
            self.data_bn.commit_stats(bn_cache);
        }
        for (unit, ucache) in self.units.iter_mut().zip(&cache.units) {
            unit.commit_stats(ucache);
        }
    }

    pub fn forward_train(&mut self, x: &Array4<R>) -> (Array2<R>, GraphCache<R>) {
        let (pooled, cache) = self.forward_stats(x);
        self.commit_stats(&cache);
        (pooled, cache)
    }

    pub fn forward_eval(&self, x: &Array4<R>) -> Array2<R> {
        let (n, c, t, j) = dims4(x);
        let mut cur = if self.cfg.input_bn {
            let bn_in = self.to_bn_layout(x);
            self.from_bn_layout(&self.data_bn.forward_eval(&bn_in), n, c, t, j)
        } else {
            x.clone()
        };
        for unit in &self.units {
            cur = unit.forward_eval(&cur, &self.adj);
        }
        mean_pool(&cur)
    }

    /// Backward from pooled features; input gradients are discarded.
    pub fn backward(
        &self,
        cache: &GraphCache<R>,
        dpooled: &Array2<R>,
        prefix: &str,
        grads: &mut GradStore<R>,
    ) {
        let c_last = self.cfg.feature_dim();
        let mut dcur = unpool(dpooled, c_last, cache.pooled_t, cache.pooled_j);
        for (i, unit) in self.units.iter().enumerate().rev() {
            dcur = unit.backward(
                &cache.units[i],
                &self.adj,
                &dcur,
                &format!("{prefix}.unit{i}"),
                grads,
            );
        }
        if let Some(bn_cache) = &cache.data_bn {
            let (n, c, t, j) = cache.input_shape;
            let dbn_in = {
                let perm = dcur.view().permuted_axes([0, 1, 3, 2]);
                let std = perm.as_standard_layout().into_owned();
                std.into_shape_with_order((n, c * j, t)).expect("contiguous")
            };
            // Input gradients stop here; only parameter gradients matter.
            let _ = self.data_bn.backward(
                bn_cache,
                dbn_in.view(),
                &format!("{prefix}.data_bn"),
                grads,
            );
        }
    }
}

impl<R: Real> ParamModule<R> for GraphBranch<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, R>, bool)) {
        if self.cfg.input_bn {
            self.data_bn.visit(&format!("{prefix}.data_bn"), f);
        }
        for (i, unit) in self.units.iter().enumerate() {
            unit.visit(&format!("{prefix}.unit{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, R>, bool)) {
        if self.cfg.input_bn {
            self.data_bn.visit_mut(&format!("{prefix}.data_bn"), f);
        }
        for (i, unit) in self.units.iter_mut().enumerate() {
            unit.visit_mut(&format!("{prefix}.unit{i}"), f);
        }
    }
}

/// Mean over time and joints: (N, C, T, J) -> (N, C).
pub fn mean_pool<R: Real>(x: &Array4<R>) -> Array2<R> {
    let (n, c, t, j) = dims4(x);
    let scale = R::fr(1.0 / (t * j) as f64);
    let mut out = Array2::<R>::zeros((n, c));
    ndarray::Zip::from(out.outer_iter_mut())
        .and(x.outer_iter())
        .into_par_iter()
        .for_each(|(mut orow, xs)| {
            for ci in 0..c {
                let plane = xs.index_axis(Axis(0), ci);
                let plane = plane.to_slice().expect("contiguous");
                let mut acc = R::zero();
                for &v in plane {
                    acc += v;
                }
                orow[ci] = acc * scale;
            }
        });
    out
}

/// Backward of mean pooling: broadcast the gradient over (T, J).
pub fn unpool<R: Real>(d: &Array2<R>, c: usize, t: usize, j: usize) -> Array4<R> {
    let n = d.nrows();
    debug_assert_eq!(c, d.ncols());
    let scale = R::fr(1.0 / (t * j) as f64);
    let mut out = Array4::<R>::zeros((n, c, t, j));
    for ni in 0..n {
        for ci in 0..c {
            let g = d[[ni, ci]] * scale;
            out.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    out
}

fn relu_inplace<R: Real>(x: &mut Array3<R>) {
    x.outer_iter_mut().into_par_iter().for_each(|mut row| {
        row.mapv_inplace(|v| if v > R::zero() { v } else { R::zero() });
    });
}

fn relu4_inplace<R: Real>(x: &mut Array4<R>) {
    x.outer_iter_mut().into_par_iter().for_each(|mut row| {
        row.mapv_inplace(|v| if v > R::zero() { v } else { R::zero() });
    });
}

/// Fused residual add and rectifier: pre = relu(pre + x), per sample.
fn add_relu_inplace<R: Real>(pre: &mut Array4<R>, x: &Array4<R>) {
    ndarray::Zip::from(pre.outer_iter_mut())
        .and(x.outer_iter())
        .into_par_iter()
        .for_each(|(mut p, xs)| {
            ndarray::Zip::from(&mut p).and(&xs).for_each(|pv, &xv| {
                let v = *pv + xv;
                *pv = if v > R::zero() { v } else { R::zero() };
            });
        });
}

/// Zero gradient entries where the forward output was non-positive.
fn mask_by<R: Real>(grad: &mut Array4<R>, activated: &Array4<R>) {
    ndarray::Zip::from(grad.outer_iter_mut())
        .and(activated.outer_iter())
        .into_par_iter()
        .for_each(|(mut g, a)| {
            ndarray::Zip::from(&mut g).and(&a).for_each(|gv, &av| {
                if av <= R::zero() {
                    *gv = R::zero();
                }
            });
        });
}

fn dims4<R: Real>(x: &Array4<R>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::JointTopology;

    #[test]
    fn adjacency_is_symmetric_and_normalized() {
        let topo = JointTopology::canonical16();
        let adj = AdjacencySubsets::<f64>::from_topology(&topo);
        let a = adj.combined();
        for i in 0..16 {
            for j in 0..16 {
                assert!((a[[i, j]] - a[[j, i]]).abs() < 1e-12);
            }
        }
        // Degree normalization: eigen-bound check, row sums of D^{1/2} A D^{1/2}
        // reconstruct the raw adjacencies.
        let mut raw = Array2::<f64>::zeros((16, 16));
        for i in 0..16 {
            raw[[i, i]] = 1.0;
        }
        for &(p, c) in &topo.edges {
            raw[[p, c]] = 1.0;
            raw[[c, p]] = 1.0;
        }
        let degree: Vec<f64> = (0..16).map(|i| raw.row(i).sum()).collect();
        for i in 0..16 {
            for j in 0..16 {
                let expect = raw[[i, j]] / (degree[i] * degree[j]).sqrt();
                assert!((a[[i, j]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjacency_subsets_partition_the_matrix() {
        let topo = JointTopology::canonical16();
        let adj = AdjacencySubsets::<f64>::from_topology(&topo);
        // self subset is diagonal
        for i in 0..16 {
            for j in 0..16 {
                if i != j {
                    assert_eq!(adj.subsets[0][[i, j]], 0.0);
                }
            }
        }
        // centripetal and centrifugal are transposes of each other
        for i in 0..16 {
            for j in 0..16 {
                assert!((adj.subsets[1][[i, j]] - adj.subsets[2][[j, i]]).abs() < 1e-12);
            }
        }
        // no isolated joints: every column of the combined matrix is nonzero
        let a = adj.combined();
        for j in 0..16 {
            assert!(a.column(j).iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn temporal_profile_matches_strides() {
        let topo = JointTopology::canonical16();
        let mut rng = RngStream::new(0);
        let branch = GraphBranch::<f32>::new(GraphBranchConfig::default(), &topo, 3, &mut rng);
        assert_eq!(
            branch.temporal_profile(120),
            vec![120, 120, 120, 60, 60, 60, 30, 30, 30]
        );
    }

    #[test]
    fn identical_samples_produce_identical_features() {
        let topo = JointTopology::canonical16();
        let mut rng = RngStream::new(1);
        let mut branch = GraphBranch::<f64>::new(GraphBranchConfig::default(), &topo, 3, &mut rng);
        let mut sample_rng = RngStream::new(2);
        let one = Array4::from_shape_fn((1, 3, 120, 16), |_| sample_rng.uniform(-1.0, 1.0));
        let mut x = Array4::<f64>::zeros((2, 3, 120, 16));
        x.index_axis_mut(Axis(0), 0).assign(&one.index_axis(Axis(0), 0));
        x.index_axis_mut(Axis(0), 1).assign(&one.index_axis(Axis(0), 0));
        let (y, _) = branch.forward_train(&x);
        for c in 0..64 {
            assert!((y[[0, c]] - y[[1, c]]).abs() < 1e-12);
        }
        assert_eq!(y.shape(), &[2, 64]);
    }

    #[test]
    fn batch_permutation_equivariance_in_eval() {
        let topo = JointTopology::canonical16();
        let mut rng = RngStream::new(3);
        let mut branch = GraphBranch::<f64>::new(GraphBranchConfig::default(), &topo, 3, &mut rng);
        let mut sample_rng = RngStream::new(4);
        let x = Array4::from_shape_fn((3, 3, 120, 16), |_| sample_rng.uniform(-1.0, 1.0));
        // warm the running statistics, then evaluate
        let _ = branch.forward_train(&x);
        let y = branch.forward_eval(&x);
        let mut xp = Array4::<f64>::zeros(x.raw_dim());
        let perm = [2usize, 0, 1];
        for (dst, &src) in perm.iter().enumerate() {
            xp.index_axis_mut(Axis(0), dst).assign(&x.index_axis(Axis(0), src));
        }
        let yp = branch.forward_eval(&xp);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..64 {
                assert!((yp[[dst, c]] - y[[src, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_pool_and_unpool_are_adjoint() {
        let mut rng = RngStream::new(5);
        let x = Array4::from_shape_fn((2, 3, 4, 5), |_| rng.uniform(-1.0, 1.0));
        let d = Array2::from_shape_fn((2, 3), |_| rng.uniform(-1.0, 1.0));
        let lhs: f64 = (&mean_pool(&x) * &d).sum();
        let rhs: f64 = (&x * &unpool(&d, 3, 4, 5)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
