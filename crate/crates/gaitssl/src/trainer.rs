//! Self-supervised pretext trainer: momentum query/key encoders, FIFO memory
//! bank, InfoNCE plus distributional divergence objective, and the SGD
//! schedule.
//!
//! Per step, a batch is augmented into three views: two general views and one
//! strong view. The key encoder (a momentum copy that never receives
//! gradients) embeds the first view into z1, which later feeds the bank. The
//! query encoder embeds the second view (z2) and the strong view (z3), plus a
//! salience-dropped variant of the strong features (z3'). The loss is
//! `alpha * InfoNCE(z2, z1) + beta * (L_d1 + L_d2) / 2`, where the divergence
//! terms align the strong-view conditional distributions to the detached
//! general-view distribution.

use crate::augment::{apply_general, apply_strong, GeneralAugmentSpec, StrongAugmentSpec};
use crate::bank::MemoryBank;
use crate::cffn::{simam_drop, Cffn, EncoderConfig};
use crate::dataset::GaitDataset;
use crate::error::{Error, Result};
use crate::losses::{ddm_batch_with_grad, infonce_batch_with_grad};
use crate::nn::params::{GradStore, ParamModule};
use crate::real::Real;
use crate::rng::{tags, RngStream};
use crate::sequence::SkeletonSequence;
use crate::topology::JointTopology;
use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Pretraining hyperparameters. Defaults follow the published settings:
/// temperature 0.07, key momentum 0.999, loss weights 1/1, SGD momentum 0.9
/// with weight decay 1e-4, 500 epochs at lr 0.001 dropping by 0.1 at epoch
/// 400, and a bank of 2560 keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub tau: f64,
    /// Key-encoder momentum coefficient.
    pub momentum: f64,
    pub alpha: f64,
    pub beta: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub bank_capacity: usize,
    pub drop_ratio: f64,
    pub seed: u64,
    /// Disable to train with the general-augmentation InfoNCE objective only
    /// (no strong view, no divergence loss).
    pub strong_branch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.07,
            momentum: 0.999,
            alpha: 1.0,
            beta: 1.0,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 500,
            lr: 0.001,
            lr_drop_epoch: 400,
            lr_drop_factor: 0.1,
            batch_size: 32,
            bank_capacity: 2560,
            drop_ratio: 0.25,
            seed: 0,
            strong_branch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "key momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.bank_capacity == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "batch size, bank capacity and epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.drop_ratio) {
            return Err(Error::InvalidConfig(format!(
                "drop ratio must lie in [0,1), got {}",
                self.drop_ratio
            )));
        }
        Ok(())
    }

    /// Step learning rate: `lr` before `lr_drop_epoch`, scaled after.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub epoch: usize,
    pub step: usize,
    pub l_info: f64,
    pub l_d1: f64,
    pub l_d2: f64,
    pub l_d: f64,
    pub total: f64,
    pub bank_size: usize,
    pub lr: f64,
}

/// SGD with momentum and weight decay over named tensors.
#[derive(Debug, Clone)]
pub struct Sgd<R: Real> {
    pub lr: R,
    pub momentum: R,
    pub weight_decay: R,
    velocity: HashMap<String, ArrayD<R>>,
}

impl<R: Real> Sgd<R> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr: R::fr(lr),
            momentum: R::fr(momentum),
            weight_decay: R::fr(weight_decay),
            velocity: HashMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = R::fr(lr);
    }

    /// v <- mu v + g + wd p; p <- p - lr v, for every trainable tensor with a
    /// gradient entry.
    pub fn step(&mut self, module: &mut dyn ParamModule<R>, grads: &GradStore<R>) {
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        module.visit_mut("", &mut |name, mut param, trainable| {
            if !trainable {
                return;
            }
            let Some(grad) = grads.get(name) else {
                return;
            };
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(param.shape().to_vec()));
            ndarray::Zip::from(v.view_mut())
                .and(grad)
                .and(param.view())
                .for_each(|v, &g, &p| *v = mu * *v + g + wd * p);
            ndarray::Zip::from(&mut param)
                .and(v.view())
                .for_each(|p, &v| *p = *p - lr * v);
        });
    }
}

/// Query/key encoder pair with momentum blending of every key tensor.
#[derive(Debug, Clone)]
pub struct MomentumPair<R: Real> {
    pub query: Cffn<R>,
    pub key: Cffn<R>,
    pub m: R,
}

impl<R: Real> MomentumPair<R> {
    /// The key branch starts as an exact copy of the query.
    pub fn new(query: Cffn<R>, m: f64) -> Self {
        let key = query.clone();
        MomentumPair {
            query,
            key,
            m: R::fr(m),
        }
    }

    /// key <- m * key + (1 - m) * query, elementwise over all tensors
    /// (including normalization running statistics).
    pub fn momentum_update(&mut self) {
        momentum_blend(&mut self.key, &self.query, self.m);
    }
}

/// Blend every tensor of `target` toward `source`.
pub fn momentum_blend<R: Real>(target: &mut Cffn<R>, source: &Cffn<R>, m: R) {
    let mut source_tensors: Vec<(String, ArrayD<R>)> = Vec::new();
    source.visit("", &mut |name, view, _| {
        source_tensors.push((name.to_string(), view.to_owned()));
    });
    let mut idx = 0usize;
    let one = R::one();
    target.visit_mut("", &mut |name, mut view, _| {
        let (src_name, src) = &source_tensors[idx];
        assert_eq!(name, src_name, "tensor order mismatch");
        ndarray::Zip::from(&mut view)
            .and(src.view())
            .for_each(|t, &s| *t = m * *t + (one - m) * s);
        idx += 1;
    });
    assert_eq!(idx, source_tensors.len());
}

/// All mutable pretraining state.
pub struct Trainer<R: Real> {
    pub cfg: TrainConfig,
    pub pair: MomentumPair<R>,
    pub bank: MemoryBank<R>,
    pub opt: Sgd<R>,
    topo: JointTopology,
    general: GeneralAugmentSpec,
    strong: StrongAugmentSpec,
    epoch: usize,
    global_step: usize,
}

impl<R: Real> Trainer<R> {
    pub fn new(
        encoder: Cffn<R>,
        cfg: TrainConfig,
        topo: JointTopology,
        general: GeneralAugmentSpec,
        strong: StrongAugmentSpec,
    ) -> Result<Self> {
        cfg.validate()?;
        general.validate()?;
        strong.validate()?;
        let proj_dim = encoder.cfg.projector_dim;
        let opt = Sgd::new(cfg.lr, cfg.sgd_momentum, cfg.weight_decay);
        Ok(Trainer {
            pair: MomentumPair::new(encoder, cfg.momentum),
            bank: MemoryBank::new(cfg.bank_capacity, proj_dim),
            opt,
            cfg,
            topo,
            general,
            strong,
            epoch: 0,
            global_step: 0,
        })
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> usize {
        self.global_step
    }

    /// Key-branch embeddings of the first general view; used both for the
    /// loss positives and for bank warm-up.
    fn key_embed(&self, x: &ndarray::Array4<R>) -> Array2<R> {
        let (fused, _) = self.pair.key.forward_stats(x);
        let (z, _) = self.pair.key.project(&fused);
        z
    }

    fn augment_views(
        &self,
        batch: &[(usize, &SkeletonSequence)],
    ) -> (
        ndarray::Array4<R>,
        ndarray::Array4<R>,
        Option<ndarray::Array4<R>>,
    ) {
        let root = RngStream::new(self.cfg.seed);
        let epoch = self.epoch as u64;
        let step = self.global_step as u64;
        let views: Vec<(SkeletonSequence, SkeletonSequence, Option<SkeletonSequence>)> = batch
            .iter()
            .map(|(slot, seq)| {
                let path = |view: u64| {
                    root.substream(&[tags::AUGMENT, epoch, step, *slot as u64, view])
                };
                let s1 = apply_general(seq, &self.topo, &self.general, &mut path(1));
                let s2 = apply_general(seq, &self.topo, &self.general, &mut path(2));
                let s3 = self.cfg.strong_branch.then(|| {
                    apply_strong(seq, &self.topo, &self.general, &self.strong, &mut path(3))
                });
                (s1, s2, s3)
            })
            .collect();
        let refs1: Vec<&SkeletonSequence> = views.iter().map(|(a, _, _)| a).collect();
        let refs2: Vec<&SkeletonSequence> = views.iter().map(|(_, b, _)| b).collect();
        let x1 = crate::cffn::batch_to_input::<R>(&refs1);
        let x2 = crate::cffn::batch_to_input::<R>(&refs2);
        let x3 = if self.cfg.strong_branch {
            let refs3: Vec<&SkeletonSequence> =
                views.iter().map(|(_, _, c)| c.as_ref().expect("strong view")).collect();
            Some(crate::cffn::batch_to_input::<R>(&refs3))
        } else {
            None
        };
        (x1, x2, x3)
    }

    /// Fill the bank from a batch without touching the optimizer; used once
    /// before the first step so InfoNCE always has negatives.
    pub fn warm_start_bank(&mut self, batch: &[(usize, &SkeletonSequence)]) -> Result<()> {
        let (x1, _, _) = self.augment_views(batch);
        let z1 = self.key_embed(&x1);
        self.bank.enqueue_batch(&z1);
        Ok(())
    }

    /// One optimization step over a batch of `(dataset_slot, sequence)` pairs.
    pub fn pretrain_step(&mut self, batch: &[(usize, &SkeletonSequence)]) -> Result<StepReport> {
        if self.bank.is_empty() {
            return Err(Error::EmptyBank);
        }
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let lr = self.cfg.learning_rate(self.epoch);
        self.opt.set_lr(lr);
        let tau = R::fr(self.cfg.tau);
        let bank_matrix = self.bank.as_matrix()?;

        let (x1, x2, x3) = self.augment_views(batch);

        // Key branch: no gradients, batch statistics, no state mutation.
        let z1 = self.key_embed(&x1);

        // Query branch, view 2.
        let (f2, cache2) = self.pair.query.forward_stats(&x2);
        let (z2, pcache2) = self.pair.query.project(&f2);

        let info = infonce_batch_with_grad(&z2, &z1, &bank_matrix, tau)?;
        let alpha = R::fr(self.cfg.alpha);
        let beta = R::fr(self.cfg.beta);

        let mut grads = GradStore::<R>::new();
        let mut commit_caches = Vec::new();

        // InfoNCE path.
        let dz2 = info.dquery.mapv(|v| v * alpha);
        let dfused2 = self.pair.query.project_backward(&pcache2, &dz2, &mut grads);
        self.pair.query.backward(&cache2, &dfused2, &mut grads);
        commit_caches.push(cache2);

        // Strong path.
        let (l_d1, l_d2, l_d) = if let Some(x3) = &x3 {
            let (f3, cache3) = self.pair.query.forward_stats(x3);
            let (z3, pcache3) = self.pair.query.project(&f3);
            let lambda = R::fr(self.pair.query.cfg.simam_lambda);
            let (f3_dropped, drop_mask) = simam_drop(&f3, self.cfg.drop_ratio, lambda);
            let (z3d, pcache3d) = self.pair.query.project(&f3_dropped);

            let ddm = ddm_batch_with_grad(&z1, &z2, &z3, &z3d, &bank_matrix, tau)?;

            let dz3 = ddm.dz3.mapv(|v| v * beta);
            let dz3d = ddm.dz3_dropped.mapv(|v| v * beta);
            let mut dfused3 = self.pair.query.project_backward(&pcache3, &dz3, &mut grads);
            let dfused3d = self.pair.query.project_backward(&pcache3d, &dz3d, &mut grads);
            dfused3 = dfused3 + &(dfused3d * &drop_mask);
            self.pair.query.backward(&cache3, &dfused3, &mut grads);
            commit_caches.push(cache3);
            let (d1, d2) = (ddm.l_d1.to_f64(), ddm.l_d2.to_f64());
            (d1, d2, 0.5 * (d1 + d2))
        } else {
            (0.0, 0.0, 0.0)
        };

        let l_info = info.loss.to_f64();
        let total = self.cfg.alpha * l_info + self.cfg.beta * l_d;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                step: self.global_step,
                detail: format!("l_info={l_info}, l_d={l_d}"),
            });
        }

        self.opt.step(&mut self.pair.query, &grads);
        for cache in &commit_caches {
            self.pair.query.commit_stats(cache);
        }
        self.pair.momentum_update();
        self.bank.enqueue_batch(&z1);

        let report = StepReport {
            epoch: self.epoch,
            step: self.global_step,
            l_info,
            l_d1,
            l_d2,
            l_d,
            total,
            bank_size: self.bank.len(),
            lr,
        };
        self.global_step += 1;
        Ok(report)
    }
}

/// Run the full pretext training loop over the train split.
///
/// The bank is warm-started by pushing the first batch's key embeddings
/// before any optimization. Batches follow a per-epoch seeded shuffle.
pub fn pretrain_run<R: Real>(
    train: &GaitDataset,
    encoder_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    general: &GeneralAugmentSpec,
    strong: &StrongAugmentSpec,
    mut on_step: impl FnMut(&StepReport),
) -> Result<(Trainer<R>, Vec<StepReport>)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    train.validate()?;
    let encoder = Cffn::<R>::new(encoder_cfg.clone(), &train.topology, cfg.seed)?;
    let mut trainer = Trainer::new(
        encoder,
        cfg.clone(),
        train.topology.clone(),
        general.clone(),
        strong.clone(),
    )?;

    let n = train.len();
    let warm: Vec<(usize, &SkeletonSequence)> = (0..n.min(cfg.batch_size))
        .map(|i| (i, &train.sequences[i]))
        .collect();
    trainer.warm_start_bank(&warm)?;

    let shuffle_root = RngStream::new(cfg.seed);
    let mut reports = Vec::new();
    for epoch in 0..cfg.epochs {
        trainer.set_epoch(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        shuffle_root
            .substream(&[tags::SHUFFLE, epoch as u64])
            .shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, &SkeletonSequence)> =
                chunk.iter().map(|&i| (i, &train.sequences[i])).collect();
            let report = trainer.pretrain_step(&batch)?;
            on_step(&report);
            reports.push(report);
        }
    }
    Ok((trainer, reports))
}
