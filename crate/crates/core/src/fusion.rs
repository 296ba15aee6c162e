//! Dual-branch calcification classifier. Two encoders (raw patch and
//! refined patch) each train against their own auxiliary cross-entropy;
//! a fusion head classifies the concatenated pooled features. By default
//! the fusion loss does not reach the encoders.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::imaging::{self, Image};
use crate::manifest::{Label, Manifest, Split};
use crate::metrics;
use crate::nn::checkpoint::{Checkpoint, Section};
use crate::nn::loss::{softmax_columns, softmax_cross_entropy};
use crate::nn::{Adam, AdamConfig, Sequential, SequentialBuilder, Tensor};
use crate::rng;

pub const CLASSES: usize = 2;
pub const RAW_TAG: &str = "encoder-raw";
pub const REFINED_TAG: &str = "encoder-refined";
pub const HEAD_TAG: &str = "fusion-head";

#[derive(Debug, Clone, PartialEq)]
pub struct FusionArch {
    pub size: usize,
    /// Output channels of the 3x3 stride-2 encoder stages; the last is
    /// the deep-feature length.
    pub widths: Vec<usize>,
    pub slope: f32,
    /// Optional hidden layer of the fusion head.
    pub hidden: Option<usize>,
}

impl Default for FusionArch {
    fn default() -> Self {
        FusionArch {
            size: 64,
            widths: vec![8, 16, 32, 64],
            slope: 0.2,
            hidden: None,
        }
    }
}

impl FusionArch {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.size < 2 || self.hidden == Some(0) {
            return Err(Error::invalid(format!("invalid fusion architecture {self:?}")));
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// Convolutional body ending in global average pooling, plus the
/// auxiliary linear classifier on the pooled feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub body: Sequential,
    pub head: Sequential,
}

impl Encoder {
    fn new(arch: &FusionArch, tag: &str, seed: u64) -> Self {
        let mut r = rng::rng(rng::derive_str(seed, tag));
        let mut b = SequentialBuilder::new(format!("{tag}.body"), 1, &mut r);
        for &c in &arch.widths {
            b = b.conv(c, 3, 2, 1).lrelu(arch.slope);
        }
        let body = b.gap().build();
        let head = SequentialBuilder::new(format!("{tag}.head"), arch.feature_len(), &mut r)
            .linear(CLASSES)
            .build();
        Encoder { body, head }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub net: Sequential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub arch: FusionArch,
    pub raw: Encoder,
    pub refined: Encoder,
    pub head: FusionHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub logits_raw: Tensor,
    pub logits_refined: Tensor,
    pub logits_fused: Tensor,
    pub features_raw: Tensor,
    pub features_refined: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub p_calcified: f64,
    pub p_raw: f64,
    pub p_refined: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionLosses {
    pub l_ce1: f64,
    pub l_ce2: f64,
    pub l_ce3: f64,
}

/// Parameter gradients per component.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub raw_body: Vec<f32>,
    pub raw_head: Vec<f32>,
    pub refined_body: Vec<f32>,
    pub refined_head: Vec<f32>,
    pub head: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionSample {
    pub id: String,
    pub raw: Vec<f32>,
    pub refined: Vec<f32>,
    /// 1 = calcified.
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct FusionBatch {
    pub raw: Tensor,
    pub refined: Tensor,
    pub labels: Vec<usize>,
}

impl FusionBatch {
    pub fn new(samples: &[&FusionSample], size: usize) -> Self {
        let raw: Vec<&[f32]> = samples.iter().map(|s| s.raw.as_slice()).collect();
        let refined: Vec<&[f32]> = samples.iter().map(|s| s.refined.as_slice()).collect();
        FusionBatch {
            raw: Tensor::from_images(&raw, size, size),
            refined: Tensor::from_images(&refined, size, size),
            labels: samples.iter().map(|s| s.label).collect(),
        }
    }
}

fn p_class1(logits: &Tensor) -> Vec<f64> {
    softmax_columns(logits).into_iter().map(|p| p[1]).collect()
}

impl FusionModel {
    pub fn new(arch: FusionArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let raw = Encoder::new(&arch, RAW_TAG, seed);
        let refined = Encoder::new(&arch, REFINED_TAG, seed);
        let mut r = rng::rng(rng::derive_str(seed, HEAD_TAG));
        let mut b = SequentialBuilder::new(HEAD_TAG, 2 * arch.feature_len(), &mut r);
        if let Some(h) = arch.hidden {
            b = b.linear(h).lrelu(arch.slope);
        }
        let head = FusionHead {
            net: b.linear(CLASSES).build(),
        };
        Ok(FusionModel {
            arch,
            raw,
            refined,
            head,
        })
    }

    fn check_input(&self, raw: &Tensor, refined: &Tensor) -> Result<()> {
        let s = self.arch.size;
        for t in [raw, refined] {
            if (t.c, t.h, t.w) != (1, s, s) || raw.b != refined.b {
                return Err(Error::Shape {
                    op: "FusionModel::forward",
                    left: format!("1x{s}x{s} inputs, equal batch"),
                    right: format!("{}x{}x{} batch {}", t.c, t.h, t.w, t.b),
                });
            }
        }
        Ok(())
    }

    pub fn forward(&self, raw: &Tensor, refined: &Tensor) -> Result<FusionOutput> {
        self.check_input(raw, refined)?;
        let features_raw = self.raw.body.infer(raw.clone())?;
        let features_refined = self.refined.body.infer(refined.clone())?;
        let logits_raw = self.raw.head.infer(features_raw.clone())?;
        let logits_refined = self.refined.head.infer(features_refined.clone())?;
        let fused = Tensor::concat_channels(&[&features_raw, &features_refined]);
        let logits_fused = self.head.net.infer(fused)?;
        Ok(FusionOutput {
            logits_raw,
            logits_refined,
            logits_fused,
            features_raw,
            features_refined,
        })
    }

    pub fn forward_images(&self, raw: &Image, refined: &Image) -> Result<FusionOutput> {
        let (a, b) = (raw.to_f32(), refined.to_f32());
        let s = self.arch.size;
        if raw.dims() != (s, s) || refined.dims() != (s, s) {
            return Err(Error::Shape {
                op: "FusionModel::forward",
                left: format!("{s}x{s}"),
                right: format!("{}x{} and {}x{}", raw.width(), raw.height(), refined.width(), refined.height()),
            });
        }
        self.forward(&Tensor::from_images(&[&a], s, s), &Tensor::from_images(&[&b], s, s))
    }

    pub fn predict(&self, raw: &Image, refined: &Image) -> Result<Prediction> {
        let out = self.forward_images(raw, refined)?;
        Ok(Prediction {
            p_calcified: p_class1(&out.logits_fused)[0],
            p_raw: p_class1(&out.logits_raw)[0],
            p_refined: p_class1(&out.logits_refined)[0],
        })
    }

    pub fn predict_samples(&self, samples: &[FusionSample]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let refs: Vec<&FusionSample> = chunk.iter().collect();
            let b = FusionBatch::new(&refs, self.arch.size);
            let o = self.forward(&b.raw, &b.refined)?;
            let (f, r, e) = (p_class1(&o.logits_fused), p_class1(&o.logits_raw), p_class1(&o.logits_refined));
            for i in 0..chunk.len() {
                out.push(Prediction {
                    p_calcified: f[i],
                    p_raw: r[i],
                    p_refined: e[i],
                });
            }
        }
        Ok(out)
    }

    pub fn losses(&self, batch: &FusionBatch) -> Result<FusionLosses> {
        let o = self.forward(&batch.raw, &batch.refined)?;
        Ok(FusionLosses {
            l_ce1: softmax_cross_entropy(&o.logits_raw, &batch.labels).0,
            l_ce2: softmax_cross_entropy(&o.logits_refined, &batch.labels).0,
            l_ce3: softmax_cross_entropy(&o.logits_fused, &batch.labels).0,
        })
    }

    /// Losses and gradients. Each encoder receives the gradient of its own
    /// auxiliary loss; with `joint` it also receives the fusion loss
    /// gradient through its features.
    pub fn losses_and_grads(&self, batch: &FusionBatch, joint: bool) -> Result<(FusionLosses, FusionGrads)> {
        self.check_input(&batch.raw, &batch.refined)?;
        let f = self.arch.feature_len();
        let tr_raw = self.raw.body.forward(batch.raw.clone())?;
        let tr_ref = self.refined.body.forward(batch.refined.clone())?;
        let mut g = FusionGrads {
            raw_body: vec![0.0; self.raw.body.num_params()],
            raw_head: vec![0.0; self.raw.head.num_params()],
            refined_body: vec![0.0; self.refined.body.num_params()],
            refined_head: vec![0.0; self.refined.head.num_params()],
            head: vec![0.0; self.head.net.num_params()],
        };

        let aux = |enc: &Encoder, feats: &Tensor, hg: &mut [f32]| -> Result<(f64, Tensor)> {
            let tr = enc.head.forward(feats.clone())?;
            let (l, dlog) = softmax_cross_entropy(tr.output(), &batch.labels);
            let dfeat = enc.head.backward(&tr, dlog, hg, true).expect("input gradient");
            Ok((l, dfeat))
        };
        let (l1, mut dfeat_raw) = aux(&self.raw, tr_raw.output(), &mut g.raw_head)?;
        let (l2, mut dfeat_ref) = aux(&self.refined, tr_ref.output(), &mut g.refined_head)?;

        let fused = Tensor::concat_channels(&[tr_raw.output(), tr_ref.output()]);
        let tr_head = self.head.net.forward(fused)?;
        let (l3, dlog3) = softmax_cross_entropy(tr_head.output(), &batch.labels);
        let dfused = self.head.net.backward(&tr_head, dlog3, &mut g.head, joint);
        if let Some(d) = dfused {
            let parts = d.split_channels(&[f, f]);
            for (acc, add) in [(&mut dfeat_raw, &parts[0]), (&mut dfeat_ref, &parts[1])] {
                for (a, b) in acc.data.iter_mut().zip(&add.data) {
                    *a += b;
                }
            }
        }
        self.raw.body.backward(&tr_raw, dfeat_raw, &mut g.raw_body, false);
        self.refined.body.backward(&tr_ref, dfeat_ref, &mut g.refined_body, false);
        Ok((
            FusionLosses {
                l_ce1: l1,
                l_ce2: l2,
                l_ce3: l3,
            },
            g,
        ))
    }

    pub fn checkpoint(&self, seed: u64, manifest_digest: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(seed, manifest_digest);
        for (tag, enc) in [(RAW_TAG, &self.raw), (REFINED_TAG, &self.refined)] {
            ck.push(Section::from_net(format!("{tag}.body"), &enc.body));
            ck.push(Section::from_net(format!("{tag}.head"), &enc.head));
        }
        ck.push(Section::from_net(HEAD_TAG, &self.head.net));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, arch: FusionArch) -> Result<Self> {
        let mut m = FusionModel::new(arch, ck.seed)?;
        for (tag, enc) in [(RAW_TAG, &mut m.raw), (REFINED_TAG, &mut m.refined)] {
            ck.section(&format!("{tag}.body"))?.restore_net(&mut enc.body)?;
            ck.section(&format!("{tag}.head"))?.restore_net(&mut enc.head)?;
        }
        ck.section(HEAD_TAG)?.restore_net(&mut m.head.net)?;
        Ok(m)
    }
}

/// Load the calcified / non-calcified rows of one split that carry a
/// refined image.
pub fn load_samples(manifest: &Manifest, split: Split, size: usize) -> Result<Vec<FusionSample>> {
    manifest
        .iter_where(split, &[Label::Calcified, Label::NonCalcified])
        .map(|row| {
            let refined = row
                .refined
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("{} has no refined image; run extraction first", row.id)))?;
            let raw = imaging::load(manifest.resolve(&row.image))?;
            let refined = imaging::load(manifest.resolve(refined))?;
            for img in [&raw, &refined] {
                if img.dims() != (size, size) {
                    return Err(Error::Shape {
                        op: "load_samples",
                        left: format!("{size}x{size}"),
                        right: format!("{} is {}x{}", row.id, img.width(), img.height()),
                    });
                }
            }
            Ok(FusionSample {
                id: row.id.clone(),
                raw: raw.to_f32(),
                refined: refined.to_f32(),
                label: row.label.class().expect("nodule label"),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionTrainCfg {
    pub arch: FusionArch,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    /// Let the fusion loss flow into the encoders.
    pub joint: bool,
    pub seed: u64,
}

impl Default for FusionTrainCfg {
    fn default() -> Self {
        FusionTrainCfg {
            arch: FusionArch::default(),
            epochs: 30,
            batch: 32,
            lr: 1e-3,
            joint: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionLogRow {
    pub epoch: usize,
    pub losses: FusionLosses,
    pub val_acc: f64,
    pub val_auc: f64,
    pub val_auc_raw: f64,
    pub val_auc_refined: f64,
}

/// Model state at the epoch where one head had its best validation AUC.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub auc: f64,
    pub model: FusionModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionTraining {
    /// Best fused-head validation AUC.
    pub best: Snapshot,
    pub best_raw: Snapshot,
    pub best_refined: Snapshot,
    pub last: FusionModel,
    pub log: Vec<FusionLogRow>,
}

impl FusionTraining {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,l_ce1,l_ce2,l_ce3,val_acc,val_auc\n");
        for r in &self.log {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch, r.losses.l_ce1, r.losses.l_ce2, r.losses.l_ce3, r.val_acc, r.val_auc
            );
        }
        s
    }

    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.log_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Sample-weighted mean losses over `samples`.
pub fn mean_losses(model: &FusionModel, samples: &[FusionSample]) -> Result<FusionLosses> {
    let mut sum = FusionLosses {
        l_ce1: 0.0,
        l_ce2: 0.0,
        l_ce3: 0.0,
    };
    for chunk in samples.chunks(64) {
        let refs: Vec<&FusionSample> = chunk.iter().collect();
        let l = model.losses(&FusionBatch::new(&refs, model.arch.size))?;
        let w = chunk.len() as f64;
        sum.l_ce1 += l.l_ce1 * w;
        sum.l_ce2 += l.l_ce2 * w;
        sum.l_ce3 += l.l_ce3 * w;
    }
    let n = samples.len().max(1) as f64;
    Ok(FusionLosses {
        l_ce1: sum.l_ce1 / n,
        l_ce2: sum.l_ce2 / n,
        l_ce3: sum.l_ce3 / n,
    })
}

/// Validation AUCs `(fused, raw, refined)` and fused accuracy at 0.5.
pub fn validation_scores(model: &FusionModel, val: &[FusionSample]) -> Result<(f64, f64, f64, f64)> {
    let preds = model.predict_samples(val)?;
    let scored = |f: fn(&Prediction) -> f64| -> Vec<(f64, bool)> {
        preds.iter().zip(val).map(|(p, s)| (f(p), s.label == 1)).collect()
    };
    let fused = metrics::evaluate(&scored(|p| p.p_calcified))?;
    let auc = |r: metrics::EvalReport| {
        r.auc
            .ok_or_else(|| Error::invalid("validation split needs both calcified and non-calcified samples"))
    };
    let acc = fused.accuracy;
    Ok((
        auc(fused)?,
        auc(metrics::evaluate(&scored(|p| p.p_raw))?)?,
        auc(metrics::evaluate(&scored(|p| p.p_refined))?)?,
        acc,
    ))
}

struct Optimizers {
    raw_body: Adam,
    raw_head: Adam,
    refined_body: Adam,
    refined_head: Adam,
    head: Adam,
}

impl Optimizers {
    fn new(m: &FusionModel, cfg: AdamConfig) -> Self {
        Optimizers {
            raw_body: Adam::new(m.raw.body.num_params(), cfg),
            raw_head: Adam::new(m.raw.head.num_params(), cfg),
            refined_body: Adam::new(m.refined.body.num_params(), cfg),
            refined_head: Adam::new(m.refined.head.num_params(), cfg),
            head: Adam::new(m.head.net.num_params(), cfg),
        }
    }

    fn step(&mut self, m: &mut FusionModel, g: &FusionGrads) {
        self.raw_body.step(m.raw.body.params_mut().data_mut(), &g.raw_body);
        self.raw_head.step(m.raw.head.params_mut().data_mut(), &g.raw_head);
        self.refined_body.step(m.refined.body.params_mut().data_mut(), &g.refined_body);
        self.refined_head.step(m.refined.head.params_mut().data_mut(), &g.refined_head);
        self.head.step(m.head.net.params_mut().data_mut(), &g.head);
    }
}

/// One optimizer step on `batch`; returns the losses before the update.
pub fn train_step(model: &mut FusionModel, opt: &mut FusionOptimizer, batch: &FusionBatch, joint: bool) -> Result<FusionLosses> {
    let (l, g) = model.losses_and_grads(batch, joint)?;
    opt.0.step(model, &g);
    Ok(l)
}

/// Adam state for every component of a [`FusionModel`].
pub struct FusionOptimizer(Optimizers);

impl FusionOptimizer {
    pub fn new(model: &FusionModel, lr: f32) -> Self {
        FusionOptimizer(Optimizers::new(
            model,
            AdamConfig {
                lr,
                ..AdamConfig::default()
            },
        ))
    }
}

fn check_finite(l: &FusionLosses, at: impl Fn() -> String) -> Result<()> {
    for (name, v) in [("l_ce1", l.l_ce1), ("l_ce2", l.l_ce2), ("l_ce3", l.l_ce3)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: name.into(),
                at: at(),
            });
        }
    }
    Ok(())
}

pub fn train_fusion(train: &[FusionSample], val: &[FusionSample], cfg: &FusionTrainCfg) -> Result<FusionTraining> {
    cfg.arch.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("fusion training needs non-empty train and validation sets"));
    }
    if cfg.batch == 0 || cfg.epochs == 0 || !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::invalid("fusion batch, epochs and lr must be positive"));
    }
    let mut model = FusionModel::new(cfg.arch.clone(), cfg.seed)?;
    let mut opt = FusionOptimizer::new(&model, cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<Snapshot> = None;
    let mut best_raw: Option<Snapshot> = None;
    let mut best_refined: Option<Snapshot> = None;
    let keep = |slot: &mut Option<Snapshot>, epoch: usize, auc: f64, m: &FusionModel| {
        if slot.as_ref().is_none_or(|s| auc > s.auc) {
            *slot = Some(Snapshot {
                epoch,
                auc,
                model: m.clone(),
            });
        }
    };
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng::rng(rng::derive(rng::derive_str(cfg.seed, "fusion-order"), epoch as u64)));
        let mut sum = FusionLosses {
            l_ce1: 0.0,
            l_ce2: 0.0,
            l_ce3: 0.0,
        };
        let mut steps = 0;
        for (step, idx) in order.chunks(cfg.batch).enumerate() {
            let refs: Vec<&FusionSample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = FusionBatch::new(&refs, cfg.arch.size);
            let l = train_step(&mut model, &mut opt, &batch, cfg.joint)?;
            check_finite(&l, || format!("epoch {epoch} step {step}"))?;
            sum.l_ce1 += l.l_ce1;
            sum.l_ce2 += l.l_ce2;
            sum.l_ce3 += l.l_ce3;
            steps += 1;
        }
        let n = steps as f64;
        check_finite(&mean_losses(&model, val)?, || format!("epoch {epoch} validation"))?;
        let (auc, auc_raw, auc_ref, acc) = validation_scores(&model, val)?;
        log.push(FusionLogRow {
            epoch,
            losses: FusionLosses {
                l_ce1: sum.l_ce1 / n,
                l_ce2: sum.l_ce2 / n,
                l_ce3: sum.l_ce3 / n,
            },
            val_acc: acc,
            val_auc: auc,
            val_auc_raw: auc_raw,
            val_auc_refined: auc_ref,
        });
        keep(&mut best, epoch, auc, &model);
        keep(&mut best_raw, epoch, auc_raw, &model);
        keep(&mut best_refined, epoch, auc_ref, &model);
    }
    Ok(FusionTraining {
        best: best.expect("at least one epoch"),
        best_raw: best_raw.expect("at least one epoch"),
        best_refined: best_refined.expect("at least one epoch"),
        last: model,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{self, GradCheckCfg};
    use rand::Rng;

    fn tiny() -> FusionArch {
        FusionArch {
            size: 8,
            widths: vec![3, 4],
            slope: 0.2,
            hidden: Some(5),
        }
    }

    fn samples(n: usize, size: usize, seed: u64) -> Vec<FusionSample> {
        let mut r = rng::rng(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let raw = (0..size * size).map(|_| r.random_range(0.0..1.0) * (0.5 + 0.3 * label as f32)).collect();
                let refined = (0..size * size).map(|_| r.random_range(0.0..0.2) * (1.0 + label as f32)).collect();
                FusionSample {
                    id: format!("s{i}"),
                    raw,
                    refined,
                    label,
                }
            })
            .collect()
    }

    fn batch(s: &[FusionSample], size: usize) -> FusionBatch {
        let refs: Vec<&FusionSample> = s.iter().collect();
        FusionBatch::new(&refs, size)
    }

    #[test]
    fn zero_head_gives_even_odds() {
        let mut m = FusionModel::new(FusionArch::default(), 1).unwrap();
        m.head.net.params_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let s = samples(1, 64, 2);
        let img = Image::new(64, 64, s[0].raw.iter().map(|&v| v as f64).collect()).unwrap();
        let o = m.forward_images(&img, &img).unwrap();
        assert_eq!(o.logits_fused.data, vec![0.0, 0.0]);
        assert_eq!(m.predict(&img, &img).unwrap().p_calcified, 0.5);
        let feat = o.features_raw.c + o.features_refined.c;
        assert_eq!((o.features_raw.c, feat), (64, 128));
    }

    #[test]
    fn duplicated_branch_gives_identical_logits() {
        let mut m = FusionModel::new(tiny(), 3).unwrap();
        m.refined.body = m.raw.body.clone();
        m.refined.head = m.raw.head.clone();
        let b = batch(&samples(4, 8, 1), 8);
        let o = m.forward(&b.raw, &b.raw).unwrap();
        assert_eq!(o.logits_raw, o.logits_refined);
        assert!(m.forward(&b.raw, &Tensor::zeros(1, 4, 9, 9)).is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = FusionModel::new(tiny(), 3).unwrap();
        for p in m.predict_samples(&samples(7, 8, 4)).unwrap() {
            for q in [p.p_calcified, p.p_raw, p.p_refined] {
                assert!((0.0..=1.0).contains(&q));
            }
        }
        let b = batch(&samples(3, 8, 4), 8);
        let o = m.forward(&b.raw, &b.refined).unwrap();
        for col in softmax_columns(&o.logits_fused) {
            assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    fn check_component(
        m: &FusionModel,
        b: &FusionBatch,
        grads: &[f32],
        pick: fn(&mut FusionModel) -> &mut Sequential,
        loss: fn(&FusionLosses) -> f64,
        seed: u64,
    ) {
        let mut probe = m.clone();
        let mut params = pick(&mut probe).params().data().to_vec();
        let cfg = GradCheckCfg {
            want: 4,
            min_abs_grad: 1e-3,
            step: 1e-2,
        };
        let r = gradcheck::check(&mut params, grads, gradcheck::shuffled_indices(grads.len(), seed), cfg, |p| {
            pick(&mut probe).params_mut().load_flat(p);
            loss(&probe.losses(b).unwrap())
        });
        assert_eq!(r.checked.len(), 4, "{r:?}");
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }

    #[test]
    fn all_three_losses_match_finite_differences() {
        let m = FusionModel::new(tiny(), 5).unwrap();
        let b = batch(&samples(6, 8, 9), 8);
        let (_, g) = m.losses_and_grads(&b, false).unwrap();
        check_component(&m, &b, &g.raw_body, |m| &mut m.raw.body, |l| l.l_ce1, 1);
        check_component(&m, &b, &g.raw_head, |m| &mut m.raw.head, |l| l.l_ce1, 2);
        check_component(&m, &b, &g.refined_body, |m| &mut m.refined.body, |l| l.l_ce2, 3);
        check_component(&m, &b, &g.refined_head, |m| &mut m.refined.head, |l| l.l_ce2, 4);
        check_component(&m, &b, &g.head, |m| &mut m.head.net, |l| l.l_ce3, 5);

        let (_, j) = m.losses_and_grads(&b, true).unwrap();
        check_component(&m, &b, &j.raw_body, |m| &mut m.raw.body, |l| l.l_ce1 + l.l_ce3, 6);
        check_component(&m, &b, &j.refined_body, |m| &mut m.refined.body, |l| l.l_ce2 + l.l_ce3, 7);
    }

    #[test]
    fn fusion_gradient_path_does_not_touch_encoders() {
        let m = FusionModel::new(tiny(), 8).unwrap();
        let b = batch(&samples(6, 8, 3), 8);
        let mut silenced = m.clone();
        silenced.head.net.params_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);

        let mut a = m.clone();
        let mut c = silenced.clone();
        let mut oa = FusionOptimizer::new(&a, 1e-3);
        let mut oc = FusionOptimizer::new(&c, 1e-3);
        train_step(&mut a, &mut oa, &b, false).unwrap();
        train_step(&mut c, &mut oc, &b, false).unwrap();
        assert_eq!(a.raw, c.raw);
        assert_eq!(a.refined, c.refined);

        let (_, ga) = m.losses_and_grads(&b, true).unwrap();
        let (_, gc) = silenced.losses_and_grads(&b, true).unwrap();
        assert_ne!(ga.raw_body, gc.raw_body);
    }

    #[test]
    fn single_sample_is_memorized() {
        let s = samples(1, 8, 11);
        let b = batch(&s, 8);
        let mut m = FusionModel::new(tiny(), 1).unwrap();
        let mut opt = FusionOptimizer::new(&m, 1e-2);
        let first = m.losses(&b).unwrap().l_ce3;
        for _ in 0..300 {
            train_step(&mut m, &mut opt, &b, false).unwrap();
        }
        let last = m.losses(&b).unwrap();
        assert!(last.l_ce3 < 1e-2 && last.l_ce3 < first, "{first} -> {last:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = FusionModel::new(tiny(), 4).unwrap();
        let ck = Checkpoint::from_bytes(&m.checkpoint(4, "d").to_bytes()).unwrap();
        assert_eq!(FusionModel::from_checkpoint(&ck, tiny()).unwrap(), m);
        assert!(FusionModel::from_checkpoint(&ck, FusionArch::default()).is_err());
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let train = samples(40, 8, 1);
        let val = samples(20, 8, 2);
        let cfg = FusionTrainCfg {
            arch: tiny(),
            epochs: 3,
            batch: 8,
            ..Default::default()
        };
        let a = train_fusion(&train, &val, &cfg).unwrap();
        let b = train_fusion(&train, &val, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log.len(), 3);
        let csv = a.log_csv();
        assert!(csv.starts_with("epoch,l_ce1,l_ce2,l_ce3,val_acc,val_auc\n"));
        let best = a.log.iter().map(|r| r.val_auc).fold(f64::MIN, f64::max);
        assert_eq!(a.best.auc, best);
        let one_class: Vec<FusionSample> = val.iter().filter(|s| s.label == 1).cloned().collect();
        assert!(train_fusion(&train, &one_class, &cfg).is_err());
    }
}
