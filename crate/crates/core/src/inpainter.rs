//! Structure-suppressing inpainter: a context-encoder style generator
//! trained adversarially on lesion-free patches, and a classical harmonic
//! fill used when no trained model is wanted.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::{psnr_from_mse, Image, Mask};
use crate::manifest::{Label, Manifest, Split};
use crate::nn::checkpoint::{Checkpoint, Section};
use crate::nn::loss::bce_with_logits;
use crate::nn::{Adam, AdamConfig, Sequential, SequentialBuilder, Tensor, Trace};
use crate::rng;

/// Side length of a square hole covering `fraction` of a `w x h` image.
pub fn hole_side(w: usize, h: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "mask fraction must lie in (0,1), got {fraction}"
        )));
    }
    let side = (fraction * (w * h) as f64).sqrt().round() as usize;
    if side < 1 || side > w.min(h) {
        return Err(Error::invalid(format!(
            "mask fraction {fraction} gives hole side {side} for {w}x{h}"
        )));
    }
    Ok(side)
}

/// Zero a randomly placed square hole of area `fraction` of the image.
pub fn mask_region(img: &Image, fraction: f64, rng: &mut impl Rng) -> Result<(Image, Mask)> {
    let (w, h) = img.dims();
    let side = hole_side(w, h, fraction)?;
    let x0 = rng.random_range(0..=w - side);
    let y0 = rng.random_range(0..=h - side);
    let hole = Mask::rect(w, h, x0, y0, side, side);
    Ok((apply_hole(img, &hole), hole))
}

/// The centred square hole used at extraction time.
pub fn central_hole(w: usize, h: usize, fraction: f64) -> Result<Mask> {
    let side = hole_side(w, h, fraction)?;
    Ok(Mask::rect(w, h, (w - side) / 2, (h - side) / 2, side, side))
}

/// Image with hole pixels set to zero.
pub fn apply_hole(img: &Image, hole: &Mask) -> Image {
    let data = img
        .data()
        .iter()
        .zip(hole.bits())
        .map(|(&v, &m)| if m { 0.0 } else { v })
        .collect();
    Image::new(img.width(), img.height(), data).expect("same dims")
}

/// `original` outside the hole, `prediction` inside it.
pub fn compose(original: &Image, prediction: &Image, hole: &Mask) -> Result<Image> {
    original.check_same(prediction.dims(), "compose")?;
    original.check_same(hole.dims(), "compose")?;
    let data = original
        .data()
        .iter()
        .zip(prediction.data())
        .zip(hole.bits())
        .map(|((&o, &p), &m)| if m { p } else { o })
        .collect();
    Image::new(original.width(), original.height(), data)
}

pub const HARMONIC_TOLERANCE: f64 = 1e-5;
pub const HARMONIC_MAX_ITERS: usize = 20_000;

/// Harmonic hole fill. Hole pixels start from the mean of the row-wise
/// and column-wise linear interpolants between the nearest known pixels,
/// then are relaxed in place towards their 4-neighbour mean until the
/// largest per-sweep change drops below [`HARMONIC_TOLERANCE`].
/// Neighbours outside the image replicate the edge.
pub fn classical_inpaint(img: &Image, hole: &Mask) -> Result<Image> {
    img.check_same(hole.dims(), "classical_inpaint")?;
    let (w, h) = img.dims();
    let n_hole = hole.count();
    if n_hole == w * h {
        return Err(Error::invalid("hole covers the entire image"));
    }
    if n_hole == 0 {
        return Ok(img.clone());
    }
    let mut v = img.data().to_vec();
    let known = |x: usize, y: usize| !hole.get(x, y);

    let mut init = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            if known(x, y) {
                continue;
            }
            let mut acc = 0.0;
            let mut n = 0.0;
            let left = (0..x).rev().find(|&i| known(i, y));
            let right = (x + 1..w).find(|&i| known(i, y));
            if let Some(e) = interp(left, right, x, |i| v[y * w + i]) {
                acc += e;
                n += 1.0;
            }
            let up = (0..y).rev().find(|&j| known(x, j));
            let down = (y + 1..h).find(|&j| known(x, j));
            if let Some(e) = interp(up, down, y, |j| v[j * w + x]) {
                acc += e;
                n += 1.0;
            }
            init[y * w + x] = if n > 0.0 { acc / n } else { 0.0 };
        }
    }
    for i in 0..w * h {
        if hole.bits()[i] {
            v[i] = init[i];
        }
    }

    let idx: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| hole.get(x, y))
        .collect();
    for _ in 0..HARMONIC_MAX_ITERS {
        let mut max_change: f64 = 0.0;
        for &(x, y) in &idx {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            let yu = y.saturating_sub(1);
            let yd = (y + 1).min(h - 1);
            let mean = 0.25 * (v[y * w + xl] + v[y * w + xr] + v[yu * w + x] + v[yd * w + x]);
            let i = y * w + x;
            max_change = max_change.max((mean - v[i]).abs());
            v[i] = mean;
        }
        if max_change < HARMONIC_TOLERANCE {
            break;
        }
    }
    Image::from_clamped(w, h, v)
}

fn interp(a: Option<usize>, b: Option<usize>, at: usize, val: impl Fn(usize) -> f64) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) => {
            let t = (at - a) as f64 / (b - a) as f64;
            Some(val(a) * (1.0 - t) + val(b) * t)
        }
        (Some(a), None) => Some(val(a)),
        (None, Some(b)) => Some(val(b)),
        (None, None) => None,
    }
}

/// Channel schedule of the generator and discriminator.
///
/// The generator has one 4x4 stride-2 convolution per `down` entry and
/// one 4x4 stride-2 transposed convolution per `up` entry; the last `up`
/// width must be 1. When there are fewer up stages than down stages the
/// decoder output is brought back to full size by fixed bilinear
/// upsampling. The discriminator has one 4x4 stride-2 convolution per
/// `disc` entry (last width 1) followed by global average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintArch {
    pub size: usize,
    pub down: Vec<usize>,
    pub up: Vec<usize>,
    pub disc: Vec<usize>,
    pub slope: f32,
}

impl Default for InpaintArch {
    fn default() -> Self {
        InpaintArch {
            size: 64,
            down: vec![16, 32, 64, 64, 96, 96],
            up: vec![64, 64, 32, 16, 1],
            disc: vec![8, 16, 32, 64, 1],
            slope: 0.2,
        }
    }
}

impl InpaintArch {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(format!("inpainter architecture: {m}")));
        if self.down.is_empty() || self.up.is_empty() || self.disc.is_empty() {
            return fail("down, up and disc schedules must be non-empty");
        }
        if self.up.len() > self.down.len() {
            return fail("more up stages than down stages");
        }
        if self.up.last() != Some(&1) || self.disc.last() != Some(&1) {
            return fail("the last up and disc widths must be 1");
        }
        if self.down.iter().chain(&self.up).chain(&self.disc).any(|&c| c == 0) {
            return fail("zero channel width");
        }
        let stages = self.down.len().max(self.disc.len()) as u32;
        if self.size == 0 || !self.size.is_multiple_of(1usize << stages) {
            return fail(&format!("size {} not divisible by 2^{stages}", self.size));
        }
        if !(self.slope >= 0.0 && self.slope < 1.0) {
            return fail("leaky slope must lie in [0,1)");
        }
        Ok(())
    }

    pub fn generator(&self, rng: &mut impl Rng) -> Sequential {
        let mut b = SequentialBuilder::new("inpainter", 2, rng);
        for &c in &self.down {
            b = b.conv(c, 4, 2, 1).lrelu(self.slope);
        }
        for (i, &c) in self.up.iter().enumerate() {
            b = b.deconv(c, 4, 2, 1);
            if i + 1 < self.up.len() {
                b = b.lrelu(self.slope);
            }
        }
        b.upsample(1 << (self.down.len() - self.up.len())).sigmoid().build()
    }

    pub fn discriminator(&self, rng: &mut impl Rng) -> Sequential {
        let mut b = SequentialBuilder::new("discriminator", 1, rng);
        for (i, &c) in self.disc.iter().enumerate() {
            b = b.conv(c, 4, 2, 1);
            if i + 1 < self.disc.len() {
                b = b.lrelu(self.slope);
            }
        }
        b.gap().build()
    }
}

/// Generator network. Input channels are the hole-zeroed image and the
/// hole indicator; the output is a full-size image in (0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintNet {
    pub arch: InpaintArch,
    pub net: Sequential,
}

impl InpaintNet {
    pub fn new(arch: InpaintArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let net = arch.generator(&mut rng::rng(rng::derive_str(seed, "inpainter-init")));
        Ok(InpaintNet { arch, net })
    }

    /// Network prediction for one image and hole (no composition).
    pub fn predict(&self, img: &Image, hole: &Mask) -> Result<Image> {
        let batch = InpaintBatch::new(&[img], std::slice::from_ref(hole))?;
        let out = self.net.infer(batch.input)?;
        let data = out.data.iter().map(|&v| v as f64).collect();
        Image::from_clamped(img.width(), img.height(), data)
    }

    /// Prediction composed with the original outside the hole.
    pub fn inpaint(&self, img: &Image, hole: &Mask) -> Result<Image> {
        if img.dims() != (self.arch.size, self.arch.size) {
            return Err(Error::Shape {
                op: "InpaintNet::inpaint",
                left: format!("{0}x{0} model", self.arch.size),
                right: format!("{}x{} image", img.width(), img.height()),
            });
        }
        compose(img, &self.predict(img, hole)?, hole)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub net: Sequential,
}

impl Discriminator {
    pub fn new(arch: &InpaintArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let net = arch.discriminator(&mut rng::rng(rng::derive_str(seed, "discriminator-init")));
        Ok(Discriminator { net })
    }

    /// One real/fake logit per image of a `1 x B x H x W` batch.
    pub fn logits(&self, images: Tensor) -> Result<Vec<f32>> {
        Ok(self.net.infer(images)?.data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InpaintLossWeights {
    pub lambda_rec: f64,
    pub lambda_adv: f64,
}

impl Default for InpaintLossWeights {
    fn default() -> Self {
        InpaintLossWeights {
            lambda_rec: 0.999,
            lambda_adv: 0.001,
        }
    }
}

impl InpaintLossWeights {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(lambda_rec: f64, lambda_adv: f64) -> Result<Self> {
        let w = InpaintLossWeights {
            lambda_rec,
            lambda_adv,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_rec.is_finite()
            && self.lambda_adv.is_finite()
            && self.lambda_rec >= 0.0
            && self.lambda_adv >= 0.0
            && (self.lambda_rec + self.lambda_adv - 1.0).abs() <= Self::SUM_TOLERANCE;
        if !ok {
            return Err(Error::invalid(format!(
                "loss weights must be non-negative and sum to 1, got lambda_rec={} lambda_adv={}",
                self.lambda_rec, self.lambda_adv
            )));
        }
        Ok(())
    }

    pub fn combine(&self, l_rec: f64, l_adv: f64) -> f64 {
        self.lambda_rec * l_rec + self.lambda_adv * l_adv
    }
}

/// Pixels over which the reconstruction term is averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecDomain {
    #[default]
    Hole,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InpaintLoss {
    pub l_rec: f64,
    pub l_adv: f64,
    pub total: f64,
}

/// Generator loss for a single image: reconstruction MSE over the hole
/// plus the non-saturating adversarial term `softplus(-d_logit)`.
pub fn inpaint_loss(pred: &Image, target: &Image, hole: &Mask, d_logit: f64, w: InpaintLossWeights) -> Result<InpaintLoss> {
    w.validate()?;
    pred.check_same(target.dims(), "inpaint_loss")?;
    pred.check_same(hole.dims(), "inpaint_loss")?;
    if hole.is_empty() {
        return Err(Error::invalid("inpaint_loss: empty hole mask"));
    }
    let sq: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(hole.bits())
        .filter(|(_, &m)| m)
        .map(|((&p, &t), _)| (p - t) * (p - t))
        .sum();
    let l_rec = sq / hole.count() as f64;
    let l_adv = crate::nn::loss::softplus(-d_logit);
    Ok(InpaintLoss {
        l_rec,
        l_adv,
        total: w.combine(l_rec, l_adv),
    })
}

/// Training batch: network input, clean target and hole indicator.
#[derive(Debug, Clone)]
pub struct InpaintBatch {
    pub input: Tensor,
    pub target: Tensor,
    pub hole: Tensor,
}

impl InpaintBatch {
    pub fn new(targets: &[&Image], holes: &[Mask]) -> Result<Self> {
        if targets.is_empty() || targets.len() != holes.len() {
            return Err(Error::invalid("batch needs one hole per image"));
        }
        let (w, h) = targets[0].dims();
        let b = targets.len();
        let mut target = Tensor::zeros(1, b, h, w);
        let mut hole = Tensor::zeros(1, b, h, w);
        let mut input = Tensor::zeros(2, b, h, w);
        let plane = w * h;
        for (i, (img, m)) in targets.iter().zip(holes).enumerate() {
            img.check_same((w, h), "InpaintBatch")?;
            img.check_same(m.dims(), "InpaintBatch")?;
            for (j, (&v, &bit)) in img.data().iter().zip(m.bits()).enumerate() {
                let k = i * plane + j;
                target.data[k] = v as f32;
                hole.data[k] = bit as u8 as f32;
                input.data[k] = if bit { 0.0 } else { v as f32 };
                input.data[(b + i) * plane + j] = bit as u8 as f32;
            }
        }
        Ok(InpaintBatch { input, target, hole })
    }

    fn compose(&self, pred: &Tensor) -> Tensor {
        let data = pred
            .data
            .iter()
            .zip(&self.target.data)
            .zip(&self.hole.data)
            .map(|((&p, &t), &m)| if m > 0.5 { p } else { t })
            .collect();
        Tensor::from_data(1, pred.b, pred.h, pred.w, data)
    }
}

/// Batch generator loss and `d loss / d pred`.
fn generator_objective(
    pred: &Tensor,
    batch: &InpaintBatch,
    disc: Option<&Discriminator>,
    w: InpaintLossWeights,
    domain: RecDomain,
) -> Result<(InpaintLoss, Tensor)> {
    let mut grad = Tensor::zeros(1, pred.b, pred.h, pred.w);
    let mut sq = 0.0f64;
    let mut count = 0.0f64;
    for (i, (&p, &t)) in pred.data.iter().zip(&batch.target.data).enumerate() {
        let m = match domain {
            RecDomain::Hole => batch.hole.data[i],
            RecDomain::Full => 1.0,
        };
        if m > 0.0 {
            let d = (p - t) as f64;
            sq += d * d;
            count += 1.0;
        }
    }
    if count == 0.0 {
        return Err(Error::invalid("reconstruction domain is empty"));
    }
    let l_rec = sq / count;
    let scale = 2.0 * w.lambda_rec / count;
    for (i, g) in grad.data.iter_mut().enumerate() {
        let m = match domain {
            RecDomain::Hole => batch.hole.data[i],
            RecDomain::Full => 1.0,
        };
        if m > 0.0 {
            *g = (scale * (pred.data[i] - batch.target.data[i]) as f64) as f32;
        }
    }
    let mut l_adv = 0.0;
    if let Some(d) = disc.filter(|_| w.lambda_adv > 0.0) {
        let composed = batch.compose(pred);
        let trace = d.net.forward(composed)?;
        let (loss, dlogit) = bce_with_logits(&trace.output().data, true);
        l_adv = loss;
        let dlogit: Vec<f32> = dlogit.iter().map(|&g| (g as f64 * w.lambda_adv) as f32).collect();
        let mut scratch = vec![0.0; d.net.num_params()];
        let dimg = d
            .net
            .backward(&trace, Tensor::from_data(1, pred.b, 1, 1, dlogit), &mut scratch, true)
            .expect("input gradient");
        for ((g, &dv), &m) in grad.data.iter_mut().zip(&dimg.data).zip(&batch.hole.data) {
            if m > 0.5 {
                *g += dv;
            }
        }
    }
    Ok((
        InpaintLoss {
            l_rec,
            l_adv,
            total: w.combine(l_rec, l_adv),
        },
        grad,
    ))
}

/// Generator loss on a batch together with its gradient with respect to
/// the generator parameters.
pub fn generator_loss_and_grad(
    gen: &InpaintNet,
    disc: Option<&Discriminator>,
    batch: &InpaintBatch,
    w: InpaintLossWeights,
    domain: RecDomain,
) -> Result<(InpaintLoss, Vec<f32>)> {
    let trace = gen.net.forward(batch.input.clone())?;
    let (loss, dpred) = generator_objective(trace.output(), batch, disc, w, domain)?;
    let mut grads = vec![0.0; gen.net.num_params()];
    gen.net.backward(&trace, dpred, &mut grads, false);
    Ok((loss, grads))
}

/// Generator loss only (used for finite-difference checks).
pub fn generator_loss(
    gen: &InpaintNet,
    disc: Option<&Discriminator>,
    batch: &InpaintBatch,
    w: InpaintLossWeights,
    domain: RecDomain,
) -> Result<InpaintLoss> {
    let pred = gen.net.infer(batch.input.clone())?;
    Ok(generator_objective(&pred, batch, disc, w, domain)?.0)
}

/// Discriminator loss `softplus(-D(real)) + softplus(D(fake))` (batch
/// means) and its parameter gradient.
fn discriminator_step_grads(d: &Discriminator, real: Tensor, fake: Tensor) -> Result<(f64, Vec<f32>)> {
    let mut grads = vec![0.0; d.net.num_params()];
    let mut total = 0.0;
    for (x, is_real) in [(real, true), (fake, false)] {
        let b = x.b;
        let trace: Trace = d.net.forward(x)?;
        let (l, g) = bce_with_logits(&trace.output().data, is_real);
        total += l;
        d.net.backward(&trace, Tensor::from_data(1, b, 1, 1, g), &mut grads, false);
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintTrainCfg {
    pub arch: InpaintArch,
    pub weights: InpaintLossWeights,
    pub rec_domain: RecDomain,
    pub mask_fraction: f64,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f32,
    pub beta1: f32,
    /// Validate every `val_every` iterations (and at 0 and the end).
    pub val_every: usize,
    /// At most this many held-out normals are used for validation.
    pub val_limit: usize,
    pub seed: u64,
}

impl Default for InpaintTrainCfg {
    fn default() -> Self {
        InpaintTrainCfg {
            arch: InpaintArch::default(),
            weights: InpaintLossWeights::default(),
            rec_domain: RecDomain::Hole,
            mask_fraction: 0.2,
            iterations: 2000,
            batch: 16,
            lr: 2e-4,
            beta1: 0.5,
            val_every: 100,
            val_limit: 64,
            seed: 0,
        }
    }
}

impl InpaintTrainCfg {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.weights.validate()?;
        hole_side(self.arch.size, self.arch.size, self.mask_fraction)?;
        if self.batch == 0 || self.val_every == 0 || self.val_limit == 0 {
            return Err(Error::invalid("batch, val_every and val_limit must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::invalid("inpainter optimizer settings out of range"));
        }
        Ok(())
    }
}

/// One line of the training log. Loss columns are absent for the
/// pre-training row; validation columns are present only on evaluation
/// iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintLogRow {
    pub iteration: usize,
    pub loss: Option<InpaintLoss>,
    pub val_mse: Option<f64>,
    pub val_psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedInpainter {
    pub generator: InpaintNet,
    pub discriminator: Discriminator,
    pub log: Vec<InpaintLogRow>,
}

impl TrainedInpainter {
    /// `(iteration, val_mse, val_psnr)` for every evaluation.
    pub fn validation_curve(&self) -> Vec<(usize, f64, f64)> {
        self.log
            .iter()
            .filter_map(|r| Some((r.iteration, r.val_mse?, r.val_psnr?)))
            .collect()
    }

    pub fn log_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("iteration,l_rec,l_adv,l_inpaint,val_mse,val_psnr\n");
        for r in &self.log {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.iteration,
                opt(r.loss.map(|l| l.l_rec)),
                opt(r.loss.map(|l| l.l_adv)),
                opt(r.loss.map(|l| l.total)),
                opt(r.val_mse),
                opt(r.val_psnr)
            );
        }
        s
    }

    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.log_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn checkpoint(&self, seed: u64, manifest_digest: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(seed, manifest_digest);
        ck.push(Section::from_net(INPAINTER_TAG, &self.generator.net));
        ck.push(Section::from_net(DISCRIMINATOR_TAG, &self.discriminator.net));
        ck
    }
}

pub const INPAINTER_TAG: &str = "inpainter";
pub const DISCRIMINATOR_TAG: &str = "discriminator";

/// Rebuild a generator of architecture `arch` from a checkpoint.
pub fn load_generator(ck: &Checkpoint, arch: &InpaintArch) -> Result<InpaintNet> {
    let mut gen = InpaintNet::new(arch.clone(), ck.seed)?;
    ck.section(INPAINTER_TAG)?.restore_net(&mut gen.net)?;
    Ok(gen)
}

fn load_normals(manifest: &Manifest, split: Split, size: usize) -> Result<Vec<(String, Image)>> {
    manifest
        .iter_where(split, &[Label::Normal])
        .map(|row| {
            let img = crate::imaging::load(manifest.resolve(&row.image))?;
            if img.dims() != (size, size) {
                return Err(Error::Shape {
                    op: "train_inpainter",
                    left: format!("{size}x{size} model input"),
                    right: format!("{} is {}x{}", row.id, img.width(), img.height()),
                });
            }
            Ok((row.id.clone(), img))
        })
        .collect()
}

/// Fixed validation holes: one per image, placed by a per-id seed.
fn validation_set(images: &[(String, Image)], cfg: &InpaintTrainCfg) -> Result<Vec<(Image, Mask)>> {
    images
        .iter()
        .take(cfg.val_limit)
        .map(|(id, img)| {
            let mut r = rng::rng(rng::derive_str(cfg.seed, &format!("val-hole/{id}")));
            let (_, hole) = mask_region(img, cfg.mask_fraction, &mut r)?;
            Ok((img.clone(), hole))
        })
        .collect()
}

/// Hole-region MSE aggregated over all validation pixels.
pub fn hole_mse(gen: &InpaintNet, set: &[(Image, Mask)]) -> Result<f64> {
    let mut sq = 0.0;
    let mut n = 0usize;
    for chunk in set.chunks(32) {
        let imgs: Vec<&Image> = chunk.iter().map(|(i, _)| i).collect();
        let holes: Vec<Mask> = chunk.iter().map(|(_, m)| m.clone()).collect();
        let batch = InpaintBatch::new(&imgs, &holes)?;
        let pred = gen.net.infer(batch.input.clone())?;
        for ((&p, &t), &m) in pred.data.iter().zip(&batch.target.data).zip(&batch.hole.data) {
            if m > 0.5 {
                let d = p as f64 - t as f64;
                sq += d * d;
                n += 1;
            }
        }
    }
    Ok(sq / n as f64)
}

/// Train the generator and discriminator on the manifest's normal
/// training patches. Validation uses the normal validation split (or the
/// training normals when that split is empty).
pub fn train_inpainter(manifest: &Manifest, cfg: &InpaintTrainCfg) -> Result<TrainedInpainter> {
    cfg.validate()?;
    let train = load_normals(manifest, Split::Train, cfg.arch.size)?;
    if train.is_empty() {
        return Err(Error::invalid("train_inpainter: no normal training samples"));
    }
    let held = load_normals(manifest, Split::Val, cfg.arch.size)?;
    let val = validation_set(if held.is_empty() { &train } else { &held }, cfg)?;

    let mut gen = InpaintNet::new(cfg.arch.clone(), cfg.seed)?;
    let mut disc = Discriminator::new(&cfg.arch, cfg.seed)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        ..AdamConfig::default()
    };
    let mut opt_g = Adam::new(gen.net.num_params(), adam);
    let mut opt_d = Adam::new(disc.net.num_params(), adam);
    let adversarial = cfg.weights.lambda_adv > 0.0;
    let mut data_rng = rng::rng(rng::derive_str(cfg.seed, "inpainter-data"));

    let evaluate = |gen: &InpaintNet, it: usize| -> Result<(f64, f64)> {
        let m = hole_mse(gen, &val)?;
        if !m.is_finite() {
            return Err(Error::NonFinite {
                what: "validation MSE".into(),
                at: format!("iteration {it}"),
            });
        }
        Ok((m, psnr_from_mse(m)))
    };
    let (m0, p0) = evaluate(&gen, 0)?;
    let mut log = vec![InpaintLogRow {
        iteration: 0,
        loss: None,
        val_mse: Some(m0),
        val_psnr: Some(p0),
    }];

    for it in 1..=cfg.iterations {
        let mut imgs = Vec::with_capacity(cfg.batch);
        let mut holes = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let img = &train[data_rng.random_range(0..train.len())].1;
            let (_, hole) = mask_region(img, cfg.mask_fraction, &mut data_rng)?;
            imgs.push(img);
            holes.push(hole);
        }
        let batch = InpaintBatch::new(&imgs, &holes)?;

        if adversarial {
            let fake = batch.compose(&gen.net.infer(batch.input.clone())?);
            let (ld, gd) = discriminator_step_grads(&disc, batch.target.clone(), fake)?;
            if !ld.is_finite() {
                return Err(Error::NonFinite {
                    what: "discriminator loss".into(),
                    at: format!("iteration {it}"),
                });
            }
            opt_d.step(disc.net.params_mut().data_mut(), &gd);
        }
        let (loss, gg) = generator_loss_and_grad(&gen, Some(&disc), &batch, cfg.weights, cfg.rec_domain)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite {
                what: "inpainting loss".into(),
                at: format!("iteration {it}"),
            });
        }
        opt_g.step(gen.net.params_mut().data_mut(), &gg);

        let mut row = InpaintLogRow {
            iteration: it,
            loss: Some(loss),
            val_mse: None,
            val_psnr: None,
        };
        if it % cfg.val_every == 0 || it == cfg.iterations {
            let (m, p) = evaluate(&gen, it)?;
            row.val_mse = Some(m);
            row.val_psnr = Some(p);
        }
        log.push(row);
    }
    Ok(TrainedInpainter {
        generator: gen,
        discriminator: disc,
        log,
    })
}
