//! Paired geometric augmentation. One sampled [`TransformRecord`] is
//! applied to a raw patch and its refined counterpart so the pair stays
//! aligned; records are stored in the manifest and can be replayed.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, BitDepth, Image, Mask};
use crate::manifest::{Label, Manifest, ManifestRow, NoduleGeometry, Split};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub dx: i32,
    pub dy: i32,
    pub hflip: bool,
    /// Degrees; positive turns +x towards +y (clockwise on screen).
    pub angle: f64,
    /// Width/height stretch: x scales by `sqrt(aspect)`, y by its inverse.
    pub aspect: f64,
    /// Resolution factor: downsample by `scale`, then restore the size.
    pub scale: f64,
    /// Seed the record was sampled from.
    pub seed: u64,
}

impl TransformRecord {
    pub fn identity(seed: u64) -> Self {
        TransformRecord {
            dx: 0,
            dy: 0,
            hflip: false,
            angle: 0.0,
            aspect: 1.0,
            scale: 1.0,
            seed,
        }
    }

    pub fn within(&self, r: &TransformRanges) -> bool {
        self.dx.abs() <= r.max_shift
            && self.dy.abs() <= r.max_shift
            && self.angle.abs() <= r.max_angle
            && (r.aspect.0..=r.aspect.1).contains(&self.aspect)
            && (r.scale.0..=r.scale.1).contains(&self.scale)
    }

    fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.angle.to_radians().sin_cos();
        let f = if self.hflip { -1.0 } else { 1.0 };
        let ax = self.aspect.sqrt();
        // aspect * rotation * flip
        [[ax * c * f, -ax * s], [s * f / ax, c / ax]]
    }

    /// Where the geometric part of the transform sends a source point in
    /// a `size x size` image.
    pub fn forward_point(&self, x: f64, y: f64, size: usize) -> (f64, f64) {
        let c = (size as f64 - 1.0) / 2.0;
        let m = self.linear();
        let (px, py) = (x + self.dx as f64 - c, y + self.dy as f64 - c);
        (m[0][0] * px + m[0][1] * py + c, m[1][0] * px + m[1][1] * py + c)
    }
}

/// Sampling ranges; the defaults are the full augmentation ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformRanges {
    pub max_shift: i32,
    pub max_angle: f64,
    pub aspect: (f64, f64),
    pub scale: (f64, f64),
    pub hflip_p: f64,
}

impl Default for TransformRanges {
    fn default() -> Self {
        TransformRanges {
            max_shift: 32,
            max_angle: 18.0,
            aspect: (0.75, 1.25),
            scale: (0.75, 1.25),
            hflip_p: 0.5,
        }
    }
}

impl TransformRanges {
    pub fn validate(&self) -> Result<()> {
        let full = TransformRanges::default();
        let ok = (0..=full.max_shift).contains(&self.max_shift)
            && (0.0..=full.max_angle).contains(&self.max_angle)
            && full.aspect.0 <= self.aspect.0
            && self.aspect.0 <= self.aspect.1
            && self.aspect.1 <= full.aspect.1
            && full.scale.0 <= self.scale.0
            && self.scale.0 <= self.scale.1
            && self.scale.1 <= full.scale.1
            && (0.0..=1.0).contains(&self.hflip_p);
        if !ok {
            return Err(Error::invalid(format!("augmentation ranges outside the allowed bounds: {self:?}")));
        }
        Ok(())
    }
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Uniform draw over the default ranges.
pub fn sample_transform(rng: &mut impl Rng) -> TransformRecord {
    let seed = rng.random();
    sample_from_seed(seed, &TransformRanges::default(), None)
}

/// The record determined by `seed`. With a quadrant `q` in `0..4` the
/// shift signs are restricted to `(+,+)`, `(-,+)`, `(-,-)`, `(+,-)`.
pub fn sample_from_seed(seed: u64, ranges: &TransformRanges, quadrant: Option<usize>) -> TransformRecord {
    let mut r = rng::rng(seed);
    let m = ranges.max_shift;
    let (sx, sy) = match quadrant.map(|q| q % 4) {
        Some(0) => (1, 1),
        Some(1) => (-1, 1),
        Some(2) => (-1, -1),
        Some(3) => (1, -1),
        _ => (0, 0),
    };
    let mut shift = |sign: i32| match sign {
        0 => r.random_range(-m..=m),
        s => s * r.random_range(0..=m),
    };
    let dx = shift(sx);
    let dy = shift(sy);
    TransformRecord {
        dx,
        dy,
        hflip: r.random_bool(ranges.hflip_p),
        angle: draw(&mut r, (-ranges.max_angle, ranges.max_angle)),
        aspect: draw(&mut r, ranges.aspect),
        scale: draw(&mut r, ranges.scale),
        seed,
    }
}

/// Translation, flip, rotation and aspect about the image centre as one
/// inverse-mapped bilinear resample (edges replicated), followed by the
/// resolution adjustment.
pub fn apply(img: &Image, t: &TransformRecord) -> Result<Image> {
    let (w, h) = img.dims();
    if w != h {
        return Err(Error::Shape {
            op: "augment::apply",
            left: "square image".into(),
            right: format!("{w}x{h}"),
        });
    }
    let c = (w as f64 - 1.0) / 2.0;
    let m = t.linear();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let mut out = Image::from_fn(w, h, |x, y| {
        let (qx, qy) = (x as f64 - c, y as f64 - c);
        let sx = inv[0][0] * qx + inv[0][1] * qy + c - t.dx as f64;
        let sy = inv[1][0] * qx + inv[1][1] * qy + c - t.dy as f64;
        img.sample_bilinear(sx, sy)
    });
    if t.scale != 1.0 {
        let small = ((w as f64 * t.scale).round() as usize).max(1);
        out = imaging::resize_to(&out, small, small)?;
        out = imaging::resize_to(&out, w, h)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentCfg {
    pub factor: usize,
    pub ranges: TransformRanges,
    /// Stratify shift signs over the four quadrants (`k % 4`).
    pub stratify: bool,
    pub seed: u64,
}

impl Default for AugmentCfg {
    fn default() -> Self {
        AugmentCfg {
            factor: 4,
            ranges: TransformRanges::default(),
            stratify: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentReport {
    /// All input rows followed by the augmented rows, rooted at the
    /// output directory.
    pub manifest: Manifest,
    pub added: usize,
    /// `(id, reason)` for calcified rows that could not be augmented.
    pub skipped: Vec<(String, String)>,
}

/// Seed of the `k`-th augmented copy of row `id`.
pub fn record_seed(seed: u64, id: &str, k: usize) -> u64 {
    rng::derive_str(seed, &format!("augment/{id}/{k}"))
}

fn aug_id(id: &str, k: usize) -> String {
    format!("{id}_aug{k}")
}

/// Images derived from one source row under one record.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub raw: Image,
    pub refined: Image,
    pub mask: Option<Mask>,
}

fn transform_row(manifest: &Manifest, src: &ManifestRow, t: &TransformRecord) -> Result<AugmentedPair> {
    let refined_rel = src
        .refined
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("{} has no refined image", src.id)))?;
    let raw = imaging::load(manifest.resolve(&src.image))?;
    let refined = imaging::load(manifest.resolve(refined_rel))?;
    raw.check_same(refined.dims(), "augment pair")?;
    let mask = match &src.mask {
        Some(p) => {
            let m = imaging::load(manifest.resolve(p))?;
            Some(Mask::from_image(&apply(&m, t)?, 0.5))
        }
        None => None,
    };
    Ok(AugmentedPair {
        raw: apply(&raw, t)?,
        refined: apply(&refined, t)?,
        mask,
    })
}

fn write_pair(out_dir: &Path, id: &str, pair: &AugmentedPair) -> Result<(String, String, Option<String>)> {
    let image = format!("augmented/images/{id}.png");
    let refined = format!("augmented/refined/{id}.png");
    imaging::save_png(&pair.raw, out_dir.join(&image), BitDepth::Sixteen)?;
    imaging::save_png(&pair.refined, out_dir.join(&refined), BitDepth::Sixteen)?;
    let mask = match &pair.mask {
        Some(m) => {
            let p = format!("augmented/masks/{id}.png");
            imaging::save_png(&m.to_image(), out_dir.join(&p), BitDepth::Eight)?;
            Some(p)
        }
        None => None,
    };
    Ok((image, refined, mask))
}

/// Add `factor` transformed copies of every calcified training pair.
pub fn augment_calcified(manifest: &Manifest, cfg: &AugmentCfg, out_dir: &Path) -> Result<AugmentReport> {
    if cfg.factor == 0 {
        return Err(Error::invalid("augmentation factor must be at least 1"));
    }
    cfg.ranges.validate()?;
    for sub in ["images", "refined", "masks"] {
        let d = out_dir.join("augmented").join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut out = manifest.rebase(out_dir);
    let mut skipped = Vec::new();
    let mut added = Vec::new();
    for src in manifest.iter_where(Split::Train, &[Label::Calcified]) {
        if src.refined.is_none() {
            skipped.push((src.id.clone(), "missing refined image".to_string()));
            continue;
        }
        for k in 0..cfg.factor {
            let t = sample_from_seed(record_seed(cfg.seed, &src.id, k), &cfg.ranges, cfg.stratify.then_some(k));
            let pair = match transform_row(manifest, src, &t) {
                Ok(p) => p,
                Err(e) => {
                    skipped.push((src.id.clone(), e.to_string()));
                    break;
                }
            };
            let id = aug_id(&src.id, k);
            let (image, refined, mask) = write_pair(out_dir, &id, &pair)?;
            let size = pair.raw.width();
            let nodule = src.nodule.map(|g| {
                let (cx, cy) = t.forward_point(g.cx, g.cy, size);
                NoduleGeometry { cx, cy, ..g }
            });
            added.push(ManifestRow {
                id,
                split: src.split,
                label: src.label,
                nodule,
                seed: t.seed,
                image,
                mask,
                clean: None,
                refined: Some(refined),
                transform: Some(t),
                source: Some(src.id.clone()),
            });
        }
    }
    let n = added.len();
    out.rows.extend(added);
    Ok(AugmentReport {
        manifest: out,
        added: n,
        skipped,
    })
}

/// Regenerate an augmented row from its source row and stored record.
pub fn replay(manifest: &Manifest, id: &str) -> Result<AugmentedPair> {
    let row = manifest
        .rows
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| Error::invalid(format!("no manifest row {id}")))?;
    let (t, source) = match (&row.transform, &row.source) {
        (Some(t), Some(s)) => (t, s),
        _ => return Err(Error::invalid(format!("{id} is not an augmented row"))),
    };
    let src = manifest
        .rows
        .iter()
        .find(|r| &r.id == source)
        .ok_or_else(|| Error::invalid(format!("source row {source} of {id} is missing")))?;
    transform_row(manifest, src, t)
}

/// Whether replaying `id` reproduces its stored image files bit for bit.
pub fn replay_matches(manifest: &Manifest, id: &str) -> Result<bool> {
    let pair = replay(manifest, id)?;
    let row = manifest.rows.iter().find(|r| r.id == id).expect("replayed row exists");
    let same = |img: &Image, rel: &str| -> Result<bool> {
        let path = manifest.resolve(rel);
        let stored = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(imaging::encode_png(img, BitDepth::Sixteen)? == stored)
    };
    Ok(same(&pair.raw, &row.image)? && same(&pair.refined, row.refined.as_deref().unwrap_or_default())?)
}
