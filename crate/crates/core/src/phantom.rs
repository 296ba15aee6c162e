//! Synthetic chest patches with ground truth.
//!
//! A patch is a smooth background with a mild linear gradient, a set of
//! parallel rib bands, an optional vertical spine column, an optional
//! soft-edged nodule and additive Gaussian noise. The same noise
//! realization is used for the nodule-free rendering, so
//! `patch - clean` is exactly the nodule signal.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, BitDepth, Image, Mask};
use crate::manifest::{Label, Manifest, ManifestRow, NoduleGeometry, Split};
use crate::rng;

/// Radial width of the nodule's linear falloff, in pixels.
pub const SOFT_EDGE: f64 = 2.0;

/// Calcification patterns. `None` renders a plain soft-tissue nodule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calcification {
    None,
    Diffuse,
    Central,
    Laminar,
    Popcorn,
}

impl Calcification {
    pub const PATTERNS: [Calcification; 4] = [
        Calcification::Diffuse,
        Calcification::Central,
        Calcification::Laminar,
        Calcification::Popcorn,
    ];

    pub fn is_calcified(self) -> bool {
        self != Calcification::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoduleSpec {
    pub center: (f64, f64),
    pub radius: f64,
    /// Peak soft-tissue contrast over the background.
    pub contrast: f64,
    pub calcification: Calcification,
    /// Extra brightness of the calcified sub-pattern.
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub patch_size: usize,
    pub background: f64,
    pub rib_count: usize,
    pub rib_contrast: f64,
    pub spine_present: bool,
    pub noise_sigma: f64,
    pub nodule: Option<NoduleSpec>,
}

/// Spine column brightness over background.
const SPINE_CONTRAST: f64 = 0.1;
/// Background gradient amplitude across the patch.
const GRADIENT: f64 = 0.04;

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size as f64;
        if self.patch_size < 32 {
            return Err(Error::invalid(format!(
                "patch_size must be >= 32, got {}",
                self.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.background) || !(0.0..=1.0).contains(&self.rib_contrast) {
            return Err(Error::invalid("background and rib_contrast must lie in [0,1]"));
        }
        if self.background + self.rib_contrast > 1.0 {
            return Err(Error::invalid(format!(
                "background {} + rib_contrast {} exceeds 1",
                self.background, self.rib_contrast
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and >= 0"));
        }
        if let Some(n) = &self.nodule {
            if n.radius < 2.0 {
                return Err(Error::invalid(format!("nodule radius {} < 2", n.radius)));
            }
            let (cx, cy) = n.center;
            if cx - n.radius < 0.0 || cy - n.radius < 0.0 || cx + n.radius > p - 1.0 || cy + n.radius > p - 1.0 {
                return Err(Error::invalid(format!(
                    "nodule disc at ({cx},{cy}) r={} leaves the {}px patch",
                    n.radius, self.patch_size
                )));
            }
            if !(0.0..=1.0).contains(&n.contrast) || !(0.0..=1.0).contains(&n.gain) {
                return Err(Error::invalid("nodule contrast and gain must lie in [0,1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub nodule_mask: Mask,
    pub label: Option<Label>,
    /// The same scene without the nodule (same noise realization).
    pub clean_patch: Image,
}

#[inline]
fn soft_disc(r: f64, radius: f64, edge: f64) -> f64 {
    ((radius - r) / edge).clamp(0.0, 1.0)
}

fn raised_cosine(d: f64, half_width: f64) -> f64 {
    if d.abs() >= half_width {
        0.0
    } else {
        0.5 * (1.0 + (PI * d / half_width).cos())
    }
}

struct Anatomy {
    gx: f64,
    gy: f64,
    rib_normal: (f64, f64),
    rib_offsets: Vec<f64>,
    rib_half_width: f64,
    spine_x: Option<f64>,
    spine_half_width: f64,
}

/// Calcified sub-pattern intensity in `[0, 1]` at offset `(dx, dy)` from
/// the nodule centre.
fn pattern_value(n: &NoduleSpec, blobs: &[(f64, f64, f64)], dx: f64, dy: f64) -> f64 {
    let r = (dx * dx + dy * dy).sqrt();
    let inside = soft_disc(r, n.radius, SOFT_EDGE);
    if inside == 0.0 {
        return 0.0;
    }
    let v = match n.calcification {
        Calcification::None => 0.0,
        Calcification::Diffuse => 1.0,
        Calcification::Central => soft_disc(r, n.radius / 3.0, 1.0),
        Calcification::Laminar => {
            let ring = 0.6 * n.radius;
            let half = 0.12 * n.radius + 0.5;
            ((half - (r - ring).abs()) / 0.75).clamp(0.0, 1.0)
        }
        Calcification::Popcorn => blobs
            .iter()
            .map(|&(bx, by, br)| {
                let d = ((dx - bx).powi(2) + (dy - by).powi(2)).sqrt();
                soft_disc(d, br, 1.0)
            })
            .fold(0.0, f64::max),
    };
    v * inside
}

/// Render a phantom patch and its ground truth. Deterministic in `spec`.
pub fn render(spec: &PhantomSpec) -> Result<(Image, GroundTruth)> {
    spec.validate()?;
    let p = spec.patch_size;
    let pf = p as f64;
    let mut geo = rng::rng(rng::derive_str(spec.seed, "anatomy"));

    let theta = geo.random_range(-30.0f64..30.0).to_radians();
    let spacing = pf / spec.rib_count.max(1) as f64;
    let phase = geo.random_range(0.0..spacing);
    let rib_offsets: Vec<f64> = (0..spec.rib_count)
        .map(|i| -pf / 2.0 + phase + i as f64 * spacing + geo.random_range(-0.1..0.1) * spacing)
        .collect();
    let anatomy = Anatomy {
        gx: geo.random_range(-GRADIENT..GRADIENT),
        gy: geo.random_range(-GRADIENT..GRADIENT),
        rib_normal: (-theta.sin(), theta.cos()),
        rib_offsets,
        rib_half_width: geo.random_range(0.07..0.1) * pf,
        spine_x: spec.spine_present.then(|| {
            let side = if geo.random_bool(0.5) { 0.15 } else { 0.85 };
            (side + geo.random_range(-0.05..0.05)) * pf
        }),
        spine_half_width: 0.11 * pf,
    };

    let blobs: Vec<(f64, f64, f64)> = match &spec.nodule {
        Some(n) if n.calcification == Calcification::Popcorn => {
            let k = geo.random_range(3..=5);
            (0..k)
                .map(|_| {
                    let a = geo.random_range(0.0..2.0 * PI);
                    let d = geo.random_range(0.15..0.5) * n.radius;
                    (d * a.cos(), d * a.sin(), 0.22 * n.radius + 0.5)
                })
                .collect()
        }
        _ => Vec::new(),
    };

    let mut noise_rng = rng::rng(rng::derive_str(spec.seed, "noise"));
    let normal = Normal::new(0.0, spec.noise_sigma.max(0.0))
        .map_err(|e| Error::invalid(format!("noise: {e}")))?;

    let c = (pf - 1.0) / 2.0;
    let mut img = Vec::with_capacity(p * p);
    let mut clean = Vec::with_capacity(p * p);
    let mut mask = Vec::with_capacity(p * p);
    for y in 0..p {
        for x in 0..p {
            let (fx, fy) = (x as f64 - c, y as f64 - c);
            let mut v = spec.background + anatomy.gx * fx / pf + anatomy.gy * fy / pf;
            let d = fx * anatomy.rib_normal.0 + fy * anatomy.rib_normal.1;
            let rib = anatomy
                .rib_offsets
                .iter()
                .map(|&o| raised_cosine(d - o, anatomy.rib_half_width))
                .fold(0.0, f64::max);
            v += spec.rib_contrast * rib;
            if let Some(sx) = anatomy.spine_x {
                v += SPINE_CONTRAST * raised_cosine(x as f64 - sx, anatomy.spine_half_width);
            }
            let noise = if spec.noise_sigma > 0.0 {
                normal.sample(&mut noise_rng)
            } else {
                0.0
            };
            let mut lesion = 0.0;
            let mut inside = false;
            if let Some(n) = &spec.nodule {
                let (dx, dy) = (x as f64 - n.center.0, y as f64 - n.center.1);
                let r = (dx * dx + dy * dy).sqrt();
                inside = r < n.radius;
                lesion = n.contrast * soft_disc(r, n.radius, SOFT_EDGE)
                    + n.gain * pattern_value(n, &blobs, dx, dy);
            }
            clean.push((v + noise).clamp(0.0, 1.0));
            img.push((v + lesion + noise).clamp(0.0, 1.0));
            mask.push(inside);
        }
    }

    let label = spec.nodule.map(|n| {
        if n.calcification.is_calcified() {
            Label::Calcified
        } else {
            Label::NonCalcified
        }
    });
    Ok((
        Image::new(p, p, img)?,
        GroundTruth {
            nodule_mask: Mask::new(p, p, mask)?,
            label,
            clean_patch: Image::new(p, p, clean)?,
        },
    ))
}

fn mean_where(img: &Image, pred: impl Fn(f64) -> bool, center: (f64, f64)) -> Option<f64> {
    let mut s = 0.0;
    let mut n = 0usize;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let r = ((x as f64 - center.0).powi(2) + (y as f64 - center.1).powi(2)).sqrt();
            if pred(r) {
                s += img.get(x, y);
                n += 1;
            }
        }
    }
    (n > 0).then(|| s / n as f64)
}

/// Mean of `img` over the inner disc `r < radius/3` and over the annulus
/// `radius/3 <= r < radius - SOFT_EDGE`.
pub fn core_and_annulus_means(img: &Image, n: &NoduleSpec) -> Option<(f64, f64)> {
    let inner = n.radius / 3.0;
    let outer = n.radius - SOFT_EDGE;
    let core = mean_where(img, |r| r < inner, n.center)?;
    let ring = mean_where(img, |r| r >= inner && r < outer, n.center)?;
    Some((core, ring))
}

/// Brightness predicate of a calcification pattern, evaluated on the
/// nodule residue `patch - clean`.
pub fn pattern_predicate(residue: &Image, n: &NoduleSpec, pattern: Calcification) -> bool {
    const MARGIN: f64 = 0.01;
    let full = n.radius - SOFT_EDGE;
    match pattern {
        Calcification::None => true,
        Calcification::Diffuse => mean_where(residue, |r| r < full, n.center)
            .is_some_and(|m| m > n.contrast + MARGIN),
        Calcification::Central => core_and_annulus_means(residue, n)
            .is_some_and(|(core, ring)| core > ring + MARGIN),
        Calcification::Laminar => {
            let ring = 0.6 * n.radius;
            let band = mean_where(residue, |r| (r - ring).abs() < 0.1 * n.radius + 0.5, n.center);
            let inner = mean_where(residue, |r| r < 0.3 * n.radius, n.center);
            matches!((band, inner), (Some(b), Some(i)) if b > i + MARGIN)
        }
        Calcification::Popcorn => {
            let mut peak: f64 = 0.0;
            let mut bright = 0usize;
            let mut total = 0usize;
            for y in 0..residue.height() {
                for x in 0..residue.width() {
                    let r = ((x as f64 - n.center.0).powi(2) + (y as f64 - n.center.1).powi(2)).sqrt();
                    if r < full {
                        let v = residue.get(x, y);
                        peak = peak.max(v);
                        total += 1;
                        bright += (v > n.contrast + MARGIN) as usize;
                    }
                }
            }
            total > 0 && peak > n.contrast + MARGIN && (bright as f64) < 0.85 * total as f64
        }
    }
}

/// Sampling ranges for dataset generation. Lengths scale with
/// `patch_size / 64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomRanges {
    pub patch_size: usize,
    pub background: (f64, f64),
    pub rib_count: (usize, usize),
    pub rib_contrast: (f64, f64),
    pub spine_probability: f64,
    pub noise_sigma: f64,
    pub radius: (f64, f64),
    pub contrast: (f64, f64),
    pub gain: (f64, f64),
    pub center_jitter: f64,
}

impl Default for PhantomRanges {
    fn default() -> Self {
        PhantomRanges {
            patch_size: 64,
            background: (0.2, 0.35),
            rib_count: (1, 3),
            rib_contrast: (0.04, 0.1),
            spine_probability: 0.3,
            noise_sigma: 0.02,
            radius: (4.0, 9.0),
            contrast: (0.08, 0.18),
            gain: (0.06, 0.16),
            center_jitter: 2.0,
        }
    }
}

impl PhantomRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo <= hi && lo.is_finite() && hi.is_finite();
        if !(ok(self.background) && ok(self.rib_contrast) && ok(self.radius) && ok(self.contrast) && ok(self.gain)) {
            return Err(Error::invalid("phantom ranges must satisfy lo <= hi"));
        }
        if self.rib_count.0 > self.rib_count.1 {
            return Err(Error::invalid("rib_count range reversed"));
        }
        if !(0.0..=1.0).contains(&self.spine_probability) {
            return Err(Error::invalid("spine_probability must lie in [0,1]"));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.patch_size as f64 / 64.0
    }

    fn draw(r: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
        if lo == hi {
            lo
        } else {
            r.random_range(lo..hi)
        }
    }

    /// Draw a scene for `seed`, with a nodule carrying `calcification`
    /// when given.
    pub fn sample(&self, seed: u64, nodule: Option<Calcification>) -> PhantomSpec {
        let mut r = rng::rng(rng::derive_str(seed, "spec"));
        let s = self.scale();
        let background = Self::draw(&mut r, self.background);
        let rib_count = r.random_range(self.rib_count.0..=self.rib_count.1);
        let rib_contrast = Self::draw(&mut r, self.rib_contrast).min(1.0 - background);
        let spine_present = r.random_bool(self.spine_probability);
        let c = (self.patch_size as f64 - 1.0) / 2.0;
        let nodule = nodule.map(|calcification| {
            let j = self.center_jitter * s;
            let jx = if j > 0.0 { r.random_range(-j..=j) } else { 0.0 };
            let jy = if j > 0.0 { r.random_range(-j..=j) } else { 0.0 };
            let gain = Self::draw(&mut r, self.gain);
            NoduleSpec {
                center: (c + jx, c + jy),
                radius: Self::draw(&mut r, (self.radius.0 * s, self.radius.1 * s)),
                contrast: Self::draw(&mut r, self.contrast),
                calcification,
                gain: if calcification.is_calcified() { gain } else { 0.0 },
            }
        });
        PhantomSpec {
            seed,
            patch_size: self.patch_size,
            background,
            rib_count,
            rib_contrast,
            spine_present,
            noise_sigma: self.noise_sigma,
            nodule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_normal: usize,
    pub n_calcified: usize,
    pub n_noncalcified: usize,
    pub ranges: PhantomRanges,
    pub seed: u64,
    /// Fraction of each class held out for validation.
    pub val_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_normal: 2000,
            n_calcified: 300,
            n_noncalcified: 300,
            ranges: PhantomRanges::default(),
            seed: 0,
            val_fraction: 0.2,
        }
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Render a full dataset under `root` (`images/`, `masks/`, `clean/`,
/// `manifest.jsonl`). The split is a seeded shuffle within each class.
pub fn build_dataset(cfg: &DatasetConfig, root: impl AsRef<Path>) -> Result<Manifest> {
    let root = root.as_ref();
    cfg.ranges.validate()?;
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::invalid(format!(
            "val_fraction must lie in [0,1), got {}",
            cfg.val_fraction
        )));
    }
    for sub in ["images", "masks", "clean"] {
        ensure_dir(&root.join(sub))?;
    }

    let classes = [
        (Label::Normal, cfg.n_normal, "normal"),
        (Label::Calcified, cfg.n_calcified, "calc"),
        (Label::NonCalcified, cfg.n_noncalcified, "noncalc"),
    ];
    let mut rows = Vec::new();
    for (class_idx, &(label, count, prefix)) in classes.iter().enumerate() {
        let class_seed = rng::derive(cfg.seed, class_idx as u64);
        let mut pattern_rng = rng::rng(rng::derive_str(class_seed, "patterns"));
        let mut val_flags: Vec<bool> = (0..count)
            .map(|i| i < (count as f64 * cfg.val_fraction).round() as usize)
            .collect();
        val_flags.shuffle(&mut rng::rng(rng::derive_str(class_seed, "split")));

        for (i, &is_val) in val_flags.iter().enumerate() {
            let id = format!("{prefix}-{i:06}");
            let seed = rng::derive(class_seed, i as u64);
            let calcification = match label {
                Label::Normal => None,
                Label::NonCalcified => Some(Calcification::None),
                Label::Calcified => Some(
                    Calcification::PATTERNS[pattern_rng.random_range(0..Calcification::PATTERNS.len())],
                ),
            };
            let spec = cfg.ranges.sample(seed, calcification);
            let (img, gt) = render(&spec)?;
            let image = format!("images/{id}.png");
            imaging::save_png(&img, root.join(&image), BitDepth::Sixteen)?;
            let (mask, clean) = if spec.nodule.is_some() {
                let mask = format!("masks/{id}.png");
                let clean = format!("clean/{id}.png");
                imaging::save_png(&gt.nodule_mask.to_image(), root.join(&mask), BitDepth::Eight)?;
                imaging::save_png(&gt.clean_patch, root.join(&clean), BitDepth::Sixteen)?;
                (Some(mask), Some(clean))
            } else {
                (None, None)
            };
            rows.push(ManifestRow {
                id,
                split: if is_val { Split::Val } else { Split::Train },
                label,
                nodule: spec.nodule.map(|n| NoduleGeometry {
                    cx: n.center.0,
                    cy: n.center.1,
                    radius: n.radius,
                    contrast: n.contrast,
                    calcification: n.calcification,
                    gain: n.gain,
                }),
                seed,
                image,
                mask,
                clean,
                refined: None,
                transform: None,
                source: None,
            });
        }
    }
    let manifest = Manifest::new(root, rows);
    manifest.save()?;
    Ok(manifest)
}

impl From<&NoduleGeometry> for NoduleSpec {
    fn from(g: &NoduleGeometry) -> Self {
        NoduleSpec {
            center: (g.cx, g.cy),
            radius: g.radius,
            contrast: g.contrast,
            calcification: g.calcification,
            gain: g.gain,
        }
    }
}
