//! Refined-nodule extraction: central hole, inpaint, subtract, 5x5
//! Gaussian, Otsu, and intersection of the difference with the Otsu
//! region.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{self, BitDepth, Image, Mask, OTSU_LEVELS};
use crate::inpainter::{self, InpaintNet};
use crate::manifest::Manifest;

pub const DEFAULT_MASK_FRACTION: f64 = 0.2;

/// Anything that can fill a hole in an image. Implementations must leave
/// pixels outside the hole untouched.
pub trait InpaintEngine {
    fn inpaint(&self, img: &Image, hole: &Mask) -> Result<Image>;
}

/// Harmonic fill; needs no training.
#[derive(Debug, Clone, Copy, Default)]
pub struct Classical;

impl InpaintEngine for Classical {
    fn inpaint(&self, img: &Image, hole: &Mask) -> Result<Image> {
        inpainter::classical_inpaint(img, hole)
    }
}

impl InpaintEngine for InpaintNet {
    fn inpaint(&self, img: &Image, hole: &Mask) -> Result<Image> {
        InpaintNet::inpaint(self, img, hole)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionResult {
    pub hole: Mask,
    pub inpainted: Image,
    pub difference: Image,
    pub denoised: Image,
    pub region_mask: Mask,
    pub refined: Image,
    pub threshold: f64,
}

pub fn extract_refined(raw: &Image, engine: &dyn InpaintEngine, mask_fraction: f64) -> Result<ExtractionResult> {
    let hole = inpainter::central_hole(raw.width(), raw.height(), mask_fraction).map_err(|e| e.in_stage("mask"))?;
    let inpainted = engine.inpaint(raw, &hole).map_err(|e| e.in_stage("inpaint"))?;
    let difference = imaging::subtract(raw, &inpainted).map_err(|e| e.in_stage("subtract"))?;
    let denoised = imaging::gaussian5x5(&difference).map_err(|e| e.in_stage("denoise"))?;
    let otsu = imaging::otsu_binarize(&denoised, OTSU_LEVELS).map_err(|e| e.in_stage("binarize"))?;
    let refined = imaging::intersect(&difference, &otsu.mask).map_err(|e| e.in_stage("intersect"))?;
    Ok(ExtractionResult {
        hole,
        inpainted,
        difference,
        denoised,
        region_mask: otsu.mask,
        refined,
        threshold: otsu.threshold,
    })
}

impl ExtractionResult {
    /// Horizontal strip of raw, inpainted, difference, denoised, region
    /// mask and refined panels separated by 2-pixel white gutters. The
    /// residue panels are stretched to their own maximum for visibility.
    pub fn contact_sheet(&self, raw: &Image) -> Image {
        const GAP: usize = 2;
        let stretch = |img: &Image| {
            let m = img.data().iter().cloned().fold(0.0, f64::max);
            if m > 0.0 {
                img.map(|v| v / m)
            } else {
                img.clone()
            }
        };
        let panels = [
            raw.clone(),
            self.inpainted.clone(),
            stretch(&self.difference),
            stretch(&self.denoised),
            self.region_mask.to_image(),
            stretch(&self.refined),
        ];
        let (w, h) = raw.dims();
        let total = panels.len() * w + (panels.len() - 1) * GAP;
        let mut sheet = Image::filled(total, h, 1.0);
        for (i, p) in panels.iter().enumerate() {
            let x0 = i * (w + GAP);
            for y in 0..h {
                for x in 0..w {
                    sheet.set(x0 + x, y, p.get(x, y));
                }
            }
        }
        sheet
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOptions {
    pub mask_fraction: f64,
    /// Also write `debug/<id>_stages.png` contact sheets.
    pub debug_stages: bool,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            mask_fraction: DEFAULT_MASK_FRACTION,
            debug_stages: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    /// Input rows rooted at the output directory; successful rows carry
    /// their refined path.
    pub manifest: Manifest,
    pub failures: Vec<SampleFailure>,
    /// More than [`MAX_FAILURE_RATE`] of the rows failed.
    pub failed: bool,
}

pub const MAX_FAILURE_RATE: f64 = 0.10;

/// Extract every row of `manifest`, writing `refined/<id>.png` (16-bit)
/// under `out_dir`. Per-sample failures are recorded and skipped.
pub fn batch_extract(manifest: &Manifest, engine: &dyn InpaintEngine, out_dir: &Path, opts: BatchOptions) -> Result<BatchReport> {
    let refined_dir = out_dir.join("refined");
    fs::create_dir_all(&refined_dir).map_err(|e| Error::io(&refined_dir, e))?;
    let debug_dir = out_dir.join("debug");
    if opts.debug_stages {
        fs::create_dir_all(&debug_dir).map_err(|e| Error::io(&debug_dir, e))?;
    }
    let mut out = manifest.rebase(out_dir);
    let mut failures = Vec::new();
    for (row, src) in out.rows.iter_mut().zip(&manifest.rows) {
        let one = || -> Result<String> {
            let raw = imaging::load(manifest.resolve(&src.image))?;
            let res = extract_refined(&raw, engine, opts.mask_fraction)?;
            let rel = format!("refined/{}.png", row.id);
            imaging::save_png(&res.refined, out_dir.join(&rel), BitDepth::Sixteen)?;
            if opts.debug_stages {
                imaging::save_png(&res.contact_sheet(&raw), debug_dir.join(format!("{}_stages.png", row.id)), BitDepth::Eight)?;
            }
            Ok(rel)
        };
        match one() {
            Ok(rel) => row.refined = Some(rel),
            Err(e) => {
                row.refined = None;
                failures.push(SampleFailure {
                    id: row.id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    let failed = !manifest.is_empty() && failures.len() as f64 > MAX_FAILURE_RATE * manifest.len() as f64;
    Ok(BatchReport {
        manifest: out,
        failures,
        failed,
    })
}
