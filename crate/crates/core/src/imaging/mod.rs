//! Single-channel rasters and the pure pixel operations the pipeline is
//! built from.

mod io;
mod ops;

pub(crate) use ops::resize_to;
pub use io::{encode_png, load, load_pgm, load_png, save_png, BitDepth};
pub use ops::{
    crop, gaussian5x5, gaussian_kernel_5x5, intersect, mse, otsu_binarize, psnr, psnr_from_mse, resize, subtract,
    Otsu, GAUSSIAN_SIGMA, OTSU_LEVELS,
};

use crate::error::{Error, Result};

/// Row-major grayscale raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::Shape {
                op: "Image::new",
                left: format!("{width}x{height}"),
                right: format!("{} values", data.len()),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("pixel {v}"),
                at: "Image::new".into(),
            });
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    /// Like [`Image::new`] but clamps every value into `[0, 1]`.
    pub fn from_clamped(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Image::new(width, height, data)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        Image {
            width,
            height,
            data: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Image::filled(width, height, 0.0)
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Pixel lookup with edge replication for out-of-range coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres on
    /// the integer grid), replicating edges.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let p00 = self.get_clamped(x0, y0);
        if fx == 0.0 && fy == 0.0 {
            return p00;
        }
        let p10 = self.get_clamped(x0 + 1, y0);
        let p01 = self.get_clamped(x0, y0 + 1);
        let p11 = self.get_clamped(x0 + 1, y0 + 1);
        let top = p00 + (p10 - p00) * fx;
        let bottom = p01 + (p11 - p01) * fx;
        top + (bottom - top) * fy
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub(crate) fn check_same(&self, other_dims: (usize, usize), op: &'static str) -> Result<()> {
        if self.dims() != other_dims {
            return Err(Error::Shape {
                op,
                left: format!("{}x{}", self.width, self.height),
                right: format!("{}x{}", other_dims.0, other_dims.1),
            });
        }
        Ok(())
    }
}

/// Binary raster marking a region.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Shape {
                op: "Mask::new",
                left: format!("{width}x{height}"),
                right: format!("{} bits", bits.len()),
            });
        }
        Ok(Mask {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Mask {
            width,
            height,
            bits,
        }
    }

    /// Axis-aligned rectangle `[x0, x0+w) x [y0, y0+h)`.
    pub fn rect(width: usize, height: usize, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Mask::from_fn(width, height, |x, y| {
            x >= x0 && x < x0 + w && y >= y0 && y < y0 + h
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn invert(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Intersection over union; two empty masks count as a perfect match.
    pub fn iou(&self, other: &Mask) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::Shape {
                op: "Mask::iou",
                left: format!("{}x{}", self.width, self.height),
                right: format!("{}x{}", other.width, other.height),
            });
        }
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        })
    }

    /// Chebyshev (square) dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Mask {
        let r = radius as isize;
        Mask::from_fn(self.width, self.height, |x, y| {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sx, sy) = (x as isize + dx, y as isize + dy);
                    if sx >= 0
                        && sy >= 0
                        && (sx as usize) < self.width
                        && (sy as usize) < self.height
                        && self.get(sx as usize, sy as usize)
                    {
                        return true;
                    }
                }
            }
            false
        })
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Pixels strictly above `threshold` become foreground.
    pub fn from_image(img: &Image, threshold: f64) -> Mask {
        Mask {
            width: img.width(),
            height: img.height(),
            bits: img.data().iter().map(|&v| v > threshold).collect(),
        }
    }
}
