use super::{Image, Mask};
use crate::error::{Error, Result};

/// Standard deviation of the fixed 5x5 denoising kernel.
pub const GAUSSIAN_SIGMA: f64 = 1.0;

/// Histogram resolution used for Otsu thresholding.
pub const OTSU_LEVELS: usize = 256;

/// Per-pixel `a - b`, clamped at zero.
pub fn subtract(a: &Image, b: &Image) -> Result<Image> {
    a.check_same(b.dims(), "subtract")?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).clamp(0.0, 1.0))
        .collect();
    Image::new(a.width(), a.height(), data)
}

/// Keep pixels where `mask` is set, zero elsewhere.
pub fn intersect(img: &Image, mask: &Mask) -> Result<Image> {
    img.check_same(mask.dims(), "intersect")?;
    let data = img
        .data()
        .iter()
        .zip(mask.bits())
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    Image::new(img.width(), img.height(), data)
}

fn gaussian_1d() -> [f64; 5] {
    let mut k = [0.0; 5];
    for (i, w) in k.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *w = (-d * d / (2.0 * GAUSSIAN_SIGMA * GAUSSIAN_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|w| w / s)
}

/// The normalized 5x5 kernel, `kernel[dy][dx]`.
pub fn gaussian_kernel_5x5() -> [[f64; 5]; 5] {
    let k = gaussian_1d();
    let mut out = [[0.0; 5]; 5];
    for (dy, row) in out.iter_mut().enumerate() {
        for (dx, w) in row.iter_mut().enumerate() {
            *w = k[dy] * k[dx];
        }
    }
    out
}

/// 5x5 Gaussian blur with edge replication. Separable implementation of
/// the kernel returned by [`gaussian_kernel_5x5`].
pub fn gaussian5x5(img: &Image) -> Result<Image> {
    let (w, h) = img.dims();
    if w < 5 || h < 5 {
        return Err(Error::invalid(format!(
            "gaussian5x5 needs at least 5x5 pixels, got {w}x{h}"
        )));
    }
    let k = gaussian_1d();
    let src = img.data();

    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kw) in k.iter().enumerate() {
                let sx = (x as isize + i as isize - 2).clamp(0, w as isize - 1) as usize;
                acc += kw * row[sx];
            }
            tmp[y * w + x] = acc;
        }
    }

    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kw) in k.iter().enumerate() {
                let sy = (y as isize + i as isize - 2).clamp(0, h as isize - 1) as usize;
                acc += kw * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    Image::from_clamped(w, h, out)
}

/// Result of Otsu binarization.
#[derive(Debug, Clone, PartialEq)]
pub struct Otsu {
    /// Histogram bin chosen as threshold; foreground is `bin > threshold_bin`.
    pub threshold_bin: usize,
    /// `threshold_bin / (levels - 1)`, on the pixel scale.
    pub threshold: f64,
    pub levels: usize,
    pub mask: Mask,
}

#[inline]
pub(crate) fn quantize(v: f64, levels: usize) -> usize {
    let top = (levels - 1) as f64;
    ((v * top + 0.5).floor() as usize).min(levels - 1)
}

/// Otsu's method over a `levels`-bin histogram (pixel `v` falls in bin
/// `round(v * (levels - 1))`). The threshold is the smallest bin that
/// maximizes between-class variance. A histogram with no split of
/// positive variance yields an empty mask and the top bin as threshold.
pub fn otsu_binarize(img: &Image, levels: usize) -> Result<Otsu> {
    if levels < 2 {
        return Err(Error::invalid(format!("otsu needs >= 2 levels, got {levels}")));
    }
    let mut hist = vec![0u64; levels];
    let bins: Vec<usize> = img.data().iter().map(|&v| quantize(v, levels)).collect();
    for &b in &bins {
        hist[b] += 1;
    }

    let total = bins.len() as u64;
    let total_sum: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();

    let mut best_bin = None;
    let mut best_var = 0.0f64;
    let mut n0 = 0u64;
    let mut s0 = 0u64;
    for t in 0..levels - 1 {
        n0 += hist[t];
        s0 += t as u64 * hist[t];
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // N^2 * sigma_b^2 * n0 * n1 / N^2 collapses to (n0*S - N*s0)^2 / (n0*n1).
        let num = n0 as f64 * total_sum as f64 - total as f64 * s0 as f64;
        let var = num * num / (n0 as f64 * n1 as f64);
        if var > best_var {
            best_var = var;
            best_bin = Some(t);
        }
    }

    let threshold_bin = best_bin.unwrap_or(levels - 1);
    let mask = match best_bin {
        Some(t) => Mask::new(
            img.width(),
            img.height(),
            bins.iter().map(|&b| b > t).collect(),
        )?,
        None => Mask::empty(img.width(), img.height()),
    };
    Ok(Otsu {
        threshold_bin,
        threshold: threshold_bin as f64 / (levels - 1) as f64,
        levels,
        mask,
    })
}

/// `size x size` window centred on `(cx, cy)`, shifted inward when it
/// would leave the image.
pub fn crop(img: &Image, cx: usize, cy: usize, size: usize) -> Result<Image> {
    let (w, h) = img.dims();
    if size == 0 || size > w || size > h {
        return Err(Error::invalid(format!(
            "crop size {size} does not fit in {w}x{h}"
        )));
    }
    let half = (size / 2) as isize;
    let x0 = (cx as isize - half).clamp(0, (w - size) as isize) as usize;
    let y0 = (cy as isize - half).clamp(0, (h - size) as isize) as usize;
    let mut data = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        data.extend_from_slice(&img.data()[y * w + x0..y * w + x0 + size]);
    }
    Image::new(size, size, data)
}

/// Bilinear resampling to `round(w * ratio) x round(h * ratio)` using
/// pixel-centre alignment and edge replication.
pub fn resize(img: &Image, ratio: f64) -> Result<Image> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::invalid(format!("resize ratio must be > 0, got {ratio}")));
    }
    let (w, h) = img.dims();
    let ow = (w as f64 * ratio).round() as usize;
    let oh = (h as f64 * ratio).round() as usize;
    resize_to(img, ow, oh)
}

pub(crate) fn resize_to(img: &Image, ow: usize, oh: usize) -> Result<Image> {
    let (w, h) = img.dims();
    if ow == 0 || oh == 0 {
        return Err(Error::invalid(format!(
            "resize of {w}x{h} gives degenerate {ow}x{oh}"
        )));
    }
    if (ow, oh) == (w, h) {
        return Ok(img.clone());
    }
    let sx = w as f64 / ow as f64;
    let sy = h as f64 / oh as f64;
    let mut data = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..ow {
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            data.push(img.sample_bilinear(src_x, src_y));
        }
    }
    Image::from_clamped(ow, oh, data)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same(b.dims(), "mse")?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB with peak value 1. Identical images
/// give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut r = rng::rng(seed);
        Image::new(w, h, (0..w * h).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    fn conv_reference(img: &Image) -> Vec<f64> {
        let k = gaussian_kernel_5x5();
        let (w, h) = img.dims();
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (dy, row) in k.iter().enumerate() {
                    for (dx, &kw) in row.iter().enumerate() {
                        acc += kw
                            * img.get_clamped(x as isize + dx as isize - 2, y as isize + dy as isize - 2);
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    #[test]
    fn subtract_identity_and_constants() {
        let x = random_image(8, 8, 1);
        assert!(subtract(&x, &x).unwrap().data().iter().all(|&v| v == 0.0));
        let a = Image::filled(4, 4, 0.8);
        let b = Image::filled(4, 4, 0.3);
        for &v in subtract(&a, &b).unwrap().data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        // negative residue is discarded
        assert!(subtract(&b, &a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn subtract_rejects_shape_mismatch() {
        let e = subtract(&Image::zeros(4, 4), &Image::zeros(4, 5)).unwrap_err();
        assert!(matches!(e, Error::Shape { .. }));
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel_5x5();
        let s: f64 = k.iter().flatten().sum();
        assert!((s - 1.0).abs() < 1e-9);
        for i in 0..5 {
            for j in 0..5 {
                assert!((k[i][j] - k[j][i]).abs() < 1e-15);
                assert!((k[i][j] - k[4 - i][4 - j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gaussian_preserves_constants() {
        let out = gaussian5x5(&Image::filled(7, 9, 0.37)).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn gaussian_impulse_stamps_kernel() {
        let mut img = Image::zeros(9, 9);
        img.set(4, 4, 1.0);
        let out = gaussian5x5(&img).unwrap();
        let k = gaussian_kernel_5x5();
        for y in 0..9 {
            for x in 0..9 {
                let expected = if (2..7).contains(&x) && (2..7).contains(&y) {
                    k[y - 2][x - 2]
                } else {
                    0.0
                };
                assert!((out.get(x, y) - expected).abs() < 1e-12, "({x},{y})");
            }
        }
    }

    #[test]
    fn gaussian_matches_direct_convolution() {
        let img = random_image(16, 16, 42);
        let fast = gaussian5x5(&img).unwrap();
        let slow = conv_reference(&img);
        let worst = fast
            .data()
            .iter()
            .zip(&slow)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn gaussian_rejects_small_images() {
        assert!(gaussian5x5(&Image::zeros(4, 8)).is_err());
    }

    #[test]
    fn otsu_two_populations() {
        let img = Image::from_fn(16, 16, |x, _| if x % 2 == 0 { 0.2 } else { 0.8 });
        let o = otsu_binarize(&img, OTSU_LEVELS).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(o.mask.get(x, y), x % 2 == 1);
            }
        }
        assert!(o.threshold >= 0.2 && o.threshold < 0.8);
    }

    #[test]
    fn otsu_constant_is_empty() {
        let o = otsu_binarize(&Image::filled(8, 8, 0.5), OTSU_LEVELS).unwrap();
        assert!(o.mask.is_empty());
        assert_eq!(o.threshold_bin, 255);
    }

    #[test]
    fn otsu_rejects_single_level() {
        assert!(otsu_binarize(&Image::zeros(4, 4), 1).is_err());
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.0, 256), 0);
        assert_eq!(quantize(1.0, 256), 255);
        assert_eq!(quantize(0.5 / 255.0, 256), 1);
        assert_eq!(quantize(0.49 / 255.0, 256), 0);
    }

    #[test]
    fn intersect_identity_and_zero() {
        let x = random_image(6, 5, 3);
        assert_eq!(intersect(&x, &Mask::full(6, 5)).unwrap(), x);
        assert!(intersect(&x, &Mask::empty(6, 5))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(intersect(&x, &Mask::empty(5, 5)).is_err());
    }

    #[test]
    fn crop_centre_and_corner() {
        let src = Image::from_fn(2048, 2048, |x, y| ((x * 7 + y * 13) % 1000) as f64 / 1000.0);
        let patch = crop(&src, 1024, 1024, 512).unwrap();
        assert_eq!(patch.dims(), (512, 512));
        assert_eq!(patch.get(256, 256), src.get(1024, 1024));

        let corner = crop(&src, 0, 0, 512).unwrap();
        assert_eq!(corner.get(0, 0), src.get(0, 0));
        assert_eq!(corner.get(511, 511), src.get(511, 511));

        let far = crop(&src, 2047, 2047, 512).unwrap();
        assert_eq!(far.get(511, 511), src.get(2047, 2047));

        assert!(crop(&Image::zeros(10, 10), 5, 5, 11).is_err());
    }

    #[test]
    fn crop_then_resize_gives_training_geometry() {
        let src = Image::filled(2048, 2048, 0.5);
        let patch = crop(&src, 700, 900, 512).unwrap();
        assert_eq!(resize(&patch, 0.25).unwrap().dims(), (128, 128));
    }

    #[test]
    fn resize_identity_ratio() {
        let x = random_image(13, 7, 9);
        let y = resize(&x, 1.0).unwrap();
        assert_eq!(y.dims(), (13, 7));
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn resize_checkerboard_to_single_pixel() {
        // Pixel-centre alignment puts the one output sample at the
        // midpoint of the four inputs, i.e. their mean.
        let cb = Image::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = resize(&cb, 0.5).unwrap();
        assert_eq!(out.dims(), (1, 1));
        assert!((out.get(0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn resize_rejects_degenerate() {
        assert!(resize(&Image::zeros(4, 4), 0.1).is_err());
        assert!(resize(&Image::zeros(4, 4), 0.0).is_err());
        assert!(resize(&Image::zeros(4, 4), f64::NAN).is_err());
    }

    #[test]
    fn mse_psnr_closed_forms() {
        let a = Image::zeros(8, 8);
        let b = Image::filled(8, 8, 0.1);
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-12);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((psnr_from_mse(0.0036) - 24.436974992327126).abs() < 1e-9);
    }
}
