//! Grayscale PNG (8/16-bit) read/write and binary PGM (P5) read.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

fn decode_err(path: &Path, message: impl ToString) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Load a PNG or PGM, chosen by file signature.
pub fn load(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let mut magic = [0u8; 2];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(|e| Error::io(path, e))?;
    if &magic == b"P5" {
        load_pgm(path)
    } else {
        load_png(path)
    }
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(decode_err(path, format!("not grayscale: {other:?}"))),
    };
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let line = &buf[y * info.line_size..(y + 1) * info.line_size];
        for x in 0..w {
            let v = match info.bit_depth {
                png::BitDepth::Sixteen => {
                    let i = 2 * channels * x;
                    u16::from_be_bytes([line[i], line[i + 1]]) as f64 / 65535.0
                }
                png::BitDepth::Eight => line[channels * x] as f64 / 255.0,
                other => return Err(decode_err(path, format!("unsupported depth {other:?}"))),
            };
            data.push(v);
        }
    }
    Image::new(w, h, data)
}

pub fn save_png(img: &Image, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(img, depth)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// PNG file bytes for `img` (values rounded half-up to the bit depth).
pub fn encode_png(img: &Image, depth: BitDepth) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut encoder = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
    encoder.set_color(png::ColorType::Grayscale);
    let bytes: Vec<u8> = match depth {
        BitDepth::Eight => {
            encoder.set_depth(png::BitDepth::Eight);
            img.data()
                .iter()
                .map(|&v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
                .collect()
        }
        BitDepth::Sixteen => {
            encoder.set_depth(png::BitDepth::Sixteen);
            img.data()
                .iter()
                .flat_map(|&v| ((v * 65535.0 + 0.5).floor().clamp(0.0, 65535.0) as u16).to_be_bytes())
                .collect()
        }
    };
    let enc_err = |e: png::EncodingError| Error::Format {
        what: "png",
        message: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(enc_err)?;
    writer.write_image_data(&bytes).map_err(enc_err)?;
    writer.finish().map_err(enc_err)?;
    Ok(out)
}

fn pgm_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    if pgm_token(&bytes, &mut pos).as_deref() != Some("P5") {
        return Err(decode_err(path, "not a binary PGM"));
    }
    let mut num = |name: &str| -> Result<usize> {
        pgm_token(&bytes, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| decode_err(path, format!("bad PGM {name}")))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(decode_err(path, format!("bad PGM maxval {maxval}")));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let bpp = if maxval > 255 { 2 } else { 1 };
    let raster = bytes
        .get(pos..pos + w * h * bpp)
        .ok_or_else(|| decode_err(path, "truncated PGM raster"))?;
    let data = if bpp == 1 {
        raster.iter().map(|&b| b as f64 / maxval as f64).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64)
            .collect()
    };
    Image::from_clamped(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        Image::from_fn(17, 9, |x, y| (x + 17 * y) as f64 / (17.0 * 9.0))
    }

    #[test]
    fn png16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = ramp();
        save_png(&img, &p, BitDepth::Sixteen).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(back.dims(), img.dims());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn png8_rounds_half_up() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.png");
        let img = Image::new(2, 1, vec![0.5 / 255.0, 1.0]).unwrap();
        save_png(&img, &p, BitDepth::Eight).unwrap();
        let back = load_png(&p).unwrap();
        assert_eq!(back.data(), &[1.0 / 255.0, 1.0]);
    }

    #[test]
    fn pgm_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# fixture\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 51, 102, 153, 204, 255]);
        std::fs::write(&p, bytes).unwrap();
        let img = load(&p).unwrap();
        assert_eq!(img.dims(), (3, 2));
        assert!((img.get(1, 0) - 0.2).abs() < 1e-12);
        assert_eq!(img.get(2, 1), 1.0);
    }

    #[test]
    fn missing_file_reports_path() {
        let e = load("/nonexistent/x.png").unwrap_err();
        assert!(e.to_string().contains("/nonexistent/x.png"));
    }
}
