//! 8-bit grayscale images: binary PGM files and side-by-side grids.

use crate::error::{AidError, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Separator colour between grid cells.
pub const SEPARATOR: u8 = 255;

/// Maps [−1, 1] to [0, 255] as ⌊(v+1)/2·255 + 0.5⌋, clamped.
pub fn to_gray(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    ((v + 1.0) / 2.0 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Inverse of [`to_gray`] up to quantization.
pub fn from_gray(g: u8) -> f64 {
    g as f64 / 255.0 * 2.0 - 1.0
}

impl GrayImage {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(AidError::Dimension(format!("image must be 2-D, got {:?}", t.shape())));
        }
        Ok(Self {
            width: t.cols(),
            height: t.rows(),
            pixels: t.data().iter().map(|&v| to_gray(v)).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.pixels.iter().map(|&g| from_gray(g)).collect(),
        )
        .expect("pixel count matches dimensions")
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| AidError::Format(format!("malformed PGM: {why}"));
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // Skip whitespace and comments.
            while pos < bytes.len() {
                if bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                } else if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary graymap"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let n = width.checked_mul(height).ok_or_else(|| bad("dimensions overflow"))?;
        if bytes.len() != pos + n {
            return Err(bad("raster size does not match the header"));
        }
        Ok(Self {
            width,
            height,
            pixels: bytes[pos..].to_vec(),
        })
    }
}

/// Tiles equal-size images into rows with 1-pixel separators.
pub fn render_grid(rows: &[Vec<Tensor>]) -> Result<GrayImage> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| AidError::InsufficientSamples("no images to render".into()))?;
    let (h, w) = (first.rows(), first.cols());
    for img in rows.iter().flatten() {
        if img.shape() != [h, w] {
            return Err(AidError::Dimension(format!(
                "grid images must all be {h}×{w}, got {:?}",
                img.shape()
            )));
        }
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = cols * w + cols.saturating_sub(1);
    let height = rows.len() * h + rows.len().saturating_sub(1);
    let mut pixels = vec![SEPARATOR; width * height];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            let (y0, x0) = (ri * (h + 1), ci * (w + 1));
            for y in 0..h {
                for (x, &v) in img.row(y).iter().enumerate() {
                    pixels[(y0 + y) * width + x0 + x] = to_gray(v);
                }
            }
        }
    }
    Ok(GrayImage { width, height, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_mapping() {
        assert_eq!(to_gray(-1.0), 0);
        assert_eq!(to_gray(1.0), 255);
        assert_eq!(to_gray(0.0), 128);
        assert_eq!(to_gray(-7.0), 0);
        assert_eq!(to_gray(3.0), 255);
        for g in 0..=255u8 {
            assert_eq!(to_gray(from_gray(g)), g);
        }
    }

    #[test]
    fn pgm_round_trip() {
        let img = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0, 10, 32, 200, 255, 9],
        };
        let bytes = img.encode_pgm();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(GrayImage::decode_pgm(&bytes).unwrap(), img);
        let commented = b"P5 # note\n3 2\n255\n\x00\x0a\x20\xc8\xff\x09";
        assert_eq!(GrayImage::decode_pgm(commented).unwrap(), img);
        assert!(GrayImage::decode_pgm(&bytes[..bytes.len() - 1]).is_err());
        assert!(GrayImage::decode_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn grid_layout() {
        let a = Tensor::filled(&[16, 16], -1.0);
        let strip = render_grid(&[vec![a.clone(); 7]]).unwrap();
        assert_eq!((strip.width, strip.height), (118, 16));
        assert_eq!(strip.pixels[16], SEPARATOR);
        assert_eq!(strip.pixels[15], 0);

        let single = render_grid(&[vec![a.clone()]]).unwrap();
        assert_eq!((single.width, single.height), (16, 16));
        assert!(single.pixels.iter().all(|&p| p == 0));

        let two_rows = render_grid(&[vec![a.clone(); 2], vec![a.clone(); 2]]).unwrap();
        assert_eq!((two_rows.width, two_rows.height), (33, 33));
        assert!(render_grid(&[vec![a, Tensor::zeros(&[8, 8])]]).is_err());
    }
}
