use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Copies the half-open region `[x0, x1) x [y0, y1)`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> GrayImage {
        let (w, h) = (x1 - x0, y1 - y0);
        let mut pixels = Vec::with_capacity(w * h);
        for y in y0..y1 {
            pixels.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x1]);
        }
        GrayImage {
            width: w,
            height: h,
            pixels,
        }
    }

    /// Bilinear resize with pixel-centre alignment; aspect ratio is not kept.
    pub fn resize(&self, width: usize, height: usize) -> GrayImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let coord = |dst: usize, scale: f64, limit: usize| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(limit - 1);
            (lo, hi, src - lo as f64)
        };
        let mut out = GrayImage::filled(width, height, 0.0);
        for y in 0..height {
            let (y0, y1, fy) = coord(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, fx) = coord(x, sx, self.width);
                let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
                let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
                out.set(x, y, (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
        out
    }

    /// Separable Gaussian blur with edge clamping.
    pub fn gaussian_blur(&self, sigma: f64) -> GrayImage {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
        let pass = |img: &GrayImage, horizontal: bool| {
            let mut out = GrayImage::filled(img.width, img.height, 0.0);
            for y in 0..img.height {
                for x in 0..img.width {
                    let mut acc = 0.0;
                    for (k, weight) in kernel.iter().enumerate() {
                        let off = k as isize - radius;
                        let (sx, sy) = if horizontal {
                            ((x as isize + off).clamp(0, img.width as isize - 1) as usize, y)
                        } else {
                            (x, (y as isize + off).clamp(0, img.height as isize - 1) as usize)
                        };
                        acc += weight * img.get(sx, sy);
                    }
                    out.set(x, y, acc.clamp(0.0, 1.0));
                }
            }
            out
        };
        pass(&pass(self, true), false)
    }

    /// Binary PGM (P5), 8 bits per pixel.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<GrayImage> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("PGM header ended early".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::Format(format!("expected P5 PGM, found {:?}", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM header field {s:?}")));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval == 0 || maxval > 255 || width == 0 || height == 0 {
            return Err(Error::Format(format!("unsupported PGM geometry {width}x{height} max {maxval}")));
        }
        pos += 1;
        let expected = (pos + width * height) as u64;
        if (bytes.len() as u64) < expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len() as u64,
            });
        }
        let pixels = bytes[pos..pos + width * height].iter().map(|&b| b as f64 / maxval as f64).collect();
        Ok(GrayImage { width, height, pixels })
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_pgm())?;
        Ok(())
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
        GrayImage::from_pgm(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> GrayImage {
        GrayImage {
            width: w,
            height: h,
            pixels: (0..w * h).map(|i| i as f64 / (w * h - 1) as f64).collect(),
        }
    }

    #[test]
    fn pgm_roundtrip_quantizes_to_bytes() {
        let img = ramp(7, 3);
        let back = GrayImage::from_pgm(&img.to_pgm()).unwrap();
        assert_eq!((back.width, back.height), (7, 3));
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(back.to_pgm(), img.to_pgm());
    }

    #[test]
    fn pgm_rejects_other_formats() {
        assert!(GrayImage::from_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(matches!(GrayImage::from_pgm(b"P5\n4 4\n255\n\x00\x01"), Err(Error::Truncated { .. })));
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ramp(5, 4);
        assert_eq!(img.resize(5, 4), img);
        let flat = GrayImage::filled(9, 3, 0.25).resize(4, 8);
        assert!(flat.pixels.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn blur_preserves_constant_and_range() {
        let flat = GrayImage::filled(10, 6, 0.7).gaussian_blur(1.3);
        assert!(flat.pixels.iter().all(|&v| (v - 0.7).abs() < 1e-12));
        assert!(ramp(12, 5).gaussian_blur(2.0).in_unit_range());
    }

    #[test]
    fn crop_copies_region() {
        let img = ramp(4, 3);
        let c = img.crop(1, 1, 3, 3);
        assert_eq!(c.pixels, vec![img.get(1, 1), img.get(2, 1), img.get(1, 2), img.get(2, 2)]);
    }
}
