//! Grayscale images: binary PGM I/O, flipping, and the two resamplers used by
//! the pipeline (bilinear for patches, bicubic for augmentation windows).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel float image, row-major, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} with {} samples",
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image { height, width, data: vec![0.0; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Value at integer coordinates, zero outside the image.
    #[inline]
    pub fn get_or_zero(&self, y: isize, x: isize) -> f32 {
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            0.0
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            out.extend(row.iter().rev());
        }
        Image { height: self.height, width: self.width, data: out }
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Bilinear sample at continuous pixel coordinates where pixel `(i, j)`
    /// covers `[j, j+1) x [i, i+1)` and its centre is `(i + 0.5, j + 0.5)`.
    pub fn sample_bilinear(&self, y: f64, x: f64) -> f32 {
        let fy = y - 0.5;
        let fx = x - 0.5;
        let y0 = fy.floor();
        let x0 = fx.floor();
        let ty = (fy - y0) as f32;
        let tx = (fx - x0) as f32;
        let (y0, x0) = (y0 as isize, x0 as isize);
        let a = self.get_or_zero(y0, x0);
        let b = self.get_or_zero(y0, x0 + 1);
        let c = self.get_or_zero(y0 + 1, x0);
        let d = self.get_or_zero(y0 + 1, x0 + 1);
        if tx == 0.0 && ty == 0.0 {
            return a;
        }
        (a * (1.0 - tx) + b * tx) * (1.0 - ty) + (c * (1.0 - tx) + d * tx) * ty
    }

    /// Crop the window `[top, top+h) x [left, left+w)` (may extend past the
    /// borders, which read as zero) and resize it to `out_h x out_w` with
    /// Keys bicubic interpolation (a = -0.5).
    pub fn crop_resize_bicubic(
        &self,
        top: f64,
        left: f64,
        h: f64,
        w: f64,
        out_h: usize,
        out_w: usize,
    ) -> Image {
        let sy = h / out_h as f64;
        let sx = w / out_w as f64;
        let xs: Vec<(isize, [f32; 4])> = (0..out_w)
            .map(|j| cubic_taps(left + (j as f64 + 0.5) * sx - 0.5))
            .collect();
        let mut data = Vec::with_capacity(out_h * out_w);
        for i in 0..out_h {
            let (y0, wy) = cubic_taps(top + (i as f64 + 0.5) * sy - 0.5);
            for &(x0, wx) in &xs {
                let mut acc = 0.0f32;
                for (dy, wyv) in wy.iter().enumerate() {
                    if *wyv == 0.0 {
                        continue;
                    }
                    let yy = y0 + dy as isize;
                    let mut row = 0.0f32;
                    for (dx, wxv) in wx.iter().enumerate() {
                        if *wxv != 0.0 {
                            row += wxv * self.get_or_zero(yy, x0 + dx as isize);
                        }
                    }
                    acc += wyv * row;
                }
                data.push(acc);
            }
        }
        Image { height: out_h, width: out_w, data }
    }

    pub fn read_pgm(path: &Path) -> Result<Image> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (w, h, maxval, offset) = parse_pgm_header(&raw, path)?;
        let wide = maxval > 255;
        let bytes = if wide { 2 } else { 1 };
        let body = &raw[offset..];
        if body.len() < w * h * bytes {
            return Err(Error::format(path, "truncated PGM payload"));
        }
        let scale = 1.0 / maxval as f32;
        let data = if wide {
            body.chunks_exact(2)
                .take(w * h)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 * scale)
                .collect()
        } else {
            body[..w * h].iter().map(|&b| b as f32 * scale).collect()
        };
        Image::new(h, w, data)
    }
}

fn cubic_weight(t: f64) -> f32 {
    const A: f64 = -0.5;
    let t = t.abs();
    let v = if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    };
    v as f32
}

/// First tap index and four weights for sampling at pixel-index coordinate `p`.
fn cubic_taps(p: f64) -> (isize, [f32; 4]) {
    let base = p.floor();
    let t = p - base;
    let w = if t == 0.0 {
        [0.0, 1.0, 0.0, 0.0]
    } else {
        [cubic_weight(1.0 + t), cubic_weight(t), cubic_weight(1.0 - t), cubic_weight(2.0 - t)]
    };
    (base as isize - 1, w)
}

fn parse_pgm_header(raw: &[u8], path: &Path) -> Result<(usize, usize, usize, usize)> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < raw.len() && raw[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < raw.len() && raw[i] == b'#' {
            while i < raw.len() && raw[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < raw.len() && !raw[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&raw[start..i]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::format(path, "not a binary PGM (P5)"));
    }
    let num = |s: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| Error::format(path, format!("bad PGM field {s}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, "invalid PGM dimensions or maxval"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    Ok((w, h, maxval, i + 1))
}

/// Encode 16-bit samples as a binary PGM with maxval 65535.
pub fn encode_pgm16(height: usize, width: usize, samples: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(samples.len() * 2);
    for s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

/// Encode 8-bit samples as a binary PGM with maxval 255.
pub fn encode_pgm8(height: usize, width: usize, samples: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm16_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let samples: Vec<u16> = (0..12).map(|i| i * 5000).collect();
        fs::write(&p, encode_pgm16(3, 4, &samples)).unwrap();
        let img = Image::read_pgm(&p).unwrap();
        assert_eq!((img.height, img.width), (3, 4));
        assert!((img.get(2, 3) - 55000.0 / 65535.0).abs() < 1e-6);
        let raw = fs::read(&p).unwrap();
        assert!(raw.starts_with(b"P5\n4 3\n65535\n"));
        assert_eq!(&raw[raw.len() - 2..], &55000u16.to_be_bytes());
    }

    #[test]
    fn bicubic_identity_window_is_exact() {
        let img = Image::new(5, 6, (0..30).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let out = img.crop_resize_bicubic(0.0, 0.0, 5.0, 6.0, 5, 6);
        assert_eq!(out, img);
    }

    #[test]
    fn bicubic_window_past_left_edge_reads_zero() {
        let img = Image::new(8, 8, vec![1.0; 64]).unwrap();
        let out = img.crop_resize_bicubic(0.0, -4.0, 8.0, 8.0, 8, 8);
        for y in 0..8 {
            for x in 0..4 {
                assert_eq!(out.get(y, x), 0.0);
            }
        }
    }

    #[test]
    fn bilinear_on_pixel_centres_is_exact() {
        let img = Image::new(3, 3, (0..9).map(|i| i as f32).collect()).unwrap();
        assert_eq!(img.sample_bilinear(1.5, 2.5), 5.0);
        assert_eq!(img.sample_bilinear(1.0, 2.5), 3.5);
    }
}
