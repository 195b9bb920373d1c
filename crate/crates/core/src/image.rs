//! RGB rasters with values in `[0, 1]` and binary PPM (P6) I/O.

use std::io::{self, BufRead, Write};

use crate::autodiff::Tensor;

/// Row-major `height × width × 3` image.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-first `3 × H × W` tensor.
    pub fn to_chw(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.data[p * 3 + c];
            }
        }
        Tensor::new(&[3, self.height, self.width], out).expect("shape matches")
    }

    /// Inverse of [`RgbImage::to_chw`]; values are clamped into `[0, 1]`.
    pub fn from_chw(t: &Tensor) -> Self {
        let (h, w) = (t.shape()[t.rank() - 2], t.shape()[t.rank() - 1]);
        let hw = h * w;
        let src = t.data();
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[p * 3 + c] = src[c * hw + p].clamp(0.0, 1.0);
            }
        }
        Self { width: w, height: h, data }
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    /// Values rounded to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self { data: self.data.iter().map(|v| to_u8(*v) as f64 / 255.0).collect(), ..self.clone() }
    }

    pub fn write_ppm<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|v| to_u8(*v)).collect();
        out.write_all(&bytes)
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_ppm(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn read_ppm<R: BufRead>(mut input: R) -> io::Result<Self> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let mut fields = Vec::new();
        while fields.len() < 4 {
            let mut token = Vec::new();
            let mut byte = [0u8; 1];
            loop {
                if input.read(&mut byte)? == 0 {
                    return Err(bad("truncated PPM header"));
                }
                match byte[0] {
                    b'#' if token.is_empty() => {
                        let mut skip = Vec::new();
                        input.read_until(b'\n', &mut skip)?;
                    }
                    c if c.is_ascii_whitespace() => {
                        if !token.is_empty() {
                            break;
                        }
                    }
                    c => token.push(c),
                }
            }
            fields.push(String::from_utf8(token).map_err(|_| bad("non-ASCII PPM header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("not a binary PPM (P6)"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM header number"));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit PPM supported"));
        }
        let mut bytes = vec![0u8; width * height * 3];
        input.read_exact(&mut bytes)?;
        Ok(Self { width, height, data: bytes.iter().map(|b| *b as f64 / 255.0).collect() })
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_of_quantized_image() {
        let mut img = RgbImage::filled(3, 2, [0.5, 0.25, 1.0]);
        img.set(2, 1, [0.0, 0.1, 0.9]);
        let img = img.quantized();
        let bytes = img.to_ppm_bytes();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 18);
        assert_eq!(RgbImage::read_ppm(&bytes[..]).unwrap(), img);
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let mut bytes = b"P6 # made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 51]);
        let img = RgbImage::read_ppm(&bytes[..]).unwrap();
        assert_eq!(img.get(0, 0), [1.0, 0.0, 0.2]);
        assert!(RgbImage::read_ppm(&b"P3\n1 1\n255\n"[..]).is_err());
    }

    #[test]
    fn chw_round_trip() {
        let mut img = RgbImage::filled(4, 3, [0.1, 0.2, 0.3]);
        img.set(1, 2, [0.9, 0.8, 0.7]);
        let t = img.to_chw();
        assert_eq!(t.shape(), &[3, 3, 4]);
        assert_eq!(RgbImage::from_chw(&t), img);
    }
}
