//! Float framebuffers, 8-bit tone mapping and binary PPM.

use std::io::{self, Write};
use std::path::Path;

use crate::geom::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: u32,
    pub height: u32,
    /// Row-major, top row first.
    pub pixels: Vec<Vec3>,
}

impl FloatImage {
    pub fn new(width: u32, height: u32) -> FloatImage {
        FloatImage {
            width,
            height,
            pixels: vec![Vec3::ZERO; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> Vec3 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn to_rgb8(&self) -> Rgb8Image {
        let mut data = Vec::with_capacity(self.pixels.len() * 3);
        for p in &self.pixels {
            data.extend(p.to_array().map(tone_map));
        }
        Rgb8Image {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Clamp to [0, 1], then quantize with round-half-up. NaN maps to 0.
pub fn tone_map(c: f64) -> u8 {
    let c = if c.is_nan() { 0.0 } else { c.clamp(0.0, 1.0) };
    (c * 255.0 + 0.5).floor() as u8
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8Image {
    pub width: u32,
    pub height: u32,
    /// `width * height * 3` bytes, row-major, top row first.
    pub data: Vec<u8>,
}

impl Rgb8Image {
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> io::Result<()> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.encode_ppm())?;
        f.flush()
    }

    /// Parses a binary PPM with maxval 255.
    pub fn decode_ppm(bytes: &[u8]) -> Result<Rgb8Image, String> {
        let mut fields = Vec::with_capacity(4);
        let mut at = 0;
        while fields.len() < 4 {
            while at < bytes.len() && (bytes[at].is_ascii_whitespace() || bytes[at] == b'#') {
                if bytes[at] == b'#' {
                    while at < bytes.len() && bytes[at] != b'\n' {
                        at += 1;
                    }
                } else {
                    at += 1;
                }
            }
            let start = at;
            while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
                at += 1;
            }
            if start == at {
                return Err("truncated PPM header".into());
            }
            fields.push(
                std::str::from_utf8(&bytes[start..at])
                    .map_err(|_| "non-ASCII PPM header")?
                    .to_owned(),
            );
        }
        if fields[0] != "P6" {
            return Err(format!("expected P6, found {}", fields[0]));
        }
        let num = |s: &str| {
            s.parse::<u32>()
                .map_err(|_| format!("bad PPM number {s:?}"))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        let data = &bytes[(at + 1).min(bytes.len())..];
        let want = width as usize * height as usize * 3;
        if data.len() != want {
            return Err(format!(
                "PPM body has {} bytes, expected {want}",
                data.len()
            ));
        }
        Ok(Rgb8Image {
            width,
            height,
            data: data.to_vec(),
        })
    }
}
