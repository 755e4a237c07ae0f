//! 8-bit RGB images and binary PPM (`P6`) encoding.

use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("bad image header: {0}")]
    BadHeader(String),
    #[error("truncated pixel data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major interleaved RGB pixels.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RgbImage({}x{})", self.width, self.height)
    }
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Option<Self> {
        (pixels.len() == width * height * 3).then_some(RgbImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        RgbImage { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn write_ppm<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.pixels)
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.pixels.len() + 20);
        self.write_ppm(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_ppm<R: Read>(mut input: R) -> Result<Self, ImageError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::from_ppm_bytes(&bytes)
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // skip whitespace and comments
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(_) => break,
                    None => return Err(ImageError::BadHeader("unexpected end of header".into())),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
                pos += 1;
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates maxval from the raster
        if pos >= bytes.len() {
            return Err(ImageError::BadHeader("missing raster separator".into()));
        }
        pos += 1;
        if fields[0] != "P6" {
            return Err(ImageError::BadHeader(format!("magic {:?}, expected P6", fields[0])));
        }
        let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| ImageError::BadHeader(format!("invalid {what} {s:?}")));
        let width = parse(&fields[1], "width")?;
        let height = parse(&fields[2], "height")?;
        let maxval = parse(&fields[3], "maxval")?;
        if maxval != 255 {
            return Err(ImageError::BadHeader(format!("maxval {maxval}, expected 255")));
        }
        let expected = width * height * 3;
        let raster = &bytes[pos..];
        if raster.len() != expected {
            return Err(ImageError::Truncated { expected, found: raster.len() });
        }
        Ok(RgbImage { width, height, pixels: raster.to_vec() })
    }
}
