//! Binary PGM (P5) images with 8-bit samples.

use std::path::Path;

use crate::error::{Result, SptError};
use crate::mask::{Image, Mask};

/// Largest accepted pixel count.
const MAX_PIXELS: usize = 1 << 24;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u8,
    pub pixels: Vec<u8>,
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a P5 file with `maxval <= 255`. Header comments are allowed;
/// trailing bytes after the raster are rejected.
pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm> {
    let err = |m: &str| SptError::Parse(format!("PGM: {m}"));
    if !bytes.starts_with(b"P5") {
        return Err(err("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos || pos - start > 9 {
            return Err(err("malformed header number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| err("malformed header number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err("header must end with one whitespace byte"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(err("zero image extent"));
    }
    if width.checked_mul(height).is_none_or(|n| n > MAX_PIXELS) {
        return Err(err("image too large"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(err("maxval must lie in 1..=255"));
    }
    let raster = &bytes[pos..];
    if raster.len() != width * height {
        return Err(err(&format!("expected {} raster bytes, found {}", width * height, raster.len())));
    }
    let maxval = maxval as u8;
    if raster.iter().any(|&b| b > maxval) {
        return Err(err("sample exceeds maxval"));
    }
    Ok(Pgm {
        width,
        height,
        maxval,
        pixels: raster.to_vec(),
    })
}

impl Pgm {
    pub fn to_image(&self) -> Result<Image> {
        let scale = self.maxval as f64;
        Image::new(self.width, self.height, self.pixels.iter().map(|&b| b as f64 / scale).collect())
    }

    /// Pixels must be 0 or `maxval`.
    pub fn to_mask(&self) -> Result<Mask> {
        if self.pixels.iter().any(|&b| b != 0 && b != self.maxval) {
            return Err(SptError::Parse("PGM mask has values other than 0 and maxval".into()));
        }
        Mask::from_bits(self.width, self.height, self.pixels.iter().map(|&b| b != 0).collect())
    }
}

pub fn image_to_pgm(image: &Image) -> Vec<u8> {
    encode_pgm(image.width(), image.height(), &image.to_u8())
}

pub fn mask_to_pgm(mask: &Mask) -> Vec<u8> {
    let px: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode_pgm(mask.width(), mask.height(), &px)
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_pgm(&std::fs::read(path)?)?.to_image()
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    decode_pgm(&std::fs::read(path)?)?.to_mask()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_comments() {
        let px: Vec<u8> = (0..12).collect();
        let enc = encode_pgm(4, 3, &px);
        assert_eq!(decode_pgm(&enc).unwrap().pixels, px);
        let commented = b"P5 # hi\n4 # w\n3\n# m\n255\n".iter().chain(&px).copied().collect::<Vec<_>>();
        assert_eq!(decode_pgm(&commented).unwrap().width, 4);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode_pgm(b"P2\n1 1\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n2 1\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n255\n\x00\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n9\n\x0a").is_err());
        assert!(decode_pgm(b"P5\n0 1\n255\n").is_err());
        assert!(decode_pgm(b"P5\n99999 99999\n255\n").is_err());
    }

    #[test]
    fn masks_must_be_binary() {
        let m = Mask::from_fn(3, 2, |x, y| x == y);
        assert_eq!(decode_pgm(&mask_to_pgm(&m)).unwrap().to_mask().unwrap(), m);
        assert!(decode_pgm(&encode_pgm(1, 1, &[7])).unwrap().to_mask().is_err());
    }
}
