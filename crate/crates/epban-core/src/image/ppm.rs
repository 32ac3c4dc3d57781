//! Binary PPM (P6, maxval 255) with a bit-exact 8-bit round trip.

use std::fs;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> HeaderParser<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_string(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skip whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn read_number(&mut self) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected a decimal number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("number out of range"))
    }
}

/// Decode a binary P6 PPM with maxval 255 into unit-range float planes.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(&path_str, e))?;
    decode_ppm(&bytes, &path_str)
}

/// Decode from an in-memory byte buffer; `path_str` labels errors.
pub fn decode_ppm(bytes: &[u8], path_str: &str) -> Result<Image> {
    let mut p = HeaderParser { bytes, pos: 0, path: path_str };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(p.err(format!(
            "expected binary PPM magic \"P6\", found {:?} (ASCII variants unsupported)",
            found
        )));
    }
    p.pos = 2;
    let width = p.read_number()?;
    let height = p.read_number()?;
    let maxval = p.read_number()?;
    if maxval != 255 {
        return Err(p.err(format!("maxval {} unsupported; only 255", maxval)));
    }
    // exactly one whitespace byte separates the header from the payload
    if p.pos >= bytes.len() || !bytes[p.pos].is_ascii_whitespace() {
        return Err(p.err("missing whitespace before pixel payload"));
    }
    p.pos += 1;
    if width == 0 || height == 0 {
        return Err(p.err("zero image dimension"));
    }
    let expected = 3 * width * height;
    let payload = &bytes[p.pos..];
    if payload.len() < expected {
        return Err(Error::Format {
            path: path_str.to_string(),
            offset: bytes.len(),
            msg: format!(
                "truncated payload: expected {} bytes, found {}",
                expected,
                payload.len()
            ),
        });
    }
    let mut img = Image::new(width, height);
    let plane = width * height;
    for i in 0..plane {
        for c in 0..3 {
            img.data_mut()[c * plane + i] = payload[3 * i + c] as f32 / 255.0;
        }
    }
    Ok(img)
}

/// Encode to binary P6 with maxval 255. Values are clamped and rounded to
/// the nearest 8-bit level, making write(read(f)) reproduce f bitwise.
pub fn write_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(&path_str, e))
}

/// Encode to an in-memory byte buffer.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    let plane = img.width() * img.height();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            let v = img.data()[c * plane + i].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn one_white_pixel_decodes_to_unit_values() {
        let bytes = b"P6\n1 1\n255\n\xff\xff\xff";
        let img = decode_ppm(bytes, "mem").unwrap();
        assert_eq!(img.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn random_image_round_trips_bitwise() {
        let mut rng = crate::seed::rng(4, "ppm-test");
        let mut bytes = b"P6\n8 8\n255\n".to_vec();
        for _ in 0..192 {
            bytes.push(rng.random::<u8>());
        }
        let img = decode_ppm(&bytes, "mem").unwrap();
        assert_eq!(encode_ppm(&img), bytes);
    }

    #[test]
    fn ascii_variant_is_rejected() {
        let err = decode_ppm(b"P3\n1 1\n255\n255 255 255\n", "mem").unwrap_err();
        assert!(err.to_string().contains("P6"), "{}", err);
    }

    #[test]
    fn wrong_maxval_is_rejected() {
        let err = decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0", "mem").unwrap_err();
        assert!(err.to_string().contains("maxval"), "{}", err);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let err = decode_ppm(b"P6\n2 2\n255\n\xff\xff", "mem").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated") && msg.contains("12"), "{}", msg);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P6 # comment\n# another\n2 1\n255\n\x00\x01\x02\x03\x04\x05";
        let img = decode_ppm(bytes, "mem").unwrap();
        assert_eq!(img.width(), 2);
        assert_eq!(img.height(), 1);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let mut img = Image::new(3, 2);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = i as f32 / 17.0;
        }
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        // one more write must reproduce the first file bitwise
        let again = encode_ppm(&back);
        assert_eq!(again, std::fs::read(&path).unwrap());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }
}
