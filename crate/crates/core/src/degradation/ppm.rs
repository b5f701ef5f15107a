//! Binary PPM (`P6`, maxval 255) reading and writing.

use std::path::Path;

use crate::error::{Error, Result};

use super::RgbImage;

/// Parses a `P6` image. Header comments (`#` to end of line) are accepted.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let magic = bytes
        .get(..2)
        .ok_or_else(|| Error::Format("empty PPM".into()))?;
    match magic {
        b"P6" => {}
        b"P1" | b"P2" | b"P3" | b"P4" | b"P5" => {
            return Err(Error::UnsupportedFormat(format!(
                "PNM variant {} (only binary P6 is supported)",
                String::from_utf8_lossy(magic)
            )))
        }
        _ => return Err(Error::Format("missing P6 magic".into())),
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each number
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let digits = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = digits.parse().map_err(|_| {
            Error::Format(format!(
                "bad PPM header field {} at byte {start}",
                ["width", "height", "maxval"][i]
            ))
        })?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "maxval {maxval} unsupported, need 255"
        )));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("no whitespace after PPM maxval".into()));
    }
    pos += 1;
    let expected = width * height * 3;
    let pixels = &bytes[pos..];
    if pixels.len() < expected {
        return Err(Error::Length(format!(
            "PPM pixel data has {} bytes, {width}x{height} needs {expected}",
            pixels.len()
        )));
    }
    RgbImage::new(width, height, pixels[..expected].to_vec())
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn write_ppm(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}
