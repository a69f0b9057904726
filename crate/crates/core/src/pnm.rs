//! Binary PGM (P5) and PPM (P6) reading and writing, maxval 255 only.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded 8-bit image, row-major, channel-last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn parse(bytes: &[u8]) -> std::result::Result<PnmImage, String> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos).ok_or("missing magic")?;
    let channels = match magic.as_slice() {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(format!(
                "unsupported magic {:?}",
                String::from_utf8_lossy(other)
            ))
        }
    };
    let width = parse_usize(bytes, &mut pos, "width")?;
    let height = parse_usize(bytes, &mut pos, "height")?;
    let maxval = parse_usize(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(format!("maxval must be 255, got {maxval}"));
    }
    if width == 0 || height == 0 {
        return Err("zero-sized image".into());
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing raster separator".into());
    }
    pos += 1;
    let expected = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(format!(
            "raster truncated: expected {expected} bytes, found {}",
            raster.len()
        ));
    }
    Ok(PnmImage {
        width,
        height,
        channels,
        data: raster[..expected].to_vec(),
    })
}

fn skip_whitespace_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Option<Vec<u8>> {
    skip_whitespace_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (start < *pos).then(|| bytes[start..*pos].to_vec())
}

fn parse_usize(bytes: &[u8], pos: &mut usize, what: &str) -> std::result::Result<usize, String> {
    let tok = next_token(bytes, pos).ok_or_else(|| format!("missing {what}"))?;
    std::str::from_utf8(&tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("invalid {what} {:?}", String::from_utf8_lossy(&tok)))
}

pub fn read(path: &Path) -> Result<PnmImage> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse(&bytes).map_err(|reason| Error::ImageParse {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count mismatch");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn encode_ppm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height * 3, "pixel count mismatch");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(&encode_pgm(width, height, pixels))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
