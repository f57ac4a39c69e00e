//! Binary PPM (P6, 8-bit RGB) read/write. Pixel values map linearly between
//! `[−1, 1]` and `[0, 255]`.

use std::io::Write;
use std::path::Path;

use crate::error::{DimError, Result};
use crate::numerics::Tensor;

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Encodes `[H × W × C]` (C = 1 is written as grey, C = 3 as RGB).
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    let (h, w, c) = match s {
        &[h, w, c] if c == 1 || c == 3 => (h, w, c),
        _ => {
            return Err(DimError::Format(format!(
                "PPM needs [H × W × 1|3], got {s:?}"
            )))
        }
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for px in image.data().chunks(c) {
        if c == 1 {
            out.extend_from_slice(&[to_byte(px[0]); 3]);
        } else {
            out.extend(px.iter().map(|&v| to_byte(v)));
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_ppm(image)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Decodes a P6 image to `[1 × H × W × 3]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| DimError::Format(format!("PPM: {m}"));
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("only binary P6 is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 || w == 0 || h == 0 {
        return Err(bad("need 8-bit samples and a non-empty image"));
    }
    let payload = &bytes[(pos + 1).min(bytes.len())..];
    if payload.len() < w * h * 3 {
        return Err(bad("truncated pixel data"));
    }
    Tensor::new(vec![1, h, w, 3], payload[..w * h * 3].iter().map(|&b| from_byte(b)).collect())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    decode_ppm(&bytes).map_err(|e| DimError::Format(format!("{}: {e}", path.display())))
}

/// Tiles `images` (each `[H × W × C]`) into a grid `cols` wide with a one
/// pixel border of −1.
pub fn tile(images: &[Tensor], cols: usize) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| DimError::InvalidArgument("nothing to tile".into()))?;
    let (h, w, c) = match first.shape() {
        &[h, w, c] => (h, w, c),
        s => return Err(DimError::InvalidArgument(format!("tile needs [H × W × C], got {s:?}"))),
    };
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
    let mut out = Tensor::full(&[gh, gw, c], -1.0);
    for (k, im) in images.iter().enumerate() {
        if im.shape() != first.shape() {
            return Err(DimError::InvalidArgument("tile inputs differ in shape".into()));
        }
        let (oy, ox) = (1 + (k / cols) * (h + 1), 1 + (k % cols) * (w + 1));
        for y in 0..h {
            let dst = ((oy + y) * gw + ox) * c;
            out.data_mut()[dst..dst + w * c].copy_from_slice(&im.data()[y * w * c..(y + 1) * w * c]);
        }
    }
    Ok(out)
}
