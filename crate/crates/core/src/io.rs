//! File formats: 8-bit binary PGM (P5) for images and label masks, atomic
//! writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use reflect_autograd::{Real, Tensor};

use crate::error::{shape_err, Error, Result};
use crate::mask::LabelMask;

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary PGM with `maxval <= 255`, returning (width, height,
/// pixels).
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |msg: &str| Error::Format(format!("PGM: {msg}"));
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("expected magic P5"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header number"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(bad("unsupported dimensions or maxval"));
    }
    if !bytes.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(bad("missing header terminator"));
    }
    pos += 1;
    let data = &bytes[pos..];
    if data.len() != width * height {
        return Err(bad(&format!("expected {} pixels, found {}", width * height, data.len())));
    }
    Ok((width, height, data.to_vec()))
}

/// Quantises `round(255 x)` after clamping to `[0, 1]`.
pub fn save_image<T: Real>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let [b, c, h, w] = image.dims4()?;
    if b != 1 || c != 1 {
        return shape_err(format!("save_image needs [1, 1, H, W], got {:?}", image.shape()));
    }
    let px: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_atomic(path, &encode_pgm(w, h, &px))
}

/// Loads a PGM as `[1, 1, H, W]` with values `p / 255`.
pub fn load_image<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let (w, h, px) = decode_pgm(&fs::read(path)?)?;
    Ok(Tensor::new(
        vec![1, 1, h, w],
        px.into_iter().map(|p| T::lit(p as f64 / 255.0)).collect(),
    )?)
}

/// Labels are stored as raw class indices.
pub fn save_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    write_atomic(path, &encode_pgm(mask.width(), mask.height(), mask.data()))
}

pub fn load_mask(path: &Path) -> Result<LabelMask> {
    let (w, h, px) = decode_pgm(&fs::read(path)?)?;
    LabelMask::new(h, w, px)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5 # made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        assert_eq!(decode_pgm(&bytes).unwrap(), (2, 1, vec![7, 9]));
    }

    #[test]
    fn rejects_color_and_truncation() {
        assert!(matches!(decode_pgm(b"P6\n1 1\n255\n\0\0\0"), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\0"), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n65535\n"), Err(Error::Format(_))));
    }
}
