//! Binary PPM (P6) image files, the zero-dependency interchange format
//! used for samples and dataset exports.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Maps `[-1, 1]` intensities to a pixel byte:
/// `round(255 * (clamp(v, -1, 1) + 1) / 2)`.
#[inline]
pub fn to_pixel(v: f32) -> u8 {
    let c = v.clamp(-1.0, 1.0);
    (255.0 * (c + 1.0) / 2.0).round() as u8
}

/// Inverse of [`to_pixel`] up to quantization.
#[inline]
pub fn from_pixel(p: u8) -> f32 {
    p as f32 / 255.0 * 2.0 - 1.0
}

/// Encodes one `(3, h, w)` image in `[-1, 1]` as a P6 byte stream.
pub fn encode(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(Error::ShapeMismatch {
                op: "ppm_encode",
                detail: format!("expected (3, h, w), got {other:?}"),
            })
        }
    };
    if c != 3 {
        return Err(Error::ShapeMismatch {
            op: "ppm_encode",
            detail: format!("expected 3 channels, got {c}"),
        });
    }
    let mut out = Vec::with_capacity(32 + 3 * h * w);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let data = image.data();
    let plane = h * w;
    for i in 0..plane {
        out.push(to_pixel(data[i]));
        out.push(to_pixel(data[plane + i]));
        out.push(to_pixel(data[2 * plane + i]));
    }
    Ok(out)
}

/// Decodes a P6 file into a `(3, h, w)` tensor in `[-1, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0usize;
    let mut fields = Vec::new();
    // header: magic, width, height, maxval, separated by whitespace
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse { detail: "truncated ppm header".into() });
        }
        fields.push(&bytes[start..pos]);
    }
    pos += 1; // single whitespace after maxval
    if fields[0] != b"P6" {
        return Err(Error::Parse { detail: "not a P6 ppm".into() });
    }
    let parse = |b: &[u8]| -> Result<usize> {
        std::str::from_utf8(b)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse { detail: "bad ppm header field".into() })
    };
    let w = parse(fields[1])?;
    let h = parse(fields[2])?;
    let maxval = parse(fields[3])?;
    if maxval != 255 {
        return Err(Error::Parse { detail: format!("unsupported maxval {maxval}") });
    }
    let need = 3 * w * h;
    let body = bytes.get(pos..pos + need).ok_or_else(|| Error::Parse {
        detail: format!("ppm body too short: need {need} bytes"),
    })?;
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for i in 0..plane {
        data[i] = from_pixel(body[3 * i]);
        data[plane + i] = from_pixel(body[3 * i + 1]);
        data[2 * plane + i] = from_pixel(body[3 * i + 2]);
    }
    Tensor::from_vec(&[3, h, w], data)
}

pub fn write_file(path: &Path, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode(image)?)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Tensor<f32>> {
    decode(&fs::read(path)?)
}
