//! Portable pixmaps (P6 color, P5 gray) and raw tensor files.
//!
//! Pixel values are mapped to `[0, 1]` on load. Tensor files are a 16-byte
//! header (`F2NT`, then height, width and channels as `u32` LE) followed by
//! the `f32` LE values in row-major channel-last order.

use std::path::Path;

use super::{read_bytes, write_bytes, ToolError};
use crate::convnet::{Shape, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"F2NT";

/// Decodes a binary PPM (3 channels) or PGM (1 channel) image.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor, ToolError> {
    let bad = |m: &str| ToolError::format(path, m);
    let mut pos = 0;
    let mut token = || -> Option<&[u8]> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| &bytes[start..pos])
    };
    let channels = match token() {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(bad("not a binary PPM (P6) or PGM (P5) image")),
    };
    let mut number = |what: &str| -> Result<usize, ToolError> {
        token()
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("bad {what} in header")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad("image has zero size"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit images (maxval 1..=255) are supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let n = width * height * channels;
    if bytes.len() < start + n {
        return Err(bad(&format!(
            "raster has {} bytes, header declares {n}",
            bytes.len().saturating_sub(start)
        )));
    }
    if bytes.len() > start + n {
        return Err(bad("trailing bytes after the raster"));
    }
    let scale = 1.0 / maxval as f32;
    let data = bytes[start..start + n].iter().map(|&b| b as f32 * scale).collect();
    Ok(Tensor::from_vec(Shape::new(height, width, channels), data)?)
}

/// Encodes a 1- or 3-channel tensor with values in `[0, 1]`, rounding to 8 bits.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>, ToolError> {
    let magic = match image.channels() {
        3 => "P6",
        1 => "P5",
        c => return Err(ToolError::InvalidInput(format!("cannot store a {c}-channel image as PPM/PGM"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Tensor, ToolError> {
    decode_pnm(&read_bytes(path)?, path)
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<(), ToolError> {
    write_bytes(path, &encode_pnm(image)?)
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let s = t.shape();
    let mut out = Vec::with_capacity(16 + 4 * s.len());
    out.extend_from_slice(TENSOR_MAGIC);
    for d in [s.height, s.width, s.channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor, ToolError> {
    if bytes.len() < 16 || &bytes[..4] != TENSOR_MAGIC {
        return Err(ToolError::format(path, "not a tensor file"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = Shape::new(dim(0), dim(1), dim(2));
    let body = &bytes[16..];
    if body.len() != 4 * shape.len() {
        return Err(ToolError::format(
            path,
            format!("payload is {} bytes, shape {shape} needs {}", body.len(), 4 * shape.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_vec(shape, data)?)
}

pub fn load_tensor(path: &Path) -> Result<Tensor, ToolError> {
    decode_tensor(&read_bytes(path)?, path)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<(), ToolError> {
    write_bytes(path, &encode_tensor(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip() {
        let t = Tensor::from_fn(Shape::new(3, 5, 3), |y, x, c| ((y * 15 + x * 3 + c) * 5) as f32 / 255.0);
        let bytes = encode_pnm(&t).unwrap();
        let back = decode_pnm(&bytes, Path::new("t.ppm")).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pnm_header_comments_and_gray() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let t = decode_pnm(&bytes, Path::new("g.pgm")).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 2, 1));
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn pnm_rejects_short_raster() {
        let mut bytes = b"P6 2 2 255\n".to_vec();
        bytes.extend_from_slice(&[0; 11]);
        let err = decode_pnm(&bytes, Path::new("x.ppm")).unwrap_err();
        assert_eq!(err.kind(), "format_error");
        assert!(err.to_string().contains("12"));
    }

    #[test]
    fn tensor_round_trip_is_exact() {
        let t = Tensor::from_fn(Shape::new(2, 3, 4), |y, x, c| (y as f32 - 0.3) * (x as f32 + 1e-7) * c as f32);
        let back = decode_tensor(&encode_tensor(&t), Path::new("t.f2nt")).unwrap();
        assert_eq!(back, t);
        assert!(decode_tensor(&encode_tensor(&t)[..30], Path::new("t.f2nt")).is_err());
    }
}
