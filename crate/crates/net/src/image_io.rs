//! RoI image input and output: 8-bit RGB PNG files, and raw tensors holding
//! a `BLTENSOR` magic, `u32` channels, height and width, then little-endian
//! `f32` values in channel-major order.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub const TENSOR_MAGIC: &[u8; 8] = b"BLTENSOR";

/// Decodes PNG bytes into a 3-channel map with values in `[0, 1]`.
pub fn png_from_bytes(bytes: &[u8]) -> Result<FeatureMap> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::invalid(format!("png decode: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut map = FeatureMap::zeros(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            *map.at_mut(c, y as usize, x as usize) = px[c] as f64 / 255.0;
        }
    }
    Ok(map)
}

/// Encodes the first three channels as an 8-bit RGB PNG, clamping to `[0, 1]`.
pub fn png_to_bytes(map: &FeatureMap) -> Result<Vec<u8>> {
    if map.channels < 3 {
        return Err(Error::invalid(format!("png needs 3 channels, map has {}", map.channels)));
    }
    let img = RgbImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| {
            (map.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::invalid(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

pub fn tensor_to_bytes(map: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * map.data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    for d in [map.channels, map.height, map.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &map.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < 20 || &bytes[..8] != TENSOR_MAGIC {
        return Err(Error::invalid("raw tensor: missing header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let body = &bytes[20..];
    let expected = c.checked_mul(h).and_then(|n| n.checked_mul(w)).and_then(|n| n.checked_mul(4));
    if expected != Some(body.len()) {
        return Err(Error::invalid(format!(
            "raw tensor: {c}×{h}×{w} needs {expected:?} bytes, found {}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    FeatureMap::from_vec(c, h, w, data)
}

/// Loads a RoI image: `.png` files as PNG, anything else as a raw tensor.
pub fn load_roi_image(path: &Path) -> Result<FeatureMap> {
    let bytes = std::fs::read(path)?;
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        png_from_bytes(&bytes)
    } else {
        tensor_from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> FeatureMap {
        let data = (0..c * h * w).map(|i| (i % 256) as f64 / 255.0).collect();
        FeatureMap::from_vec(c, h, w, data).unwrap()
    }

    #[test]
    fn png_round_trip_is_exact_on_8_bit_values() {
        let map = ramp(3, 5, 7);
        let back = png_from_bytes(&png_to_bytes(&map).unwrap()).unwrap();
        assert_eq!((back.channels, back.height, back.width), (3, 5, 7));
        for (a, b) in map.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(png_to_bytes(&FeatureMap::zeros(2, 4, 4)).is_err());
        assert!(png_from_bytes(b"not a png").is_err());
    }

    #[test]
    fn raw_tensor_round_trip_and_validation() {
        let map = ramp(4, 3, 2);
        let bytes = tensor_to_bytes(&map);
        let back = tensor_from_bytes(&bytes).unwrap();
        for (a, b) in map.data.iter().zip(&back.data) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert!(tensor_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(tensor_from_bytes(b"BLTENSO").is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(tensor_from_bytes(&wrong).is_err());
    }

    #[test]
    fn loader_dispatches_on_extension() {
        let dir = tempfile::tempdir().unwrap();
        let map = ramp(3, 4, 4);
        let png = dir.path().join("roi.PNG");
        std::fs::write(&png, png_to_bytes(&map).unwrap()).unwrap();
        assert_eq!(load_roi_image(&png).unwrap().width, 4);
        let raw = dir.path().join("roi.bin");
        std::fs::write(&raw, tensor_to_bytes(&map)).unwrap();
        assert_eq!(load_roi_image(&raw).unwrap().channels, 3);
        assert!(matches!(load_roi_image(&dir.path().join("missing.png")), Err(Error::Io(_))));
    }
}
