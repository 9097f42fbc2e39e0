//! Minimal BMP codec: uncompressed 8-bit palette and 24-bit images.

use std::path::Path;

use super::image::ImageBuffer;
use crate::error::{Error, Result};

const FILE_HEADER: usize = 14;
const INFO_HEADER: usize = 40;

fn u16_at(b: &[u8], at: usize) -> Result<u16> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| Error::CorruptFile(format!("header truncated at byte {at}")))
}

fn u32_at(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| Error::CorruptFile(format!("header truncated at byte {at}")))
}

fn luminance(r: u8, g: u8, b: u8) -> f32 {
    ((0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0) as f32
}

fn row_stride(bits: usize, width: usize) -> usize {
    (bits * width).div_ceil(32) * 4
}

/// Reads and decodes a BMP file to grayscale.
pub fn decode_bmp(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bmp_bytes(&bytes)
}

/// Decodes BMP bytes to a grayscale image with values in `[0,1]`.
///
/// 24-bit pixels are reduced to `0.299R + 0.587G + 0.114B`; palette entries
/// likewise.
pub fn decode_bmp_bytes(b: &[u8]) -> Result<ImageBuffer> {
    if b.len() < 2 || &b[..2] != b"BM" {
        return Err(Error::CorruptFile("missing BM signature".into()));
    }
    let data_offset = u32_at(b, 10)? as usize;
    let dib = u32_at(b, 14)? as usize;
    if dib < INFO_HEADER {
        return Err(Error::UnsupportedFormat(format!("{dib}-byte core header")));
    }
    let width = u32_at(b, 18)? as i32;
    let height = u32_at(b, 22)? as i32;
    let bits = u16_at(b, 28)?;
    let compression = u32_at(b, 30)?;
    let colors_used = u32_at(b, 46)? as usize;
    if compression != 0 {
        return Err(Error::UnsupportedFormat(format!("compression method {compression}")));
    }
    if bits != 8 && bits != 24 {
        return Err(Error::UnsupportedFormat(format!("{bits} bits per pixel")));
    }
    if width <= 0 || height == 0 || height == i32::MIN {
        return Err(Error::CorruptFile(format!("invalid dimensions {width}x{height}")));
    }
    let (w, h) = (width as usize, height.unsigned_abs() as usize);
    let top_down = height < 0;

    let palette: Vec<f32> = if bits == 8 {
        let count = if colors_used == 0 { 256 } else { colors_used.min(256) };
        let start = FILE_HEADER + dib;
        let table = b
            .get(start..start + 4 * count)
            .ok_or_else(|| Error::CorruptFile("palette truncated".into()))?;
        table.chunks_exact(4).map(|e| luminance(e[2], e[1], e[0])).collect()
    } else {
        Vec::new()
    };

    let stride = row_stride(bits as usize, w);
    let end = stride
        .checked_mul(h)
        .and_then(|n| n.checked_add(data_offset))
        .ok_or_else(|| Error::CorruptFile("pixel array size overflows".into()))?;
    let pixels = b
        .get(data_offset..end)
        .ok_or_else(|| Error::CorruptFile(format!("pixel data truncated: need {end} bytes, have {}", b.len())))?;

    let mut out = vec![0f32; w * h];
    for (r, row) in pixels.chunks_exact(stride).enumerate() {
        let y = if top_down { r } else { h - 1 - r };
        let dst = &mut out[y * w..(y + 1) * w];
        if bits == 8 {
            for (d, &idx) in dst.iter_mut().zip(&row[..w]) {
                *d = *palette
                    .get(idx as usize)
                    .ok_or_else(|| Error::CorruptFile(format!("palette index {idx} out of range")))?;
            }
        } else {
            for (d, px) in dst.iter_mut().zip(row[..3 * w].chunks_exact(3)) {
                *d = luminance(px[2], px[1], px[0]);
            }
        }
    }
    ImageBuffer::new(h, w, out)
}

fn header(bits: u16, width: usize, height: usize, palette: usize) -> Vec<u8> {
    let stride = row_stride(bits as usize, width);
    let offset = FILE_HEADER + INFO_HEADER + 4 * palette;
    let size = offset + stride * height;
    let mut b = Vec::with_capacity(size);
    b.extend_from_slice(b"BM");
    b.extend_from_slice(&(size as u32).to_le_bytes());
    b.extend_from_slice(&0u32.to_le_bytes());
    b.extend_from_slice(&(offset as u32).to_le_bytes());
    b.extend_from_slice(&(INFO_HEADER as u32).to_le_bytes());
    b.extend_from_slice(&(width as i32).to_le_bytes());
    b.extend_from_slice(&(height as i32).to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&bits.to_le_bytes());
    b.extend_from_slice(&0u32.to_le_bytes());
    b.extend_from_slice(&((stride * height) as u32).to_le_bytes());
    b.extend_from_slice(&2835i32.to_le_bytes());
    b.extend_from_slice(&2835i32.to_le_bytes());
    b.extend_from_slice(&(palette as u32).to_le_bytes());
    b.extend_from_slice(&0u32.to_le_bytes());
    b
}

/// Encodes a grayscale image as a bottom-up 8-bit palette BMP. Values are
/// clamped to `[0,1]` and quantized to 256 levels.
pub fn encode_bmp_gray8(img: &ImageBuffer) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut b = header(8, w, h, 256);
    for i in 0..=255u8 {
        b.extend_from_slice(&[i, i, i, 0]);
    }
    let stride = row_stride(8, w);
    for y in (0..h).rev() {
        let start = b.len();
        b.extend(img.row(y).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        b.resize(start + stride, 0);
    }
    b
}

/// Encodes `(r, g, b)` pixels, row-major from the top, as a bottom-up
/// 24-bit BMP.
pub fn encode_bmp_rgb24(width: usize, height: usize, pixels: &[[u8; 3]]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut b = header(24, width, height, 0);
    let stride = row_stride(24, width);
    for y in (0..height).rev() {
        let start = b.len();
        for &[r, g, bl] in &pixels[y * width..(y + 1) * width] {
            b.extend_from_slice(&[bl, g, r]);
        }
        b.resize(start + stride, 0);
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_24_bit_is_full_scale() {
        let img = decode_bmp_bytes(&encode_bmp_rgb24(2, 2, &[[255; 3]; 4])).unwrap();
        assert_eq!((img.height(), img.width()), (2, 2));
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn red_maps_to_luminance_weight() {
        let img = decode_bmp_bytes(&encode_bmp_rgb24(1, 1, &[[255, 0, 0]])).unwrap();
        assert!((img.data()[0] - 0.299).abs() < 1e-7);
        let img = decode_bmp_bytes(&encode_bmp_rgb24(1, 1, &[[0, 255, 0]])).unwrap();
        assert!((img.data()[0] - 0.587).abs() < 1e-7);
        let img = decode_bmp_bytes(&encode_bmp_rgb24(1, 1, &[[0, 0, 255]])).unwrap();
        assert!((img.data()[0] - 0.114).abs() < 1e-7);
    }

    #[test]
    fn row_order_and_padding_24_bit() {
        // width 3 forces 3 bytes of row padding
        let px: Vec<[u8; 3]> = (0..6u8).map(|i| [i * 40, i * 40, i * 40]).collect();
        let img = decode_bmp_bytes(&encode_bmp_rgb24(3, 2, &px)).unwrap();
        for (i, &v) in img.data().iter().enumerate() {
            assert!((v - (i as f32 * 40.0) / 255.0).abs() < 1e-6, "pixel {i}");
        }
    }

    #[test]
    fn gray8_roundtrip_and_top_down() {
        let img = ImageBuffer::from_fn(3, 5, |y, x| (y * 5 + x) as f32 / 14.0);
        let bytes = encode_bmp_gray8(&img);
        let back = decode_bmp_bytes(&bytes).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        // flip to a top-down layout by negating the height and reversing rows
        let mut td = bytes.clone();
        td[22..26].copy_from_slice(&(-3i32).to_le_bytes());
        let offset = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let stride = row_stride(8, 5);
        for r in 0..3 {
            let src = offset + (2 - r) * stride;
            td[offset + r * stride..offset + (r + 1) * stride].copy_from_slice(&bytes[src..src + stride]);
        }
        assert_eq!(decode_bmp_bytes(&td).unwrap().data(), back.data());
    }

    #[test]
    fn palette_lookup_uses_luminance() {
        let img = ImageBuffer::from_fn(1, 2, |_, x| x as f32);
        let mut bytes = encode_bmp_gray8(&img);
        // recolour palette entry 255 to pure red (BGRA order)
        let entry = FILE_HEADER + INFO_HEADER + 4 * 255;
        bytes[entry..entry + 4].copy_from_slice(&[0, 0, 255, 0]);
        let back = decode_bmp_bytes(&bytes).unwrap();
        assert_eq!(back.data()[0], 0.0);
        assert!((back.data()[1] - 0.299).abs() < 1e-7);
    }

    #[test]
    fn rle_and_other_depths_unsupported() {
        let mut rle4 = header(4, 2, 2, 16);
        rle4[30..34].copy_from_slice(&2u32.to_le_bytes());
        rle4.resize(rle4.len() + 64 + 8, 0);
        assert!(matches!(decode_bmp_bytes(&rle4), Err(Error::UnsupportedFormat(_))));

        let mut b32 = header(32, 1, 1, 0);
        b32.resize(b32.len() + 4, 0);
        assert!(matches!(decode_bmp_bytes(&b32), Err(Error::UnsupportedFormat(_))));

        let mut rle8 = encode_bmp_gray8(&ImageBuffer::from_fn(2, 2, |_, _| 0.5));
        rle8[30..34].copy_from_slice(&1u32.to_le_bytes());
        assert!(matches!(decode_bmp_bytes(&rle8), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn truncation_is_corrupt() {
        let bytes = encode_bmp_rgb24(4, 4, &[[10, 20, 30]; 16]);
        for cut in [1, 10, 30, 54, bytes.len() - 1] {
            assert!(
                matches!(decode_bmp_bytes(&bytes[..cut]), Err(Error::CorruptFile(_))),
                "cut at {cut}"
            );
        }
        assert!(matches!(decode_bmp_bytes(b"PNG..."), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn reads_from_disk_with_path_context() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("1.1.bmp");
        std::fs::write(&p, encode_bmp_rgb24(1, 1, &[[255; 3]])).unwrap();
        assert_eq!(decode_bmp(&p).unwrap().data(), &[1.0]);
        let missing = dir.path().join("nope.bmp");
        match decode_bmp(&missing) {
            Err(Error::Io { path, .. }) => assert_eq!(path, missing),
            other => panic!("{other:?}"),
        }
    }
}
