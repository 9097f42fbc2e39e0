//! Binary PGM/PPM output and the heatmap-over-grayscale overlay.

use std::path::{Path, PathBuf};

use super::Heatmap;
use crate::data::ImageBuffer;
use crate::error::{Error, Result};

/// Peak opacity of the heatmap colour; a pixel with heat `h` is blended at `OVERLAY_ALPHA·h`.
pub const OVERLAY_ALPHA: f32 = 0.4;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit binary (P5) graymap of values in [0,1].
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes an 8-bit binary (P6) pixmap.
pub fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[[u8; 3]]) -> Result<()> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().flatten());
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A decoded P5 or P6 file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Reads a binary PGM/PPM with maxval 255 (comments allowed in the header).
pub fn read_pnm(path: &Path) -> Result<Pnm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Pnm(format!("{}: {why}", path.display()));
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
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported magic {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header field `{s}`")));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval} (only 255 is supported)")));
    }
    let n = width * height * channels;
    let data = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated raster"))?.to_vec();
    Ok(Pnm {
        width,
        height,
        channels,
        data,
    })
}

/// Paths written by [`render_overlay`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OverlayFiles {
    pub cam: PathBuf,
    pub overlay: PathBuf,
}

/// Red at low heat through yellow at full heat.
fn ramp(h: f32) -> [f32; 3] {
    [1.0, h, 0.0]
}

/// Writes `<subject>.<view>.cam.pgm` and `<subject>.<view>.overlay.ppm` into
/// `out_dir`. `original` is the grayscale view in [0,1] at the heatmap's size.
pub fn render_overlay(heatmap: &Heatmap, original: &ImageBuffer, out_dir: &Path) -> Result<OverlayFiles> {
    if (original.height(), original.width()) != (heatmap.height, heatmap.width) {
        return Err(Error::ShapeMismatch {
            op: "render_overlay",
            left: vec![heatmap.height, heatmap.width],
            right: vec![original.height(), original.width()],
        });
    }
    let stem = match heatmap.input_ref {
        Some((s, v)) => format!("{s}.{v}"),
        None => "input".to_string(),
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cam = out_dir.join(format!("{stem}.cam.pgm"));
    let overlay = out_dir.join(format!("{stem}.overlay.ppm"));
    write_pgm(&cam, heatmap.width, heatmap.height, &heatmap.values)?;

    let pixels: Vec<[u8; 3]> = heatmap
        .values
        .iter()
        .zip(original.data())
        .map(|(&h, &g)| {
            let a = OVERLAY_ALPHA * h;
            let c = ramp(h);
            [0, 1, 2].map(|i| to_byte((1.0 - a) * g + a * c[i]))
        })
        .collect();
    write_ppm(&overlay, heatmap.width, heatmap.height, &pixels)?;
    Ok(OverlayFiles { cam, overlay })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_header_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        std::fs::write(&p, b"P5\n# made by hand\n2 1\n255\n\x00\xff").unwrap();
        let img = read_pnm(&p).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 1));
        assert_eq!(img.data, vec![0, 255]);
    }

    #[test]
    fn truncated_and_foreign_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        std::fs::write(&p, b"P5\n4 4\n255\n\x00").unwrap();
        assert!(matches!(read_pnm(&p), Err(Error::Pnm(_))));
        std::fs::write(&p, b"P2\n1 1\n255\n0").unwrap();
        assert!(matches!(read_pnm(&p), Err(Error::Pnm(_))));
        std::fs::write(&p, b"P5\n1 1\n65535\n\x00\x00").unwrap();
        assert!(matches!(read_pnm(&p), Err(Error::Pnm(_))));
    }

    #[test]
    fn ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let px = vec![[1, 2, 3], [250, 128, 0]];
        write_ppm(&p, 2, 1, &px).unwrap();
        let img = read_pnm(&p).unwrap();
        assert_eq!(img.channels, 3);
        assert_eq!(img.data, vec![1, 2, 3, 250, 128, 0]);
    }
}
