//! Raw float images with a text sidecar, plus graymap export.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::projector::ImageGrid;

/// `image.f32` is described by `image.f32.txt` holding `width height`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

/// Writes little-endian `f32` pixels in row-major order and the sidecar.
pub fn save_raw(path: &Path, img: &ImageGrid) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * img.len());
    for &v in img.pixels() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, format!("{} {}\n", img.width(), img.height())).map_err(|e| Error::io(&side, e))
}

pub fn load_raw(path: &Path) -> Result<ImageGrid> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let bad = |message: String| Error::Format {
        path: side.clone(),
        message,
    };
    let dims: Vec<usize> = text
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad(format!("not a size: {t:?}"))))
        .collect::<Result<_>>()?;
    let [w, h] = dims[..] else {
        return Err(bad(format!("expected `width height`, got {:?}", text.trim())));
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * w * h {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("{} bytes for a {w}x{h} float image", bytes.len()),
        });
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    ImageGrid::new(w, h, pixels)
}

/// Loads `.f32` raw images or any grayscale format the image crate reads,
/// the latter normalised to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<ImageGrid> {
    if path.extension().is_some_and(|e| e == "f32") {
        return load_raw(path);
    }
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?
        .to_luma32f();
    let (w, h) = img.dimensions();
    ImageGrid::new(w as usize, h as usize, img.into_raw().into_iter().map(f64::from).collect())
}

/// Binary graymap scaled from the image's own range to 0..=255.
pub fn save_pgm(path: &Path, img: &ImageGrid) -> Result<()> {
    let lo = img.pixels().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.max();
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let bytes: Vec<u8> = img
        .pixels()
        .iter()
        .map(|&v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, img.width() as u32, img.height() as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.f32");
        let pixels: Vec<f64> = (0..12).map(|i| (i as f32 * 0.37 - 1.1) as f64).collect();
        let img = ImageGrid::new(4, 3, pixels).unwrap();
        save_raw(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back, img);
        let first = fs::read(&path).unwrap();
        save_raw(&path, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        assert_eq!(fs::read_to_string(sidecar_path(&path)).unwrap(), "4 3\n");
    }

    #[test]
    fn pgm_round_trip_preserves_levels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = ImageGrid::new(2, 2, vec![0.0, 0.5, 1.0, 1.0]).unwrap();
        save_pgm(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.pixels()[0], 0.0);
        assert_eq!(back.pixels()[3], 1.0);
        assert!((back.pixels()[1] - 128.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn missing_and_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nope.f32");
        assert!(matches!(load_image(&path), Err(Error::Io { .. })));
        fs::write(&path, [0u8; 7]).unwrap();
        fs::write(sidecar_path(&path), "2 1\n").unwrap();
        assert!(matches!(load_image(&path), Err(Error::Format { .. })));
        fs::write(sidecar_path(&path), "two\n").unwrap();
        assert!(matches!(load_image(&path), Err(Error::Format { .. })));
        assert!(load_image(&dir.path().join("missing.png")).is_err());
    }
}
