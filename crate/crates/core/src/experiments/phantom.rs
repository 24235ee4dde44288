use std::path::Path;

use serde::{Deserialize, Serialize};

use super::files::load_image;
use crate::error::{Error, Result};
use crate::projector::ImageGrid;

pub const MIN_SIDE: usize = 16;

/// Gray values of the nested-disk phantom: background, outer disk, inner disk.
pub const THREE_LEVELS: [f64; 3] = [0.0, 0.5, 1.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    #[default]
    ThreeLevel,
    SheppLogan,
    File,
}

fn check_side(side: usize) -> Result<()> {
    if side < MIN_SIDE {
        return Err(Error::Config(format!(
            "phantom.side must be at least {MIN_SIDE}, got {side}"
        )));
    }
    Ok(())
}

/// Pixel centre in normalised coordinates, `[-1, 1]` across the grid with y up.
fn centre(side: usize, r: usize, c: usize) -> (f64, f64) {
    let h = side as f64 / 2.0;
    ((c as f64 + 0.5 - h) / h, (h - r as f64 - 0.5) / h)
}

fn sample(side: usize, f: impl Fn(f64, f64) -> f64) -> ImageGrid {
    let mut pixels = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let (x, y) = centre(side, r, c);
            pixels.push(f(x, y));
        }
    }
    ImageGrid::new(side, side, pixels).expect("sampled grid matches its shape")
}

/// Off-centre disk of value 1 inside a disk of value 0.5 on a zero background.
pub fn three_level(side: usize) -> Result<ImageGrid> {
    check_side(side)?;
    Ok(sample(side, |x, y| {
        if (x - 0.15).powi(2) + (y - 0.1).powi(2) <= 0.35f64.powi(2) {
            THREE_LEVELS[2]
        } else if x * x + y * y <= 0.75f64.powi(2) {
            THREE_LEVELS[1]
        } else {
            THREE_LEVELS[0]
        }
    }))
}

// (intensity, semi-axis a, semi-axis b, centre x, centre y, rotation in degrees)
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

/// Modified Shepp-Logan head phantom with contrast-enhanced intensities.
pub fn shepp_logan(side: usize) -> Result<ImageGrid> {
    check_side(side)?;
    Ok(sample(side, |x, y| {
        let mut v = 0.0;
        for &(a, sa, sb, cx, cy, deg) in &SHEPP_LOGAN {
            let (s, c) = deg.to_radians().sin_cos();
            let (dx, dy) = (x - cx, y - cy);
            let (u, w) = (dx * c + dy * s, -dx * s + dy * c);
            if (u / sa).powi(2) + (w / sb).powi(2) <= 1.0 {
                v += a;
            }
        }
        v.clamp(0.0, 1.0)
    }))
}

/// Builds a phantom; `File` loads a square grayscale image from `path`.
pub fn make_phantom(kind: PhantomKind, side: usize, path: Option<&Path>) -> Result<ImageGrid> {
    match kind {
        PhantomKind::ThreeLevel => three_level(side),
        PhantomKind::SheppLogan => shepp_logan(side),
        PhantomKind::File => {
            let path =
                path.ok_or_else(|| Error::Config("phantom.path is required for kind = \"file\"".into()))?;
            let img = load_image(path)?;
            if img.width() != img.height() || img.width() < MIN_SIDE {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!(
                        "phantom must be square with side at least {MIN_SIDE}, got {}x{}",
                        img.width(),
                        img.height()
                    ),
                });
            }
            Ok(img)
        }
    }
}
