//! Discrete parallel-beam x-ray transform.
//!
//! The image occupies a square grid of unit pixels centred on the origin.
//! Pixel `(row, col)` covers `x ∈ [col − s/2, col + 1 − s/2]` and
//! `y ∈ [s/2 − row − 1, s/2 − row]`, so row 0 is the top of the image.
//!
//! The ray for angle `θ` and detector coordinate `t` is the line
//! `(t cosθ − τ sinθ, t sinθ + τ cosθ)` parameterised by `τ`. At 0° rays are
//! vertical lines `x = t`; at 90° they are horizontal lines `y = t`.
//! Each row of the system matrix holds the exact intersection lengths of one
//! ray with the pixels it crosses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Acquisition geometry for a square image grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    /// Projection angles in degrees, strictly increasing in `[0, 180)`.
    pub angles: Vec<f64>,
    pub n_detectors: usize,
    /// Bin pitch in pixel units.
    pub detector_spacing: f64,
    pub image_side: usize,
}

impl ScanGeometry {
    /// `n_angles` evenly spaced angles over `[0, 180)`.
    pub fn uniform(n_angles: usize, n_detectors: usize, image_side: usize) -> Self {
        let step = 180.0 / n_angles.max(1) as f64;
        ScanGeometry {
            angles: (0..n_angles).map(|i| i as f64 * step).collect(),
            n_detectors,
            detector_spacing: 1.0,
            image_side,
        }
    }

    /// Smallest detector count whose unit-pitch line spans the grid diagonal.
    pub fn diagonal_detectors(image_side: usize) -> usize {
        (image_side as f64 * std::f64::consts::SQRT_2).ceil() as usize
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn n_rays(&self) -> usize {
        self.n_angles() * self.n_detectors
    }

    pub fn validate(&self) -> Result<()> {
        if self.angles.is_empty() {
            return Err(Error::Geometry("at least one angle is required".into()));
        }
        if self.n_detectors == 0 {
            return Err(Error::Geometry("at least one detector bin is required".into()));
        }
        if self.image_side == 0 {
            return Err(Error::Geometry("image side must be positive".into()));
        }
        if !(self.detector_spacing.is_finite() && self.detector_spacing > 0.0) {
            return Err(Error::Geometry(format!(
                "detector spacing must be positive, got {}",
                self.detector_spacing
            )));
        }
        for (i, &a) in self.angles.iter().enumerate() {
            if !(0.0..180.0).contains(&a) {
                return Err(Error::Geometry(format!("angle {a} outside [0, 180)")));
            }
            if i > 0 && a <= self.angles[i - 1] {
                return Err(Error::Geometry(
                    "angles must be unique and strictly increasing".into(),
                ));
            }
        }
        let span = self.n_detectors as f64 * self.detector_spacing;
        if span + 1e-9 < self.image_side as f64 {
            return Err(Error::Geometry(format!(
                "detector line of width {span} does not cover a grid of side {}",
                self.image_side
            )));
        }
        Ok(())
    }

    /// Signed coordinate of the centre of detector bin `bin`.
    pub fn detector_offset(&self, bin: usize) -> f64 {
        (bin as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_spacing
    }
}

/// Row-major image with `width · height` finite pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::dim("image pixels", width * height, pixels.len()));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("image contains non-finite values".into()));
        }
        Ok(ImageGrid {
            width,
            height,
            pixels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        ImageGrid {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Embeds the image at the centre of a zero-filled `side × side` grid.
    pub fn pad_to(&self, side: usize) -> Result<ImageGrid> {
        if side < self.width || side < self.height {
            return Err(Error::Geometry(format!(
                "cannot pad {}x{} into {side}x{side}",
                self.width, self.height
            )));
        }
        let (r0, c0) = ((side - self.height) / 2, (side - self.width) / 2);
        let mut out = ImageGrid::zeros(side, side);
        for r in 0..self.height {
            let src = &self.pixels[r * self.width..(r + 1) * self.width];
            let start = (r + r0) * side + c0;
            out.pixels[start..start + self.width].copy_from_slice(src);
        }
        Ok(out)
    }

    /// Inverse of [`ImageGrid::pad_to`]: the centred `width × height` window.
    pub fn crop_center(&self, width: usize, height: usize) -> Result<ImageGrid> {
        if width > self.width || height > self.height {
            return Err(Error::Geometry(format!(
                "cannot crop {width}x{height} from {}x{}",
                self.width, self.height
            )));
        }
        let (r0, c0) = ((self.height - height) / 2, (self.width - width) / 2);
        let mut pixels = Vec::with_capacity(width * height);
        for r in 0..height {
            let start = (r + r0) * self.width + c0;
            pixels.extend_from_slice(&self.pixels[start..start + width]);
        }
        Ok(ImageGrid {
            width,
            height,
            pixels,
        })
    }

    /// Side length used when padding so that rotated chords stay inside the grid.
    pub fn padded_side(side: usize) -> usize {
        ScanGeometry::diagonal_detectors(side)
    }
}

/// Projection data, one row of detector readings per angle.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    n_angles: usize,
    n_detectors: usize,
    values: Vec<f64>,
}

impl Sinogram {
    pub fn new(n_angles: usize, n_detectors: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_angles * n_detectors {
            return Err(Error::dim("sinogram values", n_angles * n_detectors, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("sinogram contains non-finite values".into()));
        }
        Ok(Sinogram {
            n_angles,
            n_detectors,
            values,
        })
    }

    pub fn zeros(n_angles: usize, n_detectors: usize) -> Self {
        Sinogram {
            n_angles,
            n_detectors,
            values: vec![0.0; n_angles * n_detectors],
        }
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, angle: usize) -> &[f64] {
        &self.values[angle * self.n_detectors..(angle + 1) * self.n_detectors]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sub-sinogram holding the listed angle rows, in the given order.
    pub fn select_angles(&self, angles: &[usize]) -> Sinogram {
        let mut values = Vec::with_capacity(angles.len() * self.n_detectors);
        for &a in angles {
            values.extend_from_slice(self.row(a));
        }
        Sinogram {
            n_angles: angles.len(),
            n_detectors: self.n_detectors,
            values,
        }
    }
}

/// System matrix in compressed sparse row form.
///
/// Rows are grouped by angle: row `a · n_detectors + b` is bin `b` at angle `a`.
#[derive(Clone, Debug)]
pub struct SparseProjector {
    n_angles: usize,
    n_detectors: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
}

impl SparseProjector {
    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn nnz(&self) -> usize {
        self.weights.len()
    }

    /// `(pixel_index, intersection_length)` pairs of ray `j`.
    pub fn row(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[j]..self.row_ptr[j + 1];
        self.cols[span.clone()]
            .iter()
            .zip(&self.weights[span])
            .map(|(&c, &w)| (c as usize, w))
    }

    pub fn row_len(&self, j: usize) -> usize {
        self.row_ptr[j + 1] - self.row_ptr[j]
    }

    /// `out = P · u` on raw buffers.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(u.len(), self.n_cols);
        debug_assert_eq!(out.len(), self.n_rows());
        for (j, o) in out.iter_mut().enumerate() {
            let span = self.row_ptr[j]..self.row_ptr[j + 1];
            *o = self.cols[span.clone()]
                .iter()
                .zip(&self.weights[span])
                .map(|(&c, &w)| w * u[c as usize])
                .sum();
        }
    }

    /// `out = Pᵀ · d` on raw buffers.
    pub fn apply_transpose(&self, d: &[f64], out: &mut [f64]) {
        debug_assert_eq!(d.len(), self.n_rows());
        debug_assert_eq!(out.len(), self.n_cols);
        out.fill(0.0);
        for (j, &dj) in d.iter().enumerate() {
            if dj == 0.0 {
                continue;
            }
            let span = self.row_ptr[j]..self.row_ptr[j + 1];
            for (&c, &w) in self.cols[span.clone()].iter().zip(&self.weights[span]) {
                out[c as usize] += w * dj;
            }
        }
    }

    /// Projector restricted to the rows of the listed angles, in that order.
    pub fn select_angles(&self, angles: &[usize]) -> SparseProjector {
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        for &a in angles {
            for b in 0..self.n_detectors {
                let j = a * self.n_detectors + b;
                let span = self.row_ptr[j]..self.row_ptr[j + 1];
                cols.extend_from_slice(&self.cols[span.clone()]);
                weights.extend_from_slice(&self.weights[span]);
                row_ptr.push(cols.len());
            }
        }
        SparseProjector {
            n_angles: angles.len(),
            n_detectors: self.n_detectors,
            n_cols: self.n_cols,
            row_ptr,
            cols,
            weights,
        }
    }

    /// Power-iteration estimate of the largest eigenvalue of `PᵀP`.
    ///
    /// Gradient steps on `½‖Pu − d‖²` are stable for `η < 2 / estimate`.
    pub fn gram_norm_estimate(&self, iterations: usize) -> f64 {
        if self.nnz() == 0 {
            return 0.0;
        }
        let mut v = vec![1.0 / (self.n_cols as f64).sqrt(); self.n_cols];
        let mut pv = vec![0.0; self.n_rows()];
        let mut w = vec![0.0; self.n_cols];
        let mut estimate = 0.0;
        for _ in 0..iterations.max(1) {
            self.apply(&v, &mut pv);
            self.apply_transpose(&pv, &mut w);
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            estimate = norm;
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = wi / norm;
            }
        }
        estimate
    }
}

/// Builds the exact-length system matrix for a parallel-beam geometry.
pub fn build_projector(geom: &ScanGeometry) -> Result<SparseProjector> {
    geom.validate()?;
    let side = geom.image_side;
    let mut row_ptr = Vec::with_capacity(geom.n_rays() + 1);
    row_ptr.push(0);
    let mut cols = Vec::new();
    let mut weights = Vec::new();
    let mut crossings = Vec::with_capacity(2 * side + 4);
    let mut ray = Vec::with_capacity(2 * side);

    for &angle in &geom.angles {
        let (sin, cos) = snapped_sin_cos(angle);
        for bin in 0..geom.n_detectors {
            let t = geom.detector_offset(bin);
            trace_ray(side, t, cos, sin, &mut crossings, &mut ray);
            for &(c, w) in &ray {
                cols.push(c as u32);
                weights.push(w);
            }
            row_ptr.push(cols.len());
        }
    }

    Ok(SparseProjector {
        n_angles: geom.n_angles(),
        n_detectors: geom.n_detectors,
        n_cols: side * side,
        row_ptr,
        cols,
        weights,
    })
}

pub fn forward_project(p: &SparseProjector, u: &ImageGrid) -> Result<Sinogram> {
    if u.len() != p.n_cols() {
        return Err(Error::dim("forward projection", p.n_cols(), u.len()));
    }
    let mut values = vec![0.0; p.n_rows()];
    p.apply(u.pixels(), &mut values);
    Ok(Sinogram {
        n_angles: p.n_angles,
        n_detectors: p.n_detectors,
        values,
    })
}

pub fn back_project(p: &SparseProjector, d: &Sinogram) -> Result<ImageGrid> {
    if d.len() != p.n_rows() {
        return Err(Error::dim("back projection", p.n_rows(), d.len()));
    }
    let side = (p.n_cols() as f64).sqrt().round() as usize;
    let mut pixels = vec![0.0; p.n_cols()];
    p.apply_transpose(d.values(), &mut pixels);
    Ok(ImageGrid {
        width: side,
        height: p.n_cols() / side.max(1),
        pixels,
    })
}

/// `sin`/`cos` of an angle in degrees with values within 1e-12 of 0 or ±1 snapped,
/// so axis-aligned rays stay exactly axis-aligned.
fn snapped_sin_cos(degrees: f64) -> (f64, f64) {
    let snap = |v: f64| {
        if v.abs() < 1e-12 {
            0.0
        } else if (v.abs() - 1.0).abs() < 1e-12 {
            v.signum()
        } else {
            v
        }
    };
    let (s, c) = degrees.to_radians().sin_cos();
    (snap(s), snap(c))
}

/// Parametric traversal of one ray through the grid, writing merged
/// `(pixel, length)` pairs into `out`.
///
/// A ray lying exactly on a pixel boundary is assigned to the pixel on the
/// positive-coordinate side; that falls out of the `floor` used to locate
/// each segment's midpoint.
fn trace_ray(
    side: usize,
    t: f64,
    cos: f64,
    sin: f64,
    crossings: &mut Vec<f64>,
    out: &mut Vec<(usize, f64)>,
) {
    out.clear();
    crossings.clear();
    let half = side as f64 / 2.0;
    let origin = [t * cos, t * sin];
    let dir = [-sin, cos];

    let mut enter = f64::NEG_INFINITY;
    let mut exit = f64::INFINITY;
    for axis in 0..2 {
        if dir[axis] == 0.0 {
            if origin[axis] < -half || origin[axis] >= half {
                return;
            }
        } else {
            let a = (-half - origin[axis]) / dir[axis];
            let b = (half - origin[axis]) / dir[axis];
            enter = enter.max(a.min(b));
            exit = exit.min(a.max(b));
        }
    }
    if exit <= enter {
        return;
    }

    crossings.push(enter);
    for axis in 0..2 {
        if dir[axis] == 0.0 {
            continue;
        }
        for i in 1..side {
            let plane = i as f64 - half;
            let s = (plane - origin[axis]) / dir[axis];
            if s > enter && s < exit {
                crossings.push(s);
            }
        }
    }
    crossings.push(exit);
    crossings.sort_by(f64::total_cmp);

    let last = side - 1;
    for pair in crossings.windows(2) {
        let len = pair[1] - pair[0];
        if len <= 1e-12 {
            continue;
        }
        let mid = 0.5 * (pair[0] + pair[1]);
        let x = origin[0] + mid * dir[0];
        let y = origin[1] + mid * dir[1];
        let col = ((x + half).floor().max(0.0) as usize).min(last);
        let iy = ((y + half).floor().max(0.0) as usize).min(last);
        let pixel = (last - iy) * side + col;
        match out.last_mut() {
            Some((p, w)) if *p == pixel => *w += len,
            _ => out.push((pixel, len)),
        }
    }
}
