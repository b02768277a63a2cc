//! Core domain types: images, latent pyramids, feature pyramids.

use crate::error::{DbafError, Result};
use ndarray::{Array2, Array3, Axis};

/// Row counts of the coarse / medium / fine latent levels.
pub const LEVEL_ROWS: [usize; 3] = [4, 4, 6];
/// Total style rows across the pyramid (4 + 4 + 6).
pub const TOTAL_ROWS: usize = 14;

/// Square RGB image with pixel values in [-1, 1], height == width a power of two.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
}

impl ImageTensor {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(DbafError::shape(format!("expected 3 channels, got {c}")));
        }
        if h != w || !h.is_power_of_two() {
            return Err(DbafError::shape(format!(
                "image must be square with power-of-two side, got {h}x{w}"
            )));
        }
        for &v in pixels.iter() {
            if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                return Err(DbafError::validation(format!(
                    "pixel value {v} outside [-1, 1]"
                )));
            }
        }
        Ok(Self { pixels })
    }

    /// Constructs without range checks; values are clamped into [-1, 1].
    pub fn from_raw_clamped(mut pixels: Array3<f64>) -> Result<Self> {
        pixels.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        Self::new(pixels)
    }

    pub fn zeros(size: usize) -> Result<Self> {
        Self::new(Array3::zeros((size, size, 3)))
    }

    pub fn size(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }
}

/// Three-level latent code stack: coarse 4 x d, medium 4 x d, fine 6 x d.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPyramid {
    pub coarse: Array2<f64>,
    pub medium: Array2<f64>,
    pub fine: Array2<f64>,
}

impl LatentPyramid {
    pub fn new(coarse: Array2<f64>, medium: Array2<f64>, fine: Array2<f64>) -> Result<Self> {
        let d = coarse.ncols();
        for (mat, rows, name) in [
            (&coarse, LEVEL_ROWS[0], "coarse"),
            (&medium, LEVEL_ROWS[1], "medium"),
            (&fine, LEVEL_ROWS[2], "fine"),
        ] {
            if mat.nrows() != rows || mat.ncols() != d {
                return Err(DbafError::shape(format!(
                    "{name} level must be {rows}x{d}, got {}x{}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
            if mat.iter().any(|v| !v.is_finite()) {
                return Err(DbafError::numeric(format!("{name} level has non-finite entries")));
            }
        }
        if d == 0 {
            return Err(DbafError::shape("code width d must be positive"));
        }
        Ok(Self { coarse, medium, fine })
    }

    pub fn zeros(d: usize) -> Result<Self> {
        Self::new(
            Array2::zeros((LEVEL_ROWS[0], d)),
            Array2::zeros((LEVEL_ROWS[1], d)),
            Array2::zeros((LEVEL_ROWS[2], d)),
        )
    }

    pub fn d(&self) -> usize {
        self.coarse.ncols()
    }

    pub fn levels(&self) -> [&Array2<f64>; 3] {
        [&self.coarse, &self.medium, &self.fine]
    }

    /// All 14 style rows stacked coarse-to-fine.
    pub fn stacked(&self) -> Array2<f64> {
        let mut out = Array2::zeros((TOTAL_ROWS, self.d()));
        out.slice_mut(ndarray::s![0..4, ..]).assign(&self.coarse);
        out.slice_mut(ndarray::s![4..8, ..]).assign(&self.medium);
        out.slice_mut(ndarray::s![8..14, ..]).assign(&self.fine);
        out
    }

    pub fn from_stacked(stack: &Array2<f64>) -> Result<Self> {
        if stack.nrows() != TOTAL_ROWS {
            return Err(DbafError::shape(format!(
                "stacked pyramid must have {TOTAL_ROWS} rows, got {}",
                stack.nrows()
            )));
        }
        Self::new(
            stack.slice(ndarray::s![0..4, ..]).to_owned(),
            stack.slice(ndarray::s![4..8, ..]).to_owned(),
            stack.slice(ndarray::s![8..14, ..]).to_owned(),
        )
    }

    /// Largest absolute entry-wise difference to another pyramid.
    pub fn linf_distance(&self, other: &LatentPyramid) -> f64 {
        self.levels()
            .iter()
            .zip(other.levels().iter())
            .map(|(a, b)| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
}

/// Multi-resolution spatial feature maps, ascending resolution, each square (k x k x channels).
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    maps: Vec<Array3<f64>>,
}

impl FeaturePyramid {
    pub fn new(maps: Vec<Array3<f64>>) -> Result<Self> {
        if maps.len() != 3 {
            return Err(DbafError::shape(format!(
                "feature pyramid must have 3 levels, got {}",
                maps.len()
            )));
        }
        let mut prev_k = 0usize;
        for (i, m) in maps.iter().enumerate() {
            let (h, w, _c) = m.dim();
            if h != w {
                return Err(DbafError::shape(format!(
                    "level {i} must be square, got {h}x{w}"
                )));
            }
            if h <= prev_k {
                return Err(DbafError::shape(
                    "feature levels must have strictly ascending resolution",
                ));
            }
            prev_k = h;
            if m.iter().any(|v| !v.is_finite()) {
                return Err(DbafError::numeric(format!("level {i} has non-finite entries")));
            }
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &[Array3<f64>] {
        &self.maps
    }

    pub fn resolutions(&self) -> [usize; 3] {
        [self.maps[0].dim().0, self.maps[1].dim().0, self.maps[2].dim().0]
    }

    pub fn channels(&self) -> [usize; 3] {
        [self.maps[0].dim().2, self.maps[1].dim().2, self.maps[2].dim().2]
    }
}

/// Attribute/identity split of a latent pyramid; attribute + identity == source.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledCodes {
    pub attribute: LatentPyramid,
    pub identity: LatentPyramid,
}

impl DisentangledCodes {
    /// Reconstructs the source pyramid (attribute + identity per level).
    pub fn recompose(&self) -> Result<LatentPyramid> {
        LatentPyramid::new(
            &self.attribute.coarse + &self.identity.coarse,
            &self.attribute.medium + &self.identity.medium,
            &self.attribute.fine + &self.identity.fine,
        )
    }
}

/// Mean of |a - b| over all entries of two equally sized images.
pub fn l1_pixel_distance(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let diff = a.pixels() - b.pixels();
    diff.mapv(f64::abs).mean().unwrap_or(0.0)
}

/// Largest absolute pixel difference between two images.
pub fn linf_pixel_distance(a: &ImageTensor, b: &ImageTensor) -> f64 {
    (a.pixels() - b.pixels())
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
}

/// Stacks per-level matrices of three levels along rows (used by tests and eval).
pub fn stack_levels(levels: [&Array2<f64>; 3]) -> Array2<f64> {
    let d = levels[0].ncols();
    let total: usize = levels.iter().map(|l| l.nrows()).sum();
    let mut out = Array2::zeros((total, d));
    let mut row = 0;
    for l in levels {
        out.slice_mut(ndarray::s![row..row + l.nrows(), ..]).assign(l);
        row += l.nrows();
    }
    out
}

/// Mean over an axis helper for small matrices (row mean).
pub fn row_mean(mat: &Array2<f64>) -> ndarray::Array1<f64> {
    mat.mean_axis(Axis(0)).expect("non-empty matrix")
}
