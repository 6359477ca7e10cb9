//! Dense patch-feature grids with patch-level masks.

mod crop;
mod format;
pub mod synth;

pub use crop::{crop_transform, CropTransform};
pub use format::{decode_grid, encode_grid, read_grid, write_grid, GRID_MAGIC, GRID_VERSION};

use nalgebra::Vector2;

use crate::error::{invalid, Error, Result};

/// Tolerance on the unit norm of masked descriptors.
pub const NORM_TOLERANCE: f64 = 1e-5;

/// Row/column address of a patch in the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PatchIndex {
    pub row: usize,
    pub col: usize,
}

impl PatchIndex {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Pixel layout of the processed crop: `patch_size * grid_side == image_side`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub patch_size: u32,
    pub grid_side: u32,
    pub image_side: u32,
}

impl Default for PatchGeometry {
    fn default() -> Self {
        Self {
            patch_size: 14,
            grid_side: 16,
            image_side: 224,
        }
    }
}

impl PatchGeometry {
    pub fn new(patch_size: u32, grid_side: u32, image_side: u32) -> Result<Self> {
        if patch_size == 0 || grid_side == 0 || patch_size * grid_side != image_side {
            return Err(invalid(format!(
                "patch size {patch_size} x grid side {grid_side} must equal image side {image_side}"
            )));
        }
        Ok(Self {
            patch_size,
            grid_side,
            image_side,
        })
    }

    pub fn cells(&self) -> usize {
        (self.grid_side * self.grid_side) as usize
    }

    /// Centre of the processed image.
    pub fn image_center(&self) -> Vector2<f64> {
        let c = self.image_side as f64 / 2.0;
        Vector2::new(c, c)
    }

    /// Patch containing a processed-image pixel, if inside the grid.
    pub fn patch_at(&self, p: &Vector2<f64>) -> Option<PatchIndex> {
        let size = self.patch_size as f64;
        let (c, r) = ((p.x / size).floor(), (p.y / size).floor());
        let side = self.grid_side as f64;
        if c >= 0.0 && r >= 0.0 && c < side && r < side {
            Some(PatchIndex::new(r as usize, c as usize))
        } else {
            None
        }
    }
}

/// Centre of a patch in processed-image pixels (x right, y down).
pub fn patch_center(index: PatchIndex, geom: &PatchGeometry) -> Result<Vector2<f64>> {
    let side = geom.grid_side as usize;
    if index.row >= side || index.col >= side {
        return Err(invalid(format!(
            "patch ({}, {}) outside {side}x{side} grid",
            index.row, index.col
        )));
    }
    let size = geom.patch_size as f64;
    Ok(Vector2::new(
        size * index.col as f64 + size / 2.0,
        size * index.row as f64 + size / 2.0,
    ))
}

/// Dot product with f64 accumulation in index order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine similarity clamped to [-1, 1].
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!("descriptor lengths differ: {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(invalid("cosine similarity of a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// H x W grid of D-dimensional descriptors. Masked cells hold unit vectors,
/// unmasked cells are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    dim: usize,
    variant: bool,
    data: Vec<f32>,
    mask: Vec<bool>,
}

impl FeatureGrid {
    /// Builds a grid from already-normalized data, checking the invariants.
    pub fn from_parts(
        height: usize,
        width: usize,
        dim: usize,
        data: Vec<f32>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let grid = Self::unchecked(height, width, dim, data, mask)?;
        if let Some((cell, msg)) = grid.first_violation() {
            return Err(invalid(format!("cell {cell}: {msg}")));
        }
        Ok(grid)
    }

    /// Normalizes masked descriptors (in f64) and zeroes unmasked ones.
    pub fn from_unnormalized(
        height: usize,
        width: usize,
        dim: usize,
        mut data: Vec<f32>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if dim == 0 || data.len() != height * width * dim || mask.len() != height * width {
            return Err(invalid("grid dimensions do not match buffer lengths"));
        }
        for (cell, chunk) in data.chunks_exact_mut(dim).enumerate() {
            if mask[cell] {
                let norm = dot(chunk, chunk).sqrt();
                if !(norm > 0.0) || !norm.is_finite() {
                    return Err(invalid(format!("masked cell {cell} has zero or non-finite descriptor")));
                }
                for v in chunk.iter_mut() {
                    *v = (*v as f64 / norm) as f32;
                }
            } else {
                chunk.fill(0.0);
            }
        }
        Self::from_parts(height, width, dim, data, mask)
    }

    fn unchecked(height: usize, width: usize, dim: usize, data: Vec<f32>, mask: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(invalid("grid dimensions must be positive"));
        }
        if data.len() != height * width * dim {
            return Err(invalid(format!(
                "data length {} != {height}x{width}x{dim}",
                data.len()
            )));
        }
        if mask.len() != height * width {
            return Err(invalid(format!("mask length {} != {height}x{width}", mask.len())));
        }
        Ok(Self {
            height,
            width,
            dim,
            variant: false,
            data,
            mask,
        })
    }

    fn first_violation(&self) -> Option<(usize, String)> {
        for (cell, chunk) in self.data.chunks_exact(self.dim).enumerate() {
            if self.mask[cell] {
                let norm = dot(chunk, chunk).sqrt();
                if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
                    return Some((cell, format!("masked descriptor norm {norm} is not unit")));
                }
            } else if chunk.iter().any(|&v| v != 0.0) {
                return Some((cell, "unmasked descriptor is not zero".into()));
            }
        }
        None
    }

    /// Marks the grid as holding variant (scale/rotation sensitive) features.
    pub fn with_variant(mut self, variant: bool) -> Self {
        self.variant = variant;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_variant(&self) -> bool {
        self.variant
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn cell(&self, index: PatchIndex) -> usize {
        index.row * self.width + index.col
    }

    pub fn index_of(&self, cell: usize) -> PatchIndex {
        PatchIndex::new(cell / self.width, cell % self.width)
    }

    pub fn contains(&self, index: PatchIndex) -> bool {
        index.row < self.height && index.col < self.width
    }

    pub fn is_masked(&self, index: PatchIndex) -> bool {
        self.contains(index) && self.mask[self.cell(index)]
    }

    pub fn descriptor(&self, index: PatchIndex) -> &[f32] {
        self.cell_descriptor(self.cell(index))
    }

    pub fn cell_descriptor(&self, cell: usize) -> &[f32] {
        &self.data[cell * self.dim..(cell + 1) * self.dim]
    }

    /// Masked cells in row-major order.
    pub fn masked_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn matches_geometry(&self, geom: &PatchGeometry) -> bool {
        self.height == geom.grid_side as usize && self.width == geom.grid_side as usize
    }
}

pub(crate) fn format_error(offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}
