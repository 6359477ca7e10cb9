//! Ground-truth patch correspondences from depth: lift each source patch
//! centre to 3D, move it into the target camera and pick the nearest masked
//! target patch.
//!
//! Depth rasters use the `GPDP` container:
//! `magic "GPDP" | version u16 | H u32 | W u32 | H*W f32 mm (row-major)`.

use std::collections::HashSet;
use std::io::{Read, Write};

use nalgebra::Vector2;

use crate::binio::{put_f32s, put_u16, put_u32, ByteReader};
use crate::error::{invalid, Error, Result};
use crate::featuregrid::{patch_center, PatchGeometry, PatchIndex};
use crate::geometry::{CameraIntrinsics, Pose6D};
use crate::matching::Correspondence;
use crate::par::{self, Execution};

pub const DEPTH_MAGIC: &[u8; 4] = b"GPDP";
pub const DEPTH_VERSION: u16 = 1;

/// Depth raster in mm, 0 where invalid. Pixel `(x, y)` has its centre at
/// integer coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid(format!("depth map {height}x{width} is empty")));
        }
        if data.len() != height * width {
            return Err(invalid(format!(
                "depth map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid(format!("depth value {v} is negative or not finite")));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Depth at the pixel nearest to `p`, `None` when outside or invalid.
    pub fn sample(&self, p: &Vector2<f64>) -> Option<f64> {
        let (x, y) = (p.x.round(), p.y.round());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        let d = self.data[y as usize * self.width + x as usize];
        (d > 0.0).then_some(d as f64)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DEPTH_MAGIC)?;
        put_u16(w, DEPTH_VERSION)?;
        put_u32(w, self.height as u32)?;
        put_u32(w, self.width as u32)?;
        put_f32s(w, &self.data)?;
        Ok(())
    }

    pub fn read(r: impl Read) -> Result<Self> {
        let mut r = ByteReader::new(r);
        r.expect_magic(DEPTH_MAGIC)?;
        let version = r.u16()?;
        if version != DEPTH_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported GPDP version {version}"),
            });
        }
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let n = height.checked_mul(width).ok_or_else(|| Error::Format {
            offset: 6,
            message: format!("depth size {height}x{width} overflows"),
        })?;
        let data = r.f32_vec(n)?;
        Self::new(height, width, data).map_err(|e| Error::Format {
            offset: 14,
            message: e.to_string(),
        })
    }
}

/// A processed crop with depth, intrinsics of the processed image, the
/// object-to-camera pose and the patch mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthView {
    pub depth: DepthMap,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose6D,
    pub mask: Vec<bool>,
}

impl DepthView {
    fn check(&self, geom: &PatchGeometry) -> Result<()> {
        if self.mask.len() != geom.cells() {
            return Err(invalid(format!(
                "mask has {} cells, geometry expects {}",
                self.mask.len(),
                geom.cells()
            )));
        }
        Ok(())
    }
}

fn nearest_masked(target: &DepthView, p: &Vector2<f64>, geom: &PatchGeometry) -> Option<PatchIndex> {
    let side = geom.grid_side as usize;
    let mut best: Option<(f64, PatchIndex)> = None;
    for cell in (0..side * side).filter(|&c| target.mask[c]) {
        let idx = PatchIndex::new(cell / side, cell % side);
        let d = (patch_center(idx, geom).ok()? - p).norm_squared();
        // strict comparison keeps the first cell in row-major order on ties
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, idx));
        }
    }
    best.map(|(_, i)| i)
}

/// Correspondences from masked source patches to target patches. Source
/// patches without valid depth, or whose projection lands outside the target
/// mask or behind the camera, are skipped.
pub fn reproject_correspondences(source: &DepthView, target: &DepthView, geom: &PatchGeometry) -> Result<Vec<Correspondence>> {
    source.check(geom)?;
    target.check(geom)?;
    let relative = target.pose.compose(&source.pose.inverse());
    let side = geom.grid_side as usize;
    let found = par::map_range(Execution::default(), side * side, |cell| {
        if !source.mask[cell] {
            return None;
        }
        let i = PatchIndex::new(cell / side, cell % side);
        let p = patch_center(i, geom).ok()?;
        let z = source.depth.sample(&p)?;
        let x = relative.transform(&source.intrinsics.backproject(&p, z));
        if !(x.z > 0.0) {
            return None;
        }
        let q = target.intrinsics.project(&x);
        let containing = geom.patch_at(&q)?;
        if !target.mask[containing.row * side + containing.col] {
            return None;
        }
        Some(Correspondence {
            query_index: i,
            template_index: nearest_masked(target, &q, geom)?,
            score: 1.0,
        })
    });
    Ok(found.into_iter().flatten().collect())
}

/// Union of forward correspondences and reversed backward ones, without
/// duplicate `(source, target)` pairs. Forward order is kept; new backward
/// pairs follow.
pub fn symmetrize(forward: &[Correspondence], backward: &[Correspondence]) -> Vec<Correspondence> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(forward.len() + backward.len());
    let reversed = backward.iter().map(|c| Correspondence {
        query_index: c.template_index,
        template_index: c.query_index,
        score: c.score,
    });
    for c in forward.iter().copied().chain(reversed) {
        if seen.insert((c.query_index, c.template_index)) {
            out.push(c);
        }
    }
    out
}
